#include "helpers.hpp"

#include "revprag/corpus.hpp"
#include "revprag/retrieve.hpp"
#include "revprag/rng.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace revprag;

namespace {

std::vector<Document> docs_from(const std::vector<std::string>& texts)
{
    std::vector<Document> out;
    for (std::uint32_t i = 0; i < texts.size(); ++i)
        out.push_back({i, texts[i], std::nullopt, i});
    return out;
}

// Scores every document by an explicit loop, then sorts.
std::vector<RetrievalEntry> brute_force(std::span<const Document> docs, std::string_view query, std::size_t k,
                                        const EmbedConfig& c)
{
    const auto q = encode(query, Role::query, c);
    std::vector<RetrievalEntry> all;
    for (const auto& d : docs) {
        const auto p = encode(d.text, Role::passage, c);
        double ab = 0.0, aa = 0.0, bb = 0.0;
        for (std::size_t i = 0; i < q.size(); ++i) {
            ab += static_cast<double>(q[i]) * p[i];
            aa += static_cast<double>(q[i]) * q[i];
            bb += static_cast<double>(p[i]) * p[i];
        }
        double s = ab;
        if (c.metric == Metric::cosine)
            s = aa == 0.0 || bb == 0.0 ? 0.0 : std::clamp(ab / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0);
        all.push_back({d.id, s});
    }
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
        return a.score != b.score ? a.score > b.score : a.doc_id < b.doc_id;
    });
    all.resize(std::min(k, all.size()));
    return all;
}

} // namespace

TEST_CASE("build_index: empty, counted and reproducible")
{
    const EmbedConfig c;
    const auto empty = Index::build({}, c);
    CHECK(empty.size() == 0);
    CHECK(empty.top_k("anything", 5).entries.empty());

    const auto corpus = gen_synthetic({100, 0, 0.5, 0});
    const auto idx = Index::build(corpus.documents(), c);
    CHECK(idx.size() == 100);
    const auto again = Index::build(corpus.documents(), c);
    for (std::size_t r = 0; r < idx.size(); ++r)
        CHECK(std::ranges::equal(idx.vector(r), again.vector(r)));
}

TEST_CASE("top_k: boundaries")
{
    const auto docs = docs_from({"alpha beta", "beta gamma", "gamma delta"});
    const auto idx = Index::build(docs, {});
    CHECK(idx.top_k("beta", 0).entries.empty());
    const auto all = idx.top_k("beta", 10);
    CHECK(all.k_requested == 10);
    REQUIRE(all.entries.size() == 3);
    CHECK(all.entries == brute_force(docs, "beta", 10, {}));
}

TEST_CASE("top_k: three documents, k = 2, matches the independent scoring loop")
{
    const auto docs = docs_from({"the tall red tower", "a small red house", "green fields far away"});
    const auto idx = Index::build(docs, {});
    const auto r = idx.top_k("the tall red tower", 2);
    const auto oracle = brute_force(docs, "the tall red tower", 2, {});
    CHECK(r.entries == oracle);
    CHECK(r.entries[0].doc_id == 0);
}

TEST_CASE("top_k: ties go to the lower document id")
{
    const auto docs = docs_from({"unrelated words", "same text", "same text", "same text"});
    const auto r = Index::build(docs, {}).top_k("same text", 2);
    REQUIRE(r.entries.size() == 2);
    CHECK(r.entries[0].doc_id == 1);
    CHECK(r.entries[1].doc_id == 2);
}

TEST_CASE("top_k: equals brute force on 100 random queries over 1000 documents")
{
    const auto corpus = gen_synthetic({1000, 4, 0.5, 0});
    for (Metric metric : {Metric::dot, Metric::cosine})
        for (bool l2 : {true, false}) {
            EmbedConfig c;
            c.metric = metric;
            c.l2norm = l2;
            const auto idx = Index::build(corpus.documents(), c);
            Rng rng(17);
            for (int q = 0; q < 100; ++q) {
                const auto& t = corpus.triple(static_cast<std::uint32_t>(rng.below(1000)));
                const auto query = q % 2 ? t.question : t.supporting_text.substr(0, 12 + rng.below(20));
                REQUIRE(idx.top_k(query, 5).entries == brute_force(corpus.documents(), query, 5, c));
            }
        }
}

TEST_CASE("top_k: texts scoring above every clean text fill the top k <= m")
{
    auto docs = docs_from({"cats sleep all day", "dogs bark at night", "birds sing at dawn"});
    const std::string q = "where is the golden key hidden";
    for (std::uint32_t i = 0; i < 3; ++i)
        docs.push_back({static_cast<std::uint32_t>(3 + i), q + " variant " + std::to_string(i), AttackKind::poisonedrag,
                        std::nullopt});
    const auto idx = Index::build(docs, {});
    for (std::size_t k = 1; k <= 3; ++k)
        for (const auto& e : idx.top_k(q, k).entries)
            CHECK(e.doc_id >= 3);
}

TEST_CASE("index persistence round-trips")
{
    testing::TempDir dir("index");
    const auto corpus = gen_synthetic({30, 0, 0.5});
    const auto idx = Index::build(corpus.documents(), {});
    idx.save(dir / "i.bin");
    const auto back = Index::load(dir / "i.bin");
    REQUIRE(back.size() == idx.size());
    CHECK(back.top_k(corpus.triple(3).question, 5).entries == idx.top_k(corpus.triple(3).question, 5).entries);
}
