#include "helpers.hpp"

#include "revprag/probedata.hpp"

#include <doctest.h>

#include <cmath>
#include <set>

using namespace revprag;

namespace {

QATriple capital() { return {0, "capital of france ?", "the capital of france is paris .", "paris", "lyon"}; }

} // namespace

TEST_CASE("label_answer: closed mode compares word sequences")
{
    const auto t = capital();
    const CollectOptions closed;
    CHECK(label_answer("paris", t, closed) == label_correct);
    CHECK(label_answer("  paris ", t, closed) == label_correct);
    CHECK(label_answer("lyon", t, closed) == label_poisoned);
    CHECK_FALSE(label_answer("rome", t, closed).has_value());
    CHECK_FALSE(label_answer("paris lyon", t, closed).has_value());
    CHECK_FALSE(label_answer("", t, closed).has_value());

    auto benign = t;
    benign.target_answer.reset();
    CHECK_FALSE(label_answer("lyon", benign, closed).has_value());
}

TEST_CASE("label_answer: open mode uses the encoder cosine, tau and the tie rule")
{
    auto t = capital();
    CollectOptions open;
    open.mode = MatchMode::open;
    CHECK(label_answer("paris", t, open) == label_correct);
    CHECK(label_answer("lyon", t, open) == label_poisoned);
    CHECK_FALSE(label_answer("", t, open).has_value());
    CHECK_FALSE(label_answer("qqq zzz xxx", t, open).has_value());
    open.tau = 0.0;
    CHECK(label_answer("parisian", t, open) == label_correct);

    t.target_answer = "paris";
    CHECK_FALSE(label_answer("paris", t, open).has_value());
}

TEST_CASE("normalize: train statistics match an independent two-pass computation")
{
    auto d = testing::clusters(60, 3, 4, 1.5, 7);
    for (auto& s : d.samples)
        s.map.values[5] = 2.5f;
    const auto n = normalize(d);
    const auto train = d.indices(SplitTag::train);
    for (std::size_t j = 0; j < 12; ++j) {
        double mu = 0.0;
        for (auto i : train)
            mu += d.samples[i].map.values[j];
        mu /= static_cast<double>(train.size());
        double var = 0.0;
        for (auto i : train)
            var += (d.samples[i].map.values[j] - mu) * (d.samples[i].map.values[j] - mu);
        const double sigma = std::sqrt(var / static_cast<double>(train.size()));
        CHECK(n.stats.mu[j] == doctest::Approx(mu).epsilon(1e-6));
        CHECK(n.stats.sigma[j] == doctest::Approx(sigma).epsilon(1e-6));
        for (std::size_t i = 0; i < d.samples.size(); ++i) {
            const double expected = sigma < 1e-8 ? 0.0 : (d.samples[i].map.values[j] - mu) / sigma;
            CHECK(n.samples[i].map.values[j] == doctest::Approx(expected).epsilon(1e-5));
        }
    }
}

TEST_CASE("normalize: train split ends at mean 0 and variance 1; a second pass changes nothing")
{
    const auto d = testing::clusters(80, 2, 5, 2.0, 3);
    const auto n = normalize(d);
    const auto train = n.indices(SplitTag::train);
    for (std::size_t j = 0; j < 10; ++j) {
        double mu = 0.0, sq = 0.0;
        for (auto i : train) {
            mu += n.samples[i].map.values[j];
            sq += n.samples[i].map.values[j] * n.samples[i].map.values[j];
        }
        mu /= static_cast<double>(train.size());
        CHECK(std::abs(mu) <= 1e-6);
        CHECK(sq / static_cast<double>(train.size()) - mu * mu == doctest::Approx(1.0).epsilon(1e-5));
    }
    const auto twice = normalize(n);
    for (std::size_t i = 0; i < n.samples.size(); ++i)
        for (std::size_t j = 0; j < 10; ++j)
            CHECK(std::abs(twice.samples[i].map.values[j] - n.samples[i].map.values[j]) <= 1e-5f);
}

TEST_CASE("normalize: the train scope ignores test samples, the all scope does not")
{
    auto d = testing::clusters(40, 1, 3, 1.0, 2);
    const auto before = normalize(d);
    for (auto i : d.indices(SplitTag::test))
        for (auto& v : d.samples[i].map.values)
            v += 100.0f;
    CHECK(normalize(d).stats.mu == before.stats.mu);
    CHECK(normalize(d, StatsScope::all).stats.mu != before.stats.mu);

    ActivationDataset none = d;
    for (auto& s : none.samples)
        s.split = SplitTag::test;
    CHECK_THROWS_AS(normalize(none), Error);
}

TEST_CASE("sample_triplets: anchors and positives share a label, negatives differ, all from train")
{
    const auto d = testing::clusters(100, 2, 2, 1.0, 4);
    const auto train = d.indices(SplitTag::train);
    const std::set<std::size_t> in_train(train.begin(), train.end());
    const auto ts = sample_triplets(d, 500, 9);
    REQUIRE(ts.size() == 500);
    for (const auto& t : ts) {
        CHECK(in_train.contains(t.anchor));
        CHECK(in_train.contains(t.positive));
        CHECK(in_train.contains(t.negative));
        CHECK(t.anchor != t.positive);
        CHECK(d.samples[t.anchor].label == d.samples[t.positive].label);
        CHECK(d.samples[t.anchor].label != d.samples[t.negative].label);
    }
    const auto again = sample_triplets(d, 500, 9);
    for (std::size_t i = 0; i < ts.size(); ++i)
        CHECK((ts[i].anchor == again[i].anchor && ts[i].positive == again[i].positive &&
               ts[i].negative == again[i].negative));
}

TEST_CASE("sample_triplets: anchor classes follow the train class proportions within 2% over 10000 draws")
{
    auto d = testing::clusters(200, 1, 2, 1.0, 5, true);
    // Relabel to a 30 / 70 split.
    for (std::size_t i = 0; i < d.samples.size(); ++i)
        d.samples[i].label = i < 60 ? label_poisoned : label_correct;
    const auto ts = sample_triplets(d, 10000, 1);
    std::size_t poisoned = 0;
    for (const auto& t : ts)
        poisoned += d.samples[t.anchor].label == label_poisoned;
    CHECK(std::abs(static_cast<double>(poisoned) / 10000.0 - 0.3) <= 0.02);
}

TEST_CASE("sample_triplets: a singleton class never anchors, a missing class throws")
{
    auto d = testing::clusters(20, 1, 2, 1.0, 5, true);
    for (std::size_t i = 0; i < d.samples.size(); ++i)
        d.samples[i].label = i == 0 ? label_poisoned : label_correct;
    for (const auto& t : sample_triplets(d, 200, 3)) {
        CHECK(t.anchor != 0);
        CHECK(t.negative == 0);
    }
    for (auto& s : d.samples)
        s.label = label_correct;
    CHECK_THROWS_AS(sample_triplets(d, 10, 3), Error);
}

TEST_CASE("make_dataset tags splits; the ACTV file round-trips bit-exactly")
{
    testing::TempDir dir("actv");
    CorpusSplit split;
    split.train_ids = {0, 1};
    split.test_ids = {2};
    split.support_ids = {3};
    std::vector<RawSample> raw;
    for (std::uint32_t i = 0; i < 4; ++i)
        raw.push_back({ActivationMap{2, 3, {0.5f * i, 1, 2, 3, 4, -1.0f * i}},
                       static_cast<std::uint8_t>(i % 2), i, "a"});
    const auto d = make_dataset(raw, split);
    REQUIRE(d.samples.size() == 4);
    CHECK(d.samples[1].split == SplitTag::train);
    CHECK(d.samples[2].split == SplitTag::test);
    CHECK(d.samples[3].split == SplitTag::support);

    const auto n = normalize(d);
    n.save(dir / "a.actv");
    CHECK(ActivationDataset::load(dir / "a.actv") == n);

    raw.push_back({ActivationMap{2, 3, std::vector<float>(6, 0.0f)}, 0, 9, "a"});
    CHECK_THROWS_AS(make_dataset(raw, split), Error);
    raw.back() = {ActivationMap{3, 2, std::vector<float>(6, 0.0f)}, 0, 3, "a"};
    CHECK_THROWS_AS(make_dataset(raw, split), Error);
}

TEST_CASE("collect: every triple is counted exactly once")
{
    const auto c = gen_synthetic({12, 1, 0.5, 1});
    const auto tok = build_tokenizer(c);
    Transformer<float> net({static_cast<std::uint32_t>(tok.size()), 1, 16, 2, 256, 32});
    net.init(2);
    const LanguageModel lm(tok, std::move(net));
    const auto idx = Index::build(c.documents(), {});
    const auto r = collect(c, idx, lm, {});
    CHECK(r.correct + r.poisoned + r.discarded == c.triples().size());
    CHECK(r.samples.size() == r.correct + r.poisoned);
    for (const auto& s : r.samples) {
        CHECK(s.map.rows == 2);
        CHECK(s.map.cols == 16);
    }
}
