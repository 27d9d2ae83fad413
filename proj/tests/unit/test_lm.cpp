#include "helpers.hpp"

#include "revprag/lm.hpp"
#include "revprag/rng.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace revprag;

namespace {

LMConfig tiny_config()
{
    LMConfig c;
    c.layers = 1;
    c.d_model = 16;
    c.heads = 2;
    c.epochs = 1;
    c.batch = 8;
    c.seed = 5;
    return c;
}

struct Tiny {
    Corpus corpus;
    CorpusSplit split;
    Index index;
};

Tiny tiny_corpus()
{
    auto c = gen_synthetic({40, 2, 0.5, 2});
    auto s = split(c, {}, 1);
    auto idx = Index::build(c.clean_documents(), {});
    return {std::move(c), std::move(s), std::move(idx)};
}

LanguageModel random_model(const TransformerShape& shape, std::uint64_t seed)
{
    std::vector<std::string> words;
    for (std::uint32_t i = 4; i < shape.vocab; ++i)
        words.push_back("w" + std::to_string(1000 + i));
    Transformer<float> net(shape);
    net.init(seed);
    return LanguageModel(Tokenizer(words), std::move(net));
}

} // namespace

TEST_CASE("tokenizer: dense ids, special tokens first, round trip on in-vocabulary text")
{
    const std::vector<std::string> texts = {"b a c", "c d"};
    const auto tok = Tokenizer::build(texts);
    CHECK(tok.size() == 8);
    CHECK(tok.id("a") == 4);
    CHECK(tok.id("d") == 7);
    CHECK(tok.id("zzz") == Tokenizer::unk);
    CHECK(tok.decode(tok.encode("d c b a")) == "d c b a");
}

TEST_CASE("assemble_prompt: template, order and determinism")
{
    const std::vector<std::string> none;
    const auto empty = assemble_prompt("who ?", none);
    CHECK(empty.find("question : who ?") != std::string::npos);
    CHECK(empty.ends_with("answer :"));
    CHECK(empty.find("[1]") == std::string::npos);

    const std::vector<std::string> ctx = {"ctx one", "ctx two", "ctx three", "ctx four", "ctx five"};
    const auto p = assemble_prompt("who ?", ctx);
    CHECK(p == assemble_prompt("who ?", ctx));
    std::size_t at = 0;
    for (std::size_t i = 0; i < ctx.size(); ++i) {
        const auto pos = p.find("[" + std::to_string(i + 1) + "] " + ctx[i]);
        REQUIRE(pos != std::string::npos);
        CHECK(pos >= at);
        at = pos;
    }
}

TEST_CASE("prompt overflow names the overflow size")
{
    const auto lm = random_model({12, 1, 8, 2, 8, 16}, 1);
    CHECK_NOTHROW(lm.prompt_tokens("w1004 w1005"));
    CHECK_THROWS_WITH_AS(lm.prompt_tokens("w1004 w1005 w1006 w1007 w1008 w1009 w1010 w1011 w1004"),
                         doctest::Contains("overflows the context by 3 tokens"), Error);
}

TEST_CASE("train_lm: initial loss is ln V within 5%")
{
    const auto t = tiny_corpus();
    auto cfg = tiny_config();
    cfg.epochs = 0;
    const auto r = train_lm(t.corpus, t.split.train_ids, t.index, 5, cfg);
    const double ln_v = std::log(static_cast<double>(r.model.tokenizer().size()));
    MESSAGE("initial loss " << r.report.initial_loss << " ln V " << ln_v);
    CHECK(std::abs(r.report.initial_loss - ln_v) <= 0.05 * ln_v);
}

TEST_CASE("train_lm: two runs with one seed give identical parameters, and the loss falls")
{
    const auto t = tiny_corpus();
    auto cfg = tiny_config();
    cfg.epochs = 3;
    const auto a = train_lm(t.corpus, t.split.train_ids, t.index, 5, cfg);
    const auto b = train_lm(t.corpus, t.split.train_ids, t.index, 5, cfg);
    CHECK(std::ranges::equal(a.model.net().params(), b.model.net().params()));
    CHECK(a.report.epoch_loss == b.report.epoch_loss);
    REQUIRE(a.report.epoch_loss.size() == 3);
    CHECK(a.report.epoch_loss.back() < a.report.initial_loss);
}

TEST_CASE("transformer: loss gradient matches central differences on 25 random parameters (f64)")
{
    const TransformerShape shape{13, 2, 8, 2, 16, 24};
    Transformer<double> net(shape);
    net.init(3);
    Rng rng(5);
    for (const auto& [off, n] : net.layout().tensors)
        for (std::size_t i = 0; i < n; ++i)
            net.params()[off + i] += 0.3 * rng.normal();
    const std::vector<TokenId> toks = {1, 5, 7, 4, 9, 12, 5, 2, 11, 6};
    const std::size_t first = 4;
    std::vector<double> grad(net.params().size(), 0.0);
    net.loss_and_grad(toks, first, grad, 1.0);

    const auto& tensors = net.layout().tensors;
    for (int probe = 0; probe < 25; ++probe) {
        const auto& [off, n] = tensors[rng.below(tensors.size())];
        const std::size_t i = off + rng.below(n);
        const double h = 1e-5, orig = net.params()[i];
        net.params()[i] = orig + h;
        const double lp = net.loss(toks, first);
        net.params()[i] = orig - h;
        const double lm = net.loss(toks, first);
        net.params()[i] = orig;
        const double numeric = (lp - lm) / (2 * h);
        const double rel = std::abs(numeric - grad[i]) / std::max({std::abs(numeric), std::abs(grad[i]), 1e-6});
        INFO("param " << i << " analytic " << grad[i] << " numeric " << numeric);
        CHECK(rel <= 1e-3);
    }
}

TEST_CASE("transformer: causal mask, positions never see later tokens")
{
    Transformer<double> net({20, 2, 8, 2, 32, 16});
    net.init(8);
    std::vector<TokenId> toks = {1, 4, 9, 3, 17, 6, 12, 5};
    const auto base = net.logits(toks);
    for (std::size_t cut = 0; cut + 1 < toks.size(); ++cut) {
        auto edited = toks;
        for (std::size_t j = cut + 1; j < edited.size(); ++j)
            edited[j] = static_cast<TokenId>((edited[j] + 7) % 20);
        const auto z = net.logits(edited);
        for (std::size_t r = 0; r <= cut; ++r)
            for (Eigen::Index c = 0; c < z.cols(); ++c)
                CHECK(z(static_cast<Eigen::Index>(r), c) == doctest::Approx(base(static_cast<Eigen::Index>(r), c)).epsilon(1e-12));
    }
}

TEST_CASE("generate: weights forcing token 3 give token 3 up to the 32-token cap")
{
    const TransformerShape shape{6, 1, 4, 1, 64, 8};
    Transformer<float> net(shape);
    std::ranges::fill(net.params(), 0.0f);
    const auto& L = net.layout();
    // Every residual stays zero, so the final norm outputs its bias b and the
    // logits are b * W_out.
    net.params()[L.lnf_b + 0] = 1.0f;
    net.params()[L.w_out + 0 * shape.vocab + 3] = 1.0f;

    std::vector<float> expected(shape.vocab, 0.0f);
    for (std::uint32_t v = 0; v < shape.vocab; ++v)
        for (std::uint32_t d = 0; d < shape.d_model; ++d)
            expected[v] += net.params()[L.lnf_b + d] * net.params()[L.w_out + d * shape.vocab + v];
    const std::vector<TokenId> seq = {1, 4, 5};
    CHECK(net.last_logits(seq) == expected);

    LanguageModel lm(Tokenizer({"a", "b"}), std::move(net));
    const auto g = lm.generate("a b");
    CHECK(g.tokens == std::vector<TokenId>(32, 3));
}

TEST_CASE("generate: deterministic, capture-neutral, invariant to positive logit scaling; map is (L+1) x d")
{
    const LMConfig def;
    TransformerShape shape{30, def.layers, def.d_model, def.heads, def.context, 4 * def.d_model};
    auto lm = random_model(shape, 4);
    const std::string prompt = "w1004 w1010 w1020 w1007";
    const auto a = lm.generate(prompt);
    const auto b = lm.generate(prompt);
    CHECK(a.tokens == b.tokens);
    CHECK(a.activations == b.activations);
    CHECK(a.activations.rows == 5);
    CHECK(a.activations.cols == 64);
    CHECK(lm.generate(prompt, false).tokens == a.tokens);

    const auto& L = lm.net().layout();
    for (std::size_t i = 0; i < std::size_t{shape.d_model} * shape.vocab; ++i)
        lm.net().params()[L.w_out + i] *= 2.5f;
    CHECK(lm.generate(prompt).tokens == a.tokens);
}

TEST_CASE("checkpoint round trip keeps parameters and vocabulary")
{
    testing::TempDir dir("lm");
    const auto t = tiny_corpus();
    const auto r = train_lm(t.corpus, t.split.train_ids, t.index, 5, tiny_config());
    r.model.save(dir / "lm.bin");
    const auto back = LanguageModel::load(dir / "lm.bin");
    CHECK(std::ranges::equal(back.net().params(), r.model.net().params()));
    CHECK(std::ranges::equal(back.tokenizer().vocabulary(), r.model.tokenizer().vocabulary()));
    const auto q = assemble_prompt(t.corpus.triple(0).question,
                                   retrieved_texts(t.corpus, t.index.top_k(t.corpus.triple(0).question, 5)));
    CHECK(back.generate(q).activations == r.model.generate(q).activations);
}
