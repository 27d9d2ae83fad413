#include "revprag/lm.hpp"

#include "revprag/binio.hpp"
#include "revprag/error.hpp"
#include "revprag/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace revprag {

namespace {

constexpr std::string_view instruction = "use the contexts below to answer the question .";
constexpr std::string_view question_cue = "question :";
constexpr std::string_view answer_cue = "answer :";
constexpr std::uint32_t checkpoint_version = 1;

std::vector<std::string> template_words()
{
    std::vector<std::string> words = split_words(instruction);
    for (auto w : {question_cue, answer_cue})
        for (auto& x : split_words(w))
            words.push_back(std::move(x));
    for (int i = 1; i <= 64; ++i)
        words.push_back("[" + std::to_string(i) + "]");
    return words;
}

// Replace every occurrence of the word sequence `from` in `text` by `to`.
std::string replace_words(std::string_view text, std::string_view from, std::string_view to)
{
    auto words = split_words(text);
    const auto f = split_words(from);
    const auto t = split_words(to);
    if (f.empty())
        return std::string(text);
    std::vector<std::string> out;
    for (std::size_t i = 0; i < words.size();) {
        if (i + f.size() <= words.size() && std::equal(f.begin(), f.end(), words.begin() + static_cast<std::ptrdiff_t>(i))) {
            out.insert(out.end(), t.begin(), t.end());
            i += f.size();
        } else {
            out.push_back(std::move(words[i]));
            ++i;
        }
    }
    return join_words(out);
}

} // namespace

std::string assemble_prompt(std::string_view question, std::span<const std::string> contexts)
{
    std::string p(instruction);
    p += '\n';
    for (std::size_t i = 0; i < contexts.size(); ++i) {
        p += '[' + std::to_string(i + 1) + "] ";
        p += contexts[i];
        p += '\n';
    }
    p += question_cue;
    p += ' ';
    p += question;
    p += '\n';
    p += answer_cue;
    return p;
}

LanguageModel::LanguageModel(Tokenizer tokenizer, Transformer<float> net)
    : tokenizer_(std::move(tokenizer)), net_(std::move(net))
{
    if (net_.shape().vocab != tokenizer_.size())
        throw Error("language model: vocabulary size does not match the network");
}

std::vector<TokenId> LanguageModel::prompt_tokens(std::string_view prompt) const
{
    std::vector<TokenId> ids = {Tokenizer::bos};
    const auto body = tokenizer_.encode(prompt);
    ids.insert(ids.end(), body.begin(), body.end());
    const std::size_t limit = net_.shape().context - 1;
    if (ids.size() > limit)
        throw Error("prompt of " + std::to_string(ids.size()) + " tokens overflows the context by " +
                    std::to_string(ids.size() - limit) + " tokens (limit " + std::to_string(limit) + ")");
    return ids;
}

Generation LanguageModel::generate(std::string_view prompt, bool capture) const
{
    auto seq = prompt_tokens(prompt);
    Generation g;
    RowMat<float> act;
    for (std::uint32_t step = 0; step < max_answer_tokens && seq.size() < net_.shape().context; ++step) {
        const bool want = capture && step == 0;
        const auto z = net_.last_logits(seq, want ? &act : nullptr);
        const auto next = static_cast<TokenId>(std::max_element(z.begin(), z.end()) - z.begin());
        if (want) {
            g.activations.rows = static_cast<std::uint32_t>(act.rows());
            g.activations.cols = static_cast<std::uint32_t>(act.cols());
            g.activations.values.assign(act.data(), act.data() + act.size());
        }
        if (next == Tokenizer::eos)
            break;
        g.tokens.push_back(next);
        seq.push_back(next);
    }
    g.answer = tokenizer_.decode(g.tokens);
    return g;
}

void LanguageModel::save(const std::filesystem::path& path) const
{
    const auto& s = net_.shape();
    binio::Writer w;
    w.magic("RVLM");
    w.u32(checkpoint_version);
    w.u32(s.layers);
    w.u32(s.d_model);
    w.u32(s.heads);
    w.u32(s.context);
    w.u32(s.hidden);
    w.u32(s.vocab);
    for (const auto& word : tokenizer_.vocabulary())
        w.str(word);
    for (const auto& [off, n] : net_.layout().tensors)
        w.f32s(net_.params().subspan(off, n));
    w.save(path);
}

LanguageModel LanguageModel::load(const std::filesystem::path& path)
{
    auto r = binio::Reader::load(path);
    r.expect_magic("RVLM");
    if (const auto v = r.u32(); v != checkpoint_version)
        throw Error(path.string() + ": unsupported language model version " + std::to_string(v));
    TransformerShape s;
    s.layers = r.u32();
    s.d_model = r.u32();
    s.heads = r.u32();
    s.context = r.u32();
    s.hidden = r.u32();
    s.vocab = r.u32();
    if (s.vocab < 4)
        throw Error(path.string() + ": vocabulary too small");
    std::vector<std::string> words(s.vocab - 4);
    for (auto& word : words)
        word = r.str();
    Tokenizer tok(std::move(words));
    Transformer<float> net(s);
    for (const auto& [off, n] : net.layout().tensors)
        r.f32s(net.params().subspan(off, n));
    if (!r.done())
        throw Error(path.string() + ": trailing bytes");
    return LanguageModel(std::move(tok), std::move(net));
}

Tokenizer build_tokenizer(const Corpus& corpus)
{
    std::vector<std::string> texts = template_words();
    for (const auto& d : corpus.documents())
        texts.push_back(d.text);
    for (const auto& t : corpus.triples()) {
        texts.push_back(t.question);
        texts.push_back(t.supporting_text);
        texts.push_back(t.correct_answer);
        if (t.target_answer)
            texts.push_back(*t.target_answer);
    }
    return Tokenizer(unique_sorted_words(texts));
}

std::vector<std::string> retrieved_texts(const Corpus& corpus, const RetrievalResult& result)
{
    std::vector<std::string> out;
    out.reserve(result.entries.size());
    for (const auto& e : result.entries)
        out.push_back(corpus.document(e.doc_id).text);
    return out;
}

LMTrainResult train_lm(const Corpus& corpus, std::span<const std::uint32_t> train_ids, const Index& clean_index,
                       std::size_t k, const LMConfig& config)
{
    if (train_ids.empty())
        throw Error("train_lm: empty training split");
    if (config.batch == 0)
        throw Error("train_lm: batch must be positive");
    Tokenizer tok = build_tokenizer(corpus);

    // Clean documents stating the triple's own fact.
    auto is_gold = [&](std::uint32_t doc_id, std::uint32_t triple_id) {
        const auto& d = corpus.document(doc_id);
        return !d.poisoned_by && d.source.value_or(d.id) == triple_id;
    };

    struct Example {
        std::uint32_t id;
        std::vector<std::uint32_t> contexts;
        std::vector<bool> gold;
    };
    std::vector<Example> examples;
    examples.reserve(train_ids.size());
    std::vector<std::string> answers;
    for (auto id : train_ids) {
        const auto& t = corpus.triple(id);
        Example ex{id, {}, {}};
        for (const auto& e : clean_index.top_k(t.question, k).entries) {
            ex.contexts.push_back(e.doc_id);
            ex.gold.push_back(is_gold(e.doc_id, id));
        }
        // The supporting document (id = triple id) replaces the last hit
        // when nothing retrieved states the fact.
        if (std::find(ex.gold.begin(), ex.gold.end(), true) == ex.gold.end()) {
            if (ex.contexts.empty()) {
                ex.contexts.push_back(id);
                ex.gold.push_back(true);
            } else {
                ex.contexts.back() = id;
                ex.gold.back() = true;
            }
        }
        answers.push_back(t.correct_answer);
        examples.push_back(std::move(ex));
    }

    TransformerShape shape;
    shape.vocab = static_cast<std::uint32_t>(tok.size());
    shape.layers = config.layers;
    shape.d_model = config.d_model;
    shape.heads = config.heads;
    shape.context = config.context;
    shape.hidden = 4 * config.d_model;
    Transformer<float> net(shape);
    net.init(config.seed);
    LMTrainResult result{LanguageModel(std::move(tok), std::move(net)), {}};
    auto& model = result.model;

    // Question a clean document answers, if any.
    auto source_question = [&](std::uint32_t doc_id) -> const std::string* {
        const auto& d = corpus.document(doc_id);
        const std::uint32_t src = d.source.value_or(d.id);
        if (d.poisoned_by || src >= corpus.triples().size())
            return nullptr;
        return &corpus.triple(src).question;
    };

    // Tokens of one example. Augmentation: `swap` replaces the answer in
    // every gold context, or, with `conflict`, only in the first context,
    // which also restates the question; gold contexts may be repeated over
    // other slots and contexts prefixed with their question.
    auto sequence = [&](const Example& ex, const std::string* swap, bool conflict, Rng* aug_rng,
                        std::size_t& first_target) {
        const auto& t = corpus.triple(ex.id);
        std::vector<std::uint32_t> ids = ex.contexts;
        std::vector<bool> gold = ex.gold;
        if (aug_rng && aug_rng->uniform() < config.gold_repeat) {
            const std::size_t copies = 1 + aug_rng->below(ids.size());
            for (std::size_t c = 0; c < copies; ++c) {
                const std::size_t i = aug_rng->below(ids.size());
                ids[i] = ex.id;
                gold[i] = true;
            }
        }
        std::size_t conflict_slot = ids.size();
        if (aug_rng && swap && conflict) {
            conflict_slot = 0;
            ids[conflict_slot] = ex.id;
            gold[conflict_slot] = true;
        }
        std::vector<std::string> ctx;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            std::string text = corpus.document(ids[i]).text;
            if (i == conflict_slot) {
                text = t.question + " " + replace_words(text, t.correct_answer, *swap);
            } else {
                if (aug_rng && conflict_slot == ids.size() && aug_rng->uniform() < config.question_echo) {
                    if (const auto* q = source_question(ids[i]))
                        text = *q + " " + text;
                }
                if (gold[i] && swap && !conflict)
                    text = replace_words(text, t.correct_answer, *swap);
            }
            ctx.push_back(std::move(text));
        }
        const std::string& answer = swap ? *swap : t.correct_answer;
        auto seq = model.prompt_tokens(assemble_prompt(t.question, ctx));
        first_target = seq.size() - 1;
        for (auto a : model.tokenizer().encode(answer))
            seq.push_back(a);
        seq.push_back(Tokenizer::eos);
        if (seq.size() > shape.context)
            throw Error("train_lm: example " + std::to_string(ex.id) + " overflows the context");
        return seq;
    };

    {
        double total = 0;
        const std::size_t probe = std::min<std::size_t>(examples.size(), 64);
        for (std::size_t i = 0; i < probe; ++i) {
            std::size_t ft = 0;
            const auto seq = sequence(examples[i], nullptr, false, nullptr, ft);
            total += model.net().loss(seq, ft);
        }
        result.report.initial_loss = total / static_cast<double>(probe);
    }

    const std::size_t n_params = model.net().params().size();
    AlignedVector<float> grad(n_params), m1(n_params, 0.0f), m2(n_params, 0.0f);
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, clip = 1.0;
    std::uint64_t step = 0;
    Rng rng(Rng::mix(config.seed, 0x7a1e));
    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), 0);

    // Linear warmup, then cosine decay to a tenth of the peak rate.
    const std::size_t steps_per_epoch = (examples.size() + config.batch - 1) / config.batch;
    const double total_steps = static_cast<double>(steps_per_epoch) * config.epochs;
    const double warmup = std::min(100.0, total_steps / 10.0);
    auto schedule = [&](std::uint64_t t) {
        const double x = static_cast<double>(t);
        if (x <= warmup)
            return config.lr * x / warmup;
        const double progress = std::min(1.0, (x - warmup) / std::max(1.0, total_steps - warmup));
        return config.lr * (0.1 + 0.45 * (1.0 + std::cos(std::numbers::pi * progress)));
    };

    for (std::uint32_t epoch = 0; epoch < config.epochs; ++epoch) {
        rng.shuffle(std::span(order));
        double epoch_total = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch) {
            const std::size_t end = std::min(order.size(), start + config.batch);
            std::fill(grad.begin(), grad.end(), 0.0f);
            const float scale = 1.0f / static_cast<float>(end - start);
            for (std::size_t i = start; i < end; ++i) {
                const auto& ex = examples[order[i]];
                const std::string* swap = nullptr;
                const double u = rng.uniform();
                const bool conflict = u >= config.answer_swap && u < config.answer_swap + config.conflict;
                if (u < config.answer_swap + config.conflict) {
                    const auto& cand = answers[rng.below(answers.size())];
                    if (cand != corpus.triple(ex.id).correct_answer)
                        swap = &cand;
                }
                std::size_t ft = 0;
                const auto seq = sequence(ex, swap, conflict, &rng, ft);
                const float l = model.net().loss_and_grad(seq, ft, grad, scale);
                if (!std::isfinite(l))
                    throw Error("train_lm: non-finite loss at epoch " + std::to_string(epoch) + ", batch starting " +
                                std::to_string(start) + ", instance " + std::to_string(ex.id));
                epoch_total += l;
            }
            double norm = 0;
            for (float x : grad)
                norm += static_cast<double>(x) * x;
            norm = std::sqrt(norm);
            const float clip_scale = norm > clip ? static_cast<float>(clip / norm) : 1.0f;
            ++step;
            const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
            const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
            const auto lr = static_cast<float>(schedule(step) * std::sqrt(c2) / c1);
            auto params = model.net().params();
            for (std::size_t j = 0; j < n_params; ++j) {
                const float gj = grad[j] * clip_scale;
                m1[j] = static_cast<float>(beta1) * m1[j] + static_cast<float>(1 - beta1) * gj;
                m2[j] = static_cast<float>(beta2) * m2[j] + static_cast<float>(1 - beta2) * gj * gj;
                params[j] -= lr * m1[j] / (std::sqrt(m2[j]) + static_cast<float>(eps));
            }
        }
        result.report.epoch_loss.push_back(epoch_total / static_cast<double>(order.size()));
    }
    return result;
}

double exact_match_rate(const LanguageModel& lm, const Corpus& corpus, std::span<const std::uint32_t> ids,
                        const Index& index, std::size_t k, bool against_target)
{
    std::size_t total = 0, hits = 0;
    for (auto id : ids) {
        const auto& t = corpus.triple(id);
        if (against_target && !t.target_answer)
            continue;
        const auto contexts = retrieved_texts(corpus, index.top_k(t.question, k));
        const auto g = lm.generate(assemble_prompt(t.question, contexts), false);
        const auto& ref = against_target ? *t.target_answer : t.correct_answer;
        ++total;
        if (split_words(g.answer) == split_words(ref))
            ++hits;
    }
    return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

} // namespace revprag
