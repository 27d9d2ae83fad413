#pragma once

#include "revprag/corpus.hpp"
#include "revprag/retrieve.hpp"
#include "revprag/tokenizer.hpp"
#include "revprag/transformer.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace revprag {

struct LMConfig {
    std::uint32_t layers = 4;
    std::uint32_t d_model = 64;
    std::uint32_t heads = 4;
    std::uint32_t context = 256;
    double lr = 3e-3;
    std::uint32_t epochs = 10;
    std::uint32_t batch = 16;
    // Augmentation probabilities. answer_swap replaces the gold answer (in
    // every gold context and the target) by another training answer, so the
    // model reads instead of memorizing. conflict puts the other answer in
    // the first context, restated after the question, and makes it the
    // target, so the model follows the leading passage when contexts
    // disagree. gold_repeat copies the gold context over other slots.
    // question_echo prefixes a context with the question it answers.
    double answer_swap = 0.5;
    double conflict = 0.25;
    double question_echo = 0.3;
    double gold_repeat = 0.3;
    std::uint64_t seed = 0;
};

constexpr std::uint32_t max_answer_tokens = 32;

// Last-token residual-stream snapshot: row 0 is the embedding output,
// row l the output of block l.
struct ActivationMap {
    std::uint32_t rows = 0;
    std::uint32_t cols = 0;
    std::vector<float> values;

    float at(std::uint32_t r, std::uint32_t c) const { return values[std::size_t{r} * cols + c]; }
    bool operator==(const ActivationMap&) const = default;
};

// Instruction line, numbered contexts in the given order, question line,
// answer cue.
std::string assemble_prompt(std::string_view question, std::span<const std::string> contexts);

struct Generation {
    std::string answer;
    std::vector<TokenId> tokens;
    ActivationMap activations;
};

class LanguageModel {
public:
    LanguageModel(Tokenizer tokenizer, Transformer<float> net);

    const Tokenizer& tokenizer() const { return tokenizer_; }
    const Transformer<float>& net() const { return net_; }
    Transformer<float>& net() { return net_; }

    // BOS + prompt tokens; throws when the prompt does not fit the context
    // with room for at least one generated token.
    std::vector<TokenId> prompt_tokens(std::string_view prompt) const;

    // Greedy decoding until EOS or max_answer_tokens. Activations are taken
    // at the last prompt token, before anything is generated.
    Generation generate(std::string_view prompt, bool capture = true) const;

    // Layout: "RVLM", u32 version, u32 layers, d_model, heads, context,
    // hidden, vocab, then vocab words (u32 length + bytes, ids 4..), then
    // every tensor as f32 in TransformerLayout order.
    void save(const std::filesystem::path& path) const;
    static LanguageModel load(const std::filesystem::path& path);

private:
    Tokenizer tokenizer_;
    Transformer<float> net_;
};

struct LMTrainReport {
    double initial_loss = 0.0;
    std::vector<double> epoch_loss;
};

struct LMTrainResult {
    LanguageModel model;
    LMTrainReport report;
};

// Vocabulary from every document, question and answer in the corpus plus
// the prompt template words.
Tokenizer build_tokenizer(const Corpus& corpus);

// Trains on (prompt with top-k clean contexts, gold forced in, answer).
LMTrainResult train_lm(const Corpus& corpus, std::span<const std::uint32_t> train_ids, const Index& clean_index,
                       std::size_t k, const LMConfig& config);

// Fraction of `ids` answered exactly when retrieving from `index`; for
// poisoned mode the reference is the target answer.
double exact_match_rate(const LanguageModel& lm, const Corpus& corpus, std::span<const std::uint32_t> ids,
                        const Index& index, std::size_t k, bool against_target);

std::vector<std::string> retrieved_texts(const Corpus& corpus, const RetrievalResult& result);

} // namespace revprag
