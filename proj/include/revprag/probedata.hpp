#pragma once

// Activation collection over the RAG loop, normalization and triplets.

#include "revprag/corpus.hpp"
#include "revprag/embed.hpp"
#include "revprag/lm.hpp"
#include "revprag/retrieve.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace revprag {

constexpr std::uint8_t label_poisoned = 0;
constexpr std::uint8_t label_correct = 1;

enum class MatchMode : std::uint8_t { closed = 0, open = 1 };
enum class StatsScope : std::uint8_t { train = 0, all = 1 };

MatchMode parse_match_mode(std::string_view name);
StatsScope parse_stats_scope(std::string_view name);
std::string_view to_string(MatchMode mode);
std::string_view to_string(StatsScope scope);

struct CollectOptions {
    std::size_t k = default_top_k;
    MatchMode mode = MatchMode::closed;
    double tau = 0.8;
    // Encoder used for open-ended matching.
    EmbedConfig embed;
};

struct RawSample {
    ActivationMap map;
    std::uint8_t label = label_correct;
    std::uint32_t instance = 0;
    std::string answer;
};

struct CollectResult {
    std::vector<RawSample> samples;
    std::size_t discarded = 0;
    std::size_t correct = 0;
    std::size_t poisoned = 0;
};

// Label for one generated answer: correct, poisoned, or nullopt (discard).
// Closed mode compares token sequences; open mode takes the reference with
// the higher encoder cosine when it reaches tau, and discards ties.
std::optional<std::uint8_t> label_answer(std::string_view answer, const QATriple& triple,
                                         const CollectOptions& options);

// Runs retrieval and generation for every triple, in id order.
CollectResult collect(const Corpus& corpus, const Index& index, const LanguageModel& lm,
                      const CollectOptions& options);

struct NormStats {
    std::vector<float> mu;
    std::vector<float> sigma;
    double epsilon = 1e-8;
};

struct Sample {
    ActivationMap map;
    std::uint8_t label = label_correct;
    SplitTag split = SplitTag::train;
    std::uint32_t instance = 0;
};

struct ActivationDataset {
    std::uint32_t rows = 0;
    std::uint32_t cols = 0;
    std::vector<Sample> samples;
    // Identity (mu 0, sigma 1) until normalize() runs.
    NormStats stats;

    std::vector<std::size_t> indices(SplitTag split) const;

    // Layout: "ACTV", u32 version, u32 n_samples, u32 rows, u32 cols,
    // rows*cols f32 mu, rows*cols f32 sigma, then per sample u8 label,
    // u8 split tag, u32 instance id, rows*cols f32 values.
    void save(const std::filesystem::path& path) const;
    static ActivationDataset load(const std::filesystem::path& path);
    bool operator==(const ActivationDataset& other) const;
};

// Tags each raw sample by the split its instance belongs to.
ActivationDataset make_dataset(std::span<const RawSample> raw, const CorpusSplit& split);

// Per-dimension population statistics over the chosen scope, applied to
// every sample. Dimensions with sigma < epsilon become 0.
ActivationDataset normalize(const ActivationDataset& dataset, StatsScope scope = StatsScope::train,
                            double epsilon = 1e-8);

struct Triplet {
    std::size_t anchor = 0;
    std::size_t positive = 0;
    std::size_t negative = 0;
};

// Triplets over the train split, indices into dataset.samples. Anchors are
// uniform over train samples whose class has at least two members.
std::vector<Triplet> sample_triplets(const ActivationDataset& dataset, std::size_t count, std::uint64_t seed);

} // namespace revprag
