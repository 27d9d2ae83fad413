#pragma once

// Detection metrics, corpus noise, timing and 2D projection.

#include "revprag/corpus.hpp"
#include "revprag/detector.hpp"
#include "revprag/probedata.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace revprag {

// Positive class = poisoned.
struct ConfusionCounts {
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t tn = 0;
    std::size_t fn = 0;

    std::size_t total() const { return tp + fp + tn + fn; }
    bool operator==(const ConfusionCounts&) const = default;
};

// nullopt marks an undefined rate (empty denominator).
struct Rates {
    ConfusionCounts counts;
    std::optional<double> tpr;
    std::optional<double> fpr;
};

Rates metrics(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> truth);

// JSON object with tp, fp, tn, fn, tpr, fpr; undefined rates become null.
std::string rates_json(const Rates& rates);

// One line per classified sample.
struct VerdictRecord {
    std::uint32_t instance = 0;
    std::uint8_t truth = label_correct;
    Verdict verdict;
};

std::vector<VerdictRecord> detect(const Detector& detector, const SupportSet& support,
                                  const ActivationDataset& dataset, SplitTag split = SplitTag::test);
Rates metrics(std::span<const VerdictRecord> records);

std::string verdicts_to_jsonl(std::span<const VerdictRecord> records);
std::vector<VerdictRecord> verdicts_from_jsonl(std::string_view content);

// Typos on a seeded selection of round(doc_frac * n_clean) clean documents,
// ceil(word_frac * words) distinct words each. Words of the source triple's
// correct answer are never touched; poisoned documents are copied verbatim.
Corpus add_noise(const Corpus& corpus, double doc_frac, double word_frac, std::uint64_t seed);

struct BenchReport {
    std::size_t warmup = 0;
    std::size_t measured = 0;
    std::vector<double> epoch_seconds;
    std::vector<double> sample_seconds;
    double mean_epoch_seconds = 0.0;
    double mean_sample_seconds = 0.0;
    std::size_t train_samples = 0;
    std::size_t inference_samples = 0;
};

// Each run trains one detector epoch from a fresh init, then classifies
// every test sample; the first `warmup` runs are discarded.
BenchReport bench_detector(const ActivationDataset& dataset, const DetectorConfig& config, std::size_t warmup = 2,
                           std::size_t measured = 5);

// Means at microsecond resolution plus reference figures for comparison.
std::string bench_json(const BenchReport& report);

struct ProjectedPoint {
    double x = 0.0;
    double y = 0.0;
    std::uint8_t label = label_correct;
};

// Mean-centered projection onto the two leading principal directions.
// Each direction's sign is fixed so its largest-magnitude entry is positive.
std::vector<ProjectedPoint> project2d(const ActivationDataset& dataset);
std::string projection_csv(std::span<const ProjectedPoint> points);

} // namespace revprag
