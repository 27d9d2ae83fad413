#pragma once

// Pipeline stages wired from a RunConfig, the full run, and the ablation
// drivers that rerun only the stages a setting affects.

#include "revprag/attack.hpp"
#include "revprag/config.hpp"
#include "revprag/detector.hpp"
#include "revprag/error.hpp"
#include "revprag/evaluate.hpp"
#include "revprag/lm.hpp"
#include "revprag/probedata.hpp"
#include "revprag/retrieve.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace revprag {

class StageError : public Error {
public:
    StageError(std::string stage, const std::string& what)
        : Error("stage " + stage + ": " + what), stage_(std::move(stage))
    {
    }
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

// Generated, or ingested when config.corpus.path is set.
Corpus make_corpus(const RunConfig& config);
CorpusSplit make_split(const Corpus& corpus, const RunConfig& config);
PoisonOutcome run_poison(const Corpus& clean, const RunConfig& config);
LMTrainResult run_train_lm(const Corpus& clean, const CorpusSplit& split, const RunConfig& config);
CollectOptions collect_options(const RunConfig& config);
DetectorConfig detector_config(const RunConfig& config);

struct LMGates {
    // Exact match on test questions over the clean index.
    double clean_em = 0.0;
    // Designated-poisoned instances answered with the target, over the
    // poisoned index.
    double target_rate = 0.0;
    bool passed = false;
};

LMGates lm_gates(const LanguageModel& lm, const Corpus& clean, const CorpusSplit& split,
                 const CollectResult& collected, const RunConfig& config);

// Index, activation collection, detector, support set, verdicts, metrics.
struct DetectionRun {
    std::size_t correct = 0;
    std::size_t poisoned = 0;
    std::size_t discarded = 0;
    ActivationDataset dataset;
    std::optional<Detector> detector;
    std::vector<double> epoch_loss;
    SupportSet support;
    std::vector<VerdictRecord> verdicts;
    Rates rates;
};

DetectionRun run_detection(const Corpus& poisoned, const LanguageModel& lm, const CorpusSplit& split,
                           const RunConfig& config, CollectResult* collected = nullptr);

// Stages reused across ablation rows.
struct Shared {
    Corpus clean;
    CorpusSplit split;
    LanguageModel lm;
};

Shared prepare(const RunConfig& config);

enum class SweepAxis { poison_quantity, support_size, attack_kind };
SweepAxis parse_sweep_axis(std::string_view name);
std::string_view to_string(SweepAxis axis);

struct SweepRow {
    std::string setting;
    Rates rates;
};

// Rows: quantities 1..5, support sizes 50..250 step 50, or the three
// attack kinds. `base`, when given, must be the detection run of `config`
// itself and spares recomputing stages it already covers.
std::vector<SweepRow> sweep(SweepAxis axis, const RunConfig& config, const Shared& shared,
                            const DetectionRun* base = nullptr);
std::string sweep_csv(SweepAxis axis, std::span<const SweepRow> rows);

// Poisons, adds noise to the clean documents, then reruns detection.
DetectionRun noise_run(const RunConfig& config, const Shared& shared);

// Writes every artifact under `out` and returns the manifest JSON text.
// Stage failures throw StageError; artifacts of earlier stages stay.
std::string full_run(const RunConfig& config, const std::filesystem::path& out);

// FNV-1a 64 of a file's bytes, as 16 hex digits.
std::string file_hash(const std::filesystem::path& path);

} // namespace revprag
