#pragma once

// Single JSON run configuration with range validation.

#include "revprag/attack.hpp"
#include "revprag/corpus.hpp"
#include "revprag/detector.hpp"
#include "revprag/embed.hpp"
#include "revprag/lm.hpp"
#include "revprag/probedata.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace revprag {

struct CorpusSection {
    std::uint32_t n_facts = 3000;
    double poisoned_fraction = 0.5;
    std::uint32_t paraphrases = 7;
    // When set, triples are ingested from this JSONL file instead of generated.
    std::string path;
    SplitRatios split;
};

struct NoiseSection {
    double doc_frac = 0.5;
    double word_frac = 0.1;
};

struct RunConfig {
    std::uint64_t seed = 0;
    CorpusSection corpus;
    EmbedConfig embed;
    std::uint32_t k = default_top_k;
    AttackSpec attack;
    LMConfig lm;
    MatchMode match = MatchMode::closed;
    StatsScope stats_scope = StatsScope::train;
    double tau = 0.8;
    DetectorConfig detector;
    NoiseSection noise;
    // Manifest gates for the trained LM.
    double min_clean_em = 0.9;
    double min_target_rate = 0.8;
};

// Stage seeds are derived from the top-level seed so one override moves
// every stage; AttackSpec, LMConfig and DetectorConfig seeds are ignored.
enum class Stage : std::uint64_t { corpus = 1, split, attack, lm, detector, support, noise };
std::uint64_t stage_seed(const RunConfig& config, Stage stage);

// Throws revprag::Error naming the offending key for unknown keys, wrong
// types and out-of-range values. Missing keys keep their defaults.
RunConfig parse_config(std::string_view json_text);
RunConfig load_config(const std::filesystem::path& path);
// Every field, keys sorted; parse_config(config_json(c)) == c.
std::string config_json(const RunConfig& config);
// FNV-1a 64 of config_json, as 16 hex digits.
std::string config_hash(const RunConfig& config);

} // namespace revprag
