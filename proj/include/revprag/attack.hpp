#pragma once

// Desk-scale analogs of three knowledge-base poisoning strategies, plus
// injection of the crafted texts into a corpus.

#include "revprag/corpus.hpp"
#include "revprag/embed.hpp"
#include "revprag/retrieve.hpp"
#include "revprag/rng.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace revprag {

struct GeneticKnobs {
    std::uint32_t population = 20;
    std::uint32_t generations = 50;
    double mutation_rate = 0.1;
};

struct HillClimbKnobs {
    std::uint32_t steps = 200;
    // Target question plus (queries - 1) questions on the same attribute.
    std::uint32_t queries = 5;
};

struct AttackSpec {
    AttackKind kind = AttackKind::poisonedrag;
    std::uint32_t m = 5;
    std::uint64_t seed = 0;
    GeneticKnobs genetic;
    HillClimbKnobs hill_climb;
};

struct PoisonRecord {
    std::uint32_t question_id = 0;
    std::string target_answer;
    AttackKind kind = AttackKind::poisonedrag;
    std::vector<std::string> texts;
    std::vector<std::uint32_t> doc_ids;
    // sim(E_q(question), E_p(text)) per text.
    std::vector<double> scores;
};

// A single character-level typo: swap, drop, duplicate or adjacent-key
// substitution. Words shorter than two characters only get substitutions.
std::string typo(std::string_view word, Rng& rng);

// Question followed by a claim asserting the target answer. Each text must
// beat the median clean-document similarity to the question; up to 20
// template retries per text before giving up.
std::vector<std::string> poisonedrag_gen(const QATriple& triple, std::size_t m, std::uint64_t seed,
                                         const Index& clean_index);

struct GeneticResult {
    std::vector<std::string> texts;
    std::vector<double> fitness;
    // Best fitness in the initial population, then after each generation.
    std::vector<double> elite_history;
};

// Typo-based genetic search seeded from existing poisoned texts. Answer
// words are never mutated.
GeneticResult garag_gen(const QATriple& triple, std::size_t m, const GeneticKnobs& knobs, std::uint64_t seed,
                        std::span<const std::string> seeds, const EmbedConfig& config);

struct HillClimbResult {
    std::string text;
    // Mean similarity before any step, then after each step.
    std::vector<double> trajectory;
};

// Greedy single-word substitutions drawn from `vocabulary`, accepted only
// when the mean similarity over `queries` strictly increases. Words in
// `protected_words` are never replaced.
HillClimbResult prcap_gen(std::span<const std::string> queries, std::string_view base_text, std::uint32_t steps,
                          std::uint64_t seed, std::span<const std::string> vocabulary,
                          std::span<const std::string> protected_words, const EmbedConfig& config);

// Appends one poisoned document per text; fills each record's doc_ids.
Corpus inject(const Corpus& corpus, std::span<PoisonRecord> records);

struct PoisonOutcome {
    Corpus corpus;
    std::vector<PoisonRecord> records;
};

// Runs the configured strategy for every instance carrying a target answer.
PoisonOutcome poison(const Corpus& corpus, const AttackSpec& spec, const EmbedConfig& config);

std::string records_to_jsonl(std::span<const PoisonRecord> records);
std::vector<PoisonRecord> records_from_jsonl(std::string_view content);

} // namespace revprag
