#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace revprag {

enum class AttackKind : std::uint8_t { poisonedrag = 0, garag = 1, prcap = 2 };

std::string_view to_string(AttackKind kind);
AttackKind parse_attack_kind(std::string_view name);

struct Document {
    std::uint32_t id = 0;
    std::string text;
    // Empty for clean documents.
    std::optional<AttackKind> poisoned_by;
    // Instance the document was written for (clean: its own triple).
    std::optional<std::uint32_t> source;

    bool poisoned() const { return poisoned_by.has_value(); }
    std::string provenance() const;
};

struct QATriple {
    std::uint32_t id = 0;
    std::string question;
    std::string supporting_text;
    std::string correct_answer;
    // Present iff the instance is designated poisoned.
    std::optional<std::string> target_answer;

    bool designated_poisoned() const { return target_answer.has_value(); }
};

// Immutable after construction. Triple i owns clean document i; injected
// documents follow with consecutive ids.
class Corpus {
public:
    Corpus() = default;
    Corpus(std::vector<QATriple> triples, std::vector<Document> documents);
    // Clean corpus: one document per supporting text.
    explicit Corpus(std::vector<QATriple> triples);

    std::span<const QATriple> triples() const { return triples_; }
    std::span<const Document> documents() const { return documents_; }
    const QATriple& triple(std::uint32_t id) const { return triples_.at(id); }
    const Document& document(std::uint32_t id) const { return documents_.at(id); }
    bool empty() const { return triples_.empty() && documents_.empty(); }

    // Documents with clean provenance only.
    std::vector<Document> clean_documents() const;

    std::string to_jsonl() const;
    void save(const std::filesystem::path& path) const;

private:
    void validate() const;

    std::vector<QATriple> triples_;
    std::vector<Document> documents_;
};

// Whitespace tokens of `text`.
std::vector<std::string> split_words(std::string_view text);
std::string join_words(std::span<const std::string> words);
// True when `needle`'s words occur contiguously in `haystack`'s words.
bool contains_words(std::string_view haystack, std::string_view needle);

// Parses JSONL. Plain lines carry question, supporting_text,
// correct_answer and optional target_answer. Persisted corpora additionally
// carry id and provenance, plus document lines (keys id, text, provenance).
Corpus parse_jsonl(std::string_view content);
Corpus ingest_jsonl(const std::filesystem::path& path);

struct SyntheticOptions {
    std::size_t n_facts = 3000;
    std::uint64_t seed = 0;
    double poisoned_fraction = 0.5;
    // Extra clean documents restating each fact with other attribution
    // prefixes; they follow the supporting texts in id order.
    std::size_t paraphrases = 7;
};

// Templated subject/attribute/value facts. Each subject is unique; its
// supporting text (document id = triple id) and paraphrases are the only
// clean documents naming it.
Corpus gen_synthetic(const SyntheticOptions& options);

// Templates exposed so the attack module can phrase claims in corpus style.
std::span<const std::string_view> claim_prefixes();
std::string fact_sentence(std::string_view prefix, std::string_view attribute,
                          std::string_view subject, std::string_view value);

struct SplitRatios {
    double train = 0.7;
    double test = 0.2;
    double support = 0.1;
};

struct CorpusSplit {
    std::vector<std::uint32_t> train_ids;
    std::vector<std::uint32_t> test_ids;
    std::vector<std::uint32_t> support_ids;
};

enum class SplitTag : std::uint8_t { train = 0, test = 1, support = 2 };

// Stratified on the poisoned designation; test and support sizes are
// floored per stratum and train takes the remainder. Ids sorted ascending.
CorpusSplit split(const Corpus& corpus, const SplitRatios& ratios, std::uint64_t seed);
CorpusSplit split_ids(std::span<const std::uint32_t> ids, std::span<const std::uint8_t> positive,
                      const SplitRatios& ratios, std::uint64_t seed);

} // namespace revprag
