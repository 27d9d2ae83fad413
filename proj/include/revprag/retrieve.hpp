#pragma once

#include "revprag/corpus.hpp"
#include "revprag/embed.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

namespace revprag {

constexpr std::size_t default_top_k = 5;

struct RetrievalEntry {
    std::uint32_t doc_id = 0;
    double score = 0.0;

    bool operator==(const RetrievalEntry&) const = default;
};

// Entries are sorted by score descending, ties by lower doc id.
struct RetrievalResult {
    std::vector<RetrievalEntry> entries;
    std::size_t k_requested = 0;
};

// Exact linear-scan index over passage embeddings. Immutable once built.
class Index {
public:
    Index() = default;
    static Index build(std::span<const Document> documents, const EmbedConfig& config);

    RetrievalResult top_k(std::string_view query, std::size_t k) const;
    RetrievalResult top_k(std::span<const float> query_vec, std::size_t k) const;
    // Similarity of the query against every stored document, in storage order.
    std::vector<double> scores(std::span<const float> query_vec) const;

    std::size_t size() const { return ids_.size(); }
    const EmbedConfig& config() const { return config_; }
    std::span<const std::uint32_t> doc_ids() const { return ids_; }
    std::span<const float> vector(std::size_t row) const
    {
        return std::span<const float>(vectors_).subspan(row * config_.dim, config_.dim);
    }

    void save(const std::filesystem::path& path) const;
    static Index load(const std::filesystem::path& path);

private:
    EmbedConfig config_;
    std::vector<std::uint32_t> ids_;
    std::vector<float> vectors_;
};

} // namespace revprag
