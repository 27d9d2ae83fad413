#pragma once

// Hashed character n-gram encoders standing in for dense retrievers.

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace revprag {

enum class Metric : std::uint8_t { dot = 0, cosine = 1 };
enum class Role : std::uint8_t { query = 0, passage = 1 };

struct EmbedConfig {
    std::uint32_t dim = 256;
    std::uint32_t ngram = 3;
    Metric metric = Metric::dot;
    bool l2norm = true;
    // When false the passage encoder hashes with a different salt.
    bool shared_encoders = true;
};

using EmbeddingVector = std::vector<float>;

// 64-bit FNV-1a over the bytes of `gram`, with an optional salt folded
// into the offset basis.
std::uint64_t ngram_hash(std::string_view gram, std::uint64_t salt = 0);

// Each byte n-gram of `text` adds +1 or -1 (top hash bit) to bucket
// hash % dim. Texts shorter than n contribute a single gram; empty text
// gives the zero vector.
EmbeddingVector encode(std::string_view text, Role role, const EmbedConfig& config);

double dot(std::span<const float> a, std::span<const float> b);
// Zero when either vector has zero norm (a warning is emitted).
double cosine(std::span<const float> a, std::span<const float> b);
double sim(std::span<const float> a, std::span<const float> b, Metric metric);

Metric parse_metric(std::string_view name);
std::string_view to_string(Metric metric);

} // namespace revprag
