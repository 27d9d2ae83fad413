#include "revprag/embed.hpp"

#include "revprag/error.hpp"

#include <cmath>
#include <string>

namespace revprag {

namespace {

constexpr std::uint64_t fnv_offset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t fnv_prime = 0x100000001b3ULL;
constexpr std::uint64_t passage_salt = 0x9a55'a6e0'0000'0001ULL;

} // namespace

std::uint64_t ngram_hash(std::string_view gram, std::uint64_t salt)
{
    std::uint64_t h = fnv_offset ^ salt;
    for (unsigned char c : gram) {
        h ^= c;
        h *= fnv_prime;
    }
    return h;
}

EmbeddingVector encode(std::string_view text, Role role, const EmbedConfig& config)
{
    if (config.dim == 0 || config.ngram == 0)
        throw Error("encode: dim and ngram must be positive");
    EmbeddingVector v(config.dim, 0.0f);
    if (text.empty())
        return v;
    const std::uint64_t salt = (role == Role::passage && !config.shared_encoders) ? passage_salt : 0;
    auto add = [&](std::string_view gram) {
        const std::uint64_t h = ngram_hash(gram, salt);
        v[h % config.dim] += (h >> 63) ? -1.0f : 1.0f;
    };
    if (text.size() < config.ngram) {
        add(text);
    } else {
        for (std::size_t i = 0; i + config.ngram <= text.size(); ++i)
            add(text.substr(i, config.ngram));
    }
    if (config.l2norm) {
        double sq = 0.0;
        for (float x : v)
            sq += static_cast<double>(x) * x;
        if (sq > 0.0) {
            const double inv = 1.0 / std::sqrt(sq);
            for (float& x : v)
                x = static_cast<float>(x * inv);
        }
    }
    return v;
}

double dot(std::span<const float> a, std::span<const float> b)
{
    if (a.size() != b.size())
        throw Error("sim: dimension mismatch " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        s += static_cast<double>(a[i]) * b[i];
    return s;
}

double cosine(std::span<const float> a, std::span<const float> b)
{
    const double ab = dot(a, b);
    const double aa = dot(a, a);
    const double bb = dot(b, b);
    if (aa == 0.0 || bb == 0.0) {
        warn("cosine similarity with a zero vector; returning 0");
        return 0.0;
    }
    const double c = ab / (std::sqrt(aa) * std::sqrt(bb));
    return std::fmax(-1.0, std::fmin(1.0, c));
}

double sim(std::span<const float> a, std::span<const float> b, Metric metric)
{
    return metric == Metric::dot ? dot(a, b) : cosine(a, b);
}

Metric parse_metric(std::string_view name)
{
    if (name == "dot")
        return Metric::dot;
    if (name == "cosine")
        return Metric::cosine;
    throw Error("unknown metric: " + std::string(name));
}

std::string_view to_string(Metric metric) { return metric == Metric::dot ? "dot" : "cosine"; }

} // namespace revprag
