#include "revprag/retrieve.hpp"

#include "revprag/binio.hpp"
#include "revprag/error.hpp"

#include <algorithm>
#include <numeric>

namespace revprag {

Index Index::build(std::span<const Document> documents, const EmbedConfig& config)
{
    if (config.dim == 0)
        throw Error("build_index: embedding dim must be positive");
    Index index;
    index.config_ = config;
    index.ids_.reserve(documents.size());
    index.vectors_.reserve(documents.size() * config.dim);
    for (const auto& d : documents) {
        index.ids_.push_back(d.id);
        const auto v = encode(d.text, Role::passage, config);
        index.vectors_.insert(index.vectors_.end(), v.begin(), v.end());
    }
    return index;
}

std::vector<double> Index::scores(std::span<const float> q) const
{
    std::vector<double> out(size());
    for (std::size_t i = 0; i < size(); ++i)
        out[i] = sim(q, vector(i), config_.metric);
    return out;
}

RetrievalResult Index::top_k(std::string_view query, std::size_t k) const
{
    const auto q = encode(query, Role::query, config_);
    return top_k(q, k);
}

RetrievalResult Index::top_k(std::span<const float> q, std::size_t k) const
{
    RetrievalResult result;
    result.k_requested = k;
    if (k == 0 || size() == 0)
        return result;
    const auto s = scores(q);
    std::vector<std::uint32_t> order(size());
    std::iota(order.begin(), order.end(), 0u);
    const auto better = [&](std::uint32_t a, std::uint32_t b) {
        if (s[a] != s[b])
            return s[a] > s[b];
        return ids_[a] < ids_[b];
    };
    const std::size_t n = std::min(k, size());
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n), order.end(), better);
    result.entries.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
        result.entries.push_back({ids_[order[i]], s[order[i]]});
    return result;
}

// Layout: "RVIX", u32 version, u32 dim, u32 ngram, u8 metric, u8 l2norm,
// u8 shared, u32 count, count x u32 doc id, count x dim f32.
void Index::save(const std::filesystem::path& path) const
{
    binio::Writer w;
    w.magic("RVIX");
    w.u32(1);
    w.u32(config_.dim);
    w.u32(config_.ngram);
    w.u8(static_cast<std::uint8_t>(config_.metric));
    w.u8(config_.l2norm ? 1 : 0);
    w.u8(config_.shared_encoders ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(ids_.size()));
    for (auto id : ids_)
        w.u32(id);
    w.f32s(vectors_);
    w.save(path);
}

Index Index::load(const std::filesystem::path& path)
{
    auto r = binio::Reader::load(path);
    r.expect_magic("RVIX");
    if (const auto v = r.u32(); v != 1)
        throw Error(path.string() + ": unsupported index version " + std::to_string(v));
    Index index;
    index.config_.dim = r.u32();
    index.config_.ngram = r.u32();
    index.config_.metric = static_cast<Metric>(r.u8());
    index.config_.l2norm = r.u8() != 0;
    index.config_.shared_encoders = r.u8() != 0;
    const std::uint32_t n = r.u32();
    index.ids_.resize(n);
    for (auto& id : index.ids_)
        id = r.u32();
    index.vectors_.resize(static_cast<std::size_t>(n) * index.config_.dim);
    r.f32s(index.vectors_);
    return index;
}

} // namespace revprag
