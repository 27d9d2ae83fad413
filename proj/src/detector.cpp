#include "revprag/detector.hpp"

#include "revprag/binio.hpp"
#include "revprag/error.hpp"
#include "revprag/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace revprag {

namespace {

constexpr std::uint32_t detector_version = 1;
constexpr std::uint32_t support_version = 1;

template <typename S>
using ParamMap = Eigen::Map<const RowMat<S>>;
template <typename S>
using GradMap = Eigen::Map<RowMat<S>>;
template <typename S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;

// Row p of the result is [x(p-1), x(p), x(p+1)] with zero padding.
template <typename S>
RowMat<S> im2col(const RowMat<S>& x)
{
    const Eigen::Index p = x.rows(), c = x.cols();
    RowMat<S> out = RowMat<S>::Zero(p, 3 * c);
    for (Eigen::Index i = 0; i < p; ++i) {
        if (i > 0)
            out.row(i).segment(0, c) = x.row(i - 1);
        out.row(i).segment(c, c) = x.row(i);
        if (i + 1 < p)
            out.row(i).segment(2 * c, c) = x.row(i + 1);
    }
    return out;
}

template <typename S>
RowMat<S> col2im(const RowMat<S>& dcol, Eigen::Index c)
{
    const Eigen::Index p = dcol.rows();
    RowMat<S> out = RowMat<S>::Zero(p, c);
    for (Eigen::Index i = 0; i < p; ++i) {
        if (i > 0)
            out.row(i - 1) += dcol.row(i).segment(0, c);
        out.row(i) += dcol.row(i).segment(c, c);
        if (i + 1 < p)
            out.row(i + 1) += dcol.row(i).segment(2 * c, c);
    }
    return out;
}

template <typename S>
RowMat<S> relu(const RowMat<S>& x)
{
    return x.cwiseMax(S(0));
}

template <typename S>
RowMat<S> relu_mask(const RowMat<S>& dy, const RowMat<S>& y)
{
    return (y.array() > S(0)).select(dy, S(0));
}

template <typename S>
S distance(std::span<const S> a, std::span<const S> b)
{
    S s = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

} // namespace

DetectorLayout::DetectorLayout(const DetectorShape& shape)
{
    const std::size_t d = shape.cols, c = shape.channels, e = shape.embed;
    TensorPacker pack;
    auto take = [&](std::size_t n) { return pack.take(n); };
    stem_w = take(3 * d * c);
    stem_b = take(c);
    for (auto& b : blocks) {
        b.w1 = take(3 * c * c);
        b.b1 = take(c);
        b.w2 = take(3 * c * c);
        b.b2 = take(c);
    }
    fc_w = take(c * e);
    fc_b = take(e);
    total = pack.total();
    tensors = pack.tensors();
}

template <typename S>
EmbeddingNet<S>::EmbeddingNet(const DetectorShape& shape) : shape_(shape), layout_(shape), params_(layout_.total, S(0))
{
    if (shape.rows == 0 || shape.cols == 0 || shape.channels == 0)
        throw Error("detector: empty input shape or zero channels");
    if (shape.embed < 2)
        throw Error("detector: embedding dim must be at least 2");
}

template <typename S>
void EmbeddingNet<S>::init(std::uint64_t seed)
{
    Rng rng(Rng::mix(seed, 0xde7));
    auto fill = [&](std::size_t off, std::size_t n, double sd) {
        for (std::size_t i = 0; i < n; ++i)
            params_[off + i] = static_cast<S>(sd * rng.normal());
    };
    std::fill(params_.begin(), params_.end(), S(0));
    const std::size_t d = shape_.cols, c = shape_.channels;
    fill(layout_.stem_w, 3 * d * c, std::sqrt(2.0 / static_cast<double>(3 * d)));
    for (const auto& b : layout_.blocks) {
        fill(b.w1, 3 * c * c, std::sqrt(2.0 / static_cast<double>(3 * c)));
        fill(b.w2, 3 * c * c, std::sqrt(2.0 / static_cast<double>(3 * c)));
    }
    fill(layout_.fc_w, c * shape_.embed, 1.0 / std::sqrt(static_cast<double>(c)));
}

template <typename S>
std::vector<S> EmbeddingNet<S>::forward(std::span<const S> map) const
{
    Cache cache;
    return forward(map, cache);
}

template <typename S>
std::vector<S> EmbeddingNet<S>::forward(std::span<const S> map, Cache& cache) const
{
    const Eigen::Index p = shape_.rows, d = shape_.cols, c = shape_.channels, e = shape_.embed;
    if (map.size() != static_cast<std::size_t>(p * d))
        throw Error("detector: input has " + std::to_string(map.size()) + " values, expected " +
                    std::to_string(p) + "x" + std::to_string(d));
    const S* w = params_.data();
    const RowMat<S> x = Eigen::Map<const RowMat<S>>(map.data(), p, d);

    cache.col0 = im2col(x);
    cache.h0 = (cache.col0 * ParamMap<S>(w + layout_.stem_w, 3 * d, c)).rowwise() +
               ParamMap<S>(w + layout_.stem_b, 1, c).row(0);
    cache.h0 = relu(cache.h0);
    const RowMat<S>* h = &cache.h0;
    for (int b = 0; b < 2; ++b) {
        const auto& L = layout_.blocks[b];
        cache.col_h[b] = im2col(*h);
        cache.u[b] = relu(RowMat<S>((cache.col_h[b] * ParamMap<S>(w + L.w1, 3 * c, c)).rowwise() +
                                    ParamMap<S>(w + L.b1, 1, c).row(0)));
        cache.col_u[b] = im2col(cache.u[b]);
        RowMat<S> v = (cache.col_u[b] * ParamMap<S>(w + L.w2, 3 * c, c)).rowwise() + ParamMap<S>(w + L.b2, 1, c).row(0);
        cache.h[b] = relu(RowMat<S>(*h + v));
        h = &cache.h[b];
    }
    cache.pooled = h->colwise().mean();
    const RowMat<S> z = cache.pooled * ParamMap<S>(w + layout_.fc_w, c, e) + ParamMap<S>(w + layout_.fc_b, 1, e);
    return {z.data(), z.data() + e};
}

template <typename S>
void EmbeddingNet<S>::backward(const Cache& cache, std::span<const S> dz, std::span<S> grad) const
{
    const Eigen::Index p = shape_.rows, d = shape_.cols, c = shape_.channels, e = shape_.embed;
    const S* w = params_.data();
    S* g = grad.data();
    const auto dzm = Eigen::Map<const RowMat<S>>(dz.data(), 1, e);

    GradMap<S>(g + layout_.fc_w, c, e) += cache.pooled.transpose() * dzm;
    GradMap<S>(g + layout_.fc_b, 1, e) += dzm;
    const RowMat<S> dpool = dzm * ParamMap<S>(w + layout_.fc_w, c, e).transpose();
    RowMat<S> dh = dpool.replicate(p, 1) / static_cast<S>(p);

    for (int b = 1; b >= 0; --b) {
        const auto& L = layout_.blocks[b];
        const RowMat<S> dpre = relu_mask(dh, cache.h[b]);
        GradMap<S>(g + L.w2, 3 * c, c) += cache.col_u[b].transpose() * dpre;
        GradMap<S>(g + L.b2, 1, c) += dpre.colwise().sum();
        RowMat<S> du = col2im(RowMat<S>(dpre * ParamMap<S>(w + L.w2, 3 * c, c).transpose()), c);
        du = relu_mask(du, cache.u[b]);
        GradMap<S>(g + L.w1, 3 * c, c) += cache.col_h[b].transpose() * du;
        GradMap<S>(g + L.b1, 1, c) += du.colwise().sum();
        dh = dpre + col2im(RowMat<S>(du * ParamMap<S>(w + L.w1, 3 * c, c).transpose()), c);
    }
    const RowMat<S> dpre0 = relu_mask(dh, cache.h0);
    GradMap<S>(g + layout_.stem_w, 3 * d, c) += cache.col0.transpose() * dpre0;
    GradMap<S>(g + layout_.stem_b, 1, c) += dpre0.colwise().sum();
}

template <typename S>
S triplet_loss(std::span<const S> za, std::span<const S> zp, std::span<const S> zn, S margin)
{
    if (za.size() != zp.size() || za.size() != zn.size())
        throw Error("triplet_loss: embedding sizes differ");
    return std::max(distance(za, zp) - distance(za, zn) + margin, S(0));
}

template <typename S>
S mean_triplet_loss(const EmbeddingNet<S>& net, std::span<const std::vector<S>> maps,
                    std::span<const Triplet> triplets, S margin, std::span<S> grad)
{
    if (triplets.empty())
        return S(0);
    const bool want_grad = !grad.empty();
    const S scale = S(1) / static_cast<S>(triplets.size());
    const std::size_t e = net.shape().embed;
    S total = 0;
    typename EmbeddingNet<S>::Cache ca, cp, cn;
    std::vector<S> da(e), dp(e), dn(e);
    for (const auto& t : triplets) {
        const auto za = net.forward(maps[t.anchor], ca);
        const auto zp = net.forward(maps[t.positive], cp);
        const auto zn = net.forward(maps[t.negative], cn);
        const S l = triplet_loss<S>(za, zp, zn, margin);
        total += l;
        if (!want_grad || l <= S(0))
            continue;
        const S dist_p = distance<S>(za, zp), dist_n = distance<S>(za, zn);
        for (std::size_t i = 0; i < e; ++i) {
            const S up = dist_p > S(0) ? (za[i] - zp[i]) / dist_p : S(0);
            const S un = dist_n > S(0) ? (za[i] - zn[i]) / dist_n : S(0);
            da[i] = scale * (up - un);
            dp[i] = -scale * up;
            dn[i] = scale * un;
        }
        net.backward(ca, da, grad);
        net.backward(cp, dp, grad);
        net.backward(cn, dn, grad);
    }
    return total * scale;
}

template class EmbeddingNet<float>;
template class EmbeddingNet<double>;
template float triplet_loss<float>(std::span<const float>, std::span<const float>, std::span<const float>, float);
template double triplet_loss<double>(std::span<const double>, std::span<const double>, std::span<const double>,
                                     double);
template float mean_triplet_loss<float>(const EmbeddingNet<float>&, std::span<const std::vector<float>>,
                                        std::span<const Triplet>, float, std::span<float>);
template double mean_triplet_loss<double>(const EmbeddingNet<double>&, std::span<const std::vector<double>>,
                                          std::span<const Triplet>, double, std::span<double>);

Detector::Detector(const DetectorShape& shape, double margin) : net_(shape), margin_(margin)
{
    if (!(margin >= 0) || !std::isfinite(margin))
        throw Error("detector: margin must be a finite non-negative number");
}

std::vector<float> Detector::embed(const ActivationMap& map) const
{
    if (map.rows != shape().rows || map.cols != shape().cols)
        throw Error("detector: activation map is " + std::to_string(map.rows) + "x" + std::to_string(map.cols) +
                    " but the network expects " + std::to_string(shape().rows) + "x" + std::to_string(shape().cols));
    return net_.forward(map.values);
}

void Detector::save(const std::filesystem::path& path) const
{
    binio::Writer w;
    w.magic("RVPD");
    w.u32(detector_version);
    w.u32(shape().rows);
    w.u32(shape().cols);
    w.u32(shape().channels);
    w.u32(shape().embed);
    w.f64(margin_);
    for (const auto& [off, n] : net_.layout().tensors)
        w.f32s(net_.params().subspan(off, n));
    w.save(path);
}

Detector Detector::load(const std::filesystem::path& path)
{
    auto r = binio::Reader::load(path);
    r.expect_magic("RVPD");
    if (const auto v = r.u32(); v != detector_version)
        throw Error(path.string() + ": unsupported detector version " + std::to_string(v));
    DetectorShape s;
    s.rows = r.u32();
    s.cols = r.u32();
    s.channels = r.u32();
    s.embed = r.u32();
    const double margin = r.f64();
    Detector d(s, margin);
    for (const auto& [off, n] : d.net_.layout().tensors)
        r.f32s(d.net_.params().subspan(off, n));
    if (!r.done())
        throw Error(path.string() + ": trailing bytes");
    return d;
}

bool Detector::operator==(const Detector& other) const
{
    const auto a = net_.params(), b = other.net_.params();
    return shape() == other.shape() && margin_ == other.margin_ && std::equal(a.begin(), a.end(), b.begin(), b.end());
}

DetectorTrainResult train_detector(const ActivationDataset& dataset, const DetectorConfig& config)
{
    if (config.batch == 0)
        throw Error("train_detector: batch must be positive");
    const auto train = dataset.indices(SplitTag::train);
    DetectorShape shape{dataset.rows, dataset.cols, config.channels, config.embed};
    DetectorTrainResult result{Detector(shape, config.margin), {}};
    auto& net = result.detector.net();
    net.init(config.seed);

    std::vector<std::vector<float>> maps;
    maps.reserve(dataset.samples.size());
    for (const auto& s : dataset.samples)
        maps.push_back(s.map.values);

    const std::size_t per_epoch = config.triplets_per_epoch ? config.triplets_per_epoch : train.size();
    AlignedVector<float> grad(net.params().size());
    for (std::uint32_t epoch = 0; epoch < config.epochs; ++epoch) {
        const auto triplets = sample_triplets(dataset, per_epoch, Rng::mix(config.seed, epoch));
        double total = 0;
        for (std::size_t start = 0; start < triplets.size(); start += config.batch) {
            const std::size_t end = std::min(triplets.size(), start + config.batch);
            std::fill(grad.begin(), grad.end(), 0.0f);
            const auto batch = std::span(triplets).subspan(start, end - start);
            const float l = mean_triplet_loss<float>(net, maps, batch, static_cast<float>(config.margin), grad);
            if (!std::isfinite(l))
                throw Error("train_detector: non-finite loss at epoch " + std::to_string(epoch) + ", batch starting " +
                            std::to_string(start) + " (anchor sample " + std::to_string(batch.front().anchor) + ")");
            total += static_cast<double>(l) * static_cast<double>(batch.size());
            auto params = net.params();
            const auto lr = static_cast<float>(config.lr);
            for (std::size_t j = 0; j < params.size(); ++j)
                params[j] -= lr * grad[j];
        }
        result.epoch_loss.push_back(triplets.empty() ? 0.0 : total / static_cast<double>(triplets.size()));
    }
    return result;
}

void SupportSet::save(const std::filesystem::path& path) const
{
    binio::Writer w;
    w.magic("RVPS");
    w.u32(support_version);
    w.u32(static_cast<std::uint32_t>(size()));
    w.u32(embed);
    for (std::size_t i = 0; i < size(); ++i) {
        w.u8(labels[i]);
        w.u32(instances[i]);
        w.f32s(row(i));
    }
    w.save(path);
}

SupportSet SupportSet::load(const std::filesystem::path& path)
{
    auto r = binio::Reader::load(path);
    r.expect_magic("RVPS");
    if (const auto v = r.u32(); v != support_version)
        throw Error(path.string() + ": unsupported support-set version " + std::to_string(v));
    SupportSet s;
    const std::uint32_t n = r.u32();
    s.embed = r.u32();
    s.embeddings.resize(std::size_t{n} * s.embed);
    for (std::uint32_t i = 0; i < n; ++i) {
        s.labels.push_back(r.u8());
        s.instances.push_back(r.u32());
        r.f32s(std::span(s.embeddings).subspan(std::size_t{i} * s.embed, s.embed));
    }
    if (!r.done())
        throw Error(path.string() + ": trailing bytes");
    return s;
}

SupportSet build_support(const Detector& detector, const ActivationDataset& dataset, std::size_t cap,
                         std::uint64_t seed)
{
    auto members = dataset.indices(SplitTag::support);
    if (members.empty())
        throw Error("build_support: empty support split");
    if (cap == 0)
        throw Error("build_support: support size must be positive");
    if (members.size() > cap) {
        std::vector<std::size_t> by_class[2];
        for (auto i : members)
            by_class[dataset.samples[i].label].push_back(i);
        const std::size_t big = by_class[1].size() >= by_class[0].size() ? 1 : 0;
        std::size_t quota[2];
        quota[1 - big] = std::min(by_class[1 - big].size(), cap / 2);
        quota[big] = std::min(by_class[big].size(), cap - quota[1 - big]);
        quota[1 - big] = std::min(by_class[1 - big].size(), cap - quota[big]);
        Rng rng(Rng::mix(seed, 0x5077));
        members.clear();
        for (int c = 0; c < 2; ++c) {
            rng.shuffle(std::span(by_class[c]));
            members.insert(members.end(), by_class[c].begin(), by_class[c].begin() + static_cast<long>(quota[c]));
        }
        std::sort(members.begin(), members.end());
    }
    SupportSet s;
    s.embed = detector.shape().embed;
    std::size_t labels[2] = {0, 0};
    for (auto i : members) {
        const auto& sample = dataset.samples[i];
        const auto z = detector.embed(sample.map);
        s.embeddings.insert(s.embeddings.end(), z.begin(), z.end());
        s.labels.push_back(sample.label);
        s.instances.push_back(sample.instance);
        ++labels[sample.label];
    }
    if (labels[0] == 0 || labels[1] == 0)
        warn("support set holds only one class; every verdict will be " +
             std::string(verdict_name(labels[0] == 0 ? label_correct : label_poisoned)));
    return s;
}

std::string_view verdict_name(std::uint8_t label) { return label == label_poisoned ? "poisoned" : "correct"; }

Verdict nearest_support(const SupportSet& support, std::span<const float> z)
{
    if (support.size() == 0)
        throw Error("classify: empty support set");
    if (z.size() != support.embed)
        throw Error("classify: embedding has " + std::to_string(z.size()) + " values, support uses " +
                    std::to_string(support.embed));
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t i = 0; i < support.size(); ++i) {
        const auto r = support.row(i);
        double s = 0;
        for (std::size_t j = 0; j < z.size(); ++j) {
            const double diff = static_cast<double>(z[j]) - r[j];
            s += diff * diff;
        }
        if (s < best) {
            best = s;
            arg = i;
        }
    }
    return {support.labels[arg], arg, support.instances[arg], std::sqrt(best)};
}

Verdict classify(const Detector& detector, const SupportSet& support, const ActivationMap& map)
{
    return nearest_support(support, detector.embed(map));
}

} // namespace revprag
