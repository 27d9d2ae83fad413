#include "revprag/transformer.hpp"

#include "revprag/error.hpp"
#include "revprag/rng.hpp"

#include <cmath>
#include <limits>

namespace revprag {

TransformerLayout::TransformerLayout(const TransformerShape& s)
{
    const std::size_t d = s.d_model;
    TensorPacker pack;
    auto take = [&](std::size_t n) { return pack.take(n); };
    tok_emb = take(std::size_t{s.vocab} * d);
    pos_emb = take(std::size_t{s.context} * d);
    for (std::uint32_t l = 0; l < s.layers; ++l) {
        Block b{};
        b.ln1_g = take(d);
        b.ln1_b = take(d);
        b.wq = take(d * d);
        b.wk = take(d * d);
        b.wv = take(d * d);
        b.wo = take(d * d);
        b.ln2_g = take(d);
        b.ln2_b = take(d);
        b.w1 = take(d * s.hidden);
        b.b1 = take(s.hidden);
        b.w2 = take(std::size_t{s.hidden} * d);
        b.b2 = take(d);
        blocks.push_back(b);
    }
    lnf_g = take(d);
    lnf_b = take(d);
    w_out = take(d * s.vocab);
    total = pack.total();
    tensors = pack.tensors();
}

namespace {

template <typename S>
using Vec = Eigen::Matrix<S, 1, Eigen::Dynamic>;
template <typename S>
using ColVec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <typename S>
using CMap = Eigen::Map<const RowMat<S>>;
template <typename S>
using MMap = Eigen::Map<RowMat<S>>;
template <typename S>
using CVecMap = Eigen::Map<const Vec<S>>;
template <typename S>
using MVecMap = Eigen::Map<Vec<S>>;

constexpr double ln_eps = 1e-5;

template <typename S>
void layer_norm(const RowMat<S>& x, const CVecMap<S>& g, const CVecMap<S>& b, RowMat<S>& xhat, ColVec<S>& rstd,
                RowMat<S>& y)
{
    const auto n = x.rows();
    const auto d = x.cols();
    xhat.resize(n, d);
    rstd.resize(n);
    y.resize(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        const S mean = x.row(i).mean();
        const auto centered = (x.row(i).array() - mean).matrix();
        const S var = centered.squaredNorm() / static_cast<S>(d);
        const S r = S(1) / std::sqrt(var + static_cast<S>(ln_eps));
        rstd(i) = r;
        xhat.row(i) = centered * r;
        y.row(i) = (xhat.row(i).array() * g.array() + b.array()).matrix();
    }
}

// Accumulates dg, db and returns dx.
template <typename S>
RowMat<S> layer_norm_backward(const RowMat<S>& dy, const RowMat<S>& xhat, const ColVec<S>& rstd,
                              const CVecMap<S>& g, MVecMap<S> dg, MVecMap<S> db, S scale)
{
    const auto n = dy.rows();
    const auto d = dy.cols();
    RowMat<S> dx(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        dg += scale * (dy.row(i).array() * xhat.row(i).array()).matrix();
        db += scale * dy.row(i);
        const Vec<S> dxhat = (dy.row(i).array() * g.array()).matrix();
        const S m1 = dxhat.mean();
        const S m2 = (dxhat.array() * xhat.row(i).array()).mean();
        dx.row(i) = rstd(i) * (dxhat.array() - m1 - xhat.row(i).array() * m2).matrix();
    }
    return dx;
}

} // namespace

template <typename S>
struct Transformer<S>::Cache {
    struct Layer {
        RowMat<S> x_in, xhat1, h1, q, k, v, attn, x_mid, xhat2, h2, u, r;
        ColVec<S> rstd1, rstd2;
        std::vector<RowMat<S>> probs;
    };
    std::vector<Layer> layers;
    RowMat<S> x0, x_last, xhatf, hf;
    ColVec<S> rstdf;
};

template <typename S>
Transformer<S>::Transformer(const TransformerShape& shape)
    : shape_(shape), layout_(shape), params_(layout_.total, S(0))
{
    if (shape.d_model == 0 || shape.heads == 0 || shape.d_model % shape.heads != 0)
        throw Error("transformer: d_model must be a positive multiple of heads");
    if (shape.vocab == 0 || shape.context == 0)
        throw Error("transformer: vocab and context must be positive");
}

template <typename S>
void Transformer<S>::init(std::uint64_t seed)
{
    Rng rng(Rng::mix(seed, 0x1a2b));
    const double stdv = 0.02;
    auto fill = [&](std::size_t off, std::size_t n, double sd) {
        for (std::size_t i = 0; i < n; ++i)
            params_[off + i] = static_cast<S>(sd * rng.normal());
    };
    auto constant = [&](std::size_t off, std::size_t n, double v) {
        for (std::size_t i = 0; i < n; ++i)
            params_[off + i] = static_cast<S>(v);
    };
    const std::size_t d = shape_.d_model;
    const std::size_t h = shape_.hidden;
    const double lin_d = 1.0 / std::sqrt(static_cast<double>(d));
    const double lin_h = 1.0 / std::sqrt(static_cast<double>(h));
    const double depth = 1.0 / std::sqrt(2.0 * std::max<std::uint32_t>(1, shape_.layers));
    fill(layout_.tok_emb, std::size_t{shape_.vocab} * d, stdv);
    fill(layout_.pos_emb, std::size_t{shape_.context} * d, stdv);
    for (const auto& b : layout_.blocks) {
        constant(b.ln1_g, d, 1.0);
        constant(b.ln1_b, d, 0.0);
        fill(b.wq, d * d, lin_d);
        fill(b.wk, d * d, lin_d);
        fill(b.wv, d * d, lin_d);
        fill(b.wo, d * d, lin_d * depth);
        constant(b.ln2_g, d, 1.0);
        constant(b.ln2_b, d, 0.0);
        fill(b.w1, d * h, lin_d);
        constant(b.b1, h, 0.0);
        fill(b.w2, h * d, lin_h * depth);
        constant(b.b2, d, 0.0);
    }
    constant(layout_.lnf_g, d, 1.0);
    constant(layout_.lnf_b, d, 0.0);
    fill(layout_.w_out, d * shape_.vocab, stdv);
}

template <typename S>
void Transformer<S>::forward(std::span<const TokenId> tokens, Cache& c) const
{
    const auto n = static_cast<Eigen::Index>(tokens.size());
    const Eigen::Index d = shape_.d_model;
    const Eigen::Index hd = d / shape_.heads;
    if (n == 0)
        throw Error("transformer: empty input");
    if (tokens.size() > shape_.context)
        throw Error("transformer: sequence of " + std::to_string(tokens.size()) + " tokens exceeds context " +
                    std::to_string(shape_.context));
    const S* p = params_.data();
    const CMap<S> tok(p + layout_.tok_emb, shape_.vocab, d);
    const CMap<S> pos(p + layout_.pos_emb, shape_.context, d);

    c.x0.resize(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto t = tokens[static_cast<std::size_t>(i)];
        if (t < 0 || static_cast<std::uint32_t>(t) >= shape_.vocab)
            throw Error("transformer: token id out of range");
        c.x0.row(i) = tok.row(t) + pos.row(i);
    }

    const S scale = S(1) / std::sqrt(static_cast<S>(hd));
    c.layers.resize(shape_.layers);
    const RowMat<S>* x = &c.x0;
    for (std::uint32_t l = 0; l < shape_.layers; ++l) {
        const auto& b = layout_.blocks[l];
        auto& L = c.layers[l];
        L.x_in = *x;
        layer_norm<S>(L.x_in, CVecMap<S>(p + b.ln1_g, d), CVecMap<S>(p + b.ln1_b, d), L.xhat1, L.rstd1, L.h1);
        L.q.noalias() = L.h1 * CMap<S>(p + b.wq, d, d);
        L.k.noalias() = L.h1 * CMap<S>(p + b.wk, d, d);
        L.v.noalias() = L.h1 * CMap<S>(p + b.wv, d, d);
        RowMat<S> ctx(n, d);
        L.probs.resize(shape_.heads);
        for (std::uint32_t h = 0; h < shape_.heads; ++h) {
            const auto q = L.q.middleCols(h * hd, hd);
            const auto k = L.k.middleCols(h * hd, hd);
            const auto v = L.v.middleCols(h * hd, hd);
            RowMat<S>& P = L.probs[h];
            P.noalias() = (q * k.transpose()) * scale;
            for (Eigen::Index i = 0; i < n; ++i) {
                const S mx = P.row(i).head(i + 1).maxCoeff();
                S sum = 0;
                for (Eigen::Index j = 0; j <= i; ++j) {
                    const S e = std::exp(P(i, j) - mx);
                    P(i, j) = e;
                    sum += e;
                }
                P.row(i).head(i + 1) /= sum;
                P.row(i).tail(n - i - 1).setZero();
            }
            ctx.middleCols(h * hd, hd).noalias() = P * v;
        }
        L.attn = ctx;
        L.x_mid = L.x_in;
        L.x_mid.noalias() += ctx * CMap<S>(p + b.wo, d, d);
        layer_norm<S>(L.x_mid, CVecMap<S>(p + b.ln2_g, d), CVecMap<S>(p + b.ln2_b, d), L.xhat2, L.rstd2, L.h2);
        L.u.noalias() = L.h2 * CMap<S>(p + b.w1, d, shape_.hidden);
        L.u.rowwise() += CVecMap<S>(p + b.b1, shape_.hidden);
        L.r = L.u.cwiseMax(S(0));
        RowMat<S> out = L.x_mid;
        out.noalias() += L.r * CMap<S>(p + b.w2, shape_.hidden, d);
        out.rowwise() += CVecMap<S>(p + b.b2, d);
        if (l + 1 < shape_.layers) {
            c.layers[l + 1].x_in = std::move(out);
            x = &c.layers[l + 1].x_in;
        } else {
            c.x_last = std::move(out);
            x = &c.x_last;
        }
    }
    if (shape_.layers == 0)
        c.x_last = c.x0;
    layer_norm<S>(c.x_last, CVecMap<S>(p + layout_.lnf_g, d), CVecMap<S>(p + layout_.lnf_b, d), c.xhatf, c.rstdf,
                  c.hf);
}

template <typename S>
RowMat<S> Transformer<S>::logits(std::span<const TokenId> tokens) const
{
    Cache c;
    forward(tokens, c);
    RowMat<S> z;
    z.noalias() = c.hf * CMap<S>(params_.data() + layout_.w_out, shape_.d_model, shape_.vocab);
    return z;
}

template <typename S>
std::vector<S> Transformer<S>::last_logits(std::span<const TokenId> tokens, RowMat<S>* activations) const
{
    Cache c;
    forward(tokens, c);
    const auto last = static_cast<Eigen::Index>(tokens.size()) - 1;
    if (activations) {
        activations->resize(shape_.layers + 1, shape_.d_model);
        activations->row(0) = c.x0.row(last);
        for (std::uint32_t l = 1; l < shape_.layers; ++l)
            activations->row(l) = c.layers[l].x_in.row(last);
        if (shape_.layers > 0)
            activations->row(shape_.layers) = c.x_last.row(last);
    }
    Vec<S> z = c.hf.row(last) * CMap<S>(params_.data() + layout_.w_out, shape_.d_model, shape_.vocab);
    return {z.data(), z.data() + z.size()};
}

namespace {

template <typename S>
void check_targets(std::size_t n_tokens, std::size_t first_target)
{
    if (n_tokens < 2 || first_target + 1 >= n_tokens)
        throw Error("transformer: no target positions in sequence");
}

// Row-wise log-softmax cross-entropy against `targets`; returns the mean
// loss and writes d(mean loss)/d(logits) into dz when non-null.
template <typename S>
S cross_entropy(const RowMat<S>& z, std::span<const TokenId> targets, RowMat<S>* dz)
{
    const auto m = z.rows();
    S total = 0;
    if (dz)
        dz->resize(m, z.cols());
    for (Eigen::Index i = 0; i < m; ++i) {
        const S mx = z.row(i).maxCoeff();
        const auto e = (z.row(i).array() - mx).exp();
        const S sum = e.sum();
        const auto t = targets[static_cast<std::size_t>(i)];
        total += std::log(sum) + mx - z(i, t);
        if (dz) {
            dz->row(i) = (e / sum).matrix();
            (*dz)(i, t) -= S(1);
        }
    }
    if (dz)
        *dz /= static_cast<S>(m);
    return total / static_cast<S>(m);
}

} // namespace

template <typename S>
S Transformer<S>::loss(std::span<const TokenId> tokens, std::size_t first_target) const
{
    check_targets<S>(tokens.size(), first_target);
    const auto input = tokens.first(tokens.size() - 1);
    Cache c;
    forward(input, c);
    const auto m = static_cast<Eigen::Index>(input.size() - first_target);
    RowMat<S> z;
    z.noalias() = c.hf.bottomRows(m) * CMap<S>(params_.data() + layout_.w_out, shape_.d_model, shape_.vocab);
    return cross_entropy<S>(z, tokens.subspan(first_target + 1), nullptr);
}

template <typename S>
S Transformer<S>::loss_and_grad(std::span<const TokenId> tokens, std::size_t first_target, std::span<S> grad,
                                S gscale) const
{
    check_targets<S>(tokens.size(), first_target);
    if (grad.size() != params_.size())
        throw Error("transformer: gradient buffer has wrong size");
    const auto input = tokens.first(tokens.size() - 1);
    const auto n = static_cast<Eigen::Index>(input.size());
    const Eigen::Index d = shape_.d_model;
    const Eigen::Index hd = d / shape_.heads;
    const Eigen::Index hidden = shape_.hidden;
    Cache c;
    forward(input, c);

    const S* p = params_.data();
    S* g = grad.data();
    const auto m = static_cast<Eigen::Index>(input.size() - first_target);
    const CMap<S> w_out(p + layout_.w_out, d, shape_.vocab);
    RowMat<S> z;
    z.noalias() = c.hf.bottomRows(m) * w_out;
    RowMat<S> dz;
    const S value = cross_entropy<S>(z, tokens.subspan(first_target + 1), &dz);

    MMap<S>(g + layout_.w_out, d, shape_.vocab).noalias() += gscale * (c.hf.bottomRows(m).transpose() * dz);
    RowMat<S> dhf = RowMat<S>::Zero(n, d);
    dhf.bottomRows(m).noalias() = dz * w_out.transpose();
    RowMat<S> dx = layer_norm_backward<S>(dhf, c.xhatf, c.rstdf, CVecMap<S>(p + layout_.lnf_g, d),
                                          MVecMap<S>(g + layout_.lnf_g, d), MVecMap<S>(g + layout_.lnf_b, d), gscale);

    const S scale = S(1) / std::sqrt(static_cast<S>(hd));
    for (std::uint32_t li = shape_.layers; li-- > 0;) {
        const auto& b = layout_.blocks[li];
        const auto& L = c.layers[li];
        // MLP: out = x_mid + relu(h2 W1 + b1) W2 + b2
        MVecMap<S>(g + b.b2, d) += gscale * dx.colwise().sum();
        MMap<S>(g + b.w2, hidden, d).noalias() += gscale * (L.r.transpose() * dx);
        RowMat<S> du = dx * CMap<S>(p + b.w2, hidden, d).transpose();
        du = (L.u.array() > S(0)).select(du, S(0));
        MVecMap<S>(g + b.b1, hidden) += gscale * du.colwise().sum();
        MMap<S>(g + b.w1, d, hidden).noalias() += gscale * (L.h2.transpose() * du);
        RowMat<S> dh2 = du * CMap<S>(p + b.w1, d, hidden).transpose();
        RowMat<S> dmid = dx;
        dmid += layer_norm_backward<S>(dh2, L.xhat2, L.rstd2, CVecMap<S>(p + b.ln2_g, d),
                                       MVecMap<S>(g + b.ln2_g, d), MVecMap<S>(g + b.ln2_b, d), gscale);

        // Attention: x_mid = x_in + attn Wo
        MMap<S>(g + b.wo, d, d).noalias() += gscale * (L.attn.transpose() * dmid);
        RowMat<S> dattn = dmid * CMap<S>(p + b.wo, d, d).transpose();
        RowMat<S> dq(n, d), dk(n, d), dv(n, d);
        for (std::uint32_t h = 0; h < shape_.heads; ++h) {
            const auto q = L.q.middleCols(h * hd, hd);
            const auto k = L.k.middleCols(h * hd, hd);
            const auto v = L.v.middleCols(h * hd, hd);
            const RowMat<S>& P = L.probs[h];
            const auto dctx = dattn.middleCols(h * hd, hd);
            RowMat<S> dP = dctx * v.transpose();
            dv.middleCols(h * hd, hd).noalias() = P.transpose() * dctx;
            // softmax backward; masked entries have P = 0 so stay zero
            const ColVec<S> rowdot = (dP.array() * P.array()).rowwise().sum();
            RowMat<S> dS = (P.array() * (dP.array().colwise() - rowdot.array())).matrix() * scale;
            dq.middleCols(h * hd, hd).noalias() = dS * k;
            dk.middleCols(h * hd, hd).noalias() = dS.transpose() * q;
        }
        MMap<S>(g + b.wq, d, d).noalias() += gscale * (L.h1.transpose() * dq);
        MMap<S>(g + b.wk, d, d).noalias() += gscale * (L.h1.transpose() * dk);
        MMap<S>(g + b.wv, d, d).noalias() += gscale * (L.h1.transpose() * dv);
        RowMat<S> dh1 = dq * CMap<S>(p + b.wq, d, d).transpose();
        dh1.noalias() += dk * CMap<S>(p + b.wk, d, d).transpose();
        dh1.noalias() += dv * CMap<S>(p + b.wv, d, d).transpose();
        dx = dmid;
        dx += layer_norm_backward<S>(dh1, L.xhat1, L.rstd1, CVecMap<S>(p + b.ln1_g, d),
                                     MVecMap<S>(g + b.ln1_g, d), MVecMap<S>(g + b.ln1_b, d), gscale);
    }

    MMap<S> dtok(g + layout_.tok_emb, shape_.vocab, d);
    MMap<S> dpos(g + layout_.pos_emb, shape_.context, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        dtok.row(input[static_cast<std::size_t>(i)]) += gscale * dx.row(i);
        dpos.row(i) += gscale * dx.row(i);
    }
    return value;
}

template class Transformer<float>;
template class Transformer<double>;

} // namespace revprag
