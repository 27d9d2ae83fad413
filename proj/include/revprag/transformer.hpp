#pragma once

// Decoder-only pre-norm transformer with learned positional embeddings and
// hand-written reverse-mode gradients. Instantiated for float (training,
// inference) and double (gradient checks).

#include "revprag/tokenizer.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace revprag {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Parameter and gradient buffers. Vectorized Eigen kernels round
// differently depending on operand alignment, so buffers are allocated
// aligned and every tensor starts on a 64-byte boundary.
template <typename S>
using AlignedVector = std::vector<S, Eigen::aligned_allocator<S>>;

// Offsets into a flat buffer, each padded to a multiple of 16 elements.
class TensorPacker {
public:
    std::size_t take(std::size_t n)
    {
        const std::size_t at = off_;
        off_ += (n + 15) / 16 * 16;
        tensors_.push_back({at, n});
        return at;
    }
    std::size_t total() const { return off_; }
    // (offset, size) of every tensor in allocation order.
    const std::vector<std::pair<std::size_t, std::size_t>>& tensors() const { return tensors_; }

private:
    std::size_t off_ = 0;
    std::vector<std::pair<std::size_t, std::size_t>> tensors_;
};

struct TransformerShape {
    std::uint32_t vocab = 0;
    std::uint32_t layers = 4;
    std::uint32_t d_model = 64;
    std::uint32_t heads = 4;
    std::uint32_t context = 256;
    std::uint32_t hidden = 256;

    bool operator==(const TransformerShape&) const = default;
};

// Offsets of every tensor inside the flat parameter vector. The order here
// is the on-disk order of the checkpoint.
struct TransformerLayout {
    struct Block {
        std::size_t ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
    };
    std::size_t tok_emb = 0;
    std::size_t pos_emb = 0;
    std::vector<Block> blocks;
    std::size_t lnf_g = 0;
    std::size_t lnf_b = 0;
    std::size_t w_out = 0;
    std::size_t total = 0;
    std::vector<std::pair<std::size_t, std::size_t>> tensors;

    explicit TransformerLayout(const TransformerShape& shape);
};

template <typename S>
class Transformer {
public:
    explicit Transformer(const TransformerShape& shape);

    // Embeddings and unembedding N(0, 0.02); linear maps N(0, 1/fan_in) with
    // residual output projections further scaled by 1/sqrt(2L); unit
    // layer-norm gains and zero biases.
    void init(std::uint64_t seed);

    const TransformerShape& shape() const { return shape_; }
    const TransformerLayout& layout() const { return layout_; }
    std::span<S> params() { return params_; }
    std::span<const S> params() const { return params_; }

    // Logits for every position (rows) of `tokens`.
    RowMat<S> logits(std::span<const TokenId> tokens) const;

    // Logits at the final position. When `activations` is non-null it
    // receives (layers + 1) x d_model rows: the embedding output and each
    // block's residual output, all at the final position.
    std::vector<S> last_logits(std::span<const TokenId> tokens, RowMat<S>* activations = nullptr) const;

    // Mean cross-entropy of predicting tokens[j + 1] at positions
    // j >= first_target over the sequence tokens[0 .. n-1).
    S loss(std::span<const TokenId> tokens, std::size_t first_target) const;

    // Same loss; adds scale * d(loss)/d(params) into `grad`.
    S loss_and_grad(std::span<const TokenId> tokens, std::size_t first_target, std::span<S> grad, S scale) const;

private:
    struct Cache;
    void forward(std::span<const TokenId> tokens, Cache& cache) const;

    TransformerShape shape_;
    TransformerLayout layout_;
    AlignedVector<S> params_;
};

extern template class Transformer<float>;
extern template class Transformer<double>;

} // namespace revprag
