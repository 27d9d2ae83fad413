#pragma once

// Triplet-trained embedding network over activation maps and the
// support-set nearest-neighbor classifier.

#include "revprag/lm.hpp"
#include "revprag/probedata.hpp"
#include "revprag/transformer.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

namespace revprag {

struct DetectorShape {
    // Input map: rows = layers + 1 positions, cols = d_model channels.
    std::uint32_t rows = 0;
    std::uint32_t cols = 0;
    std::uint32_t channels = 32;
    std::uint32_t embed = 64;

    bool operator==(const DetectorShape&) const = default;
};

// Flat parameter offsets, also the checkpoint tensor order.
struct DetectorLayout {
    struct Block {
        std::size_t w1, b1, w2, b2;
    };
    std::size_t stem_w = 0;
    std::size_t stem_b = 0;
    Block blocks[2]{};
    std::size_t fc_w = 0;
    std::size_t fc_b = 0;
    std::size_t total = 0;
    std::vector<std::pair<std::size_t, std::size_t>> tensors;

    explicit DetectorLayout(const DetectorShape& shape);
};

// Convolutions run along the layer axis with kernel 3 and zero padding:
// stem conv + ReLU, two residual blocks (conv, ReLU, conv, add, ReLU),
// average pool over positions, linear map to the embedding.
template <typename S>
class EmbeddingNet {
public:
    explicit EmbeddingNet(const DetectorShape& shape);

    // He-normal conv weights, N(0, 1/channels) for the linear map, zero biases.
    void init(std::uint64_t seed);

    const DetectorShape& shape() const { return shape_; }
    const DetectorLayout& layout() const { return layout_; }
    std::span<S> params() { return params_; }
    std::span<const S> params() const { return params_; }

    struct Cache;

    // `map` is row-major rows x cols.
    std::vector<S> forward(std::span<const S> map) const;
    std::vector<S> forward(std::span<const S> map, Cache& cache) const;
    // Adds d(out)/d(params)^T dz into `grad`.
    void backward(const Cache& cache, std::span<const S> dz, std::span<S> grad) const;

private:
    DetectorShape shape_;
    DetectorLayout layout_;
    AlignedVector<S> params_;
};

template <typename S>
struct EmbeddingNet<S>::Cache {
    RowMat<S> col0, h0;
    RowMat<S> col_h[2], u[2], col_u[2], h[2];
    RowMat<S> pooled;
};

// max(|za - zp| - |za - zn| + margin, 0), Euclidean distances.
template <typename S>
S triplet_loss(std::span<const S> za, std::span<const S> zp, std::span<const S> zn, S margin);

// Mean triplet loss over `triplets` (indices into `maps`); when `grad` is
// non-empty adds the gradient of the mean into it.
template <typename S>
S mean_triplet_loss(const EmbeddingNet<S>& net, std::span<const std::vector<S>> maps,
                    std::span<const Triplet> triplets, S margin, std::span<S> grad = {});

struct DetectorConfig {
    std::uint32_t channels = 32;
    std::uint32_t embed = 64;
    double margin = 1.0;
    double lr = 0.01;
    std::uint32_t epochs = 50;
    std::uint32_t batch = 32;
    // Triplets per epoch; 0 means one per train sample.
    std::size_t triplets_per_epoch = 0;
    std::size_t support_size = 100;
    std::uint64_t seed = 0;
};

class Detector {
public:
    Detector(const DetectorShape& shape, double margin);

    const DetectorShape& shape() const { return net_.shape(); }
    double margin() const { return margin_; }
    EmbeddingNet<float>& net() { return net_; }
    const EmbeddingNet<float>& net() const { return net_; }

    // Throws when the map shape is not the network's input shape.
    std::vector<float> embed(const ActivationMap& map) const;

    // Layout: "RVPD", u32 version, u32 rows, cols, channels, embed,
    // f64 margin, then f32 tensors in DetectorLayout order.
    void save(const std::filesystem::path& path) const;
    static Detector load(const std::filesystem::path& path);
    bool operator==(const Detector& other) const;

private:
    EmbeddingNet<float> net_;
    double margin_;
};

struct DetectorTrainResult {
    Detector detector;
    std::vector<double> epoch_loss;
};

// Plain mini-batch SGD on the mean triplet loss; triplets are resampled
// from the train split every epoch.
DetectorTrainResult train_detector(const ActivationDataset& dataset, const DetectorConfig& config);

struct SupportSet {
    std::uint32_t embed = 0;
    // Row-major size() x embed.
    std::vector<float> embeddings;
    std::vector<std::uint8_t> labels;
    std::vector<std::uint32_t> instances;

    std::size_t size() const { return labels.size(); }
    std::span<const float> row(std::size_t i) const { return std::span(embeddings).subspan(i * embed, embed); }

    // Layout: "RVPS", u32 version, u32 n, u32 embed, then per member u8
    // label, u32 instance id, embed f32 values.
    void save(const std::filesystem::path& path) const;
    static SupportSet load(const std::filesystem::path& path);
    bool operator==(const SupportSet&) const = default;
};

// Embeds the support split. Above `cap` members, keeps cap/2 per class
// (the larger class takes the odd one and any shortfall), sampled by seed.
SupportSet build_support(const Detector& detector, const ActivationDataset& dataset, std::size_t cap,
                         std::uint64_t seed);

struct Verdict {
    std::uint8_t label = label_correct;
    std::size_t nearest = 0;
    std::uint32_t support_instance = 0;
    double distance = 0.0;
};

std::string_view verdict_name(std::uint8_t label);

// 1-nearest support member by Euclidean distance; ties go to the lowest index.
Verdict nearest_support(const SupportSet& support, std::span<const float> z);
Verdict classify(const Detector& detector, const SupportSet& support, const ActivationMap& map);

} // namespace revprag
