#include "revprag/probedata.hpp"

#include "revprag/binio.hpp"
#include "revprag/error.hpp"
#include "revprag/rng.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

namespace revprag {

namespace {

constexpr std::uint32_t dataset_version = 1;

std::size_t map_size(std::uint32_t rows, std::uint32_t cols) { return std::size_t{rows} * cols; }

NormStats identity_stats(std::size_t n) { return {std::vector<float>(n, 0.0f), std::vector<float>(n, 1.0f), 1e-8}; }

} // namespace

MatchMode parse_match_mode(std::string_view name)
{
    if (name == "closed")
        return MatchMode::closed;
    if (name == "open")
        return MatchMode::open;
    throw Error("unknown match mode: " + std::string(name));
}

StatsScope parse_stats_scope(std::string_view name)
{
    if (name == "train")
        return StatsScope::train;
    if (name == "all")
        return StatsScope::all;
    throw Error("unknown stats scope: " + std::string(name));
}

std::string_view to_string(MatchMode mode) { return mode == MatchMode::closed ? "closed" : "open"; }
std::string_view to_string(StatsScope scope) { return scope == StatsScope::train ? "train" : "all"; }

std::optional<std::uint8_t> label_answer(std::string_view answer, const QATriple& triple,
                                         const CollectOptions& options)
{
    const auto words = split_words(answer);
    if (options.mode == MatchMode::closed) {
        if (words == split_words(triple.correct_answer))
            return label_correct;
        if (triple.target_answer && words == split_words(*triple.target_answer))
            return label_poisoned;
        return std::nullopt;
    }
    if (words.empty())
        return std::nullopt;
    const auto a = encode(join_words(words), Role::query, options.embed);
    const double to_correct = cosine(a, encode(triple.correct_answer, Role::query, options.embed));
    const double to_target =
        triple.target_answer ? cosine(a, encode(*triple.target_answer, Role::query, options.embed)) : -1.0;
    const double best = std::max(to_correct, to_target);
    if (best < options.tau || to_correct == to_target)
        return std::nullopt;
    return to_correct > to_target ? label_correct : label_poisoned;
}

CollectResult collect(const Corpus& corpus, const Index& index, const LanguageModel& lm,
                      const CollectOptions& options)
{
    CollectResult out;
    for (const auto& t : corpus.triples()) {
        const auto contexts = retrieved_texts(corpus, index.top_k(t.question, options.k));
        auto g = lm.generate(assemble_prompt(t.question, contexts));
        const auto label = label_answer(g.answer, t, options);
        if (!label) {
            ++out.discarded;
            continue;
        }
        (*label == label_correct ? out.correct : out.poisoned) += 1;
        out.samples.push_back({std::move(g.activations), *label, t.id, std::move(g.answer)});
    }
    return out;
}

std::vector<std::size_t> ActivationDataset::indices(SplitTag split) const
{
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
        if (samples[i].split == split)
            out.push_back(i);
    return out;
}

void ActivationDataset::save(const std::filesystem::path& path) const
{
    const std::size_t n = map_size(rows, cols);
    if (stats.mu.size() != n || stats.sigma.size() != n)
        throw Error("dataset: stats size does not match the map shape");
    binio::Writer w;
    w.magic("ACTV");
    w.u32(dataset_version);
    w.u32(static_cast<std::uint32_t>(samples.size()));
    w.u32(rows);
    w.u32(cols);
    w.f32s(stats.mu);
    w.f32s(stats.sigma);
    for (const auto& s : samples) {
        if (s.map.rows != rows || s.map.cols != cols)
            throw Error("dataset: sample shape differs from the dataset shape");
        w.u8(s.label);
        w.u8(static_cast<std::uint8_t>(s.split));
        w.u32(s.instance);
        w.f32s(s.map.values);
    }
    w.save(path);
}

ActivationDataset ActivationDataset::load(const std::filesystem::path& path)
{
    auto r = binio::Reader::load(path);
    r.expect_magic("ACTV");
    if (const auto v = r.u32(); v != dataset_version)
        throw Error(path.string() + ": unsupported dataset version " + std::to_string(v));
    ActivationDataset d;
    const std::uint32_t n_samples = r.u32();
    d.rows = r.u32();
    d.cols = r.u32();
    const std::size_t n = map_size(d.rows, d.cols);
    d.stats = identity_stats(n);
    r.f32s(d.stats.mu);
    r.f32s(d.stats.sigma);
    d.samples.resize(n_samples);
    for (auto& s : d.samples) {
        s.label = r.u8();
        if (s.label > 1)
            throw Error(path.string() + ": label out of range");
        const auto tag = r.u8();
        if (tag > 2)
            throw Error(path.string() + ": split tag out of range");
        s.split = static_cast<SplitTag>(tag);
        s.instance = r.u32();
        s.map.rows = d.rows;
        s.map.cols = d.cols;
        s.map.values.resize(n);
        r.f32s(s.map.values);
    }
    if (!r.done())
        throw Error(path.string() + ": trailing bytes");
    return d;
}

bool ActivationDataset::operator==(const ActivationDataset& other) const
{
    auto same_sample = [](const Sample& a, const Sample& b) {
        return a.map == b.map && a.label == b.label && a.split == b.split && a.instance == b.instance;
    };
    return rows == other.rows && cols == other.cols && stats.mu == other.stats.mu &&
           stats.sigma == other.stats.sigma &&
           std::equal(samples.begin(), samples.end(), other.samples.begin(), other.samples.end(), same_sample);
}

ActivationDataset make_dataset(std::span<const RawSample> raw, const CorpusSplit& split)
{
    std::unordered_map<std::uint32_t, SplitTag> tags;
    for (auto id : split.train_ids)
        tags[id] = SplitTag::train;
    for (auto id : split.test_ids)
        tags[id] = SplitTag::test;
    for (auto id : split.support_ids)
        tags[id] = SplitTag::support;

    ActivationDataset d;
    if (!raw.empty()) {
        d.rows = raw.front().map.rows;
        d.cols = raw.front().map.cols;
    }
    d.stats = identity_stats(map_size(d.rows, d.cols));
    for (const auto& s : raw) {
        if (s.map.rows != d.rows || s.map.cols != d.cols)
            throw Error("make_dataset: activation maps differ in shape");
        const auto it = tags.find(s.instance);
        if (it == tags.end())
            throw Error("make_dataset: instance " + std::to_string(s.instance) + " is in no split");
        d.samples.push_back({s.map, s.label, it->second, s.instance});
    }
    return d;
}

ActivationDataset normalize(const ActivationDataset& dataset, StatsScope scope, double epsilon)
{
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < dataset.samples.size(); ++i)
        if (scope == StatsScope::all || dataset.samples[i].split == SplitTag::train)
            pool.push_back(i);
    if (pool.empty())
        throw Error("normalize: empty train split");

    const std::size_t n = map_size(dataset.rows, dataset.cols);
    std::vector<double> mu(n, 0.0), var(n, 0.0);
    for (auto i : pool)
        for (std::size_t j = 0; j < n; ++j)
            mu[j] += dataset.samples[i].map.values[j];
    for (auto& m : mu)
        m /= static_cast<double>(pool.size());
    for (auto i : pool)
        for (std::size_t j = 0; j < n; ++j) {
            const double c = dataset.samples[i].map.values[j] - mu[j];
            var[j] += c * c;
        }

    ActivationDataset out = dataset;
    out.stats.epsilon = epsilon;
    out.stats.mu.resize(n);
    out.stats.sigma.resize(n);
    std::vector<double> sigma(n);
    for (std::size_t j = 0; j < n; ++j) {
        sigma[j] = std::sqrt(var[j] / static_cast<double>(pool.size()));
        out.stats.mu[j] = static_cast<float>(mu[j]);
        out.stats.sigma[j] = static_cast<float>(sigma[j]);
    }
    for (auto& s : out.samples)
        for (std::size_t j = 0; j < n; ++j)
            s.map.values[j] = sigma[j] < epsilon ? 0.0f : static_cast<float>((s.map.values[j] - mu[j]) / sigma[j]);
    return out;
}

std::vector<Triplet> sample_triplets(const ActivationDataset& dataset, std::size_t count, std::uint64_t seed)
{
    std::vector<std::size_t> by_class[2];
    for (auto i : dataset.indices(SplitTag::train))
        by_class[dataset.samples[i].label].push_back(i);
    if (by_class[0].empty() || by_class[1].empty())
        throw Error("sample_triplets: train split needs both classes (poisoned " + std::to_string(by_class[0].size()) +
                    ", correct " + std::to_string(by_class[1].size()) + ")");
    std::vector<std::size_t> anchors;
    for (const auto& c : by_class)
        if (c.size() >= 2)
            anchors.insert(anchors.end(), c.begin(), c.end());
    if (anchors.empty())
        throw Error("sample_triplets: no class has two members to form an anchor-positive pair");
    std::sort(anchors.begin(), anchors.end());

    Rng rng(Rng::mix(seed, 0x7219));
    std::vector<Triplet> out;
    out.reserve(count);
    for (std::size_t t = 0; t < count; ++t) {
        const std::size_t a = anchors[rng.below(anchors.size())];
        const auto& same = by_class[dataset.samples[a].label];
        const auto& other = by_class[1 - dataset.samples[a].label];
        // Positive: uniform over the anchor's class minus the anchor.
        std::size_t p = same[rng.below(same.size() - 1)];
        if (p == a)
            p = same.back();
        out.push_back({a, p, other[rng.below(other.size())]});
    }
    return out;
}

} // namespace revprag
