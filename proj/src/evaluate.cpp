#include "revprag/evaluate.hpp"

#include "revprag/attack.hpp"
#include "revprag/error.hpp"
#include "revprag/rng.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

namespace revprag {

using nlohmann::json;

namespace {

std::optional<double> ratio(std::size_t num, std::size_t den)
{
    if (den == 0)
        return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
}

json rate_value(const std::optional<double>& r) { return r ? json(*r) : json(nullptr); }

double micro(double seconds) { return std::round(seconds * 1e6) / 1e6; }

std::uint8_t parse_label(const json& j)
{
    const auto name = j.get<std::string>();
    if (name == verdict_name(label_poisoned))
        return label_poisoned;
    if (name == verdict_name(label_correct))
        return label_correct;
    throw Error("unknown label: " + name);
}

double seconds_since(std::chrono::steady_clock::time_point t0)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double mean(std::span<const double> v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

} // namespace

Rates metrics(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> truth)
{
    if (predicted.size() != truth.size())
        throw Error("metrics: " + std::to_string(predicted.size()) + " predictions for " +
                    std::to_string(truth.size()) + " labels");
    Rates r;
    auto& c = r.counts;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const bool pos = truth[i] == label_poisoned;
        const bool flagged = predicted[i] == label_poisoned;
        (pos ? (flagged ? c.tp : c.fn) : (flagged ? c.fp : c.tn)) += 1;
    }
    r.tpr = ratio(c.tp, c.tp + c.fn);
    r.fpr = ratio(c.fp, c.fp + c.tn);
    return r;
}

Rates metrics(std::span<const VerdictRecord> records)
{
    std::vector<std::uint8_t> predicted, truth;
    for (const auto& r : records) {
        predicted.push_back(r.verdict.label);
        truth.push_back(r.truth);
    }
    return metrics(predicted, truth);
}

std::string rates_json(const Rates& rates)
{
    json j;
    j["tp"] = rates.counts.tp;
    j["fp"] = rates.counts.fp;
    j["tn"] = rates.counts.tn;
    j["fn"] = rates.counts.fn;
    j["tpr"] = rate_value(rates.tpr);
    j["fpr"] = rate_value(rates.fpr);
    return j.dump(2);
}

std::vector<VerdictRecord> detect(const Detector& detector, const SupportSet& support,
                                  const ActivationDataset& dataset, SplitTag split)
{
    std::vector<VerdictRecord> out;
    for (auto i : dataset.indices(split)) {
        const auto& s = dataset.samples[i];
        out.push_back({s.instance, s.label, classify(detector, support, s.map)});
    }
    return out;
}

std::string verdicts_to_jsonl(std::span<const VerdictRecord> records)
{
    std::string out;
    for (const auto& r : records) {
        json j;
        j["instance"] = r.instance;
        j["truth"] = std::string(verdict_name(r.truth));
        j["verdict"] = std::string(verdict_name(r.verdict.label));
        j["nearest"] = r.verdict.nearest;
        j["support_instance"] = r.verdict.support_instance;
        j["distance"] = r.verdict.distance;
        out += j.dump();
        out += '\n';
    }
    return out;
}

std::vector<VerdictRecord> verdicts_from_jsonl(std::string_view content)
{
    std::vector<VerdictRecord> out;
    std::size_t pos = 0, line_no = 0;
    while (pos < content.size()) {
        auto end = content.find('\n', pos);
        if (end == std::string_view::npos)
            end = content.size();
        const auto line = content.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (line.empty())
            continue;
        try {
            const auto j = json::parse(line);
            VerdictRecord r;
            r.instance = j.at("instance").get<std::uint32_t>();
            r.truth = parse_label(j.at("truth"));
            r.verdict.label = parse_label(j.at("verdict"));
            r.verdict.nearest = j.at("nearest").get<std::size_t>();
            r.verdict.support_instance = j.at("support_instance").get<std::uint32_t>();
            r.verdict.distance = j.at("distance").get<double>();
            out.push_back(r);
        } catch (const json::exception& e) {
            throw Error("verdicts line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

Corpus add_noise(const Corpus& corpus, double doc_frac, double word_frac, std::uint64_t seed)
{
    if (!(doc_frac >= 0.0 && doc_frac <= 1.0) || !(word_frac >= 0.0 && word_frac <= 1.0))
        throw Error("add_noise: fractions must lie in [0, 1]");
    std::vector<QATriple> triples(corpus.triples().begin(), corpus.triples().end());
    std::vector<Document> docs(corpus.documents().begin(), corpus.documents().end());

    std::vector<std::size_t> clean;
    for (std::size_t i = 0; i < docs.size(); ++i)
        if (!docs[i].poisoned())
            clean.push_back(i);
    Rng rng(Rng::mix(seed, 0x901));
    rng.shuffle(std::span(clean));
    clean.resize(static_cast<std::size_t>(std::llround(doc_frac * static_cast<double>(clean.size()))));
    std::sort(clean.begin(), clean.end());

    for (auto i : clean) {
        auto& d = docs[i];
        auto words = split_words(d.text);
        std::set<std::string> keep;
        if (d.source && *d.source < triples.size())
            for (auto& w : split_words(triples[*d.source].correct_answer))
                keep.insert(w);
        std::vector<std::size_t> eligible;
        for (std::size_t w = 0; w < words.size(); ++w)
            if (!keep.contains(words[w]))
                eligible.push_back(w);
        // The epsilon keeps products like 0.1 * 30 from rounding up to 4.
        const auto want = static_cast<std::size_t>(std::ceil(word_frac * static_cast<double>(words.size()) - 1e-9));
        rng.shuffle(std::span(eligible));
        eligible.resize(std::min(want, eligible.size()));
        for (auto w : eligible)
            words[w] = typo(words[w], rng);
        d.text = join_words(words);
        if (d.id < triples.size() && d.source == d.id)
            triples[d.id].supporting_text = d.text;
    }
    return Corpus(std::move(triples), std::move(docs));
}

BenchReport bench_detector(const ActivationDataset& dataset, const DetectorConfig& config, std::size_t warmup,
                           std::size_t measured)
{
    if (measured == 0)
        throw Error("bench: need at least one measured run");
    BenchReport rep;
    rep.warmup = warmup;
    rep.measured = measured;
    rep.train_samples = dataset.indices(SplitTag::train).size();
    const auto test = dataset.indices(SplitTag::test);
    rep.inference_samples = test.size();
    if (test.empty())
        throw Error("bench: empty test split");

    DetectorConfig one = config;
    one.epochs = 1;
    for (std::size_t run = 0; run < warmup + measured; ++run) {
        one.seed = Rng::mix(config.seed, run);
        auto t0 = std::chrono::steady_clock::now();
        auto trained = train_detector(dataset, one);
        const double epoch = seconds_since(t0);
        const auto support = build_support(trained.detector, dataset, config.support_size, one.seed);

        t0 = std::chrono::steady_clock::now();
        for (auto i : test)
            classify(trained.detector, support, dataset.samples[i].map);
        const double per_sample = seconds_since(t0) / static_cast<double>(test.size());
        if (run >= warmup) {
            rep.epoch_seconds.push_back(epoch);
            rep.sample_seconds.push_back(per_sample);
        }
    }
    rep.mean_epoch_seconds = mean(rep.epoch_seconds);
    rep.mean_sample_seconds = mean(rep.sample_seconds);
    return rep;
}

std::string bench_json(const BenchReport& report)
{
    json j;
    j["warmup"] = report.warmup;
    j["measured"] = report.measured;
    j["train_samples"] = report.train_samples;
    j["inference_samples"] = report.inference_samples;
    j["epoch_seconds"] = json::array();
    for (double v : report.epoch_seconds)
        j["epoch_seconds"].push_back(micro(v));
    j["sample_seconds"] = json::array();
    for (double v : report.sample_seconds)
        j["sample_seconds"].push_back(micro(v));
    j["mean_epoch_seconds"] = micro(report.mean_epoch_seconds);
    j["mean_sample_seconds"] = micro(report.mean_sample_seconds);
    j["reference"] = {{"epoch_seconds", 19.31},
                      {"sample_seconds", 0.0021},
                      {"note", "full-scale figures on NQ, for comparison only"}};
    return j.dump(2);
}

std::vector<ProjectedPoint> project2d(const ActivationDataset& dataset)
{
    const std::size_t n = dataset.samples.size();
    if (n < 2)
        throw Error("project2d: need at least 2 samples, got " + std::to_string(n));
    const std::size_t dim = std::size_t{dataset.rows} * dataset.cols;
    Eigen::MatrixXd x(n, dim);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < dim; ++j)
            x(i, j) = dataset.samples[i].map.values[j];
    x.rowwise() -= x.colwise().mean();

    const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    Eigen::MatrixXd dirs = Eigen::MatrixXd::Zero(dim, 2);
    for (std::size_t c = 0; c < std::min<std::size_t>(2, dim); ++c) {
        Eigen::VectorXd v = eig.eigenvectors().col(dim - 1 - c);
        Eigen::Index at = 0;
        v.cwiseAbs().maxCoeff(&at);
        if (v(at) < 0)
            v = -v;
        dirs.col(c) = v;
    }
    const Eigen::MatrixXd p = x * dirs;

    std::vector<ProjectedPoint> out(n);
    for (std::size_t i = 0; i < n; ++i)
        out[i] = {p(i, 0), p(i, 1), dataset.samples[i].label};
    return out;
}

std::string projection_csv(std::span<const ProjectedPoint> points)
{
    std::ostringstream os;
    os << "x,y,label\n" << std::setprecision(9);
    for (const auto& p : points)
        os << p.x << ',' << p.y << ',' << verdict_name(p.label) << '\n';
    return os.str();
}

} // namespace revprag
