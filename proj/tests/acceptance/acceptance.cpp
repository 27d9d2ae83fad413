// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Usage: acceptance --out DIR [--config FILE]

#include "revprag/pipeline.hpp"
#include "revprag/rng.hpp"
#include "revprag/textio.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

using namespace revprag;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Thresholds, pinned.
constexpr double min_tpr = 0.90;
constexpr double max_fpr = 0.10;
constexpr double min_sweep_tpr = 0.85;
constexpr double max_support_spread = 0.05;
constexpr double max_noise_tpr_drop = 0.05;
constexpr double max_noise_fpr_rise = 0.05;
constexpr double max_fd_rel_error = 1e-3;
constexpr double max_norm_mean = 1e-6;
constexpr double max_norm_std_error = 1e-6;
constexpr double max_sample_seconds = 0.010;
constexpr int fd_probes = 25;

int failures = 0;
bool reported[10] = {};

void report(int criterion, bool pass, const std::string& detail)
{
    reported[criterion] = true;
    std::printf("%s criterion %d: %s\n", pass ? "PASS" : "FAIL", criterion, detail.c_str());
    std::fflush(stdout);
    failures += !pass;
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0, double d = 0.0)
{
    char buf[256];
    std::snprintf(buf, sizeof buf, f, a, b, c, d);
    return buf;
}

double rate_or_nan(const std::optional<double>& r) { return r ? *r : std::numeric_limits<double>::quiet_NaN(); }

double seconds_since(std::chrono::steady_clock::time_point t0)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void note(const std::string& what) { std::fprintf(stderr, "[acceptance] %s\n", what.c_str()); }

// Exact brute-force retrieval: score every document, sort by (score desc, id asc).
bool retrieval_oracle(std::size_t& mismatches)
{
    const auto corpus = gen_synthetic({1000, 21, 0.5, 0});
    const EmbedConfig cfg;
    const auto idx = Index::build(corpus.documents(), cfg);
    std::vector<EmbeddingVector> passages;
    for (const auto& d : corpus.documents())
        passages.push_back(encode(d.text, Role::passage, cfg));
    Rng rng(99);
    mismatches = 0;
    for (int q = 0; q < 100; ++q) {
        const auto& t = corpus.triple(static_cast<std::uint32_t>(rng.below(corpus.triples().size())));
        const std::string query = q % 2 ? t.question : t.supporting_text.substr(0, 10 + rng.below(30));
        const auto qv = encode(query, Role::query, cfg);
        std::vector<std::pair<double, std::uint32_t>> all;
        for (std::size_t i = 0; i < passages.size(); ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < qv.size(); ++j)
                s += static_cast<double>(qv[j]) * passages[i][j];
            all.push_back({-s, corpus.documents()[i].id});
        }
        std::sort(all.begin(), all.end());
        const auto got = idx.top_k(query, 5).entries;
        bool same = got.size() == 5;
        for (std::size_t r = 0; same && r < 5; ++r)
            same = got[r].doc_id == all[r].second && got[r].score == -all[r].first;
        mismatches += !same;
    }
    return mismatches == 0;
}

bool classify_oracle(const DetectionRun& run, std::size_t& checked)
{
    checked = 0;
    for (auto i : run.dataset.indices(SplitTag::test)) {
        const auto z = run.detector->embed(run.dataset.samples[i].map);
        double best = std::numeric_limits<double>::infinity();
        std::size_t arg = 0;
        for (std::size_t m = 0; m < run.support.size(); ++m) {
            double s = 0.0;
            for (std::size_t j = 0; j < z.size(); ++j) {
                const double diff = static_cast<double>(z[j]) - run.support.embeddings[m * run.support.embed + j];
                s += diff * diff;
            }
            if (s < best) {
                best = s;
                arg = m;
            }
        }
        const auto v = classify(*run.detector, run.support, run.dataset.samples[i].map);
        if (v.nearest != arg || v.label != run.support.labels[arg])
            return false;
        ++checked;
    }
    return checked > 0;
}

template <typename Loss>
double worst_fd_error(std::span<double> params, const std::vector<std::pair<std::size_t, std::size_t>>& tensors,
                      std::span<const double> grad, Loss loss, Rng& rng, double h)
{
    double worst = 0.0;
    for (int probe = 0; probe < fd_probes; ++probe) {
        const auto& [off, n] = tensors[rng.below(tensors.size())];
        const std::size_t i = off + rng.below(n);
        const double orig = params[i];
        params[i] = orig + h;
        const double lp = loss();
        params[i] = orig - h;
        const double lm = loss();
        params[i] = orig;
        const double numeric = (lp - lm) / (2 * h);
        worst = std::max(worst, std::abs(numeric - grad[i]) / std::max({std::abs(numeric), std::abs(grad[i]), 1e-6}));
    }
    return worst;
}

double lm_fd_error()
{
    Transformer<double> net({17, 2, 8, 2, 24, 32});
    net.init(41);
    Rng rng(43);
    for (auto& w : net.params())
        w += 0.2 * rng.normal();
    const std::vector<TokenId> toks = {1, 6, 9, 4, 12, 16, 5, 7, 2, 11, 8};
    std::vector<double> grad(net.params().size(), 0.0);
    net.loss_and_grad(toks, 3, grad, 1.0);
    return worst_fd_error(net.params(), net.layout().tensors, grad, [&] { return net.loss(toks, 3); }, rng, 1e-5);
}

double triplet_fd_error()
{
    EmbeddingNet<double> net({5, 8, 4, 4});
    net.init(47);
    Rng rng(53);
    for (auto& w : net.params())
        w += 0.05 * rng.normal();
    std::vector<std::vector<double>> maps(6, std::vector<double>(40));
    for (auto& m : maps)
        for (auto& v : m)
            v = rng.normal();
    const std::vector<Triplet> ts = {{0, 1, 2}, {3, 4, 5}, {2, 5, 0}};
    const double margin = 10.0;
    std::vector<double> grad(net.params().size(), 0.0);
    mean_triplet_loss<double>(net, maps, ts, margin, grad);
    return worst_fd_error(net.params(), net.layout().tensors, grad,
                          [&] { return mean_triplet_loss<double>(net, maps, ts, margin); }, rng, 1e-6);
}

// Worst train-split |mean| and |std - 1| over non-constant dimensions.
std::pair<double, double> normalization_error(const ActivationDataset& d)
{
    const auto train = d.indices(SplitTag::train);
    const std::size_t n = std::size_t{d.rows} * d.cols;
    double worst_mean = 0.0, worst_std = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        if (d.stats.sigma[j] < d.stats.epsilon)
            continue;
        double mu = 0.0;
        for (auto i : train)
            mu += d.samples[i].map.values[j];
        mu /= static_cast<double>(train.size());
        double var = 0.0;
        for (auto i : train) {
            const double c = d.samples[i].map.values[j] - mu;
            var += c * c;
        }
        worst_mean = std::max(worst_mean, std::abs(mu));
        worst_std = std::max(worst_std, std::abs(std::sqrt(var / static_cast<double>(train.size())) - 1.0));
    }
    return {worst_mean, worst_std};
}

// Integer-exact cases: each result must be within one f32 ulp of the value.
bool triplet_ulp_cases()
{
    struct Case {
        std::vector<float> a, p, n;
        float margin, expected;
    };
    const std::vector<Case> cases = {
        {{0, 0}, {3, 4}, {0, 1}, 1.0f, 5.0f},
        {{0, 0}, {0, 0}, {0, 10}, 1.0f, 0.0f},
        {{1, 1}, {1, 1}, {1, 1}, 0.5f, 0.5f},
        {{0, 0, 0}, {2, 3, 6}, {1, 2, 2}, 1.0f, 5.0f},
        {{0, 0}, {0, 1}, {0, 2}, 1.0f, 0.0f},
        {{-1, 2}, {5, 10}, {-1, 2}, 0.25f, 10.25f},
    };
    for (const auto& c : cases) {
        const float got = triplet_loss<float>(c.a, c.p, c.n, c.margin);
        const float ulp = std::nextafter(c.expected, std::numeric_limits<float>::infinity()) - c.expected;
        if (std::abs(got - c.expected) > ulp)
            return false;
    }
    return true;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Acceptance criteria 1-9."};
    std::string out_dir = "acceptance_runs", config_path;
    app.add_option("--out", out_dir, "Working directory for runs");
    app.add_option("--config", config_path, "Run configuration (defaults when omitted)");
    CLI11_PARSE(app, argc, argv);

    try {
        const RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
        const fs::path out(out_dir);
        fs::remove_all(out);
        fs::create_directories(out);

        auto t0 = std::chrono::steady_clock::now();
        const auto m1 = json::parse(full_run(cfg, out / "run1"));
        const double run1_seconds = seconds_since(t0);
        note(fmt("full run 1: %.1f s", run1_seconds));
        const double tpr = m1["tpr"].is_null() ? std::nan("") : m1["tpr"].get<double>();
        const double fpr = m1["fpr"].is_null() ? std::nan("") : m1["fpr"].get<double>();
        report(1, tpr >= min_tpr && fpr <= max_fpr,
               fmt("full-run TPR %.4f (>= 0.90), FPR %.4f (<= 0.10), %.0f s", tpr, fpr, run1_seconds) +
                   " over " + std::to_string(m1["counts"]["tp"].get<std::size_t>() + m1["counts"]["fn"].get<std::size_t>() +
                                             m1["counts"]["tn"].get<std::size_t>() + m1["counts"]["fp"].get<std::size_t>()) +
                   " test samples");

        // The later stages reuse the clean corpus, split and LM of run 1.
        Shared shared{make_corpus(cfg), {}, LanguageModel::load(out / "run1" / "lm.bin")};
        shared.split = make_split(shared.clean, cfg);
        t0 = std::chrono::steady_clock::now();
        const auto base = run_detection(run_poison(shared.clean, cfg).corpus, shared.lm, shared.split, cfg);
        note(fmt("base detection rerun: %.1f s, TPR %.4f FPR %.4f", seconds_since(t0), rate_or_nan(base.rates.tpr),
                 rate_or_nan(base.rates.fpr)));

        t0 = std::chrono::steady_clock::now();
        const auto quantity = sweep(SweepAxis::poison_quantity, cfg, shared, &base);
        write_text(out / "sweep_poison_quantity.csv", sweep_csv(SweepAxis::poison_quantity, quantity));
        bool q_ok = true;
        std::ostringstream q_detail;
        q_detail << "TPR by m";
        for (const auto& r : quantity) {
            q_ok = q_ok && r.rates.tpr && *r.rates.tpr >= min_sweep_tpr;
            q_detail << ' ' << r.setting << '=' << fmt("%.4f", rate_or_nan(r.rates.tpr));
        }
        note(fmt("quantity sweep: %.1f s", seconds_since(t0)));
        report(2, q_ok && quantity.size() == 5, q_detail.str() + " (each >= 0.85)");

        const auto support = sweep(SweepAxis::support_size, cfg, shared, &base);
        write_text(out / "sweep_support_size.csv", sweep_csv(SweepAxis::support_size, support));
        double lo = 1.0, hi = 0.0;
        bool s_ok = support.size() == 5;
        std::ostringstream s_detail;
        s_detail << "TPR by support size";
        for (const auto& r : support) {
            s_ok = s_ok && r.rates.tpr.has_value();
            lo = std::min(lo, rate_or_nan(r.rates.tpr));
            hi = std::max(hi, rate_or_nan(r.rates.tpr));
            s_detail << ' ' << r.setting << '=' << fmt("%.4f", rate_or_nan(r.rates.tpr));
        }
        report(3, s_ok && hi - lo <= max_support_spread, s_detail.str() + fmt(", spread %.4f (<= 0.05)", hi - lo));

        t0 = std::chrono::steady_clock::now();
        const auto noisy = noise_run(cfg, shared);
        note(fmt("noise run: %.1f s", seconds_since(t0)));
        const double n_tpr = rate_or_nan(noisy.rates.tpr), n_fpr = rate_or_nan(noisy.rates.fpr);
        report(4, tpr - n_tpr <= max_noise_tpr_drop && n_fpr - fpr <= max_noise_fpr_rise,
               fmt("noisy TPR %.4f (drop %.4f <= 0.05), FPR %.4f (rise %.4f <= 0.05)", n_tpr, tpr - n_tpr, n_fpr,
                   n_fpr - fpr));

        std::size_t mismatches = 0, checked = 0;
        const bool top_ok = retrieval_oracle(mismatches);
        const bool nn_ok = classify_oracle(base, checked);
        report(5, top_ok && nn_ok,
               "top_k vs brute force: " + std::to_string(100 - mismatches) + "/100 queries exact; classify vs 1-NN: " +
                   (nn_ok ? "all " + std::to_string(checked) + " test samples exact" : std::string("mismatch")));

        const double lm_err = lm_fd_error(), trip_err = triplet_fd_error();
        const auto [norm_mean, norm_std] = normalization_error(ActivationDataset::load(out / "run1" / "activations.actv"));
        const bool ulp_ok = triplet_ulp_cases();
        report(6,
               lm_err <= max_fd_rel_error && trip_err <= max_fd_rel_error && norm_mean <= max_norm_mean &&
                   norm_std <= max_norm_std_error && ulp_ok,
               fmt("FD rel error LM %.2e, triplet %.2e (<= 1e-3); normalized |mean| %.2e, |std-1| %.2e (<= 1e-6); ",
                   lm_err, trip_err, norm_mean, norm_std) +
                   (ulp_ok ? "triplet cases within 1 ulp" : "triplet cases off by more than 1 ulp"));

        t0 = std::chrono::steady_clock::now();
        const auto m2 = json::parse(full_run(cfg, out / "run2"));
        note(fmt("full run 2: %.1f s", seconds_since(t0)));
        std::vector<std::string> differing;
        for (const auto& [file, hash] : m1["artifacts"].items())
            if (!m2["artifacts"].contains(file) || m2["artifacts"][file] != hash)
                differing.push_back(file);
        report(7, differing.empty() && m1["artifacts"].size() == m2["artifacts"].size(),
               differing.empty() ? std::to_string(m1["artifacts"].size()) + " artifacts bit-identical across two runs"
                                 : "differs: " + differing.front());

        const auto& gates = m1["lm_gates"];
        report(8, gates["passed"].get<bool>(),
               fmt("clean EM %.4f (>= %.2f), poisoned-context target rate %.4f (>= %.2f)",
                   gates["clean_em"].get<double>(), cfg.min_clean_em, gates["target_rate"].get<double>(),
                   cfg.min_target_rate));

        const auto bench = bench_detector(ActivationDataset::load(out / "run1" / "activations.actv"),
                                          detector_config(cfg), 2, 5);
        write_text(out / "bench.json", bench_json(bench));
        report(9, bench.mean_sample_seconds <= max_sample_seconds,
               fmt("detector epoch %.3f s, inference %.3f ms per sample (<= 10 ms)", bench.mean_epoch_seconds,
                   bench.mean_sample_seconds * 1e3));
    } catch (const std::exception& e) {
        for (int c = 1; c <= 9; ++c)
            if (!reported[c])
                report(c, false, std::string("not reached, run aborted: ") + e.what());
        return 1;
    }
    return failures ? 1 : 0;
}
