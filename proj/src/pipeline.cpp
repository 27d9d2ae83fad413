#include "revprag/pipeline.hpp"

#include "revprag/error.hpp"
#include "revprag/rng.hpp"
#include "revprag/textio.hpp"

#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <functional>
#include <sstream>

namespace revprag {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string fnv_hex(std::string_view bytes)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : bytes) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

json rate_value(const std::optional<double>& r) { return r ? json(*r) : json(nullptr); }

json split_json(const CorpusSplit& s)
{
    return {{"train_ids", s.train_ids}, {"test_ids", s.test_ids}, {"support_ids", s.support_ids}};
}

std::string utc_now()
{
    const std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

} // namespace

Corpus make_corpus(const RunConfig& config)
{
    if (!config.corpus.path.empty())
        return ingest_jsonl(config.corpus.path);
    SyntheticOptions o;
    o.n_facts = config.corpus.n_facts;
    o.seed = stage_seed(config, Stage::corpus);
    o.poisoned_fraction = config.corpus.poisoned_fraction;
    o.paraphrases = config.corpus.paraphrases;
    return gen_synthetic(o);
}

CorpusSplit make_split(const Corpus& corpus, const RunConfig& config)
{
    return split(corpus, config.corpus.split, stage_seed(config, Stage::split));
}

PoisonOutcome run_poison(const Corpus& clean, const RunConfig& config)
{
    AttackSpec spec = config.attack;
    spec.seed = stage_seed(config, Stage::attack);
    return poison(clean, spec, config.embed);
}

LMTrainResult run_train_lm(const Corpus& clean, const CorpusSplit& split, const RunConfig& config)
{
    LMConfig lm = config.lm;
    lm.seed = stage_seed(config, Stage::lm);
    const auto index = Index::build(clean.clean_documents(), config.embed);
    return train_lm(clean, split.train_ids, index, config.k, lm);
}

CollectOptions collect_options(const RunConfig& config)
{
    CollectOptions o;
    o.k = config.k;
    o.mode = config.match;
    o.tau = config.tau;
    o.embed = config.embed;
    return o;
}

DetectorConfig detector_config(const RunConfig& config)
{
    DetectorConfig d = config.detector;
    d.seed = stage_seed(config, Stage::detector);
    return d;
}

LMGates lm_gates(const LanguageModel& lm, const Corpus& clean, const CorpusSplit& split,
                 const CollectResult& collected, const RunConfig& config)
{
    LMGates g;
    const auto index = Index::build(clean.clean_documents(), config.embed);
    g.clean_em = exact_match_rate(lm, clean, split.test_ids, index, config.k, false);
    std::size_t designated = 0;
    for (const auto& t : clean.triples())
        designated += t.designated_poisoned();
    g.target_rate = designated ? static_cast<double>(collected.poisoned) / static_cast<double>(designated) : 0.0;
    g.passed = g.clean_em >= config.min_clean_em && g.target_rate >= config.min_target_rate;
    return g;
}

DetectionRun run_detection(const Corpus& poisoned, const LanguageModel& lm, const CorpusSplit& split,
                           const RunConfig& config, CollectResult* collected)
{
    const auto index = Index::build(poisoned.documents(), config.embed);
    auto col = collect(poisoned, index, lm, collect_options(config));
    DetectionRun run;
    run.correct = col.correct;
    run.poisoned = col.poisoned;
    run.discarded = col.discarded;
    run.dataset = normalize(make_dataset(col.samples, split), config.stats_scope);
    if (collected)
        *collected = std::move(col);

    auto trained = train_detector(run.dataset, detector_config(config));
    run.epoch_loss = std::move(trained.epoch_loss);
    run.detector.emplace(std::move(trained.detector));
    run.support =
        build_support(*run.detector, run.dataset, config.detector.support_size, stage_seed(config, Stage::support));
    run.verdicts = detect(*run.detector, run.support, run.dataset);
    run.rates = metrics(run.verdicts);
    return run;
}

Shared prepare(const RunConfig& config)
{
    auto clean = make_corpus(config);
    auto split = make_split(clean, config);
    auto lm = run_train_lm(clean, split, config).model;
    return {std::move(clean), std::move(split), std::move(lm)};
}

SweepAxis parse_sweep_axis(std::string_view name)
{
    if (name == "poison_quantity")
        return SweepAxis::poison_quantity;
    if (name == "support_size")
        return SweepAxis::support_size;
    if (name == "attack_kind")
        return SweepAxis::attack_kind;
    throw Error("unknown sweep axis: " + std::string(name));
}

std::string_view to_string(SweepAxis axis)
{
    switch (axis) {
    case SweepAxis::poison_quantity:
        return "poison_quantity";
    case SweepAxis::support_size:
        return "support_size";
    default:
        return "attack_kind";
    }
}

std::vector<SweepRow> sweep(SweepAxis axis, const RunConfig& config, const Shared& shared, const DetectionRun* base)
{
    std::vector<SweepRow> rows;
    auto detect_with = [&](const RunConfig& c) {
        if (base && c.attack.kind == config.attack.kind && c.attack.m == config.attack.m)
            return base->rates;
        return run_detection(run_poison(shared.clean, c).corpus, shared.lm, shared.split, c).rates;
    };
    switch (axis) {
    case SweepAxis::poison_quantity:
        for (std::uint32_t m = 1; m <= 5; ++m) {
            RunConfig c = config;
            c.attack.m = m;
            rows.push_back({std::to_string(m), detect_with(c)});
        }
        break;
    case SweepAxis::support_size: {
        std::optional<DetectionRun> own;
        if (!base)
            own = run_detection(run_poison(shared.clean, config).corpus, shared.lm, shared.split, config);
        const DetectionRun& run = base ? *base : *own;
        for (std::size_t size = 50; size <= 250; size += 50) {
            const auto support = build_support(*run.detector, run.dataset, size, stage_seed(config, Stage::support));
            rows.push_back({std::to_string(size), metrics(detect(*run.detector, support, run.dataset))});
        }
        break;
    }
    case SweepAxis::attack_kind:
        for (auto kind : {AttackKind::poisonedrag, AttackKind::garag, AttackKind::prcap}) {
            RunConfig c = config;
            c.attack.kind = kind;
            rows.push_back({std::string(to_string(kind)), detect_with(c)});
        }
        break;
    }
    return rows;
}

std::string sweep_csv(SweepAxis axis, std::span<const SweepRow> rows)
{
    std::ostringstream os;
    os << to_string(axis) << ",tpr,fpr,tp,fp,tn,fn\n";
    auto rate = [](const std::optional<double>& r) {
        if (!r)
            return std::string("undefined");
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.6f", *r);
        return std::string(buf);
    };
    for (const auto& r : rows) {
        const auto& c = r.rates.counts;
        os << r.setting << ',' << rate(r.rates.tpr) << ',' << rate(r.rates.fpr) << ',' << c.tp << ',' << c.fp << ','
           << c.tn << ',' << c.fn << '\n';
    }
    return os.str();
}

DetectionRun noise_run(const RunConfig& config, const Shared& shared)
{
    const auto poisoned = run_poison(shared.clean, config).corpus;
    const auto noisy =
        add_noise(poisoned, config.noise.doc_frac, config.noise.word_frac, stage_seed(config, Stage::noise));
    return run_detection(noisy, shared.lm, shared.split, config);
}

std::string file_hash(const fs::path& path) { return fnv_hex(read_text(path)); }

std::string full_run(const RunConfig& config, const fs::path& out)
{
    fs::create_directories(out);
    json manifest;
    manifest["config_hash"] = config_hash(config);
    manifest["config"] = json::parse(config_json(config));
    manifest["created"] = utc_now();
    manifest["stages"] = json::array();
    json artifacts = json::object();

    auto stage = [&](const char* name, const std::function<std::vector<std::string>()>& body) {
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<std::string> files;
        try {
            files = body();
        } catch (const std::exception& e) {
            throw StageError(name, e.what());
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        manifest["stages"].push_back({{"name", name}, {"seconds", secs}});
        for (const auto& f : files)
            artifacts[f] = file_hash(out / f);
    };

    Corpus clean;
    CorpusSplit split;
    stage("corpus", [&] {
        clean = make_corpus(config);
        split = make_split(clean, config);
        clean.save(out / "corpus.jsonl");
        write_text(out / "split.json", split_json(split).dump(2));
        return std::vector<std::string>{"corpus.jsonl", "split.json"};
    });

    PoisonOutcome poisoned;
    Index index;
    stage("poison", [&] {
        poisoned = run_poison(clean, config);
        index = Index::build(poisoned.corpus.documents(), config.embed);
        poisoned.corpus.save(out / "poisoned.jsonl");
        write_text(out / "poison_records.jsonl", records_to_jsonl(poisoned.records));
        index.save(out / "index.bin");
        return std::vector<std::string>{"poisoned.jsonl", "poison_records.jsonl", "index.bin"};
    });

    std::optional<LanguageModel> lm;
    stage("train-lm", [&] {
        auto trained = run_train_lm(clean, split, config);
        lm.emplace(std::move(trained.model));
        lm->save(out / "lm.bin");
        json report = {{"initial_loss", trained.report.initial_loss}, {"epoch_loss", trained.report.epoch_loss}};
        write_text(out / "lm_report.json", report.dump(2));
        return std::vector<std::string>{"lm.bin", "lm_report.json"};
    });

    ActivationDataset dataset;
    LMGates gates;
    stage("collect", [&] {
        auto col = collect(poisoned.corpus, index, *lm, collect_options(config));
        manifest["collect"] = {{"correct", col.correct}, {"poisoned", col.poisoned}, {"discarded", col.discarded}};
        gates = lm_gates(*lm, clean, split, col, config);
        dataset = normalize(make_dataset(col.samples, split), config.stats_scope);
        dataset.save(out / "activations.actv");
        return std::vector<std::string>{"activations.actv"};
    });
    manifest["lm_gates"] = {{"clean_em", gates.clean_em},
                            {"target_rate", gates.target_rate},
                            {"min_clean_em", config.min_clean_em},
                            {"min_target_rate", config.min_target_rate},
                            {"passed", gates.passed}};

    std::optional<Detector> detector;
    SupportSet support;
    stage("train-detector", [&] {
        auto trained = train_detector(dataset, detector_config(config));
        detector.emplace(std::move(trained.detector));
        support = build_support(*detector, dataset, config.detector.support_size, stage_seed(config, Stage::support));
        detector->save(out / "detector.rvpd");
        support.save(out / "support.rvps");
        json report = {{"epoch_loss", trained.epoch_loss}};
        write_text(out / "detector_report.json", report.dump(2));
        return std::vector<std::string>{"detector.rvpd", "support.rvps", "detector_report.json"};
    });

    std::vector<VerdictRecord> verdicts;
    stage("detect", [&] {
        verdicts = detect(*detector, support, dataset);
        write_text(out / "verdicts.jsonl", verdicts_to_jsonl(verdicts));
        return std::vector<std::string>{"verdicts.jsonl"};
    });

    Rates rates;
    stage("evaluate", [&] {
        rates = metrics(verdicts_from_jsonl(read_text(out / "verdicts.jsonl")));
        write_text(out / "metrics.json", rates_json(rates));
        return std::vector<std::string>{"metrics.json"};
    });

    manifest["tpr"] = rate_value(rates.tpr);
    manifest["fpr"] = rate_value(rates.fpr);
    manifest["counts"] = {
        {"tp", rates.counts.tp}, {"fp", rates.counts.fp}, {"tn", rates.counts.tn}, {"fn", rates.counts.fn}};
    manifest["artifacts"] = artifacts;
    const std::string text = manifest.dump(2);
    write_text(out / "manifest.json", text);
    return text;
}

} // namespace revprag
