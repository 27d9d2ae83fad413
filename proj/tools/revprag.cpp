#include "revprag/pipeline.hpp"
#include "revprag/textio.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>

using namespace revprag;
namespace fs = std::filesystem;

namespace {

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
};

RunConfig load(const Globals& g)
{
    RunConfig c = g.config.empty() ? RunConfig{} : load_config(g.config);
    if (g.seed)
        c.seed = *g.seed;
    return c;
}

const std::string& need_out(const Globals& g)
{
    if (g.out.empty())
        throw Error("--out is required");
    return g.out;
}

fs::path sidecar(const fs::path& path, const char* ext) { return fs::path(path).replace_extension(ext); }

void print_rates(const Rates& r)
{
    auto show = [](const std::optional<double>& v) { return v ? std::to_string(*v) : std::string("undefined"); };
    std::cout << "TPR " << show(r.tpr) << " FPR " << show(r.fpr) << " (tp " << r.counts.tp << " fp " << r.counts.fp
              << " tn " << r.counts.tn << " fn " << r.counts.fn << ")\n";
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"RAG poisoning detection from LM activations."};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--config", g.config, "JSON run configuration");
    app.add_option("--seed", g.seed, "Overrides the configured seed");
    app.add_option("--out", g.out, "Output path");

    auto sub = [&](const char* name, const char* help) { return app.add_subcommand(name, help); };

    std::uint32_t n = 0;
    auto* gen = sub("gen-corpus", "Generate a synthetic QA corpus");
    gen->add_option("--n", n, "Number of facts")->required();
    gen->callback([&] {
        RunConfig c = load(g);
        c.corpus.n_facts = n;
        c.corpus.path.clear();
        make_corpus(c).save(need_out(g));
    });

    std::string in;
    auto* ing = sub("ingest", "Ingest triples from JSONL");
    ing->add_option("--in", in)->required();
    ing->callback([&] { ingest_jsonl(in).save(need_out(g)); });

    std::string corpus_path;
    auto* bidx = sub("build-index", "Embed every document of a corpus");
    bidx->add_option("--corpus", corpus_path)->required();
    bidx->callback([&] { Index::build(ingest_jsonl(corpus_path).documents(), load(g).embed).save(need_out(g)); });

    std::string kind;
    std::uint32_t m = 0;
    auto* poi = sub("poison", "Inject poisoned texts for designated instances");
    poi->add_option("--corpus", corpus_path)->required();
    poi->add_option("--kind", kind)->check(CLI::IsMember({"poisonedrag", "garag", "prcap"}));
    poi->add_option("--m", m);
    poi->callback([&] {
        RunConfig c = load(g);
        if (!kind.empty())
            c.attack.kind = parse_attack_kind(kind);
        if (m)
            c.attack.m = m;
        const auto out = run_poison(ingest_jsonl(corpus_path), c);
        out.corpus.save(need_out(g));
        write_text(sidecar(g.out, ".records.jsonl"), records_to_jsonl(out.records));
    });

    auto* tlm = sub("train-lm", "Train the language model on clean contexts");
    tlm->add_option("--corpus", corpus_path)->required();
    tlm->callback([&] {
        const RunConfig c = load(g);
        const auto corpus = ingest_jsonl(corpus_path);
        const auto r = run_train_lm(corpus, make_split(corpus, c), c);
        for (std::size_t e = 0; e < r.report.epoch_loss.size(); ++e)
            std::cout << "epoch " << e + 1 << " loss " << r.report.epoch_loss[e] << '\n';
        r.model.save(need_out(g));
    });

    std::string lm_path, index_path, question;
    auto* rag = sub("run-rag", "Answer one question with retrieval");
    rag->add_option("--lm", lm_path)->required();
    rag->add_option("--index", index_path)->required();
    rag->add_option("--corpus", corpus_path, "Corpus the index was built from")->required();
    rag->add_option("--question", question)->required();
    rag->callback([&] {
        const RunConfig c = load(g);
        const auto corpus = ingest_jsonl(corpus_path);
        const auto index = Index::load(index_path);
        const auto hits = index.top_k(question, c.k);
        for (const auto& e : hits.entries)
            std::printf("[%u] %s\n", e.doc_id, corpus.document(e.doc_id).text.c_str());
        const auto gen = LanguageModel::load(lm_path).generate(assemble_prompt(question, retrieved_texts(corpus, hits)),
                                                               false);
        std::cout << "answer: " << gen.answer << '\n';
    });

    std::string query;
    std::size_t k = 0;
    auto* ret = sub("retrieve", "Top-k documents for a query");
    ret->add_option("--index", index_path)->required();
    ret->add_option("--query", query)->required();
    ret->add_option("--k", k);
    ret->callback([&] {
        const auto index = Index::load(index_path);
        for (const auto& e : index.top_k(query, k ? k : load(g).k).entries)
            std::printf("%u %.6f\n", e.doc_id, e.score);
    });

    auto* col = sub("collect", "Collect labeled activation maps");
    col->add_option("--corpus", corpus_path)->required();
    col->add_option("--index", index_path)->required();
    col->add_option("--lm", lm_path)->required();
    col->add_option("--k", k);
    col->callback([&] {
        RunConfig c = load(g);
        if (k)
            c.k = static_cast<std::uint32_t>(k);
        const auto corpus = ingest_jsonl(corpus_path);
        const auto r = collect(corpus, Index::load(index_path), LanguageModel::load(lm_path), collect_options(c));
        std::cout << "correct " << r.correct << " poisoned " << r.poisoned << " discarded " << r.discarded << '\n';
        normalize(make_dataset(r.samples, make_split(corpus, c)), c.stats_scope).save(need_out(g));
    });

    std::string data_path;
    auto* tdet = sub("train-detector", "Train the triplet detector and its support set");
    tdet->add_option("--data", data_path)->required();
    tdet->callback([&] {
        const RunConfig c = load(g);
        const auto ds = ActivationDataset::load(data_path);
        const auto r = train_detector(ds, detector_config(c));
        std::cout << "loss first " << r.epoch_loss.front() << " last " << r.epoch_loss.back() << '\n';
        r.detector.save(need_out(g));
        build_support(r.detector, ds, c.detector.support_size, stage_seed(c, Stage::support))
            .save(sidecar(g.out, ".rvps"));
    });

    std::string det_path, support_path;
    auto* det = sub("detect", "Classify the test split");
    det->add_option("--detector", det_path)->required();
    det->add_option("--support", support_path, "Defaults to the detector path with extension .rvps");
    det->add_option("--activations", data_path)->required();
    det->callback([&] {
        const auto d = Detector::load(det_path);
        const auto s = SupportSet::load(support_path.empty() ? sidecar(det_path, ".rvps") : fs::path(support_path));
        const auto v = detect(d, s, ActivationDataset::load(data_path));
        write_text(need_out(g), verdicts_to_jsonl(v));
        print_rates(metrics(v));
    });

    std::string verdicts_path;
    auto* ev = sub("evaluate", "TPR and FPR from a verdict file");
    ev->add_option("--verdicts", verdicts_path)->required();
    ev->callback([&] {
        const auto r = metrics(verdicts_from_jsonl(read_text(verdicts_path)));
        print_rates(r);
        if (!g.out.empty())
            write_text(g.out, rates_json(r));
    });

    std::string axis;
    auto* sw = sub("sweep", "Ablation table over one axis");
    sw->add_option("--axis", axis)->required()->check(CLI::IsMember({"poison_quantity", "support_size", "attack_kind"}));
    sw->callback([&] {
        const RunConfig c = load(g);
        const auto a = parse_sweep_axis(axis);
        const auto rows = sweep(a, c, prepare(c));
        const auto csv = sweep_csv(a, rows);
        std::cout << csv;
        if (!g.out.empty())
            write_text(g.out, csv);
    });

    double doc_frac = 0.5, word_frac = 0.1;
    auto* noi = sub("noise", "Typos in a fraction of the clean documents");
    noi->add_option("--corpus", corpus_path)->required();
    noi->add_option("--doc-frac", doc_frac)->check(CLI::Range(0.0, 1.0));
    noi->add_option("--word-frac", word_frac)->check(CLI::Range(0.0, 1.0));
    noi->callback([&] {
        const RunConfig c = load(g);
        add_noise(ingest_jsonl(corpus_path), doc_frac, word_frac, stage_seed(c, Stage::noise)).save(need_out(g));
    });

    std::size_t warmup = 2, measured = 5;
    auto* be = sub("bench", "Detector training and inference timing");
    be->add_option("--data", data_path)->required();
    be->add_option("--warmup", warmup);
    be->add_option("--measured", measured)->check(CLI::PositiveNumber);
    be->callback([&] {
        const RunConfig c = load(g);
        const auto json = bench_json(bench_detector(ActivationDataset::load(data_path), detector_config(c), warmup, measured));
        std::cout << json << '\n';
        if (!g.out.empty())
            write_text(g.out, json);
    });

    auto* pro = sub("project", "PCA projection of activation maps to CSV");
    pro->add_option("--activations", data_path)->required();
    pro->callback([&] { write_text(need_out(g), projection_csv(project2d(ActivationDataset::load(data_path)))); });

    auto* full = sub("full-run", "Every stage end to end");
    full->callback([&] {
        const RunConfig c = load(g);
        const auto manifest = full_run(c, need_out(g));
        std::cout << manifest << '\n';
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const StageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
