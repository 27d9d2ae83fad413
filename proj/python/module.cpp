#include "revprag/attack.hpp"
#include "revprag/config.hpp"
#include "revprag/corpus.hpp"
#include "revprag/detector.hpp"
#include "revprag/embed.hpp"
#include "revprag/evaluate.hpp"
#include "revprag/pipeline.hpp"
#include "revprag/probedata.hpp"
#include "revprag/retrieve.hpp"

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace revprag;

namespace {

py::dict triple_dict(const QATriple& t)
{
    py::dict d;
    d["id"] = t.id;
    d["question"] = t.question;
    d["supporting_text"] = t.supporting_text;
    d["correct_answer"] = t.correct_answer;
    d["target_answer"] = t.target_answer ? py::object(py::str(*t.target_answer)) : py::object(py::none());
    return d;
}

py::dict document_dict(const Document& doc)
{
    py::dict d;
    d["id"] = doc.id;
    d["text"] = doc.text;
    d["provenance"] = doc.provenance();
    d["source"] = doc.source ? py::object(py::int_(*doc.source)) : py::object(py::none());
    return d;
}

EmbedConfig embed_config(std::uint32_t dim, std::uint32_t ngram, const std::string& metric, bool l2norm)
{
    EmbedConfig c;
    c.dim = dim;
    c.ngram = ngram;
    c.metric = parse_metric(metric);
    c.l2norm = l2norm;
    return c;
}

py::dict rates_dict(const Rates& r)
{
    py::dict d;
    d["tp"] = r.counts.tp;
    d["fp"] = r.counts.fp;
    d["tn"] = r.counts.tn;
    d["fn"] = r.counts.fn;
    d["tpr"] = r.tpr ? py::object(py::float_(*r.tpr)) : py::object(py::none());
    d["fpr"] = r.fpr ? py::object(py::float_(*r.fpr)) : py::object(py::none());
    return d;
}

std::uint8_t label_from(const std::string& name)
{
    if (name == "poisoned")
        return label_poisoned;
    if (name == "correct")
        return label_correct;
    throw Error("unknown label: " + name);
}

} // namespace

PYBIND11_MODULE(_core, m)
{
    m.doc() = "Retrieval poisoning detection from LM activations";
    py::register_exception<Error>(m, "RevpragError", PyExc_ValueError);

    py::class_<Corpus>(m, "Corpus")
        .def_property_readonly("triples",
                               [](const Corpus& c) {
                                   py::list out;
                                   for (const auto& t : c.triples())
                                       out.append(triple_dict(t));
                                   return out;
                               })
        .def_property_readonly("documents",
                               [](const Corpus& c) {
                                   py::list out;
                                   for (const auto& d : c.documents())
                                       out.append(document_dict(d));
                                   return out;
                               })
        .def("to_jsonl", &Corpus::to_jsonl)
        .def("save", &Corpus::save, py::arg("path"))
        .def("__len__", [](const Corpus& c) { return c.triples().size(); });

    m.def(
        "gen_corpus",
        [](std::size_t n_facts, std::uint64_t seed, double poisoned_fraction, std::uint32_t paraphrases) {
            SyntheticOptions o;
            o.n_facts = n_facts;
            o.seed = seed;
            o.poisoned_fraction = poisoned_fraction;
            o.paraphrases = paraphrases;
            return gen_synthetic(o);
        },
        py::arg("n_facts") = 3000, py::arg("seed") = 0, py::arg("poisoned_fraction") = 0.5,
        py::arg("paraphrases") = 7);
    m.def("parse_jsonl", &parse_jsonl, py::arg("content"));
    m.def("load_corpus", &ingest_jsonl, py::arg("path"));

    m.def(
        "encode",
        [](const std::string& text, const std::string& role, std::uint32_t dim, std::uint32_t ngram, bool l2norm) {
            return encode(text, role == "passage" ? Role::passage : Role::query, embed_config(dim, ngram, "dot", l2norm));
        },
        py::arg("text"), py::arg("role") = "query", py::arg("dim") = 256, py::arg("ngram") = 3,
        py::arg("l2norm") = true);
    m.def(
        "sim",
        [](const std::vector<float>& a, const std::vector<float>& b, const std::string& metric) {
            return sim(a, b, parse_metric(metric));
        },
        py::arg("a"), py::arg("b"), py::arg("metric") = "dot");

    py::class_<Index>(m, "Index")
        .def_static(
            "build",
            [](const Corpus& c, std::uint32_t dim, std::uint32_t ngram, const std::string& metric, bool l2norm) {
                return Index::build(c.documents(), embed_config(dim, ngram, metric, l2norm));
            },
            py::arg("corpus"), py::arg("dim") = 256, py::arg("ngram") = 3, py::arg("metric") = "dot",
            py::arg("l2norm") = true)
        .def(
            "top_k",
            [](const Index& idx, const std::string& query, std::size_t k) {
                std::vector<std::pair<std::uint32_t, double>> out;
                for (const auto& e : idx.top_k(query, k).entries)
                    out.emplace_back(e.doc_id, e.score);
                return out;
            },
            py::arg("query"), py::arg("k") = default_top_k)
        .def("save", &Index::save, py::arg("path"))
        .def_static("load", &Index::load, py::arg("path"))
        .def("__len__", &Index::size);

    m.def(
        "poison",
        [](const Corpus& clean, const std::string& kind, std::uint32_t m_texts, std::uint64_t seed) {
            AttackSpec spec;
            spec.kind = parse_attack_kind(kind);
            spec.m = m_texts;
            spec.seed = seed;
            return poison(clean, spec, {}).corpus;
        },
        py::arg("corpus"), py::arg("kind") = "poisonedrag", py::arg("m") = 5, py::arg("seed") = 0);
    m.def("add_noise", &add_noise, py::arg("corpus"), py::arg("doc_frac") = 0.5, py::arg("word_frac") = 0.1,
          py::arg("seed") = 0);

    m.def(
        "metrics",
        [](const std::vector<std::string>& predicted, const std::vector<std::string>& truth) {
            std::vector<std::uint8_t> p, t;
            for (const auto& s : predicted)
                p.push_back(label_from(s));
            for (const auto& s : truth)
                t.push_back(label_from(s));
            return rates_dict(metrics(p, t));
        },
        py::arg("predicted"), py::arg("truth"));
    m.def(
        "triplet_loss",
        [](const std::vector<double>& a, const std::vector<double>& p, const std::vector<double>& n, double margin) {
            return triplet_loss<double>(a, p, n, margin);
        },
        py::arg("anchor"), py::arg("positive"), py::arg("negative"), py::arg("margin") = 1.0);

    m.def(
        "normalized_config", [](const std::string& text) { return config_json(parse_config(text)); },
        py::arg("json_text") = "{}");
    m.def(
        "config_hash", [](const std::string& text) { return config_hash(parse_config(text)); },
        py::arg("json_text") = "{}");
    m.def(
        "full_run",
        [](const std::string& text, const std::filesystem::path& out) {
            const auto config = parse_config(text);
            py::gil_scoped_release release;
            return full_run(config, out);
        },
        py::arg("json_text"), py::arg("out"));
    m.def(
        "project2d",
        [](const std::filesystem::path& activations) {
            std::vector<std::tuple<double, double, std::string>> out;
            for (const auto& p : project2d(ActivationDataset::load(activations)))
                out.emplace_back(p.x, p.y, std::string(verdict_name(p.label)));
            return out;
        },
        py::arg("activations"));
}
