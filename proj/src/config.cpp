#include "revprag/config.hpp"

#include "revprag/error.hpp"
#include "revprag/rng.hpp"
#include "revprag/textio.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <set>

namespace revprag {

using nlohmann::json;

namespace {

// Reads one JSON object, recording which keys were consumed so leftovers
// can be reported as unknown.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path))
    {
        if (!j_.is_object())
            throw Error("config: " + name() + " must be an object");
    }

    template <typename T>
    void number(const char* key, T& out, double lo, double hi)
    {
        const json* v = take(key);
        if (!v)
            return;
        if (!v->is_number())
            throw Error("config: " + name(key) + " must be a number");
        const double x = v->get<double>();
        if constexpr (std::is_integral_v<T>) {
            if (!v->is_number_integer() || (x < 0 && std::is_unsigned_v<T>))
                throw Error("config: " + name(key) + " must be a non-negative integer");
        }
        if (!(x >= lo && x <= hi))
            throw Error("config: " + name(key) + " = " + v->dump() + " outside [" + trim(lo) + ", " + trim(hi) + "]");
        out = v->get<T>();
    }

    void boolean(const char* key, bool& out)
    {
        const json* v = take(key);
        if (!v)
            return;
        if (!v->is_boolean())
            throw Error("config: " + name(key) + " must be a boolean");
        out = v->get<bool>();
    }

    template <typename F>
    void choice(const char* key, F parse)
    {
        const json* v = take(key);
        if (!v)
            return;
        if (!v->is_string())
            throw Error("config: " + name(key) + " must be a string");
        try {
            parse(v->get<std::string>());
        } catch (const Error& e) {
            throw Error("config: " + name(key) + ": " + e.what());
        }
    }

    void text(const char* key, std::string& out)
    {
        const json* v = take(key);
        if (!v)
            return;
        if (!v->is_string())
            throw Error("config: " + name(key) + " must be a string");
        out = v->get<std::string>();
    }

    std::optional<Section> child(const char* key)
    {
        const json* v = take(key);
        if (!v)
            return std::nullopt;
        return Section(*v, name(key));
    }

    void finish() const
    {
        for (const auto& [key, value] : j_.items())
            if (!seen_.contains(key))
                throw Error("config: unknown key " + name(key.c_str()));
    }

private:
    const json* take(const char* key)
    {
        seen_.insert(key);
        const auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    std::string name() const { return path_.empty() ? "<root>" : path_; }
    std::string name(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

    static std::string trim(double x)
    {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%g", x);
        return buf;
    }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

constexpr double big = 1e9;

template <typename F>
void with(Section& parent, const char* key, F body)
{
    if (auto s = parent.child(key)) {
        body(*s);
        s->finish();
    }
}

} // namespace

std::uint64_t stage_seed(const RunConfig& config, Stage stage)
{
    return Rng::mix(config.seed, static_cast<std::uint64_t>(stage));
}

RunConfig parse_config(std::string_view json_text)
{
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::exception& e) {
        throw Error(std::string("config: ") + e.what());
    }
    RunConfig c;
    Section s(root, "");
    s.number("seed", c.seed, 0, 1.8e19);
    with(s, "corpus", [&](Section& t) {
        t.number("n_facts", c.corpus.n_facts, 1, 1e6);
        t.number("poisoned_fraction", c.corpus.poisoned_fraction, 0, 1);
        t.number("paraphrases", c.corpus.paraphrases, 0, static_cast<double>(claim_prefixes().size() - 1));
        t.text("path", c.corpus.path);
        with(t, "split", [&](Section& u) {
            u.number("train", c.corpus.split.train, 1e-6, 1);
            u.number("test", c.corpus.split.test, 1e-6, 1);
            u.number("support", c.corpus.split.support, 1e-6, 1);
        });
    });
    const auto& r = c.corpus.split;
    if (std::abs(r.train + r.test + r.support - 1.0) > 1e-9)
        throw Error("config: corpus.split ratios must sum to 1");
    with(s, "embed", [&](Section& t) {
        t.number("dim", c.embed.dim, 1, 1 << 20);
        t.number("ngram", c.embed.ngram, 1, 16);
        t.choice("metric", [&](const std::string& v) { c.embed.metric = parse_metric(v); });
        t.boolean("l2norm", c.embed.l2norm);
        t.boolean("shared_encoders", c.embed.shared_encoders);
    });
    with(s, "retrieve", [&](Section& t) { t.number("k", c.k, 1, 64); });
    with(s, "attack", [&](Section& t) {
        t.choice("kind", [&](const std::string& v) { c.attack.kind = parse_attack_kind(v); });
        t.number("m", c.attack.m, 1, 64);
        with(t, "knobs", [&](Section& u) {
            u.number("population", c.attack.genetic.population, 2, 1e5);
            u.number("generations", c.attack.genetic.generations, 0, 1e5);
            u.number("mutation_rate", c.attack.genetic.mutation_rate, 0, 1);
            u.number("steps", c.attack.hill_climb.steps, 0, 1e6);
            u.number("queries", c.attack.hill_climb.queries, 1, 1e3);
        });
    });
    with(s, "lm", [&](Section& t) {
        t.number("L", c.lm.layers, 1, 64);
        t.number("d", c.lm.d_model, 1, 4096);
        t.number("heads", c.lm.heads, 1, 64);
        t.number("ctx", c.lm.context, 8, 1 << 16);
        t.number("lr", c.lm.lr, 1e-7, 1);
        t.number("epochs", c.lm.epochs, 0, 1e4);
        t.number("batch", c.lm.batch, 1, 1e5);
        t.number("answer_swap", c.lm.answer_swap, 0, 1);
        t.number("conflict", c.lm.conflict, 0, 1);
        t.number("question_echo", c.lm.question_echo, 0, 1);
        t.number("gold_repeat", c.lm.gold_repeat, 0, 1);
    });
    if (c.lm.d_model % c.lm.heads != 0)
        throw Error("config: lm.d must be a multiple of lm.heads");
    if (c.lm.answer_swap + c.lm.conflict > 1.0)
        throw Error("config: lm.answer_swap + lm.conflict must not exceed 1");
    with(s, "probedata", [&](Section& t) {
        t.choice("mode", [&](const std::string& v) { c.match = parse_match_mode(v); });
        t.choice("stats_scope", [&](const std::string& v) { c.stats_scope = parse_stats_scope(v); });
        t.number("tau", c.tau, -1, 1);
    });
    with(s, "detector", [&](Section& t) {
        t.number("channels", c.detector.channels, 1, 4096);
        t.number("e", c.detector.embed, 1, 4096);
        t.number("margin", c.detector.margin, 0, big);
        t.number("lr", c.detector.lr, 1e-9, 10);
        t.number("epochs", c.detector.epochs, 0, 1e5);
        t.number("batch", c.detector.batch, 1, 1e6);
        t.number("triplets_per_epoch", c.detector.triplets_per_epoch, 0, 1e8);
        t.number("support_size", c.detector.support_size, 2, 1e7);
    });
    with(s, "eval", [&](Section& t) {
        t.number("noise_doc_frac", c.noise.doc_frac, 0, 1);
        t.number("noise_word_frac", c.noise.word_frac, 0, 1);
        t.number("min_clean_em", c.min_clean_em, 0, 1);
        t.number("min_target_rate", c.min_target_rate, 0, 1);
    });
    s.finish();
    return c;
}

RunConfig load_config(const std::filesystem::path& path)
{
    try {
        return parse_config(read_text(path));
    } catch (const Error& e) {
        throw Error(path.string() + ": " + e.what());
    }
}

std::string config_json(const RunConfig& c)
{
    json j;
    j["seed"] = c.seed;
    j["corpus"] = {{"n_facts", c.corpus.n_facts},
                   {"poisoned_fraction", c.corpus.poisoned_fraction},
                   {"paraphrases", c.corpus.paraphrases},
                   {"path", c.corpus.path},
                   {"split", {{"train", c.corpus.split.train}, {"test", c.corpus.split.test},
                              {"support", c.corpus.split.support}}}};
    j["embed"] = {{"dim", c.embed.dim},
                  {"ngram", c.embed.ngram},
                  {"metric", std::string(to_string(c.embed.metric))},
                  {"l2norm", c.embed.l2norm},
                  {"shared_encoders", c.embed.shared_encoders}};
    j["retrieve"] = {{"k", c.k}};
    j["attack"] = {{"kind", std::string(to_string(c.attack.kind))},
                   {"m", c.attack.m},
                   {"knobs", {{"population", c.attack.genetic.population},
                              {"generations", c.attack.genetic.generations},
                              {"mutation_rate", c.attack.genetic.mutation_rate},
                              {"steps", c.attack.hill_climb.steps},
                              {"queries", c.attack.hill_climb.queries}}}};
    j["lm"] = {{"L", c.lm.layers},
               {"d", c.lm.d_model},
               {"heads", c.lm.heads},
               {"ctx", c.lm.context},
               {"lr", c.lm.lr},
               {"epochs", c.lm.epochs},
               {"batch", c.lm.batch},
               {"answer_swap", c.lm.answer_swap},
               {"conflict", c.lm.conflict},
               {"question_echo", c.lm.question_echo},
               {"gold_repeat", c.lm.gold_repeat}};
    j["probedata"] = {{"mode", std::string(to_string(c.match))},
                      {"stats_scope", std::string(to_string(c.stats_scope))},
                      {"tau", c.tau}};
    j["detector"] = {{"channels", c.detector.channels},
                     {"e", c.detector.embed},
                     {"margin", c.detector.margin},
                     {"lr", c.detector.lr},
                     {"epochs", c.detector.epochs},
                     {"batch", c.detector.batch},
                     {"triplets_per_epoch", c.detector.triplets_per_epoch},
                     {"support_size", c.detector.support_size}};
    j["eval"] = {{"noise_doc_frac", c.noise.doc_frac},
                 {"noise_word_frac", c.noise.word_frac},
                 {"min_clean_em", c.min_clean_em},
                 {"min_target_rate", c.min_target_rate}};
    return j.dump(2);
}

std::string config_hash(const RunConfig& config)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : config_json(config)) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

} // namespace revprag
