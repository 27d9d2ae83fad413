#include "revprag/attack.hpp"

#include "revprag/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <map>
#include <numeric>
#include <set>

namespace revprag {

using nlohmann::json;

namespace {

constexpr int max_template_retries = 20;

// Rows of a QWERTY keyboard for adjacent-key substitutions.
constexpr std::array<std::string_view, 3> keyboard = {"qwertyuiop", "asdfghjkl", "zxcvbnm"};

char adjacent_key(char c, Rng& rng)
{
    for (auto row : keyboard) {
        const auto pos = row.find(c);
        if (pos == std::string_view::npos)
            continue;
        if (row.size() == 1)
            return c;
        if (pos == 0)
            return row[1];
        if (pos + 1 == row.size())
            return row[pos - 1];
        return row[rng.below(2) ? pos + 1 : pos - 1];
    }
    return static_cast<char>('a' + rng.below(26));
}

// Claim asserting `target` in corpus style when the question has the
// synthetic "name the <attribute> of <subject> ?" shape.
std::string claim(const QATriple& triple, std::string_view target, std::string_view prefix)
{
    const auto w = split_words(triple.question);
    if (w.size() >= 6 && w[0] == "name" && w[1] == "the" && w[3] == "of" && w.back() == "?") {
        const std::vector<std::string> subject(w.begin() + 4, w.end() - 1);
        return fact_sentence(prefix, w[2], join_words(subject), target);
    }
    return std::string(prefix) + "the answer is " + std::string(target) + " .";
}

double median(std::vector<double> v)
{
    if (v.empty())
        return -std::numeric_limits<double>::infinity();
    const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
    std::nth_element(v.begin(), mid, v.end());
    if (v.size() % 2 == 1)
        return *mid;
    const double hi = *mid;
    const double lo = *std::max_element(v.begin(), mid);
    return 0.5 * (lo + hi);
}

std::set<std::string> answer_words(std::string_view target)
{
    const auto w = split_words(target);
    return {w.begin(), w.end()};
}

} // namespace

std::string typo(std::string_view word, Rng& rng)
{
    std::string w(word);
    if (w.empty())
        return w;
    auto kind = w.size() < 2 ? 3 : rng.below(4);
    const std::size_t i = rng.below(w.size());
    const std::size_t j = w.size() < 2 ? 0 : std::min(i, w.size() - 2);
    // Swapping equal letters would leave the word unchanged.
    if (kind == 0 && w[j] == w[j + 1])
        kind = 3;
    switch (kind) {
    case 0: // swap with next
        std::swap(w[j], w[j + 1]);
        break;
    case 1:
        w.erase(i, 1);
        break;
    case 2:
        w.insert(i, 1, w[i]);
        break;
    default:
        w[i] = adjacent_key(static_cast<char>(std::tolower(static_cast<unsigned char>(w[i]))), rng);
        break;
    }
    return w;
}

std::vector<std::string> poisonedrag_gen(const QATriple& triple, std::size_t m, std::uint64_t seed,
                                         const Index& clean_index)
{
    if (!triple.target_answer)
        throw Error("poisonedrag_gen: triple " + std::to_string(triple.id) + " has no target answer");
    const auto& config = clean_index.config();
    const auto q = encode(triple.question, Role::query, config);
    const double threshold = median(clean_index.scores(q));
    const auto prefixes = claim_prefixes();

    Rng rng(Rng::mix(seed, 0x9015 + triple.id));
    std::vector<std::string> texts;
    texts.reserve(m);
    for (std::size_t i = 0; i < m; ++i) {
        double best = -std::numeric_limits<double>::infinity();
        bool ok = false;
        for (int attempt = 0; attempt < max_template_retries && !ok; ++attempt) {
            const auto prefix = prefixes[rng.below(prefixes.size())];
            std::string text = triple.question + " " + claim(triple, *triple.target_answer, prefix);
            const double s = sim(q, encode(text, Role::passage, config), config.metric);
            best = std::max(best, s);
            if (s > threshold) {
                texts.push_back(std::move(text));
                ok = true;
            }
        }
        if (!ok)
            throw Error("poisonedrag_gen: question " + std::to_string(triple.id) +
                        ": no template beat the clean median " + std::to_string(threshold) +
                        " (best " + std::to_string(best) + ")");
    }
    return texts;
}

GeneticResult garag_gen(const QATriple& triple, std::size_t m, const GeneticKnobs& knobs, std::uint64_t seed,
                        std::span<const std::string> seeds, const EmbedConfig& config)
{
    if (knobs.population < 2)
        throw Error("garag_gen: population must be at least 2");
    if (seeds.empty())
        throw Error("garag_gen: needs at least one seed poisoned text");
    if (!triple.target_answer)
        throw Error("garag_gen: triple " + std::to_string(triple.id) + " has no target answer");

    const auto q = encode(triple.question, Role::query, config);
    const auto keep = answer_words(*triple.target_answer);
    Rng rng(Rng::mix(seed, 0x6a7a6 + triple.id));

    using Genome = std::vector<std::string>;
    auto mutate = [&](Genome g) {
        for (auto& word : g)
            if (!keep.contains(word) && rng.uniform() < knobs.mutation_rate)
                word = typo(word, rng);
        return g;
    };
    auto fitness = [&](const Genome& g) { return sim(q, encode(join_words(g), Role::passage, config), config.metric); };

    std::vector<Genome> pop;
    std::vector<double> fit;
    for (std::uint32_t i = 0; i < knobs.population; ++i) {
        pop.push_back(mutate(split_words(seeds[i % seeds.size()])));
        fit.push_back(fitness(pop.back()));
    }
    auto best_index = [&] {
        return static_cast<std::size_t>(std::max_element(fit.begin(), fit.end()) - fit.begin());
    };

    GeneticResult result;
    result.elite_history.push_back(fit[best_index()]);

    auto tournament = [&]() -> const Genome& {
        const auto a = rng.below(pop.size());
        const auto b = rng.below(pop.size());
        return fit[a] >= fit[b] ? pop[a] : pop[b];
    };
    for (std::uint32_t gen = 0; gen < knobs.generations; ++gen) {
        std::vector<Genome> next;
        std::vector<double> next_fit;
        const auto e = best_index();
        next.push_back(pop[e]);
        next_fit.push_back(fit[e]);
        while (next.size() < pop.size()) {
            const Genome& a = tournament();
            const Genome& b = tournament();
            Genome child;
            if (a.size() == b.size()) {
                child = a;
                for (std::size_t i = 0; i < child.size(); ++i)
                    if (rng.below(2))
                        child[i] = b[i];
            } else {
                const std::size_t cut = rng.below(std::min(a.size(), b.size()) + 1);
                child.assign(a.begin(), a.begin() + static_cast<std::ptrdiff_t>(cut));
                child.insert(child.end(), b.begin() + static_cast<std::ptrdiff_t>(cut), b.end());
            }
            // Crossover can split the answer when the parents place it differently.
            if (!contains_words(join_words(child), *triple.target_answer))
                child = a;
            child = mutate(std::move(child));
            next_fit.push_back(fitness(child));
            next.push_back(std::move(child));
        }
        pop = std::move(next);
        fit = std::move(next_fit);
        result.elite_history.push_back(fit[best_index()]);
    }

    // m fittest, distinct texts first; duplicates only if the population
    // has fewer than m distinct members.
    std::vector<std::size_t> order(pop.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto x, auto y) { return fit[x] > fit[y]; });
    std::set<std::string> taken;
    for (auto i : order) {
        if (result.texts.size() == m)
            break;
        std::string text = join_words(pop[i]);
        if (!taken.insert(text).second)
            continue;
        result.texts.push_back(std::move(text));
        result.fitness.push_back(fit[i]);
    }
    for (std::size_t r = 0; result.texts.size() < m; ++r) {
        const auto i = order[r % order.size()];
        result.texts.push_back(join_words(pop[i]));
        result.fitness.push_back(fit[i]);
    }
    return result;
}

HillClimbResult prcap_gen(std::span<const std::string> queries, std::string_view base_text, std::uint32_t steps,
                          std::uint64_t seed, std::span<const std::string> vocabulary,
                          std::span<const std::string> protected_words, const EmbedConfig& config)
{
    if (queries.empty())
        throw Error("prcap_gen: needs at least one query");
    std::vector<EmbeddingVector> qs;
    for (const auto& q : queries)
        qs.push_back(encode(q, Role::query, config));
    const std::set<std::string> keep(protected_words.begin(), protected_words.end());

    auto score = [&](const std::vector<std::string>& words) {
        const auto v = encode(join_words(words), Role::passage, config);
        double s = 0.0;
        for (const auto& q : qs)
            s += sim(q, v, config.metric);
        return s / static_cast<double>(qs.size());
    };

    auto words = split_words(base_text);
    std::vector<std::size_t> mutable_pos;
    for (std::size_t i = 0; i < words.size(); ++i)
        if (!keep.contains(words[i]))
            mutable_pos.push_back(i);

    HillClimbResult result;
    double current = score(words);
    result.trajectory.push_back(current);
    Rng rng(Rng::mix(seed, 0x9eca9));
    for (std::uint32_t step = 0; step < steps; ++step) {
        if (!mutable_pos.empty() && !vocabulary.empty()) {
            const auto pos = mutable_pos[rng.below(mutable_pos.size())];
            const auto& token = vocabulary[rng.below(vocabulary.size())];
            if (token != words[pos] && !keep.contains(token)) {
                auto candidate = words;
                candidate[pos] = token;
                const double s = score(candidate);
                if (s > current) {
                    words = std::move(candidate);
                    current = s;
                }
            }
        }
        result.trajectory.push_back(current);
    }
    result.text = join_words(words);
    return result;
}

Corpus inject(const Corpus& corpus, std::span<PoisonRecord> records)
{
    std::vector<QATriple> triples(corpus.triples().begin(), corpus.triples().end());
    std::vector<Document> docs(corpus.documents().begin(), corpus.documents().end());
    std::uint32_t next_id = 0;
    for (const auto& d : docs)
        next_id = std::max(next_id, d.id + 1);
    for (auto& rec : records) {
        rec.doc_ids.clear();
        for (const auto& text : rec.texts) {
            rec.doc_ids.push_back(next_id);
            docs.push_back(Document{next_id, text, rec.kind, rec.question_id});
            ++next_id;
        }
    }
    return Corpus(std::move(triples), std::move(docs));
}

PoisonOutcome poison(const Corpus& corpus, const AttackSpec& spec, const EmbedConfig& config)
{
    if (spec.m < 1)
        throw Error("attack: m must be at least 1");
    const auto clean = corpus.clean_documents();
    const Index clean_index = Index::build(clean, config);

    // Substitution vocabulary and same-attribute query pools for the
    // hill-climbing attack.
    std::vector<std::string> vocabulary;
    std::map<std::string, std::vector<std::uint32_t>> by_attribute;
    if (spec.kind == AttackKind::prcap) {
        std::set<std::string> vocab;
        for (const auto& d : clean)
            for (auto& w : split_words(d.text))
                vocab.insert(std::move(w));
        for (const auto& t : corpus.triples()) {
            for (auto& w : split_words(t.question))
                vocab.insert(std::move(w));
            const auto w = split_words(t.question);
            by_attribute[w.size() > 2 ? w[2] : std::string()].push_back(t.id);
        }
        vocabulary.assign(vocab.begin(), vocab.end());
    }

    std::vector<PoisonRecord> records;
    for (const auto& t : corpus.triples()) {
        if (!t.target_answer)
            continue;
        PoisonRecord rec;
        rec.question_id = t.id;
        rec.target_answer = *t.target_answer;
        rec.kind = spec.kind;
        const auto base = poisonedrag_gen(t, spec.m, spec.seed, clean_index);
        switch (spec.kind) {
        case AttackKind::poisonedrag:
            rec.texts = base;
            break;
        case AttackKind::garag:
            rec.texts = garag_gen(t, spec.m, spec.genetic, spec.seed, base, config).texts;
            break;
        case AttackKind::prcap: {
            std::vector<std::string> queries = {t.question};
            const auto w = split_words(t.question);
            const auto& pool = by_attribute[w.size() > 2 ? w[2] : std::string()];
            Rng rng(Rng::mix(spec.seed, 0x7e7 + t.id));
            for (std::uint32_t tries = 0; queries.size() < spec.hill_climb.queries && tries < 8 * spec.hill_climb.queries;
                 ++tries) {
                const auto& other = corpus.triple(pool[rng.below(pool.size())]);
                if (std::find(queries.begin(), queries.end(), other.question) == queries.end())
                    queries.push_back(other.question);
            }
            const auto keep = split_words(*t.target_answer);
            for (std::size_t i = 0; i < base.size(); ++i)
                rec.texts.push_back(prcap_gen(queries, base[i], spec.hill_climb.steps,
                                              Rng::mix(spec.seed, (std::uint64_t{t.id} << 8) + i), vocabulary, keep,
                                              config)
                                        .text);
            break;
        }
        }
        const auto q = encode(t.question, Role::query, config);
        for (const auto& text : rec.texts)
            rec.scores.push_back(sim(q, encode(text, Role::passage, config), config.metric));
        records.push_back(std::move(rec));
    }
    PoisonOutcome out;
    out.corpus = inject(corpus, records);
    out.records = std::move(records);
    return out;
}

std::string records_to_jsonl(std::span<const PoisonRecord> records)
{
    std::string out;
    for (const auto& r : records) {
        json j;
        j["question_id"] = r.question_id;
        j["target_answer"] = r.target_answer;
        j["kind"] = std::string(to_string(r.kind));
        j["texts"] = r.texts;
        j["doc_ids"] = r.doc_ids;
        j["scores"] = r.scores;
        out += j.dump();
        out += '\n';
    }
    return out;
}

std::vector<PoisonRecord> records_from_jsonl(std::string_view content)
{
    std::vector<PoisonRecord> out;
    std::size_t pos = 0;
    while (pos < content.size()) {
        auto end = content.find('\n', pos);
        if (end == std::string_view::npos)
            end = content.size();
        const auto line = content.substr(pos, end - pos);
        pos = end + 1;
        if (line.empty())
            continue;
        const auto j = json::parse(line);
        PoisonRecord r;
        r.question_id = j.at("question_id").get<std::uint32_t>();
        r.target_answer = j.at("target_answer").get<std::string>();
        r.kind = parse_attack_kind(j.at("kind").get<std::string>());
        r.texts = j.at("texts").get<std::vector<std::string>>();
        r.doc_ids = j.at("doc_ids").get<std::vector<std::uint32_t>>();
        r.scores = j.at("scores").get<std::vector<double>>();
        out.push_back(std::move(r));
    }
    return out;
}

} // namespace revprag
