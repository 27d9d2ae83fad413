#include "revprag/corpus.hpp"

#include "revprag/error.hpp"
#include "revprag/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_set>

namespace revprag {

using nlohmann::json;

std::string_view to_string(AttackKind kind)
{
    switch (kind) {
    case AttackKind::poisonedrag: return "poisonedrag";
    case AttackKind::garag: return "garag";
    case AttackKind::prcap: return "prcap";
    }
    return "unknown";
}

AttackKind parse_attack_kind(std::string_view name)
{
    if (name == "poisonedrag")
        return AttackKind::poisonedrag;
    if (name == "garag")
        return AttackKind::garag;
    if (name == "prcap")
        return AttackKind::prcap;
    throw Error("unknown attack kind: " + std::string(name));
}

std::string Document::provenance() const
{
    if (!poisoned_by)
        return "clean";
    return "poisoned:" + std::string(to_string(*poisoned_by));
}

std::vector<std::string> split_words(std::string_view text)
{
    std::vector<std::string> words;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i])))
            ++i;
        std::size_t j = i;
        while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j])))
            ++j;
        if (j > i)
            words.emplace_back(text.substr(i, j - i));
        i = j;
    }
    return words;
}

std::string join_words(std::span<const std::string> words)
{
    std::string out;
    for (std::size_t i = 0; i < words.size(); ++i) {
        if (i)
            out += ' ';
        out += words[i];
    }
    return out;
}

bool contains_words(std::string_view haystack, std::string_view needle)
{
    const auto h = split_words(haystack);
    const auto n = split_words(needle);
    if (n.empty())
        return true;
    return std::search(h.begin(), h.end(), n.begin(), n.end()) != h.end();
}

Corpus::Corpus(std::vector<QATriple> triples, std::vector<Document> documents)
    : triples_(std::move(triples)), documents_(std::move(documents))
{
    validate();
}

Corpus::Corpus(std::vector<QATriple> triples) : triples_(std::move(triples))
{
    documents_.reserve(triples_.size());
    for (const auto& t : triples_)
        documents_.push_back(Document{t.id, t.supporting_text, std::nullopt, t.id});
    validate();
}

void Corpus::validate() const
{
    for (std::size_t i = 0; i < documents_.size(); ++i) {
        const auto& d = documents_[i];
        if (d.id != i)
            throw Error("document ids must be dense and ordered, found " + std::to_string(d.id) + " at position " +
                        std::to_string(i));
        if (split_words(d.text).empty())
            throw Error("document " + std::to_string(d.id) + " has empty text");
    }
    for (std::size_t i = 0; i < triples_.size(); ++i) {
        const auto& t = triples_[i];
        if (t.id != i)
            throw Error("triple ids must be dense, found " + std::to_string(t.id) + " at " + std::to_string(i));
        if (t.target_answer && *t.target_answer == t.correct_answer)
            throw Error("triple " + std::to_string(t.id) + ": target_answer equals correct_answer");
    }
}

std::vector<Document> Corpus::clean_documents() const
{
    std::vector<Document> out;
    for (const auto& d : documents_)
        if (!d.poisoned())
            out.push_back(d);
    return out;
}

std::string Corpus::to_jsonl() const
{
    std::string out;
    for (const auto& t : triples_) {
        json j;
        j["id"] = t.id;
        j["question"] = t.question;
        j["supporting_text"] = t.supporting_text;
        j["correct_answer"] = t.correct_answer;
        if (t.target_answer)
            j["target_answer"] = *t.target_answer;
        j["provenance"] = "clean";
        out += j.dump();
        out += '\n';
    }
    for (const auto& d : documents_) {
        json j;
        j["id"] = d.id;
        j["text"] = d.text;
        j["provenance"] = d.provenance();
        if (d.source)
            j["source"] = *d.source;
        out += j.dump();
        out += '\n';
    }
    return out;
}

void Corpus::save(const std::filesystem::path& path) const
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw Error("cannot open " + path.string() + " for writing");
    out << to_jsonl();
}

namespace {

std::string required_string(const json& j, const char* key, std::size_t line)
{
    auto it = j.find(key);
    if (it == j.end())
        throw Error("line " + std::to_string(line) + ": missing field " + key);
    if (!it->is_string())
        throw Error("line " + std::to_string(line) + ": field " + key + " must be a string");
    return it->get<std::string>();
}

Document parse_document(const json& j, std::size_t line)
{
    Document d;
    if (!j.contains("id") || !j["id"].is_number_unsigned())
        throw Error("line " + std::to_string(line) + ": missing field id");
    d.id = j["id"].get<std::uint32_t>();
    d.text = required_string(j, "text", line);
    const std::string prov = required_string(j, "provenance", line);
    if (prov != "clean") {
        constexpr std::string_view prefix = "poisoned:";
        if (prov.rfind(prefix, 0) != 0)
            throw Error("line " + std::to_string(line) + ": bad provenance " + prov);
        d.poisoned_by = parse_attack_kind(std::string_view(prov).substr(prefix.size()));
    }
    if (j.contains("source"))
        d.source = j["source"].get<std::uint32_t>();
    return d;
}

} // namespace

Corpus parse_jsonl(std::string_view content)
{
    std::vector<QATriple> triples;
    std::vector<Document> documents;
    std::map<std::string, std::size_t> first_line;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < content.size()) {
        std::size_t end = content.find('\n', pos);
        if (end == std::string_view::npos)
            end = content.size();
        std::string_view line = content.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos)
            continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw Error("line " + std::to_string(line_no) + ": " + e.what());
        }
        if (!j.is_object())
            throw Error("line " + std::to_string(line_no) + ": expected a JSON object");
        if (j.contains("text") && !j.contains("question")) {
            documents.push_back(parse_document(j, line_no));
            continue;
        }
        QATriple t;
        t.id = static_cast<std::uint32_t>(triples.size());
        t.question = required_string(j, "question", line_no);
        t.supporting_text = required_string(j, "supporting_text", line_no);
        t.correct_answer = required_string(j, "correct_answer", line_no);
        if (j.contains("target_answer") && !j["target_answer"].is_null())
            t.target_answer = required_string(j, "target_answer", line_no);
        if (split_words(t.question).empty())
            throw Error("line " + std::to_string(line_no) + ": empty question");
        if (j.contains("id") && j["id"].get<std::uint32_t>() != t.id)
            throw Error("line " + std::to_string(line_no) + ": id out of order");
        auto [it, inserted] = first_line.emplace(t.question, line_no);
        if (!inserted)
            warn("line " + std::to_string(line_no) + ": duplicate question (first seen on line " +
                 std::to_string(it->second) + ")");
        triples.push_back(std::move(t));
    }
    if (documents.empty())
        return Corpus(std::move(triples));
    return Corpus(std::move(triples), std::move(documents));
}

Corpus ingest_jsonl(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw Error("cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_jsonl(ss.str());
}

// ---------------------------------------------------------------------------
// Synthetic corpus

namespace {

constexpr std::string_view consonants = "bdfgklmnprstvz";
constexpr std::string_view vowels = "aeiou";
constexpr std::string_view codas = "lmnrs";

constexpr std::array<std::string_view, 10> attributes = {
    "capital", "river", "founder", "language", "currency",
    "mascot",  "export", "festival", "mountain", "dialect",
};

constexpr std::size_t values_per_attribute = 16;

// None of these contain the word "is"; the value always follows the single
// "is" of the sentence.
constexpr std::array<std::string_view, 8> prefixes = {
    "",
    "records show that ",
    "in the atlas , ",
    "as listed in the survey , ",
    "historians note that ",
    "according to the national registry , ",
    "a local guide states that ",
    "the old chronicle says that ",
};

std::string syllables(Rng& rng, int count)
{
    std::string w;
    for (int i = 0; i < count; ++i) {
        w += consonants[rng.below(consonants.size())];
        w += vowels[rng.below(vowels.size())];
    }
    return w;
}

// Fixed lexicon, independent of the corpus seed. Values end in a coda
// consonant and subjects in a vowel, so the two sets never overlap.
const std::vector<std::vector<std::string>>& value_pools()
{
    static const auto pools = [] {
        Rng rng(0x5eed'1e81c0ULL);
        std::set<std::string> used;
        std::vector<std::vector<std::string>> out(attributes.size());
        for (auto& pool : out) {
            while (pool.size() < values_per_attribute) {
                std::string w = syllables(rng, 2);
                w += codas[rng.below(codas.size())];
                if (used.insert(w).second)
                    pool.push_back(w);
            }
        }
        return out;
    }();
    return pools;
}

} // namespace

std::span<const std::string_view> claim_prefixes() { return prefixes; }

std::string fact_sentence(std::string_view prefix, std::string_view attribute, std::string_view subject,
                          std::string_view value)
{
    std::string s(prefix);
    s += "the ";
    s += attribute;
    s += " of ";
    s += subject;
    s += " is ";
    s += value;
    s += " .";
    return s;
}

Corpus gen_synthetic(const SyntheticOptions& options)
{
    if (options.n_facts == 0)
        throw Error("gen_synthetic: empty corpus requested (n_facts = 0)");
    if (!(options.poisoned_fraction >= 0.0 && options.poisoned_fraction <= 1.0))
        throw Error("gen_synthetic: poisoned_fraction must be in [0, 1]");

    Rng rng(Rng::mix(options.seed, 0xc0a9));
    const auto& pools = value_pools();

    if (options.paraphrases >= prefixes.size())
        throw Error("gen_synthetic: at most " + std::to_string(prefixes.size() - 1) + " paraphrases per fact");

    std::set<std::string> subjects_seen;
    std::vector<Document> paraphrases;
    std::vector<QATriple> triples;
    triples.reserve(options.n_facts);
    for (std::size_t i = 0; i < options.n_facts; ++i) {
        std::string subject;
        do {
            subject = syllables(rng, 3) + " " + syllables(rng, 3);
        } while (!subjects_seen.insert(subject).second);
        const std::size_t a = rng.below(attributes.size());
        const auto& pool = pools[a];
        const std::string& value = pool[rng.below(pool.size())];
        std::vector<std::size_t> order(prefixes.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        rng.shuffle(std::span(order));

        QATriple t;
        t.id = static_cast<std::uint32_t>(i);
        t.question = "name the " + std::string(attributes[a]) + " of " + subject + " ?";
        t.supporting_text = fact_sentence(prefixes[order[0]], attributes[a], subject, value);
        t.correct_answer = value;
        for (std::size_t p = 1; p <= options.paraphrases; ++p)
            paraphrases.push_back({0, fact_sentence(prefixes[order[p]], attributes[a], subject, value), std::nullopt,
                                   t.id});
        triples.push_back(std::move(t));
    }

    // Designate an exact count of poisoned instances, chosen uniformly.
    const auto n_poisoned = static_cast<std::size_t>(
        std::llround(options.poisoned_fraction * static_cast<double>(options.n_facts)));
    std::vector<std::uint32_t> order(options.n_facts);
    for (std::size_t i = 0; i < order.size(); ++i)
        order[i] = static_cast<std::uint32_t>(i);
    rng.shuffle(std::span(order));
    for (std::size_t i = 0; i < n_poisoned; ++i) {
        auto& t = triples[order[i]];
        const auto attr_word = split_words(t.question)[2];
        const auto a = static_cast<std::size_t>(
            std::find(attributes.begin(), attributes.end(), attr_word) - attributes.begin());
        const auto& pool = pools[a];
        std::string target;
        do {
            target = pool[rng.below(pool.size())];
        } while (target == t.correct_answer);
        t.target_answer = std::move(target);
    }

    std::vector<Document> docs;
    docs.reserve(triples.size() + paraphrases.size());
    for (const auto& t : triples)
        docs.push_back({t.id, t.supporting_text, std::nullopt, t.id});
    for (auto& d : paraphrases) {
        d.id = static_cast<std::uint32_t>(docs.size());
        docs.push_back(std::move(d));
    }
    return Corpus(std::move(triples), std::move(docs));
}

// ---------------------------------------------------------------------------
// Splitting

namespace {

// Largest-remainder allocation of `total` across strata proportional to
// `sizes`, never exceeding a stratum's capacity.
std::vector<std::size_t> allocate(std::size_t total, const std::vector<std::size_t>& sizes,
                                  const std::vector<std::size_t>& capacity)
{
    std::size_t n = 0;
    for (auto s : sizes)
        n += s;
    std::vector<std::size_t> out(sizes.size(), 0);
    if (n == 0)
        return out;
    std::vector<std::pair<double, std::size_t>> rema;
    std::size_t assigned = 0;
    for (std::size_t s = 0; s < sizes.size(); ++s) {
        const double exact = static_cast<double>(total) * static_cast<double>(sizes[s]) / static_cast<double>(n);
        out[s] = std::min(static_cast<std::size_t>(std::floor(exact + 1e-9)), capacity[s]);
        assigned += out[s];
        rema.emplace_back(exact - static_cast<double>(out[s]), s);
    }
    std::stable_sort(rema.begin(), rema.end(), [](auto& a, auto& b) { return a.first > b.first; });
    while (assigned < total) {
        bool progressed = false;
        for (auto& [r, s] : rema) {
            if (assigned == total)
                break;
            if (out[s] < capacity[s]) {
                ++out[s];
                ++assigned;
                progressed = true;
            }
        }
        if (!progressed)
            break;
    }
    return out;
}

} // namespace

CorpusSplit split_ids(std::span<const std::uint32_t> ids, std::span<const std::uint8_t> positive,
                      const SplitRatios& ratios, std::uint64_t seed)
{
    if (ratios.train <= 0 || ratios.test <= 0 || ratios.support <= 0)
        throw Error("split: every ratio must be positive");
    if (std::abs(ratios.train + ratios.test + ratios.support - 1.0) > 1e-9)
        throw Error("split: ratios must sum to 1");
    if (ids.size() != positive.size())
        throw Error("split: ids and labels differ in length");

    const std::size_t n = ids.size();
    const auto n_test = static_cast<std::size_t>(std::floor(ratios.test * static_cast<double>(n) + 1e-9));
    const auto n_support = static_cast<std::size_t>(std::floor(ratios.support * static_cast<double>(n) + 1e-9));

    std::vector<std::vector<std::uint32_t>> strata(2);
    for (std::size_t i = 0; i < n; ++i)
        strata[positive[i] != 0 ? 1 : 0].push_back(ids[i]);
    Rng rng(Rng::mix(seed, 0x5b117));
    for (auto& s : strata) {
        std::sort(s.begin(), s.end());
        rng.shuffle(std::span(s));
    }
    const std::vector<std::size_t> sizes = {strata[0].size(), strata[1].size()};
    const auto test_alloc = allocate(n_test, sizes, sizes);
    const std::vector<std::size_t> left = {sizes[0] - test_alloc[0], sizes[1] - test_alloc[1]};
    const auto support_alloc = allocate(n_support, sizes, left);

    CorpusSplit out;
    for (std::size_t s = 0; s < 2; ++s) {
        std::size_t i = 0;
        for (; i < test_alloc[s]; ++i)
            out.test_ids.push_back(strata[s][i]);
        for (std::size_t j = 0; j < support_alloc[s]; ++j, ++i)
            out.support_ids.push_back(strata[s][i]);
        for (; i < strata[s].size(); ++i)
            out.train_ids.push_back(strata[s][i]);
    }
    std::sort(out.train_ids.begin(), out.train_ids.end());
    std::sort(out.test_ids.begin(), out.test_ids.end());
    std::sort(out.support_ids.begin(), out.support_ids.end());
    return out;
}

CorpusSplit split(const Corpus& corpus, const SplitRatios& ratios, std::uint64_t seed)
{
    std::vector<std::uint32_t> ids;
    std::vector<std::uint8_t> poisoned;
    for (const auto& t : corpus.triples()) {
        ids.push_back(t.id);
        poisoned.push_back(t.designated_poisoned() ? 1 : 0);
    }
    return split_ids(ids, poisoned, ratios, seed);
}

} // namespace revprag
