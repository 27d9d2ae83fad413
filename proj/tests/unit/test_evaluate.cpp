#include "helpers.hpp"

#include "revprag/attack.hpp"
#include "revprag/evaluate.hpp"

#include <doctest.h>

#include <json.hpp>

#include <cmath>

using namespace revprag;

namespace {

constexpr std::uint8_t P = label_poisoned;
constexpr std::uint8_t C = label_correct;

std::size_t differing_words(std::string_view a, std::string_view b)
{
    const auto wa = split_words(a), wb = split_words(b);
    REQUIRE(wa.size() == wb.size());
    std::size_t n = 0;
    for (std::size_t i = 0; i < wa.size(); ++i)
        n += wa[i] != wb[i];
    return n;
}

} // namespace

TEST_CASE("metrics: worked example")
{
    const std::vector<std::uint8_t> truth = {P, P, P, P, C, C, C, C, C, C};
    const std::vector<std::uint8_t> pred = {P, P, P, C, P, C, C, C, C, C};
    const auto r = metrics(pred, truth);
    CHECK(r.counts == ConfusionCounts{3, 1, 5, 1});
    CHECK(r.counts.total() == 10);
    CHECK(*r.tpr == doctest::Approx(0.75));
    CHECK(*r.fpr == doctest::Approx(1.0 / 6.0));
}

TEST_CASE("metrics: perfect, inverted and undefined rates")
{
    const std::vector<std::uint8_t> truth = {P, C, P, C};
    const auto perfect = metrics(truth, truth);
    CHECK(*perfect.tpr == 1.0);
    CHECK(*perfect.fpr == 0.0);
    const std::vector<std::uint8_t> inv = {C, P, C, P};
    CHECK(*metrics(inv, truth).tpr == 0.0);
    CHECK(*metrics(inv, truth).fpr == 1.0);

    const std::vector<std::uint8_t> only_correct = {C, C};
    const auto r = metrics(only_correct, only_correct);
    CHECK_FALSE(r.tpr.has_value());
    CHECK(*r.fpr == 0.0);
    const auto j = nlohmann::json::parse(rates_json(r));
    CHECK(j["tpr"].is_null());
    CHECK(j["fpr"] == 0.0);
    CHECK(j["tn"] == 2);

    const std::vector<std::uint8_t> shorter = {C};
    CHECK_THROWS_AS(metrics(shorter, only_correct), Error);
}

TEST_CASE("verdict records round-trip through JSONL and give the same metrics")
{
    std::vector<VerdictRecord> recs = {{4, P, {P, 2, 17, 0.5}}, {9, C, {P, 0, 3, 1.25}}, {11, C, {C, 1, 5, 0.0}}};
    const auto text = verdicts_to_jsonl(recs);
    const auto back = verdicts_from_jsonl(text);
    REQUIRE(back.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(back[i].instance == recs[i].instance);
        CHECK(back[i].truth == recs[i].truth);
        CHECK(back[i].verdict.label == recs[i].verdict.label);
        CHECK(back[i].verdict.nearest == recs[i].verdict.nearest);
        CHECK(back[i].verdict.support_instance == recs[i].verdict.support_instance);
        CHECK(back[i].verdict.distance == recs[i].verdict.distance);
    }
    CHECK(metrics(back).counts == metrics(recs).counts);
    CHECK(nlohmann::json::parse(text.substr(0, text.find('\n')))["verdict"] == "poisoned");
}

TEST_CASE("detect: one record per sample of the requested split, in dataset order")
{
    const auto d = normalize(testing::clusters(80, 3, 4, 1.0, 3));
    DetectorConfig cfg;
    cfg.channels = 4;
    cfg.embed = 4;
    cfg.epochs = 1;
    const auto det = train_detector(d, cfg).detector;
    const auto support = build_support(det, d, 100, 0);
    const auto recs = detect(det, support, d);
    const auto test = d.indices(SplitTag::test);
    REQUIRE(recs.size() == test.size());
    for (std::size_t i = 0; i < recs.size(); ++i) {
        CHECK(recs[i].instance == d.samples[test[i]].instance);
        CHECK(recs[i].truth == d.samples[test[i]].label);
        CHECK(recs[i].verdict.label == classify(det, support, d.samples[test[i]].map).label);
    }
}

TEST_CASE("add_noise: exact document and word counts, answers kept, poisoned documents untouched")
{
    const auto clean = gen_synthetic({100, 4, 0.5, 1});
    const auto c = poison(clean, AttackSpec{AttackKind::poisonedrag, 5, 2}, {}).corpus;
    const auto noisy = add_noise(c, 0.5, 0.1, 7);
    REQUIRE(noisy.documents().size() == c.documents().size());

    std::size_t n_clean = 0, changed = 0;
    for (const auto& d : c.documents()) {
        const auto& nd = noisy.document(d.id);
        if (d.poisoned()) {
            CHECK(nd.text == d.text);
            continue;
        }
        ++n_clean;
        if (nd.text == d.text)
            continue;
        ++changed;
        const auto words = split_words(d.text);
        const auto& answer = c.triple(*d.source).correct_answer;
        std::size_t eligible = 0;
        for (const auto& w : words)
            eligible += !contains_words(answer, w);
        const auto want = static_cast<std::size_t>(std::ceil(0.1 * static_cast<double>(words.size()) - 1e-9));
        CHECK(differing_words(d.text, nd.text) == std::min(want, eligible));
        CHECK(contains_words(nd.text, answer));
    }
    CHECK(changed == static_cast<std::size_t>(std::llround(0.5 * static_cast<double>(n_clean))));
    for (const auto& t : noisy.triples())
        CHECK(t.supporting_text == noisy.document(t.id).text);

    CHECK(add_noise(c, 0.5, 0.1, 7).to_jsonl() == noisy.to_jsonl());
    CHECK(add_noise(c, 0.0, 0.1, 7).to_jsonl() == c.to_jsonl());
    CHECK_THROWS_AS(add_noise(c, 1.5, 0.1, 7), Error);
}

TEST_CASE("add_noise: word fraction 0.1 of a 30-word text changes exactly 3 words")
{
    std::string text;
    for (int i = 0; i < 30; ++i)
        text += (i ? " word" : "word") + std::to_string(i);
    std::vector<QATriple> t = {{0, "q ?", text, "word0", std::nullopt}};
    const Corpus c(std::move(t));
    const auto noisy = add_noise(c, 1.0, 0.1, 1);
    CHECK(differing_words(text, noisy.document(0).text) == 3);
    CHECK(split_words(noisy.document(0).text)[0] == "word0");
}

TEST_CASE("project2d: centered, uncorrelated, variance-ordered, sign convention")
{
    const auto d = testing::clusters(120, 2, 3, 2.0, 12);
    const auto pts = project2d(d);
    REQUIRE(pts.size() == d.samples.size());
    double mx = 0, my = 0, sxy = 0, sxx = 0, syy = 0;
    for (const auto& p : pts) {
        mx += p.x;
        my += p.y;
    }
    mx /= pts.size();
    my /= pts.size();
    for (const auto& p : pts) {
        sxx += (p.x - mx) * (p.x - mx);
        syy += (p.y - my) * (p.y - my);
        sxy += (p.x - mx) * (p.y - my);
    }
    CHECK(std::abs(mx) <= 1e-9);
    CHECK(std::abs(my) <= 1e-9);
    CHECK(std::abs(sxy) <= 1e-6 * sxx);
    CHECK(sxx >= syy);
    for (std::size_t i = 0; i < pts.size(); ++i)
        CHECK(pts[i].label == d.samples[i].label);
    // The cluster shift lies along the leading direction, so it separates
    // the classes on x.
    double px = 0, cx = 0;
    for (const auto& p : pts)
        (p.label == P ? px : cx) += p.x;
    CHECK(px * cx < 0);

    const auto csv = projection_csv(pts);
    CHECK(csv.starts_with("x,y,label\n"));
    CHECK(std::ranges::count(csv, '\n') == static_cast<long>(pts.size()) + 1);

    auto one = d;
    one.samples.resize(1);
    CHECK_THROWS_AS(project2d(one), Error);
}

TEST_CASE("project2d: centered 2-D data is only rotated, pairwise distances kept within 1e-6")
{
    auto d = testing::clusters(50, 1, 2, 1.5, 21);
    double m0 = 0, m1 = 0;
    for (const auto& s : d.samples) {
        m0 += s.map.values[0];
        m1 += s.map.values[1];
    }
    m0 /= d.samples.size();
    m1 /= d.samples.size();
    for (auto& s : d.samples) {
        s.map.values[0] = static_cast<float>(s.map.values[0] - m0);
        s.map.values[1] = static_cast<float>(s.map.values[1] - m1);
    }
    const auto pts = project2d(d);
    for (std::size_t i = 0; i < pts.size(); ++i)
        for (std::size_t j = i + 1; j < pts.size(); ++j) {
            const auto& a = d.samples[i].map.values;
            const auto& b = d.samples[j].map.values;
            const double orig = std::hypot(double(a[0]) - b[0], double(a[1]) - b[1]);
            const double proj = std::hypot(pts[i].x - pts[j].x, pts[i].y - pts[j].y);
            CHECK(std::abs(orig - proj) <= 1e-6);
        }
}

TEST_CASE("bench_detector: counts runs and reports positive timings")
{
    const auto d = normalize(testing::clusters(60, 3, 4, 1.0, 3));
    DetectorConfig cfg;
    cfg.channels = 4;
    cfg.embed = 4;
    const auto r = bench_detector(d, cfg, 0, 1);
    CHECK(r.epoch_seconds.size() == 1);
    CHECK(r.sample_seconds.size() == 1);
    CHECK(r.mean_epoch_seconds > 0.0);
    CHECK(r.mean_sample_seconds > 0.0);
    CHECK(r.inference_samples == d.indices(SplitTag::test).size());
    const auto j = nlohmann::json::parse(bench_json(r));
    CHECK(j.contains("mean_sample_seconds"));
    CHECK_THROWS_AS(bench_detector(d, cfg, 0, 0), Error);
}
