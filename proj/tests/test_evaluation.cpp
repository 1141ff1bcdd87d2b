#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include <json.hpp>

#include "neuromatch/evaluation.hpp"

using namespace neuromatch;
namespace fs = std::filesystem;

namespace {

Tensor noise_image(std::mt19937_64& rng, std::size_t side = 40) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Tensor t({side, side});
    for (double& v : t.values()) v = u(rng);
    return t;
}

Tensor random_unit_rows(std::size_t n, std::size_t d, std::mt19937_64& rng) {
    std::normal_distribution<double> g(0.0, 1.0);
    Tensor t({n, d});
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) s += std::pow(t.at(i, c) = g(rng), 2);
        for (std::size_t c = 0; c < d; ++c) t.at(i, c) /= std::sqrt(s);
    }
    return t;
}

// Exhaustive threshold sweep: every midpoint, plus best J, smallest on ties.
std::pair<double, double> sweep_oracle(const std::vector<LabeledDistance>& pairs) {
    std::vector<double> d;
    for (const auto& p : pairs) d.push_back(p.distance);
    std::sort(d.begin(), d.end());
    d.erase(std::unique(d.begin(), d.end()), d.end());
    double best_j = -2.0, best_t = 0.0;
    for (std::size_t i = 0; i + 1 < d.size(); ++i) {
        const double t = 0.5 * (d[i] + d[i + 1]);
        double tp = 0, fn = 0, tn = 0, fp = 0;
        for (const auto& p : pairs) {
            const bool pred = p.distance < t;
            if (p.positive) (pred ? tp : fn) += 1;
            else (pred ? fp : tn) += 1;
        }
        const double j = tp / (tp + fn) + tn / (tn + fp) - 1.0;
        if (j > best_j + 1e-12) {
            best_j = j;
            best_t = t;
        }
    }
    return {best_t, best_j};
}

double trapezoid(const KdeCurve& c) {
    double s = 0.0;
    for (std::size_t i = 0; i + 1 < c.x.size(); ++i) s += 0.5 * (c.density[i] + c.density[i + 1]) * (c.x[i + 1] - c.x[i]);
    return s;
}

}  // namespace

TEST_CASE("confusion metrics reproduce the reported table") {
    const ConfusionMatrix cm{41, 12, 191, 21};
    const ConfusionRates r = confusion_metrics(cm);
    CHECK(*r.recall == doctest::Approx(41.0 / 53.0).epsilon(1e-15));
    CHECK(*r.specificity == doctest::Approx(191.0 / 212.0).epsilon(1e-15));
    CHECK(std::abs(*r.recall - 0.774) < 0.0005);
    CHECK(std::abs(*r.specificity - 0.901) < 0.0005);
    CHECK(*r.precision == doctest::Approx(41.0 / 62.0));

    const ConfusionRates half = confusion_metrics({5, 5, 5, 5});
    CHECK(*half.recall == 0.5);
    CHECK(*half.specificity == 0.5);
    CHECK(*half.precision == 0.5);

    CHECK_THROWS_AS(recall({0, 0, 3, 1}), DomainError);
    CHECK_THROWS_AS(specificity({2, 1, 0, 0}), DomainError);
    CHECK_THROWS_AS(precision({0, 3, 2, 0}), DomainError);
    CHECK_FALSE(confusion_metrics({0, 0, 3, 1}).recall.has_value());
}

TEST_CASE("pairs are classified with a strict threshold") {
    const std::vector<LabeledDistance> toy = {{0.1, true}, {0.5, true}, {0.3, false}, {0.9, false}};
    CHECK(classify_pairs(toy, 0.4) == ConfusionMatrix{1, 1, 1, 1});
    const ConfusionMatrix all = classify_pairs(toy, std::numeric_limits<double>::infinity());
    CHECK(all.fn == 0);
    CHECK(all.tn == 0);
    const ConfusionMatrix none = classify_pairs(toy, 0.0);
    CHECK(none.tp == 0);
    CHECK(none.fp == 0);
    CHECK(classify_pairs(toy, 0.1).tp == 0);  // 0.1 < 0.1 is false
}

TEST_CASE("threshold selection") {
    SUBCASE("separated classes pick the smallest gap midpoint") {
        const std::vector<LabeledDistance> d = {{0.1, true}, {0.2, true}, {0.6, false}, {0.8, false}};
        CHECK(select_threshold(d) == doctest::Approx(0.4));
        CHECK(youden_j(classify_pairs(d, 0.4)) == 1.0);
    }
    SUBCASE("ties between equally good midpoints go to the smaller one") {
        const std::vector<LabeledDistance> d = {{0.1, true}, {0.3, false}, {0.5, true}, {0.7, false}};
        // midpoints 0.2 and 0.6 both give J = 0.5
        CHECK(select_threshold(d) == doctest::Approx(0.2));
    }
    SUBCASE("identical distributions give J near zero") {
        std::vector<LabeledDistance> d;
        for (int i = 0; i < 50; ++i) {
            d.push_back({i / 50.0, true});
            d.push_back({i / 50.0, false});
        }
        CHECK(std::abs(youden_j(classify_pairs(d, select_threshold(d)))) < 0.05);
    }
    SUBCASE("single class is rejected") {
        const std::vector<LabeledDistance> d = {{0.1, true}, {0.2, true}};
        CHECK_THROWS_AS(select_threshold(d), DomainError);
    }
    SUBCASE("matches the exhaustive sweep on random instances") {
        std::mt19937_64 rng(17);
        for (int trial = 0; trial < 300; ++trial) {
            const std::size_t n = 2 + rng() % 199;
            std::vector<LabeledDistance> d(n);
            std::uniform_int_distribution<int> coarse(0, 20);
            for (std::size_t i = 0; i < n; ++i) d[i] = {coarse(rng) / 10.0, (rng() & 1) != 0};
            d[0].positive = true;
            d[1].positive = false;
            if (trial % 2 == 0) d[1].distance = d[0].distance + 0.05;  // avoid all-equal instances
            std::set<double> distinct;
            for (const auto& p : d) distinct.insert(p.distance);
            if (distinct.size() < 2) continue;
            const auto [t, j] = sweep_oracle(d);
            CHECK(select_threshold(d) == doctest::Approx(t).epsilon(1e-12));
            CHECK(youden_j(classify_pairs(d, select_threshold(d))) == doctest::Approx(j).epsilon(1e-12));
        }
    }
}

TEST_CASE("evaluation pair sets follow the 1:2:2 rule") {
    std::mt19937_64 rng(4);
    const Tensor e = random_unit_rows(53, 16, rng);
    const Tensor s = similarity_matrix(e, e);
    const EvalPairSet p = build_eval_pairs(s, 11);
    CHECK(p.positives.size() == 53);
    CHECK(p.hard_negatives.size() == 106);
    CHECK(p.random_negatives.size() == 106);

    std::set<CrossPair> hard(p.hard_negatives.begin(), p.hard_negatives.end());
    std::set<CrossPair> rnd(p.random_negatives.begin(), p.random_negatives.end());
    CHECK(hard.size() == 106);
    CHECK(rnd.size() == 106);
    double weakest_hard = 2.0;
    for (const auto& c : p.hard_negatives) {
        CHECK(c.a != c.b);
        weakest_hard = std::min(weakest_hard, s.at(c.a, c.b));
    }
    for (const auto& c : p.random_negatives) {
        CHECK(c.a != c.b);
        CHECK_FALSE(hard.count(c));
        CHECK(s.at(c.a, c.b) <= weakest_hard);
    }
    // Hard negatives are the top 106 mismatched similarities.
    std::size_t above = 0;
    for (std::size_t i = 0; i < 53; ++i)
        for (std::size_t j = 0; j < 53; ++j)
            if (i != j && s.at(i, j) > weakest_hard) ++above;
    CHECK(above < 106);

    const EvalPairSet again = build_eval_pairs(s, 11);
    CHECK(again.random_negatives == p.random_negatives);
    CHECK(build_eval_pairs(s, 12).random_negatives != p.random_negatives);

    const Tensor five = similarity_matrix(random_unit_rows(5, 4, rng), random_unit_rows(5, 4, rng));
    const EvalPairSet q = build_eval_pairs(five, 0);
    CHECK(q.positives.size() == 5);
    CHECK(q.hard_negatives.size() == 10);
    CHECK(q.random_negatives.size() == 10);

    const Tensor two = similarity_matrix(random_unit_rows(2, 4, rng), random_unit_rows(2, 4, rng));
    CHECK_THROWS_AS(build_eval_pairs(two, 0), DataError);
}

TEST_CASE("retrieval ranks by similarity with index tie-break") {
    Tensor gallery({4, 4}, 0.0);
    for (std::size_t i = 0; i < 4; ++i) gallery.at(i, i) = 1.0;
    Tensor query({1, 4}, 0.0);
    query.at(0, 2) = 1.0;
    const auto ranked = retrieve(query, gallery);
    CHECK(ranked[0] == std::vector<std::size_t>{2, 0, 1, 3});

    std::mt19937_64 rng(8);
    const Tensor q = random_unit_rows(10, 6, rng), g = random_unit_rows(10, 6, rng);
    const Tensor s = similarity_matrix(q, g);
    const auto r = rank_rows(s);
    for (std::size_t i = 0; i < 10; ++i) {
        std::vector<std::size_t> oracle(10);
        std::iota(oracle.begin(), oracle.end(), 0);
        std::stable_sort(oracle.begin(), oracle.end(), [&](auto a, auto b) { return s.at(i, a) > s.at(i, b); });
        CHECK(r[i] == oracle);
    }
    const auto self = retrieve(q, q);
    for (std::size_t i = 0; i < 10; ++i) CHECK(self[i][0] == i);

    CHECK_THROWS_AS(retrieve(q, Tensor()), ShapeError);
}

TEST_CASE("top-k curves") {
    const std::vector<std::size_t> truth = {0, 1, 2};
    const std::vector<std::vector<std::size_t>> perfect = {{0, 1, 2}, {1, 0, 2}, {2, 0, 1}};
    CHECK(topk_curve(perfect, truth, 3) == std::vector<double>{1.0, 1.0, 1.0});
    const std::vector<std::vector<std::size_t>> last = {{1, 2, 0}, {0, 2, 1}, {0, 1, 2}};
    CHECK(topk_curve(last, truth, 3) == std::vector<double>{0.0, 0.0, 1.0});
    CHECK_THROWS_AS(topk_curve(last, truth, 4), ShapeError);

    std::mt19937_64 rng(3);
    std::vector<std::vector<std::size_t>> ranked(20);
    std::vector<std::size_t> gt(20);
    std::vector<int> position(20);
    for (std::size_t q = 0; q < 20; ++q) {
        ranked[q].resize(12);
        std::iota(ranked[q].begin(), ranked[q].end(), 0);
        std::shuffle(ranked[q].begin(), ranked[q].end(), rng);
        gt[q] = rng() % 12;
        position[q] = static_cast<int>(std::find(ranked[q].begin(), ranked[q].end(), gt[q]) - ranked[q].begin());
    }
    const auto curve = topk_curve(ranked, gt, 12);
    for (int k = 1; k <= 12; ++k) {
        const double hits = static_cast<double>(std::count_if(position.begin(), position.end(), [&](int p) { return p < k; }));
        CHECK(curve[k - 1] == doctest::Approx(hits / 20.0));
        if (k > 1) CHECK(curve[k - 1] >= curve[k - 2]);
    }
    CHECK(curve.back() == 1.0);
}

TEST_CASE("classical similarity identities") {
    std::mt19937_64 rng(12);
    const Tensor x = noise_image(rng), y = noise_image(rng);
    CHECK(classical_similarity(x, x, ClassicalKind::mse) == 0.0);
    CHECK(classical_similarity(x, x, ClassicalKind::ssim) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(classical_similarity(x, x, ClassicalKind::pearson) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(classical_similarity(x, x, ClassicalKind::cosine) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(classical_similarity(x, x, ClassicalKind::nmi) == doctest::Approx(1.0).epsilon(1e-9));

    Tensor affine = x;
    for (double& v : affine.values()) v = 0.5 * v + 0.2;
    CHECK(std::abs(classical_similarity(x, affine, ClassicalKind::pearson) - 1.0) < 1e-12);

    for (ClassicalKind k : classical_kinds()) {
        CHECK(std::abs(classical_similarity(x, y, k) - classical_similarity(y, x, k)) < 1e-12);
        CHECK(parse_classical(classical_name(k)) == k);
    }
    CHECK(classical_score(x, y, ClassicalKind::mse) == -classical_similarity(x, y, ClassicalKind::mse));

    double mse = 0.0, dot = 0.0, nx = 0.0, ny = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mse += (x[i] - y[i]) * (x[i] - y[i]);
        dot += x[i] * y[i];
        nx += x[i] * x[i];
        ny += y[i] * y[i];
    }
    CHECK(classical_similarity(x, y, ClassicalKind::mse) == doctest::Approx(mse / x.size()).epsilon(1e-12));
    CHECK(classical_similarity(x, y, ClassicalKind::cosine) == doctest::Approx(dot / std::sqrt(nx * ny)).epsilon(1e-12));

    CHECK_THROWS_AS(classical_similarity(Tensor({40, 40}, 0.3), x, ClassicalKind::pearson), DomainError);
    CHECK_THROWS_AS(classical_similarity(x, Tensor({30, 30}), ClassicalKind::mse), ShapeError);
    CHECK_THROWS_AS(parse_classical("psnr"), ConfigError);
}

TEST_CASE("nmi of independent noise is near zero") {
    std::mt19937_64 rng(5);
    const Tensor a = noise_image(rng, 150), b = noise_image(rng, 150);
    CHECK(classical_similarity(a, b, ClassicalKind::nmi) < 0.05);
    CHECK(classical_similarity(a, b, ClassicalKind::nmi) >= 0.0);
}

TEST_CASE("ssim rewards structure over noise") {
    std::mt19937_64 rng(6);
    const Tensor x = noise_image(rng);
    Tensor slightly = x, very = x;
    std::normal_distribution<double> n(0.0, 1.0);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double e = n(rng);
        slightly[i] = std::clamp(x[i] + 0.02 * e, 0.0, 1.0);
        very[i] = std::clamp(x[i] + 0.3 * e, 0.0, 1.0);
    }
    const double s1 = classical_similarity(x, slightly, ClassicalKind::ssim);
    const double s2 = classical_similarity(x, very, ClassicalKind::ssim);
    CHECK(s1 < 1.0);
    CHECK(s1 > s2);
}

TEST_CASE("kernel density estimates") {
    std::mt19937_64 rng(9);
    std::normal_distribution<double> n(0.3, 0.1);
    std::vector<double> v(200);
    for (double& x : v) x = n(rng);
    const KdeCurve c = kde(v);
    CHECK(c.x.size() == kde_points);
    CHECK(trapezoid(c) == doctest::Approx(1.0).epsilon(1e-3));
    for (double d : c.density) CHECK(d >= 0.0);

    double mean = std::accumulate(v.begin(), v.end(), 0.0) / v.size(), var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    const double sd = std::sqrt(var / (v.size() - 1));
    CHECK(c.bandwidth == doctest::Approx(1.06 * sd * std::pow(200.0, -0.2)).epsilon(1e-12));

    const std::vector<double> sym = {-2.0, -0.5, 0.0, 0.5, 2.0};
    const KdeCurve s = kde(sym);
    for (std::size_t i = 0; i < kde_points; ++i) CHECK(std::abs(s.density[i] - s.density[kde_points - 1 - i]) < 1e-9);

    std::vector<double> two;
    for (int i = 0; i < 20; ++i) two.push_back(i % 2 == 0 ? 0.0 + 0.01 * i : 10.0 - 0.01 * i);
    const KdeCurve b = kde(two, 0.5);
    std::vector<double> peaks;
    for (std::size_t i = 1; i + 1 < kde_points; ++i)
        if (b.density[i] > b.density[i - 1] && b.density[i] >= b.density[i + 1]) peaks.push_back(b.x[i]);
    REQUIRE(peaks.size() == 2);
    CHECK(std::abs(peaks[0] - 0.09) < 0.2);
    CHECK(std::abs(peaks[1] - 9.9) < 0.2);
    // closed-form mixture at a grid point
    const double x0 = b.x[100];
    double mix = 0.0;
    for (double m : two) mix += std::exp(-0.5 * std::pow((x0 - m) / 0.5, 2)) / (0.5 * std::sqrt(2 * M_PI));
    CHECK(b.density[100] == doctest::Approx(mix / two.size()).epsilon(1e-12));

    const std::vector<double> one = {1.0};
    CHECK_THROWS_AS(kde(one), DomainError);
    const std::vector<double> flat = {1.0, 1.0, 1.0};
    CHECK_THROWS_AS(kde(flat), DomainError);
    CHECK_NOTHROW(kde(flat, 0.1));
}

TEST_CASE("similarity matrices and diagonal dominance") {
    Tensor q({3, 2}, {1, 0, 0, 1, 1, 1});
    Tensor g({3, 2}, {1, 0, 1, 1, 0, 2});
    const Tensor s = similarity_matrix(q, g);
    const double r2 = 1.0 / std::sqrt(2.0);
    const double oracle[3][3] = {{1, r2, 0}, {0, r2, 1}, {r2, 1, r2}};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) CHECK(s.at(i, j) == doctest::Approx(oracle[i][j]).epsilon(1e-12));

    std::mt19937_64 rng(1);
    const Tensor e = random_unit_rows(6, 5, rng);
    const Tensor self = similarity_matrix(e, e);
    for (std::size_t i = 0; i < 6; ++i) CHECK(self.at(i, i) == doctest::Approx(1.0));

    const Tensor generic = similarity_matrix(2, 3, [](std::size_t i, std::size_t j) { return 10.0 * i + j; });
    CHECK(generic.at(1, 2) == 12.0);

    const Tensor m({2, 2}, {1.0, 0.2, 0.4, 0.8});
    CHECK(diagonal_dominance(m) == doctest::Approx(0.9 - 0.3));
}

TEST_CASE("similarity report from matrices") {
    std::mt19937_64 rng(2);
    const std::size_t n = 12;
    Tensor test({n, n});
    std::normal_distribution<double> noise(0.0, 0.05);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) test.at(i, j) = (i == j ? 0.8 : 0.2) + noise(rng);
    const EvalReport r = evaluate_similarity("toy", test, std::nullopt, {3, 10});
    CHECK(r.threshold_source == "test");
    CHECK(r.confusion.tp + r.confusion.fn == n);
    CHECK(r.confusion.tn + r.confusion.fp == 4 * n);
    CHECK(*r.rates.recall == 1.0);
    CHECK(*r.rates.specificity == 1.0);
    CHECK(r.topk.size() == 10);
    CHECK(r.topk[0] == 1.0);
    CHECK(r.diagonal_dominance > 0.5);

    Tensor val({3, 3}, {0.9, 0.1, 0.2, 0.3, 0.7, 0.1, 0.0, 0.2, 0.8});
    const EvalReport v = evaluate_similarity("toy", test, val, {3, 10});
    CHECK(v.threshold_source == "validation");
    CHECK(v.threshold == doctest::Approx(0.5));  // distances 0.3 (pos) and 0.7 (neg) bracket the gap

    const fs::path dir = fs::temp_directory_path() / "neuromatch_eval_report";
    fs::remove_all(dir);
    write_report_json(r, dir / "report.json");
    write_topk_csv(r.topk, dir / "topk.csv");
    write_kde_csv(r.kde_pos, dir / "kde.csv");
    write_matrix_csv(r.similarity, dir / "m.csv");
    std::ifstream in(dir / "report.json");
    const auto j = nlohmann::json::parse(in);
    CHECK(j.at("scorer") == "toy");
    CHECK(j.at("test_pairs") == n);
    CHECK(j.at("confusion").at("tp") == r.confusion.tp);
    std::ifstream topk(dir / "topk.csv");
    std::string header;
    std::getline(topk, header);
    CHECK(header == "k,accuracy");
}
