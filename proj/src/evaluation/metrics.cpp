#include <algorithm>
#include <cmath>
#include <numeric>
#include <limits>
#include <numbers>
#include <random>

#include "neuromatch/evaluation.hpp"

namespace neuromatch {

double recall(const ConfusionMatrix& cm) {
    if (cm.tp + cm.fn == 0) throw DomainError("recall undefined: no positive pairs (tp + fn = 0)");
    return static_cast<double>(cm.tp) / static_cast<double>(cm.tp + cm.fn);
}

double specificity(const ConfusionMatrix& cm) {
    if (cm.tn + cm.fp == 0) throw DomainError("specificity undefined: no negative pairs (tn + fp = 0)");
    return static_cast<double>(cm.tn) / static_cast<double>(cm.tn + cm.fp);
}

double precision(const ConfusionMatrix& cm) {
    if (cm.tp + cm.fp == 0) throw DomainError("precision undefined: nothing predicted positive (tp + fp = 0)");
    return static_cast<double>(cm.tp) / static_cast<double>(cm.tp + cm.fp);
}

ConfusionRates confusion_metrics(const ConfusionMatrix& cm) {
    ConfusionRates r;
    if (cm.tp + cm.fn > 0) r.recall = recall(cm);
    if (cm.tn + cm.fp > 0) r.specificity = specificity(cm);
    if (cm.tp + cm.fp > 0) r.precision = precision(cm);
    return r;
}

ConfusionMatrix classify_pairs(std::span<const LabeledDistance> pairs, double threshold) {
    ConfusionMatrix cm;
    for (const auto& p : pairs) {
        const bool predicted = p.distance < threshold;
        if (p.positive)
            ++(predicted ? cm.tp : cm.fn);
        else
            ++(predicted ? cm.fp : cm.tn);
    }
    return cm;
}

double youden_j(const ConfusionMatrix& cm) { return recall(cm) + specificity(cm) - 1.0; }

double select_threshold(std::span<const LabeledDistance> pairs) {
    std::vector<LabeledDistance> sorted(pairs.begin(), pairs.end());
    std::sort(sorted.begin(), sorted.end(),
              [](const LabeledDistance& x, const LabeledDistance& y) { return x.distance < y.distance; });
    std::int64_t n_pos = 0, n_neg = 0;
    for (const auto& p : sorted) (p.positive ? n_pos : n_neg) += 1;
    if (n_pos == 0 || n_neg == 0) throw DomainError("select_threshold needs both positive and negative pairs");

    // Sweep midpoints left to right; J * n_pos * n_neg = tp * n_neg + tn * n_pos - n_pos * n_neg
    // is compared exactly in integers.
    std::int64_t tp = 0, fp = 0;
    std::int64_t best_score = std::numeric_limits<std::int64_t>::min();
    double best = sorted.front().distance;
    for (std::size_t i = 0; i + 1 < sorted.size(); ++i) {
        (sorted[i].positive ? tp : fp) += 1;
        if (sorted[i + 1].distance == sorted[i].distance) continue;
        const std::int64_t tn = n_neg - fp;
        const std::int64_t score = tp * n_neg + tn * n_pos;
        if (score > best_score) {
            best_score = score;
            best = 0.5 * (sorted[i].distance + sorted[i + 1].distance);
        }
    }
    return best;
}

namespace {

void check_square(const Tensor& s, const char* what) {
    if (s.rank() != 2 || s.rows() != s.cols() || s.empty())
        throw ShapeError(std::string(what) + ": expected a non-empty square similarity matrix, got " +
                         shape_string(s.shape()));
}

}  // namespace

EvalPairSet build_eval_pairs(const Tensor& similarity, std::uint64_t seed) {
    check_square(similarity, "build_eval_pairs");
    const std::size_t n = similarity.rows();
    const std::size_t want = 2 * n;
    const std::size_t available = n * n - n;
    if (available < 2 * want)
        throw DataError("insufficient negatives: " + std::to_string(n) + " test pairs give " +
                        std::to_string(available) + " mismatched pairs, " + std::to_string(2 * want) + " required");
    EvalPairSet out;
    std::vector<CrossPair> mismatched;
    mismatched.reserve(available);
    for (std::size_t i = 0; i < n; ++i) {
        out.positives.push_back({i, i});
        for (std::size_t j = 0; j < n; ++j)
            if (i != j) mismatched.push_back({i, j});
    }
    std::stable_sort(mismatched.begin(), mismatched.end(), [&](const CrossPair& x, const CrossPair& y) {
        return similarity.at(x.a, x.b) > similarity.at(y.a, y.b);
    });
    out.hard_negatives.assign(mismatched.begin(), mismatched.begin() + static_cast<std::ptrdiff_t>(want));
    std::vector<CrossPair> rest(mismatched.begin() + static_cast<std::ptrdiff_t>(want), mismatched.end());
    std::sort(rest.begin(), rest.end());
    std::mt19937_64 rng(seed);
    std::shuffle(rest.begin(), rest.end(), rng);
    out.random_negatives.assign(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(want));
    std::sort(out.random_negatives.begin(), out.random_negatives.end());
    return out;
}

EvalPairSet build_eval_pairs(const std::vector<PairedSample>& test, const DualEncoder& model, std::uint64_t seed) {
    if (test.empty()) throw DataError("build_eval_pairs: empty test split");
    return build_eval_pairs(embedding_matrix(test, model), seed);
}

std::vector<std::vector<std::size_t>> rank_rows(const Tensor& similarity) {
    if (similarity.rank() != 2 || similarity.empty()) throw ShapeError("rank_rows: empty gallery");
    std::vector<std::vector<std::size_t>> out(similarity.rows());
    for (std::size_t q = 0; q < similarity.rows(); ++q) {
        auto& order = out[q];
        order.resize(similarity.cols());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t x, std::size_t y) { return similarity.at(q, x) > similarity.at(q, y); });
    }
    return out;
}

std::vector<std::vector<std::size_t>> retrieve(const Tensor& queries, const Tensor& gallery) {
    if (gallery.empty() || gallery.rank() != 2) throw ShapeError("retrieve: empty gallery");
    return rank_rows(similarity_matrix(queries, gallery));
}

std::vector<double> topk_curve(const std::vector<std::vector<std::size_t>>& ranked, std::span<const std::size_t> truth,
                               std::size_t k_max) {
    if (ranked.size() != truth.size()) throw ShapeError("topk_curve: one ground-truth index per query required");
    if (ranked.empty()) throw ShapeError("topk_curve: no queries");
    for (const auto& r : ranked)
        if (k_max > r.size())
            throw ShapeError("topk_curve: k_max " + std::to_string(k_max) + " exceeds gallery size " +
                             std::to_string(r.size()));
    std::vector<std::size_t> hits(k_max + 1, 0);
    for (std::size_t q = 0; q < ranked.size(); ++q) {
        const auto it = std::find(ranked[q].begin(), ranked[q].end(), truth[q]);
        if (it == ranked[q].end()) throw ShapeError("topk_curve: ground truth missing from ranking");
        const auto rank = static_cast<std::size_t>(it - ranked[q].begin());
        if (rank < k_max) ++hits[rank + 1];
    }
    std::vector<double> acc(k_max);
    std::size_t cumulative = 0;
    for (std::size_t k = 1; k <= k_max; ++k) {
        cumulative += hits[k];
        acc[k - 1] = static_cast<double>(cumulative) / static_cast<double>(ranked.size());
    }
    return acc;
}

KdeCurve kde(std::span<const double> values, std::optional<double> bandwidth) {
    const std::size_t n = values.size();
    if (n < 2) throw DomainError("kde needs at least 2 values");
    KdeCurve out;
    if (bandwidth) {
        if (!(*bandwidth > 0.0)) throw ConfigError("kde bandwidth must be > 0");
        out.bandwidth = *bandwidth;
    } else {
        const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(n);
        double ss = 0.0;
        for (double v : values) ss += (v - mean) * (v - mean);
        const double sd = std::sqrt(ss / static_cast<double>(n - 1));
        if (!(sd > 0.0)) throw DomainError("kde: zero variance and no explicit bandwidth");
        out.bandwidth = 1.06 * sd * std::pow(static_cast<double>(n), -0.2);
    }
    const double h = out.bandwidth;
    const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
    const double lo = *lo_it - 3.0 * h, hi = *hi_it + 3.0 * h;
    const double norm = 1.0 / (static_cast<double>(n) * h * std::sqrt(2.0 * std::numbers::pi));
    out.x.resize(kde_points);
    out.density.resize(kde_points);
    for (std::size_t i = 0; i < kde_points; ++i) {
        const double x = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(kde_points - 1);
        double s = 0.0;
        for (double v : values) {
            const double z = (x - v) / h;
            s += std::exp(-0.5 * z * z);
        }
        out.x[i] = x;
        out.density[i] = s * norm;
    }
    return out;
}

Tensor similarity_matrix(const Tensor& queries, const Tensor& gallery) {
    if (queries.rank() != 2 || gallery.rank() != 2 || queries.empty() || gallery.empty())
        throw ShapeError("similarity_matrix: empty inputs");
    if (queries.cols() != gallery.cols())
        throw ShapeError("similarity_matrix: width mismatch " + shape_string(queries.shape()) + " vs " +
                         shape_string(gallery.shape()));
    auto norms = [](const Tensor& t) {
        std::vector<double> out(t.rows());
        for (std::size_t r = 0; r < t.rows(); ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < t.cols(); ++c) s += t.at(r, c) * t.at(r, c);
            if (s == 0.0) throw DomainError("similarity_matrix: zero vector");
            out[r] = std::sqrt(s);
        }
        return out;
    };
    const auto nq = norms(queries), ng = norms(gallery);
    Tensor out({queries.rows(), gallery.rows()});
    for (std::size_t i = 0; i < queries.rows(); ++i)
        for (std::size_t j = 0; j < gallery.rows(); ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < queries.cols(); ++c) s += queries.at(i, c) * gallery.at(j, c);
            out.at(i, j) = s / (nq[i] * ng[j]);
        }
    return out;
}

Tensor similarity_matrix(std::size_t n_queries, std::size_t n_gallery,
                         const std::function<double(std::size_t, std::size_t)>& scorer) {
    if (n_queries == 0 || n_gallery == 0) throw ShapeError("similarity_matrix: empty inputs");
    Tensor out({n_queries, n_gallery});
    for (std::size_t i = 0; i < n_queries; ++i)
        for (std::size_t j = 0; j < n_gallery; ++j) out.at(i, j) = scorer(i, j);
    return out;
}

Tensor classical_matrix(const std::vector<PairedSample>& pairs, ClassicalKind kind) {
    return similarity_matrix(pairs.size(), pairs.size(), [&](std::size_t i, std::size_t j) {
        return classical_score(pairs[i].image_a, pairs[j].image_b, kind);
    });
}

Tensor embedding_matrix(const std::vector<PairedSample>& pairs, const DualEncoder& model) {
    if (pairs.empty()) throw DataError("no pairs to embed");
    std::vector<const Tensor*> a, b;
    for (const auto& p : pairs) {
        a.push_back(&p.image_a);
        b.push_back(&p.image_b);
    }
    return similarity_matrix(embed_all(a, model), embed_all(b, model));
}

double diagonal_dominance(const Tensor& s) {
    check_square(s, "diagonal_dominance");
    const std::size_t n = s.rows();
    if (n < 2) throw ShapeError("diagonal_dominance needs at least 2 x 2");
    double diag = 0.0, off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) (i == j ? diag : off) += s.at(i, j);
    return diag / static_cast<double>(n) - off / static_cast<double>(n * n - n);
}

}  // namespace neuromatch
