#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>

#include <json.hpp>

#include "neuromatch/evaluation.hpp"

namespace neuromatch {

namespace fs = std::filesystem;

namespace {

std::vector<LabeledDistance> matrix_distances(const Tensor& s) {
    std::vector<LabeledDistance> out;
    for (std::size_t i = 0; i < s.rows(); ++i)
        for (std::size_t j = 0; j < s.cols(); ++j) out.push_back({1.0 - s.at(i, j), i == j});
    return out;
}

KdeCurve safe_kde(const std::vector<double>& values) {
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    if (*lo == *hi) return kde(values, 1e-3);
    return kde(values);
}

}  // namespace

EvalReport evaluate_similarity(const std::string& scorer, const Tensor& test, const std::optional<Tensor>& validation,
                               const EvalOptions& options) {
    const EvalPairSet pairs = build_eval_pairs(test, options.seed);
    const std::size_t n = test.rows();

    std::vector<LabeledDistance> labeled;
    std::vector<double> pos_sims, neg_sims;
    for (const auto& p : pairs.positives) {
        labeled.push_back({1.0 - test.at(p.a, p.b), true});
        pos_sims.push_back(test.at(p.a, p.b));
    }
    for (const auto* list : {&pairs.hard_negatives, &pairs.random_negatives})
        for (const auto& p : *list) {
            labeled.push_back({1.0 - test.at(p.a, p.b), false});
            neg_sims.push_back(test.at(p.a, p.b));
        }

    EvalReport r;
    r.scorer = scorer;
    r.test_pairs = n;
    if (validation && validation->rows() >= 2) {
        r.threshold = select_threshold(matrix_distances(*validation));
        r.threshold_source = "validation";
    } else {
        r.threshold = select_threshold(labeled);
        r.threshold_source = "test";
    }
    r.confusion = classify_pairs(labeled, r.threshold);
    r.rates = confusion_metrics(r.confusion);

    std::vector<std::size_t> truth(n);
    for (std::size_t i = 0; i < n; ++i) truth[i] = i;
    r.topk = topk_curve(rank_rows(test), truth, std::min(options.k_max, n));
    r.similarity = test;
    r.diagonal_dominance = diagonal_dominance(test);
    r.kde_pos = safe_kde(pos_sims);
    r.kde_neg = safe_kde(neg_sims);
    return r;
}

EvalReport evaluate_model(const DualEncoder& model, const DatasetSplit& split, const EvalOptions& options) {
    std::optional<Tensor> val;
    if (split.validation.size() >= 2) val = embedding_matrix(split.validation, model);
    return evaluate_similarity("embedding", embedding_matrix(split.test, model), val, options);
}

EvalReport evaluate_classical(ClassicalKind kind, const DatasetSplit& split, const EvalOptions& options) {
    std::optional<Tensor> val;
    if (split.validation.size() >= 2) val = classical_matrix(split.validation, kind);
    return evaluate_similarity(classical_name(kind), classical_matrix(split.test, kind), val, options);
}

namespace {

nlohmann::ordered_json optional_json(const std::optional<double>& v) {
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

nlohmann::ordered_json kde_json(const KdeCurve& k) {
    return {{"bandwidth", k.bandwidth}, {"x", k.x}, {"density", k.density}};
}

std::ofstream open_output(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << std::setprecision(17);
    return out;
}

}  // namespace

void write_report_json(const EvalReport& r, const fs::path& path) {
    nlohmann::ordered_json j;
    j["scorer"] = r.scorer;
    j["test_pairs"] = r.test_pairs;
    j["threshold"] = r.threshold;
    j["threshold_source"] = r.threshold_source;
    j["confusion"] = {{"tp", r.confusion.tp}, {"fn", r.confusion.fn}, {"tn", r.confusion.tn}, {"fp", r.confusion.fp}};
    j["recall"] = optional_json(r.rates.recall);
    j["specificity"] = optional_json(r.rates.specificity);
    j["precision"] = optional_json(r.rates.precision);
    j["topk"] = r.topk;
    j["diagonal_dominance"] = r.diagonal_dominance;
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < r.similarity.rows(); ++i) {
        std::vector<double> row(r.similarity.values().begin() + static_cast<std::ptrdiff_t>(i * r.similarity.cols()),
                                r.similarity.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * r.similarity.cols()));
        rows.push_back(row);
    }
    j["similarity_matrix"] = std::move(rows);
    j["kde_pos"] = kde_json(r.kde_pos);
    j["kde_neg"] = kde_json(r.kde_neg);
    auto out = open_output(path);
    out << j.dump(2) << '\n';
}

void write_topk_csv(const std::vector<double>& topk, const fs::path& path) {
    auto out = open_output(path);
    out << "k,accuracy\n";
    for (std::size_t k = 0; k < topk.size(); ++k) out << k + 1 << ',' << topk[k] << '\n';
}

void write_kde_csv(const KdeCurve& curve, const fs::path& path) {
    auto out = open_output(path);
    out << "x,density\n";
    for (std::size_t i = 0; i < curve.x.size(); ++i) out << curve.x[i] << ',' << curve.density[i] << '\n';
}

void write_matrix_csv(const Tensor& m, const fs::path& path) {
    auto out = open_output(path);
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) out << (j ? "," : "") << m.at(i, j);
        out << '\n';
    }
}

}  // namespace neuromatch
