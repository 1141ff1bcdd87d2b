#pragma once

// Pair classification, retrieval, classical image similarities, KDE and
// the evaluation report. Every scorer follows "higher = more similar";
// thresholding uses the distance 1 - similarity.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "neuromatch/dataset.hpp"
#include "neuromatch/encoder.hpp"

namespace neuromatch {

struct ConfusionMatrix {
    std::size_t tp = 0, fn = 0, tn = 0, fp = 0;
    bool operator==(const ConfusionMatrix&) const = default;
};

// Each throws DomainError when its denominator is zero.
double recall(const ConfusionMatrix& cm);
double specificity(const ConfusionMatrix& cm);
double precision(const ConfusionMatrix& cm);

struct ConfusionRates {
    std::optional<double> recall, specificity, precision;  // empty when undefined
};
ConfusionRates confusion_metrics(const ConfusionMatrix& cm);

struct LabeledDistance {
    double distance = 0.0;
    bool positive = false;
};

// distance < threshold is predicted positive.
ConfusionMatrix classify_pairs(std::span<const LabeledDistance> pairs, double threshold);

// Midpoint between sorted distinct distances maximising recall + specificity - 1;
// the smallest such midpoint on ties.
double select_threshold(std::span<const LabeledDistance> pairs);
double youden_j(const ConfusionMatrix& cm);

struct CrossPair {
    std::size_t a = 0;  // index of the modality-A image
    std::size_t b = 0;  // index of the modality-B image
    bool operator==(const CrossPair&) const = default;
    auto operator<=>(const CrossPair&) const = default;
};

struct EvalPairSet {
    std::vector<CrossPair> positives;         // (i, i)
    std::vector<CrossPair> hard_negatives;    // highest-similarity mismatches
    std::vector<CrossPair> random_negatives;  // uniform over the remaining mismatches
};

// From an n x n A-by-B similarity matrix: n positives, 2n hard and 2n random negatives.
EvalPairSet build_eval_pairs(const Tensor& similarity, std::uint64_t seed);
EvalPairSet build_eval_pairs(const std::vector<PairedSample>& test, const DualEncoder& model, std::uint64_t seed);

// Gallery indices per query by descending similarity; ties by ascending index.
std::vector<std::vector<std::size_t>> rank_rows(const Tensor& similarity);
std::vector<std::vector<std::size_t>> retrieve(const Tensor& queries, const Tensor& gallery);

// accuracy[k-1] = fraction of queries whose match is within the first k ranks.
std::vector<double> topk_curve(const std::vector<std::vector<std::size_t>>& ranked,
                               std::span<const std::size_t> truth, std::size_t k_max);

enum class ClassicalKind { mse, nmi, ssim, pearson, cosine };
const char* classical_name(ClassicalKind k);
ClassicalKind parse_classical(const std::string& name);
const std::vector<ClassicalKind>& classical_kinds();

inline constexpr std::size_t nmi_bins = 32;
inline constexpr std::size_t ssim_window = 11;
inline constexpr double ssim_sigma = 1.5;

// Raw metric: MSE is a dissimilarity here.
double classical_similarity(const Tensor& a, const Tensor& b, ClassicalKind kind);
// Ranking score: classical_similarity, with MSE negated.
double classical_score(const Tensor& a, const Tensor& b, ClassicalKind kind);

struct KdeCurve {
    double bandwidth = 0.0;
    std::vector<double> x;
    std::vector<double> density;
};
inline constexpr std::size_t kde_points = 256;

// Gaussian KDE on 256 points over [min - 3h, max + 3h]; Silverman's h by default.
KdeCurve kde(std::span<const double> values, std::optional<double> bandwidth = std::nullopt);

// Cosine similarity of every query row with every gallery row.
Tensor similarity_matrix(const Tensor& queries, const Tensor& gallery);
Tensor similarity_matrix(std::size_t n_queries, std::size_t n_gallery,
                         const std::function<double(std::size_t, std::size_t)>& scorer);
Tensor classical_matrix(const std::vector<PairedSample>& pairs, ClassicalKind kind);
// A-by-B embedding similarities of paired samples.
Tensor embedding_matrix(const std::vector<PairedSample>& pairs, const DualEncoder& model);

// mean(diagonal) - mean(off-diagonal).
double diagonal_dominance(const Tensor& similarity);

struct EvalReport {
    std::string scorer;
    std::size_t test_pairs = 0;
    double threshold = 0.0;
    std::string threshold_source;  // "validation" or "test"
    ConfusionMatrix confusion;
    ConfusionRates rates;
    std::vector<double> topk;
    Tensor similarity;
    double diagonal_dominance = 0.0;
    KdeCurve kde_pos, kde_neg;
};

struct EvalOptions {
    std::uint64_t seed = 0;
    std::size_t k_max = 10;
};

// Report from A-by-B similarity matrices. The threshold is selected on the
// validation matrix (diagonal vs all off-diagonal pairs) when it has at
// least two pairs, otherwise on the test pair set itself.
EvalReport evaluate_similarity(const std::string& scorer, const Tensor& test_similarity,
                               const std::optional<Tensor>& validation_similarity, const EvalOptions& options);
EvalReport evaluate_model(const DualEncoder& model, const DatasetSplit& split, const EvalOptions& options);
EvalReport evaluate_classical(ClassicalKind kind, const DatasetSplit& split, const EvalOptions& options);

void write_report_json(const EvalReport& report, const std::filesystem::path& path);
void write_topk_csv(const std::vector<double>& topk, const std::filesystem::path& path);
void write_kde_csv(const KdeCurve& curve, const std::filesystem::path& path);
void write_matrix_csv(const Tensor& m, const std::filesystem::path& path);

}  // namespace neuromatch
