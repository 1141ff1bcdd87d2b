#include <algorithm>
#include <cmath>
#include <string>

#include "neuromatch/objective.hpp"

namespace neuromatch {

void CircleLossParams::validate() const {
    if (!(m >= 0.0)) throw ConfigError("circle loss margin m must be >= 0");
    if (!(gamma > 0.0)) throw ConfigError("circle loss gamma must be > 0");
}

Tensor pair_similarities(const Tensor& embeddings, std::span<const IndexPair> pairs) {
    if (embeddings.rank() != 2) throw ShapeError("pair_similarities: embeddings must be n x d");
    if (pairs.empty()) return {};
    const std::size_t n = embeddings.rows(), k = pairs.size();
    Tensor left({k, n}, 0.0), right({k, n}, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
        const auto [i, j] = pairs[p];
        if (i >= n || j >= n)
            throw ShapeError("pair_similarities: pair (" + std::to_string(i) + ", " + std::to_string(j) +
                             ") out of range for " + std::to_string(n) + " embeddings");
        left.at(p, i) = 1.0;
        right.at(p, j) = 1.0;
    }
    const Tensor products = mul(matmul(left, embeddings), matmul(right, embeddings));
    return transpose2d(matmul(products, Tensor({embeddings.cols(), 1}, 1.0)));
}

std::pair<Tensor, Tensor> pair_similarities(const Tensor& embeddings, const MinedPairs& mined) {
    return {pair_similarities(embeddings, mined.positives), pair_similarities(embeddings, mined.negatives)};
}

MinedPairs mine_hard_negatives(const Tensor& embeddings, std::span<const std::int64_t> labels,
                               const MinerConfig& config) {
    if (embeddings.rank() != 2 || embeddings.rows() != labels.size())
        throw ShapeError("mine_hard_negatives: need one label per embedding row");
    if (labels.size() < 2) throw ShapeError("mine_hard_negatives: need at least 2 samples");
    if (!(config.alpha >= 0.0)) throw ConfigError("miner alpha must be >= 0");
    const std::size_t n = labels.size(), d = embeddings.cols();
    const double* e = embeddings.values().data();
    MinedPairs out;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            if (labels[i] == labels[j]) {
                out.positives.emplace_back(i, j);
                continue;
            }
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) s += e[i * d + c] * e[j * d + c];
            if (1.0 - s < config.alpha) out.negatives.emplace_back(i, j);
        }
    return out;
}

MinedPairs all_pairs(std::span<const std::int64_t> labels) {
    MinedPairs out;
    for (std::size_t i = 0; i < labels.size(); ++i)
        for (std::size_t j = i + 1; j < labels.size(); ++j)
            (labels[i] == labels[j] ? out.positives : out.negatives).emplace_back(i, j);
    return out;
}

namespace {

// log(sum(exp(x))) over a row, shifted by its (constant) maximum.
Tensor log_sum_exp(const Tensor& x) {
    const double top = *std::max_element(x.values().begin(), x.values().end());
    return add(log(sum_all(exp(add(x, Tensor::scalar(-top))))), Tensor::scalar(top));
}

// log(1 + exp(z)) for a scalar z.
Tensor softplus(const Tensor& z) {
    const double c = std::max(0.0, z.item());
    return add(log(add(exp(add(z, Tensor::scalar(-c))), Tensor::scalar(std::exp(-c)))), Tensor::scalar(c));
}

}  // namespace

Tensor circle_loss(const Tensor& s_p, const Tensor& s_n, const CircleLossParams& params) {
    params.validate();
    if (s_p.empty() || s_n.empty()) return Tensor::scalar(0.0);
    const Tensor z = add(add(log_sum_exp(scale(s_n, params.gamma)), log_sum_exp(scale(s_p, -params.gamma))),
                         Tensor::scalar(params.gamma * params.m));
    return softplus(z);
}

Tensor triplet_loss(const Tensor& d_ap, const Tensor& d_an, double margin) {
    if (d_ap.shape() != d_an.shape())
        throw ShapeError("triplet_loss: " + shape_string(d_ap.shape()) + " vs " + shape_string(d_an.shape()));
    if (!(margin >= 0.0)) throw ConfigError("triplet margin must be >= 0");
    if (d_ap.empty()) return Tensor::scalar(0.0);
    return mean_all(relu(add(subtract(d_ap, d_an), Tensor::scalar(margin))));
}

}  // namespace neuromatch
