#pragma once

// Pair mining and pairwise metric-learning losses over a batch of
// unit-norm embeddings (one per row).

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "neuromatch/tensor.hpp"

namespace neuromatch {

using IndexPair = std::pair<std::size_t, std::size_t>;

struct MinerConfig {
    double alpha = 0.7;  // cosine-distance threshold, strict
};

struct MinedPairs {
    std::vector<IndexPair> positives;  // i < j, same label
    std::vector<IndexPair> negatives;  // i < j, different label, 1 - cos < alpha
};

struct CircleLossParams {
    double m = 0.25;
    double gamma = 32.0;
    void validate() const;
};

// Cosine similarity of each listed pair, as a 1 x k row in list order.
// Rows of `embeddings` are assumed unit-norm, so this is a dot product.
Tensor pair_similarities(const Tensor& embeddings, std::span<const IndexPair> pairs);

// Similarities of positives and negatives in one call.
std::pair<Tensor, Tensor> pair_similarities(const Tensor& embeddings, const MinedPairs& mined);

MinedPairs mine_hard_negatives(const Tensor& embeddings, std::span<const std::int64_t> labels,
                               const MinerConfig& config);

// Every same-label pair positive, every cross-label pair negative.
MinedPairs all_pairs(std::span<const std::int64_t> labels);

// log(1 + sum_{i in P} sum_{j in N} exp(gamma (s_n[j] - s_p[i] + m))), evaluated
// as softplus(LSE(gamma s_n) + LSE(-gamma s_p) + gamma m). Zero if either list is empty.
Tensor circle_loss(const Tensor& s_p, const Tensor& s_n, const CircleLossParams& params);

// mean(max(0, d_ap - d_an + margin)).
Tensor triplet_loss(const Tensor& d_ap, const Tensor& d_an, double margin);

}  // namespace neuromatch
