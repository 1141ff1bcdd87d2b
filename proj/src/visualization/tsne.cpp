#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "neuromatch/visualization.hpp"

namespace neuromatch {

Tensor conditional_affinities(const Tensor& sq, double perplexity, std::vector<double>* reached) {
    if (sq.rank() != 2 || sq.rows() != sq.cols()) throw ShapeError("conditional_affinities: expected n x n distances");
    const std::size_t n = sq.rows();
    const double target = std::log(perplexity);
    Tensor p({n, n}, 0.0);
    if (reached != nullptr) reached->assign(n, 0.0);
    std::vector<double> row(n);
    for (std::size_t i = 0; i < n; ++i) {
        double dmin = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) dmin = std::min(dmin, sq.at(i, j));
        double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
        double entropy = 0.0;
        for (int iter = 0; iter < 200; ++iter) {
            double sum = 0.0, weighted = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                if (j == i) {
                    row[j] = 0.0;
                    continue;
                }
                const double shifted = sq.at(i, j) - dmin;
                row[j] = std::exp(-beta * shifted);
                sum += row[j];
                weighted += shifted * row[j];
            }
            entropy = std::log(sum) + beta * weighted / sum;
            for (double& v : row) v /= sum;
            const double gap = entropy - target;
            if (std::abs(gap) < 1e-12) break;
            if (gap > 0.0) {
                lo = beta;
                beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
        }
        for (std::size_t j = 0; j < n; ++j) p.at(i, j) = row[j];
        if (reached != nullptr) (*reached)[i] = std::exp(entropy);
    }
    return p;
}

TsneResult tsne(const Tensor& features, const TsneConfig& config) {
    if (features.rank() != 2 || features.rows() < 4) throw ShapeError("tsne needs at least 4 points");
    const std::size_t n = features.rows(), d = features.cols();
    if (!(config.perplexity > 0.0) || !(config.perplexity < static_cast<double>(n - 1) / 3.0))
        throw ConfigError("tsne perplexity " + std::to_string(config.perplexity) + " infeasible for " +
                          std::to_string(n) + " points (must be < (n - 1) / 3)");
    const double learning_rate = config.learning_rate.value_or(std::min(100.0, 0.5 * static_cast<double>(n)));
    if (!(learning_rate > 0.0)) throw ConfigError("tsne learning rate must be > 0");

    Tensor sq({n, n}, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                const double diff = features.at(i, c) - features.at(j, c);
                s += diff * diff;
            }
            sq.at(i, j) = sq.at(j, i) = s;
        }

    TsneResult out;
    out.conditional = conditional_affinities(sq, config.perplexity, &out.perplexities);
    out.joint = Tensor({n, n}, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            out.joint.at(i, j) =
                std::max((out.conditional.at(i, j) + out.conditional.at(j, i)) / (2.0 * static_cast<double>(n)), 1e-300);
    for (std::size_t i = 0; i < n; ++i) out.joint.at(i, i) = 0.0;

    std::mt19937_64 rng(config.seed);
    std::normal_distribution<double> init(0.0, 1e-4);
    std::vector<double> y(2 * n), velocity(2 * n, 0.0), gains(2 * n, 1.0), grad(2 * n);
    for (double& v : y) v = init(rng);
    std::vector<double> num(n * n);

    auto kl_and_gradient = [&](double exaggeration, bool want_grad) {
        double z = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                if (i == j) {
                    num[i * n + j] = 0.0;
                    continue;
                }
                const double dx = y[2 * i] - y[2 * j], dy = y[2 * i + 1] - y[2 * j + 1];
                num[i * n + j] = 1.0 / (1.0 + dx * dx + dy * dy);
                z += num[i * n + j];
            }
        double kl = 0.0;
        if (want_grad) std::fill(grad.begin(), grad.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                if (i == j) continue;
                const double p = out.joint.at(i, j);
                const double q = std::max(num[i * n + j] / z, 1e-300);
                kl += p * std::log(p / q);
                if (want_grad) {
                    const double m = 4.0 * (exaggeration * p - q) * num[i * n + j];
                    grad[2 * i] += m * (y[2 * i] - y[2 * j]);
                    grad[2 * i + 1] += m * (y[2 * i + 1] - y[2 * j + 1]);
                }
            }
        return kl;
    };

    for (std::size_t it = 0; it < config.iterations; ++it) {
        const double exaggeration = it < config.exaggeration_iterations ? config.early_exaggeration : 1.0;
        const double momentum = it < config.momentum_switch ? 0.5 : 0.8;
        kl_and_gradient(exaggeration, true);
        for (std::size_t k = 0; k < 2 * n; ++k) {
            const bool same_sign = (grad[k] > 0.0) == (velocity[k] > 0.0);
            gains[k] = std::max(same_sign ? gains[k] * 0.8 : gains[k] + 0.2, 0.01);
            velocity[k] = momentum * velocity[k] - learning_rate * gains[k] * grad[k];
            y[k] += velocity[k];
        }
        double mx = 0.0, my = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            mx += y[2 * i];
            my += y[2 * i + 1];
        }
        mx /= static_cast<double>(n);
        my /= static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            y[2 * i] -= mx;
            y[2 * i + 1] -= my;
        }
        out.kl.push_back(kl_and_gradient(1.0, false));
    }
    out.coordinates = Tensor({n, 2}, std::vector<double>(y.begin(), y.end()));
    return out;
}

}  // namespace neuromatch
