#include <doctest.h>

#include <cmath>
#include <random>

#include "neuromatch/tensor.hpp"

using namespace neuromatch;

namespace {

Tensor random_tensor(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(rows * cols);
    for (auto& x : v) x = u(rng);
    return Tensor::matrix(rows, cols, std::move(v));
}

// Reduces any tensor to a scalar with non-uniform weights so every output
// coordinate contributes a distinct gradient.
Tensor weighted_sum(const Tensor& t) {
    std::vector<double> w(t.size());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.3 + 0.17 * static_cast<double>(i % 7);
    return sum_all(mul(t, Tensor(t.shape(), std::move(w))));
}

}  // namespace

TEST_CASE("matmul of ones") {
    const Tensor a({2, 3}, 1.0);
    const Tensor b({3, 2}, 1.0);
    const Tensor c = matmul(a, b);
    CHECK(c.shape() == Shape{2, 2});
    for (double v : c.values()) CHECK(v == 3.0);
}

TEST_CASE("softmax of equal logits is uniform") {
    const Tensor y = softmax_rows(Tensor::row({0.0, 0.0, 0.0}));
    for (double v : y.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("layer_norm matches scalar reference") {
    const Tensor y = layer_norm(Tensor::row({1.0, 2.0, 3.0}), Tensor({1, 3}, 1.0), Tensor({1, 3}, 0.0));
    const double xs[3] = {1.0, 2.0, 3.0};
    const double mean = (xs[0] + xs[1] + xs[2]) / 3.0;
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= 3.0;
    for (int i = 0; i < 3; ++i) CHECK(y[i] == doctest::Approx((xs[i] - mean) / std::sqrt(var + 1e-5)).epsilon(1e-14));
}

TEST_CASE("backprop basics") {
    SUBCASE("d/dx sum(x*x) at 3 is 6") {
        Tape tape;
        TapeScope scope(&tape);
        const Tensor x = tape.watch(Tensor::scalar(3.0));
        const Tensor f = sum_all(mul(x, x));
        CHECK(tape.backprop(f).of(x).item() == 6.0);
    }
    SUBCASE("sum gives all ones") {
        Tape tape;
        TapeScope scope(&tape);
        std::mt19937_64 rng(1);
        const Tensor x = tape.watch(random_tensor(3, 4, rng));
        const Tensor g = tape.backprop(sum_all(x)).of(x);
        CHECK(g.shape() == x.shape());
        for (double v : g.values()) CHECK(v == 1.0);
    }
    SUBCASE("unreachable nodes get zero gradient") {
        Tape tape;
        TapeScope scope(&tape);
        const Tensor x = tape.watch(Tensor::row({1.0, 2.0}));
        const Tensor unused = tape.watch(Tensor::row({5.0, 6.0, 7.0}));
        const Tensor side = exp(unused);
        const Tensor f = sum_all(x);
        const Gradients g = tape.backprop(f);
        CHECK(g.of(unused) == Tensor({1, 3}, 0.0));
        CHECK(g.of(side) == Tensor({1, 3}, 0.0));
    }
    SUBCASE("topological order of node ids") {
        Tape tape;
        TapeScope scope(&tape);
        const Tensor x = tape.watch(Tensor::row({1.0, 2.0}));
        const Tensor y = exp(x);
        const Tensor z = mul(y, x);
        CHECK(x.node() < y.node());
        CHECK(y.node() < z.node());
    }
}

TEST_CASE("softmax then sum-of-log matches finite differences") {
    std::mt19937_64 rng(11);
    const Tensor point = random_tensor(3, 4, rng);
    auto f = [](const Tensor& x) { return weighted_sum(log(softmax_rows(x))); };
    CHECK(grad_check(f, point, 1e-5) < 1e-6);
}

TEST_CASE("grad_check reference cases") {
    std::mt19937_64 rng(3);
    const Tensor point = random_tensor(4, 5, rng, -3.0, 3.0);
    CHECK(grad_check([](const Tensor& x) { return sum_all(mul(x, x)); }, point, 1e-5) < 1e-8);
    CHECK(grad_check([](const Tensor&) { return Tensor::scalar(2.5); }, point, 1e-5) == 0.0);
    CHECK_THROWS_AS(grad_check([](const Tensor& x) { return x; }, point, 1e-5), ShapeError);
    CHECK_THROWS_AS(grad_check([](const Tensor& x) { return sum_all(x); }, point, 0.5), ConfigError);
}

TEST_CASE("every primitive agrees with finite differences") {
    std::mt19937_64 rng(2024);
    for (int trial = 0; trial < 20; ++trial) {
        CAPTURE(trial);
        const Tensor a = random_tensor(3, 4, rng);
        const Tensor b = random_tensor(4, 2, rng);
        const Tensor same = random_tensor(3, 4, rng);
        const Tensor row = random_tensor(1, 4, rng);
        const Tensor col = random_tensor(3, 1, rng);
        const Tensor positive = random_tensor(3, 4, rng, 0.5, 2.0);
        const double tol = 1e-4;

        CHECK(grad_check([&](const Tensor& x) { return weighted_sum(matmul(x, b)); }, a, 1e-5) < tol);
        CHECK(grad_check([&](const Tensor& x) { return weighted_sum(matmul(a, x)); }, b, 1e-5) < tol);
        CHECK(grad_check([&](const Tensor& x) { return weighted_sum(add(x, same)); }, a, 1e-5) < tol);
        CHECK(grad_check([&](const Tensor& x) { return weighted_sum(add(a, x)); }, row, 1e-5) < tol);
        CHECK(grad_check([&](const Tensor& x) { return weighted_sum(add(a, x)); }, col, 1e-5) < tol);
        CHECK(grad_check([&](const Tensor& x) { return weighted_sum(mul(x, same)); }, a, 1e-5) < tol);
        CHECK(grad_check([&](const Tensor& x) { return weighted_sum(mul(a, x)); }, row, 1e-5) < tol);
        CHECK(grad_check([&](const Tensor& x) { return weighted_sum(mul(a, x)); }, col, 1e-5) < tol);
        CHECK(grad_check([&](const Tensor& x) { return weighted_sum(mul(a, x)); }, Tensor::scalar(0.7), 1e-5) < tol);
        CHECK(grad_check([&](const Tensor& x) { return weighted_sum(scale(x, -2.5)); }, a, 1e-5) < tol);
        CHECK(grad_check([&](const Tensor& x) { return weighted_sum(transpose2d(x)); }, a, 1e-5) < tol);
        CHECK(grad_check([&](const Tensor& x) { return weighted_sum(softmax_rows(x)); }, a, 1e-5) < tol);
        const Tensor gain = random_tensor(1, 4, rng);
        const Tensor bias = random_tensor(1, 4, rng);
        CHECK(grad_check([&](const Tensor& x) { return weighted_sum(layer_norm(x, gain, bias)); }, a, 1e-5) < tol);
        CHECK(grad_check([&](const Tensor& x) { return weighted_sum(layer_norm(a, x, bias)); }, gain, 1e-5) < tol);
        CHECK(grad_check([&](const Tensor& x) { return weighted_sum(layer_norm(a, gain, x)); }, bias, 1e-5) < tol);
        CHECK(grad_check([&](const Tensor& x) { return weighted_sum(gelu(x)); }, a, 1e-5) < tol);
        CHECK(grad_check([&](const Tensor& x) { return weighted_sum(relu(x)); }, a, 1e-6) < tol);
        CHECK(grad_check([&](const Tensor& x) { return weighted_sum(sigmoid(x)); }, a, 1e-5) < tol);
        CHECK(grad_check([&](const Tensor& x) { return weighted_sum(exp(x)); }, a, 1e-5) < tol);
        CHECK(grad_check([&](const Tensor& x) { return weighted_sum(log(x)); }, positive, 1e-5) < tol);
        CHECK(grad_check([&](const Tensor& x) { return mean_all(mul(x, x)); }, a, 1e-5) < tol);
        CHECK(grad_check([&](const Tensor& x) { return sum_all(mul(x, x)); }, a, 1e-5) < tol);
        CHECK(grad_check([&](const Tensor& x) { return weighted_sum(l2_normalize_rows(x)); }, a, 1e-5) < tol);
        CHECK(grad_check([&](const Tensor& x) { return weighted_sum(concat_last_dim({x, same, x})); }, a, 1e-5) < tol);
        CHECK(grad_check([&](const Tensor& x) { return weighted_sum(slice(x, Window{1, 3, 1, 4})); }, a, 1e-5) < tol);
    }
}

TEST_CASE("softmax rows sum to one and Jacobian rows sum to zero") {
    std::mt19937_64 rng(5);
    const Tensor point = random_tensor(4, 6, rng, -5.0, 5.0);
    const Tensor y = softmax_rows(point);
    for (std::size_t r = 0; r < 4; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < 6; ++c) s += y.at(r, c);
        CHECK(std::abs(s - 1.0) <= 1e-12);
    }
    Tape tape;
    TapeScope scope(&tape);
    const Tensor x = tape.watch(point);
    const Tensor out = softmax_rows(x);
    for (std::size_t i = 0; i < out.size(); ++i) {
        Tensor seed(out.shape());
        seed[i] = 1.0;
        const Tensor g = tape.backprop(out, seed).of(x);
        const std::size_t r = i / 6;
        double s = 0.0;
        for (std::size_t c = 0; c < 6; ++c) s += g.at(r, c);
        CHECK(std::abs(s) <= 1e-10);
    }
}

TEST_CASE("l2_normalize_rows gives unit rows") {
    std::mt19937_64 rng(8);
    const Tensor y = l2_normalize_rows(random_tensor(5, 7, rng));
    for (std::size_t r = 0; r < 5; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < 7; ++c) s += y.at(r, c) * y.at(r, c);
        CHECK(std::abs(std::sqrt(s) - 1.0) <= 1e-12);
    }
}

TEST_CASE("primitive errors") {
    CHECK_THROWS_AS(matmul(Tensor({2, 3}), Tensor({2, 3})), ShapeError);
    CHECK_THROWS_AS(add(Tensor({2, 3}), Tensor({3, 2})), ShapeError);
    CHECK_THROWS_AS(l2_normalize_rows(Tensor::matrix(2, 2, {1.0, 0.0, 0.0, 0.0})), DomainError);
    CHECK_THROWS_AS(log(Tensor::row({1.0, 0.0})), DomainError);
    CHECK_THROWS_AS(log(Tensor::row({-1.0})), DomainError);
    CHECK_THROWS_AS(slice(Tensor({2, 2}), Window{0, 3, 0, 1}), ShapeError);
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1.0}), ShapeError);

    Tape tape;
    TapeScope scope(&tape);
    const Tensor x = tape.watch(Tensor::row({1.0, 2.0}));
    CHECK_THROWS_AS(tape.backprop(exp(x)), ShapeError);
    Tape other;
    CHECK_THROWS_AS(other.backprop(sum_all(x)), ShapeError);
    CHECK_THROWS_AS(tape.backprop(Tensor::scalar(1.0)), ShapeError);
}

TEST_CASE("apply_primitive dispatches by kind") {
    const std::vector<Tensor> in{Tensor({2, 3}, 1.0), Tensor({3, 2}, 1.0)};
    CHECK(apply_primitive(Primitive::matmul, in) == matmul(in[0], in[1]));
    PrimitiveAttrs attrs;
    attrs.factor = 3.0;
    CHECK(apply_primitive(Primitive::scale, std::span(in).first(1), attrs) == Tensor({2, 3}, 3.0));
    CHECK_THROWS_AS(apply_primitive(Primitive::exp, in), ShapeError);
}

TEST_CASE("tape replay is deterministic") {
    auto run = [] {
        std::mt19937_64 rng(99);
        const Tensor w = random_tensor(6, 5, rng);
        const Tensor in = random_tensor(4, 6, rng);
        Tape tape;
        TapeScope scope(&tape);
        const Tensor wt = tape.watch(w);
        const Tensor h = gelu(matmul(in, wt));
        const Tensor y = weighted_sum(l2_normalize_rows(softmax_rows(h)));
        return std::pair{y.item(), tape.backprop(y).of(wt)};
    };
    const auto first = run();
    const auto second = run();
    CHECK(first.first == second.first);
    CHECK(first.second == second.second);
}

TEST_CASE("no tape means no recording") {
    Tape tape;
    const Tensor x = tape.watch(Tensor::row({1.0}));
    const Tensor y = exp(x);
    CHECK_FALSE(y.tracked());
    CHECK(tape.size() == 1);
}
