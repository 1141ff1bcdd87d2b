#pragma once

// Dense float64 tensors with a reverse-mode autodiff tape.
//
// Every primitive is a free function. When a Tape is active on the calling
// thread (see TapeScope) and at least one input is tracked on that tape, the
// primitive appends a node holding what its backward pass needs. Without an
// active tape the same functions are pure value computations.
//
// Most primitives operate on rank-2 tensors; vectors are 1 x n rows and
// scalars are 1 x 1.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "neuromatch/errors.hpp"

namespace neuromatch {

using Shape = std::vector<std::size_t>;
using NodeId = std::int64_t;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> values);
    explicit Tensor(Shape shape, double fill = 0.0);

    static Tensor scalar(double value);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
    static Tensor row(std::vector<double> values);
    static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const double> values() const noexcept { return data_; }
    std::span<double> values() noexcept { return data_; }
    const std::vector<double>& vector() const noexcept { return data_; }

    double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }

    // Value of a one-element tensor.
    double item() const;

    bool tracked() const noexcept { return node_ >= 0; }
    NodeId node() const noexcept { return node_; }
    std::uint64_t tape_id() const noexcept { return tape_id_; }

    // Same values, no tape node.
    Tensor detach() const;

    bool operator==(const Tensor& other) const noexcept {
        return shape_ == other.shape_ && data_ == other.data_;
    }

private:
    friend class Tape;

    Shape shape_;
    std::vector<double> data_;
    NodeId node_ = -1;
    std::uint64_t tape_id_ = 0;
};

enum class Primitive {
    matmul,
    add,
    mul,
    scale,
    transpose2d,
    softmax_rows,
    layer_norm,
    gelu,
    relu,
    sigmoid,
    exp,
    log,
    mean_all,
    sum_all,
    l2_normalize_rows,
    concat_last_dim,
    slice,
};

const char* primitive_name(Primitive kind);

// Half-open rectangular window [row_begin, row_end) x [col_begin, col_end).
struct Window {
    std::size_t row_begin = 0;
    std::size_t row_end = 0;
    std::size_t col_begin = 0;
    std::size_t col_end = 0;
};

struct PrimitiveAttrs {
    double factor = 1.0;  // scale
    Window window{};      // slice
};

inline constexpr double layer_norm_eps = 1e-5;

// add/mul accept a second operand equal in shape, a 1 x c row, an r x 1
// column, or a 1 x 1 scalar; it is broadcast against the first operand.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor transpose2d(const Tensor& a);
Tensor softmax_rows(const Tensor& a);
// Row-wise (x - mean) / sqrt(var + layer_norm_eps) * gain + bias; gain and bias are 1 x c.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);
// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Tensor gelu(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor sum_all(const Tensor& a);
Tensor l2_normalize_rows(const Tensor& a);
Tensor concat_last_dim(std::span<const Tensor> parts);
Tensor concat_last_dim(std::initializer_list<Tensor> parts);
Tensor slice(const Tensor& a, const Window& window);

Tensor apply_primitive(Primitive kind, std::span<const Tensor> inputs, const PrimitiveAttrs& attrs = {});

// Composites built from the primitives above.
Tensor subtract(const Tensor& a, const Tensor& b);
Tensor row_of(const Tensor& a, std::size_t r);
Tensor mean_rows(const Tensor& a);  // 1 x c column means

class Gradients;

class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Registers a leaf. The returned copy carries the node id.
    Tensor watch(Tensor value);

    std::size_t size() const noexcept;
    std::uint64_t id() const noexcept { return id_; }
    bool owns(const Tensor& t) const noexcept { return t.tracked() && t.tape_id() == id_; }

    // Reverse sweep from a scalar root. Unreachable nodes get zero gradients.
    Gradients backprop(const Tensor& root) const;
    // Same sweep with an explicit seed of the root's shape.
    Gradients backprop(const Tensor& root, const Tensor& seed) const;

    // Tape currently active on this thread, or nullptr.
    static Tape* active() noexcept;

    struct Node;
    void record(Tensor& out, Primitive kind, std::span<const Tensor* const> inputs,
                std::vector<Tensor> saved, const PrimitiveAttrs& attrs);

private:
    friend class TapeScope;

    std::vector<Node> nodes_;
    std::uint64_t id_;
};

// Activates a tape (or, with nullptr, disables recording) for the current
// thread until destruction.
class TapeScope {
public:
    explicit TapeScope(Tape* tape) noexcept;
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

class Gradients {
public:
    Gradients(std::uint64_t tape_id, std::vector<Tensor> grads) : tape_id_(tape_id), grads_(std::move(grads)) {}

    // Gradient with respect to a tensor tracked on the originating tape.
    const Tensor& of(const Tensor& t) const;
    const Tensor& at(NodeId id) const { return grads_.at(static_cast<std::size_t>(id)); }
    std::size_t size() const noexcept { return grads_.size(); }

private:
    std::uint64_t tape_id_;
    std::vector<Tensor> grads_;
};

using ScalarFunction = std::function<Tensor(const Tensor&)>;

// max_i |analytic_i - central_i| / max(1, |analytic_i|) over every coordinate
// (or the listed ones) of `point`.
double grad_check(const ScalarFunction& f, const Tensor& point, double eps);
double grad_check(const ScalarFunction& f, const Tensor& point, double eps, std::span<const std::size_t> coordinates);

}  // namespace neuromatch
