#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "kernels.hpp"
#include "neuromatch/tensor.hpp"

namespace neuromatch {

std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
    for (auto d : shape_)
        if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape_));
    if (shape_size(shape_) != data_.size())
        throw ShapeError("shape " + shape_string(shape_) + " does not match " + std::to_string(data_.size()) +
                         " values");
}

Tensor::Tensor(Shape shape, double fill) : Tensor(shape, std::vector<double>(shape_size(shape), fill)) {}

Tensor Tensor::scalar(double value) { return Tensor({1, 1}, std::vector<double>{value}); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor({rows, cols}, std::move(values));
}

Tensor Tensor::row(std::vector<double> values) {
    const auto n = values.size();
    return Tensor({1, n}, std::move(values));
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(shape_size(shape));
    for (auto& x : v) x = dist(rng);
    return Tensor(std::move(shape), std::move(v));
}

std::size_t Tensor::rows() const {
    if (rank() != 2) throw ShapeError("expected rank-2 tensor, got " + shape_string(shape_));
    return shape_[0];
}

std::size_t Tensor::cols() const {
    if (rank() != 2) throw ShapeError("expected rank-2 tensor, got " + shape_string(shape_));
    return shape_[1];
}

double Tensor::item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
}

Tensor Tensor::detach() const {
    Tensor out;
    out.shape_ = shape_;
    out.data_ = data_;
    return out;
}

const char* primitive_name(Primitive kind) {
    switch (kind) {
        case Primitive::matmul: return "matmul";
        case Primitive::add: return "add";
        case Primitive::mul: return "mul";
        case Primitive::scale: return "scale";
        case Primitive::transpose2d: return "transpose2d";
        case Primitive::softmax_rows: return "softmax_rows";
        case Primitive::layer_norm: return "layer_norm";
        case Primitive::gelu: return "gelu";
        case Primitive::relu: return "relu";
        case Primitive::sigmoid: return "sigmoid";
        case Primitive::exp: return "exp";
        case Primitive::log: return "log";
        case Primitive::mean_all: return "mean_all";
        case Primitive::sum_all: return "sum_all";
        case Primitive::l2_normalize_rows: return "l2_normalize_rows";
        case Primitive::concat_last_dim: return "concat_last_dim";
        case Primitive::slice: return "slice";
    }
    return "unknown";
}

namespace {

template <class SaveFn>
void track(Tensor& out, Primitive kind, std::initializer_list<const Tensor*> inputs, SaveFn&& save,
           const PrimitiveAttrs& attrs = {}) {
    Tape* tape = Tape::active();
    if (tape == nullptr) return;
    const bool any = std::any_of(inputs.begin(), inputs.end(), [&](const Tensor* t) { return tape->owns(*t); });
    if (!any) return;
    tape->record(out, kind, std::span<const Tensor* const>(inputs.begin(), inputs.size()), save(), attrs);
}

std::vector<Tensor> nothing() { return {}; }

void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " + shape_string(t.shape()));
}

enum class Broadcast { same, row, column, scalar };

Broadcast broadcast_mode(const Tensor& a, const Tensor& b, const char* op) {
    require_rank2(a, op);
    require_rank2(b, op);
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa == sb) return Broadcast::same;
    if (sb[0] == 1 && sb[1] == 1) return Broadcast::scalar;
    if (sb[0] == 1 && sb[1] == sa[1]) return Broadcast::row;
    if (sb[1] == 1 && sb[0] == sa[0]) return Broadcast::column;
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_string(sb) + " onto " + shape_string(sa));
}

template <class Fn>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, Fn&& fn) {
    const auto mode = broadcast_mode(a, b, op);
    Tensor out(a.shape());
    const std::size_t rows = a.shape()[0], cols = a.shape()[1];
    auto av = a.values();
    auto bv = b.values();
    auto ov = out.values();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t i = r * cols + c;
            double bval;
            switch (mode) {
                case Broadcast::same: bval = bv[i]; break;
                case Broadcast::row: bval = bv[c]; break;
                case Broadcast::column: bval = bv[r]; break;
                default: bval = bv[0]; break;
            }
            ov[i] = fn(av[i], bval);
        }
    }
    return out;
}

template <class Fn>
Tensor unary(const Tensor& a, Fn&& fn) {
    Tensor out(a.shape());
    auto av = a.values();
    auto ov = out.values();
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = fn(av[i]);
    return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dimensions differ, " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
    Tensor out({a.rows(), b.cols()});
    kernels::gemm_nn(a.values().data(), b.values().data(), out.values().data(), a.rows(), a.cols(), b.cols());
    track(out, Primitive::matmul, {&a, &b}, [&] { return std::vector<Tensor>{a.detach(), b.detach()}; });
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    Tensor out = binary(a, b, "add", [](double x, double y) { return x + y; });
    track(out, Primitive::add, {&a, &b}, nothing);
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    Tensor out = binary(a, b, "mul", [](double x, double y) { return x * y; });
    track(out, Primitive::mul, {&a, &b}, [&] { return std::vector<Tensor>{a.detach(), b.detach()}; });
    return out;
}

Tensor scale(const Tensor& a, double factor) {
    Tensor out = unary(a, [factor](double x) { return factor * x; });
    PrimitiveAttrs attrs;
    attrs.factor = factor;
    track(out, Primitive::scale, {&a}, nothing, attrs);
    return out;
}

Tensor transpose2d(const Tensor& a) {
    require_rank2(a, "transpose2d");
    Tensor out({a.cols(), a.rows()});
    kernels::transpose(a.values().data(), out.values().data(), a.rows(), a.cols());
    track(out, Primitive::transpose2d, {&a}, nothing);
    return out;
}

Tensor softmax_rows(const Tensor& a) {
    require_rank2(a, "softmax_rows");
    Tensor out(a.shape());
    const std::size_t rows = a.rows(), cols = a.cols();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = a.values().data() + r * cols;
        double* y = out.values().data() + r * cols;
        const double mx = *std::max_element(x, x + cols);
        double total = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            y[c] = std::exp(x[c] - mx);
            total += y[c];
        }
        const double inv = 1.0 / total;
        for (std::size_t c = 0; c < cols; ++c) y[c] *= inv;
    }
    track(out, Primitive::softmax_rows, {&a}, [&] { return std::vector<Tensor>{out.detach()}; });
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    require_rank2(x, "layer_norm");
    const std::size_t rows = x.rows(), cols = x.cols();
    const Shape param_shape{1, cols};
    if (gain.shape() != param_shape || bias.shape() != param_shape)
        throw ShapeError("layer_norm: gain/bias must be " + shape_string(param_shape));
    Tensor xhat(x.shape());
    Tensor inv_std({rows, 1});
    Tensor out(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.values().data() + r * cols;
        double mean = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mean += xr[c];
        mean /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mean) * (xr[c] - mean);
        var /= static_cast<double>(cols);
        const double is = 1.0 / std::sqrt(var + layer_norm_eps);
        inv_std[r] = is;
        for (std::size_t c = 0; c < cols; ++c) {
            const double h = (xr[c] - mean) * is;
            xhat[r * cols + c] = h;
            out[r * cols + c] = h * gain[c] + bias[c];
        }
    }
    track(out, Primitive::layer_norm, {&x, &gain, &bias},
          [&] { return std::vector<Tensor>{std::move(xhat), std::move(inv_std), gain.detach()}; });
    return out;
}

namespace {
constexpr double gelu_c = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double gelu_k = 0.044715;
}  // namespace

Tensor gelu(const Tensor& a) {
    Tensor out = unary(a, [](double x) { return 0.5 * x * (1.0 + std::tanh(gelu_c * (x + gelu_k * x * x * x))); });
    track(out, Primitive::gelu, {&a}, [&] { return std::vector<Tensor>{a.detach()}; });
    return out;
}

Tensor relu(const Tensor& a) {
    Tensor out = unary(a, [](double x) { return x > 0.0 ? x : 0.0; });
    track(out, Primitive::relu, {&a}, [&] { return std::vector<Tensor>{a.detach()}; });
    return out;
}

Tensor sigmoid(const Tensor& a) {
    Tensor out = unary(a, [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
    });
    track(out, Primitive::sigmoid, {&a}, [&] { return std::vector<Tensor>{out.detach()}; });
    return out;
}

Tensor exp(const Tensor& a) {
    Tensor out = unary(a, [](double x) { return std::exp(x); });
    track(out, Primitive::exp, {&a}, [&] { return std::vector<Tensor>{out.detach()}; });
    return out;
}

Tensor log(const Tensor& a) {
    for (double x : a.values())
        if (!(x > 0.0)) throw DomainError("log: non-positive input " + std::to_string(x));
    Tensor out = unary(a, [](double x) { return std::log(x); });
    track(out, Primitive::log, {&a}, [&] { return std::vector<Tensor>{a.detach()}; });
    return out;
}

Tensor mean_all(const Tensor& a) {
    double total = 0.0;
    for (double x : a.values()) total += x;
    Tensor out = Tensor::scalar(total / static_cast<double>(a.size()));
    track(out, Primitive::mean_all, {&a}, nothing);
    return out;
}

Tensor sum_all(const Tensor& a) {
    double total = 0.0;
    for (double x : a.values()) total += x;
    Tensor out = Tensor::scalar(total);
    track(out, Primitive::sum_all, {&a}, nothing);
    return out;
}

Tensor l2_normalize_rows(const Tensor& a) {
    require_rank2(a, "l2_normalize_rows");
    const std::size_t rows = a.rows(), cols = a.cols();
    Tensor out(a.shape());
    Tensor norms({rows, 1});
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = a.values().data() + r * cols;
        double ss = 0.0;
        for (std::size_t c = 0; c < cols; ++c) ss += x[c] * x[c];
        const double n = std::sqrt(ss);
        if (!(n > 0.0)) throw DomainError("l2_normalize_rows: row " + std::to_string(r) + " has zero norm");
        norms[r] = n;
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x[c] / n;
    }
    track(out, Primitive::l2_normalize_rows, {&a},
          [&] { return std::vector<Tensor>{out.detach(), std::move(norms)}; });
    return out;
}

Tensor concat_last_dim(std::span<const Tensor> parts) {
    if (parts.empty()) throw ShapeError("concat_last_dim: no inputs");
    require_rank2(parts[0], "concat_last_dim");
    const std::size_t rows = parts[0].rows();
    std::size_t cols = 0;
    for (const auto& p : parts) {
        require_rank2(p, "concat_last_dim");
        if (p.rows() != rows) throw ShapeError("concat_last_dim: row counts differ");
        cols += p.cols();
    }
    Tensor out({rows, cols});
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t pc = p.cols();
        for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(p.values().data() + r * pc, pc, out.values().data() + r * cols + offset);
        offset += pc;
    }
    Tape* tape = Tape::active();
    if (tape != nullptr && std::any_of(parts.begin(), parts.end(), [&](const Tensor& t) { return tape->owns(t); })) {
        std::vector<const Tensor*> ptrs;
        ptrs.reserve(parts.size());
        for (const auto& p : parts) ptrs.push_back(&p);
        tape->record(out, Primitive::concat_last_dim, ptrs, {}, {});
    }
    return out;
}

Tensor concat_last_dim(std::initializer_list<Tensor> parts) {
    return concat_last_dim(std::span<const Tensor>(parts.begin(), parts.size()));
}

Tensor slice(const Tensor& a, const Window& w) {
    require_rank2(a, "slice");
    if (w.row_begin >= w.row_end || w.col_begin >= w.col_end || w.row_end > a.rows() || w.col_end > a.cols())
        throw ShapeError("slice: window outside " + shape_string(a.shape()));
    const std::size_t rows = w.row_end - w.row_begin, cols = w.col_end - w.col_begin;
    Tensor out({rows, cols});
    for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(a.values().data() + (w.row_begin + r) * a.cols() + w.col_begin, cols,
                    out.values().data() + r * cols);
    PrimitiveAttrs attrs;
    attrs.window = w;
    track(out, Primitive::slice, {&a}, nothing, attrs);
    return out;
}

Tensor apply_primitive(Primitive kind, std::span<const Tensor> in, const PrimitiveAttrs& attrs) {
    auto need = [&](std::size_t n) {
        if (in.size() != n)
            throw ShapeError(std::string(primitive_name(kind)) + ": expected " + std::to_string(n) + " inputs, got " +
                             std::to_string(in.size()));
    };
    switch (kind) {
        case Primitive::matmul: need(2); return matmul(in[0], in[1]);
        case Primitive::add: need(2); return add(in[0], in[1]);
        case Primitive::mul: need(2); return mul(in[0], in[1]);
        case Primitive::scale: need(1); return scale(in[0], attrs.factor);
        case Primitive::transpose2d: need(1); return transpose2d(in[0]);
        case Primitive::softmax_rows: need(1); return softmax_rows(in[0]);
        case Primitive::layer_norm: need(3); return layer_norm(in[0], in[1], in[2]);
        case Primitive::gelu: need(1); return gelu(in[0]);
        case Primitive::relu: need(1); return relu(in[0]);
        case Primitive::sigmoid: need(1); return sigmoid(in[0]);
        case Primitive::exp: need(1); return exp(in[0]);
        case Primitive::log: need(1); return log(in[0]);
        case Primitive::mean_all: need(1); return mean_all(in[0]);
        case Primitive::sum_all: need(1); return sum_all(in[0]);
        case Primitive::l2_normalize_rows: need(1); return l2_normalize_rows(in[0]);
        case Primitive::concat_last_dim: return concat_last_dim(in);
        case Primitive::slice: need(1); return slice(in[0], attrs.window);
    }
    throw ShapeError("unknown primitive");
}

Tensor subtract(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor row_of(const Tensor& a, std::size_t r) { return slice(a, Window{r, r + 1, 0, a.cols()}); }

Tensor mean_rows(const Tensor& a) {
    require_rank2(a, "mean_rows");
    const Tensor weights({1, a.rows()}, 1.0 / static_cast<double>(a.rows()));
    return matmul(weights, a);
}

}  // namespace neuromatch
