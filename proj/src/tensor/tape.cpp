#include <atomic>
#include <cmath>

#include "kernels.hpp"
#include "neuromatch/tensor.hpp"

namespace neuromatch {

struct Tape::Node {
    bool leaf = false;
    Primitive kind = Primitive::add;
    std::vector<NodeId> inputs;  // -1 marks an untracked (constant) input
    std::vector<Shape> input_shapes;
    std::vector<Tensor> saved;
    PrimitiveAttrs attrs;
    Shape shape;
};

namespace {

thread_local Tape* active_tape = nullptr;
std::atomic<std::uint64_t> next_tape_id{1};

void accumulate(std::vector<Tensor>& grads, NodeId id, Tensor g) {
    if (id < 0) return;
    auto& slot = grads[static_cast<std::size_t>(id)];
    if (slot.empty()) {
        slot = std::move(g);
        return;
    }
    auto dst = slot.values();
    auto src = g.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// Sums g (shape of the broadcast result) down to `target`.
Tensor reduce_to(const Tensor& g, const Shape& target) {
    if (g.shape() == target) return g.detach();
    const std::size_t rows = g.shape()[0], cols = g.shape()[1];
    Tensor out(target);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
            const double v = g[r * cols + c];
            if (target[0] == 1 && target[1] == 1)
                out[0] += v;
            else if (target[0] == 1)
                out[c] += v;
            else
                out[r] += v;
        }
    return out;
}

// Broadcast operand b read at output position (r, c).
inline double broadcast_at(const Tensor& b, std::size_t r, std::size_t c, std::size_t cols) {
    const auto& s = b.shape();
    if (s[0] == 1 && s[1] == 1) return b[0];
    if (s[0] == 1) return b[c];
    if (s[1] == 1 && cols != 1) return b[r];
    return b[r * cols + c];
}

}  // namespace

Tape::Tape() : id_(next_tape_id.fetch_add(1)) {}
Tape::~Tape() {
    if (active_tape == this) active_tape = nullptr;
}

Tape* Tape::active() noexcept { return active_tape; }

TapeScope::TapeScope(Tape* tape) noexcept : previous_(active_tape) { active_tape = tape; }
TapeScope::~TapeScope() { active_tape = previous_; }

std::size_t Tape::size() const noexcept { return nodes_.size(); }

Tensor Tape::watch(Tensor value) {
    Node node;
    node.leaf = true;
    node.shape = value.shape();
    value.node_ = static_cast<NodeId>(nodes_.size());
    value.tape_id_ = id_;
    nodes_.push_back(std::move(node));
    return value;
}

void Tape::record(Tensor& out, Primitive kind, std::span<const Tensor* const> inputs, std::vector<Tensor> saved,
                  const PrimitiveAttrs& attrs) {
    Node node;
    node.kind = kind;
    node.inputs.reserve(inputs.size());
    node.input_shapes.reserve(inputs.size());
    for (const Tensor* t : inputs) {
        node.inputs.push_back(owns(*t) ? t->node() : -1);
        node.input_shapes.push_back(t->shape());
    }
    node.saved = std::move(saved);
    node.attrs = attrs;
    node.shape = out.shape();
    out.node_ = static_cast<NodeId>(nodes_.size());
    out.tape_id_ = id_;
    nodes_.push_back(std::move(node));
}

Gradients Tape::backprop(const Tensor& root) const {
    if (root.size() != 1) throw ShapeError("backprop: root must be scalar, got " + shape_string(root.shape()));
    return backprop(root, Tensor(root.shape(), 1.0));
}

Gradients Tape::backprop(const Tensor& root, const Tensor& seed) const {
    if (!owns(root)) throw ShapeError("backprop: root is not recorded on this tape");
    if (seed.shape() != root.shape()) throw ShapeError("backprop: seed shape differs from root");
    std::vector<Tensor> grads(nodes_.size());
    grads[static_cast<std::size_t>(root.node())] = seed.detach();

    for (NodeId id = root.node(); id >= 0; --id) {
        const Node& node = nodes_[static_cast<std::size_t>(id)];
        if (node.leaf) continue;
        if (grads[static_cast<std::size_t>(id)].empty()) continue;
        const Tensor g = grads[static_cast<std::size_t>(id)].detach();
        const auto& in = node.inputs;
        const auto& sv = node.saved;
        auto wants = [&](std::size_t i) { return in[i] >= 0; };

        switch (node.kind) {
            case Primitive::matmul: {
                const Tensor& a = sv[0];
                const Tensor& b = sv[1];
                const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
                if (wants(0)) {
                    Tensor da({m, k});
                    kernels::gemm_nt(g.values().data(), b.values().data(), da.values().data(), m, n, k);
                    accumulate(grads, in[0], std::move(da));
                }
                if (wants(1)) {
                    Tensor db({k, n});
                    kernels::gemm_tn(a.values().data(), g.values().data(), db.values().data(), k, m, n);
                    accumulate(grads, in[1], std::move(db));
                }
                break;
            }
            case Primitive::add: {
                if (wants(0)) accumulate(grads, in[0], g.detach());
                if (wants(1)) accumulate(grads, in[1], reduce_to(g, node.input_shapes[1]));
                break;
            }
            case Primitive::mul: {
                const Tensor& a = sv[0];
                const Tensor& b = sv[1];
                const std::size_t rows = g.shape()[0], cols = g.shape()[1];
                if (wants(0)) {
                    Tensor da(g.shape());
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < cols; ++c)
                            da[r * cols + c] = g[r * cols + c] * broadcast_at(b, r, c, cols);
                    accumulate(grads, in[0], std::move(da));
                }
                if (wants(1)) {
                    Tensor ga(g.shape());
                    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = g[i] * a[i];
                    accumulate(grads, in[1], reduce_to(ga, node.input_shapes[1]));
                }
                break;
            }
            case Primitive::scale: {
                Tensor da(g.shape());
                for (std::size_t i = 0; i < da.size(); ++i) da[i] = node.attrs.factor * g[i];
                accumulate(grads, in[0], std::move(da));
                break;
            }
            case Primitive::transpose2d: {
                Tensor da(node.input_shapes[0]);
                kernels::transpose(g.values().data(), da.values().data(), g.shape()[0], g.shape()[1]);
                accumulate(grads, in[0], std::move(da));
                break;
            }
            case Primitive::softmax_rows: {
                const Tensor& y = sv[0];
                const std::size_t rows = y.rows(), cols = y.cols();
                Tensor da(y.shape());
                for (std::size_t r = 0; r < rows; ++r) {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
                    for (std::size_t c = 0; c < cols; ++c)
                        da[r * cols + c] = y[r * cols + c] * (g[r * cols + c] - dot);
                }
                accumulate(grads, in[0], std::move(da));
                break;
            }
            case Primitive::layer_norm: {
                const Tensor& xhat = sv[0];
                const Tensor& inv_std = sv[1];
                const Tensor& gain = sv[2];
                const std::size_t rows = xhat.rows(), cols = xhat.cols();
                if (wants(1)) {
                    Tensor dgain({1, cols});
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < cols; ++c) dgain[c] += g[r * cols + c] * xhat[r * cols + c];
                    accumulate(grads, in[1], std::move(dgain));
                }
                if (wants(2)) accumulate(grads, in[2], reduce_to(g, {1, cols}));
                if (wants(0)) {
                    Tensor dx(xhat.shape());
                    const double inv_n = 1.0 / static_cast<double>(cols);
                    for (std::size_t r = 0; r < rows; ++r) {
                        double mean_d = 0.0, mean_dx = 0.0;
                        for (std::size_t c = 0; c < cols; ++c) {
                            const double d = g[r * cols + c] * gain[c];
                            mean_d += d;
                            mean_dx += d * xhat[r * cols + c];
                        }
                        mean_d *= inv_n;
                        mean_dx *= inv_n;
                        for (std::size_t c = 0; c < cols; ++c) {
                            const double d = g[r * cols + c] * gain[c];
                            dx[r * cols + c] = inv_std[r] * (d - mean_d - xhat[r * cols + c] * mean_dx);
                        }
                    }
                    accumulate(grads, in[0], std::move(dx));
                }
                break;
            }
            case Primitive::gelu: {
                constexpr double c0 = 0.7978845608028654, k = 0.044715;
                const Tensor& x = sv[0];
                Tensor da(x.shape());
                for (std::size_t i = 0; i < x.size(); ++i) {
                    const double v = x[i];
                    const double t = std::tanh(c0 * (v + k * v * v * v));
                    const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c0 * (1.0 + 3.0 * k * v * v);
                    da[i] = g[i] * d;
                }
                accumulate(grads, in[0], std::move(da));
                break;
            }
            case Primitive::relu: {
                const Tensor& x = sv[0];
                Tensor da(x.shape());
                for (std::size_t i = 0; i < x.size(); ++i) da[i] = x[i] > 0.0 ? g[i] : 0.0;
                accumulate(grads, in[0], std::move(da));
                break;
            }
            case Primitive::sigmoid: {
                const Tensor& y = sv[0];
                Tensor da(y.shape());
                for (std::size_t i = 0; i < y.size(); ++i) da[i] = g[i] * y[i] * (1.0 - y[i]);
                accumulate(grads, in[0], std::move(da));
                break;
            }
            case Primitive::exp: {
                const Tensor& y = sv[0];
                Tensor da(y.shape());
                for (std::size_t i = 0; i < y.size(); ++i) da[i] = g[i] * y[i];
                accumulate(grads, in[0], std::move(da));
                break;
            }
            case Primitive::log: {
                const Tensor& x = sv[0];
                Tensor da(x.shape());
                for (std::size_t i = 0; i < x.size(); ++i) da[i] = g[i] / x[i];
                accumulate(grads, in[0], std::move(da));
                break;
            }
            case Primitive::mean_all: {
                const double n = static_cast<double>(shape_size(node.input_shapes[0]));
                accumulate(grads, in[0], Tensor(node.input_shapes[0], g[0] / n));
                break;
            }
            case Primitive::sum_all: {
                accumulate(grads, in[0], Tensor(node.input_shapes[0], g[0]));
                break;
            }
            case Primitive::l2_normalize_rows: {
                const Tensor& y = sv[0];
                const Tensor& norms = sv[1];
                const std::size_t rows = y.rows(), cols = y.cols();
                Tensor da(y.shape());
                for (std::size_t r = 0; r < rows; ++r) {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) dot += y[r * cols + c] * g[r * cols + c];
                    for (std::size_t c = 0; c < cols; ++c)
                        da[r * cols + c] = (g[r * cols + c] - y[r * cols + c] * dot) / norms[r];
                }
                accumulate(grads, in[0], std::move(da));
                break;
            }
            case Primitive::concat_last_dim: {
                const std::size_t rows = g.shape()[0], cols = g.shape()[1];
                std::size_t offset = 0;
                for (std::size_t i = 0; i < in.size(); ++i) {
                    const std::size_t pc = node.input_shapes[i][1];
                    if (wants(i)) {
                        Tensor part({rows, pc});
                        for (std::size_t r = 0; r < rows; ++r)
                            std::copy_n(g.values().data() + r * cols + offset, pc, part.values().data() + r * pc);
                        accumulate(grads, in[i], std::move(part));
                    }
                    offset += pc;
                }
                break;
            }
            case Primitive::slice: {
                const Window& w = node.attrs.window;
                Tensor da(node.input_shapes[0]);
                const std::size_t src_cols = node.input_shapes[0][1];
                const std::size_t rows = g.shape()[0], cols = g.shape()[1];
                for (std::size_t r = 0; r < rows; ++r)
                    std::copy_n(g.values().data() + r * cols, cols,
                                da.values().data() + (w.row_begin + r) * src_cols + w.col_begin);
                accumulate(grads, in[0], std::move(da));
                break;
            }
        }
    }

    for (std::size_t i = 0; i < grads.size(); ++i)
        if (grads[i].empty()) grads[i] = Tensor(nodes_[i].shape);
    return Gradients(id_, std::move(grads));
}

const Tensor& Gradients::of(const Tensor& t) const {
    if (!t.tracked() || t.tape_id() != tape_id_) throw ShapeError("gradient requested for a tensor not on this tape");
    return grads_.at(static_cast<std::size_t>(t.node()));
}

namespace {

double central_difference(const ScalarFunction& f, Tensor& probe, std::size_t i, double eps) {
    const double original = probe[i];
    probe[i] = original + eps;
    const Tensor up = f(probe);
    probe[i] = original - eps;
    const Tensor down = f(probe);
    probe[i] = original;
    if (up.size() != 1 || down.size() != 1) throw ShapeError("grad_check: function is not scalar-valued");
    return (up.item() - down.item()) / (2.0 * eps);
}

}  // namespace

double grad_check(const ScalarFunction& f, const Tensor& point, double eps, std::span<const std::size_t> coordinates) {
    if (!(eps > 0.0) || eps > 1e-2) throw ConfigError("grad_check: eps must lie in (0, 1e-2]");
    Tensor analytic;
    {
        Tape tape;
        TapeScope scope(&tape);
        const Tensor x = tape.watch(point.detach());
        const Tensor y = f(x);
        if (y.size() != 1) throw ShapeError("grad_check: function is not scalar-valued");
        if (tape.owns(y))
            analytic = tape.backprop(y).of(x);
        else
            analytic = Tensor(point.shape());
    }
    TapeScope no_tape(nullptr);
    Tensor probe = point.detach();
    double worst = 0.0;
    for (std::size_t i : coordinates) {
        const double numeric = central_difference(f, probe, i, eps);
        const double a = analytic[i];
        worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
    }
    return worst;
}

double grad_check(const ScalarFunction& f, const Tensor& point, double eps) {
    std::vector<std::size_t> all(point.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return grad_check(f, point, eps, all);
}

}  // namespace neuromatch
