#include <algorithm>
#include <cmath>

#include "neuromatch/evaluation.hpp"

namespace neuromatch {

const char* classical_name(ClassicalKind k) {
    switch (k) {
        case ClassicalKind::mse: return "mse";
        case ClassicalKind::nmi: return "nmi";
        case ClassicalKind::ssim: return "ssim";
        case ClassicalKind::pearson: return "pearson";
        case ClassicalKind::cosine: return "cosine";
    }
    return "?";
}

ClassicalKind parse_classical(const std::string& name) {
    for (ClassicalKind k : classical_kinds())
        if (name == classical_name(k)) return k;
    throw ConfigError("unknown classical metric \"" + name + "\"");
}

const std::vector<ClassicalKind>& classical_kinds() {
    static const std::vector<ClassicalKind> kinds{ClassicalKind::mse, ClassicalKind::nmi, ClassicalKind::ssim,
                                                  ClassicalKind::pearson, ClassicalKind::cosine};
    return kinds;
}

namespace {

double mse(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s / static_cast<double>(a.size());
}

bool is_constant(const Tensor& t) {
    const auto [lo, hi] = std::minmax_element(t.values().begin(), t.values().end());
    return *lo == *hi;
}

double pearson(const Tensor& a, const Tensor& b) {
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa == 0.0 || sbb == 0.0 || is_constant(a) || is_constant(b))
        throw DomainError("pearson undefined for a constant image");
    return sab / (std::sqrt(saa) * std::sqrt(sbb));
}

double cosine(const Tensor& a, const Tensor& b) {
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += a[i] * b[i];
        saa += a[i] * a[i];
        sbb += b[i] * b[i];
    }
    if (saa == 0.0 || sbb == 0.0) throw DomainError("cosine undefined for an all-zero image");
    return sab / (std::sqrt(saa) * std::sqrt(sbb));
}

std::size_t bin_of(double v) {
    const auto b = static_cast<std::ptrdiff_t>(std::floor(std::clamp(v, 0.0, 1.0) * static_cast<double>(nmi_bins)));
    return static_cast<std::size_t>(std::min<std::ptrdiff_t>(b, nmi_bins - 1));
}

double entropy(const std::vector<double>& counts, double total) {
    double h = 0.0;
    for (double c : counts)
        if (c > 0.0) {
            const double p = c / total;
            h -= p * std::log(p);
        }
    return h;
}

double nmi(const Tensor& a, const Tensor& b) {
    std::vector<double> ha(nmi_bins, 0.0), hb(nmi_bins, 0.0), joint(nmi_bins * nmi_bins, 0.0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        const std::size_t x = bin_of(a[i]), y = bin_of(b[i]);
        ha[x] += 1.0;
        hb[y] += 1.0;
        joint[x * nmi_bins + y] += 1.0;
    }
    const double n = static_cast<double>(a.size());
    const double ea = entropy(ha, n), eb = entropy(hb, n), eab = entropy(joint, n);
    // Two constant images are deterministic functions of each other.
    if (ea + eb == 0.0) return 1.0;
    return 2.0 * (ea + eb - eab) / (ea + eb);
}

std::vector<double> gaussian_window() {
    std::vector<double> w(ssim_window);
    const double c = static_cast<double>(ssim_window / 2);
    double s = 0.0;
    for (std::size_t i = 0; i < ssim_window; ++i) {
        const double d = static_cast<double>(i) - c;
        w[i] = std::exp(-d * d / (2.0 * ssim_sigma * ssim_sigma));
        s += w[i];
    }
    for (double& v : w) v /= s;
    return w;
}

// Separable "valid" filtering of a rows x cols field.
std::vector<double> filter_valid(const std::vector<double>& field, std::size_t rows, std::size_t cols,
                                 const std::vector<double>& w) {
    const std::size_t k = w.size(), oc = cols - k + 1, orows = rows - k + 1;
    std::vector<double> horizontal(rows * oc, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < oc; ++c) {
            double s = 0.0;
            for (std::size_t t = 0; t < k; ++t) s += w[t] * field[r * cols + c + t];
            horizontal[r * oc + c] = s;
        }
    std::vector<double> out(orows * oc, 0.0);
    for (std::size_t r = 0; r < orows; ++r)
        for (std::size_t c = 0; c < oc; ++c) {
            double s = 0.0;
            for (std::size_t t = 0; t < k; ++t) s += w[t] * horizontal[(r + t) * oc + c];
            out[r * oc + c] = s;
        }
    return out;
}

double ssim(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || a.rows() < ssim_window || a.cols() < ssim_window)
        throw ShapeError("ssim needs images of at least " + std::to_string(ssim_window) + " x " +
                         std::to_string(ssim_window));
    constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    const std::size_t rows = a.rows(), cols = a.cols();
    const auto w = gaussian_window();
    std::vector<double> va(a.values().begin(), a.values().end()), vb(b.values().begin(), b.values().end());
    std::vector<double> aa(va.size()), bb(va.size()), ab(va.size());
    for (std::size_t i = 0; i < va.size(); ++i) {
        aa[i] = va[i] * va[i];
        bb[i] = vb[i] * vb[i];
        ab[i] = va[i] * vb[i];
    }
    const auto mu_a = filter_valid(va, rows, cols, w), mu_b = filter_valid(vb, rows, cols, w);
    const auto e_aa = filter_valid(aa, rows, cols, w), e_bb = filter_valid(bb, rows, cols, w);
    const auto e_ab = filter_valid(ab, rows, cols, w);
    double total = 0.0;
    for (std::size_t i = 0; i < mu_a.size(); ++i) {
        const double mab = mu_a[i] * mu_b[i];
        const double var_a = e_aa[i] - mu_a[i] * mu_a[i];
        const double var_b = e_bb[i] - mu_b[i] * mu_b[i];
        const double cov = e_ab[i] - mab;
        total += ((2.0 * mab + c1) * (2.0 * cov + c2)) /
                 ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (var_a + var_b + c2));
    }
    return total / static_cast<double>(mu_a.size());
}

}  // namespace

double classical_similarity(const Tensor& a, const Tensor& b, ClassicalKind kind) {
    if (a.shape() != b.shape() || a.empty())
        throw ShapeError("classical_similarity: shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
    switch (kind) {
        case ClassicalKind::mse: return mse(a, b);
        case ClassicalKind::nmi: return nmi(a, b);
        case ClassicalKind::ssim: return ssim(a, b);
        case ClassicalKind::pearson: return pearson(a, b);
        case ClassicalKind::cosine: return cosine(a, b);
    }
    throw ConfigError("unknown classical metric");
}

double classical_score(const Tensor& a, const Tensor& b, ClassicalKind kind) {
    const double v = classical_similarity(a, b, kind);
    return kind == ClassicalKind::mse ? -v : v;
}

}  // namespace neuromatch
