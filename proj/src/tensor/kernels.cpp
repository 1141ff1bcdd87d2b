#include "kernels.hpp"

#include <algorithm>

namespace neuromatch::kernels {

namespace {

// Four output rows share each load of a B row. Every output element still
// sums over p in ascending order, so results match the plain loop exactly.
template <class ARow>
void gemm_rows(ARow a_at, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
        double* __restrict c0 = c + i * n;
        double* __restrict c1 = c0 + n;
        double* __restrict c2 = c1 + n;
        double* __restrict c3 = c2 + n;
        for (std::size_t p = 0; p < k; ++p) {
            const double x0 = a_at(i, p), x1 = a_at(i + 1, p), x2 = a_at(i + 2, p), x3 = a_at(i + 3, p);
            const double* __restrict brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                const double bv = brow[j];
                c0[j] += x0 * bv;
                c1[j] += x1 * bv;
                c2[j] += x2 * bv;
                c3[j] += x3 * bv;
            }
        }
    }
    for (; i < m; ++i) {
        double* __restrict crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a_at(i, p);
            const double* __restrict brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace

void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, 0.0);
    gemm_rows([a, k](std::size_t i, std::size_t p) { return a[i * k + p]; }, b, c, m, k, n);
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, 0.0);
    gemm_rows([a, m](std::size_t i, std::size_t p) { return a[p * m + i]; }, b, c, m, k, n);
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate) {
    std::vector<double> bt(k * n);
    transpose(b, bt.data(), n, k);
    gemm_nn(a, bt.data(), c, m, k, n, accumulate);
}

void transpose(const double* src, double* dst, std::size_t rows, std::size_t cols) {
    constexpr std::size_t block = 32;
    for (std::size_t r0 = 0; r0 < rows; r0 += block) {
        const std::size_t r1 = std::min(rows, r0 + block);
        for (std::size_t c0 = 0; c0 < cols; c0 += block) {
            const std::size_t c1 = std::min(cols, c0 + block);
            for (std::size_t r = r0; r < r1; ++r)
                for (std::size_t c = c0; c < c1; ++c) dst[c * rows + r] = src[r * cols + c];
        }
    }
}

}  // namespace neuromatch::kernels
