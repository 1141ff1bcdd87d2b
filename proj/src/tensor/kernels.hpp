#pragma once

#include <cstddef>
#include <vector>

namespace neuromatch::kernels {

// C (m x n) = A (m x k) * B (k x n), row-major. C is overwritten unless accumulate.
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate = false);

// C (m x n) = A^T * B with A stored k x m.
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate = false);

// C (m x n) = A * B^T with B stored n x k.
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate = false);

void transpose(const double* src, double* dst, std::size_t rows, std::size_t cols);

}  // namespace neuromatch::kernels
