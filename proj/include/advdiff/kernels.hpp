#pragma once

// Dense row-major GEMM kernels used by the autodiff core.
//
// Two implementations share one signature: `reference::` is the plain
// triple loop kept as a test oracle, the top-level functions are cache
// blocked and OpenMP-parallel over output rows. Each output element is
// accumulated by exactly one thread in ascending-k order, so results do
// not depend on the thread count.

#include <cstddef>
#include <span>

namespace advdiff::kernels {

struct GemmDims {
  std::size_t m;  // rows of C
  std::size_t n;  // cols of C
  std::size_t k;  // contraction length
};

// C[m x n] = A[m x k] * B[k x n]
void gemm_nn(GemmDims d, std::span<const double> a, std::span<const double> b,
             std::span<double> c);
// C[m x n] = A[m x k] * B[n x k]^T
void gemm_nt(GemmDims d, std::span<const double> a, std::span<const double> b,
             std::span<double> c);
// C[m x n] = A[k x m]^T * B[k x n]
void gemm_tn(GemmDims d, std::span<const double> a, std::span<const double> b,
             std::span<double> c);

// Sum over rows: out[j] = sum_i a[i * cols + j]
void column_sums(std::size_t rows, std::size_t cols, std::span<const double> a,
                 std::span<double> out);

int max_threads();

namespace reference {

void gemm_nn(GemmDims d, std::span<const double> a, std::span<const double> b,
             std::span<double> c);
void gemm_nt(GemmDims d, std::span<const double> a, std::span<const double> b,
             std::span<double> c);
void gemm_tn(GemmDims d, std::span<const double> a, std::span<const double> b,
             std::span<double> c);
void column_sums(std::size_t rows, std::size_t cols, std::span<const double> a,
                 std::span<double> out);

}  // namespace reference

}  // namespace advdiff::kernels
