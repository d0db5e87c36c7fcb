#include "advdiff/kernels.hpp"

#include <algorithm>
#include <cassert>
#include <cstdint>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace advdiff::kernels {

namespace {

constexpr std::size_t kRowBlock = 4;
constexpr std::int64_t kRowBlockI = static_cast<std::int64_t>(kRowBlock);
constexpr std::size_t kColBlock = 512;

void check_sizes(GemmDims d, std::size_t a_size, std::size_t b_size, std::size_t c_size) {
  assert(a_size == d.m * d.k);
  assert(b_size == d.k * d.n);
  assert(c_size == d.m * d.n);
  (void)d;
  (void)a_size;
  (void)b_size;
  (void)c_size;
}

}  // namespace

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void gemm_nn(GemmDims d, std::span<const double> a, std::span<const double> b,
             std::span<double> c) {
  check_sizes(d, a.size(), b.size(), c.size());
  const auto m = static_cast<std::int64_t>(d.m);
  const std::size_t n = d.n;
  const std::size_t k = d.k;
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();

  // Row blocks of 4 reuse every loaded row of B four times; column blocks
  // keep the four C row segments resident in L1/L2.
#pragma omp parallel for schedule(static)
  for (std::int64_t ib = 0; ib < (m + kRowBlockI - 1) / kRowBlockI; ++ib) {
    const std::size_t i0 = static_cast<std::size_t>(ib) * kRowBlock;
    const std::size_t rows = std::min(kRowBlock, d.m - i0);
    for (std::size_t j0 = 0; j0 < n; j0 += kColBlock) {
      const std::size_t jn = std::min(kColBlock, n - j0);
      for (std::size_t r = 0; r < rows; ++r) {
        std::fill_n(pc + (i0 + r) * n + j0, jn, 0.0);
      }
      if (rows == kRowBlock) {
        double* c0 = pc + (i0 + 0) * n + j0;
        double* c1 = pc + (i0 + 1) * n + j0;
        double* c2 = pc + (i0 + 2) * n + j0;
        double* c3 = pc + (i0 + 3) * n + j0;
        for (std::size_t p = 0; p < k; ++p) {
          const double a0 = pa[(i0 + 0) * k + p];
          const double a1 = pa[(i0 + 1) * k + p];
          const double a2 = pa[(i0 + 2) * k + p];
          const double a3 = pa[(i0 + 3) * k + p];
          const double* brow = pb + p * n + j0;
          for (std::size_t j = 0; j < jn; ++j) {
            const double bv = brow[j];
            c0[j] += a0 * bv;
            c1[j] += a1 * bv;
            c2[j] += a2 * bv;
            c3[j] += a3 * bv;
          }
        }
      } else {
        for (std::size_t r = 0; r < rows; ++r) {
          double* crow = pc + (i0 + r) * n + j0;
          for (std::size_t p = 0; p < k; ++p) {
            const double av = pa[(i0 + r) * k + p];
            const double* brow = pb + p * n + j0;
            for (std::size_t j = 0; j < jn; ++j) crow[j] += av * brow[j];
          }
        }
      }
    }
  }
}

void gemm_nt(GemmDims d, std::span<const double> a, std::span<const double> b,
             std::span<double> c) {
  check_sizes(d, a.size(), b.size(), c.size());
  // Same summation order as the dot-product form, but vectorizes.
  std::vector<double> bt(d.k * d.n);
  for (std::size_t j = 0; j < d.n; ++j)
    for (std::size_t p = 0; p < d.k; ++p) bt[p * d.n + j] = b[j * d.k + p];
  gemm_nn(d, a, bt, c);
}

void gemm_tn(GemmDims d, std::span<const double> a, std::span<const double> b,
             std::span<double> c) {
  check_sizes(d, a.size(), b.size(), c.size());
  const auto m = static_cast<std::int64_t>(d.m);
  const std::size_t n = d.n;
  const std::size_t k = d.k;
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();

#pragma omp parallel for schedule(static)
  for (std::int64_t ib = 0; ib < (m + kRowBlockI - 1) / kRowBlockI; ++ib) {
    const std::size_t i0 = static_cast<std::size_t>(ib) * kRowBlock;
    const std::size_t rows = std::min(kRowBlock, d.m - i0);
    for (std::size_t j0 = 0; j0 < n; j0 += kColBlock) {
      const std::size_t jn = std::min(kColBlock, n - j0);
      for (std::size_t r = 0; r < rows; ++r) std::fill_n(pc + (i0 + r) * n + j0, jn, 0.0);
      if (rows == kRowBlock) {
        double* c0 = pc + (i0 + 0) * n + j0;
        double* c1 = pc + (i0 + 1) * n + j0;
        double* c2 = pc + (i0 + 2) * n + j0;
        double* c3 = pc + (i0 + 3) * n + j0;
        for (std::size_t p = 0; p < k; ++p) {
          const double* acol = pa + p * d.m + i0;
          const double a0 = acol[0], a1 = acol[1], a2 = acol[2], a3 = acol[3];
          const double* brow = pb + p * n + j0;
          for (std::size_t j = 0; j < jn; ++j) {
            const double bv = brow[j];
            c0[j] += a0 * bv;
            c1[j] += a1 * bv;
            c2[j] += a2 * bv;
            c3[j] += a3 * bv;
          }
        }
      } else {
        for (std::size_t r = 0; r < rows; ++r) {
          double* crow = pc + (i0 + r) * n + j0;
          for (std::size_t p = 0; p < k; ++p) {
            const double av = pa[p * d.m + i0 + r];
            const double* brow = pb + p * n + j0;
            for (std::size_t j = 0; j < jn; ++j) crow[j] += av * brow[j];
          }
        }
      }
    }
  }
}

void column_sums(std::size_t rows, std::size_t cols, std::span<const double> a,
                 std::span<double> out) {
  assert(a.size() == rows * cols && out.size() == cols);
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* row = a.data() + i * cols;
    for (std::size_t j = 0; j < cols; ++j) out[j] += row[j];
  }
}

namespace reference {

void gemm_nn(GemmDims d, std::span<const double> a, std::span<const double> b,
             std::span<double> c) {
  check_sizes(d, a.size(), b.size(), c.size());
  for (std::size_t i = 0; i < d.m; ++i) {
    for (std::size_t j = 0; j < d.n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < d.k; ++p) s += a[i * d.k + p] * b[p * d.n + j];
      c[i * d.n + j] = s;
    }
  }
}

void gemm_nt(GemmDims d, std::span<const double> a, std::span<const double> b,
             std::span<double> c) {
  check_sizes(d, a.size(), b.size(), c.size());
  for (std::size_t i = 0; i < d.m; ++i) {
    for (std::size_t j = 0; j < d.n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < d.k; ++p) s += a[i * d.k + p] * b[j * d.k + p];
      c[i * d.n + j] = s;
    }
  }
}

void gemm_tn(GemmDims d, std::span<const double> a, std::span<const double> b,
             std::span<double> c) {
  check_sizes(d, a.size(), b.size(), c.size());
  for (std::size_t i = 0; i < d.m; ++i) {
    for (std::size_t j = 0; j < d.n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < d.k; ++p) s += a[p * d.m + i] * b[p * d.n + j];
      c[i * d.n + j] = s;
    }
  }
}

void column_sums(std::size_t rows, std::size_t cols, std::span<const double> a,
                 std::span<double> out) {
  for (std::size_t j = 0; j < cols; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < rows; ++i) s += a[i * cols + j];
    out[j] = s;
  }
}

}  // namespace reference

}  // namespace advdiff::kernels
