// Parallel kernels against their serial references.
#include <benchmark/benchmark.h>

#include <vector>

#include "advdiff/kernels.hpp"
#include "advdiff/metrics.hpp"
#include "advdiff/rng.hpp"
#include "advdiff/tensor.hpp"

namespace {

using namespace advdiff;

std::vector<double> filled(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

Tensor random_tensor(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Tensor t(Shape{rows, cols});
  const auto v = filled(rows * cols, seed);
  std::copy(v.begin(), v.end(), t.data().begin());
  return t;
}

template <auto Fn>
void BM_gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const kernels::GemmDims d{n, n, n};
  const auto a = filled(n * n, 1), b = filled(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    Fn(d, a, b, c);
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOP/s"] =
      benchmark::Counter(2.0 * n * n * n, benchmark::Counter::kIsIterationInvariantRate, benchmark::Counter::kIs1000);
}

template <auto Fn>
void BM_max_similarity(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor gen = random_tensor(n, 256, 3), train = random_tensor(1000, 256, 4);
  for (auto _ : state) benchmark::DoNotOptimize(Fn(gen, train, SimilarityMetric::kCosine));
}

BENCHMARK(BM_gemm<kernels::gemm_nn>)->Name("gemm_nn/parallel")->Arg(128)->Arg(256)->Arg(512);
BENCHMARK(BM_gemm<kernels::reference::gemm_nn>)->Name("gemm_nn/reference")->Arg(128)->Arg(256)->Arg(512);
BENCHMARK(BM_gemm<kernels::gemm_tn>)->Name("gemm_tn/parallel")->Arg(256);
BENCHMARK(BM_gemm<kernels::reference::gemm_tn>)->Name("gemm_tn/reference")->Arg(256);
BENCHMARK(BM_max_similarity<static_cast<std::vector<double> (*)(const Tensor&, const Tensor&, SimilarityMetric)>(
              &max_similarity)>)
    ->Name("max_similarity/parallel")
    ->Arg(500);
BENCHMARK(BM_max_similarity<&reference::max_similarity>)->Name("max_similarity/reference")->Arg(500);

}  // namespace

BENCHMARK_MAIN();
