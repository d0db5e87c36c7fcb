#pragma once

// Evaluation: subspace reconstruction error, distance to the plane, PSNR,
// nearest-training-neighbour similarity and projected trajectory densities.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advdiff/data.hpp"
#include "advdiff/sampler.hpp"
#include "advdiff/tensor.hpp"

namespace advdiff {

/// rho_i = ||(x_i - mu) - U^T U (x_i - mu)||. With centered = false mu is
/// ignored. U must have orthonormal rows (checked to 1e-8).
std::vector<double> rho(const Tensor& x, const Tensor& U, const Tensor& mu, bool centered = true);

/// |<n, x> - d| / ||n||
std::vector<double> plane_distance(const Tensor& x, const std::array<double, 3>& normal, double offset);

/// 10 log10(peak^2 / MSE); +inf when the inputs are equal.
double psnr(const Tensor& x, const Tensor& ref, double peak);

enum class SimilarityMetric { kCosine, kNegL2 };

std::string to_string(SimilarityMetric m);
SimilarityMetric similarity_metric_from_string(const std::string& s);

struct Histogram {
  std::vector<double> edges;  // bins [edges[i], edges[i+1]), last bin closed
  std::vector<std::size_t> counts;
  std::size_t underflow = 0;
  std::size_t overflow = 0;

  std::size_t total() const;
};

double fraction_at_or_above(std::span<const double> values, double threshold);

Histogram make_histogram(std::span<const double> values, std::vector<double> edges);
std::vector<double> uniform_edges(double lo, double hi, std::size_t bins);

/// Largest similarity of each generated point to any training point.
std::vector<double> max_similarity(const Tensor& gen, const Tensor& train, SimilarityMetric metric);

namespace reference {
// Serial brute-force scan used to check max_similarity.
std::vector<double> max_similarity(const Tensor& gen, const Tensor& train, SimilarityMetric metric);
}  // namespace reference

struct MemorizationResult {
  std::vector<double> similarity;
  Histogram histogram;  // cosine: [0, 1] step 0.02
};

MemorizationResult memorization_histogram(const Tensor& gen, const Tensor& train, SimilarityMetric metric);

struct FlowProjection {
  // Either two coordinate indices or an explicit 2 x D matrix.
  std::array<std::size_t, 2> dims{0, 1};
  std::optional<Tensor> matrix;

  std::array<double, 2> apply(std::span<const double> x) const;
};

struct FlowHistogram {
  std::size_t grid = 0;
  std::array<double, 2> lo{0.0, 0.0}, hi{0.0, 0.0};
  std::vector<int> t;                             // one slice per recorded timestep
  std::vector<std::vector<std::size_t>> counts;   // slice -> grid*grid, row-major (y, x)
  std::vector<std::vector<double>> density;       // counts / n_chains
  std::vector<double> entropy;                    // -sum p log p per slice
  std::size_t n_chains = 0;
};

/// All trajectories must share the same recorded timesteps. Bounds default
/// to the extent of every projected state; points outside are clamped to the
/// edge cells so each slice sums to n_chains.
FlowHistogram flow_histogram(const std::vector<Trajectory>& trajs, const FlowProjection& proj, std::size_t grid,
                             std::optional<std::array<double, 4>> bounds = std::nullopt);

struct Summary {
  double mean = 0.0, median = 0.0, p95 = 0.0;
  std::size_t count = 0;
};

Summary summarize(std::span<const double> values);

struct EvalReport {
  std::map<std::string, std::vector<double>> arrays;
  std::map<std::string, double> scalars;
  std::map<std::string, std::string> provenance;

  std::map<std::string, Summary> summaries() const;
  // <stem>.json (summaries, scalars, provenance) and <stem>.csv (arrays as
  // columns; shorter arrays leave trailing cells empty).
  void write(const std::filesystem::path& dir, const std::string& stem) const;
};

}  // namespace advdiff
