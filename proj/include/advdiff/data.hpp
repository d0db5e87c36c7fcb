#pragma once

// Synthetic datasets with known generating structure, plus corruption models.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "advdiff/tensor.hpp"

namespace advdiff {

enum class DatasetKind { kObliquePlane, kThreeGaussians, kLinearSubspace };

std::string to_string(DatasetKind kind);
DatasetKind dataset_kind_from_string(const std::string& s);

// Points on <normal, x> = offset, spread uniformly over a square of half-width
// `extent` around `center`, then jittered by isotropic N(0, sigma^2) noise.
struct PlaneParams {
  std::array<double, 3> normal{1.0, 1.0, 1.0};
  double offset = 30.0;
  std::array<double, 3> center{10.0, 10.0, 10.0};
  double extent = 10.0;
  double sigma = 0.25;
};

struct MixtureParams {
  std::vector<std::array<double, 3>> centers{{10.0, 10.0, 10.0}, {20.0, 20.0, 20.0}, {10.0, 30.0, 30.0}};
  std::vector<double> weights{1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
  double sigma = 0.25;
};

// x = mu + sum_i lambda_i alpha_i U_i with alpha ~ N(0, coeff_sigma^2).
// lambda decays geometrically and is scaled so that the in-subspace part has
// per-coordinate standard deviation `pixel_std`; mu is uniform in
// [-mean_amplitude, mean_amplitude]. Values land roughly in [-1, 1].
struct SubspaceParams {
  int ambient_dim = 3072;
  int dim = 25;
  // lambda_{i+1} / lambda_i. Default puts ~70% of an untruncated geometric
  // spectrum's energy in the leading `dim` components: r^(2*dim) = 0.3.
  std::optional<double> decay;
  double coeff_sigma = 1.0;
  double pixel_std = 0.25;
  double mean_amplitude = 0.5;

  double resolved_decay() const;
};

struct DatasetSpec {
  DatasetKind kind = DatasetKind::kObliquePlane;
  std::size_t n_samples = 1000;
  PlaneParams plane;
  MixtureParams mixture;
  SubspaceParams subspace;
  std::uint64_t seed = 0;

  std::size_t dim() const;
  void validate() const;
};

// Realized generating structure kept for exact evaluation.
struct GroundTruth {
  DatasetKind kind = DatasetKind::kObliquePlane;
  PlaneParams plane;
  MixtureParams mixture;
  Tensor basis;  // k x D, orthonormal rows (subspace only)
  Tensor mean;   // D (subspace only)
  std::vector<double> lambdas;
  double coeff_sigma = 1.0;
};

struct SampleSet {
  Tensor points;                  // n x D
  std::vector<std::uint8_t> clean_mask;  // 1 = untouched by corruption
  Tensor original;                // pre-corruption copy, n x D
  std::vector<std::size_t> component;  // mixture component per point (empty otherwise)

  std::size_t size() const { return points.rows(); }
  std::size_t dim() const { return points.cols(); }
  std::size_t clean_count() const;
};

GroundTruth make_ground_truth(const DatasetSpec& spec);
// Draws `n` points from the structure with an explicit point seed; held-out
// sets share the structure but use a different seed.
SampleSet sample_points(const DatasetSpec& spec, const GroundTruth& truth, std::size_t n, std::uint64_t seed);
// make_ground_truth + sample_points(spec.n_samples, point stream of spec.seed).
SampleSet generate(const DatasetSpec& spec, GroundTruth* truth_out = nullptr);

enum class CorruptionMode { kNone, kInlier, kAmbientGaussian, kUniformOutliers };

std::string to_string(CorruptionMode mode);
CorruptionMode corruption_mode_from_string(const std::string& s);

struct CorruptionSpec {
  CorruptionMode mode = CorruptionMode::kNone;
  double p = 1.0;            // fraction of points affected
  double sigma = 0.1;        // ambient_gaussian noise std
  double sigma_scale = 4.0;  // inlier: generative noise std multiplied by this
  double inflate = 1.5;      // uniform_outliers: bounding box inflation
  std::optional<std::vector<std::array<double, 2>>> box;  // per-dim [lo, hi]
  std::uint64_t seed = 0;

  void validate() const;
};

SampleSet corrupt(const SampleSet& s, const GroundTruth& truth, const CorruptionSpec& c);

// Per-dataset affine map into the denoiser's working space:
// model = (data - shift) / scale.
struct Normalizer {
  std::vector<double> shift;
  double scale = 1.0;

  static Normalizer identity(std::size_t dim);
  // shift = column means, scale = largest column standard deviation.
  static Normalizer fit(const Tensor& points);
  Tensor to_model(const Tensor& x) const;
  Tensor to_data(const Tensor& x) const;
};

// CSV with header dim_0..dim_{D-1},is_clean. Values use the shortest
// round-trip decimal form, so write -> read is exact.
void write_samples_csv(const std::filesystem::path& path, const SampleSet& s);
SampleSet read_samples_csv(const std::filesystem::path& path);

// Little-endian float64, row-major, with a JSON manifest {"shape": [...]}.
void write_tensor_bin(const std::filesystem::path& bin_path, const Tensor& t);
Tensor read_tensor_bin(const std::filesystem::path& bin_path);

// JSON sidecar describing the dataset. For the subspace kind U and mu are
// stored next to it as <stem>.basis.bin / <stem>.mean.bin.
void write_dataset_sidecar(const std::filesystem::path& json_path, const DatasetSpec& spec, const GroundTruth& truth);
GroundTruth read_dataset_sidecar(const std::filesystem::path& json_path, DatasetSpec* spec_out = nullptr);

}  // namespace advdiff
