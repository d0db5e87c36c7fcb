#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "advdiff/data.hpp"
#include "advdiff/error.hpp"
#include "advdiff/io.hpp"
#include "advdiff/metrics.hpp"
#include "advdiff/serialize.hpp"

using namespace advdiff;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("advdiff_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

DatasetSpec subspace_spec(int D, int k, std::size_t n) {
  DatasetSpec s;
  s.kind = DatasetKind::kLinearSubspace;
  s.subspace.ambient_dim = D;
  s.subspace.dim = k;
  s.n_samples = n;
  s.seed = 5;
  return s;
}

}  // namespace

TEST_CASE("oblique plane points sit on the plane up to the jitter") {
  DatasetSpec spec;
  spec.n_samples = 4000;
  spec.seed = 1;
  const SampleSet s = generate(spec);
  CHECK(s.size() == 4000);
  CHECK(s.dim() == 3);
  const auto d = plane_distance(s.points, spec.plane.normal, spec.plane.offset);
  // distance along the unit normal is |N(0, sigma^2)|: mean sigma * sqrt(2/pi)
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
  CHECK(mean == doctest::Approx(0.25 * std::sqrt(2.0 / M_PI)).epsilon(0.05));

  spec.plane.sigma = 0.0;
  for (double v : plane_distance(generate(spec).points, spec.plane.normal, spec.plane.offset)) CHECK(v < 1e-12);
}

TEST_CASE("three gaussians respect the weights") {
  DatasetSpec spec;
  spec.kind = DatasetKind::kThreeGaussians;
  spec.n_samples = 6000;
  const SampleSet s = generate(spec);
  std::vector<std::size_t> counts(3);
  for (auto c : s.component) ++counts[c];
  for (auto c : counts) CHECK(static_cast<double>(c) / 6000.0 == doctest::Approx(1.0 / 3.0).epsilon(0.08));
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto& mu = spec.mixture.centers[s.component[i]];
    for (std::size_t d = 0; d < 3; ++d) CHECK(std::abs(s.points.at(i, d) - mu[d]) < 0.25 * 6);
  }
}

TEST_CASE("subspace data lies in mu + span(U) with the requested pixel spread") {
  const auto spec = subspace_spec(300, 10, 400);
  GroundTruth truth;
  const SampleSet s = generate(spec, &truth);
  for (double r : rho(s.points, truth.basis, truth.mean)) CHECK(r < 1e-9);
  double var = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t d = 0; d < s.dim(); ++d) var += std::pow(s.points.at(i, d) - truth.mean[d], 2);
  var /= static_cast<double>(s.size() * s.dim());
  CHECK(std::sqrt(var) == doctest::Approx(spec.subspace.pixel_std).epsilon(0.1));
  for (std::size_t i = 1; i < truth.lambdas.size(); ++i) CHECK(truth.lambdas[i] < truth.lambdas[i - 1]);
}

TEST_CASE("generation is seed-determined") {
  const auto spec = subspace_spec(50, 5, 30);
  CHECK(generate(spec).points == generate(spec).points);
  auto other = spec;
  other.seed = 6;
  CHECK_FALSE(generate(other).points == generate(spec).points);
}

TEST_CASE("ambient corruption of subspace data gives the chi-mean residual") {
  const auto spec = subspace_spec(3072, 25, 300);
  GroundTruth truth;
  const SampleSet s = generate(spec, &truth);
  CorruptionSpec c;
  c.mode = CorruptionMode::kAmbientGaussian;
  c.p = 1.0;
  c.sigma = 0.1;
  c.seed = 9;
  const SampleSet noisy = corrupt(s, truth, c);
  const auto r = rho(noisy.points, truth.basis, truth.mean);
  const double mean = std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(r.size());
  // sigma * sqrt(2) Gamma((d+1)/2) / Gamma(d/2) with d = 3047
  CHECK(mean == doctest::Approx(5.519510885066563).epsilon(0.005));
  CHECK(noisy.clean_count() == 0);
}

TEST_CASE("corruption touches exactly round(p n) points") {
  DatasetSpec spec;
  spec.n_samples = 1001;
  GroundTruth truth;
  const SampleSet s = generate(spec, &truth);
  for (auto mode : {CorruptionMode::kInlier, CorruptionMode::kAmbientGaussian, CorruptionMode::kUniformOutliers}) {
    CorruptionSpec c;
    c.mode = mode;
    c.p = 0.3;
    c.seed = 4;
    const SampleSet out = corrupt(s, truth, c);
    CHECK(out.size() - out.clean_count() == 300);
    CHECK(out.original == s.points);
    for (std::size_t i = 0; i < out.size(); ++i) {
      const bool same = std::equal(out.points.row(i).begin(), out.points.row(i).end(), s.points.row(i).begin());
      CHECK(same == (out.clean_mask[i] == 1));
    }
  }
  CorruptionSpec none;
  CHECK(corrupt(s, truth, none).points == s.points);
}

TEST_CASE("inlier corruption scales the plane jitter") {
  DatasetSpec spec;
  spec.n_samples = 5000;
  GroundTruth truth;
  const SampleSet s = generate(spec, &truth);
  CorruptionSpec c;
  c.mode = CorruptionMode::kInlier;
  c.p = 1.0;
  c.sigma_scale = 4.0;
  const auto d = plane_distance(corrupt(s, truth, c).points, spec.plane.normal, spec.plane.offset);
  double ms = 0.0;
  for (double v : d) ms += v * v;
  CHECK(std::sqrt(ms / static_cast<double>(d.size())) == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("uniform outliers stay inside the inflated bounding box") {
  DatasetSpec spec;
  spec.n_samples = 500;
  GroundTruth truth;
  const SampleSet s = generate(spec, &truth);
  CorruptionSpec c;
  c.mode = CorruptionMode::kUniformOutliers;
  c.p = 1.0;
  c.box = std::vector<std::array<double, 2>>{{0.0, 1.0}, {2.0, 3.0}, {4.0, 5.0}};
  const SampleSet out = corrupt(s, truth, c);
  for (std::size_t i = 0; i < out.size(); ++i)
    for (std::size_t d = 0; d < 3; ++d) {
      CHECK(out.points.at(i, d) >= 2.0 * d);
      CHECK(out.points.at(i, d) <= 2.0 * d + 1.0);
    }
}

TEST_CASE("invalid dataset and corruption settings are rejected") {
  DatasetSpec spec;
  spec.plane.offset = 31.0;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  DatasetSpec mix;
  mix.kind = DatasetKind::kThreeGaussians;
  mix.mixture.weights = {0.5, 0.5, 0.5};
  CHECK_THROWS_AS(mix.validate(), ConfigError);
  auto sub = subspace_spec(10, 20, 5);
  CHECK_THROWS_AS(sub.validate(), ConfigError);
  CorruptionSpec c;
  c.p = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(dataset_kind_from_string("cube"), ConfigError);
}

TEST_CASE("normalizer round trip") {
  DatasetSpec spec;
  spec.n_samples = 200;
  const SampleSet s = generate(spec);
  const Normalizer nz = Normalizer::fit(s.points);
  const Tensor m = nz.to_model(s.points);
  double mean0 = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i) mean0 += m.at(i, 0);
  CHECK(std::abs(mean0 / 200.0) < 1e-12);
  const Tensor back = nz.to_data(m);
  for (std::size_t k = 0; k < back.numel(); ++k) CHECK(back[k] == doctest::Approx(s.points[k]).epsilon(1e-13));
}

TEST_CASE("samples CSV round trip is exact") {
  const auto dir = scratch("csv");
  DatasetSpec spec;
  spec.n_samples = 50;
  GroundTruth truth;
  SampleSet s = generate(spec, &truth);
  CorruptionSpec c;
  c.mode = CorruptionMode::kUniformOutliers;
  c.p = 0.2;
  s = corrupt(s, truth, c);
  write_samples_csv(dir / "s.csv", s);
  const SampleSet back = read_samples_csv(dir / "s.csv");
  CHECK(back.points == s.points);
  CHECK(back.clean_mask == s.clean_mask);
  io::write_file_atomic(dir / "bad.csv", "x,y\n1,2\n");
  CHECK_THROWS_AS(read_samples_csv(dir / "bad.csv"), IoError);
  CHECK_THROWS_AS(read_samples_csv(dir / "missing.csv"), IoError);
}

TEST_CASE("binary tensors and dataset sidecars round trip") {
  const auto dir = scratch("bin");
  const auto spec = subspace_spec(40, 4, 10);
  GroundTruth truth;
  generate(spec, &truth);
  write_tensor_bin(dir / "u.bin", truth.basis);
  CHECK(read_tensor_bin(dir / "u.bin") == truth.basis);

  write_dataset_sidecar(dir / "data.json", spec, truth);
  DatasetSpec spec_back;
  const GroundTruth back = read_dataset_sidecar(dir / "data.json", &spec_back);
  CHECK(back.basis == truth.basis);
  CHECK(back.mean == truth.mean);
  CHECK(back.lambdas == truth.lambdas);
  CHECK(Json(spec_back) == Json(spec));
}

TEST_CASE("shortest round-trip double formatting") {
  for (double v : {0.1, 1.0 / 3.0, -2.5e-300, 12345.678, 0.0}) CHECK(io::parse_double(io::format_double(v)) == v);
  CHECK(io::format_double(std::numeric_limits<double>::infinity()) == "inf");
  CHECK(std::isinf(io::parse_double("inf")));
  CHECK_THROWS_AS(io::parse_double("1.5x"), IoError);
}
