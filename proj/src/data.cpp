#include "advdiff/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "advdiff/error.hpp"
#include "advdiff/io.hpp"
#include "advdiff/rng.hpp"

namespace advdiff {

namespace {

using Vec3 = std::array<double, 3>;

Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

Vec3 normalized(const Vec3& v) {
  const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  return {v[0] / n, v[1] / n, v[2] / n};
}

// Two orthonormal vectors spanning the plane with the given normal.
std::pair<Vec3, Vec3> plane_basis(const Vec3& normal) {
  const Vec3 n = normalized(normal);
  std::size_t least = 0;
  for (std::size_t i = 1; i < 3; ++i)
    if (std::abs(n[i]) < std::abs(n[least])) least = i;
  Vec3 axis{0.0, 0.0, 0.0};
  axis[least] = 1.0;
  const Vec3 e1 = normalized(cross(n, axis));
  const Vec3 e2 = cross(n, e1);
  return {e1, e2};
}

// Gram-Schmidt run twice over the rows of `m` (k x D).
void orthonormalize_rows(Tensor& m) {
  const std::size_t k = m.rows();
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t i = 0; i < k; ++i) {
      auto ri = m.row(i);
      for (std::size_t j = 0; j < i; ++j) {
        auto rj = m.row(j);
        const double c = dot(ri, rj);
        for (std::size_t d = 0; d < ri.size(); ++d) ri[d] -= c * rj[d];
      }
      const double n = std::sqrt(squared_norm(ri));
      if (n < 1e-12) throw NumericError("subspace basis generation produced a degenerate direction");
      for (double& v : ri) v /= n;
    }
  }
}

// First `count` entries of a seeded Fisher-Yates permutation of [0, n).
std::vector<std::size_t> choose_subset(std::size_t n, std::size_t count, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < count && i + 1 < n; ++i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i), static_cast<std::int64_t>(n - 1)));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

void add_subspace_noise(std::span<double> row, const GroundTruth& truth, double coeff_std, Rng& rng) {
  for (std::size_t i = 0; i < truth.basis.rows(); ++i) {
    const double a = truth.lambdas[i] * coeff_std * rng.normal();
    auto u = truth.basis.row(i);
    for (std::size_t d = 0; d < row.size(); ++d) row[d] += a * u[d];
  }
}

}  // namespace

std::string to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::kObliquePlane:
      return "oblique_plane";
    case DatasetKind::kThreeGaussians:
      return "three_gaussians";
    case DatasetKind::kLinearSubspace:
      return "linear_subspace";
  }
  return "?";
}

DatasetKind dataset_kind_from_string(const std::string& s) {
  if (s == "oblique_plane" || s == "oblique-plane") return DatasetKind::kObliquePlane;
  if (s == "three_gaussians" || s == "3-gaussians") return DatasetKind::kThreeGaussians;
  if (s == "linear_subspace") return DatasetKind::kLinearSubspace;
  throw ConfigError("unknown dataset kind '" + s + "'");
}

double SubspaceParams::resolved_decay() const {
  return decay.value_or(std::pow(0.3, 1.0 / (2.0 * static_cast<double>(dim))));
}

std::size_t DatasetSpec::dim() const {
  return kind == DatasetKind::kLinearSubspace ? static_cast<std::size_t>(subspace.ambient_dim) : 3;
}

void DatasetSpec::validate() const {
  if (n_samples == 0) throw ConfigError("dataset needs n_samples >= 1");
  switch (kind) {
    case DatasetKind::kObliquePlane: {
      const auto& p = plane;
      const double nn = std::sqrt(p.normal[0] * p.normal[0] + p.normal[1] * p.normal[1] + p.normal[2] * p.normal[2]);
      if (nn == 0.0) throw ConfigError("plane normal must be non-zero");
      const double res = p.normal[0] * p.center[0] + p.normal[1] * p.center[1] + p.normal[2] * p.center[2] - p.offset;
      if (std::abs(res) > 1e-9 * std::max(1.0, std::abs(p.offset))) {
        throw ConfigError("plane center does not lie on the plane");
      }
      if (p.sigma < 0.0 || p.extent < 0.0) throw ConfigError("plane sigma/extent must be >= 0");
      break;
    }
    case DatasetKind::kThreeGaussians: {
      const auto& m = mixture;
      if (m.centers.empty() || m.centers.size() != m.weights.size()) {
        throw ConfigError("mixture needs one weight per center");
      }
      const double total = std::accumulate(m.weights.begin(), m.weights.end(), 0.0);
      if (std::abs(total - 1.0) > 1e-9) throw ConfigError("mixture weights must sum to 1");
      if (std::any_of(m.weights.begin(), m.weights.end(), [](double w) { return w < 0.0; })) {
        throw ConfigError("mixture weights must be non-negative");
      }
      if (m.sigma < 0.0) throw ConfigError("mixture sigma must be >= 0");
      break;
    }
    case DatasetKind::kLinearSubspace: {
      const auto& s = subspace;
      if (s.dim < 1 || s.ambient_dim < s.dim) throw ConfigError("subspace needs 1 <= dim <= ambient_dim");
      const double r = s.resolved_decay();
      if (!(r > 0.0 && r <= 1.0)) throw ConfigError("subspace decay must be in (0, 1]");
      if (s.coeff_sigma < 0.0 || s.pixel_std <= 0.0) throw ConfigError("subspace scales must be positive");
      break;
    }
  }
}

std::size_t SampleSet::clean_count() const {
  return static_cast<std::size_t>(std::count(clean_mask.begin(), clean_mask.end(), std::uint8_t{1}));
}

GroundTruth make_ground_truth(const DatasetSpec& spec) {
  spec.validate();
  GroundTruth truth;
  truth.kind = spec.kind;
  truth.plane = spec.plane;
  truth.mixture = spec.mixture;
  if (spec.kind != DatasetKind::kLinearSubspace) return truth;

  const auto& sp = spec.subspace;
  const auto D = static_cast<std::size_t>(sp.ambient_dim);
  const auto k = static_cast<std::size_t>(sp.dim);
  Rng rng(spec.seed, "structure");
  Tensor basis(Shape{k, D});
  for (double& v : basis.data()) v = rng.normal();
  orthonormalize_rows(basis);

  Tensor mean(Shape{D});
  for (double& v : mean.data()) v = rng.uniform(-sp.mean_amplitude, sp.mean_amplitude);

  const double r = sp.resolved_decay();
  std::vector<double> lambdas(k);
  double energy = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    lambdas[i] = std::pow(r, static_cast<double>(i));
    energy += lambdas[i] * lambdas[i];
  }
  // sum_i lambda_i^2 coeff_sigma^2 == D * pixel_std^2
  const double coeff = sp.coeff_sigma > 0.0 ? sp.coeff_sigma : 1.0;
  const double lead = sp.pixel_std * std::sqrt(static_cast<double>(D) / energy) / coeff;
  for (double& l : lambdas) l *= lead;

  truth.basis = std::move(basis);
  truth.mean = std::move(mean);
  truth.lambdas = std::move(lambdas);
  truth.coeff_sigma = sp.coeff_sigma;
  return truth;
}

SampleSet sample_points(const DatasetSpec& spec, const GroundTruth& truth, std::size_t n, std::uint64_t seed) {
  const std::size_t D = spec.dim();
  SampleSet out;
  out.points = Tensor(Shape{n, D});
  out.clean_mask.assign(n, 1);
  Rng rng(seed);

  switch (spec.kind) {
    case DatasetKind::kObliquePlane: {
      const auto& p = spec.plane;
      const auto [e1, e2] = plane_basis(p.normal);
      for (std::size_t i = 0; i < n; ++i) {
        const double u = rng.uniform(-p.extent, p.extent);
        const double v = rng.uniform(-p.extent, p.extent);
        auto row = out.points.row(i);
        for (std::size_t d = 0; d < 3; ++d) row[d] = p.center[d] + u * e1[d] + v * e2[d];
        for (std::size_t d = 0; d < 3; ++d) row[d] += p.sigma * rng.normal();
      }
      break;
    }
    case DatasetKind::kThreeGaussians: {
      const auto& m = spec.mixture;
      out.component.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double u = rng.uniform(0.0, 1.0);
        std::size_t c = 0;
        double cum = m.weights[0];
        while (u >= cum && c + 1 < m.weights.size()) cum += m.weights[++c];
        out.component[i] = c;
        auto row = out.points.row(i);
        for (std::size_t d = 0; d < 3; ++d) row[d] = m.centers[c][d] + m.sigma * rng.normal();
      }
      break;
    }
    case DatasetKind::kLinearSubspace: {
      for (std::size_t i = 0; i < n; ++i) {
        auto row = out.points.row(i);
        std::copy(truth.mean.data().begin(), truth.mean.data().end(), row.begin());
        add_subspace_noise(row, truth, spec.subspace.coeff_sigma, rng);
      }
      break;
    }
  }
  out.original = out.points;
  return out;
}

SampleSet generate(const DatasetSpec& spec, GroundTruth* truth_out) {
  GroundTruth truth = make_ground_truth(spec);
  SampleSet s = sample_points(spec, truth, spec.n_samples, derive_seed(spec.seed, "points"));
  if (truth_out) *truth_out = std::move(truth);
  return s;
}

std::string to_string(CorruptionMode mode) {
  switch (mode) {
    case CorruptionMode::kNone:
      return "none";
    case CorruptionMode::kInlier:
      return "inlier";
    case CorruptionMode::kAmbientGaussian:
      return "ambient_gaussian";
    case CorruptionMode::kUniformOutliers:
      return "uniform_outliers";
  }
  return "?";
}

CorruptionMode corruption_mode_from_string(const std::string& s) {
  if (s == "none") return CorruptionMode::kNone;
  if (s == "inlier") return CorruptionMode::kInlier;
  if (s == "ambient_gaussian" || s == "ambient") return CorruptionMode::kAmbientGaussian;
  if (s == "uniform_outliers" || s == "outliers") return CorruptionMode::kUniformOutliers;
  throw ConfigError("unknown corruption mode '" + s + "'");
}

void CorruptionSpec::validate() const {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("corruption fraction p must be in [0, 1]");
  if (sigma < 0.0) throw ConfigError("corruption sigma must be >= 0");
  if (sigma_scale < 1.0) throw ConfigError("inlier sigma_scale must be >= 1");
  if (inflate <= 0.0) throw ConfigError("outlier box inflation must be > 0");
}

SampleSet corrupt(const SampleSet& s, const GroundTruth& truth, const CorruptionSpec& c) {
  c.validate();
  SampleSet out = s;
  if (out.original.numel() == 0) out.original = s.points;
  if (c.mode == CorruptionMode::kNone) return out;

  const std::size_t n = s.size();
  const std::size_t D = s.dim();
  const auto count = static_cast<std::size_t>(std::llround(c.p * static_cast<double>(n)));
  Rng subset_rng(c.seed, "subset");
  Rng noise_rng(c.seed, "noise");
  const std::vector<std::size_t> chosen = choose_subset(n, count, subset_rng);

  switch (c.mode) {
    case CorruptionMode::kNone:
      break;
    case CorruptionMode::kInlier: {
      const double extra = std::sqrt(c.sigma_scale * c.sigma_scale - 1.0);
      for (std::size_t i : chosen) {
        auto row = out.points.row(i);
        if (truth.kind == DatasetKind::kLinearSubspace) {
          add_subspace_noise(row, truth, truth.coeff_sigma * extra, noise_rng);
        } else {
          const double base = truth.kind == DatasetKind::kObliquePlane ? truth.plane.sigma : truth.mixture.sigma;
          for (double& v : row) v += base * extra * noise_rng.normal();
        }
        out.clean_mask[i] = 0;
      }
      break;
    }
    case CorruptionMode::kAmbientGaussian:
      for (std::size_t i : chosen) {
        for (double& v : out.points.row(i)) v += c.sigma * noise_rng.normal();
        out.clean_mask[i] = 0;
      }
      break;
    case CorruptionMode::kUniformOutliers: {
      std::vector<std::array<double, 2>> box;
      if (c.box) {
        box = *c.box;
        if (box.size() != D) throw ConfigError("outlier box dimension does not match data");
      } else {
        box.assign(D, {INFINITY, -INFINITY});
        for (std::size_t i = 0; i < n; ++i) {
          auto row = s.points.row(i);
          for (std::size_t d = 0; d < D; ++d) {
            box[d][0] = std::min(box[d][0], row[d]);
            box[d][1] = std::max(box[d][1], row[d]);
          }
        }
        for (auto& b : box) {
          const double mid = 0.5 * (b[0] + b[1]);
          const double half = 0.5 * (b[1] - b[0]) * c.inflate;
          b = {mid - half, mid + half};
        }
      }
      for (std::size_t i : chosen) {
        auto row = out.points.row(i);
        for (std::size_t d = 0; d < D; ++d) row[d] = noise_rng.uniform(box[d][0], box[d][1]);
        out.clean_mask[i] = 0;
      }
      break;
    }
  }
  return out;
}

Normalizer Normalizer::identity(std::size_t dim) { return Normalizer{std::vector<double>(dim, 0.0), 1.0}; }

Normalizer Normalizer::fit(const Tensor& points) {
  const std::size_t n = points.rows();
  const std::size_t D = points.cols();
  if (n == 0) throw ConfigError("cannot fit a normalizer to an empty set");
  Normalizer nz;
  nz.shift.assign(D, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t d = 0; d < D; ++d) nz.shift[d] += points.at(i, d);
  for (double& v : nz.shift) v /= static_cast<double>(n);
  double worst = 0.0;
  for (std::size_t d = 0; d < D; ++d) {
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double e = points.at(i, d) - nz.shift[d];
      var += e * e;
    }
    worst = std::max(worst, var / static_cast<double>(n));
  }
  nz.scale = worst > 0.0 ? std::sqrt(worst) : 1.0;
  return nz;
}

Tensor Normalizer::to_model(const Tensor& x) const {
  if (x.cols() != shift.size()) throw ShapeError("normalizer dimension mismatch on " + shape_str(x.shape()));
  Tensor out = x;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto row = out.row(i);
    for (std::size_t d = 0; d < row.size(); ++d) row[d] = (row[d] - shift[d]) / scale;
  }
  return out;
}

Tensor Normalizer::to_data(const Tensor& x) const {
  if (x.cols() != shift.size()) throw ShapeError("normalizer dimension mismatch on " + shape_str(x.shape()));
  Tensor out = x;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto row = out.row(i);
    for (std::size_t d = 0; d < row.size(); ++d) row[d] = row[d] * scale + shift[d];
  }
  return out;
}

void write_samples_csv(const std::filesystem::path& path, const SampleSet& s) {
  std::string out;
  const std::size_t D = s.dim();
  for (std::size_t d = 0; d < D; ++d) {
    out += "dim_" + std::to_string(d);
    out += ',';
  }
  out += "is_clean\n";
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (double v : s.points.row(i)) {
      out += io::format_double(v);
      out += ',';
    }
    out += (s.clean_mask.empty() || s.clean_mask[i]) ? "1\n" : "0\n";
  }
  io::write_file_atomic(path, out);
}

SampleSet read_samples_csv(const std::filesystem::path& path) {
  std::istringstream in(io::read_file(path));
  std::string line;
  if (!std::getline(in, line)) throw IoError(path.string() + ": empty samples file");
  std::size_t cols = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
  if (cols < 2 || line.rfind("is_clean") != line.size() - 8 || line.rfind("dim_0", 0) != 0) {
    throw IoError(path.string() + ": expected header dim_0..dim_{D-1},is_clean");
  }
  const std::size_t D = cols - 1;
  std::vector<double> values;
  std::vector<std::uint8_t> mask;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::size_t start = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t end = c + 1 < cols ? line.find(',', start) : line.size();
      if (end == std::string::npos) {
        throw IoError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(cols) + " fields");
      }
      const std::string_view field(line.data() + start, end - start);
      if (c < D) {
        values.push_back(io::parse_double(field));
      } else {
        mask.push_back(field == "0" ? 0 : 1);
      }
      start = end + 1;
    }
  }
  SampleSet s;
  const std::size_t n = mask.size();
  s.points = Tensor(Shape{n, D}, std::move(values));
  s.clean_mask = std::move(mask);
  s.original = s.points;
  return s;
}

void write_tensor_bin(const std::filesystem::path& bin_path, const Tensor& t) {
  static_assert(sizeof(double) == 8);
  std::string bytes(t.numel() * 8, '\0');
  for (std::size_t i = 0; i < t.numel(); ++i) {
    std::uint64_t bits;
    const double v = t[i];
    std::memcpy(&bits, &v, 8);
    for (int b = 0; b < 8; ++b) bytes[i * 8 + static_cast<std::size_t>(b)] = static_cast<char>((bits >> (8 * b)) & 0xFF);
  }
  io::write_file_atomic(bin_path, bytes);
  std::string manifest = "{\"dtype\": \"float64-le\", \"shape\": [";
  for (std::size_t i = 0; i < t.shape().size(); ++i) {
    if (i) manifest += ", ";
    manifest += std::to_string(t.shape()[i]);
  }
  manifest += "]}\n";
  std::filesystem::path json_path = bin_path;
  json_path += ".json";
  io::write_file_atomic(json_path, manifest);
}

Tensor read_tensor_bin(const std::filesystem::path& bin_path) {
  std::filesystem::path json_path = bin_path;
  json_path += ".json";
  const std::string manifest = io::read_file(json_path);
  const auto open = manifest.find('[', manifest.find("\"shape\""));
  const auto close = manifest.find(']', open);
  if (open == std::string::npos || close == std::string::npos) throw IoError(json_path.string() + ": no shape");
  Shape shape;
  std::istringstream ss(manifest.substr(open + 1, close - open - 1));
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok.erase(std::remove_if(tok.begin(), tok.end(), ::isspace), tok.end());
    if (!tok.empty()) shape.push_back(static_cast<std::size_t>(std::stoull(tok)));
  }
  const std::string bytes = io::read_file(bin_path);
  const std::size_t n = shape_numel(shape);
  if (bytes.size() != n * 8) throw IoError(bin_path.string() + ": size does not match manifest shape");
  std::vector<double> values(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) {
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i * 8 + static_cast<std::size_t>(b)])) << (8 * b);
    }
    std::memcpy(&values[i], &bits, 8);
  }
  return Tensor(std::move(shape), std::move(values));
}

}  // namespace advdiff
