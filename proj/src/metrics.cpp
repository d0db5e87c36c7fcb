#include "advdiff/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "advdiff/error.hpp"
#include "advdiff/io.hpp"
#include "advdiff/kernels.hpp"

namespace advdiff {

std::vector<double> rho(const Tensor& x, const Tensor& U, const Tensor& mu, bool centered) {
  if (x.rank() != 2 || U.rank() != 2 || U.cols() != x.cols()) {
    throw ShapeError("rho: points " + shape_str(x.shape()) + " and basis " + shape_str(U.shape()));
  }
  if (centered && mu.numel() != x.cols()) throw ShapeError("rho: mean has " + std::to_string(mu.numel()) + " entries");
  const std::size_t n = x.rows(), D = x.cols(), k = U.rows();

  std::vector<double> gram(k * k);
  kernels::gemm_nt({k, k, D}, U.data(), U.data(), gram);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      if (std::abs(gram[i * k + j] - (i == j ? 1.0 : 0.0)) > 1e-8) {
        throw NumericError("rho: basis rows are not orthonormal (entry " + std::to_string(i) + "," +
                           std::to_string(j) + " of U U^T is " + io::format_double(gram[i * k + j]) + ")");
      }
    }
  }

  Tensor c = x;
  if (centered) {
    for (std::size_t i = 0; i < n; ++i) {
      auto r = c.row(i);
      for (std::size_t j = 0; j < D; ++j) r[j] -= mu[j];
    }
  }
  std::vector<double> coeff(n * k), proj(n * D);
  kernels::gemm_nt({n, k, D}, c.data(), U.data(), coeff);
  kernels::gemm_nn({n, D, k}, coeff, U.data(), proj);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < D; ++j) {
      const double r = c.at(i, j) - proj[i * D + j];
      s += r * r;
    }
    out[i] = std::sqrt(s);
  }
  return out;
}

std::vector<double> plane_distance(const Tensor& x, const std::array<double, 3>& normal, double offset) {
  if (x.rank() != 2 || x.cols() != 3) throw ShapeError("plane_distance needs (n x 3) points, got " + shape_str(x.shape()));
  const double nn = std::sqrt(normal[0] * normal[0] + normal[1] * normal[1] + normal[2] * normal[2]);
  if (!(nn > 0.0)) throw ConfigError("plane normal must be non-zero");
  std::vector<double> out(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double v = normal[0] * x.at(i, 0) + normal[1] * x.at(i, 1) + normal[2] * x.at(i, 2);
    out[i] = std::abs(v - offset) / nn;
  }
  return out;
}

double psnr(const Tensor& x, const Tensor& ref, double peak) {
  if (x.shape() != ref.shape()) throw ShapeError("psnr: shapes " + shape_str(x.shape()) + " and " + shape_str(ref.shape()));
  if (x.numel() == 0) throw ShapeError("psnr of empty tensors");
  if (!(peak > 0.0)) throw ConfigError("psnr peak must be positive");
  double mse = 0.0;
  for (std::size_t k = 0; k < x.numel(); ++k) mse += (x[k] - ref[k]) * (x[k] - ref[k]);
  mse /= static_cast<double>(x.numel());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

std::string to_string(SimilarityMetric m) { return m == SimilarityMetric::kCosine ? "cosine" : "neg_l2"; }

SimilarityMetric similarity_metric_from_string(const std::string& s) {
  if (s == "cosine") return SimilarityMetric::kCosine;
  if (s == "neg_l2") return SimilarityMetric::kNegL2;
  throw ConfigError("unknown similarity metric '" + s + "' (cosine, neg_l2)");
}

std::size_t Histogram::total() const {
  std::size_t n = underflow + overflow;
  for (auto c : counts) n += c;
  return n;
}

double fraction_at_or_above(std::span<const double> values, double threshold) {
  if (values.empty()) return 0.0;
  const auto n = std::count_if(values.begin(), values.end(), [&](double v) { return v >= threshold; });
  return static_cast<double>(n) / static_cast<double>(values.size());
}

std::vector<double> uniform_edges(double lo, double hi, std::size_t bins) {
  if (bins == 0 || !(hi > lo)) throw ConfigError("histogram needs bins >= 1 and hi > lo");
  std::vector<double> e(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) e[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
  return e;
}

Histogram make_histogram(std::span<const double> values, std::vector<double> edges) {
  if (edges.size() < 2 || !std::is_sorted(edges.begin(), edges.end())) throw ConfigError("histogram edges must be sorted");
  Histogram h;
  h.edges = std::move(edges);
  h.counts.assign(h.edges.size() - 1, 0);
  for (double v : values) {
    if (v < h.edges.front()) {
      ++h.underflow;
    } else if (v > h.edges.back()) {
      ++h.overflow;
    } else {
      auto it = std::upper_bound(h.edges.begin(), h.edges.end(), v);
      std::size_t bin = static_cast<std::size_t>(it - h.edges.begin()) - 1;
      bin = std::min(bin, h.counts.size() - 1);
      ++h.counts[bin];
    }
  }
  return h;
}

namespace {

void check_pair(const Tensor& gen, const Tensor& train) {
  if (gen.rank() != 2 || train.rank() != 2 || gen.cols() != train.cols()) {
    throw ShapeError("similarity scan: " + shape_str(gen.shape()) + " vs " + shape_str(train.shape()));
  }
  if (train.rows() == 0) throw ShapeError("similarity scan against an empty training set");
}

double similarity(std::span<const double> a, double na, std::span<const double> b, double nb, SimilarityMetric m) {
  if (m == SimilarityMetric::kCosine) {
    const double denom = na * nb;
    return denom > 0.0 ? std::clamp(dot(a, b) / denom, -1.0, 1.0) : 0.0;
  }
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
  return -std::sqrt(s);
}

std::vector<double> row_norms(const Tensor& t) {
  std::vector<double> out(t.rows());
  for (std::size_t i = 0; i < t.rows(); ++i) out[i] = std::sqrt(squared_norm(t.row(i)));
  return out;
}

}  // namespace

std::vector<double> max_similarity(const Tensor& gen, const Tensor& train, SimilarityMetric metric) {
  check_pair(gen, train);
  const auto ng = row_norms(gen), nt = row_norms(train);
  std::vector<double> out(gen.rows());
  const auto n = static_cast<std::int64_t>(gen.rows());
#pragma omp parallel for schedule(dynamic, 8)
  for (std::int64_t i = 0; i < n; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < train.rows(); ++j) {
      best = std::max(best, similarity(gen.row(ui), ng[ui], train.row(j), nt[j], metric));
    }
    out[ui] = best;
  }
  return out;
}

std::vector<double> reference::max_similarity(const Tensor& gen, const Tensor& train, SimilarityMetric metric) {
  check_pair(gen, train);
  std::vector<double> out;
  for (std::size_t i = 0; i < gen.rows(); ++i) {
    const double na = std::sqrt(squared_norm(gen.row(i)));
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < train.rows(); ++j) {
      const double s = similarity(gen.row(i), na, train.row(j), std::sqrt(squared_norm(train.row(j))), metric);
      if (s > best) best = s;
    }
    out.push_back(best);
  }
  return out;
}

MemorizationResult memorization_histogram(const Tensor& gen, const Tensor& train, SimilarityMetric metric) {
  MemorizationResult r;
  r.similarity = max_similarity(gen, train, metric);
  if (metric == SimilarityMetric::kCosine) {
    r.histogram = make_histogram(r.similarity, uniform_edges(0.0, 1.0, 50));
  } else {
    double lo = 0.0;
    for (double v : r.similarity) lo = std::min(lo, v);
    r.histogram = make_histogram(r.similarity, uniform_edges(lo < 0.0 ? lo : -1.0, 0.0, 50));
  }
  return r;
}

std::array<double, 2> FlowProjection::apply(std::span<const double> x) const {
  if (matrix) {
    if (matrix->rank() != 2 || matrix->rows() != 2 || matrix->cols() != x.size()) {
      throw ShapeError("flow projection matrix must be 2 x " + std::to_string(x.size()));
    }
    return {dot(matrix->row(0), x), dot(matrix->row(1), x)};
  }
  if (dims[0] >= x.size() || dims[1] >= x.size()) throw ShapeError("flow projection dimension out of range");
  return {x[dims[0]], x[dims[1]]};
}

FlowHistogram flow_histogram(const std::vector<Trajectory>& trajs, const FlowProjection& proj, std::size_t grid,
                             std::optional<std::array<double, 4>> bounds) {
  if (trajs.empty()) throw ShapeError("flow histogram needs at least one trajectory");
  if (grid == 0) throw ConfigError("flow histogram grid must be >= 1");
  FlowHistogram h;
  h.grid = grid;
  h.n_chains = trajs.size();
  h.t = trajs.front().t;
  if (h.t.empty()) throw ShapeError("trajectories carry no recorded states");
  for (const auto& tr : trajs) {
    if (tr.t != h.t || tr.states.size() != h.t.size()) {
      throw ShapeError("all trajectories must record the same timesteps (chain " + std::to_string(tr.chain) + ")");
    }
  }

  const std::size_t S = h.t.size();
  std::vector<std::array<double, 2>> pts(S * trajs.size());
  for (std::size_t c = 0; c < trajs.size(); ++c)
    for (std::size_t s = 0; s < S; ++s) pts[s * trajs.size() + c] = proj.apply(trajs[c].states[s]);

  if (bounds) {
    h.lo = {(*bounds)[0], (*bounds)[1]};
    h.hi = {(*bounds)[2], (*bounds)[3]};
  } else {
    h.lo = {std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
    h.hi = {-std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
    for (const auto& p : pts) {
      for (int a = 0; a < 2; ++a) {
        h.lo[a] = std::min(h.lo[a], p[a]);
        h.hi[a] = std::max(h.hi[a], p[a]);
      }
    }
  }
  for (int a = 0; a < 2; ++a) {
    if (!std::isfinite(h.lo[a]) || !std::isfinite(h.hi[a])) throw NumericError("flow histogram bounds are not finite");
    if (!(h.hi[a] > h.lo[a])) {
      h.lo[a] -= 0.5;
      h.hi[a] += 0.5;
    }
  }

  auto cell = [&](double v, int a) {
    const double f = (v - h.lo[a]) / (h.hi[a] - h.lo[a]) * static_cast<double>(grid);
    if (!(f > 0.0)) return std::size_t{0};
    return std::min(static_cast<std::size_t>(f), grid - 1);
  };

  const double n = static_cast<double>(trajs.size());
  h.counts.assign(S, std::vector<std::size_t>(grid * grid, 0));
  h.density.assign(S, std::vector<double>(grid * grid, 0.0));
  h.entropy.assign(S, 0.0);
  for (std::size_t s = 0; s < S; ++s) {
    auto& counts = h.counts[s];
    for (std::size_t c = 0; c < trajs.size(); ++c) {
      const auto& p = pts[s * trajs.size() + c];
      ++counts[cell(p[1], 1) * grid + cell(p[0], 0)];
    }
    double e = 0.0;
    for (std::size_t k = 0; k < counts.size(); ++k) {
      const double q = static_cast<double>(counts[k]) / n;
      h.density[s][k] = q;
      if (q > 0.0) e -= q * std::log(q);
    }
    h.entropy[s] = e;
  }
  return h;
}

Summary summarize(std::span<const double> values) {
  Summary s;
  s.count = values.size();
  if (values.empty()) return s;
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  double total = 0.0;
  for (double x : v) total += x;
  s.mean = total / static_cast<double>(v.size());
  const std::size_t m = v.size() / 2;
  s.median = v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
  // Linear interpolation between closest ranks.
  const double pos = 0.95 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  s.p95 = v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
  return s;
}

std::map<std::string, Summary> EvalReport::summaries() const {
  std::map<std::string, Summary> out;
  for (const auto& [name, values] : arrays) out[name] = summarize(values);
  return out;
}

void EvalReport::write(const std::filesystem::path& dir, const std::string& stem) const {
  using nlohmann::json;
  auto num = [](double v) { return std::isfinite(v) ? json(v) : json(io::format_double(v)); };
  json j;
  json sums = json::object();
  for (const auto& [name, s] : summaries()) {
    sums[name] = {{"mean", num(s.mean)}, {"median", num(s.median)}, {"p95", num(s.p95)}, {"count", s.count}};
  }
  j["summary"] = sums;
  json sc = json::object();
  for (const auto& [name, v] : scalars) sc[name] = num(v);
  j["scalars"] = sc;
  j["provenance"] = provenance;
  j["arrays_csv"] = stem + ".csv";
  io::write_file_atomic(dir / (stem + ".json"), j.dump(2) + "\n");

  std::ostringstream os;
  std::size_t rows = 0;
  bool first = true;
  for (const auto& [name, values] : arrays) {
    os << (first ? "" : ",") << name;
    first = false;
    rows = std::max(rows, values.size());
  }
  os << '\n';
  for (std::size_t r = 0; r < rows; ++r) {
    first = true;
    for (const auto& [name, values] : arrays) {
      if (!first) os << ',';
      first = false;
      if (r < values.size()) os << io::format_double(values[r]);
    }
    os << '\n';
  }
  io::write_file_atomic(dir / (stem + ".csv"), os.str());
}

}  // namespace advdiff
