#include "advdiff/sampler.hpp"

#include <cmath>
#include <sstream>

#include <json.hpp>

#include "advdiff/error.hpp"
#include "advdiff/io.hpp"
#include "advdiff/rng.hpp"

namespace advdiff {

std::string to_string(SamplerMode m) { return m == SamplerMode::kAncestral ? "ancestral" : "deterministic"; }

SamplerMode sampler_mode_from_string(const std::string& s) {
  if (s == "ancestral") return SamplerMode::kAncestral;
  if (s == "deterministic") return SamplerMode::kDeterministic;
  throw ConfigError("unknown sampler mode '" + s + "' (ancestral, deterministic)");
}

std::string to_string(NoiseScale s) { return s == NoiseScale::kSqrtSigma ? "sqrt_sigma" : "sigma"; }

NoiseScale noise_scale_from_string(const std::string& s) {
  if (s == "sqrt_sigma") return NoiseScale::kSqrtSigma;
  if (s == "sigma") return NoiseScale::kSigma;
  throw ConfigError("unknown noise_scale '" + s + "' (sqrt_sigma, sigma)");
}

void SamplerConfig::validate(const NoiseSchedule& ns) const {
  if (steps < 0 || steps > ns.T()) {
    throw ConfigError("sampler steps must lie in [1, " + std::to_string(ns.T()) + "] (0 for all), got " +
                      std::to_string(steps));
  }
  if (thin < 1) throw ConfigError("trajectory thinning must be >= 1");
  if (chunk == 0) throw ConfigError("sampler chunk must be >= 1");
}

namespace {

void check_t(int t, const NoiseSchedule& ns, int lowest, const char* what) {
  if (t < lowest || t > ns.T()) {
    throw ConfigError(std::string(what) + ": timestep " + std::to_string(t) + " outside [" + std::to_string(lowest) +
                      ", " + std::to_string(ns.T()) + "]");
  }
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
}

// a * x + b * y elementwise
Tensor affine(double a, const Tensor& x, double b, const Tensor& y) {
  Tensor out(x.shape());
  for (std::size_t k = 0; k < out.numel(); ++k) out[k] = a * x[k] + b * y[k];
  return out;
}

}  // namespace

Tensor xhat0(const Tensor& x_t, const Tensor& eps_pred, int t, const NoiseSchedule& ns) {
  check_t(t, ns, 1, "xhat0");
  check_same_shape(x_t, eps_pred, "xhat0");
  const double ab = ns.alpha_bar(t);
  const double inv = 1.0 / std::sqrt(ab);
  return affine(inv, x_t, -std::sqrt(1.0 - ab) * inv, eps_pred);
}

Tensor posterior_mean(const Tensor& x_t, const Tensor& x0_hat, int t, const NoiseSchedule& ns) {
  check_t(t, ns, 2, "posterior_mean");
  check_same_shape(x_t, x0_hat, "posterior_mean");
  const double ab = ns.alpha_bar(t), ab_prev = ns.alpha_bar(t - 1);
  const double c0 = std::sqrt(ab_prev) * ns.sigma(t) / (1.0 - ab);
  const double ct = std::sqrt(ns.alpha(t)) * (1.0 - ab_prev) / (1.0 - ab);
  return affine(c0, x0_hat, ct, x_t);
}

Tensor reverse_step(const Tensor& x_t, const Tensor& eps_pred, int t, const NoiseSchedule& ns, const Tensor* z,
                    NoiseScale scale) {
  check_t(t, ns, 1, "reverse_step");
  check_same_shape(x_t, eps_pred, "reverse_step");
  const double s = ns.sigma(t);
  const double a = 1.0 / std::sqrt(1.0 - s);
  Tensor out = affine(a, x_t, -a * s / std::sqrt(1.0 - ns.alpha_bar(t)), eps_pred);
  if (z) {
    check_same_shape(x_t, *z, "reverse_step noise");
    const double c = scale == NoiseScale::kSqrtSigma ? std::sqrt(s) : s;
    for (std::size_t k = 0; k < out.numel(); ++k) out[k] += c * (*z)[k];
  }
  return out;
}

Tensor ddim_jump(const Tensor& x_t, const Tensor& eps_pred, int t, int t_next, const NoiseSchedule& ns) {
  check_t(t, ns, 1, "ddim_jump");
  if (t_next < 0 || t_next >= t) throw ConfigError("ddim_jump target must lie in [0, t)");
  const Tensor x0 = xhat0(x_t, eps_pred, t, ns);
  const double ab = ns.alpha_bar(t_next);
  return affine(std::sqrt(ab), x0, std::sqrt(1.0 - ab), eps_pred);
}

std::vector<int> timestep_sequence(int T, int steps) {
  if (T < 1 || steps < 1 || steps > T) {
    throw ConfigError("cannot pick " + std::to_string(steps) + " steps out of T=" + std::to_string(T));
  }
  std::vector<int> seq;
  seq.reserve(static_cast<std::size_t>(steps));
  if (steps == 1) return {T};
  const double stride = static_cast<double>(T - 1) / static_cast<double>(steps - 1);
  for (int i = 0; i < steps; ++i) seq.push_back(static_cast<int>(std::lround(T - i * stride)));
  return seq;
}

std::uint64_t chain_seed(std::uint64_t master, std::size_t chain) {
  return derive_seed(derive_seed(master, "chains"), static_cast<std::uint64_t>(chain));
}

std::uint64_t noise_seed(std::uint64_t chain_seed, int t) {
  return derive_seed(derive_seed(chain_seed, "z"), static_cast<std::uint64_t>(t));
}

std::vector<double> initial_state(std::uint64_t chain_seed, std::size_t dim) {
  Rng rng(chain_seed, "x_T");
  std::vector<double> out(dim);
  for (double& v : out) v = rng.normal();
  return out;
}

std::vector<double> ancestral_noise(std::uint64_t z_seed, std::size_t dim) {
  Rng rng(z_seed);
  std::vector<double> out(dim);
  for (double& v : out) v = rng.normal();
  return out;
}

SampleOutput sample(const EpsModel& model, const NoiseSchedule& ns, const SamplerConfig& cfg, std::size_t n,
                    const Normalizer* norm, const StepHook& hook) {
  const std::size_t D = model.dim();
  Tensor x_T(Shape{n, D});
  std::vector<std::uint64_t> seeds(n);
  std::vector<std::size_t> chains(n);
  for (std::size_t c = 0; c < n; ++c) {
    seeds[c] = chain_seed(cfg.seed, c);
    chains[c] = c;
    const auto x = initial_state(seeds[c], D);
    std::copy(x.begin(), x.end(), x_T.row(c).begin());
  }
  return sample_from(model, ns, cfg, x_T, seeds, chains, norm, hook);
}

namespace {

std::vector<double> to_data_row(const Tensor& x, std::size_t row, const Normalizer* norm) {
  std::vector<double> out(x.row(row).begin(), x.row(row).end());
  if (norm) {
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = out[j] * norm->scale + norm->shift[j];
  }
  return out;
}

}  // namespace

SampleOutput sample_from(const EpsModel& model, const NoiseSchedule& ns, const SamplerConfig& cfg, const Tensor& x_T,
                         std::span<const std::uint64_t> seeds, std::span<const std::size_t> chains,
                         const Normalizer* norm, const StepHook& hook,
                         const std::vector<std::vector<std::uint64_t>>* z_seeds) {
  cfg.validate(ns);
  const std::size_t n = x_T.rows(), D = model.dim();
  if (x_T.rank() != 2 || x_T.cols() != D) {
    throw ShapeError("starting states must be (n x " + std::to_string(D) + "), got " + shape_str(x_T.shape()));
  }
  if (seeds.size() != n || chains.size() != n) throw ShapeError("one seed and chain index per starting state");
  if (norm && norm->shift.size() != D) throw ShapeError("normalizer dimension differs from the model");

  const int steps = cfg.resolved_steps(ns);
  const std::vector<int> seq = timestep_sequence(ns.T(), steps);
  if (z_seeds && z_seeds->size() != n) throw ShapeError("one z-seed list per chain expected");
  const bool full = steps == ns.T();
  const bool noisy = full && cfg.mode == SamplerMode::kAncestral;

  SampleOutput out;
  out.points = Tensor(Shape{n, D});
  out.trajectories.resize(n);
  for (std::size_t c = 0; c < n; ++c) {
    out.trajectories[c].chain = chains[c];
    out.trajectories[c].chain_seed = seeds[c];
    out.trajectories[c].meta.reserve(seq.size());
  }

  for (std::size_t begin = 0; begin < n; begin += cfg.chunk) {
    const std::size_t rows = std::min(cfg.chunk, n - begin);
    Tensor x = slice_rows(x_T, begin, rows);
    const auto chunk_chains = chains.subspan(begin, rows);
    auto record = [&](int t) {
      if (!cfg.record) return;
      for (std::size_t r = 0; r < rows; ++r) {
        auto& tr = out.trajectories[begin + r];
        tr.t.push_back(t);
        tr.states.push_back(to_data_row(x, r, norm));
      }
    };
    record(ns.T());

    std::vector<StepMeta> meta(rows);
    for (std::size_t i = 0; i < seq.size(); ++i) {
      const int t = seq[i];
      const int t_next = i + 1 < seq.size() ? seq[i + 1] : 0;
      for (std::size_t r = 0; r < rows; ++r) {
        meta[r] = StepMeta{};
        meta[r].t = t;
        if (noisy && t > 1) {
          meta[r].z_seed = z_seeds ? (*z_seeds)[begin + r].at(i) : noise_seed(seeds[begin + r], t);
        }
      }
      if (hook) hook(t, chunk_chains, x, meta);

      const Tensor eps = model.predict(x, t);
      if (full) {
        Tensor z;
        if (noisy && t > 1) {
          z = Tensor(Shape{rows, D});
          for (std::size_t r = 0; r < rows; ++r) {
            const auto zr = ancestral_noise(meta[r].z_seed, D);
            std::copy(zr.begin(), zr.end(), z.row(r).begin());
          }
        }
        x = reverse_step(x, eps, t, ns, (noisy && t > 1) ? &z : nullptr, cfg.noise_scale);
      } else {
        x = ddim_jump(x, eps, t, t_next, ns);
      }
      if (!x.all_finite()) {
        throw NumericError("sampler state became non-finite at step " + std::to_string(i + 1) + " (t=" +
                           std::to_string(t) + ")");
      }
      for (std::size_t r = 0; r < rows; ++r) out.trajectories[begin + r].meta.push_back(meta[r]);
      if ((i + 1) % static_cast<std::size_t>(cfg.thin) == 0 || t_next == 0) record(t_next);
    }
    for (std::size_t r = 0; r < rows; ++r) {
      const auto v = to_data_row(x, r, norm);
      std::copy(v.begin(), v.end(), out.points.row(begin + r).begin());
    }
  }
  return out;
}

Trajectory replay(const EpsModel& model, const NoiseSchedule& ns, const SamplerConfig& cfg, const Trajectory& traj,
                  const Normalizer* norm) {
  const auto x = initial_state(traj.chain_seed, model.dim());
  const Tensor x_T(Shape{1, model.dim()}, x);
  std::vector<std::vector<std::uint64_t>> z(1);
  for (const auto& m : traj.meta) z[0].push_back(m.z_seed);
  const std::uint64_t seeds[1] = {traj.chain_seed};
  const std::size_t chains[1] = {traj.chain};
  SamplerConfig c = cfg;
  c.record = true;
  return sample_from(model, ns, c, x_T, seeds, chains, norm, {}, z.empty() || z[0].empty() ? nullptr : &z)
      .trajectories.front();
}

namespace {

std::string chain_file(std::size_t chain) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "chain_%05zu.csv", chain);
  return buf;
}

}  // namespace

void write_trajectories(const std::filesystem::path& dir, const std::vector<Trajectory>& trajs,
                        const SamplerConfig& cfg) {
  using nlohmann::json;
  std::filesystem::create_directories(dir);
  json chains = json::array();
  std::size_t dim = 0;
  for (const auto& tr : trajs) {
    if (!tr.states.empty()) dim = tr.states.front().size();
    std::ostringstream os;
    os << 't';
    for (std::size_t j = 0; j < dim; ++j) os << ",dim_" << j;
    os << '\n';
    for (std::size_t k = 0; k < tr.t.size(); ++k) {
      os << tr.t[k];
      for (double v : tr.states[k]) os << ',' << io::format_double(v);
      os << '\n';
    }
    const std::string file = chain_file(tr.chain);
    io::write_file_atomic(dir / file, os.str());

    json steps = json::array();
    for (const auto& m : tr.meta) {
      steps.push_back({{"t", m.t},
                       {"attacked", m.attacked},
                       {"delta_inf", m.delta_inf},
                       {"loss", m.loss},
                       {"z_seed", std::to_string(m.z_seed)}});
    }
    chains.push_back({{"chain", tr.chain}, {"seed", std::to_string(tr.chain_seed)}, {"file", file}, {"steps", steps}});
  }
  json m;
  m["format"] = "advdiff-trajectories-v1";
  m["dim"] = dim;
  m["n_chains"] = trajs.size();
  m["mode"] = to_string(cfg.mode);
  m["steps"] = cfg.steps;
  m["thin"] = cfg.thin;
  m["noise_scale"] = to_string(cfg.noise_scale);
  m["chains"] = chains;
  io::write_file_atomic(dir / "trajectories.json", m.dump(1) + "\n");
}

std::vector<Trajectory> read_trajectories(const std::filesystem::path& dir) {
  using nlohmann::json;
  json m;
  try {
    m = json::parse(io::read_file(dir / "trajectories.json"));
  } catch (const json::exception& e) {
    throw IoError((dir / "trajectories.json").string() + ": " + e.what());
  }
  if (m.value("format", "") != "advdiff-trajectories-v1") throw IoError("unrecognised trajectory manifest in " + dir.string());
  std::vector<Trajectory> out;
  for (const auto& c : m.at("chains")) {
    Trajectory tr;
    tr.chain = c.at("chain").get<std::size_t>();
    tr.chain_seed = std::stoull(c.at("seed").get<std::string>());
    for (const auto& s : c.at("steps")) {
      StepMeta sm;
      sm.t = s.at("t").get<int>();
      sm.attacked = s.at("attacked").get<bool>();
      sm.delta_inf = s.at("delta_inf").get<double>();
      sm.loss = s.at("loss").get<double>();
      sm.z_seed = std::stoull(s.at("z_seed").get<std::string>());
      tr.meta.push_back(sm);
    }
    std::istringstream is(io::read_file(dir / c.at("file").get<std::string>()));
    std::string line;
    std::getline(is, line);
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      std::vector<double> row;
      std::size_t pos = line.find(',');
      tr.t.push_back(std::stoi(line.substr(0, pos)));
      while (pos != std::string::npos) {
        const std::size_t next = line.find(',', pos + 1);
        row.push_back(io::parse_double(std::string_view(line).substr(pos + 1, next == std::string::npos ? std::string::npos : next - pos - 1)));
        pos = next;
      }
      tr.states.push_back(std::move(row));
    }
    out.push_back(std::move(tr));
  }
  return out;
}

}  // namespace advdiff
