#include "advdiff/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <utility>
#include <sstream>

#include "advdiff/error.hpp"
#include "advdiff/io.hpp"

namespace advdiff {

std::string to_string(AttackKind k) { return k == AttackKind::kFgsmTraj ? "fgsm_traj" : "pgd_traj"; }

AttackKind attack_kind_from_string(const std::string& s) {
  if (s == "fgsm_traj") return AttackKind::kFgsmTraj;
  if (s == "pgd_traj") return AttackKind::kPgdTraj;
  throw ConfigError("unknown attack kind '" + s + "' (fgsm_traj, pgd_traj)");
}

std::string to_string(TimestepSelection s) {
  switch (s) {
    case TimestepSelection::kEvenlySpaced: return "evenly_spaced";
    case TimestepSelection::kPrefixFromT: return "prefix_from_T";
    case TimestepSelection::kSuffixTo0: return "suffix_to_0";
  }
  return "?";
}

TimestepSelection timestep_selection_from_string(const std::string& s) {
  if (s == "evenly_spaced") return TimestepSelection::kEvenlySpaced;
  if (s == "prefix_from_T") return TimestepSelection::kPrefixFromT;
  if (s == "suffix_to_0") return TimestepSelection::kSuffixTo0;
  throw ConfigError("unknown timestep selection '" + s + "' (evenly_spaced, prefix_from_T, suffix_to_0)");
}

std::string to_string(AttackLoss l) { return l == AttackLoss::kMuTilde ? "mu_tilde" : "eps"; }

AttackLoss attack_loss_from_string(const std::string& s) {
  if (s == "mu_tilde") return AttackLoss::kMuTilde;
  if (s == "eps") return AttackLoss::kEps;
  throw ConfigError("unknown attack loss '" + s + "' (mu_tilde, eps)");
}

std::string to_string(AttackGradient g) { return g == AttackGradient::kBoth ? "both" : "perturbed"; }

AttackGradient attack_gradient_from_string(const std::string& s) {
  if (s == "both") return AttackGradient::kBoth;
  if (s == "perturbed") return AttackGradient::kPerturbed;
  throw ConfigError("unknown attack gradient '" + s + "' (both, perturbed)");
}

void AttackConfig::validate() const {
  if (!(attack_ratio >= 0.0 && attack_ratio <= 1.0)) throw ConfigError("attack_ratio must lie in [0, 1]");
  if (!(phi >= 0.0) || !std::isfinite(phi)) throw ConfigError("phi must be finite and >= 0");
  if (pgd_iters < 1) throw ConfigError("pgd_iters must be >= 1");
}

namespace {

double sign(double g) { return g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0); }

// Per-row objective recorded on `tape`: returns the (rows x D) residual whose
// squared row norms are the losses.
Var residual(const EpsModel& model, Tape& tape, Var clean_x, Var moved_x, int t, const NoiseSchedule& ns,
             const AttackConfig& cfg) {
  const Var e_clean = model.trace(tape, clean_x, t);
  const Var e_moved = model.trace(tape, moved_x, t);
  if (cfg.loss == AttackLoss::kEps) return e_clean - e_moved;

  const double ab = ns.alpha_bar(t), ab_prev = ns.alpha_bar(t - 1);
  const double inv = 1.0 / std::sqrt(ab), se = std::sqrt(1.0 - ab);
  const double c0 = std::sqrt(ab_prev) * ns.sigma(t) / (1.0 - ab);
  const double ct = std::sqrt(ns.alpha(t)) * (1.0 - ab_prev) / (1.0 - ab);
  auto mu = [&](Var x, Var e) {
    Var x0 = inv * x - (se * inv) * e;
    if (cfg.detach_xhat0) x0 = tape.detach(x0);
    return c0 * x0 + ct * x;
  };
  return mu(clean_x, e_clean) - mu(moved_x, e_moved);
}

std::vector<double> row_sq_norms(const Tensor& r) {
  std::vector<double> out(r.rows());
  for (std::size_t i = 0; i < r.rows(); ++i) out[i] = squared_norm(r.row(i));
  return out;
}

// Gradient of sum_rows L at x_t + delta, w.r.t. x_t (kBoth) or the perturbed
// input (kPerturbed). Also returns the per-row losses.
Tensor attack_gradient(const EpsModel& model, const Tensor& x_t, const Tensor& delta, int t, const NoiseSchedule& ns,
                       const AttackConfig& cfg, std::vector<double>* loss) {
  Tape tape;
  Var wrt;
  Var clean, moved;
  if (cfg.gradient == AttackGradient::kBoth) {
    wrt = tape.leaf(x_t);
    clean = wrt;
    moved = wrt + tape.constant(delta);
  } else {
    clean = tape.constant(x_t);
    Tensor xp = x_t;
    for (std::size_t k = 0; k < xp.numel(); ++k) xp[k] += delta[k];
    wrt = tape.leaf(std::move(xp));
    moved = wrt;
  }
  const Var r = residual(model, tape, clean, moved, t, ns, cfg);
  if (loss) *loss = row_sq_norms(r.value());
  const Var wrt_list[1] = {wrt};
  Tensor g = tape.backward(l2_norm_sq(r), wrt_list)[0];
  if (!g.all_finite()) throw NumericError("attack gradient is non-finite at t=" + std::to_string(t));
  return g;
}

void check_inputs(const EpsModel& model, const Tensor& x_t, int t, const NoiseSchedule& ns, const Tensor& noise) {
  if (t < 2 || t > ns.T()) throw ConfigError("attacks need 2 <= t <= T, got t=" + std::to_string(t));
  if (x_t.rank() != 2 || x_t.cols() != model.dim()) throw ShapeError("attack input has shape " + shape_str(x_t.shape()));
  if (noise.shape() != x_t.shape()) throw ShapeError("attack noise must match the state shape");
}

Tensor start_noise(const Tensor& x_t, Rng& rng) {
  Tensor z(x_t.shape());
  for (double& v : z.data()) v = rng.normal();
  return z;
}

// x_adv = x_t + delta, with the legitimacy bound ||delta||_inf <= sigma(t)
// enforced on delta itself.
void apply(AttackStepResult& res, const Tensor& x_t, const Tensor& delta, double bound, int t) {
  res.x_adv = x_t;
  res.delta_inf.resize(x_t.rows());
  for (std::size_t i = 0; i < x_t.rows(); ++i) {
    const double m = max_abs(delta.row(i));
    if (!(m <= bound)) {
      throw Error("attack at t=" + std::to_string(t) + " produced a perturbation of size " + io::format_double(m) +
                  ", beyond sigma(t) = " + io::format_double(bound));
    }
    res.delta_inf[i] = m;
  }
  for (std::size_t k = 0; k < delta.numel(); ++k) res.x_adv[k] += delta[k];
}

}  // namespace

std::vector<double> attack_objective(const EpsModel& model, const Tensor& x_t, const Tensor& delta, int t,
                                     const NoiseSchedule& ns, const AttackConfig& cfg) {
  check_inputs(model, x_t, t, ns, delta);
  Tape tape;
  Tensor xp = x_t;
  for (std::size_t k = 0; k < xp.numel(); ++k) xp[k] += delta[k];
  return row_sq_norms(residual(model, tape, tape.constant(x_t), tape.constant(std::move(xp)), t, ns, cfg).value());
}

AttackStepResult attack_step_fgsm(const EpsModel& model, const Tensor& x_t, int t, const NoiseSchedule& ns,
                                  const AttackConfig& cfg, const Tensor& noise) {
  check_inputs(model, x_t, t, ns, noise);
  const double s = ns.sigma(t);
  Tensor delta(x_t.shape());
  for (std::size_t k = 0; k < delta.numel(); ++k) delta[k] = cfg.phi * s * noise[k];
  AttackStepResult res;
  const Tensor g = attack_gradient(model, x_t, delta, t, ns, cfg, &res.loss);
  Tensor step(x_t.shape());
  for (std::size_t k = 0; k < g.numel(); ++k) step[k] = s * sign(g[k]);
  apply(res, x_t, step, s, t);
  return res;
}

AttackStepResult attack_step_fgsm(const EpsModel& model, const Tensor& x_t, int t, const NoiseSchedule& ns,
                                  const AttackConfig& cfg, Rng& rng) {
  return attack_step_fgsm(model, x_t, t, ns, cfg, start_noise(x_t, rng));
}

AttackStepResult attack_step_pgd(const EpsModel& model, const Tensor& x_t, int t, const NoiseSchedule& ns,
                                 const AttackConfig& cfg, const Tensor& noise) {
  check_inputs(model, x_t, t, ns, noise);
  const double s = ns.sigma(t);
  const double step = s / static_cast<double>(cfg.pgd_iters);
  Tensor delta(x_t.shape());
  for (std::size_t k = 0; k < delta.numel(); ++k) delta[k] = cfg.phi * s * noise[k];
  AttackStepResult res;
  for (int n = 0; n < cfg.pgd_iters; ++n) {
    const Tensor g = attack_gradient(model, x_t, delta, t, ns, cfg, n == 0 ? &res.loss : nullptr);
    for (std::size_t k = 0; k < g.numel(); ++k) delta[k] += step * sign(g[k]);
  }
  for (double& v : delta.data()) v = std::clamp(v, -s, s);
  apply(res, x_t, delta, s, t);
  return res;
}

AttackStepResult attack_step_pgd(const EpsModel& model, const Tensor& x_t, int t, const NoiseSchedule& ns,
                                 const AttackConfig& cfg, Rng& rng) {
  return attack_step_pgd(model, x_t, t, ns, cfg, start_noise(x_t, rng));
}

std::vector<int> attacked_timesteps(const std::vector<int>& executed, double ratio, TimestepSelection sel) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("attack_ratio must lie in [0, 1]");
  std::vector<int> eligible;
  for (int t : executed)
    if (t >= 2) eligible.push_back(t);
  const double want = std::ceil(ratio * static_cast<double>(executed.size()) - 1e-9);
  const std::size_t count = std::min(static_cast<std::size_t>(std::max(0.0, want)), eligible.size());
  std::vector<int> out;
  if (count == 0) return out;
  switch (sel) {
    case TimestepSelection::kPrefixFromT:
      out.assign(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(count));
      break;
    case TimestepSelection::kSuffixTo0:
      out.assign(eligible.end() - static_cast<std::ptrdiff_t>(count), eligible.end());
      break;
    case TimestepSelection::kEvenlySpaced:
      for (std::size_t j = 0; j < count; ++j) out.push_back(eligible[j * eligible.size() / count]);
      break;
  }
  return out;
}

std::uint64_t attack_seed(std::uint64_t master, std::size_t chain, int t) {
  return derive_seed(derive_seed(derive_seed(master, "attack"), static_cast<std::uint64_t>(chain)),
                     static_cast<std::uint64_t>(t));
}

SampleOutput attacked_sample(const EpsModel& model, const NoiseSchedule& ns, const SamplerConfig& sampler,
                             const AttackConfig& cfg, std::size_t n, const Normalizer* norm) {
  cfg.validate();
  sampler.validate(ns);
  const auto executed = timestep_sequence(ns.T(), sampler.resolved_steps(ns));
  const auto chosen = attacked_timesteps(executed, cfg.attack_ratio, cfg.selection);
  const std::set<int> attacked(chosen.begin(), chosen.end());

  StepHook hook = [&](int t, std::span<const std::size_t> chains, Tensor& x, std::span<StepMeta> meta) {
    if (!attacked.count(t)) return;
    Tensor noise(x.shape());
    for (std::size_t r = 0; r < chains.size(); ++r) {
      Rng rng(attack_seed(cfg.seed, chains[r], t));
      for (double& v : noise.row(r)) v = rng.normal();
    }
    AttackStepResult res;
    try {
      res = cfg.kind == AttackKind::kFgsmTraj ? attack_step_fgsm(model, x, t, ns, cfg, noise)
                                              : attack_step_pgd(model, x, t, ns, cfg, noise);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " (attacked sampling, t=" + std::to_string(t) + ")");
    }
    x = std::move(res.x_adv);
    for (std::size_t r = 0; r < meta.size(); ++r) {
      meta[r].attacked = true;
      meta[r].delta_inf = res.delta_inf[r];
      meta[r].loss = res.loss[r];
    }
  };
  return sample(model, ns, sampler, n, norm, attacked.empty() ? StepHook{} : hook);
}

void write_attack_report_csv(const std::filesystem::path& path, const std::vector<Trajectory>& trajs) {
  std::ostringstream os;
  os << "chain,t,attacked,delta_inf_norm,loss_value\n";
  for (const auto& tr : trajs) {
    for (const auto& m : tr.meta) {
      os << tr.chain << ',' << m.t << ',' << (m.attacked ? 1 : 0) << ',' << io::format_double(m.delta_inf) << ','
         << io::format_double(m.loss) << '\n';
    }
  }
  io::write_file_atomic(path, os.str());
}

}  // namespace advdiff
