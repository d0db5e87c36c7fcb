#include "advdiff/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>

#include "advdiff/error.hpp"
#include "advdiff/io.hpp"
#include "advdiff/serialize.hpp"

namespace advdiff {

std::string to_string(LossMode m) {
  switch (m) {
    case LossMode::kDdpm: return "ddpm";
    case LossMode::kInvariance: return "invariance";
    case LossMode::kRobustRandom: return "robust_random";
    case LossMode::kRobustAdv: return "robust_adv";
  }
  return "?";
}

LossMode loss_mode_from_string(const std::string& s) {
  if (s == "ddpm") return LossMode::kDdpm;
  if (s == "invariance") return LossMode::kInvariance;
  if (s == "robust_random") return LossMode::kRobustRandom;
  if (s == "robust_adv") return LossMode::kRobustAdv;
  throw ConfigError("unknown loss_mode '" + s + "' (ddpm, invariance, robust_random, robust_adv)");
}

std::string to_string(OptimizerKind k) { return k == OptimizerKind::kAdam ? "adam" : "sgd"; }

OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "adam") return OptimizerKind::kAdam;
  if (s == "sgd") return OptimizerKind::kSgd;
  throw ConfigError("unknown optimizer '" + s + "'");
}

void TrainConfig::validate() const {
  ray.validate();
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be finite and >= 0");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (steps == 0) throw ConfigError("steps must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
    throw ConfigError("adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (log_every == 0) throw ConfigError("log_every must be >= 1");
  if (!(divergence_factor > 1.0)) throw ConfigError("divergence_factor must exceed 1");
}

int timestep_at(std::span<const int> t, std::size_t row) {
  if (t.empty()) throw ShapeError("no timesteps given");
  return t.size() == 1 ? t[0] : t[row];
}

namespace {

void check_rows(std::span<const int> t, std::size_t rows, const char* what) {
  if (t.size() != 1 && t.size() != rows) {
    throw ShapeError(std::string(what) + ": " + std::to_string(t.size()) + " timesteps for " + std::to_string(rows) +
                     " rows");
  }
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
}

double sign(double g) { return g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0); }

}  // namespace

Tensor encode(const Tensor& x0, const Tensor& eps, std::span<const int> t, const NoiseSchedule& ns) {
  check_same_shape(x0, eps, "encode");
  check_rows(t, x0.rows(), "encode");
  Tensor out(x0.shape());
  for (std::size_t i = 0; i < x0.rows(); ++i) {
    const double ab = ns.alpha_bar(timestep_at(t, i));
    const double a = std::sqrt(ab), s = std::sqrt(1.0 - ab);
    auto o = out.row(i);
    auto xr = x0.row(i), er = eps.row(i);
    for (std::size_t j = 0; j < o.size(); ++j) o[j] = a * xr[j] + s * er[j];
  }
  return out;
}

Tensor encode_perturbed(const Tensor& x0, const Tensor& eps, const PerturbationOutcome& pert, std::span<const int> t,
                        const NoiseSchedule& ns) {
  check_same_shape(x0, pert.delta, "encode_perturbed");
  if (pert.ray_value.size() != x0.rows()) throw ShapeError("encode_perturbed: one ray value per row expected");
  for (std::size_t i = 0; i < x0.rows(); ++i) {
    const double m = max_abs(pert.delta.row(i));
    if (m > pert.ray_value[i] * (1.0 + 1e-12)) {
      throw NumericError("perturbation row " + std::to_string(i) + " has |delta|_inf = " + io::format_double(m) +
                         " beyond its ray " + io::format_double(pert.ray_value[i]));
    }
  }
  Tensor shifted = eps;
  for (std::size_t k = 0; k < shifted.numel(); ++k) shifted[k] += pert.delta[k];
  return encode(x0, shifted, t, ns);
}

PerturbationOutcome sample_delta_random(const RaySchedule& rs, const NoiseSchedule& ns, std::span<const int> t,
                                        std::size_t rows, std::size_t dim, Rng& rng, bool per_row_beta,
                                        std::optional<double> beta) {
  check_rows(t, rows, "sample_delta_random");
  PerturbationOutcome out;
  out.kind = PerturbationKind::kRandom;
  out.delta = Tensor(Shape{rows, dim});
  const double shared = beta ? *beta : rng.uniform(rs.beta_low, rs.beta_high);
  for (std::size_t i = 0; i < rows; ++i) {
    const double b = (per_row_beta && !beta) ? rng.uniform(rs.beta_low, rs.beta_high) : shared;
    const double r = ray(rs, ns, timestep_at(t, i), b);
    out.beta.push_back(b);
    out.ray_value.push_back(r);
    for (double& v : out.delta.row(i)) v = rng.uniform(-r, r);
  }
  return out;
}

namespace {

Tensor displace(const Tensor& x_t, const Tensor& delta, std::span<const int> t, const NoiseSchedule& ns) {
  Tensor out = x_t;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    const double s = std::sqrt(1.0 - ns.alpha_bar(timestep_at(t, i)));
    auto o = out.row(i);
    auto d = delta.row(i);
    for (std::size_t j = 0; j < o.size(); ++j) o[j] += s * d[j];
  }
  return out;
}

}  // namespace

PerturbationOutcome craft_adversarial(const DenoiserParams& p, const Tensor& x_t, std::span<const int> t,
                                      const NoiseSchedule& ns, const PerturbationOutcome& start) {
  check_same_shape(x_t, start.delta, "craft_adversarial");
  check_rows(t, x_t.rows(), "craft_adversarial");
  Tape tape;
  const ParamVars vars = bind_params(tape, p, false);
  const Var clean = tape.detach(denoiser_forward(p, vars, tape.constant(x_t), t));
  const Var moved = tape.leaf(displace(x_t, start.delta, t, ns));
  const Var j = l2_norm_sq(denoiser_forward(p, vars, moved, t) - clean);
  const Var wrt[1] = {moved};
  const Tensor g = tape.backward(j, wrt)[0];
  g.check_finite("adversarial perturbation gradient");

  PerturbationOutcome out = start;
  out.kind = PerturbationKind::kAdversarial;
  for (std::size_t i = 0; i < x_t.rows(); ++i) {
    const double r = start.ray_value[i];
    const double step = r / std::sqrt(3.0);
    auto d = out.delta.row(i);
    auto gr = g.row(i);
    for (std::size_t k = 0; k < d.size(); ++k) d[k] = std::clamp(d[k] + step * sign(gr[k]), -r, r);
  }
  return out;
}

PerturbationOutcome sample_delta_adversarial(const DenoiserParams& p, const Tensor& x_t, std::span<const int> t,
                                             const RaySchedule& rs, const NoiseSchedule& ns, Rng& rng) {
  const PerturbationOutcome start = sample_delta_random(rs, ns, t, x_t.rows(), x_t.cols(), rng);
  return craft_adversarial(p, x_t, t, ns, start);
}

double perturbation_objective(const DenoiserParams& p, const Tensor& x_t, std::span<const int> t,
                              const NoiseSchedule& ns, const Tensor& delta) {
  check_same_shape(x_t, delta, "perturbation_objective");
  Tape tape;
  const ParamVars vars = bind_params(tape, p, false);
  const Tensor a = denoiser_forward(p, vars, tape.constant(x_t), t).value();
  const Tensor b = denoiser_forward(p, vars, tape.constant(displace(x_t, delta, t, ns)), t).value();
  double total = 0.0;
  for (std::size_t k = 0; k < a.numel(); ++k) total += (b[k] - a[k]) * (b[k] - a[k]);
  return total / static_cast<double>(x_t.rows());
}

double lambda_t(double lambda, double ray_value) {
  if (!(ray_value > 0.0)) throw NumericError("ray value must be positive");
  return lambda * std::sqrt(3.0) / ray_value;
}

namespace {

Var dm_term(const DenoiserParams& p, const ParamVars& vars, const Tensor& x_t, const Tensor& eps,
            std::span<const int> t, Var* pred_out) {
  check_same_shape(x_t, eps, "diffusion loss");
  check_rows(t, x_t.rows(), "diffusion loss");
  Tape& tape = *vars.weights.front().tape();
  const Var pred = denoiser_forward(p, vars, tape.constant(x_t), t);
  if (pred_out) *pred_out = pred;
  return scale(l2_norm_sq(pred - tape.constant(eps)), 1.0 / static_cast<double>(x_t.rows()));
}

Var weighted_rows(Var sq_residual, std::span<const double> lambda, std::size_t rows, std::size_t cols) {
  if (lambda.size() != 1 && lambda.size() != rows) throw ShapeError("one lambda_t per row expected");
  std::vector<double> w(rows);
  for (std::size_t i = 0; i < rows; ++i) w[i] = lambda.size() == 1 ? lambda[0] : lambda[i];
  Tape& tape = *sq_residual.tape();
  const Var weights = broadcast_cols(tape.constant(Tensor::vector(std::move(w))), cols);
  return scale(sum(weights * sq_residual), 1.0 / static_cast<double>(rows));
}

bool all_zero(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; });
}

}  // namespace

LossTerms loss_ddpm(const DenoiserParams& p, const ParamVars& vars, const Tensor& x_t, const Tensor& eps,
                    std::span<const int> t) {
  LossTerms out;
  out.dm = dm_term(p, vars, x_t, eps, t, nullptr);
  out.total = out.dm;
  return out;
}

LossTerms loss_invariance(const DenoiserParams& p, const ParamVars& vars, const Tensor& x_t, const Tensor& x_t_adv,
                          const Tensor& eps, std::span<const int> t, std::span<const double> lambda,
                          bool detach_target) {
  check_same_shape(x_t, x_t_adv, "loss_invariance");
  LossTerms out;
  Var pred;
  out.dm = dm_term(p, vars, x_t, eps, t, &pred);
  out.total = out.dm;
  if (all_zero(lambda)) return out;
  Tape& tape = *pred.tape();
  const Var target = detach_target ? tape.detach(pred) : pred;
  const Var r = denoiser_forward(p, vars, tape.constant(x_t_adv), t) - target;
  out.reg = weighted_rows(r * r, lambda, x_t.rows(), x_t.cols());
  out.total = out.dm + out.reg;
  return out;
}

LossTerms loss_at(const DenoiserParams& p, const ParamVars& vars, const Tensor& x_t, const Tensor& x_t_adv,
                  const Tensor& delta, const Tensor& eps, std::span<const int> t, std::span<const double> lambda,
                  bool detach_target) {
  check_same_shape(x_t, x_t_adv, "loss_at");
  check_same_shape(x_t, delta, "loss_at");
  LossTerms out;
  Var pred;
  out.dm = dm_term(p, vars, x_t, eps, t, &pred);
  out.total = out.dm;
  if (all_zero(lambda)) return out;
  Tape& tape = *pred.tape();
  const Var target = (detach_target ? tape.detach(pred) : pred) + tape.constant(delta);
  const Var r = denoiser_forward(p, vars, tape.constant(x_t_adv), t) - target;
  out.reg = weighted_rows(r * r, lambda, x_t.rows(), x_t.cols());
  out.total = out.dm + out.reg;
  return out;
}

Optimizer::Optimizer(const TrainConfig& cfg, std::size_t num_params)
    : kind_(cfg.optimizer), lr_(cfg.lr), b1_(cfg.adam_beta1), b2_(cfg.adam_beta2), eps_(cfg.adam_eps) {
  m_.resize(num_params);
  v_.resize(num_params);
}

void Optimizer::step(std::span<Tensor* const> params, std::span<const Tensor> grads) {
  if (params.size() != grads.size() || params.size() != m_.size()) {
    throw ShapeError("optimizer got " + std::to_string(params.size()) + " tensors and " +
                     std::to_string(grads.size()) + " gradients, expected " + std::to_string(m_.size()));
  }
  ++t_;
  if (kind_ == OptimizerKind::kSgd) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto w = params[i]->data();
      auto g = grads[i].data();
      for (std::size_t k = 0; k < w.size(); ++k) w[k] -= lr_ * g[k];
    }
    return;
  }
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i]->data();
    auto g = grads[i].data();
    if (g.size() != w.size()) throw ShapeError("gradient and parameter sizes differ");
    auto& m = m_[i];
    auto& v = v_[i];
    if (m.empty()) {
      m.assign(w.size(), 0.0);
      v.assign(w.size(), 0.0);
    }
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = b1_ * m[k] + (1.0 - b1_) * g[k];
      v[k] = b2_ * v[k] + (1.0 - b2_) * g[k] * g[k];
      w[k] -= lr_ * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
    }
  }
}

void TrainReport::write_csv(const std::filesystem::path& path) const {
  std::ostringstream os;
  os << "step,loss_dm,loss_reg,grad_norm,seconds\n";
  for (const auto& r : rows) {
    os << r.step << ',' << io::format_double(r.loss_dm) << ',' << io::format_double(r.loss_reg) << ','
       << io::format_double(r.grad_norm) << ',' << io::format_double(r.seconds) << '\n';
  }
  io::write_file_atomic(path, os.str());
}

TrainResult train(const TrainConfig& cfg, const Architecture& arch, const SampleSet& data, const NoiseSchedule& ns,
                  const TrainCallback& callback) {
  cfg.validate();
  arch.validate();
  if (data.size() == 0) throw ConfigError("training set is empty");
  if (data.dim() != arch.data_dim) {
    throw ShapeError("training data has dimension " + std::to_string(data.dim()) + " but the denoiser expects " +
                     std::to_string(arch.data_dim));
  }
  if (arch.T != ns.T()) {
    throw ConfigError("denoiser T=" + std::to_string(arch.T) + " differs from schedule T=" + std::to_string(ns.T()));
  }

  TrainResult result;
  DenoiserParams& p = result.params;
  p = init_denoiser(arch, derive_seed(cfg.seed, "init"));
  p.normalizer = cfg.normalize ? Normalizer::fit(data.points) : Normalizer::identity(data.dim());
  p.schedule_hash = io::hash_hex(ns.hash());
  p.train_config_hash = config_hash(Json(cfg));
  const Tensor x_all = p.normalizer.to_model(data.points);

  Rng batch_rng(cfg.seed, "train/batch");
  Rng time_rng(cfg.seed, "train/time");
  Rng eps_rng(cfg.seed, "train/eps");
  Rng delta_rng(cfg.seed, "train/delta");

  std::vector<Tensor*> targets;
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    targets.push_back(&p.weights[l]);
    targets.push_back(&p.biases[l]);
  }
  Optimizer opt(cfg, targets.size());

  const std::size_t B = cfg.batch_size, D = data.dim();
  std::vector<std::size_t> index(B);
  std::vector<int> t(B);
  std::vector<double> lambdas(B);
  Tensor eps(Shape{B, D});

  // Divergence watch: exponential moving average of the total loss.
  double ema = 0.0, ema_min = std::numeric_limits<double>::infinity();
  std::size_t above = 0;
  constexpr std::size_t kWarmup = 100;

  double acc_dm = 0.0, acc_reg = 0.0, acc_gn = 0.0;
  std::size_t acc_n = 0;
  const auto t0 = std::chrono::steady_clock::now();

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    for (auto& i : index) i = static_cast<std::size_t>(batch_rng.uniform_int(0, static_cast<std::int64_t>(data.size()) - 1));
    for (auto& ti : t) ti = static_cast<int>(time_rng.uniform_int(1, ns.T()));
    for (double& e : eps.data()) e = eps_rng.normal();
    const Tensor x0 = gather_rows(x_all, index);
    const Tensor x_t = encode(x0, eps, t, ns);
    PerturbationOutcome pert = sample_delta_random(cfg.ray, ns, t, B, D, delta_rng, cfg.per_element_beta);

    Tape tape;
    const ParamVars vars = bind_params(tape, p, true);
    LossTerms loss;
    if (cfg.loss_mode == LossMode::kDdpm || cfg.lambda == 0.0) {
      loss = loss_ddpm(p, vars, x_t, eps, t);
    } else {
      if (cfg.loss_mode != LossMode::kRobustRandom) pert = craft_adversarial(p, x_t, t, ns, pert);
      const Tensor x_adv = encode_perturbed(x0, eps, pert, t, ns);
      for (std::size_t i = 0; i < B; ++i) lambdas[i] = lambda_t(cfg.lambda, pert.ray_value[i]);
      loss = cfg.loss_mode == LossMode::kInvariance
                 ? loss_invariance(p, vars, x_t, x_adv, eps, t, lambdas, cfg.detach_target)
                 : loss_at(p, vars, x_t, x_adv, pert.delta, eps, t, lambdas, cfg.detach_target);
    }

    const double total = loss.total.value().item();
    const double dm = loss.dm.value().item();
    const double reg = loss.reg.valid() ? loss.reg.value().item() : 0.0;
    if (!std::isfinite(total)) throw NumericError("training loss became non-finite at step " + std::to_string(step));

    const std::vector<Var> wrt = vars.all();
    const std::vector<Tensor> grads = tape.backward(loss.total, wrt);
    double gn2 = 0.0;
    for (const auto& g : grads) gn2 += squared_norm(g.data());
    const double grad_norm = std::sqrt(gn2);
    if (!std::isfinite(grad_norm)) throw NumericError("gradient became non-finite at step " + std::to_string(step));
    opt.step(targets, grads);
    p.step = step;

    ema = step == 1 ? total : 0.99 * ema + 0.01 * total;
    if (step > kWarmup) {
      ema_min = std::min(ema_min, ema);
      above = ema > cfg.divergence_factor * ema_min ? above + 1 : 0;
      if (above >= cfg.divergence_patience) {
        throw NumericError("training diverged: running loss " + io::format_double(ema) + " stayed above " +
                           io::format_double(cfg.divergence_factor) + "x its minimum " + io::format_double(ema_min) +
                           " for " + std::to_string(above) + " steps");
      }
    }

    acc_dm += dm;
    acc_reg += reg;
    acc_gn += grad_norm;
    ++acc_n;
    TrainReportRow row{step, dm, reg, grad_norm, 0.0};
    if (step % cfg.log_every == 0 || step == cfg.steps) {
      const double n = static_cast<double>(acc_n);
      row = {step, acc_dm / n, acc_reg / n, acc_gn / n,
             std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
      result.report.rows.push_back(row);
      acc_dm = acc_reg = acc_gn = 0.0;
      acc_n = 0;
    }
    if (callback && !callback(step, row)) break;
  }
  if (!p.all_finite()) throw NumericError("trained parameters contain non-finite values");
  result.report.total_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

}  // namespace advdiff
