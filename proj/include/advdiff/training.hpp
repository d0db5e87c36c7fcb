#pragma once

// Forward encoding, perturbation crafting, the loss family (plain DDPM,
// invariance baseline, equivariant adversarial regularizer) and the trainer.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advdiff/autodiff.hpp"
#include "advdiff/data.hpp"
#include "advdiff/denoiser.hpp"
#include "advdiff/rng.hpp"
#include "advdiff/schedule.hpp"

namespace advdiff {

enum class LossMode { kDdpm, kInvariance, kRobustRandom, kRobustAdv };
enum class OptimizerKind { kAdam, kSgd };
enum class PerturbationKind { kRandom, kAdversarial };

std::string to_string(LossMode m);
LossMode loss_mode_from_string(const std::string& s);
std::string to_string(OptimizerKind k);
OptimizerKind optimizer_from_string(const std::string& s);

struct TrainConfig {
  LossMode loss_mode = LossMode::kRobustAdv;
  double lambda = 0.3;
  RaySchedule ray;
  std::size_t batch_size = 128;
  std::size_t steps = 1000;
  double lr = 1e-4;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  // The smoothing target eps(x_t) + delta is a constant during backward;
  // false gives the symmetric variant.
  bool detach_target = true;
  // One beta per batch by default; true draws one per row.
  bool per_element_beta = false;
  // Standardize data before training (shift/scale stored in the checkpoint).
  bool normalize = true;
  std::size_t log_every = 10;
  double divergence_factor = 10.0;
  std::size_t divergence_patience = 500;
  std::uint64_t seed = 0;

  void validate() const;
};

/// One perturbation per row; delta is in epsilon units, i.e. it displaces
/// x_t by sqrt(1 - alpha_bar_t) * delta.
struct PerturbationOutcome {
  Tensor delta;
  std::vector<double> beta;       // per row
  std::vector<double> ray_value;  // r_beta(t) per row
  PerturbationKind kind = PerturbationKind::kRandom;
};

// Timestep for row i when `t` is either per-row or a single shared value.
int timestep_at(std::span<const int> t, std::size_t row);

/// x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps
Tensor encode(const Tensor& x0, const Tensor& eps, std::span<const int> t, const NoiseSchedule& ns);

/// x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) (eps + delta); rejects any row with
/// ||delta||_inf above its ray.
Tensor encode_perturbed(const Tensor& x0, const Tensor& eps, const PerturbationOutcome& pert, std::span<const int> t,
                        const NoiseSchedule& ns);

/// delta_i ~ U(-r, r) with r = r_beta(t). Beta is drawn from the ray's range
/// once for all rows unless `per_row_beta`, or fixed via `beta`.
PerturbationOutcome sample_delta_random(const RaySchedule& rs, const NoiseSchedule& ns, std::span<const int> t,
                                        std::size_t rows, std::size_t dim, Rng& rng, bool per_row_beta = false,
                                        std::optional<double> beta = std::nullopt);

/// One FGSM step from `start`:
///   delta_adv = clip_r(delta_ran + r/sqrt(3) * sign(grad J)),
///   J = ||eps(x_t + s delta_ran) - eps(x_t)||^2, s = sqrt(1 - ab_t),
/// with the gradient taken w.r.t. the perturbed input while the clean
/// prediction is held constant. sign(0) = 0. Nothing leaks into any caller
/// tape.
PerturbationOutcome craft_adversarial(const DenoiserParams& p, const Tensor& x_t, std::span<const int> t,
                                      const NoiseSchedule& ns, const PerturbationOutcome& start);

PerturbationOutcome sample_delta_adversarial(const DenoiserParams& p, const Tensor& x_t, std::span<const int> t,
                                             const RaySchedule& rs, const NoiseSchedule& ns, Rng& rng);

/// Batch mean of J for a given perturbation.
double perturbation_objective(const DenoiserParams& p, const Tensor& x_t, std::span<const int> t,
                              const NoiseSchedule& ns, const Tensor& delta);

/// lambda_t = lambda * sqrt(3) / r_beta(t)
double lambda_t(double lambda, double ray_value);

struct LossTerms {
  Var total;
  Var dm;   // ||eps(x_t) - eps||^2, batch mean
  Var reg;  // regularizer, batch mean; invalid when absent
};

// All losses are recorded on the tape that owns `vars`.
LossTerms loss_ddpm(const DenoiserParams& p, const ParamVars& vars, const Tensor& x_t, const Tensor& eps,
                    std::span<const int> t);

/// L_DM + mean_i lambda_i ||eps(x_adv_i) - eps(x_t_i)||^2
LossTerms loss_invariance(const DenoiserParams& p, const ParamVars& vars, const Tensor& x_t, const Tensor& x_t_adv,
                          const Tensor& eps, std::span<const int> t, std::span<const double> lambda,
                          bool detach_target = true);

/// L_DM + mean_i lambda_i ||eps(x_adv_i) - [eps(x_t_i) + delta_i]||^2
LossTerms loss_at(const DenoiserParams& p, const ParamVars& vars, const Tensor& x_t, const Tensor& x_t_adv,
                  const Tensor& delta, const Tensor& eps, std::span<const int> t, std::span<const double> lambda,
                  bool detach_target = true);

class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, std::size_t num_params);
  // params and grads are parallel lists of equally shaped tensors.
  void step(std::span<Tensor* const> params, std::span<const Tensor> grads);
  std::size_t iterations() const { return t_; }

 private:
  OptimizerKind kind_;
  double lr_, b1_, b2_, eps_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

struct TrainReportRow {
  std::size_t step;
  double loss_dm;
  double loss_reg;
  double grad_norm;
  double seconds;
};

struct TrainReport {
  std::vector<TrainReportRow> rows;
  double total_seconds = 0.0;

  // Header: step,loss_dm,loss_reg,grad_norm,seconds
  void write_csv(const std::filesystem::path& path) const;
};

struct TrainResult {
  DenoiserParams params;
  TrainReport report;
};

// Called after every optimizer step; return false to stop early.
using TrainCallback = std::function<bool(std::size_t step, const TrainReportRow&)>;

TrainResult train(const TrainConfig& cfg, const Architecture& arch, const SampleSet& data, const NoiseSchedule& ns,
                  const TrainCallback& callback = {});

}  // namespace advdiff
