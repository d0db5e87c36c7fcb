#pragma once

// Inference-time trajectory attacks: a single sign step per attacked
// timestep (FGSM) or N accumulated sign steps with a final projection (PGD).

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "advdiff/denoiser.hpp"
#include "advdiff/rng.hpp"
#include "advdiff/sampler.hpp"
#include "advdiff/schedule.hpp"

namespace advdiff {

enum class AttackKind { kFgsmTraj, kPgdTraj };
enum class TimestepSelection { kEvenlySpaced, kPrefixFromT, kSuffixTo0 };
// kMuTilde: ||mu(x_t, x0_hat) - mu(x', x0_hat')||^2. kEps: ||eps(x_t) - eps(x')||^2.
enum class AttackLoss { kMuTilde, kEps };
// kBoth differentiates w.r.t. x_t through the clean and the perturbed branch
// (x' = x_t + delta); kPerturbed holds the clean branch constant.
enum class AttackGradient { kBoth, kPerturbed };

std::string to_string(AttackKind k);
AttackKind attack_kind_from_string(const std::string& s);
std::string to_string(TimestepSelection s);
TimestepSelection timestep_selection_from_string(const std::string& s);
std::string to_string(AttackLoss l);
AttackLoss attack_loss_from_string(const std::string& s);
std::string to_string(AttackGradient g);
AttackGradient attack_gradient_from_string(const std::string& s);

struct AttackConfig {
  AttackKind kind = AttackKind::kFgsmTraj;
  double attack_ratio = 0.25;
  double phi = 1.0;
  int pgd_iters = 20;
  TimestepSelection selection = TimestepSelection::kEvenlySpaced;
  AttackLoss loss = AttackLoss::kMuTilde;
  AttackGradient gradient = AttackGradient::kBoth;
  bool detach_xhat0 = false;
  std::uint64_t seed = 0;

  void validate() const;
};

struct AttackStepResult {
  Tensor x_adv;
  std::vector<double> loss;       // per row, at the random start
  std::vector<double> delta_inf;  // per row
};

/// Attack objective per row for the perturbed points x_t + delta.
std::vector<double> attack_objective(const EpsModel& model, const Tensor& x_t, const Tensor& delta, int t,
                                     const NoiseSchedule& ns, const AttackConfig& cfg);

/// x_adv = x_t + sigma(t) sign(grad L) with delta ~ N(0, phi^2 sigma(t)^2).
/// `noise` holds the standard normal draws behind delta.
AttackStepResult attack_step_fgsm(const EpsModel& model, const Tensor& x_t, int t, const NoiseSchedule& ns,
                                  const AttackConfig& cfg, const Tensor& noise);
AttackStepResult attack_step_fgsm(const EpsModel& model, const Tensor& x_t, int t, const NoiseSchedule& ns,
                                  const AttackConfig& cfg, Rng& rng);

/// delta_{n+1} = delta_n + sigma(t)/N sign(grad L(x_t + delta_n)), N times,
/// then delta is clipped to [-sigma(t), sigma(t)].
AttackStepResult attack_step_pgd(const EpsModel& model, const Tensor& x_t, int t, const NoiseSchedule& ns,
                                 const AttackConfig& cfg, const Tensor& noise);
AttackStepResult attack_step_pgd(const EpsModel& model, const Tensor& x_t, int t, const NoiseSchedule& ns,
                                 const AttackConfig& cfg, Rng& rng);

/// Timesteps attacked out of `executed` (descending): min(ceil(p K), #{t >= 2}).
std::vector<int> attacked_timesteps(const std::vector<int>& executed, double ratio, TimestepSelection sel);

std::uint64_t attack_seed(std::uint64_t master, std::size_t chain, int t);

SampleOutput attacked_sample(const EpsModel& model, const NoiseSchedule& ns, const SamplerConfig& sampler,
                             const AttackConfig& cfg, std::size_t n, const Normalizer* norm = nullptr);

// Columns: chain,t,attacked,delta_inf_norm,loss_value
void write_attack_report_csv(const std::filesystem::path& path, const std::vector<Trajectory>& trajs);

}  // namespace advdiff
