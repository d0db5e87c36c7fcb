#pragma once

// Reverse-process sampling: ancestral and deterministic recurrences, a
// reduced-step DDIM jump, and per-chain trajectory recording/replay.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "advdiff/data.hpp"
#include "advdiff/denoiser.hpp"
#include "advdiff/schedule.hpp"

namespace advdiff {

enum class SamplerMode { kAncestral, kDeterministic };

// Standard deviation of the injected ancestral noise: sqrt(sigma(t)) keeps the
// marginals consistent with alpha_bar; kSigma uses sigma(t) literally.
enum class NoiseScale { kSqrtSigma, kSigma };

std::string to_string(SamplerMode m);
SamplerMode sampler_mode_from_string(const std::string& s);
std::string to_string(NoiseScale s);
NoiseScale noise_scale_from_string(const std::string& s);

struct SamplerConfig {
  SamplerMode mode = SamplerMode::kAncestral;
  int steps = 0;  // 0 means T
  NoiseScale noise_scale = NoiseScale::kSqrtSigma;
  bool record = false;
  int thin = 1;             // keep every thin-th recorded state (x_T and x_0 always kept)
  std::size_t chunk = 1024;  // chains per forward batch
  std::uint64_t seed = 0;

  int resolved_steps(const NoiseSchedule& ns) const { return steps == 0 ? ns.T() : steps; }
  void validate(const NoiseSchedule& ns) const;
};

struct StepMeta {
  int t = 0;
  bool attacked = false;
  double delta_inf = 0.0;  // |x_t^adv - x_t|_inf, model space
  double loss = 0.0;       // attack objective at this step
  std::uint64_t z_seed = 0;
};

struct Trajectory {
  std::size_t chain = 0;
  std::uint64_t chain_seed = 0;
  std::vector<int> t;                       // strictly decreasing, last is 0
  std::vector<std::vector<double>> states;  // data space, parallel to t
  std::vector<StepMeta> meta;               // one per executed step, in order
};

struct SampleOutput {
  Tensor points;  // data space, n x D
  std::vector<Trajectory> trajectories;
};

/// x0_hat = (x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)
Tensor xhat0(const Tensor& x_t, const Tensor& eps_pred, int t, const NoiseSchedule& ns);

/// mu_t = sqrt(ab_{t-1}) sigma_t / (1 - ab_t) x0_hat + sqrt(alpha_t) (1 - ab_{t-1}) / (1 - ab_t) x_t, t >= 2
Tensor posterior_mean(const Tensor& x_t, const Tensor& x0_hat, int t, const NoiseSchedule& ns);

/// x_{t-1} = (x_t - sigma_t / sqrt(1 - ab_t) eps) / sqrt(1 - sigma_t) + scale(t) z; z may be null.
Tensor reverse_step(const Tensor& x_t, const Tensor& eps_pred, int t, const NoiseSchedule& ns, const Tensor* z,
                    NoiseScale scale);

/// x_{t'} = sqrt(ab_{t'}) x0_hat + sqrt(1 - ab_{t'}) eps, t' < t.
Tensor ddim_jump(const Tensor& x_t, const Tensor& eps_pred, int t, int t_next, const NoiseSchedule& ns);

/// Executed timesteps from T down to 1, `steps` of them, evenly spaced.
std::vector<int> timestep_sequence(int T, int steps);

std::uint64_t chain_seed(std::uint64_t master, std::size_t chain);
std::uint64_t noise_seed(std::uint64_t chain_seed, int t);
std::vector<double> initial_state(std::uint64_t chain_seed, std::size_t dim);
std::vector<double> ancestral_noise(std::uint64_t z_seed, std::size_t dim);

// Invoked before every executed reverse step. Rows of x_t belong to
// `chains`; the hook may modify x_t in place and fill `meta`.
using StepHook =
    std::function<void(int t, std::span<const std::size_t> chains, Tensor& x_t, std::span<StepMeta> meta)>;

SampleOutput sample(const EpsModel& model, const NoiseSchedule& ns, const SamplerConfig& cfg, std::size_t n,
                    const Normalizer* norm = nullptr, const StepHook& hook = {});

/// Runs explicit chains from model-space starting states. z for chain c at
/// step t is drawn from noise_seed(seeds[c], t), or from the matching entry of
/// `z_seeds` (per chain, per executed step) when given.
SampleOutput sample_from(const EpsModel& model, const NoiseSchedule& ns, const SamplerConfig& cfg,
                         const Tensor& x_T, std::span<const std::uint64_t> seeds, std::span<const std::size_t> chains,
                         const Normalizer* norm = nullptr, const StepHook& hook = {},
                         const std::vector<std::vector<std::uint64_t>>* z_seeds = nullptr);

/// Re-runs one recorded chain using its stored seeds.
Trajectory replay(const EpsModel& model, const NoiseSchedule& ns, const SamplerConfig& cfg, const Trajectory& traj,
                  const Normalizer* norm = nullptr);

/// One CSV per chain (t,dim_0..dim_{D-1}) plus trajectories.json.
void write_trajectories(const std::filesystem::path& dir, const std::vector<Trajectory>& trajs,
                        const SamplerConfig& cfg);
std::vector<Trajectory> read_trajectories(const std::filesystem::path& dir);

}  // namespace advdiff
