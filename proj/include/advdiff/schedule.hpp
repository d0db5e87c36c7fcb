#pragma once

#include <cstdint>
#include <vector>

namespace advdiff {

/// Per-timestep variances sigma(t) and cumulative products
/// alpha_bar(t) = prod_{s<=t} (1 - sigma(s)) for t = 1..T.
///
/// Timesteps are 1-based. alpha_bar(0) is defined as 1 so that the final
/// deterministic jump of a reduced-step sampler has a target.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;
  NoiseSchedule(std::vector<double> sigma, double sigma_min, double sigma_max);

  int T() const { return static_cast<int>(sigma_.size()) - 1; }
  double sigma_min() const { return sigma_min_; }
  double sigma_max() const { return sigma_max_; }

  double sigma(int t) const;
  double alpha(int t) const { return 1.0 - sigma(t); }
  // Valid for 0 <= t <= T.
  double alpha_bar(int t) const;

  // alpha_bar(T) < 0.01, i.e. q(x_T | x_0) is close to N(0, I).
  bool reaches_noise() const { return alpha_bar(T()) < 0.01; }
  std::uint64_t hash() const;

 private:
  std::vector<double> sigma_;      // index 0 unused
  std::vector<double> alpha_bar_;  // index 0 == 1
  double sigma_min_ = 0.0;
  double sigma_max_ = 0.0;
};

// sigma(t) linear from sigma_min at t=1 to sigma_max at t=T.
NoiseSchedule build_linear_schedule(int T, double sigma_min, double sigma_max);

struct RaySchedule {
  double omega = 2.0;
  double gamma = 8.0 / 255.0;
  double beta_low = 0.5;
  double beta_high = 2.0;

  void validate() const;
};

/// r_beta(t) = ((sqrt(1 - alpha_bar))^omega + gamma * beta) / sqrt(1 - alpha_bar)
double ray(const RaySchedule& rs, const NoiseSchedule& ns, int t, double beta);

/// Displacement bound in x-space, sqrt(1 - alpha_bar) * r_beta(t).
double effective_ray(const RaySchedule& rs, const NoiseSchedule& ns, int t, double beta);

}  // namespace advdiff
