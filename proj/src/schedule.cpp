#include "advdiff/schedule.hpp"

#include <cmath>
#include <cstring>
#include <string>

#include "advdiff/error.hpp"
#include "advdiff/rng.hpp"

namespace advdiff {

NoiseSchedule::NoiseSchedule(std::vector<double> sigma, double sigma_min, double sigma_max)
    : sigma_min_(sigma_min), sigma_max_(sigma_max) {
  if (sigma.size() < 2) throw ConfigError("noise schedule needs at least two timesteps");
  sigma_.reserve(sigma.size() + 1);
  sigma_.push_back(0.0);
  sigma_.insert(sigma_.end(), sigma.begin(), sigma.end());
  alpha_bar_.assign(sigma_.size(), 1.0);
  for (std::size_t t = 1; t < sigma_.size(); ++t) {
    const double s = sigma_[t];
    if (!(s > 0.0 && s < 1.0)) throw ConfigError("sigma(" + std::to_string(t) + ") outside (0, 1)");
    alpha_bar_[t] = alpha_bar_[t - 1] * (1.0 - s);
  }
}

double NoiseSchedule::sigma(int t) const {
  if (t < 1 || t > T()) throw Error("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T()) + "]");
  return sigma_[static_cast<std::size_t>(t)];
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t < 0 || t > T()) throw Error("timestep " + std::to_string(t) + " outside [0, " + std::to_string(T()) + "]");
  return alpha_bar_[static_cast<std::size_t>(t)];
}

std::uint64_t NoiseSchedule::hash() const {
  std::uint64_t h = fnv1a64("noise-schedule");
  for (double s : sigma_) {
    std::uint64_t bits;
    std::memcpy(&bits, &s, sizeof bits);
    h = splitmix64(h ^ bits);
  }
  return h;
}

NoiseSchedule build_linear_schedule(int T, double sigma_min, double sigma_max) {
  if (T < 2) throw ConfigError("schedule needs T >= 2, got " + std::to_string(T));
  if (!(sigma_min > 0.0 && sigma_min <= sigma_max && sigma_max < 1.0)) {
    throw ConfigError("schedule needs 0 < sigma_min <= sigma_max < 1, got [" + std::to_string(sigma_min) + ", " +
                      std::to_string(sigma_max) + "]");
  }
  std::vector<double> sigma(static_cast<std::size_t>(T));
  for (int t = 1; t <= T; ++t) {
    const double frac = static_cast<double>(t - 1) / static_cast<double>(T - 1);
    sigma[static_cast<std::size_t>(t - 1)] = sigma_min + (sigma_max - sigma_min) * frac;
  }
  return NoiseSchedule(std::move(sigma), sigma_min, sigma_max);
}

void RaySchedule::validate() const {
  if (!(omega >= 1.0)) throw ConfigError("ray omega must be >= 1");
  if (!(gamma > 0.0)) throw ConfigError("ray gamma must be > 0");
  if (!(beta_low > 0.0 && beta_low <= beta_high)) throw ConfigError("ray beta range must satisfy 0 < low <= high");
}

double ray(const RaySchedule& rs, const NoiseSchedule& ns, int t, double beta) {
  if (beta < rs.beta_low || beta > rs.beta_high) {
    throw ConfigError("beta " + std::to_string(beta) + " outside the ray's beta range");
  }
  if (t < 1 || t > ns.T()) throw Error("ray: timestep " + std::to_string(t) + " out of range");
  const double s = std::sqrt(1.0 - ns.alpha_bar(t));
  return (std::pow(s, rs.omega) + rs.gamma * beta) / s;
}

double effective_ray(const RaySchedule& rs, const NoiseSchedule& ns, int t, double beta) {
  return std::sqrt(1.0 - ns.alpha_bar(t)) * ray(rs, ns, t, beta);
}

}  // namespace advdiff
