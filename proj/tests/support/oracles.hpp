#pragma once

// Independent checks shared by the unit tests and the acceptance runner.

#include <cstdint>
#include <functional>
#include <vector>

#include "advdiff/autodiff.hpp"
#include "advdiff/denoiser.hpp"
#include "advdiff/schedule.hpp"
#include "advdiff/tensor.hpp"

namespace advdiff::testing {

// ||a - b|| / max(||a||, ||b||, floor)
double relative_error(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-8);

// Central differences of a scalar function of the flattened inputs.
std::vector<double> central_differences(const std::function<double(const std::vector<Tensor>&)>& f,
                                        const std::vector<Tensor>& inputs, double h = 1e-6);

// Records f on a fresh tape with every input as a leaf, returns the
// concatenated reverse-mode gradient.
std::vector<double> tape_gradient(const std::function<Var(Tape&, const std::vector<Var>&)>& f,
                                  const std::vector<Tensor>& inputs);

// Largest relative error between tape and finite-difference gradients of f.
double gradient_check(const std::function<Var(Tape&, const std::vector<Var>&)>& f, const std::vector<Tensor>& inputs,
                      double h = 1e-6);

// Small denoiser with every weight and bias drawn from N(0, 0.5^2).
DenoiserParams random_denoiser(std::uint64_t seed);

struct DenoiserGradCheck {
  double input_error = 0.0;
  double param_error = 0.0;
};

// Scalar probe sum(c * eps_theta(x, t)) with random c, x and t; checks the
// gradient w.r.t. x and w.r.t. every parameter.
DenoiserGradCheck check_denoiser_gradients(std::uint64_t seed);

// Reference Adam on f(theta) = sum_i w_i (theta_i - target_i)^2 written out
// independently of the library optimizer.
std::vector<double> reference_adam(std::vector<double> theta, const std::vector<double>& target,
                                   const std::vector<double>& weight, double lr, int steps);

// Optimal epsilon predictor for data concentrated at one point x0:
// eps*(x_t, t) = (x_t - sqrt(ab_t) x0) / sqrt(1 - ab_t).
class DiracModel final : public EpsModel {
 public:
  DiracModel(std::vector<double> x0, const NoiseSchedule& ns) : x0_(std::move(x0)), ns_(ns) {}
  std::size_t dim() const override { return x0_.size(); }
  Var trace(Tape& tape, Var x, int t) const override;

 private:
  std::vector<double> x0_;
  const NoiseSchedule& ns_;
};

}  // namespace advdiff::testing
