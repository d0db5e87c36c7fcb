#pragma once

// The epsilon-predicting MLP eps_theta(x_t, t) with sinusoidal time embedding.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "advdiff/autodiff.hpp"
#include "advdiff/data.hpp"
#include "advdiff/tensor.hpp"

namespace advdiff {

enum class Activation { kSilu, kRelu };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

struct Architecture {
  std::size_t data_dim = 3;
  std::vector<std::size_t> hidden{256, 256, 256};
  std::size_t time_embed_dim = 32;
  Activation activation = Activation::kSilu;
  int T = 100;  // timesteps the embedding is scaled against
  // Adds g(t) * x to the output, g(t) = w . emb(t) + b learned, zero at init.
  // Gives high-dimensional models a full-rank path the hidden layers lack.
  bool skip = false;

  void validate() const;
};

/// Sinusoidal embedding [sin(s f_0), cos(s f_0), sin(s f_1), ...] with
/// s = t * 1000 / T and f_j = 10000^(-j / (dim/2)).
std::vector<double> time_embed(int t, int T, std::size_t dim);

struct DenoiserParams {
  Architecture arch;
  // Layer l maps width[l] -> width[l+1]; weights are (in x out).
  std::vector<Tensor> weights;
  std::vector<Tensor> biases;
  Normalizer normalizer;
  std::uint64_t step = 0;
  std::string schedule_hash;
  std::string train_config_hash;

  std::size_t num_layers() const { return weights.size(); }
  std::size_t num_parameters() const;
  bool all_finite() const;
  // Flattened parameter vector, weights then bias for each layer in order.
  std::vector<double> flatten() const;
  void unflatten(std::span<const double> values);
};

// He-style uniform fan-in init for hidden layers; the output layer starts at
// zero so the initial prediction is exactly 0.
DenoiserParams init_denoiser(const Architecture& arch, std::uint64_t seed);

struct ParamVars {
  std::vector<Var> weights;
  std::vector<Var> biases;

  std::vector<Var> all() const;
};

// Registers parameters on `tape`, as leaves when gradients are wanted.
ParamVars bind_params(Tape& tape, const DenoiserParams& p, bool trainable);

// Traced forward. `t` holds one timestep per row of x (or a single entry
// applied to every row).
Var denoiser_forward(const DenoiserParams& p, const ParamVars& vars, Var x, std::span<const int> t);

// Untraced convenience wrapper.
Tensor denoiser_predict(const DenoiserParams& p, const Tensor& x, int t);

/// Anything that predicts epsilon and can be traced on a tape; lets the
/// sampler and attacks run on analytic oracles as well as trained networks.
class EpsModel {
 public:
  virtual ~EpsModel() = default;
  virtual std::size_t dim() const = 0;
  virtual Var trace(Tape& tape, Var x, int t) const = 0;
  virtual Tensor predict(const Tensor& x, int t) const;
};

class DenoiserModel final : public EpsModel {
 public:
  explicit DenoiserModel(const DenoiserParams& params) : params_(params) {}
  std::size_t dim() const override { return params_.arch.data_dim; }
  Var trace(Tape& tape, Var x, int t) const override;
  Tensor predict(const Tensor& x, int t) const override { return denoiser_predict(params_, x, t); }
  const DenoiserParams& params() const { return params_; }

 private:
  const DenoiserParams& params_;
};

// Checkpoint = <dir>/checkpoint.json manifest + <dir>/params.bin
// (little-endian float64, layer order listed in the manifest).
void save_checkpoint(const std::filesystem::path& dir, const DenoiserParams& p);
DenoiserParams load_checkpoint(const std::filesystem::path& dir);

}  // namespace advdiff
