#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <numeric>

#include "advdiff/error.hpp"
#include "advdiff/training.hpp"
#include "support/oracles.hpp"

using namespace advdiff;

namespace {

Tensor randn(std::size_t rows, std::size_t cols, Rng& rng, double s = 1.0) {
  Tensor x(Shape{rows, cols});
  for (double& v : x.data()) v = s * rng.normal();
  return x;
}

// Plain-loop evaluation of the AT objective with a frozen smoothing target.
double at_objective(const DenoiserParams& p, const Tensor& x_t, const Tensor& x_adv, const Tensor& eps,
                    const Tensor& target, int t, double lambda) {
  const Tensor a = denoiser_predict(p, x_t, t);
  const Tensor b = denoiser_predict(p, x_adv, t);
  double dm = 0.0, reg = 0.0;
  for (std::size_t k = 0; k < a.numel(); ++k) {
    dm += (a[k] - eps[k]) * (a[k] - eps[k]);
    reg += (b[k] - target[k]) * (b[k] - target[k]);
  }
  const double n = static_cast<double>(x_t.rows());
  return dm / n + lambda * reg / n;
}

}  // namespace

TEST_CASE("Adam matches the reference implementation and frozen values") {
  const std::vector<double> target{3.0, 2.0}, weight{1.0, 10.0};
  const auto ref = testing::reference_adam({0.5, -1.0}, target, weight, 0.1, 10);
  CHECK(ref[0] == doctest::Approx(1.4819680919647271).epsilon(1e-13));
  CHECK(ref[1] == doctest::Approx(-0.01418840804781317).epsilon(1e-12));

  TrainConfig cfg;
  cfg.lr = 0.1;
  Optimizer opt(cfg, 1);
  Tensor theta = Tensor::vector({0.5, -1.0});
  Tensor* params[1] = {&theta};
  for (int s = 0; s < 10; ++s) {
    Tensor g = Tensor::vector({0.0, 0.0});
    for (std::size_t i = 0; i < 2; ++i) g[i] = 2.0 * weight[i] * (theta[i] - target[i]);
    const Tensor grads[1] = {g};
    opt.step(params, grads);
  }
  CHECK(theta[0] == doctest::Approx(ref[0]).epsilon(1e-14));
  CHECK(theta[1] == doctest::Approx(ref[1]).epsilon(1e-12));
}

TEST_CASE("SGD takes a plain gradient step") {
  TrainConfig cfg;
  cfg.optimizer = OptimizerKind::kSgd;
  cfg.lr = 0.5;
  Optimizer opt(cfg, 1);
  Tensor w = Tensor::vector({1.0, 2.0});
  Tensor* params[1] = {&w};
  const Tensor grads[1] = {Tensor::vector({0.2, -4.0})};
  opt.step(params, grads);
  CHECK(w[0] == doctest::Approx(0.9));
  CHECK(w[1] == doctest::Approx(4.0));
}

TEST_CASE("forward encoding has the closed-form moments") {
  const auto ns = build_linear_schedule(100, 1e-3, 0.2);
  Rng rng(1);
  const std::size_t n = 20000;
  const Tensor x0 = Tensor::full(Shape{n, 1}, 2.0);
  const Tensor eps = randn(n, 1, rng);
  const int t[1] = {30};
  const Tensor x_t = encode(x0, eps, t, ns);
  double mean = 0.0, var = 0.0;
  for (double v : x_t.data()) mean += v;
  mean /= static_cast<double>(n);
  for (double v : x_t.data()) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n - 1);
  const double ab = ns.alpha_bar(30);
  CHECK(mean == doctest::Approx(2.0 * std::sqrt(ab)).epsilon(0.01));
  CHECK(var == doctest::Approx(1.0 - ab).epsilon(0.03));

  const int t0[1] = {101};
  CHECK_THROWS_AS(encode(x0, eps, t0, ns), Error);
}

TEST_CASE("random perturbations are uniform inside the ray") {
  const auto ns = build_linear_schedule(1000, 1e-4, 0.02);
  const RaySchedule rs;
  Rng rng(2);
  const int t[1] = {500};
  const auto out = sample_delta_random(rs, ns, t, 4000, 5, rng);
  const double r = out.ray_value[0];
  double ms = 0.0;
  for (double v : out.delta.data()) {
    CHECK(std::abs(v) <= r);
    ms += v * v;
  }
  ms /= static_cast<double>(out.delta.numel());
  CHECK(ms == doctest::Approx(r * r / 3.0).epsilon(0.03));
  // one beta shared by the batch unless asked otherwise
  for (double b : out.beta) CHECK(b == out.beta[0]);
  const auto per_row = sample_delta_random(rs, ns, t, 10, 2, rng, true);
  CHECK(per_row.beta[0] != per_row.beta[1]);
  const auto fixed = sample_delta_random(rs, ns, t, 3, 2, rng, false, 2.0);
  CHECK(fixed.ray_value[0] == doctest::Approx(1.0252685904403573).epsilon(1e-12));
}

TEST_CASE("encode_perturbed rejects perturbations beyond the ray") {
  const auto ns = build_linear_schedule(100, 1e-3, 0.2);
  const RaySchedule rs;
  Rng rng(3);
  const int t[1] = {10};
  auto pert = sample_delta_random(rs, ns, t, 2, 3, rng);
  const Tensor x0 = randn(2, 3, rng), eps = randn(2, 3, rng);
  CHECK_NOTHROW(encode_perturbed(x0, eps, pert, t, ns));
  pert.delta.at(1, 2) = 1.01 * pert.ray_value[1];
  CHECK_THROWS_AS(encode_perturbed(x0, eps, pert, t, ns), NumericError);
}

TEST_CASE("adversarial step follows the sign of the objective gradient") {
  const auto p = testing::random_denoiser(31);
  const auto ns = build_linear_schedule(p.arch.T, 1e-3, 0.2);
  const RaySchedule rs;
  Rng rng(4);
  const std::size_t B = 6, D = p.arch.data_dim;
  const Tensor x_t = randn(B, D, rng);
  std::vector<int> t(B);
  for (auto& v : t) v = static_cast<int>(rng.uniform_int(1, ns.T()));
  const auto start = sample_delta_random(rs, ns, t, B, D, rng);
  const auto adv = craft_adversarial(p, x_t, t, ns, start);
  CHECK(adv.kind == PerturbationKind::kAdversarial);

  // finite-difference gradient of J w.r.t. delta, row by row
  const double h = 1e-6;
  for (std::size_t i = 0; i < B; ++i) {
    const double r = start.ray_value[i];
    const double s = std::sqrt(1.0 - ns.alpha_bar(t[i]));
    for (std::size_t k = 0; k < D; ++k) {
      Tensor plus = start.delta, minus = start.delta;
      plus.at(i, k) += h;
      minus.at(i, k) -= h;
      const double g = (perturbation_objective(p, x_t, t, ns, plus) - perturbation_objective(p, x_t, t, ns, minus));
      const double step = adv.delta.at(i, k) - start.delta.at(i, k);
      CHECK(std::abs(adv.delta.at(i, k)) <= r);
      if (std::abs(g) < 1e-9 * s) continue;
      const double expected = std::clamp(start.delta.at(i, k) + std::copysign(r / std::sqrt(3.0), g), -r, r);
      CHECK(adv.delta.at(i, k) == doctest::Approx(expected).epsilon(1e-12));
      CHECK(step * g >= 0.0);
    }
  }
}

TEST_CASE("adversarial perturbations raise the objective on average") {
  const auto p = testing::random_denoiser(32);
  const auto ns = build_linear_schedule(p.arch.T, 1e-3, 0.2);
  const RaySchedule rs;
  Rng rng(5);
  int wins = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x_t = randn(8, p.arch.data_dim, rng);
    const int t[1] = {static_cast<int>(rng.uniform_int(1, ns.T()))};
    const auto start = sample_delta_random(rs, ns, t, 8, p.arch.data_dim, rng);
    const auto adv = craft_adversarial(p, x_t, t, ns, start);
    wins += perturbation_objective(p, x_t, t, ns, adv.delta) > perturbation_objective(p, x_t, t, ns, start.delta);
  }
  CHECK(wins >= 40);
}

TEST_CASE("lambda_t scaling") {
  CHECK(lambda_t(0.3, std::sqrt(3.0)) == doctest::Approx(0.3));
  CHECK(lambda_t(1.0, 0.5) == doctest::Approx(2.0 * std::sqrt(3.0)));
  CHECK_THROWS_AS(lambda_t(1.0, 0.0), NumericError);
}

TEST_CASE("zero lambda reduces every regularized loss to the plain loss") {
  const auto p = testing::random_denoiser(41);
  Rng rng(6);
  const std::size_t B = 5, D = p.arch.data_dim;
  const Tensor x_t = randn(B, D, rng), x_adv = randn(B, D, rng), delta = randn(B, D, rng), eps = randn(B, D, rng);
  const int t[1] = {1};
  const std::vector<double> zeros(B, 0.0);
  Tape tape;
  const auto vars = bind_params(tape, p, true);
  const double plain = loss_ddpm(p, vars, x_t, eps, t).total.value().item();
  const auto at = loss_at(p, vars, x_t, x_adv, delta, eps, t, zeros);
  const auto inv = loss_invariance(p, vars, x_t, x_adv, eps, t, zeros);
  CHECK(at.total.value().item() == plain);
  CHECK(inv.total.value().item() == plain);
  CHECK_FALSE(at.reg.valid());
}

TEST_CASE("regularized loss values and gradients") {
  const auto p = testing::random_denoiser(51);
  Rng rng(7);
  const std::size_t B = 3, D = p.arch.data_dim;
  const Tensor x_t = randn(B, D, rng), x_adv = randn(B, D, rng), delta = randn(B, D, rng), eps = randn(B, D, rng);
  const int t = std::min(3, p.arch.T);
  const int ts[1] = {t};
  const double lambda = 0.7;
  const std::vector<double> lam{lambda};

  Tensor target = denoiser_predict(p, x_t, t);
  for (std::size_t k = 0; k < target.numel(); ++k) target[k] += delta[k];

  Tape tape;
  const auto vars = bind_params(tape, p, true);
  const auto loss = loss_at(p, vars, x_t, x_adv, delta, eps, ts, lam, true);
  CHECK(loss.total.value().item() == doctest::Approx(at_objective(p, x_t, x_adv, eps, target, t, lambda)).epsilon(1e-12));

  std::vector<double> tape_grad;
  for (const auto& g : tape.backward(loss.total, vars.all()))
    for (double v : g.data()) tape_grad.push_back(v);
  // The tape interleaves weights and biases per layer just like flatten().
  std::vector<double> fd(tape_grad.size());
  const auto theta = p.flatten();
  const double h = 1e-6;
  for (std::size_t k = 0; k < theta.size(); ++k) {
    auto q = p;
    auto th = theta;
    th[k] += h;
    q.unflatten(th);
    const double fp = at_objective(q, x_t, x_adv, eps, target, t, lambda);
    th[k] -= 2 * h;
    q.unflatten(th);
    fd[k] = (fp - at_objective(q, x_t, x_adv, eps, target, t, lambda)) / (2 * h);
  }
  CHECK(testing::relative_error(tape_grad, fd) < 1e-5);

  // Without detaching, the target moves with the parameters.
  const double err = testing::gradient_check(
      [&](Tape& tp, const std::vector<Var>& in) {
        DenoiserParams q = p;
        ParamVars pv;
        for (std::size_t l = 0; l < q.num_layers(); ++l) {
          pv.weights.push_back(in[2 * l]);
          pv.biases.push_back(in[2 * l + 1]);
        }
        (void)tp;
        return loss_at(q, pv, x_t, x_adv, delta, eps, ts, lam, false).total;
      },
      [&] {
        std::vector<Tensor> v;
        for (std::size_t l = 0; l < p.num_layers(); ++l) {
          v.push_back(p.weights[l]);
          v.push_back(p.biases[l]);
        }
        return v;
      }());
  CHECK(err < 1e-5);
}

TEST_CASE("training is deterministic and reduces the loss") {
  DatasetSpec spec;
  spec.n_samples = 256;
  const SampleSet data = generate(spec);
  const auto ns = build_linear_schedule(50, 1e-3, 0.3);
  Architecture arch;
  arch.hidden = {32, 32};
  arch.time_embed_dim = 8;
  arch.T = 50;
  TrainConfig cfg;
  cfg.steps = 300;
  cfg.batch_size = 32;
  cfg.lr = 3e-3;
  cfg.log_every = 50;
  cfg.seed = 9;
  for (auto mode : {LossMode::kDdpm, LossMode::kRobustAdv}) {
    cfg.loss_mode = mode;
    const auto a = train(cfg, arch, data, ns);
    const auto b = train(cfg, arch, data, ns);
    CHECK(a.params.flatten() == b.params.flatten());
    REQUIRE(a.report.rows.size() == 6);
    CHECK(a.report.rows.back().loss_dm < 0.6 * a.report.rows.front().loss_dm);
    CHECK(a.params.step == 300);
    if (mode == LossMode::kDdpm) {
      for (const auto& r : a.report.rows) CHECK(r.loss_reg == 0.0);
    } else {
      CHECK(a.report.rows.back().loss_reg > 0.0);
    }
  }
  cfg.loss_mode = LossMode::kRobustAdv;
  cfg.lambda = 0.0;
  auto lam0 = train(cfg, arch, data, ns);
  cfg.loss_mode = LossMode::kDdpm;
  CHECK(lam0.params.flatten() == train(cfg, arch, data, ns).params.flatten());
}

TEST_CASE("training stops early on request and rejects bad input") {
  DatasetSpec spec;
  spec.n_samples = 64;
  SampleSet data = generate(spec);
  const auto ns = build_linear_schedule(20, 1e-3, 0.3);
  Architecture arch;
  arch.hidden = {8};
  arch.time_embed_dim = 4;
  arch.T = 20;
  TrainConfig cfg;
  cfg.steps = 100;
  cfg.batch_size = 8;
  const auto r = train(cfg, arch, data, ns, [](std::size_t step, const TrainReportRow&) { return step < 7; });
  CHECK(r.params.step == 7);

  arch.T = 21;
  CHECK_THROWS_AS(train(cfg, arch, data, ns), ConfigError);
  arch.T = 20;
  data.points.at(3, 1) = std::numeric_limits<double>::quiet_NaN();
  cfg.normalize = false;
  CHECK_THROWS_AS(train(cfg, arch, data, ns), NumericError);
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
