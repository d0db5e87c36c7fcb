#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "advdiff/attacks.hpp"
#include "advdiff/error.hpp"
#include "advdiff/io.hpp"
#include "advdiff/metrics.hpp"
#include "advdiff/training.hpp"
#include "support/oracles.hpp"

using namespace advdiff;

namespace {

Tensor randn(std::size_t rows, std::size_t cols, Rng& rng, double s = 1.0) {
  Tensor x(Shape{rows, cols});
  for (double& v : x.data()) v = s * rng.normal();
  return x;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct Trained {
  NoiseSchedule ns = build_linear_schedule(40, 1e-3, 0.3);
  DatasetSpec spec;
  DenoiserParams params;
  Trained() {
    spec.n_samples = 512;
    Architecture arch;
    arch.hidden = {32, 32};
    arch.time_embed_dim = 8;
    arch.T = 40;
    TrainConfig cfg;
    cfg.loss_mode = LossMode::kDdpm;
    cfg.steps = 1500;
    cfg.batch_size = 64;
    cfg.lr = 3e-3;
    cfg.log_every = 500;
    params = train(cfg, arch, generate(spec), ns).params;
  }
};

const Trained& trained() {
  static const Trained t;
  return t;
}

}  // namespace

TEST_CASE("zero start and zero gradient leave the state alone") {
  const auto p = testing::random_denoiser(1);
  const DenoiserModel model(p);
  const auto ns = build_linear_schedule(p.arch.T, 1e-3, 0.2);
  Rng rng(1);
  const Tensor x = randn(4, model.dim(), rng);
  AttackConfig cfg;
  cfg.phi = 0.0;
  for (auto kind : {AttackKind::kFgsmTraj, AttackKind::kPgdTraj}) {
    cfg.kind = kind;
    const auto res = kind == AttackKind::kFgsmTraj ? attack_step_fgsm(model, x, 2, ns, cfg, rng)
                                                   : attack_step_pgd(model, x, 2, ns, cfg, rng);
    CHECK(res.x_adv == x);
    for (double l : res.loss) CHECK(l == 0.0);
  }
}

TEST_CASE("FGSM moves every coordinate by exactly sigma(t) along the gradient sign") {
  const auto p = testing::random_denoiser(2);
  const DenoiserModel model(p);
  const auto ns = build_linear_schedule(p.arch.T, 1e-3, 0.2);
  Rng rng(2);
  const std::size_t D = model.dim();
  for (auto grad : {AttackGradient::kBoth, AttackGradient::kPerturbed}) {
    for (auto loss : {AttackLoss::kMuTilde, AttackLoss::kEps}) {
      AttackConfig cfg;
      cfg.gradient = grad;
      cfg.loss = loss;
      cfg.phi = 3.0;
      const Tensor x = randn(3, D, rng);
      const Tensor noise = randn(3, D, rng);
      const int t = static_cast<int>(rng.uniform_int(2, ns.T()));
      const double s = ns.sigma(t);
      const auto res = attack_step_fgsm(model, x, t, ns, cfg, noise);

      Tensor delta = noise;
      for (double& v : delta.data()) v *= cfg.phi * s;
      const double h = 1e-6;
      for (std::size_t k = 0; k < x.numel(); ++k) {
        // finite difference of the summed objective
        double g;
        if (grad == AttackGradient::kBoth) {
          Tensor xp = x, xm = x;
          xp[k] += h;
          xm[k] -= h;
          const auto lp = attack_objective(model, xp, delta, t, ns, cfg);
          const auto lm = attack_objective(model, xm, delta, t, ns, cfg);
          g = (lp[k / D] - lm[k / D]) / (2 * h);
        } else {
          Tensor dp = delta, dm = delta;
          dp[k] += h;
          dm[k] -= h;
          g = (attack_objective(model, x, dp, t, ns, cfg)[k / D] - attack_objective(model, x, dm, t, ns, cfg)[k / D]) /
              (2 * h);
        }
        const double step = res.x_adv[k] - x[k];
        CHECK(std::abs(std::abs(step) - s) <= 1e-15 * (1.0 + std::abs(x[k])));
        if (std::abs(g) > 1e-7) CHECK(step * g > 0.0);
      }
      for (double d : res.delta_inf) CHECK(d == doctest::Approx(s).epsilon(1e-12));
    }
  }
}

TEST_CASE("PGD with one iteration and no random start is FGSM") {
  const auto p = testing::random_denoiser(3);
  const DenoiserModel model(p);
  const auto ns = build_linear_schedule(p.arch.T, 1e-3, 0.2);
  Rng rng(3);
  const Tensor x = randn(5, model.dim(), rng), noise = randn(5, model.dim(), rng);
  AttackConfig cfg;
  cfg.phi = 0.0;
  cfg.pgd_iters = 1;
  cfg.gradient = AttackGradient::kPerturbed;
  const int t = std::max(2, p.arch.T / 2);
  CHECK(attack_step_pgd(model, x, t, ns, cfg, noise).x_adv == attack_step_fgsm(model, x, t, ns, cfg, noise).x_adv);
}

TEST_CASE("PGD stays within sigma(t) over randomized trials") {
  const auto p = testing::random_denoiser(4);
  const DenoiserModel model(p);
  const auto ns = build_linear_schedule(p.arch.T, 1e-3, 0.2);
  Rng rng(4);
  for (int trial = 0; trial < 1000; ++trial) {
    AttackConfig cfg;
    cfg.kind = AttackKind::kPgdTraj;
    cfg.pgd_iters = static_cast<int>(rng.uniform_int(1, 8));
    cfg.phi = rng.uniform(0.0, 4.0);
    cfg.gradient = rng.uniform(0.0, 1.0) < 0.5 ? AttackGradient::kBoth : AttackGradient::kPerturbed;
    const int t = static_cast<int>(rng.uniform_int(2, ns.T()));
    const Tensor x = randn(2, model.dim(), rng, 3.0);
    const auto res = attack_step_pgd(model, x, t, ns, cfg, rng);
    // x + delta rounds at the scale of x
    for (std::size_t k = 0; k < x.numel(); ++k)
      CHECK(std::abs(res.x_adv[k] - x[k]) <= ns.sigma(t) + 4e-16 * (std::abs(x[k]) + ns.sigma(t)));
  }
}

TEST_CASE("attacks reject t = 1 and bad configurations") {
  const auto p = testing::random_denoiser(5);
  const DenoiserModel model(p);
  const auto ns = build_linear_schedule(p.arch.T, 1e-3, 0.2);
  Rng rng(5);
  const Tensor x = randn(1, model.dim(), rng);
  AttackConfig cfg;
  CHECK_THROWS_AS(attack_step_fgsm(model, x, 1, ns, cfg, rng), ConfigError);
  cfg.attack_ratio = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  AttackConfig bad_n;
  bad_n.pgd_iters = 0;
  CHECK_THROWS_AS(bad_n.validate(), ConfigError);
  CHECK_THROWS_AS(attack_kind_from_string("cw"), ConfigError);
}

TEST_CASE("attacked timestep counts and selections") {
  std::vector<int> full(1000);
  for (int i = 0; i < 1000; ++i) full[static_cast<std::size_t>(i)] = 1000 - i;
  CHECK(attacked_timesteps(full, 0.25, TimestepSelection::kEvenlySpaced).size() == 250);
  CHECK(attacked_timesteps(full, 0.5, TimestepSelection::kEvenlySpaced).size() == 500);
  CHECK(attacked_timesteps(full, 1.0, TimestepSelection::kEvenlySpaced).size() == 999);
  CHECK(attacked_timesteps(full, 0.0, TimestepSelection::kEvenlySpaced).empty());
  CHECK(attacked_timesteps(full, 0.001, TimestepSelection::kSuffixTo0) == std::vector<int>{2});

  const std::vector<int> ten{10, 9, 8, 7, 6, 5, 4, 3, 2, 1};
  CHECK(attacked_timesteps(ten, 0.3, TimestepSelection::kPrefixFromT) == std::vector<int>{10, 9, 8});
  CHECK(attacked_timesteps(ten, 0.3, TimestepSelection::kSuffixTo0) == std::vector<int>{4, 3, 2});
  CHECK(attacked_timesteps(ten, 0.3, TimestepSelection::kEvenlySpaced) == std::vector<int>{10, 7, 4});
  const auto spread = attacked_timesteps(full, 0.25, TimestepSelection::kEvenlySpaced);
  CHECK(spread.front() == 1000);
  CHECK(spread.back() <= 10);
}

TEST_CASE("attacked sampling: p = 0 is the clean sampler, p = 1 attacks every t >= 2") {
  const auto p = testing::random_denoiser(6);
  const DenoiserModel model(p);
  const auto ns = build_linear_schedule(p.arch.T, 1e-3, 0.2);
  SamplerConfig sc;
  sc.seed = 10;
  AttackConfig ac;
  ac.attack_ratio = 0.0;
  CHECK(attacked_sample(model, ns, sc, ac, 6).points == sample(model, ns, sc, 6).points);

  ac.attack_ratio = 1.0;
  const auto before = p.flatten();
  const auto out = attacked_sample(model, ns, sc, ac, 6);
  CHECK(p.flatten() == before);
  for (const auto& tr : out.trajectories) {
    REQUIRE(tr.meta.size() == static_cast<std::size_t>(ns.T()));
    for (const auto& m : tr.meta) {
      CHECK(m.attacked == (m.t >= 2));
      if (m.attacked) CHECK(m.delta_inf <= ns.sigma(m.t));
    }
  }
}

TEST_CASE("attacked sampling is seed-reproducible") {
  const auto p = testing::random_denoiser(7);
  const DenoiserModel model(p);
  const auto ns = build_linear_schedule(p.arch.T, 1e-3, 0.2);
  SamplerConfig sc;
  sc.seed = 11;
  AttackConfig ac;
  ac.kind = AttackKind::kPgdTraj;
  ac.pgd_iters = 3;
  ac.attack_ratio = 0.5;
  ac.seed = 1;
  const auto a = attacked_sample(model, ns, sc, ac, 5);
  CHECK(a.points == attacked_sample(model, ns, sc, ac, 5).points);
  ac.seed = 2;
  CHECK_FALSE(a.points == attacked_sample(model, ns, sc, ac, 5).points);

  const auto path = std::filesystem::temp_directory_path() / "advdiff_test_attack.csv";
  write_attack_report_csv(path, a.trajectories);
  const std::string text = io::read_file(path);
  CHECK(text.rfind("chain,t,attacked,delta_inf_norm,loss_value\n", 0) == 0);
  CHECK(static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')) == 1 + 5 * static_cast<std::size_t>(ns.T()));
}

TEST_CASE("attacks degrade a trained model's generations") {
  const auto& tr = trained();
  const DenoiserModel model(tr.params);
  SamplerConfig sc;
  sc.seed = 5;
  const auto clean = sample(model, tr.ns, sc, 300, &tr.params.normalizer);
  const auto& plane = tr.spec.plane;
  const double base = median(plane_distance(clean.points, plane.normal, plane.offset));
  AttackConfig ac;
  ac.attack_ratio = 0.5;
  const auto fgsm = attacked_sample(model, tr.ns, sc, ac, 300, &tr.params.normalizer);
  const double hit = median(plane_distance(fgsm.points, plane.normal, plane.offset));
  MESSAGE("median plane distance clean " << base << " fgsm(p=0.5) " << hit);
  CHECK(hit > base);
}

TEST_CASE("mu-tilde and epsilon objectives are not positive rescalings of each other") {
  const auto& tr = trained();
  const DenoiserModel model(tr.params);
  Rng rng(9);
  const Tensor x = randn(200, 3, rng);
  const Tensor noise = randn(200, 3, rng);
  std::size_t agree = 0, total = 0;
  for (int t : {5, 20, 35}) {
    AttackConfig mu_cfg, eps_cfg;
    eps_cfg.loss = AttackLoss::kEps;
    mu_cfg.gradient = eps_cfg.gradient = AttackGradient::kBoth;
    const auto a = attack_step_fgsm(model, x, t, tr.ns, mu_cfg, noise);
    const auto b = attack_step_fgsm(model, x, t, tr.ns, eps_cfg, noise);
    for (std::size_t k = 0; k < x.numel(); ++k) {
      agree += (a.x_adv[k] - x[k]) * (b.x_adv[k] - x[k]) > 0.0;
      ++total;
    }
  }
  const double frac = static_cast<double>(agree) / static_cast<double>(total);
  MESSAGE("sign agreement between the two attack objectives: " << frac);
  // Under the both-branch gradient the mu-tilde residual carries the
  // displacement itself, which flips most step directions.
  CHECK(frac < 0.5);
}
