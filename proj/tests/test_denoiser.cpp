#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "advdiff/denoiser.hpp"
#include "advdiff/error.hpp"
#include "advdiff/io.hpp"
#include "support/oracles.hpp"

using namespace advdiff;
namespace fs = std::filesystem;

TEST_CASE("time embedding matches independently computed values") {
  const auto e = time_embed(5, 100, 4);
  REQUIRE(e.size() == 4);
  const double expected[] = {-0.26237485370392877, 0.9649660284921133, 0.479425538604203, 0.8775825618903728};
  for (std::size_t i = 0; i < 4; ++i) CHECK(e[i] == doctest::Approx(expected[i]).epsilon(1e-14));
  for (double v : time_embed(1, 1000, 32)) CHECK(std::abs(v) <= 1.0);
}

TEST_CASE("fresh network predicts exactly zero") {
  Architecture arch;
  arch.hidden = {16, 16};
  const auto p = init_denoiser(arch, 3);
  const Tensor x = Tensor::full(Shape{4, 3}, 2.5);
  const Tensor y = denoiser_predict(p, x, 7);
  for (double v : y.data()) CHECK(v == 0.0);
  // (3+32)*16 + 16 + 16*16 + 16 + 16*3 + 3
  CHECK(p.num_parameters() == 35 * 16 + 16 + 256 + 16 + 48 + 3);
}

TEST_CASE("skip path starts at zero and adds g(t) x") {
  Architecture arch;
  arch.hidden = {8};
  arch.time_embed_dim = 4;
  arch.skip = true;
  auto p = init_denoiser(arch, 5);
  CHECK(p.num_parameters() == (3 + 4) * 8 + 8 + 8 * 3 + 3 + 4 + 1);
  const Tensor x = Tensor::matrix({{1.0, -2.0, 0.5}, {3.0, 0.0, -1.0}});
  const Tensor y0 = denoiser_predict(p, x, 9);
  for (double v : y0.data()) CHECK(v == 0.0);

  // Only the skip is non-zero: output = (w . emb(t) + b) x.
  p.biases.back()[0] = 0.7;
  for (std::size_t j = 0; j < 4; ++j) p.weights.back()[j] = 0.1 * static_cast<double>(j + 1);
  const auto e = time_embed(9, arch.T, 4);
  double g = 0.7;
  for (std::size_t j = 0; j < 4; ++j) g += 0.1 * static_cast<double>(j + 1) * e[j];
  const Tensor y = denoiser_predict(p, x, 9);
  for (std::size_t k = 0; k < x.numel(); ++k) CHECK(y[k] == doctest::Approx(g * x[k]).epsilon(1e-14));
}

TEST_CASE("flatten and unflatten are inverse") {
  auto p = testing::random_denoiser(11);
  auto flat = p.flatten();
  CHECK(flat.size() == p.num_parameters());
  for (double& v : flat) v *= -2.0;
  p.unflatten(flat);
  CHECK(p.flatten() == flat);
  flat.pop_back();
  CHECK_THROWS_AS(p.unflatten(flat), ShapeError);
}

TEST_CASE("traced and untraced forward agree") {
  const auto p = testing::random_denoiser(4);
  const DenoiserModel model(p);
  Tensor x(Shape{5, p.arch.data_dim});
  for (std::size_t k = 0; k < x.numel(); ++k) x[k] = std::sin(0.7 * static_cast<double>(k));
  Tape tape;
  const Tensor traced = model.trace(tape, tape.constant(x), 9).value();
  CHECK(traced == model.predict(x, 9));
}

TEST_CASE("per-row timesteps match single-timestep calls") {
  const auto p = testing::random_denoiser(8);
  Tensor x(Shape{3, p.arch.data_dim});
  for (std::size_t k = 0; k < x.numel(); ++k) x[k] = 0.1 * static_cast<double>(k);
  const int ts[] = {1, 4, 9};
  Tape tape;
  const ParamVars vars = bind_params(tape, p, false);
  const Tensor joint = denoiser_forward(p, vars, tape.constant(x), ts).value();
  for (std::size_t i = 0; i < 3; ++i) {
    const Tensor single = denoiser_predict(p, slice_rows(x, i, 1), ts[i]);
    for (std::size_t d = 0; d < x.cols(); ++d) CHECK(joint.at(i, d) == doctest::Approx(single[d]).epsilon(1e-14));
  }
}

TEST_CASE("denoiser gradients agree with finite differences") {
  for (std::uint64_t seed = 100; seed < 105; ++seed) {
    const auto r = testing::check_denoiser_gradients(seed);
    CHECK(r.input_error < 1e-4);
    CHECK(r.param_error < 1e-4);
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  const fs::path dir = fs::temp_directory_path() / "advdiff_test_ckpt";
  fs::remove_all(dir);
  auto p = testing::random_denoiser(21);
  p.step = 42;
  p.schedule_hash = "abc";
  p.normalizer.shift = std::vector<double>(p.arch.data_dim, 0.25);
  p.normalizer.scale = 3.0;
  save_checkpoint(dir, p);
  const auto q = load_checkpoint(dir);
  CHECK(q.flatten() == p.flatten());
  CHECK(q.step == 42);
  CHECK(q.schedule_hash == "abc");
  CHECK(q.normalizer.shift == p.normalizer.shift);
  CHECK(q.normalizer.scale == 3.0);
  CHECK(q.arch.hidden == p.arch.hidden);
  CHECK(q.arch.skip);

  // truncated parameter file
  const std::string bytes = io::read_file(dir / "params.bin");
  io::write_file_atomic(dir / "params.bin", bytes.substr(0, bytes.size() - 8));
  CHECK_THROWS_AS(load_checkpoint(dir), IoError);
  CHECK_THROWS_AS(load_checkpoint(dir / "nope"), IoError);
}

TEST_CASE("architecture validation") {
  Architecture a;
  a.time_embed_dim = 7;
  CHECK_THROWS_AS(a.validate(), ConfigError);
  Architecture b;
  b.hidden.clear();
  CHECK_THROWS_AS(b.validate(), ConfigError);
  CHECK_THROWS_AS(activation_from_string("tanh"), ConfigError);
}
