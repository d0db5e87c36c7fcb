#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "advdiff/autodiff.hpp"
#include "advdiff/error.hpp"
#include "support/oracles.hpp"

using namespace advdiff;
using advdiff::testing::gradient_check;

namespace {

Tensor randn(Shape s, std::uint64_t seed) {
  std::mt19937_64 g(seed);
  std::normal_distribution<double> d;
  Tensor t(std::move(s));
  for (double& v : t.data()) v = d(g);
  return t;
}

using Fn = std::function<Var(Tape&, const std::vector<Var>&)>;

}  // namespace

TEST_CASE("elementwise and reduction ops match finite differences") {
  const Tensor a = randn({3, 4}, 1), b = randn({3, 4}, 2);
  const std::vector<std::pair<const char*, Fn>> ops = {
      {"add", [](Tape&, const std::vector<Var>& v) { return sum(v[0] + v[1]); }},
      {"sub", [](Tape&, const std::vector<Var>& v) { return sum(sin(v[0] - v[1])); }},
      {"mul", [](Tape&, const std::vector<Var>& v) { return sum(v[0] * v[1]); }},
      {"scale", [](Tape&, const std::vector<Var>& v) { return mean(2.5 * cos(v[0]) * v[1]); }},
      {"silu", [](Tape&, const std::vector<Var>& v) { return sum(silu(v[0]) * v[1]); }},
      {"l2", [](Tape&, const std::vector<Var>& v) { return l2_norm_sq(v[0] - v[1]); }},
  };
  for (const auto& [name, f] : ops) {
    CAPTURE(name);
    CHECK(gradient_check(f, {a, b}) < 1e-7);
  }
}

TEST_CASE("relu gradient away from the kink") {
  Tensor a = randn({2, 5}, 3);
  for (double& v : a.data())
    if (std::abs(v) < 0.1) v = 0.5;
  const Tensor w = randn({2, 5}, 4);
  CHECK(gradient_check([](Tape&, const std::vector<Var>& v) { return sum(relu(v[0]) * v[1]); }, {a, w}) < 1e-8);
}

TEST_CASE("matmul, broadcasts and concatenation match finite differences") {
  const Tensor a = randn({3, 4}, 5), b = randn({4, 2}, 6), bias = randn({2}, 7), col = randn({3}, 8);
  CHECK(gradient_check([](Tape&, const std::vector<Var>& v) { return sum(sin(matmul(v[0], v[1]))); }, {a, b}) < 1e-7);
  CHECK(gradient_check(
            [](Tape&, const std::vector<Var>& v) {
              return l2_norm_sq(matmul(v[0], v[1]) + broadcast_rows(v[2], 3));
            },
            {a, b, bias}) < 1e-7);
  CHECK(gradient_check(
            [](Tape&, const std::vector<Var>& v) { return sum(cos(v[0] * broadcast_cols(v[1], 4))); }, {a, col}) <
        1e-7);
  CHECK(gradient_check(
            [](Tape& tape, const std::vector<Var>& v) {
              return sum(silu(concat_cols(v[0], v[1])) * tape.constant(randn({3, 6}, 9)));
            },
            {a, randn({3, 2}, 10)}) < 1e-7);
  const Tensor vec = randn({4}, 11);
  CHECK(gradient_check([](Tape&, const std::vector<Var>& v) { return sum(sin(matmul(v[0], v[1]))); }, {a, vec}) <
        1e-7);
}

TEST_CASE("a value used twice accumulates both gradient paths") {
  Tape tape;
  const Var x = tape.leaf(Tensor::vector({2.0, -3.0}));
  const Var y = sum(x * x + 3.0 * x);
  const Var wrt[1] = {x};
  const Tensor g = tape.backward(y, wrt)[0];
  CHECK(g[0] == doctest::Approx(7.0));
  CHECK(g[1] == doctest::Approx(-3.0));
}

TEST_CASE("constants and detached values get no gradient") {
  Tape tape;
  const Var x = tape.leaf(Tensor::vector({1.0, 2.0}));
  const Var c = tape.detach(x);
  const Var y = sum(x * c);
  const Var wrt[2] = {x, c};
  const auto g = tape.backward(y, wrt);
  CHECK(g[0][0] == 1.0);
  CHECK(g[0][1] == 2.0);
  CHECK(g[1][0] == 0.0);
  CHECK(g[1][1] == 0.0);
}

TEST_CASE("off-path leaves get zeros") {
  Tape tape;
  const Var x = tape.leaf(Tensor::vector({1.0}));
  const Var unused = tape.leaf(Tensor::vector({5.0, 6.0}));
  const Var wrt[1] = {unused};
  const auto g = tape.backward(sum(x), wrt);
  CHECK(g[0] == Tensor::vector({0.0, 0.0}));
}

TEST_CASE("backward rejects non-scalar roots and foreign variables") {
  Tape tape, other;
  const Var x = tape.leaf(Tensor::vector({1.0, 2.0}));
  const Var wrt[1] = {x};
  CHECK_THROWS_AS(tape.backward(x * x, wrt), ShapeError);
  const Var y = other.leaf(Tensor::vector({1.0}));
  const Var foreign[1] = {y};
  CHECK_THROWS_AS(tape.backward(sum(x), foreign), Error);
}

TEST_CASE("shape mismatches are reported") {
  Tape tape;
  const Var a = tape.leaf(Tensor(Shape{2, 3}));
  const Var b = tape.leaf(Tensor(Shape{3, 2}));
  CHECK_THROWS_AS(add(a, b), ShapeError);
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
  CHECK_NOTHROW(matmul(a, b));
}

TEST_CASE("denoiser gradients match finite differences on random instances") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    CAPTURE(seed);
    const auto r = advdiff::testing::check_denoiser_gradients(seed);
    CHECK(r.input_error < 1e-4);
    CHECK(r.param_error < 1e-4);
  }
}
