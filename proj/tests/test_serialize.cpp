#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "advdiff/error.hpp"
#include "advdiff/serialize.hpp"

using namespace advdiff;

namespace {

template <typename T>
void round_trip(const T& v) {
  const Json j = v;
  const T back = j.get<T>();
  CHECK(Json(back) == j);
}

}  // namespace

TEST_CASE("every config struct survives a JSON round trip") {
  DatasetSpec d;
  d.kind = DatasetKind::kLinearSubspace;
  d.subspace.decay = 0.9;
  d.seed = 123456789012345ULL;
  round_trip(d);
  CorruptionSpec c;
  c.mode = CorruptionMode::kUniformOutliers;
  c.box = std::vector<std::array<double, 2>>{{0, 1}, {2, 3}, {4, 5}};
  round_trip(c);
  round_trip(RaySchedule{});
  Architecture a;
  a.hidden = {7, 9};
  round_trip(a);
  TrainConfig t;
  t.loss_mode = LossMode::kInvariance;
  t.optimizer = OptimizerKind::kSgd;
  round_trip(t);
  SamplerConfig s;
  s.mode = SamplerMode::kDeterministic;
  s.noise_scale = NoiseScale::kSigma;
  round_trip(s);
  AttackConfig k;
  k.kind = AttackKind::kPgdTraj;
  k.selection = TimestepSelection::kSuffixTo0;
  k.loss = AttackLoss::kEps;
  k.gradient = AttackGradient::kPerturbed;
  round_trip(k);
}

TEST_CASE("partial objects keep defaults") {
  const auto t = Json::parse(R"({"lambda": 0.03, "ray": {"omega": 3}})").get<TrainConfig>();
  CHECK(t.lambda == 0.03);
  CHECK(t.ray.omega == 3.0);
  CHECK(t.ray.gamma == RaySchedule{}.gamma);
  CHECK(t.batch_size == TrainConfig{}.batch_size);
}

TEST_CASE("unknown keys and bad enum names are config errors") {
  CHECK_THROWS_AS(Json::parse(R"({"lamda": 0.3})").get<TrainConfig>(), ConfigError);
  CHECK_THROWS_AS(Json::parse(R"({"mode": "ddim"})").get<SamplerConfig>(), ConfigError);
  CHECK_THROWS_AS(Json::parse(R"({"kind": "fgsm"})").get<AttackConfig>(), ConfigError);
  CHECK_THROWS_AS(Json::parse(R"({"plane": {"normal": [1, 1]}})").get<DatasetSpec>(), ConfigError);
}

TEST_CASE("config hash is stable and content-sensitive") {
  TrainConfig a, b;
  CHECK(config_hash(Json(a)) == config_hash(Json(b)));
  b.lr = 2e-4;
  CHECK(config_hash(Json(a)) != config_hash(Json(b)));
  CHECK(config_hash(Json(a)).size() == 16);
}
