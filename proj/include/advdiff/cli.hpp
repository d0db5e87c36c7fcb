#pragma once

// Experiment driver behind the `advdiff` executable: one JSON config per
// run, subcommands train/sample/attack/eval/report/replay, and a manifest.json
// next to every output set that is enough to regenerate it.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "advdiff/attacks.hpp"
#include "advdiff/data.hpp"
#include "advdiff/denoiser.hpp"
#include "advdiff/metrics.hpp"
#include "advdiff/sampler.hpp"
#include "advdiff/schedule.hpp"
#include "advdiff/serialize.hpp"
#include "advdiff/training.hpp"

namespace advdiff::cli {

// Exit codes per failure class.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUnexpected = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;
inline constexpr int kExitIo = 4;

// Overrides the default output root; each subcommand writes to <root>/<command>.
inline constexpr const char* kOutputDirEnv = "ADVDIFF_OUTPUT_DIR";

struct ScheduleSpec {
  int T = 100;
  double sigma_min = 1e-3;
  double sigma_max = 0.2;
};

struct SampleSpec {
  std::size_t n = 1000;
};

struct EvalSpec {
  // Empty picks the natural metric for the dataset kind.
  std::vector<std::string> metrics;
  SimilarityMetric similarity = SimilarityMetric::kCosine;
  double memorization_threshold = 0.98;
  double psnr_peak = 2.0;
  std::size_t heldout = 1000;
  std::size_t flow_grid = 64;
  std::array<std::size_t, 2> flow_dims{0, 1};
};

struct ExperimentConfig {
  std::uint64_t master_seed = 0;
  DatasetSpec dataset;
  CorruptionSpec corruption;
  ScheduleSpec schedule;
  Architecture architecture;
  TrainConfig train;
  SamplerConfig sampler;
  AttackConfig attack;
  SampleSpec sample;
  EvalSpec eval;
  std::string output_dir;  // never stored in manifests

  NoiseSchedule noise_schedule() const;
  // Everything a subcommand needs, checked before any compute.
  void validate() const;
};

void to_json(Json& j, const ScheduleSpec& v);
void from_json(const Json& j, ScheduleSpec& v);
void to_json(Json& j, const SampleSpec& v);
void from_json(const Json& j, SampleSpec& v);
void to_json(Json& j, const EvalSpec& v);
void from_json(const Json& j, EvalSpec& v);
void to_json(Json& j, const ExperimentConfig& v);
void from_json(const Json& j, ExperimentConfig& v);

/// "a.b.c=value": value is parsed as JSON when possible, otherwise taken as
/// a string. Intermediate objects are created as needed.
void apply_override(Json& j, const std::string& assignment);

/// Config file (optional) + overrides, then seeds: any block without an
/// explicit "seed" gets derive_seed(master_seed, <block name>). Architecture
/// data_dim and T follow the dataset and schedule.
ExperimentConfig resolve_config(Json base, const std::vector<std::string>& overrides);
ExperimentConfig load_config(const std::optional<std::filesystem::path>& path,
                             const std::vector<std::string>& overrides);

/// Hash of a file, or of every file under a directory (relative names
/// included). A dataset sidecar also covers its .bin companions.
std::string hash_input(const std::filesystem::path& path);

std::string version_string();

int run(int argc, const char* const* argv);

}  // namespace advdiff::cli
