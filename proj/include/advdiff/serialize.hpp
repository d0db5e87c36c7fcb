#pragma once

// JSON mapping for every configuration struct. Unknown keys are rejected so
// that a typo in a config file fails loudly instead of silently defaulting.

#include <string>

#include <json.hpp>

#include "advdiff/attacks.hpp"
#include "advdiff/data.hpp"
#include "advdiff/denoiser.hpp"
#include "advdiff/error.hpp"
#include "advdiff/sampler.hpp"
#include "advdiff/schedule.hpp"
#include "advdiff/training.hpp"

namespace advdiff {

using Json = nlohmann::json;

void to_json(Json& j, const PlaneParams& v);
void from_json(const Json& j, PlaneParams& v);
void to_json(Json& j, const MixtureParams& v);
void from_json(const Json& j, MixtureParams& v);
void to_json(Json& j, const SubspaceParams& v);
void from_json(const Json& j, SubspaceParams& v);
void to_json(Json& j, const DatasetSpec& v);
void from_json(const Json& j, DatasetSpec& v);
void to_json(Json& j, const CorruptionSpec& v);
void from_json(const Json& j, CorruptionSpec& v);
void to_json(Json& j, const RaySchedule& v);
void from_json(const Json& j, RaySchedule& v);
void to_json(Json& j, const Architecture& v);
void from_json(const Json& j, Architecture& v);
void to_json(Json& j, const TrainConfig& v);
void from_json(const Json& j, TrainConfig& v);
void to_json(Json& j, const SamplerConfig& v);
void from_json(const Json& j, SamplerConfig& v);
void to_json(Json& j, const AttackConfig& v);
void from_json(const Json& j, AttackConfig& v);

// Throws ConfigError naming the first key of `j` not in `allowed`.
void reject_unknown_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& where);

// Leaves `out` untouched when `key` is absent; type mismatches become
// ConfigError.
template <typename T>
void json_read(const Json& j, const char* key, T& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->template get<T>();
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

template <typename E, typename Parse>
void json_read_enum(const Json& j, const char* key, E& out, Parse parse) {
  auto it = j.find(key);
  if (it == j.end()) return;
  if (!it->is_string()) throw ConfigError(std::string("'") + key + "' must be a string");
  out = parse(it->template get<std::string>());
}

// 16-hex-digit hash of the canonical JSON form.
std::string config_hash(const Json& j);

}  // namespace advdiff
