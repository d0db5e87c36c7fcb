#include "advdiff/serialize.hpp"

#include <algorithm>

#include "advdiff/error.hpp"
#include "advdiff/io.hpp"

namespace advdiff {

void reject_unknown_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    const bool known = std::any_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; });
    if (!known) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

std::string config_hash(const Json& j) { return io::hash_hex(io::hash_bytes(j.dump())); }


void to_json(Json& j, const PlaneParams& v) {
  j = {{"normal", v.normal}, {"offset", v.offset}, {"center", v.center}, {"extent", v.extent}, {"sigma", v.sigma}};
}

void from_json(const Json& j, PlaneParams& v) {
  reject_unknown_keys(j, {"normal", "offset", "center", "extent", "sigma"}, "plane");
  json_read(j, "normal", v.normal);
  json_read(j, "offset", v.offset);
  json_read(j, "center", v.center);
  json_read(j, "extent", v.extent);
  json_read(j, "sigma", v.sigma);
}

void to_json(Json& j, const MixtureParams& v) {
  j = {{"centers", v.centers}, {"weights", v.weights}, {"sigma", v.sigma}};
}

void from_json(const Json& j, MixtureParams& v) {
  reject_unknown_keys(j, {"centers", "weights", "sigma"}, "mixture");
  json_read(j, "centers", v.centers);
  json_read(j, "weights", v.weights);
  json_read(j, "sigma", v.sigma);
}

void to_json(Json& j, const SubspaceParams& v) {
  j = {{"ambient_dim", v.ambient_dim}, {"dim", v.dim},
       {"coeff_sigma", v.coeff_sigma}, {"pixel_std", v.pixel_std},
       {"mean_amplitude", v.mean_amplitude}};
  j["decay"] = v.decay ? Json(*v.decay) : Json(nullptr);
}

void from_json(const Json& j, SubspaceParams& v) {
  reject_unknown_keys(j, {"ambient_dim", "dim", "decay", "coeff_sigma", "pixel_std", "mean_amplitude"}, "subspace");
  json_read(j, "ambient_dim", v.ambient_dim);
  json_read(j, "dim", v.dim);
  if (auto it = j.find("decay"); it != j.end()) {
    if (it->is_null()) {
      v.decay.reset();
    } else {
      double d = 0.0;
      json_read(j, "decay", d);
      v.decay = d;
    }
  }
  json_read(j, "coeff_sigma", v.coeff_sigma);
  json_read(j, "pixel_std", v.pixel_std);
  json_read(j, "mean_amplitude", v.mean_amplitude);
}

void to_json(Json& j, const DatasetSpec& v) {
  j = {{"kind", to_string(v.kind)}, {"n_samples", v.n_samples}, {"seed", v.seed}};
  switch (v.kind) {
    case DatasetKind::kObliquePlane: j["plane"] = v.plane; break;
    case DatasetKind::kThreeGaussians: j["mixture"] = v.mixture; break;
    case DatasetKind::kLinearSubspace: j["subspace"] = v.subspace; break;
  }
}

void from_json(const Json& j, DatasetSpec& v) {
  reject_unknown_keys(j, {"kind", "n_samples", "plane", "mixture", "subspace", "seed"}, "dataset");
  json_read_enum(j, "kind", v.kind, dataset_kind_from_string);
  json_read(j, "n_samples", v.n_samples);
  json_read(j, "plane", v.plane);
  json_read(j, "mixture", v.mixture);
  json_read(j, "subspace", v.subspace);
  json_read(j, "seed", v.seed);
}

void to_json(Json& j, const CorruptionSpec& v) {
  j = {{"mode", to_string(v.mode)}, {"p", v.p},           {"sigma", v.sigma},
       {"sigma_scale", v.sigma_scale}, {"inflate", v.inflate}, {"seed", v.seed}};
  j["box"] = v.box ? Json(*v.box) : Json(nullptr);
}

void from_json(const Json& j, CorruptionSpec& v) {
  reject_unknown_keys(j, {"mode", "p", "sigma", "sigma_scale", "inflate", "box", "seed"}, "corruption");
  json_read_enum(j, "mode", v.mode, corruption_mode_from_string);
  json_read(j, "p", v.p);
  json_read(j, "sigma", v.sigma);
  json_read(j, "sigma_scale", v.sigma_scale);
  json_read(j, "inflate", v.inflate);
  if (auto it = j.find("box"); it != j.end()) {
    if (it->is_null()) {
      v.box.reset();
    } else {
      std::vector<std::array<double, 2>> box;
      json_read(j, "box", box);
      v.box = box;
    }
  }
  json_read(j, "seed", v.seed);
}

void to_json(Json& j, const RaySchedule& v) {
  j = {{"omega", v.omega}, {"gamma", v.gamma}, {"beta_low", v.beta_low}, {"beta_high", v.beta_high}};
}

void from_json(const Json& j, RaySchedule& v) {
  reject_unknown_keys(j, {"omega", "gamma", "beta_low", "beta_high"}, "ray");
  json_read(j, "omega", v.omega);
  json_read(j, "gamma", v.gamma);
  json_read(j, "beta_low", v.beta_low);
  json_read(j, "beta_high", v.beta_high);
}

void to_json(Json& j, const Architecture& v) {
  j = {{"data_dim", v.data_dim},
       {"hidden", v.hidden},
       {"time_embed_dim", v.time_embed_dim},
       {"activation", to_string(v.activation)},
       {"T", v.T},
       {"skip", v.skip}};
}

void from_json(const Json& j, Architecture& v) {
  reject_unknown_keys(j, {"data_dim", "hidden", "time_embed_dim", "activation", "T", "skip"}, "architecture");
  json_read(j, "data_dim", v.data_dim);
  json_read(j, "hidden", v.hidden);
  json_read(j, "time_embed_dim", v.time_embed_dim);
  json_read_enum(j, "activation", v.activation, activation_from_string);
  json_read(j, "T", v.T);
  json_read(j, "skip", v.skip);
}

void to_json(Json& j, const TrainConfig& v) {
  j = {{"loss_mode", to_string(v.loss_mode)},
       {"lambda", v.lambda},
       {"ray", v.ray},
       {"batch_size", v.batch_size},
       {"steps", v.steps},
       {"lr", v.lr},
       {"optimizer", to_string(v.optimizer)},
       {"adam_beta1", v.adam_beta1},
       {"adam_beta2", v.adam_beta2},
       {"adam_eps", v.adam_eps},
       {"detach_target", v.detach_target},
       {"per_element_beta", v.per_element_beta},
       {"normalize", v.normalize},
       {"log_every", v.log_every},
       {"divergence_factor", v.divergence_factor},
       {"divergence_patience", v.divergence_patience},
       {"seed", v.seed}};
}

void from_json(const Json& j, TrainConfig& v) {
  reject_unknown_keys(j,
                      {"loss_mode", "lambda", "ray", "batch_size", "steps", "lr", "optimizer", "adam_beta1",
                       "adam_beta2", "adam_eps", "detach_target", "per_element_beta", "normalize", "log_every",
                       "divergence_factor", "divergence_patience", "seed"},
                      "train");
  json_read_enum(j, "loss_mode", v.loss_mode, loss_mode_from_string);
  json_read(j, "lambda", v.lambda);
  json_read(j, "ray", v.ray);
  json_read(j, "batch_size", v.batch_size);
  json_read(j, "steps", v.steps);
  json_read(j, "lr", v.lr);
  json_read_enum(j, "optimizer", v.optimizer, optimizer_from_string);
  json_read(j, "adam_beta1", v.adam_beta1);
  json_read(j, "adam_beta2", v.adam_beta2);
  json_read(j, "adam_eps", v.adam_eps);
  json_read(j, "detach_target", v.detach_target);
  json_read(j, "per_element_beta", v.per_element_beta);
  json_read(j, "normalize", v.normalize);
  json_read(j, "log_every", v.log_every);
  json_read(j, "divergence_factor", v.divergence_factor);
  json_read(j, "divergence_patience", v.divergence_patience);
  json_read(j, "seed", v.seed);
}

void to_json(Json& j, const SamplerConfig& v) {
  j = {{"mode", to_string(v.mode)},
       {"steps", v.steps},
       {"noise_scale", to_string(v.noise_scale)},
       {"record", v.record},
       {"thin", v.thin},
       {"chunk", v.chunk},
       {"seed", v.seed}};
}

void from_json(const Json& j, SamplerConfig& v) {
  reject_unknown_keys(j, {"mode", "steps", "noise_scale", "record", "thin", "chunk", "seed"}, "sampler");
  json_read_enum(j, "mode", v.mode, sampler_mode_from_string);
  json_read(j, "steps", v.steps);
  json_read_enum(j, "noise_scale", v.noise_scale, noise_scale_from_string);
  json_read(j, "record", v.record);
  json_read(j, "thin", v.thin);
  json_read(j, "chunk", v.chunk);
  json_read(j, "seed", v.seed);
}

void to_json(Json& j, const AttackConfig& v) {
  j = {{"kind", to_string(v.kind)},
       {"attack_ratio", v.attack_ratio},
       {"phi", v.phi},
       {"pgd_iters", v.pgd_iters},
       {"selection", to_string(v.selection)},
       {"loss", to_string(v.loss)},
       {"gradient", to_string(v.gradient)},
       {"detach_xhat0", v.detach_xhat0},
       {"seed", v.seed}};
}

void from_json(const Json& j, AttackConfig& v) {
  reject_unknown_keys(
      j, {"kind", "attack_ratio", "phi", "pgd_iters", "selection", "loss", "gradient", "detach_xhat0", "seed"},
      "attack");
  json_read_enum(j, "kind", v.kind, attack_kind_from_string);
  json_read(j, "attack_ratio", v.attack_ratio);
  json_read(j, "phi", v.phi);
  json_read(j, "pgd_iters", v.pgd_iters);
  json_read_enum(j, "selection", v.selection, timestep_selection_from_string);
  json_read_enum(j, "loss", v.loss, attack_loss_from_string);
  json_read_enum(j, "gradient", v.gradient, attack_gradient_from_string);
  json_read(j, "detach_xhat0", v.detach_xhat0);
  json_read(j, "seed", v.seed);
}

void write_dataset_sidecar(const std::filesystem::path& json_path, const DatasetSpec& spec, const GroundTruth& truth) {
  Json j;
  j["format"] = "advdiff-dataset-v1";
  j["spec"] = spec;
  j["dim"] = spec.dim();
  Json t;
  t["kind"] = to_string(truth.kind);
  switch (truth.kind) {
    case DatasetKind::kObliquePlane: t["plane"] = truth.plane; break;
    case DatasetKind::kThreeGaussians: t["mixture"] = truth.mixture; break;
    case DatasetKind::kLinearSubspace: {
      const std::string stem = json_path.stem().string();
      const auto dir = json_path.parent_path();
      write_tensor_bin(dir / (stem + ".basis.bin"), truth.basis);
      write_tensor_bin(dir / (stem + ".mean.bin"), truth.mean);
      t["basis"] = stem + ".basis.bin";
      t["mean"] = stem + ".mean.bin";
      t["lambdas"] = truth.lambdas;
      t["coeff_sigma"] = truth.coeff_sigma;
      break;
    }
  }
  j["truth"] = t;
  io::write_file_atomic(json_path, j.dump(2) + "\n");
}

GroundTruth read_dataset_sidecar(const std::filesystem::path& json_path, DatasetSpec* spec_out) {
  Json j;
  try {
    j = Json::parse(io::read_file(json_path));
  } catch (const Json::exception& e) {
    throw IoError(json_path.string() + ": " + e.what());
  }
  if (j.value("format", "") != "advdiff-dataset-v1") throw IoError("unrecognised dataset sidecar " + json_path.string());
  const DatasetSpec spec = j.at("spec").get<DatasetSpec>();
  if (spec_out) *spec_out = spec;
  const Json& t = j.at("truth");
  GroundTruth g;
  g.kind = dataset_kind_from_string(t.at("kind").get<std::string>());
  switch (g.kind) {
    case DatasetKind::kObliquePlane: g.plane = t.at("plane").get<PlaneParams>(); break;
    case DatasetKind::kThreeGaussians: g.mixture = t.at("mixture").get<MixtureParams>(); break;
    case DatasetKind::kLinearSubspace: {
      const auto dir = json_path.parent_path();
      g.basis = read_tensor_bin(dir / t.at("basis").get<std::string>());
      g.mean = read_tensor_bin(dir / t.at("mean").get<std::string>());
      g.lambdas = t.at("lambdas").get<std::vector<double>>();
      g.coeff_sigma = t.at("coeff_sigma").get<double>();
      break;
    }
  }
  return g;
}

}  // namespace advdiff
