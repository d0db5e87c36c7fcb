#include "advdiff/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "advdiff/error.hpp"
#include "advdiff/io.hpp"
#include "advdiff/rng.hpp"

#ifndef ADVDIFF_VERSION
#define ADVDIFF_VERSION "unknown"
#endif

namespace advdiff::cli {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- config

void to_json(Json& j, const ScheduleSpec& v) {
  j = {{"T", v.T}, {"sigma_min", v.sigma_min}, {"sigma_max", v.sigma_max}};
}

void from_json(const Json& j, ScheduleSpec& v) {
  reject_unknown_keys(j, {"T", "sigma_min", "sigma_max"}, "schedule");
  json_read(j, "T", v.T);
  json_read(j, "sigma_min", v.sigma_min);
  json_read(j, "sigma_max", v.sigma_max);
}

void to_json(Json& j, const SampleSpec& v) { j = {{"n", v.n}}; }

void from_json(const Json& j, SampleSpec& v) {
  reject_unknown_keys(j, {"n"}, "sample");
  json_read(j, "n", v.n);
}

void to_json(Json& j, const EvalSpec& v) {
  j = {{"metrics", v.metrics},
       {"similarity", to_string(v.similarity)},
       {"memorization_threshold", v.memorization_threshold},
       {"psnr_peak", v.psnr_peak},
       {"heldout", v.heldout},
       {"flow_grid", v.flow_grid},
       {"flow_dims", v.flow_dims}};
}

void from_json(const Json& j, EvalSpec& v) {
  reject_unknown_keys(
      j, {"metrics", "similarity", "memorization_threshold", "psnr_peak", "heldout", "flow_grid", "flow_dims"},
      "eval");
  json_read(j, "metrics", v.metrics);
  json_read_enum(j, "similarity", v.similarity, similarity_metric_from_string);
  json_read(j, "memorization_threshold", v.memorization_threshold);
  json_read(j, "psnr_peak", v.psnr_peak);
  json_read(j, "heldout", v.heldout);
  json_read(j, "flow_grid", v.flow_grid);
  json_read(j, "flow_dims", v.flow_dims);
}

void to_json(Json& j, const ExperimentConfig& v) {
  j = {{"master_seed", v.master_seed}, {"dataset", v.dataset}, {"corruption", v.corruption},
       {"schedule", v.schedule},       {"architecture", v.architecture}, {"train", v.train},
       {"sampler", v.sampler},         {"attack", v.attack},         {"sample", v.sample},
       {"eval", v.eval}};
  if (!v.output_dir.empty()) j["output_dir"] = v.output_dir;
}

void from_json(const Json& j, ExperimentConfig& v) {
  reject_unknown_keys(j,
                      {"master_seed", "dataset", "corruption", "schedule", "architecture", "train", "sampler",
                       "attack", "sample", "eval", "output_dir"},
                      "config");
  json_read(j, "master_seed", v.master_seed);
  json_read(j, "dataset", v.dataset);
  json_read(j, "corruption", v.corruption);
  json_read(j, "schedule", v.schedule);
  json_read(j, "architecture", v.architecture);
  json_read(j, "train", v.train);
  json_read(j, "sampler", v.sampler);
  json_read(j, "attack", v.attack);
  json_read(j, "sample", v.sample);
  json_read(j, "eval", v.eval);
  json_read(j, "output_dir", v.output_dir);
}

NoiseSchedule ExperimentConfig::noise_schedule() const {
  return build_linear_schedule(schedule.T, schedule.sigma_min, schedule.sigma_max);
}

void ExperimentConfig::validate() const {
  dataset.validate();
  corruption.validate();
  const NoiseSchedule ns = noise_schedule();
  if (!ns.reaches_noise()) {
    throw ConfigError("schedule ends at alpha_bar(T) = " + io::format_double(ns.alpha_bar(ns.T())) +
                      "; raise sigma_max or T so that alpha_bar(T) < 0.01");
  }
  train.ray.validate();
  architecture.validate();
  train.validate();
  sampler.validate(ns);
  attack.validate();
  if (sample.n == 0) throw ConfigError("sample.n must be >= 1");
  for (const auto& m : eval.metrics) {
    static const std::set<std::string> known{"plane_distance", "center_distance", "rho", "psnr", "memorization",
                                             "flow"};
    if (!known.count(m)) throw ConfigError("unknown eval metric '" + m + "'");
  }
  if (eval.flow_grid == 0) throw ConfigError("eval.flow_grid must be >= 1");
  if (eval.psnr_peak <= 0.0) throw ConfigError("eval.psnr_peak must be > 0");
}

void apply_override(Json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not path=value");
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(text);
  } catch (const Json::exception&) {
    value = text;
  }
  Json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("override path '" + path + "' has an empty component");
    if (!node->is_object()) {
      if (!node->is_null()) throw ConfigError("override path '" + path + "' walks into a non-object");
      *node = Json::object();
    }
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

ExperimentConfig resolve_config(Json base, const std::vector<std::string>& overrides) {
  if (base.is_null()) base = Json::object();
  for (const auto& o : overrides) apply_override(base, o);
  ExperimentConfig cfg = base.get<ExperimentConfig>();
  auto seeded = [&](const char* block) {
    auto it = base.find(block);
    return it != base.end() && it->is_object() && it->contains("seed");
  };
  if (!seeded("dataset")) cfg.dataset.seed = derive_seed(cfg.master_seed, "dataset");
  if (!seeded("corruption")) cfg.corruption.seed = derive_seed(cfg.master_seed, "corruption");
  if (!seeded("train")) cfg.train.seed = derive_seed(cfg.master_seed, "train");
  if (!seeded("sampler")) cfg.sampler.seed = derive_seed(cfg.master_seed, "sampler");
  if (!seeded("attack")) cfg.attack.seed = derive_seed(cfg.master_seed, "attack");
  cfg.architecture.data_dim = cfg.dataset.dim();
  cfg.architecture.T = cfg.schedule.T;
  return cfg;
}

ExperimentConfig load_config(const std::optional<fs::path>& path, const std::vector<std::string>& overrides) {
  Json base = Json::object();
  if (path) {
    try {
      base = Json::parse(io::read_file(*path));
    } catch (const Json::exception& e) {
      throw ConfigError(path->string() + ": " + e.what());
    }
  }
  return resolve_config(std::move(base), overrides);
}

// ---------------------------------------------------------------- hashing

std::string hash_input(const fs::path& path) {
  std::error_code ec;
  if (fs::is_directory(path, ec)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(path)) {
      if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::string acc;
    for (const auto& f : files) acc += fs::relative(f, path).generic_string() + ":" + io::hash_file(f) + "\n";
    return io::hash_hex(io::hash_bytes(acc));
  }
  std::string acc = io::hash_file(path);
  if (path.extension() == ".json") {
    for (const char* suffix : {".basis.bin", ".mean.bin", ".basis.json", ".mean.json"}) {
      const fs::path side = path.parent_path() / (path.stem().string() + suffix);
      if (fs::exists(side)) acc += ":" + io::hash_file(side);
    }
  }
  return acc.find(':') == std::string::npos ? acc : io::hash_hex(io::hash_bytes(acc));
}

std::string version_string() { return ADVDIFF_VERSION; }

namespace {

// ---------------------------------------------------------------- runs

struct Invocation {
  std::string command;
  ExperimentConfig cfg;
  std::map<std::string, fs::path> inputs;  // role -> path
  fs::path out;
};

Json config_for_manifest(const ExperimentConfig& cfg) {
  Json j = cfg;
  j.erase("output_dir");
  return j;
}

fs::path absolute_path(const fs::path& p) { return fs::absolute(p).lexically_normal(); }

void write_manifest(const Invocation& inv, const std::vector<std::string>& outputs) {
  Json inputs = Json::object();
  for (const auto& [role, path] : inv.inputs) {
    inputs[role] = {{"path", absolute_path(path).string()}, {"hash", hash_input(path)}};
  }
  const Json m = {{"format", "advdiff-manifest-v1"},
                  {"command", inv.command},
                  {"version", version_string()},
                  {"master_seed", inv.cfg.master_seed},
                  {"config", config_for_manifest(inv.cfg)},
                  {"inputs", inputs},
                  {"outputs", outputs}};
  io::write_file_atomic(inv.out / "manifest.json", m.dump(2) + "\n");
}

const fs::path& input(const Invocation& inv, const std::string& role) {
  auto it = inv.inputs.find(role);
  if (it == inv.inputs.end()) {
    std::string flag = role;
    std::replace(flag.begin(), flag.end(), '_', '-');
    throw ConfigError(inv.command + " needs --" + flag);
  }
  if (!fs::exists(it->second)) throw IoError(role + " input " + it->second.string() + " does not exist");
  return it->second;
}

DenoiserParams load_model(const Invocation& inv, const NoiseSchedule& ns) {
  DenoiserParams p = load_checkpoint(input(inv, "checkpoint"));
  if (p.schedule_hash != io::hash_hex(ns.hash())) {
    throw ConfigError("checkpoint was trained under a different noise schedule than the config describes");
  }
  if (p.arch.data_dim != inv.cfg.dataset.dim()) {
    throw ConfigError("checkpoint has dimension " + std::to_string(p.arch.data_dim) + ", config dataset has " +
                      std::to_string(inv.cfg.dataset.dim()));
  }
  return p;
}

SampleSet as_sample_set(const Tensor& points) {
  SampleSet s;
  s.points = points;
  s.clean_mask.assign(points.rows(), 1);
  return s;
}

void cmd_train(const Invocation& inv) {
  const auto& cfg = inv.cfg;
  const NoiseSchedule ns = cfg.noise_schedule();
  fs::create_directories(inv.out);
  GroundTruth truth;
  const SampleSet clean = generate(cfg.dataset, &truth);
  const SampleSet data = corrupt(clean, truth, cfg.corruption);
  write_samples_csv(inv.out / "dataset.csv", data);
  write_dataset_sidecar(inv.out / "dataset.json", cfg.dataset, truth);

  const std::size_t every = std::max<std::size_t>(1, cfg.train.steps / 20);
  const TrainResult r = train(cfg.train, cfg.architecture, data, ns, [&](std::size_t step, const TrainReportRow& row) {
    if (step % every == 0) {
      std::fprintf(stderr, "step %zu/%zu  loss_dm %.5f  loss_reg %.5f  grad %.4f\n", step, cfg.train.steps,
                   row.loss_dm, row.loss_reg, row.grad_norm);
    }
    return true;
  });
  save_checkpoint(inv.out / "checkpoint", r.params);
  r.report.write_csv(inv.out / "train_report.csv");

  // Effective ray sqrt(1 - ab_t) r_beta(t) at both ends of the beta range and at beta = 1.
  const RaySchedule& rs = cfg.train.ray;
  std::ostringstream os;
  os << "t,sigma,alpha_bar,ray_beta_low,ray_beta_1,ray_beta_high\n";
  for (int t = 1; t <= ns.T(); ++t) {
    os << t << ',' << io::format_double(ns.sigma(t)) << ',' << io::format_double(ns.alpha_bar(t)) << ','
       << io::format_double(effective_ray(rs, ns, t, rs.beta_low)) << ','
       << io::format_double(effective_ray(rs, ns, t, 1.0)) << ','
       << io::format_double(effective_ray(rs, ns, t, rs.beta_high)) << '\n';
  }
  io::write_file_atomic(inv.out / "schedule.csv", os.str());
  write_manifest(inv, {"dataset.csv", "dataset.json", "checkpoint", "train_report.csv", "schedule.csv"});
}

void cmd_sample(const Invocation& inv) {
  const auto& cfg = inv.cfg;
  const NoiseSchedule ns = cfg.noise_schedule();
  const DenoiserParams p = load_model(inv, ns);
  fs::create_directories(inv.out);
  const DenoiserModel model(p);
  const SampleOutput o = sample(model, ns, cfg.sampler, cfg.sample.n, &p.normalizer);
  write_samples_csv(inv.out / "samples.csv", as_sample_set(o.points));
  std::vector<std::string> outputs{"samples.csv"};
  if (cfg.sampler.record) {
    write_trajectories(inv.out / "trajectories", o.trajectories, cfg.sampler);
    outputs.push_back("trajectories");
  }
  write_manifest(inv, outputs);
}

void cmd_attack(const Invocation& inv) {
  const auto& cfg = inv.cfg;
  const NoiseSchedule ns = cfg.noise_schedule();
  const DenoiserParams p = load_model(inv, ns);
  fs::create_directories(inv.out);
  const DenoiserModel model(p);
  const SampleOutput o = attacked_sample(model, ns, cfg.sampler, cfg.attack, cfg.sample.n, &p.normalizer);
  write_samples_csv(inv.out / "samples.csv", as_sample_set(o.points));
  write_attack_report_csv(inv.out / "attack_report.csv", o.trajectories);

  std::size_t attacked = 0;
  double sum_delta = 0.0, max_delta = 0.0, sum_loss = 0.0;
  std::set<int> steps;
  for (const auto& tr : o.trajectories) {
    for (const auto& m : tr.meta) {
      if (!m.attacked) continue;
      ++attacked;
      steps.insert(m.t);
      sum_delta += m.delta_inf;
      max_delta = std::max(max_delta, m.delta_inf);
      sum_loss += m.loss;
    }
  }
  const double n = std::max<double>(1.0, static_cast<double>(attacked));
  const Json summary = {{"config", cfg.attack},
                        {"chains", o.trajectories.size()},
                        {"attacked_timesteps", std::vector<int>(steps.rbegin(), steps.rend())},
                        {"attacked_steps_total", attacked},
                        {"mean_delta_inf", sum_delta / n},
                        {"max_delta_inf", max_delta},
                        {"mean_loss", sum_loss / n}};
  io::write_file_atomic(inv.out / "attack_summary.json", summary.dump(2) + "\n");
  std::vector<std::string> outputs{"samples.csv", "attack_report.csv", "attack_summary.json"};
  if (cfg.sampler.record) {
    write_trajectories(inv.out / "trajectories", o.trajectories, cfg.sampler);
    outputs.push_back("trajectories");
  }
  write_manifest(inv, outputs);
}

std::vector<std::string> default_metrics(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::kObliquePlane: return {"plane_distance"};
    case DatasetKind::kThreeGaussians: return {"center_distance"};
    case DatasetKind::kLinearSubspace: return {"rho", "psnr"};
  }
  return {};
}

void cmd_eval(const Invocation& inv) {
  const auto& cfg = inv.cfg;
  const fs::path& samples_path = input(inv, "samples");
  const fs::path& dataset_path = input(inv, "dataset");
  const SampleSet gen = read_samples_csv(samples_path);
  DatasetSpec spec;
  const GroundTruth truth = read_dataset_sidecar(dataset_path, &spec);
  if (gen.dim() != spec.dim()) {
    throw ConfigError("samples have dimension " + std::to_string(gen.dim()) + ", dataset has " +
                      std::to_string(spec.dim()));
  }
  const auto metrics = cfg.eval.metrics.empty() ? default_metrics(spec.kind) : cfg.eval.metrics;
  fs::create_directories(inv.out);

  EvalReport rep;
  rep.provenance["samples_hash"] = hash_input(samples_path);
  rep.provenance["dataset_hash"] = hash_input(dataset_path);
  rep.provenance["dataset_spec_hash"] = config_hash(Json(spec));
  rep.provenance["label"] = absolute_path(samples_path).parent_path().filename().string();
  const fs::path sibling = samples_path.parent_path() / "manifest.json";
  if (fs::exists(sibling)) {
    const Json m = Json::parse(io::read_file(sibling));
    if (m.contains("inputs") && m["inputs"].contains("checkpoint")) {
      rep.provenance["checkpoint_hash"] = m["inputs"]["checkpoint"]["hash"].get<std::string>();
    }
    if (m.contains("command")) rep.provenance["samples_command"] = m["command"].get<std::string>();
  }

  std::vector<std::string> outputs{"eval.json", "eval.csv"};
  for (const auto& name : metrics) {
    if (name == "plane_distance") {
      if (spec.kind != DatasetKind::kObliquePlane) throw ConfigError("plane_distance needs an oblique_plane dataset");
      rep.arrays["plane_distance"] = plane_distance(gen.points, truth.plane.normal, truth.plane.offset);
    } else if (name == "center_distance") {
      if (spec.kind != DatasetKind::kThreeGaussians) throw ConfigError("center_distance needs a mixture dataset");
      Tensor centers(Shape{truth.mixture.centers.size(), 3});
      for (std::size_t c = 0; c < truth.mixture.centers.size(); ++c)
        std::copy(truth.mixture.centers[c].begin(), truth.mixture.centers[c].end(), centers.row(c).begin());
      auto d = max_similarity(gen.points, centers, SimilarityMetric::kNegL2);
      for (double& v : d) v = -v;
      rep.arrays["center_distance"] = std::move(d);
    } else if (name == "rho") {
      if (spec.kind != DatasetKind::kLinearSubspace) throw ConfigError("rho needs a linear_subspace dataset");
      rep.arrays["rho"] = rho(gen.points, truth.basis, truth.mean);
    } else if (name == "psnr") {
      // Each generation against its nearest clean held-out reference.
      const SampleSet ref =
          sample_points(spec, truth, cfg.eval.heldout, derive_seed(spec.seed, "heldout"));
      const auto nearest = max_similarity(gen.points, ref.points, SimilarityMetric::kNegL2);
      const double D = static_cast<double>(gen.dim());
      std::vector<double> values;
      double pooled = 0.0;
      for (double s : nearest) {
        const double mse = s * s / D;
        pooled += mse;
        values.push_back(mse > 0.0 ? 10.0 * std::log10(cfg.eval.psnr_peak * cfg.eval.psnr_peak / mse) : INFINITY);
      }
      pooled /= static_cast<double>(nearest.size());
      rep.arrays["psnr"] = std::move(values);
      rep.scalars["psnr_pooled"] = 10.0 * std::log10(cfg.eval.psnr_peak * cfg.eval.psnr_peak / pooled);
    } else if (name == "memorization") {
      const SampleSet train_set = read_samples_csv(input(inv, "train_data"));
      const auto mem = memorization_histogram(gen.points, train_set.points, cfg.eval.similarity);
      rep.arrays["max_similarity"] = mem.similarity;
      rep.scalars["memorization_mass"] = fraction_at_or_above(mem.similarity, cfg.eval.memorization_threshold);
      std::ostringstream os;
      os << "lo,hi,count\n";
      for (std::size_t b = 0; b < mem.histogram.counts.size(); ++b) {
        os << io::format_double(mem.histogram.edges[b]) << ',' << io::format_double(mem.histogram.edges[b + 1])
           << ',' << mem.histogram.counts[b] << '\n';
      }
      io::write_file_atomic(inv.out / "memorization_histogram.csv", os.str());
      outputs.push_back("memorization_histogram.csv");
    } else if (name == "flow") {
      const auto trajs = read_trajectories(input(inv, "trajectories"));
      FlowProjection proj;
      proj.dims = cfg.eval.flow_dims;
      const FlowHistogram fh = flow_histogram(trajs, proj, cfg.eval.flow_grid);
      const Json j = {{"grid", fh.grid},        {"lo", fh.lo},           {"hi", fh.hi},
                      {"t", fh.t},              {"n_chains", fh.n_chains}, {"entropy", fh.entropy},
                      {"density", fh.density}};
      io::write_file_atomic(inv.out / "flow.json", j.dump() + "\n");
      outputs.push_back("flow.json");
      // mean entropy over the last quarter of the recorded slices
      const std::size_t k = std::max<std::size_t>(1, fh.entropy.size() / 4);
      double e = 0.0;
      for (std::size_t s = fh.entropy.size() - k; s < fh.entropy.size(); ++s) e += fh.entropy[s];
      rep.scalars["flow_entropy_final_quarter"] = e / static_cast<double>(k);
    } else {
      throw ConfigError("unknown eval metric '" + name + "'");
    }
  }
  rep.write(inv.out, "eval");
  write_manifest(inv, outputs);
}

void cmd_report(const Invocation& inv) {
  std::vector<std::pair<std::string, Json>> reports;
  for (const auto& [role, path] : inv.inputs) {
    if (!fs::exists(path)) throw IoError(path.string() + " does not exist");
    Json j;
    try {
      j = Json::parse(io::read_file(path));
    } catch (const Json::exception& e) {
      throw IoError(path.string() + ": " + e.what());
    }
    std::string label;
    if (j.contains("provenance")) label = j["provenance"].value("label", std::string());
    if (label.empty()) label = role;
    reports.emplace_back(label, std::move(j));
  }
  if (reports.empty()) throw ConfigError("report needs at least one eval.json");

  std::set<std::string> columns;
  for (const auto& [label, j] : reports) {
    for (const auto& [name, s] : j.at("summary").items())
      for (const char* stat : {"mean", "median", "p95"}) columns.insert(name + "_" + stat);
    for (const auto& [name, v] : j.at("scalars").items()) columns.insert(name);
  }
  auto cell = [](const Json& v) { return v.is_string() ? v.get<std::string>() : io::format_double(v.get<double>()); };
  std::ostringstream os;
  os << "label";
  for (const auto& c : columns) os << ',' << c;
  os << '\n';
  for (const auto& [label, j] : reports) {
    os << label;
    for (const auto& c : columns) {
      os << ',';
      if (j.at("scalars").contains(c)) {
        os << cell(j.at("scalars").at(c));
        continue;
      }
      const auto us = c.rfind('_');
      const std::string name = c.substr(0, us), stat = c.substr(us + 1);
      if (j.at("summary").contains(name)) os << cell(j.at("summary").at(name).at(stat));
    }
    os << '\n';
  }
  fs::create_directories(inv.out);
  io::write_file_atomic(inv.out / "comparison.csv", os.str());
  write_manifest(inv, {"comparison.csv"});
}

void execute(const Invocation& inv) {
  inv.cfg.validate();
  if (inv.command == "train") return cmd_train(inv);
  if (inv.command == "sample") return cmd_sample(inv);
  if (inv.command == "attack") return cmd_attack(inv);
  if (inv.command == "eval") return cmd_eval(inv);
  if (inv.command == "report") return cmd_report(inv);
  throw ConfigError("unknown command '" + inv.command + "'");
}

Invocation from_manifest(const fs::path& path, const fs::path& out) {
  Json m;
  try {
    m = Json::parse(io::read_file(path));
  } catch (const Json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  if (m.value("format", "") != "advdiff-manifest-v1") throw IoError(path.string() + " is not a run manifest");
  Invocation inv;
  inv.command = m.at("command").get<std::string>();
  inv.cfg = resolve_config(m.at("config"), {});
  for (const auto& [role, entry] : m.at("inputs").items()) {
    const fs::path p = entry.at("path").get<std::string>();
    if (!fs::exists(p)) throw IoError("manifest input " + p.string() + " no longer exists");
    const std::string h = hash_input(p);
    if (h != entry.at("hash").get<std::string>()) {
      throw IoError("manifest input " + p.string() + " changed since the run (hash " + h + ")");
    }
    inv.inputs[role] = p;
  }
  inv.out = out;
  return inv;
}

fs::path default_out(const ExperimentConfig& cfg, const std::string& command) {
  if (!cfg.output_dir.empty()) return cfg.output_dir;
  if (const char* env = std::getenv(kOutputDirEnv); env && *env) return fs::path(env) / command;
  return fs::path("runs") / command;
}

// A sample/attack run without --config inherits the training run's config.
std::optional<fs::path> training_config(const std::string& checkpoint) {
  const fs::path m = fs::path(checkpoint).parent_path() / "manifest.json";
  if (checkpoint.empty() || !fs::exists(m)) return std::nullopt;
  return m;
}

ExperimentConfig config_from(const std::optional<fs::path>& config_path, const std::optional<fs::path>& inherited,
                             const std::vector<std::string>& overrides) {
  if (config_path || !inherited) return load_config(config_path, overrides);
  Json m;
  try {
    m = Json::parse(io::read_file(*inherited));
  } catch (const Json::exception& e) {
    throw IoError(inherited->string() + ": " + e.what());
  }
  return resolve_config(m.at("config"), overrides);
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"Adversarially robust diffusion training and evaluation on synthetic data"};
  app.require_subcommand(1);
  app.set_version_flag("--version", version_string());

  std::string config_path, out, checkpoint, samples, dataset, train_data, trajectories, manifest;
  std::vector<std::string> overrides, eval_files;
  std::optional<std::size_t> n;
  std::optional<int> steps;
  std::optional<std::string> mode, kind, metrics;
  std::optional<double> ratio;
  std::optional<std::uint64_t> seed;
  bool record = false;

  auto common = [&](CLI::App* sub, bool with_config) {
    if (with_config) sub->add_option("-c,--config", config_path, "JSON experiment config");
    sub->add_option("--set", overrides, "Override a config field, path=value (repeatable)");
    sub->add_option("-o,--out", out, "Output directory");
  };
  auto* train_cmd = app.add_subcommand("train", "Generate the dataset and train a denoiser");
  common(train_cmd, true);

  auto* sample_cmd = app.add_subcommand("sample", "Draw generations from a checkpoint");
  common(sample_cmd, true);
  auto* attack_cmd = app.add_subcommand("attack", "Draw generations under a trajectory attack");
  common(attack_cmd, true);
  for (auto* sub : {sample_cmd, attack_cmd}) {
    sub->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
    sub->add_option("-n,--n", n, "Number of generations");
    sub->add_option("--steps", steps, "Reverse steps (0 = T)");
    sub->add_option("--mode", mode, "ancestral | deterministic");
    sub->add_option("--seed", seed, "Sampler seed");
    sub->add_flag("--record", record, "Record trajectories");
  }
  attack_cmd->add_option("--kind", kind, "fgsm_traj | pgd_traj");
  attack_cmd->add_option("--ratio", ratio, "Fraction of steps attacked");

  auto* eval_cmd = app.add_subcommand("eval", "Score generations against the dataset's ground truth");
  common(eval_cmd, true);
  eval_cmd->add_option("--samples", samples, "samples.csv")->required();
  eval_cmd->add_option("--dataset", dataset, "dataset.json sidecar")->required();
  eval_cmd->add_option("--train-data", train_data, "Training set CSV (memorization)");
  eval_cmd->add_option("--trajectories", trajectories, "Trajectory directory (flow)");
  eval_cmd->add_option("--metrics", metrics, "Comma-separated metric list");

  auto* report_cmd = app.add_subcommand("report", "Aggregate eval.json files into comparison.csv");
  common(report_cmd, false);
  report_cmd->add_option("evals", eval_files, "eval.json files")->required();

  auto* replay_cmd = app.add_subcommand("replay", "Re-run a stage from its manifest.json");
  replay_cmd->add_option("manifest", manifest, "manifest.json")->required();
  replay_cmd->add_option("-o,--out", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitConfig;
  }

  try {
    Invocation inv;
    if (replay_cmd->parsed()) {
      inv = from_manifest(manifest, out);
    } else {
      CLI::App* sub = app.get_subcommands().front();
      inv.command = sub->get_name();
      std::vector<std::string> sugar;
      if (n) sugar.push_back("sample.n=" + std::to_string(*n));
      if (steps) sugar.push_back("sampler.steps=" + std::to_string(*steps));
      if (mode) sugar.push_back("sampler.mode=" + Json(*mode).dump());
      if (seed) sugar.push_back("sampler.seed=" + std::to_string(*seed));
      if (record) sugar.push_back("sampler.record=true");
      if (kind) sugar.push_back("attack.kind=" + Json(*kind).dump());
      if (ratio) sugar.push_back("attack.attack_ratio=" + io::format_double(*ratio));
      if (metrics) {
        Json list = Json::array();
        std::stringstream ss(*metrics);
        for (std::string m; std::getline(ss, m, ',');)
          if (!m.empty()) list.push_back(m);
        sugar.push_back("eval.metrics=" + list.dump());
      }
      sugar.insert(sugar.end(), overrides.begin(), overrides.end());
      const std::optional<fs::path> cfg_file =
          config_path.empty() ? std::nullopt : std::optional<fs::path>(config_path);
      inv.cfg = config_from(cfg_file, training_config(checkpoint), sugar);
      if (!checkpoint.empty()) inv.inputs["checkpoint"] = checkpoint;
      if (!samples.empty()) inv.inputs["samples"] = samples;
      if (!dataset.empty()) inv.inputs["dataset"] = dataset;
      if (!train_data.empty()) inv.inputs["train_data"] = train_data;
      if (!trajectories.empty()) inv.inputs["trajectories"] = trajectories;
      for (std::size_t i = 0; i < eval_files.size(); ++i) {
        char role[32];
        std::snprintf(role, sizeof role, "eval_%04zu", i);
        inv.inputs[role] = eval_files[i];
      }
      inv.out = out.empty() ? default_out(inv.cfg, inv.command) : fs::path(out);
    }
    execute(inv);
    std::fprintf(stderr, "%s: wrote %s\n", inv.command.c_str(), inv.out.string().c_str());
    return kExitOk;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kExitNumeric;
  } catch (const IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return kExitIo;
  } catch (const Json::exception& e) {
    std::fprintf(stderr, "io error: malformed JSON input: %s\n", e.what());
    return kExitIo;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUnexpected;
  }
}

}  // namespace advdiff::cli
