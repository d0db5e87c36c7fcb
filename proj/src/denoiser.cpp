#include "advdiff/denoiser.hpp"

#include <cmath>

#include <json.hpp>

#include "advdiff/error.hpp"
#include "advdiff/io.hpp"
#include "advdiff/rng.hpp"

namespace advdiff {

std::string to_string(Activation a) { return a == Activation::kSilu ? "silu" : "relu"; }

Activation activation_from_string(const std::string& s) {
  if (s == "silu") return Activation::kSilu;
  if (s == "relu") return Activation::kRelu;
  throw ConfigError("unknown activation '" + s + "'");
}

void Architecture::validate() const {
  if (data_dim == 0) throw ConfigError("denoiser data_dim must be >= 1");
  if (time_embed_dim == 0 || time_embed_dim % 2 != 0) throw ConfigError("time_embed_dim must be even and positive");
  if (hidden.empty()) throw ConfigError("denoiser needs at least one hidden layer");
  for (std::size_t h : hidden)
    if (h == 0) throw ConfigError("hidden widths must be positive");
  if (T < 1) throw ConfigError("denoiser T must be >= 1");
}

std::vector<double> time_embed(int t, int T, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0) throw ConfigError("time embedding dim must be even, got " + std::to_string(dim));
  if (T < 1) throw ConfigError("time embedding needs T >= 1");
  const std::size_t half = dim / 2;
  const double s = static_cast<double>(t) * 1000.0 / static_cast<double>(T);
  std::vector<double> out(dim);
  for (std::size_t j = 0; j < half; ++j) {
    const double f = std::pow(10000.0, -static_cast<double>(j) / static_cast<double>(half));
    out[2 * j] = std::sin(s * f);
    out[2 * j + 1] = std::cos(s * f);
  }
  return out;
}

std::size_t DenoiserParams::num_parameters() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].numel() + biases[l].numel();
  return n;
}

bool DenoiserParams::all_finite() const {
  for (std::size_t l = 0; l < weights.size(); ++l)
    if (!weights[l].all_finite() || !biases[l].all_finite()) return false;
  return true;
}

std::vector<double> DenoiserParams::flatten() const {
  std::vector<double> out;
  out.reserve(num_parameters());
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.insert(out.end(), weights[l].data().begin(), weights[l].data().end());
    out.insert(out.end(), biases[l].data().begin(), biases[l].data().end());
  }
  return out;
}

void DenoiserParams::unflatten(std::span<const double> values) {
  if (values.size() != num_parameters()) {
    throw ShapeError("parameter blob holds " + std::to_string(values.size()) + " values, architecture needs " +
                     std::to_string(num_parameters()));
  }
  std::size_t off = 0;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    for (Tensor* t : {&weights[l], &biases[l]}) {
      std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(off), t->numel(), t->data().begin());
      off += t->numel();
    }
  }
}

DenoiserParams init_denoiser(const Architecture& arch, std::uint64_t seed) {
  arch.validate();
  DenoiserParams p;
  p.arch = arch;
  p.normalizer = Normalizer::identity(arch.data_dim);
  std::vector<std::size_t> widths{arch.data_dim + arch.time_embed_dim};
  widths.insert(widths.end(), arch.hidden.begin(), arch.hidden.end());
  widths.push_back(arch.data_dim);

  Rng rng(seed, "denoiser-init");
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const std::size_t in = widths[l];
    const std::size_t out = widths[l + 1];
    Tensor w(Shape{in, out});
    const bool last = l + 2 == widths.size();
    if (!last) {
      const double bound = std::sqrt(6.0 / static_cast<double>(in));
      for (double& v : w.data()) v = rng.uniform(-bound, bound);
    }
    p.weights.push_back(std::move(w));
    p.biases.push_back(Tensor(Shape{out}));
  }
  if (arch.skip) {
    p.weights.push_back(Tensor(Shape{arch.time_embed_dim}));
    p.biases.push_back(Tensor(Shape{1}));
  }
  return p;
}

std::vector<Var> ParamVars::all() const {
  std::vector<Var> out;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.push_back(weights[l]);
    out.push_back(biases[l]);
  }
  return out;
}

ParamVars bind_params(Tape& tape, const DenoiserParams& p, bool trainable) {
  ParamVars v;
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    v.weights.push_back(trainable ? tape.leaf(p.weights[l]) : tape.constant(p.weights[l]));
    v.biases.push_back(trainable ? tape.leaf(p.biases[l]) : tape.constant(p.biases[l]));
  }
  return v;
}

Var denoiser_forward(const DenoiserParams& p, const ParamVars& vars, Var x, std::span<const int> t) {
  const Tensor& xv = x.value();
  const auto& arch = p.arch;
  if (xv.rank() != 2 || xv.cols() != arch.data_dim) {
    throw ShapeError("denoiser input must be (batch x " + std::to_string(arch.data_dim) + "), got " +
                     shape_str(xv.shape()));
  }
  const std::size_t batch = xv.rows();
  if (t.size() != 1 && t.size() != batch) {
    throw ShapeError("denoiser got " + std::to_string(t.size()) + " timesteps for a batch of " + std::to_string(batch));
  }
  Tape& tape = *x.tape();
  const std::size_t E = arch.time_embed_dim;
  Tensor emb(Shape{batch, E});
  if (t.size() == 1) {
    const auto e = time_embed(t[0], arch.T, E);
    for (std::size_t i = 0; i < batch; ++i) std::copy(e.begin(), e.end(), emb.row(i).begin());
  } else {
    for (std::size_t i = 0; i < batch; ++i) {
      const auto e = time_embed(t[i], arch.T, E);
      std::copy(e.begin(), e.end(), emb.row(i).begin());
    }
  }
  const Var e = tape.constant(std::move(emb));
  Var h = concat_cols(x, e);
  const std::size_t L = vars.weights.size() - (arch.skip ? 1 : 0);
  for (std::size_t l = 0; l < L; ++l) {
    h = add(matmul(h, vars.weights[l]), broadcast_rows(vars.biases[l], batch));
    if (l + 1 < L) h = arch.activation == Activation::kSilu ? silu(h) : relu(h);
  }
  if (arch.skip) {
    const Var gain = add(matmul(e, vars.weights[L]), matmul(tape.constant(Tensor::full(Shape{batch, 1}, 1.0)), vars.biases[L]));
    h = add(h, mul(broadcast_cols(gain, arch.data_dim), x));
  }
  return h;
}

Tensor denoiser_predict(const DenoiserParams& p, const Tensor& x, int t) {
  Tape tape;
  const ParamVars vars = bind_params(tape, p, false);
  const int ts[1] = {t};
  Tensor out = denoiser_forward(p, vars, tape.constant(x), ts).value();
  out.check_finite("denoiser forward at t=" + std::to_string(t));
  return out;
}

Tensor EpsModel::predict(const Tensor& x, int t) const {
  Tape tape;
  Tensor out = trace(tape, tape.constant(x), t).value();
  out.check_finite("eps model at t=" + std::to_string(t));
  return out;
}

Var DenoiserModel::trace(Tape& tape, Var x, int t) const {
  const ParamVars vars = bind_params(tape, params_, false);
  const int ts[1] = {t};
  return denoiser_forward(params_, vars, x, ts);
}

void save_checkpoint(const std::filesystem::path& dir, const DenoiserParams& p) {
  using nlohmann::json;
  std::filesystem::create_directories(dir);
  const std::vector<double> flat = p.flatten();
  write_tensor_bin(dir / "params.bin", Tensor(Shape{flat.size()}, flat));

  json layers = json::array();
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    layers.push_back({{"weight", p.weights[l].shape()}, {"bias", p.biases[l].shape()}});
  }
  json m;
  m["format"] = "advdiff-checkpoint-v1";
  m["architecture"] = {{"data_dim", p.arch.data_dim},
                       {"hidden", p.arch.hidden},
                       {"time_embed_dim", p.arch.time_embed_dim},
                       {"activation", to_string(p.arch.activation)},
                       {"T", p.arch.T},
                       {"skip", p.arch.skip}};
  m["layers"] = layers;
  m["param_count"] = flat.size();
  m["blob"] = "params.bin";
  m["blob_hash"] = io::hash_file(dir / "params.bin");
  m["step"] = p.step;
  m["schedule_hash"] = p.schedule_hash;
  m["train_config_hash"] = p.train_config_hash;
  json shift = json::array();
  for (double v : p.normalizer.shift) shift.push_back(io::format_double(v));
  m["normalizer"] = {{"shift", shift}, {"scale", io::format_double(p.normalizer.scale)}};
  io::write_file_atomic(dir / "checkpoint.json", m.dump(2) + "\n");
}

DenoiserParams load_checkpoint(const std::filesystem::path& dir) {
  using nlohmann::json;
  DenoiserParams p;
  try {
    const json m = json::parse(io::read_file(dir / "checkpoint.json"));
    if (m.value("format", "") != "advdiff-checkpoint-v1") {
      throw IoError("unrecognised checkpoint format in " + dir.string());
    }
    Architecture arch;
    const auto& a = m.at("architecture");
    arch.data_dim = a.at("data_dim").get<std::size_t>();
    arch.hidden = a.at("hidden").get<std::vector<std::size_t>>();
    arch.time_embed_dim = a.at("time_embed_dim").get<std::size_t>();
    arch.activation = activation_from_string(a.at("activation").get<std::string>());
    arch.T = a.at("T").get<int>();
    arch.skip = a.value("skip", false);
    p = init_denoiser(arch, 0);
    const Tensor blob = read_tensor_bin(dir / m.value("blob", std::string("params.bin")));
    if (blob.numel() != p.num_parameters()) {
      throw IoError((dir / "params.bin").string() + " holds " + std::to_string(blob.numel()) +
                    " values, architecture needs " + std::to_string(p.num_parameters()));
    }
    p.unflatten(blob.data());
    p.step = m.value("step", std::uint64_t{0});
    p.schedule_hash = m.value("schedule_hash", std::string());
    p.train_config_hash = m.value("train_config_hash", std::string());
    const auto& nz = m.at("normalizer");
    p.normalizer.shift.clear();
    for (const auto& v : nz.at("shift")) p.normalizer.shift.push_back(io::parse_double(v.get<std::string>()));
    p.normalizer.scale = io::parse_double(nz.at("scale").get<std::string>());
  } catch (const json::exception& e) {
    throw IoError((dir / "checkpoint.json").string() + ": " + e.what());
  }
  if (!p.all_finite()) throw NumericError("checkpoint " + dir.string() + " contains non-finite parameters");
  return p;
}

}  // namespace advdiff
