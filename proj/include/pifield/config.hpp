#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pifield/data.hpp"
#include "pifield/tools.hpp"
#include "pifield/training.hpp"

namespace pifield {

struct MeshConfig {
  double iso = 10;
  std::size_t res = 64;
  double bound = 0;  // half-width of the sampled cube; 0: 1.2x the scene extent
  double depth_jump = 0.05;
  double min_acc = 0.5;

  void validate() const {
    if (!std::isfinite(iso)) throw std::invalid_argument("mesh: iso must be finite");
    if (res < 2) throw std::invalid_argument("mesh: res must be >= 2");
    if (bound < 0 || !(depth_jump > 0)) throw std::invalid_argument("mesh: bound must be >= 0 and depth_jump > 0");
  }
};

struct EvalConfig {
  std::size_t latents = 16;     // latents for the reprojection check
  double yaw_offset = 0.3;      // radians between the two views of a pair
  std::size_t stat_samples = 256;
  std::size_t stat_res = 8;     // images are area-downsampled to this before fitting pixel statistics
  std::uint64_t seed = 1;
  double min_acc = 0.1;
  double depth_tol = 0.05;  // reprojected points farther than this behind the surface count as occluded

  void validate() const {
    if (!(depth_tol > 0)) throw std::invalid_argument("eval: depth_tol must be > 0");
    if (latents < 1 || stat_samples < 2 || stat_res < 1)
      throw std::invalid_argument("eval: latents >= 1, stat_samples >= 2 and stat_res >= 1 required");
    if (!(min_acc >= 0 && min_acc <= 1)) throw std::invalid_argument("eval: min_acc must lie in [0, 1]");
  }
};

struct Config {
  TrainConfig train;
  std::string precision = "float";  // float | double
  std::string data_dir = "data";
  DatasetSpec data;
  MeshConfig mesh;
  InversionConfig invert;
  EvalConfig eval;

  void validate() const {
    train.validate();
    if (precision != "float" && precision != "double")
      throw std::invalid_argument("train.precision must be float or double, got " + precision);
    data.validate();
    mesh.validate();
    invert.validate();
    eval.validate();
  }
};

class ConfigError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  if (!s.empty() && s.back() == ',') out.push_back("");
  return out;
}

inline std::string fmt(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}
inline std::string fmt(std::uint64_t v) { return std::to_string(v); }
inline std::string fmt(bool v) { return v ? "true" : "false"; }
inline std::string fmt(const std::string& v) { return v; }
inline std::string fmt(ops::Activation a) { return a == ops::Activation::sine ? "sine" : "relu"; }
inline std::string fmt(Conditioning c) { return c == Conditioning::film ? "film" : "concat"; }
inline std::string fmt(PoseKind k) {
  return k == PoseKind::gaussian ? "gaussian" : k == PoseKind::uniform ? "uniform" : "hemisphere";
}
template <class V>
std::string fmt(const std::vector<V>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + fmt(v[i]);
  return s;
}
inline std::string fmt(const std::array<double, 3>& v) { return fmt(std::vector<double>(v.begin(), v.end())); }

[[noreturn]] inline void bad_value(const std::string& key, const std::string& s, const std::string& want) {
  throw ConfigError(key + ": cannot parse '" + s + "' as " + want);
}

inline void parse(const std::string& key, const std::string& s, double& out) {
  double v = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size() || !std::isfinite(v)) bad_value(key, s, "a number");
  out = v;
}
inline void parse(const std::string& key, const std::string& s, std::uint64_t& out) {
  std::uint64_t v = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size()) bad_value(key, s, "a non-negative integer");
  out = v;
}
inline void parse(const std::string& key, const std::string& s, bool& out) {
  if (s == "true") out = true;
  else if (s == "false") out = false;
  else bad_value(key, s, "true or false");
}
inline void parse(const std::string&, const std::string& s, std::string& out) { out = s; }
inline void parse(const std::string& key, const std::string& s, ops::Activation& out) {
  if (s == "sine") out = ops::Activation::sine;
  else if (s == "relu") out = ops::Activation::relu;
  else bad_value(key, s, "sine or relu");
}
inline void parse(const std::string& key, const std::string& s, Conditioning& out) {
  if (s == "film") out = Conditioning::film;
  else if (s == "concat") out = Conditioning::concat;
  else bad_value(key, s, "film or concat");
}
inline void parse(const std::string& key, const std::string& s, PoseKind& out) {
  if (s == "gaussian") out = PoseKind::gaussian;
  else if (s == "uniform") out = PoseKind::uniform;
  else if (s == "hemisphere") out = PoseKind::hemisphere;
  else bad_value(key, s, "gaussian, uniform or hemisphere");
}
template <class V>
void parse(const std::string& key, const std::string& s, std::vector<V>& out) {
  std::vector<V> v;
  for (const auto& item : split_list(s)) parse(key, item, v.emplace_back());
  if (v.empty()) bad_value(key, s, "a non-empty comma-separated list");
  out = std::move(v);
}
inline void parse(const std::string& key, const std::string& s, std::array<double, 3>& out) {
  std::vector<double> v;
  parse(key, s, v);
  if (v.size() != 3) bad_value(key, s, "three comma-separated numbers");
  std::copy(v.begin(), v.end(), out.begin());
}

}  // namespace detail

struct ConfigKey {
  std::string name, doc;
  std::function<std::string(const Config&)> get;
  std::function<void(Config&, const std::string&)> set;
};

namespace detail {

template <class F>
ConfigKey key(std::string name, std::string doc, F ref) {
  ConfigKey k;
  k.name = name;
  k.doc = std::move(doc);
  k.get = [ref](const Config& c) { return fmt(ref(const_cast<Config&>(c))); };
  k.set = [ref, name](Config& c, const std::string& s) { parse(name, s, ref(c)); };
  return k;
}

inline std::vector<ConfigKey> make_keys() {
  std::vector<ConfigKey> k;
  auto add = [&](ConfigKey x) { k.push_back(std::move(x)); };
  // generator
  add(key("gen.depth", "FiLM-SIREN hidden layers", [](Config& c) -> auto& { return c.train.gen.depth; }));
  add(key("gen.width", "hidden width", [](Config& c) -> auto& { return c.train.gen.width; }));
  add(key("gen.map_depth", "mapping network hidden layers", [](Config& c) -> auto& { return c.train.gen.map_depth; }));
  add(key("gen.map_width", "mapping network width", [](Config& c) -> auto& { return c.train.gen.map_width; }));
  add(key("gen.z_dim", "latent size", [](Config& c) -> auto& { return c.train.gen.z_dim; }));
  add(key("gen.freq_scale", "gamma = freq_scale * raw + freq_offset", [](Config& c) -> auto& { return c.train.gen.freq_scale; }));
  add(key("gen.freq_offset", "see gen.freq_scale", [](Config& c) -> auto& { return c.train.gen.freq_offset; }));
  add(key("gen.activation", "sine | relu (relu uses positional encoding)", [](Config& c) -> auto& { return c.train.gen.activation; }));
  add(key("gen.conditioning", "film | concat", [](Config& c) -> auto& { return c.train.gen.conditioning; }));
  add(key("gen.pe_octaves", "positional-encoding octaves for the relu backbone", [](Config& c) -> auto& { return c.train.gen.pe_octaves; }));
  add(key("gen.input_scale", "coordinates are multiplied by this on input", [](Config& c) -> auto& { return c.train.gen.input_scale; }));
  add(key("gen.density_nl", "softplus | relu", [](Config& c) -> auto& { return c.train.gen.density_nl; }));
  add(key("gen.color_nl", "sigmoid", [](Config& c) -> auto& { return c.train.gen.color_nl; }));
  // renderer
  add(key("render.samples", "coarse samples per ray", [](Config& c) -> auto& { return c.train.render.samples; }));
  add(key("render.hierarchical", "second, importance-sampled pass", [](Config& c) -> auto& { return c.train.render.hierarchical; }));
  add(key("render.fine_samples", "fine samples per ray; 0 means render.samples", [](Config& c) -> auto& { return c.train.render.fine_samples; }));
  add(key("render.depth_extent", "near/far = radius -+ extent", [](Config& c) -> auto& { return c.train.render.depth_extent; }));
  add(key("render.background", "RGB behind the volume", [](Config& c) -> auto& { return c.train.render.background; }));
  add(key("render.jitter", "stratified jitter of coarse depths", [](Config& c) -> auto& { return c.train.render.jitter; }));
  add(key("render.chunk_rays", "rays per evaluation chunk", [](Config& c) -> auto& { return c.train.render.chunk_rays; }));
  // pose prior
  add(key("pose.preset", "celeba-like | cats-like | carla-like | custom; applied before other pose keys",
          [](Config& c) -> auto& { return c.train.pose_preset_name; }));
  add(key("pose.kind", "gaussian | uniform | hemisphere", [](Config& c) -> auto& { return c.train.pose.kind; }));
  add(key("pose.pitch_mean", "gaussian mean pitch (rad)", [](Config& c) -> auto& { return c.train.pose.pitch_mean; }));
  add(key("pose.yaw_mean", "gaussian mean yaw (rad)", [](Config& c) -> auto& { return c.train.pose.yaw_mean; }));
  add(key("pose.pitch_std", "gaussian pitch std (rad)", [](Config& c) -> auto& { return c.train.pose.pitch_std; }));
  add(key("pose.yaw_std", "gaussian yaw std (rad)", [](Config& c) -> auto& { return c.train.pose.yaw_std; }));
  add(key("pose.pitch_min", "uniform pitch range (rad)", [](Config& c) -> auto& { return c.train.pose.pitch_min; }));
  add(key("pose.pitch_max", "uniform pitch range (rad)", [](Config& c) -> auto& { return c.train.pose.pitch_max; }));
  add(key("pose.yaw_min", "uniform yaw range (rad)", [](Config& c) -> auto& { return c.train.pose.yaw_min; }));
  add(key("pose.yaw_max", "uniform yaw range (rad)", [](Config& c) -> auto& { return c.train.pose.yaw_max; }));
  add(key("pose.radius", "camera distance from the origin", [](Config& c) -> auto& { return c.train.pose.radius; }));
  add(key("pose.fov", "vertical field of view (degrees)", [](Config& c) -> auto& { return c.train.pose.fov_deg; }));
  // discriminator
  add(key("disc.resolutions", "stage resolutions, doubling", [](Config& c) -> auto& { return c.train.disc.resolutions; }));
  add(key("disc.width_mult", "block widths relative to 400/256/128", [](Config& c) -> auto& { return c.train.disc.width_mult; }));
  add(key("disc.slope", "leaky-ReLU slope", [](Config& c) -> auto& { return c.train.disc.slope; }));
  add(key("disc.fade_iters", "fade-in length after each grow", [](Config& c) -> auto& { return c.train.disc.fade_iters; }));
  // training
  add(key("train.lr_g", "generator lr at the start", [](Config& c) -> auto& { return c.train.lr_g; }));
  add(key("train.lr_g_final", "generator lr at the end (linear decay)", [](Config& c) -> auto& { return c.train.lr_g_final; }));
  add(key("train.lr_d", "discriminator lr at the start", [](Config& c) -> auto& { return c.train.lr_d; }));
  add(key("train.lr_d_final", "discriminator lr at the end", [](Config& c) -> auto& { return c.train.lr_d_final; }));
  add(key("train.mapping_lr_mult", "mapping network lr relative to the generator", [](Config& c) -> auto& { return c.train.mapping_lr_mult; }));
  add(key("train.adam_beta1", "Adam beta1", [](Config& c) -> auto& { return c.train.adam_beta1; }));
  add(key("train.adam_beta2", "Adam beta2", [](Config& c) -> auto& { return c.train.adam_beta2; }));
  add(key("train.r1_lambda", "R1 penalty weight", [](Config& c) -> auto& { return c.train.r1_lambda; }));
  add(key("train.ema_decay", "decay of the evaluation weights", [](Config& c) -> auto& { return c.train.ema_decay; }));
  add(key("train.iterations", "total iterations", [](Config& c) -> auto& { return c.train.iterations; }));
  add(key("train.stage_fractions", "share of iterations per stage", [](Config& c) -> auto& { return c.train.stage_fractions; }));
  add(key("train.batch_initial", "batch at the first stage", [](Config& c) -> auto& { return c.train.batch_initial; }));
  add(key("train.batch_divisor", "batch divisor per upsample", [](Config& c) -> auto& { return c.train.batch_divisor; }));
  add(key("train.min_effective_batch", "accumulate sub-batches up to this", [](Config& c) -> auto& { return c.train.min_effective_batch; }));
  add(key("train.seed", "initialization and sampling seed", [](Config& c) -> auto& { return c.train.seed; }));
  add(key("train.checkpoint_every", "extra checkpoint cadence; 0: stage boundaries and end only",
          [](Config& c) -> auto& { return c.train.checkpoint_every; }));
  add(key("train.precision", "float | double", [](Config& c) -> auto& { return c.precision; }));
  // data
  add(key("data.dir", "dataset directory", [](Config& c) -> auto& { return c.data_dir; }));
  add(key("data.preset", "pose preset of generated datasets", [](Config& c) -> auto& { return c.data.preset; }));
  add(key("data.res", "image resolution", [](Config& c) -> auto& { return c.data.resolution; }));
  add(key("data.count", "number of images", [](Config& c) -> auto& { return c.data.count; }));
  add(key("data.scenes", "distinct scenes; 0 means count / 10", [](Config& c) -> auto& { return c.data.scenes; }));
  add(key("data.seed", "dataset seed", [](Config& c) -> auto& { return c.data.seed; }));
  add(key("data.depth_extent", "near/far margin for ground-truth renders; 0 fits the scene", [](Config& c) -> auto& { return c.data.depth_extent; }));
  add(key("data.background", "RGB behind the scenes", [](Config& c) -> auto& { return c.data.background; }));
  // mesh
  add(key("mesh.iso", "density iso-level for marching cubes", [](Config& c) -> auto& { return c.mesh.iso; }));
  add(key("mesh.res", "lattice points per axis", [](Config& c) -> auto& { return c.mesh.res; }));
  add(key("mesh.bound", "half-width of the sampled cube; 0 uses 1.2x the scene extent of the pose prior", [](Config& c) -> auto& { return c.mesh.bound; }));
  add(key("mesh.depth_jump", "largest depth step a depth-map triangle may bridge", [](Config& c) -> auto& { return c.mesh.depth_jump; }));
  add(key("mesh.min_acc", "opacity below which depth-map pixels are holes", [](Config& c) -> auto& { return c.mesh.min_acc; }));
  // inversion
  add(key("invert.iterations", "Adam iterations", [](Config& c) -> auto& { return c.invert.iterations; }));
  add(key("invert.lr", "initial lr", [](Config& c) -> auto& { return c.invert.lr; }));
  add(key("invert.lr_decay", "lr factor per decay event", [](Config& c) -> auto& { return c.invert.lr_decay; }));
  add(key("invert.decay_every", "iterations between decay events", [](Config& c) -> auto& { return c.invert.decay_every; }));
  add(key("invert.penalty", "weight of the pull toward the average conditioning", [](Config& c) -> auto& { return c.invert.penalty; }));
  add(key("invert.average_count", "latents averaged for the starting point", [](Config& c) -> auto& { return c.invert.average_count; }));
  add(key("invert.beta1", "Adam beta1", [](Config& c) -> auto& { return c.invert.beta1; }));
  add(key("invert.beta2", "Adam beta2", [](Config& c) -> auto& { return c.invert.beta2; }));
  // evaluation
  add(key("eval.latents", "latents in the reprojection check", [](Config& c) -> auto& { return c.eval.latents; }));
  add(key("eval.yaw_offset", "yaw between the two views of a pair (rad)", [](Config& c) -> auto& { return c.eval.yaw_offset; }));
  add(key("eval.stat_samples", "images per set in the pixel-statistics distance", [](Config& c) -> auto& { return c.eval.stat_samples; }));
  add(key("eval.stat_res", "resolution images are reduced to for pixel statistics", [](Config& c) -> auto& { return c.eval.stat_res; }));
  add(key("eval.seed", "seed for evaluation latents and poses", [](Config& c) -> auto& { return c.eval.seed; }));
  add(key("eval.depth_tol", "occlusion tolerance of the reprojection check", [](Config& c) -> auto& { return c.eval.depth_tol; }));
  add(key("eval.min_acc", "opacity below which pixels are excluded from reprojection", [](Config& c) -> auto& { return c.eval.min_acc; }));
  std::sort(k.begin(), k.end(), [](const ConfigKey& a, const ConfigKey& b) { return a.name < b.name; });
  return k;
}

}  // namespace detail

/// Every configuration key, sorted by name.
inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = detail::make_keys();
  return keys;
}

inline const ConfigKey& config_key(const std::string& name) {
  for (const auto& k : config_keys())
    if (k.name == name) return k;
  throw ConfigError("unknown config key '" + name + "'");
}

/// Sets one key. A preset rewrites the whole pose prior.
inline void set_config_value(Config& c, const std::string& name, const std::string& value) {
  config_key(name).set(c, value);
  if (name == "pose.preset" && value != "custom") c.train.pose = pose_preset(value);
}

/// `key = value` lines; `#` starts a comment. Keys are applied on top of `base`.
inline Config parse_config(const std::string& text, Config base = {}) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(n) + ": expected 'key = value'");
    auto k = detail::trim(line.substr(0, eq));
    auto v = detail::trim(line.substr(eq + 1));
    config_key(k);
    if (!seen.insert(k).second) throw ConfigError("line " + std::to_string(n) + ": duplicate key '" + k + "'");
    entries.emplace_back(std::move(k), std::move(v));
  }
  std::stable_partition(entries.begin(), entries.end(), [](const auto& e) { return e.first == "pose.preset"; });
  for (const auto& [k, v] : entries) {
    try {
      set_config_value(base, k, v);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(k + ": " + e.what());
    }
  }
  return base;
}

inline Config load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

/// Sorted `key = value` lines; with `docs`, each key is preceded by its description.
inline std::string serialize_config(const Config& c, bool docs = false) {
  std::string out;
  for (const auto& k : config_keys()) {
    if (docs) out += "# " + k.doc + "\n";
    out += k.name + " = " + k.get(c) + "\n";
  }
  return out;
}

}  // namespace pifield
