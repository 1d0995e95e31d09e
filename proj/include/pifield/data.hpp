#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pifield/core/log.hpp"
#include "pifield/io/image_io.hpp"
#include "pifield/renderer.hpp"

namespace pifield {

enum class PrimitiveKind { sphere, box };

struct Primitive {
  PrimitiveKind kind = PrimitiveKind::sphere;
  Vec3 center;
  Vec3 half;  // box half extents; sphere radius in half.x
  double sigma = 10;
  std::array<double, 3> color{0.5, 0.5, 0.5};

  double bounding_radius() const { return kind == PrimitiveKind::sphere ? half.x : norm(half); }

  bool contains(const Vec3& p) const {
    const Vec3 q = p - center;
    if (kind == PrimitiveKind::sphere) return dot(q, q) < half.x * half.x;
    return std::abs(q.x) < half.x && std::abs(q.y) < half.y && std::abs(q.z) < half.z;
  }

  /// Parametric entry/exit of the ray's line; false when it misses.
  bool intersect(const Ray& r, double& t0, double& t1) const {
    const Vec3 oc = r.o - center;
    if (kind == PrimitiveKind::sphere) {
      const double b = dot(oc, r.d), c = dot(oc, oc) - half.x * half.x;
      const double disc = b * b - c;
      if (disc <= 0) return false;
      const double s = std::sqrt(disc);
      t0 = -b - s;
      t1 = -b + s;
      return true;
    }
    t0 = -std::numeric_limits<double>::infinity();
    t1 = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
      const double o = oc[a], d = r.d[a], h = half[a];
      if (std::abs(d) < 1e-300) {
        if (std::abs(o) >= h) return false;
        continue;
      }
      double lo = (-h - o) / d, hi = (h - o) / d;
      if (lo > hi) std::swap(lo, hi);
      t0 = std::max(t0, lo);
      t1 = std::min(t1, hi);
    }
    return t0 < t1;
  }
};

/// Piecewise-constant density scene; primitives have disjoint bounding spheres.
struct AnalyticScene {
  std::vector<Primitive> primitives;

  /// sigma and color at a point (zero density and black outside every primitive).
  std::pair<double, std::array<double, 3>> at(const Vec3& p) const {
    for (const auto& pr : primitives)
      if (pr.contains(p)) return {pr.sigma, pr.color};
    return {0.0, {0, 0, 0}};
  }

  template <class T>
  FieldFn<T> field() const {
    return [scene = *this](const Tensor<T>& x, const Tensor<T>& /*d*/) {
      const std::size_t n = x.dim(0);
      Tensor<T> sigma(Shape{n, 1}), rgb(Shape{n, 3});
      for (std::size_t i = 0; i < n; ++i) {
        const auto [s, c] = scene.at(Vec3{double(x.at(i, 0)), double(x.at(i, 1)), double(x.at(i, 2))});
        sigma[i] = T(s);
        for (int ch = 0; ch < 3; ++ch) rgb.at(i, ch) = T(c[ch]);
      }
      return std::pair{sigma, rgb};
    };
  }

  void validate() const {
    for (std::size_t i = 0; i < primitives.size(); ++i) {
      if (!(primitives[i].sigma > 0)) throw std::invalid_argument("scene: primitive density must be > 0");
      if (norm(primitives[i].center) + primitives[i].bounding_radius() > 1.0)
        throw std::invalid_argument("scene: primitive leaves the unit sphere");
      for (std::size_t j = 0; j < i; ++j)
        if (norm(primitives[i].center - primitives[j].center) <
            primitives[i].bounding_radius() + primitives[j].bounding_radius())
          throw std::invalid_argument("scene: primitives " + std::to_string(j) + " and " + std::to_string(i) +
                                      " overlap");
    }
  }
};

struct RayIntegral {
  std::array<double, 3> rgb;
  double depth = 0, acc = 0;
};

/// Exact volume-rendering integral along one ray through constant-density segments.
inline RayIntegral integrate_ray(const AnalyticScene& scene, const Ray& ray, const std::array<double, 3>& bg,
                                 double eps = 1e-8) {
  struct Seg {
    double a, b, sigma;
    std::array<double, 3> c;
  };
  std::vector<Seg> segs;
  for (const auto& p : scene.primitives) {
    double t0, t1;
    if (!p.intersect(ray, t0, t1)) continue;
    t0 = std::max(t0, ray.tn);
    t1 = std::min(t1, ray.tf);
    if (t1 > t0) segs.push_back({t0, t1, p.sigma, p.color});
  }
  std::sort(segs.begin(), segs.end(), [](const Seg& x, const Seg& y) { return x.a < y.a; });
  for (std::size_t i = 1; i < segs.size(); ++i)
    if (segs[i].a < segs[i - 1].b) throw std::invalid_argument("integrate_ray: overlapping primitives along a ray");
  RayIntegral out{{0, 0, 0}, 0, 0};
  double trans = 1, dnum = 0;
  for (const auto& s : segs) {
    const double len = s.b - s.a, att = std::exp(-s.sigma * len);
    const double w = trans * (1 - att);
    for (int c = 0; c < 3; ++c) out.rgb[c] += w * s.c[c];
    dnum += trans * ((s.a + 1 / s.sigma) - (s.b + 1 / s.sigma) * att);
    out.acc += w;
    trans *= att;
  }
  for (int c = 0; c < 3; ++c) out.rgb[c] += (1 - out.acc) * bg[c];
  out.depth = dnum / std::max(out.acc, eps);
  return out;
}

template <class T>
RenderResult<T> analytic_render(const AnalyticScene& scene, const CameraFrame& frame, double tn, double tf,
                                const RenderConfig& cfg) {
  cfg.validate();
  const auto rays = generate_rays(frame, cfg.width, cfg.height, tn, tf);
  RenderResult<T> out{Tensor<T>(Shape{cfg.height, cfg.width, 3}), Tensor<T>(Shape{cfg.height, cfg.width}),
                      Tensor<T>(Shape{cfg.height, cfg.width})};
  for (std::size_t i = 0; i < rays.size(); ++i) {
    const auto r = integrate_ray(scene, rays[i], cfg.background);
    for (int c = 0; c < 3; ++c) out.image[3 * i + c] = T(r.rgb[c]);
    out.depth[i] = T(r.depth);
    out.acc[i] = T(r.acc);
  }
  return out;
}

template <class T>
RenderResult<T> analytic_render(const AnalyticScene& scene, const CameraPose& pose, const RenderConfig& cfg) {
  const auto [tn, tf] = near_far(pose, cfg.depth_extent);
  return analytic_render<T>(scene, CameraFrame::from_pose(pose), tn, tf, cfg);
}

// ---------------------------------------------------------------------------
// Presets and procedural datasets

inline PoseDistribution pose_preset(const std::string& name) {
  PoseDistribution d;
  if (name == "celeba-like") {
    d.kind = PoseKind::gaussian;
    d.pitch_std = 0.15;
    d.yaw_std = 0.3;
    d.fov_deg = 12;
  } else if (name == "cats-like") {
    d.kind = PoseKind::uniform;
    d.yaw_min = -0.75;
    d.yaw_max = 0.75;
    d.pitch_min = -0.4;
    d.pitch_max = 0.4;
    d.fov_deg = 12;
  } else if (name == "carla-like") {
    d.kind = PoseKind::hemisphere;
    d.fov_deg = 30;
  } else {
    throw std::invalid_argument("unknown pose preset '" + name + "' (celeba-like, cats-like, carla-like)");
  }
  return d;
}

/// Radius of the ball around the target that every camera of the
/// distribution sees entirely.
inline double scene_extent(const PoseDistribution& d) {
  return 0.9 * d.radius * std::sin(d.fov_deg * std::numbers::pi / 360.0);
}

inline AnalyticScene make_scene(std::uint64_t seed, std::uint64_t id, double extent) {
  Rng rng(seed, Stream::scene, id);
  AnalyticScene s;
  const int count = 1 + int(rng.below(3));
  for (int k = 0; k < count; ++k) {
    for (int attempt = 0; attempt < 100; ++attempt) {
      Primitive p;
      p.kind = rng.uniform() < 0.5 ? PrimitiveKind::sphere : PrimitiveKind::box;
      if (p.kind == PrimitiveKind::sphere) {
        const double r = rng.uniform(0.25, 0.5) * extent;
        p.half = {r, r, r};
      } else {
        p.half = {rng.uniform(0.15, 0.35) * extent, rng.uniform(0.15, 0.35) * extent, rng.uniform(0.15, 0.35) * extent};
      }
      // uniform in the ball that keeps the primitive inside `extent`
      const double room = extent - p.bounding_radius();
      Vec3 c;
      do {
        c = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
      } while (dot(c, c) > 1);
      p.center = c * room;
      p.sigma = rng.uniform(5, 50);
      p.color = {rng.uniform(0.05, 0.85), rng.uniform(0.05, 0.85), rng.uniform(0.05, 0.85)};
      bool clear = true;
      for (const auto& q : s.primitives)
        clear = clear && norm(q.center - p.center) >= q.bounding_radius() + p.bounding_radius();
      if (clear) {
        s.primitives.push_back(p);
        break;
      }
    }
  }
  return s;
}

struct DatasetSpec {
  std::string preset = "celeba-like";
  std::size_t resolution = 32;
  std::size_t count = 1000;
  std::size_t scenes = 0;  // distinct scenes; 0 means count / 10
  std::uint64_t seed = 0;
  double depth_extent = 0;  // 0: fit to the scene extent
  std::array<double, 3> background{1, 1, 1};

  std::size_t scene_count() const { return scenes ? scenes : std::max<std::size_t>(1, count / 10); }

  void validate() const {
    if (count < 1) throw std::invalid_argument("dataset: count must be >= 1");
    if (resolution < 1) throw std::invalid_argument("dataset: resolution must be >= 1");
    pose_preset(preset);
  }
};

struct Dataset {
  std::size_t resolution = 0;
  std::vector<Tensor<float>> images;  // [R x R x 3]
  std::vector<CameraPose> poses;      // ground truth, evaluation only
  std::vector<std::size_t> scene_ids;
  std::vector<AnalyticScene> scenes;
  std::string preset;

  std::size_t size() const { return images.size(); }
};

inline RenderConfig dataset_render_config(const DatasetSpec& spec) {
  RenderConfig rc;
  rc.width = rc.height = spec.resolution;
  rc.background = spec.background;
  const auto dist = pose_preset(spec.preset);
  rc.depth_extent = spec.depth_extent > 0 ? spec.depth_extent : scene_extent(dist) / 0.9;
  return rc;
}

inline Dataset make_procedural_dataset(const DatasetSpec& spec) {
  spec.validate();
  const auto dist = pose_preset(spec.preset);
  const double extent = scene_extent(dist);
  const RenderConfig rc = dataset_render_config(spec);
  Dataset ds;
  ds.resolution = spec.resolution;
  ds.preset = spec.preset;
  for (std::size_t s = 0; s < spec.scene_count(); ++s) ds.scenes.push_back(make_scene(spec.seed, s, extent));
  ds.images.resize(spec.count);
  ds.poses.resize(spec.count);
  ds.scene_ids.resize(spec.count);
  for (std::size_t i = 0; i < spec.count; ++i) {
    Rng rng(spec.seed, Stream::pose, i);
    ds.scene_ids[i] = std::size_t(rng.below(spec.scene_count()));
    ds.poses[i] = sample_pose(dist, rng);
  }
  parallel_for(spec.count, [&](std::size_t i) {
    ds.images[i] = analytic_render<float>(ds.scenes[ds.scene_ids[i]], ds.poses[i], rc).image;
  });
  return ds;
}

// ---------------------------------------------------------------------------
// Persistence

inline nlohmann::json scene_to_json(const AnalyticScene& s) {
  nlohmann::json prims = nlohmann::json::array();
  for (const auto& p : s.primitives)
    prims.push_back({{"kind", p.kind == PrimitiveKind::sphere ? "sphere" : "box"},
                     {"center", {p.center.x, p.center.y, p.center.z}},
                     {"half_extent", {p.half.x, p.half.y, p.half.z}},
                     {"sigma", p.sigma},
                     {"color", {p.color[0], p.color[1], p.color[2]}}});
  return prims;
}

inline AnalyticScene scene_from_json(const nlohmann::json& j) {
  AnalyticScene s;
  for (const auto& p : j) {
    Primitive q;
    q.kind = p.at("kind") == "sphere" ? PrimitiveKind::sphere : PrimitiveKind::box;
    q.center = {p["center"][0], p["center"][1], p["center"][2]};
    q.half = {p["half_extent"][0], p["half_extent"][1], p["half_extent"][2]};
    q.sigma = p["sigma"];
    q.color = {p["color"][0], p["color"][1], p["color"][2]};
    s.primitives.push_back(q);
  }
  return s;
}

inline std::string image_name(std::size_t i) {
  std::ostringstream os;
  os << std::setw(5) << std::setfill('0') << i << ".png";
  return os.str();
}

/// Directory layout: images/NNNNN.png, poses.csv (id,pitch,yaw,radius,fov), scenes.json.
inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  for (std::size_t i = 0; i < ds.size(); ++i) io::write_png((dir / "images" / image_name(i)).string(), ds.images[i]);
  std::ofstream csv(dir / "poses.csv");
  csv << "id,pitch,yaw,radius,fov\n" << std::setprecision(17);
  for (std::size_t i = 0; i < ds.poses.size(); ++i)
    csv << i << ',' << ds.poses[i].pitch << ',' << ds.poses[i].yaw << ',' << ds.poses[i].radius << ','
        << ds.poses[i].fov_deg << '\n';
  nlohmann::json j;
  j["preset"] = ds.preset;
  j["resolution"] = ds.resolution;
  j["scene_ids"] = ds.scene_ids;
  j["scenes"] = nlohmann::json::array();
  for (const auto& s : ds.scenes) j["scenes"].push_back(scene_to_json(s));
  std::ofstream(dir / "scenes.json") << j.dump(1) << '\n';
}

/// Center crop to a square, then area-average to `res` x `res`.
inline Tensor<float> center_crop_resize(const Tensor<float>& img, std::size_t res) {
  const std::size_t h = img.dim(0), w = img.dim(1), side = std::min(h, w);
  const std::size_t y0 = (h - side) / 2, x0 = (w - side) / 2;
  // separable box filter with fractional pixel coverage
  auto weights = [&](std::size_t out) {
    std::vector<std::vector<std::pair<std::size_t, double>>> taps(out);
    const double scale = double(side) / double(out);
    for (std::size_t o = 0; o < out; ++o) {
      const double lo = double(o) * scale, hi = double(o + 1) * scale;
      for (std::size_t k = std::size_t(lo); k < side && double(k) < hi; ++k) {
        const double cover = std::min(hi, double(k + 1)) - std::max(lo, double(k));
        if (cover > 0) taps[o].push_back({k, cover / scale});
      }
    }
    return taps;
  };
  const auto taps = weights(res);
  Tensor<float> out(Shape{res, res, 3});
  for (std::size_t i = 0; i < res; ++i)
    for (std::size_t j = 0; j < res; ++j)
      for (int c = 0; c < 3; ++c) {
        double acc = 0, wsum = 0;
        for (const auto& [yi, wy] : taps[i])
          for (const auto& [xj, wx] : taps[j]) {
            acc += wy * wx * img[((y0 + yi) * w + (x0 + xj)) * 3 + c];
            wsum += wy * wx;
          }
        out[(i * res + j) * 3 + c] = float(acc / wsum);
      }
  return out;
}

/// Loads every decodable PNG in `dir` (sorted by name).
inline Dataset load_image_folder(const std::filesystem::path& dir, std::size_t res) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw std::runtime_error("image folder not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  Dataset ds;
  ds.resolution = res;
  for (const auto& f : files) {
    try {
      ds.images.push_back(center_crop_resize(io::read_png(f.string()), res));
    } catch (const std::exception& e) {
      log_event(std::string("skipping ") + f.string() + ": " + e.what());
    }
  }
  if (ds.images.empty()) throw std::runtime_error("image folder contains no decodable images: " + dir.string());
  return ds;
}

/// Reads a directory written by save_dataset (or any folder with images/).
inline Dataset load_dataset(const std::filesystem::path& dir, std::size_t res) {
  namespace fs = std::filesystem;
  const fs::path images = fs::is_directory(dir / "images") ? dir / "images" : dir;
  Dataset ds = load_image_folder(images, res);
  std::ifstream csv(dir / "poses.csv");
  if (csv) {
    std::string line;
    std::getline(csv, line);
    while (std::getline(csv, line)) {
      std::istringstream ls(line);
      std::string tok;
      std::vector<double> v;
      while (std::getline(ls, tok, ',')) v.push_back(std::stod(tok));
      if (v.size() != 5) throw std::runtime_error("poses.csv: malformed line: " + line);
      CameraPose p;
      p.pitch = v[1];
      p.yaw = v[2];
      p.radius = v[3];
      p.fov_deg = v[4];
      ds.poses.push_back(p);
    }
  }
  std::ifstream js(dir / "scenes.json");
  if (js) {
    const auto j = nlohmann::json::parse(js);
    ds.preset = j.value("preset", "");
    for (const auto& s : j.at("scenes")) ds.scenes.push_back(scene_from_json(s));
    ds.scene_ids = j.at("scene_ids").get<std::vector<std::size_t>>();
  }
  return ds;
}

/// Reproducible epoch permutations: position `n` of the infinite stream.
inline std::size_t dataset_index(std::size_t size, std::uint64_t seed, std::uint64_t n) {
  const std::uint64_t epoch = n / size, pos = n % size;
  std::vector<std::size_t> perm(size);
  for (std::size_t i = 0; i < size; ++i) perm[i] = i;
  Rng rng(seed, Stream::shuffle, epoch);
  for (std::size_t i = size; i-- > 1;) std::swap(perm[i], perm[rng.below(i + 1)]);
  return perm[pos];
}

/// Area downsample [H x W x 3] by an integer factor.
template <class T>
Tensor<T> downsample(const Tensor<T>& img, std::size_t factor) {
  if (factor == 1) return img;
  const std::size_t h = img.dim(0) / factor, w = img.dim(1) / factor;
  require(img.dim(0) == h * factor && img.dim(1) == w * factor, "downsample: size not divisible by factor");
  Tensor<T> out(Shape{h, w, 3});
  const T inv = T(1) / T(factor * factor);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (int c = 0; c < 3; ++c) {
        T acc = 0;
        for (std::size_t a = 0; a < factor; ++a)
          for (std::size_t b = 0; b < factor; ++b) acc += img[((i * factor + a) * img.dim(1) + j * factor + b) * 3 + c];
        out[(i * w + j) * 3 + c] = acc * inv;
      }
  return out;
}

}  // namespace pifield
