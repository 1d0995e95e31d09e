#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "pifield/core/geometry.hpp"
#include "pifield/core/ops.hpp"
#include "pifield/core/parallel.hpp"
#include "pifield/core/rng.hpp"
#include "pifield/generator.hpp"

namespace pifield {

struct CameraPose {
  double pitch = 0, yaw = 0;  // radians
  double radius = 1;
  Vec3 target{};
  double fov_deg = 12;

  /// On the sphere of `radius` around the target; pitch lifts towards +y, yaw turns about +y.
  Vec3 position() const {
    return target + radius * Vec3{std::cos(pitch) * std::sin(yaw), std::sin(pitch), std::cos(pitch) * std::cos(yaw)};
  }
};

/// Pinhole camera basis. The field of view spans the image height.
struct CameraFrame {
  Vec3 origin, right, up, forward;
  double tan_half_fov = 0;

  static CameraFrame from_pose(const CameraPose& p) {
    if (!(p.fov_deg > 0 && p.fov_deg < 180))
      throw std::invalid_argument("camera: fov must lie in (0, 180) degrees, got " + std::to_string(p.fov_deg));
    CameraFrame f;
    f.origin = p.position();
    const Vec3 to = p.target - f.origin;
    if (!(norm(to) > 1e-12)) throw std::invalid_argument("camera: position coincides with the look-at target");
    f.forward = normalize(to);
    Vec3 r = cross(f.forward, Vec3{0, 1, 0});
    if (norm(r) < 1e-9) r = cross(f.forward, Vec3{0, 0, -1});
    f.right = normalize(r);
    f.up = cross(f.right, f.forward);
    f.tan_half_fov = std::tan(p.fov_deg * std::numbers::pi / 360.0);
    return f;
  }

  /// Rigid rotation of the whole camera about the world origin.
  CameraFrame rotated(const Mat3& rot) const {
    return {rot * origin, rot * right, rot * up, rot * forward, tan_half_fov};
  }
};

struct Ray {
  Vec3 o, d;
  double tn = 0, tf = 0;
};

/// Ray through normalized device coordinates; (0,0) is the optical axis and
/// ndc_y = +-1 are the top and bottom image edges.
inline Ray camera_ray(const CameraFrame& f, double ndc_x, double ndc_y) {
  const Vec3 d = f.forward + f.tan_half_fov * (ndc_x * f.right + ndc_y * f.up);
  return {f.origin, normalize(d), 0, 0};
}

/// One ray per pixel center, row-major from the top-left pixel.
inline std::vector<Ray> generate_rays(const CameraFrame& f, std::size_t width, std::size_t height, double tn, double tf) {
  if (width < 1 || height < 1) throw std::invalid_argument("generate_rays: resolution must be >= 1");
  if (!(tn < tf)) throw std::invalid_argument("generate_rays: need near < far");
  std::vector<Ray> rays;
  rays.reserve(width * height);
  const double aspect = double(width) / double(height);
  for (std::size_t i = 0; i < height; ++i)
    for (std::size_t j = 0; j < width; ++j) {
      const double nx = (2.0 * (double(j) + 0.5) / double(width) - 1.0) * aspect;
      const double ny = 1.0 - 2.0 * (double(i) + 0.5) / double(height);
      Ray r = camera_ray(f, nx, ny);
      r.tn = tn;
      r.tf = tf;
      rays.push_back(r);
    }
  return rays;
}

// ---------------------------------------------------------------------------
// Pose distributions

enum class PoseKind { gaussian, uniform, hemisphere };

struct PoseDistribution {
  PoseKind kind = PoseKind::gaussian;
  double pitch_mean = 0, yaw_mean = 0;
  double pitch_std = 0.15, yaw_std = 0.3;
  double pitch_min = -0.4, pitch_max = 0.4;
  double yaw_min = -0.75, yaw_max = 0.75;
  double radius = 1;
  double fov_deg = 12;

  void validate() const {
    if (pitch_std < 0 || yaw_std < 0) throw std::invalid_argument("pose: standard deviations must be >= 0");
    if (pitch_min > pitch_max || yaw_min > yaw_max) throw std::invalid_argument("pose: ranges must be ordered");
    if (!(radius > 0)) throw std::invalid_argument("pose: radius must be > 0");
  }

  /// Center of the distribution, used when a target's pose is unknown.
  CameraPose center() const {
    CameraPose p;
    p.radius = radius;
    p.fov_deg = fov_deg;
    if (kind == PoseKind::gaussian) {
      p.pitch = pitch_mean;
      p.yaw = yaw_mean;
    } else if (kind == PoseKind::uniform) {
      p.pitch = 0.5 * (pitch_min + pitch_max);
      p.yaw = 0.5 * (yaw_min + yaw_max);
    }
    return p;
  }
};

inline CameraPose sample_pose(const PoseDistribution& dist, Rng& rng) {
  CameraPose p = dist.center();
  switch (dist.kind) {
    case PoseKind::gaussian:
      p.pitch = dist.pitch_mean + dist.pitch_std * rng.normal();
      p.yaw = dist.yaw_mean + dist.yaw_std * rng.normal();
      break;
    case PoseKind::uniform:
      p.pitch = rng.uniform(dist.pitch_min, dist.pitch_max);
      p.yaw = rng.uniform(dist.yaw_min, dist.yaw_max);
      break;
    case PoseKind::hemisphere:
      // sin(pitch) uniform on [0,1) is area-uniform on the upper hemisphere.
      p.pitch = std::asin(rng.uniform());
      p.yaw = rng.uniform(-std::numbers::pi, std::numbers::pi);
      break;
  }
  return p;
}

// ---------------------------------------------------------------------------
// Sampling along rays

struct RenderConfig {
  std::size_t width = 32, height = 32;
  std::size_t samples = 24;  // coarse samples per ray
  bool hierarchical = true;
  std::size_t fine_samples = 0;  // 0: same as `samples`
  double depth_extent = 0.9;     // near/far = radius -+ extent
  std::array<double, 3> background{1, 1, 1};
  bool jitter = true;
  std::size_t chunk_rays = 512;

  std::size_t fine_count() const { return hierarchical ? (fine_samples ? fine_samples : samples) : 0; }
  std::size_t total_samples() const { return samples + fine_count(); }

  void validate() const {
    if (width < 1 || height < 1) throw std::invalid_argument("render: resolution must be >= 1");
    if (samples < 2) throw std::invalid_argument("render: need at least 2 samples per ray");
    if (!(depth_extent > 0)) throw std::invalid_argument("render: depth_extent must be > 0");
    if (chunk_rays < 1) throw std::invalid_argument("render: chunk_rays must be >= 1");
  }
};

/// Identifies one render for the counter-based sampler: draws depend only on
/// (seed, frame, pixel, sample).
struct RenderKey {
  std::uint64_t seed = 0;
  std::uint64_t frame = 0;
};

inline std::pair<double, double> near_far(const CameraPose& p, double extent) {
  return {std::max(p.radius - extent, 1e-6), p.radius + extent};
}

/// One depth per equal bin of [tn, tf]; jitter=false pins each to its bin midpoint.
inline std::vector<double> stratified_samples(const Ray& ray, std::size_t n, RenderKey key, std::uint64_t pixel,
                                              bool jitter = true) {
  if (n < 2) throw std::invalid_argument("stratified_samples: need N >= 2");
  std::vector<double> t(n);
  const double step = (ray.tf - ray.tn) / double(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double u =
        jitter ? to_open_unit(hash_key({key.seed, std::uint64_t(Stream::ray_samples), key.frame, pixel, k})) : 0.5;
    t[k] = ray.tn + (double(k) + u) * step;
  }
  return t;
}

/// Inverse-transform samples from the piecewise-constant density over the N
/// equal bins of [tn, tf] whose masses are proportional to `weights`.
/// Falls back to stratified sampling when all weights vanish. Sorted.
inline std::vector<double> hierarchical_resample(double tn, double tf, const std::vector<double>& weights,
                                                 std::size_t n_fine, RenderKey key, std::uint64_t pixel) {
  const std::size_t nb = weights.size();
  std::vector<double> cdf(nb + 1, 0.0);
  for (std::size_t k = 0; k < nb; ++k) cdf[k + 1] = cdf[k] + std::max(weights[k], 0.0);
  const double total = cdf[nb];
  std::vector<double> out(n_fine);
  const double step = (tf - tn) / double(nb);
  if (!(total > 0) || !std::isfinite(total)) {
    const double fs = (tf - tn) / double(n_fine);
    for (std::size_t j = 0; j < n_fine; ++j)
      out[j] = tn + (double(j) + to_open_unit(hash_key({key.seed, std::uint64_t(Stream::fine_samples), key.frame, pixel,
                                                         j}))) * fs;
    return out;
  }
  for (std::size_t j = 0; j < n_fine; ++j) {
    const double u =
        total * to_open_unit(hash_key({key.seed, std::uint64_t(Stream::fine_samples), key.frame, pixel, j}));
    std::size_t b = std::size_t(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    b = std::clamp<std::size_t>(b, 1, nb) - 1;
    const double mass = cdf[b + 1] - cdf[b];
    const double frac = mass > 0 ? std::clamp((u - cdf[b]) / mass, 0.0, 1.0) : 0.5;
    out[j] = tn + (double(b) + frac) * step;
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// Compositing

template <class T>
struct CompositeOut {
  Var<T> rgb;        // [R x 3]
  Tensor<T> depth;   // [R]
  Tensor<T> acc;     // [R], sum of weights
  Tensor<T> weights; // [R x N]
  Tensor<T> trans;   // [R x (N+1)], T_1..T_{N+1}
};

/// Sample spacing: t_{k+1} - t_k, and far - t_N for the last sample.
template <class T>
Tensor<T> sample_deltas(const Tensor<T>& t, const std::vector<double>& far) {
  const std::size_t r = t.dim(0), n = t.dim(1);
  Tensor<T> d(t.shape());
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t k = 0; k + 1 < n; ++k) d.at(i, k) = t.at(i, k + 1) - t.at(i, k);
    d.at(i, n - 1) = T(far[i]) - t.at(i, n - 1);
  }
  return d;
}

/// Discrete volume rendering along R rays of N samples each.
/// sigma has R*N entries, rgb is [R*N x 3], t and delta are [R x N].
template <class T>
CompositeOut<T> composite(const Var<T>& sigma, const Var<T>& rgb, const Tensor<T>& t, const Tensor<T>& delta,
                          const std::array<double, 3>& background, double eps = 1e-8) {
  require(t.rank() == 2 && delta.shape() == t.shape(), "composite: depths " + shape_str(t.shape()) + " vs deltas " +
                                                            shape_str(delta.shape()));
  const std::size_t r = t.dim(0), n = t.dim(1);
  require(sigma.value().size() == r * n && rgb.shape() == Shape({r * n, 3}),
          "composite: sigma " + shape_str(sigma.shape()) + " rgb " + shape_str(rgb.shape()) + " for " +
              std::to_string(r) + " rays x " + std::to_string(n) + " samples");
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t k = 0; k + 1 < n; ++k)
      if (t.at(i, k + 1) < t.at(i, k))
        throw std::invalid_argument("composite: depths not sorted along ray " + std::to_string(i));

  const T* sg = sigma.value().ptr();
  const T* cl = rgb.value().ptr();
  const T bg[3] = {T(background[0]), T(background[1]), T(background[2])};
  CompositeOut<T> out;
  Tensor<T> pix(Shape{r, 3});
  out.depth = Tensor<T>(Shape{r});
  out.acc = Tensor<T>(Shape{r});
  out.weights = Tensor<T>(Shape{r, n});
  out.trans = Tensor<T>(Shape{r, n + 1});
  for (std::size_t i = 0; i < r; ++i) {
    T optical = 0, acc = 0, dsum = 0;
    T c[3] = {0, 0, 0};
    out.trans.at(i, 0) = T(1);
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t s = i * n + k;
      const T a = sg[s] * delta.at(i, k);
      const T tk = std::exp(-optical);
      const T w = tk * -std::expm1(-a);
      optical += a;
      out.trans.at(i, k + 1) = std::exp(-optical);
      out.weights.at(i, k) = w;
      acc += w;
      dsum += w * t.at(i, k);
      for (int ch = 0; ch < 3; ++ch) c[ch] += w * (cl[3 * s + ch] - bg[ch]);
    }
    for (int ch = 0; ch < 3; ++ch) pix.at(i, ch) = bg[ch] + c[ch];
    out.acc[i] = acc;
    out.depth[i] = dsum / std::max(acc, T(eps));
  }

  Tape<T>& tape = *sigma.tape;
  if (!tape.needs_grad({sigma, rgb})) {
    out.rgb = tape.record(std::move(pix), {sigma, rgb}, nullptr, false);
    return out;
  }
  auto w = std::make_shared<Tensor<T>>(out.weights);
  auto tr = std::make_shared<Tensor<T>>(out.trans);
  out.rgb = tape.record(
      std::move(pix), {sigma, rgb},
      [sigma, rgb, w, tr, delta, r, n, bg0 = bg[0], bg1 = bg[1], bg2 = bg[2]](Tape<T>& tp, const Var<T>& g) {
        const T bgv[3] = {bg0, bg1, bg2};
        const T* gv = g.value().ptr();
        const T* cl = rgb.value().ptr();
        std::vector<Var<T>> res(2);
        if (rgb.requires_grad()) {
          Tensor<T> gc(Shape{r * n, 3});
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t k = 0; k < n; ++k)
              for (int ch = 0; ch < 3; ++ch) gc[3 * (i * n + k) + ch] = w->at(i, k) * gv[3 * i + ch];
          res[1] = tp.constant(std::move(gc));
        }
        if (sigma.requires_grad()) {
          Tensor<T> gs(sigma.shape());
          for (std::size_t i = 0; i < r; ++i) {
            // d pixel / d a_k = T_{k+1} e_k - sum_{j>k} w_j e_j, with e = (c - bg) . g
            T suffix = 0;
            for (std::size_t k = n; k-- > 0;) {
              const std::size_t s = i * n + k;
              T e = 0;
              for (int ch = 0; ch < 3; ++ch) e += gv[3 * i + ch] * (cl[3 * s + ch] - bgv[ch]);
              gs[s] = (tr->at(i, k + 1) * e - suffix) * delta.at(i, k);
              suffix += w->at(i, k) * e;
            }
          }
          res[0] = tp.constant(std::move(gs));
        }
        return res;
      },
      false);
  return out;
}

/// [H*W x 3] pixel rows -> [1 x 3 x H x W].
template <class T>
Var<T> pixels_to_image(const Var<T>& px, std::size_t height, std::size_t width) {
  require(px.shape() == Shape({height * width, 3}), "pixels_to_image: " + shape_str(px.shape()));
  Tensor<T> img(Shape{1, 3, height, width});
  for (std::size_t p = 0; p < height * width; ++p)
    for (std::size_t c = 0; c < 3; ++c) img[c * height * width + p] = px.value()[3 * p + c];
  return px.tape->record(std::move(img), {px},
                         [height, width](Tape<T>& t, const Var<T>& g) {
                           Tensor<T> gp(Shape{height * width, 3});
                           for (std::size_t p = 0; p < height * width; ++p)
                             for (std::size_t c = 0; c < 3; ++c) gp[3 * p + c] = g.value()[c * height * width + p];
                           return std::vector<Var<T>>{t.constant(std::move(gp))};
                         },
                         false);
}

// ---------------------------------------------------------------------------
// Full render

/// Field evaluated without gradients: (points [P x 3], dirs [P x 3]) -> (sigma [P x 1], rgb [P x 3]).
template <class T>
using FieldFn = std::function<std::pair<Tensor<T>, Tensor<T>>(const Tensor<T>&, const Tensor<T>&)>;

template <class T>
struct SampledRays {
  Tensor<T> t;      // [R x N] sorted depths
  Tensor<T> delta;  // [R x N]
  Tensor<T> points; // [R*N x 3]
  Tensor<T> dirs;   // [R*N x 3]
};

template <class T>
void fill_points(SampledRays<T>& s, const Ray* rays, std::size_t count, std::size_t n) {
  s.points = Tensor<T>(Shape{count * n, 3});
  s.dirs = Tensor<T>(Shape{count * n, 3});
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t k = 0; k < n; ++k) {
      const double tk = double(s.t.at(i, k));
      const Vec3 p = rays[i].o + tk * rays[i].d;
      const std::size_t row = i * n + k;
      for (int c = 0; c < 3; ++c) {
        s.points.at(row, c) = T(p[c]);
        s.dirs.at(row, c) = T(rays[i].d[c]);
      }
    }
}

/// Depths for `count` rays starting at pixel index `first`: stratified coarse
/// samples, plus inverse-CDF fine samples when the hierarchical pass is on.
template <class T>
SampledRays<T> sample_rays(const FieldFn<T>& field, const Ray* rays, std::size_t count, std::size_t first,
                           const RenderConfig& cfg, RenderKey key) {
  const std::size_t nc = cfg.samples, nf = cfg.fine_count(), n = nc + nf;
  SampledRays<T> s;
  std::vector<std::vector<double>> coarse(count);
  for (std::size_t i = 0; i < count; ++i) coarse[i] = stratified_samples(rays[i], nc, key, first + i, cfg.jitter);
  std::vector<double> far(count);
  for (std::size_t i = 0; i < count; ++i) far[i] = rays[i].tf;

  if (nf == 0) {
    s.t = Tensor<T>(Shape{count, nc});
    for (std::size_t i = 0; i < count; ++i)
      for (std::size_t k = 0; k < nc; ++k) s.t.at(i, k) = T(coarse[i][k]);
  } else {
    SampledRays<T> c;
    c.t = Tensor<T>(Shape{count, nc});
    for (std::size_t i = 0; i < count; ++i)
      for (std::size_t k = 0; k < nc; ++k) c.t.at(i, k) = T(coarse[i][k]);
    c.delta = sample_deltas(c.t, far);
    fill_points(c, rays, count, nc);
    const auto [sigma, rgb] = field(c.points, c.dirs);
    Tape<T> scratch;
    typename Tape<T>::NoGrad ng(scratch);
    auto comp = composite(scratch.constant(sigma), scratch.constant(rgb), c.t, c.delta, cfg.background);
    s.t = Tensor<T>(Shape{count, n});
    for (std::size_t i = 0; i < count; ++i) {
      std::vector<double> w(nc);
      for (std::size_t k = 0; k < nc; ++k) w[k] = double(comp.weights.at(i, k));
      auto fine = hierarchical_resample(rays[i].tn, rays[i].tf, w, nf, key, first + i);
      std::vector<double> merged = coarse[i];
      merged.insert(merged.end(), fine.begin(), fine.end());
      std::sort(merged.begin(), merged.end());
      for (std::size_t k = 0; k < n; ++k) s.t.at(i, k) = T(merged[k]);
    }
  }
  s.delta = sample_deltas(s.t, far);
  fill_points(s, rays, count, n);
  return s;
}

template <class T>
struct RenderResult {
  Tensor<T> image;  // [H x W x 3]
  Tensor<T> depth;  // [H x W]
  Tensor<T> acc;    // [H x W]
};

/// Evaluation render of an arbitrary field; parallel over ray chunks.
template <class T>
RenderResult<T> render_field(const FieldFn<T>& field, const CameraFrame& frame, double tn, double tf,
                             const RenderConfig& cfg, RenderKey key) {
  cfg.validate();
  const auto rays = generate_rays(frame, cfg.width, cfg.height, tn, tf);
  const std::size_t total = rays.size(), chunks = (total + cfg.chunk_rays - 1) / cfg.chunk_rays;
  RenderResult<T> out{Tensor<T>(Shape{cfg.height, cfg.width, 3}), Tensor<T>(Shape{cfg.height, cfg.width}),
                      Tensor<T>(Shape{cfg.height, cfg.width})};
  parallel_for(chunks, [&](std::size_t c) {
    const std::size_t lo = c * cfg.chunk_rays, cnt = std::min(cfg.chunk_rays, total - lo);
    auto s = sample_rays(field, rays.data() + lo, cnt, lo, cfg, key);
    const auto [sigma, rgb] = field(s.points, s.dirs);
    Tape<T> tape;
    typename Tape<T>::NoGrad ng(tape);
    auto comp = composite(tape.constant(sigma), tape.constant(rgb), s.t, s.delta, cfg.background);
    for (std::size_t i = 0; i < cnt; ++i) {
      for (int ch = 0; ch < 3; ++ch) out.image[3 * (lo + i) + ch] = comp.rgb.value()[3 * i + ch];
      out.depth[lo + i] = comp.depth[i];
      out.acc[lo + i] = comp.acc[i];
    }
  });
  return out;
}

template <class T>
FieldFn<T> generator_field(const Generator<T>& gen, const Film<T>& film) {
  return [&gen, film](const Tensor<T>& x, const Tensor<T>& d) { return gen.evaluate(x, d, film); };
}

template <class T>
RenderResult<T> render(const Generator<T>& gen, const Film<T>& film, const CameraPose& pose, const RenderConfig& cfg,
                       RenderKey key) {
  const auto [tn, tf] = near_far(pose, cfg.depth_extent);
  return render_field<T>(generator_field(gen, film), CameraFrame::from_pose(pose), tn, tf, cfg, key);
}

template <class T>
struct TapeRender {
  Var<T> image;  // [1 x 3 x H x W]
  Tensor<T> depth, acc;
};

/// Differentiable render: field parameters `fp` and conditioning `film` live on
/// the tape. The coarse pass of the hierarchical sampler carries no gradient.
template <class T>
TapeRender<T> render_on_tape(const Generator<T>& gen, const std::vector<Var<T>>& fp, const FilmVars<T>& film,
                             const CameraPose& pose, const RenderConfig& cfg, RenderKey key) {
  cfg.validate();
  const auto [tn, tf] = near_far(pose, cfg.depth_extent);
  const auto rays = generate_rays(CameraFrame::from_pose(pose), cfg.width, cfg.height, tn, tf);
  Film<T> fv{film.gamma.value(), film.beta.value(), film.z.valid() ? film.z.value() : Tensor<T>()};
  Generator<T> frozen;
  FieldFn<T> coarse_field;
  if (cfg.fine_count() > 0) {
    frozen.cfg = gen.cfg;
    frozen.field = gen.field;
    for (std::size_t i = 0; i < fp.size(); ++i) frozen.field[i] = fp[i].value();
    coarse_field = generator_field(frozen, fv);
  }
  auto s = sample_rays(coarse_field, rays.data(), rays.size(), 0, cfg, key);
  Tape<T>& tape = *film.gamma.tape;
  auto f = gen.forward(fp, tape.constant(std::move(s.points)), tape.constant(std::move(s.dirs)), film);
  auto comp = composite(f.sigma, f.rgb, s.t, s.delta, cfg.background);
  TapeRender<T> out;
  out.image = pixels_to_image(comp.rgb, cfg.height, cfg.width);
  out.depth = comp.depth.reshaped({cfg.height, cfg.width});
  out.acc = comp.acc.reshaped({cfg.height, cfg.width});
  return out;
}

/// [H x W x 3] -> [1 x 3 x H x W]
template <class T>
Tensor<T> hwc_to_chw(const Tensor<T>& img) {
  const std::size_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
  Tensor<T> out(Shape{1, c, h, w});
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) out[ch * h * w + i] = img[c * i + ch];
  return out;
}

template <class T>
Tensor<T> chw_to_hwc(const Tensor<T>& img) {
  const std::size_t c = img.dim(1), h = img.dim(2), w = img.dim(3);
  Tensor<T> out(Shape{h, w, c});
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) out[c * i + ch] = img[ch * h * w + i];
  return out;
}

}  // namespace pifield
