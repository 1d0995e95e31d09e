#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pifield/config.hpp"
#include "pifield/core/parallel.hpp"
#include "pifield/data.hpp"
#include "pifield/generator.hpp"
#include "pifield/renderer.hpp"

namespace pifield {

// ---------------------------------------------------------------------------
// Multi-view consistency

/// Sums over the pixels of view A that land, visible, inside view B.
/// `chance` compares the same pixels of A with a fixed shuffle of B's pixels.
struct ReprojectionSums {
  double error = 0, chance = 0, weight = 0;
  std::size_t pixels = 0;

  ReprojectionSums& operator+=(const ReprojectionSums& o) {
    error += o.error;
    chance += o.chance;
    weight += o.weight;
    pixels += o.pixels;
    return *this;
  }
  double raw() const { return weight > 0 ? error / weight : 0.0; }
  /// Error relative to chance; 1 when nothing distinguishes true correspondences.
  double normalized() const { return chance > 0 ? error / chance : 1.0; }
};

namespace detail {

template <class T>
double bilinear(const Tensor<T>& img, std::size_t channels, std::size_t c, double y, double x) {
  const std::size_t h = img.dim(0), w = img.dim(1);
  const std::size_t y0 = std::min<std::size_t>(std::size_t(std::floor(y)), h - 1), x0 = std::min<std::size_t>(std::size_t(std::floor(x)), w - 1);
  const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = y - double(y0), fx = x - double(x0);
  auto at = [&](std::size_t i, std::size_t j) { return double(img[(i * w + j) * channels + c]); };
  return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
}

}  // namespace detail

/// Unprojects each pixel of A with opacity >= `min_acc` to its expected depth,
/// projects it into B and compares colors. Points behind B's surface by more
/// than `depth_tol` are occluded and skipped. Pixels are weighted by A's opacity.
template <class T>
ReprojectionSums reprojection_sums(const RenderResult<T>& a, const CameraPose& pa, const RenderResult<T>& b,
                                   const CameraPose& pb, double min_acc, double depth_tol, std::uint64_t seed) {
  const std::size_t h = a.image.dim(0), w = a.image.dim(1);
  if (b.image.shape() != a.image.shape()) throw std::invalid_argument("reprojection: views differ in resolution");
  const CameraFrame fa = CameraFrame::from_pose(pa), fb = CameraFrame::from_pose(pb);
  const auto rays = generate_rays(fa, w, h, 0.0, 1.0);
  const double aspect = double(w) / double(h);

  std::vector<std::size_t> perm(h * w);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed, Stream::eval, 0x5eed);
  for (std::size_t i = perm.size(); i-- > 1;) std::swap(perm[i], perm[rng.below(i + 1)]);

  ReprojectionSums s;
  for (std::size_t p = 0; p < h * w; ++p) {
    const double wa = a.acc[p];
    if (!(wa >= min_acc) || wa <= 0) continue;
    const Vec3 x = rays[p].o + double(a.depth[p]) * rays[p].d;
    const Vec3 v = x - fb.origin;
    const double z = dot(v, fb.forward);
    if (z <= 0) continue;
    const double nx = dot(v, fb.right) / (z * fb.tan_half_fov) / aspect, ny = dot(v, fb.up) / (z * fb.tan_half_fov);
    const double col = (nx + 1) * 0.5 * double(w) - 0.5, row = (1 - ny) * 0.5 * double(h) - 0.5;
    if (!(col >= 0 && col <= double(w - 1) && row >= 0 && row <= double(h - 1))) continue;
    if (norm(v) > detail::bilinear(b.depth, 1, 0, row, col) + depth_tol) continue;
    double e = 0, c = 0;
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const double ca = a.image[3 * p + ch];
      e += std::abs(ca - detail::bilinear(b.image, 3, ch, row, col));
      c += std::abs(ca - double(b.image[3 * perm[p] + ch]));
    }
    s.error += wa * e / 3;
    s.chance += wa * c / 3;
    s.weight += wa;
    ++s.pixels;
  }
  return s;
}

struct ReprojectionOptions {
  std::size_t latents = 16;
  double yaw_offset = 0.3;
  double min_acc = 0.1;
  double depth_tol = 0.05;
  std::uint64_t seed = 1;
};

/// Pose pairs (p, p + yaw_offset) with p drawn from the prior, one latent each.
template <class T>
ReprojectionSums reprojection_error(const Generator<T>& gen, const PoseDistribution& prior, RenderConfig rc,
                                    const ReprojectionOptions& opt) {
  rc.jitter = false;
  std::vector<ReprojectionSums> parts(opt.latents);
  for (std::size_t k = 0; k < opt.latents; ++k) {
    Rng rng(opt.seed, Stream::eval, 1, k);
    CameraPose pa = sample_pose(prior, rng), pb = pa;
    pb.yaw += opt.yaw_offset;
    const auto film = gen.map_latent(sample_latent<T>(gen.cfg.z_dim, opt.seed, k));
    const auto ra = render(gen, film, pa, rc, RenderKey{opt.seed, 2 * k});
    const auto rb = render(gen, film, pb, rc, RenderKey{opt.seed, 2 * k + 1});
    parts[k] = reprojection_sums(ra, pa, rb, pb, opt.min_acc, opt.depth_tol, opt.seed + k);
  }
  ReprojectionSums total;
  for (const auto& p : parts) total += p;
  return total;
}

// ---------------------------------------------------------------------------
// Pixel statistics

struct GaussianFit {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

/// Mean and unbiased covariance of images [R x R x 3] area-reduced to `res`.
template <class T>
GaussianFit pixel_statistics(const std::vector<Tensor<T>>& images, std::size_t res) {
  if (images.size() < 2) throw std::invalid_argument("pixel statistics: need at least 2 images");
  const std::size_t src = images[0].dim(0);
  if (res < 1 || src % res != 0)
    throw std::invalid_argument("pixel statistics: resolution " + std::to_string(src) + " is not a multiple of " +
                                std::to_string(res));
  const std::size_t dim = res * res * 3, n = images.size();
  Eigen::MatrixXd x(n, dim);
  for (std::size_t i = 0; i < n; ++i) {
    if (images[i].shape() != images[0].shape()) throw std::invalid_argument("pixel statistics: mixed image shapes");
    const auto d = downsample(images[i], src / res);
    for (std::size_t j = 0; j < dim; ++j) x(Eigen::Index(i), Eigen::Index(j)) = double(d[j]);
  }
  GaussianFit g;
  g.mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd c = x.rowwise() - g.mean.transpose();
  g.cov = (c.transpose() * c) / double(n - 1);
  return g;
}

/// |m1 - m2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)).
inline double frechet_distance(const GaussianFit& a, const GaussianFit& b) {
  if (a.mean.size() != b.mean.size()) throw std::invalid_argument("frechet: dimension mismatch");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(a.cov);
  const Eigen::VectorXd la = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Eigen::MatrixXd sa = ea.eigenvectors() * la.asDiagonal() * ea.eigenvectors().transpose();
  // tr (S1 S2)^(1/2) = tr (S1^(1/2) S2 S1^(1/2))^(1/2), the latter symmetric
  const Eigen::MatrixXd m = sa * b.cov * sa;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> em(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
  const double cross = em.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2 * cross;
  return std::max(0.0, d);
}

template <class T>
std::vector<Tensor<T>> generate_images(const Generator<T>& gen, const PoseDistribution& prior, RenderConfig rc,
                                       std::size_t count, std::uint64_t seed) {
  rc.jitter = false;
  std::vector<Tensor<T>> out(count);
  for (std::size_t k = 0; k < count; ++k) {
    Rng rng(seed, Stream::eval, 2, k);
    const auto pose = sample_pose(prior, rng);
    const auto film = gen.map_latent(sample_latent<T>(gen.cfg.z_dim, seed + 1, k));
    out[k] = render(gen, film, pose, rc, RenderKey{seed, 1000000 + k}).image;
  }
  return out;
}

// ---------------------------------------------------------------------------
// View independence

/// Largest density difference at random points under two random view
/// directions per point. Zero for any weights.
template <class T>
double view_dependence(const Generator<T>& gen, double bound, std::size_t points, std::uint64_t seed) {
  double worst = 0;
  for (std::size_t k = 0; k < 4; ++k) {
    Rng rng(seed, Stream::eval, 3, k);
    const auto film = gen.map_latent(sample_latent<T>(gen.cfg.z_dim, seed + 2, k));
    Tensor<T> x(Shape{points, 3}), d1(Shape{points, 3}), d2(Shape{points, 3});
    for (std::size_t i = 0; i < points; ++i) {
      for (std::size_t c = 0; c < 3; ++c) x[3 * i + c] = T(rng.uniform(-bound, bound));
      for (auto* d : {&d1, &d2}) {
        const Vec3 u = normalize(Vec3{rng.normal(), rng.normal(), rng.normal()});
        (*d)[3 * i] = T(u.x);
        (*d)[3 * i + 1] = T(u.y);
        (*d)[3 * i + 2] = T(u.z);
      }
    }
    const auto s1 = gen.evaluate(x, d1, film).first, s2 = gen.evaluate(x, d2, film).first;
    for (std::size_t i = 0; i < points; ++i) worst = std::max(worst, std::abs(double(s1[i]) - double(s2[i])));
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Report

struct EvalReport {
  ReprojectionSums reprojection;
  double pixel_distance = 0;
  double view_dependence = 0;
  std::size_t resolution = 0;

  std::string text() const {
    std::ostringstream os;
    os.precision(6);
    os << "resolution                     " << resolution << "\n"
       << "reprojection error (raw)       " << reprojection.raw() << "\n"
       << "reprojection error (vs chance) " << reprojection.normalized() << "\n"
       << "reprojected pixels             " << reprojection.pixels << "\n"
       << "pixel-statistics distance      " << pixel_distance
       << "  (Frechet distance of raw pixel Gaussians; a proxy, not FID)\n"
       << "density view dependence        " << view_dependence << "\n";
    return os.str();
  }
};

inline ReprojectionOptions reprojection_options(const Config& c) {
  ReprojectionOptions o;
  o.latents = c.eval.latents;
  o.yaw_offset = c.eval.yaw_offset;
  o.min_acc = c.eval.min_acc;
  o.depth_tol = c.eval.depth_tol;
  o.seed = c.eval.seed;
  return o;
}

/// Full report for `gen` (normally the moving-average weights) against `data`.
template <class T>
EvalReport evaluate(const Generator<T>& gen, const Config& cfg, const Dataset& data) {
  const std::size_t res = cfg.train.disc.top_resolution();
  if (data.resolution < res || data.resolution % res != 0)
    throw std::invalid_argument("eval: dataset resolution " + std::to_string(data.resolution) +
                                " does not match the model resolution " + std::to_string(res));
  if (data.size() < 2) throw std::invalid_argument("eval: dataset needs at least 2 images");
  RenderConfig rc = cfg.train.render;
  rc.width = rc.height = res;
  EvalReport r;
  r.resolution = res;
  r.reprojection = reprojection_error(gen, cfg.train.pose, rc, reprojection_options(cfg));

  const std::size_t n = std::min(cfg.eval.stat_samples, data.size());
  std::vector<Tensor<T>> real(n);
  for (std::size_t k = 0; k < n; ++k)
    real[k] = Tensor<T>::cast(downsample(data.images[dataset_index(data.size(), cfg.eval.seed, k)], data.resolution / res));
  const auto fake = generate_images(gen, cfg.train.pose, rc, n, cfg.eval.seed);
  r.pixel_distance = frechet_distance(pixel_statistics(real, cfg.eval.stat_res), pixel_statistics(fake, cfg.eval.stat_res));
  r.view_dependence = view_dependence(gen, 1.0, 512, cfg.eval.seed);
  return r;
}

}  // namespace pifield
