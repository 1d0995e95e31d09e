#include <gtest/gtest.h>

#include <cmath>

#include "pifield/eval.hpp"
#include "tiny.hpp"

using namespace pifield;
using namespace pifield::testing;

namespace {

GaussianFit fit(Eigen::VectorXd m, Eigen::MatrixXd c) { return {std::move(m), std::move(c)}; }

Eigen::MatrixXd random_spd(int n, std::uint64_t seed) {
  Rng rng(seed, Stream::eval);
  Eigen::MatrixXd a(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) a(i, j) = rng.normal();
  return a * a.transpose() + 0.1 * Eigen::MatrixXd::Identity(n, n);
}

std::pair<RenderResult<double>, RenderResult<double>> scene_pair(std::uint64_t id, const CameraPose& pa,
                                                                 const CameraPose& pb, std::uint64_t other = ~0ull) {
  const auto prior = pose_preset("celeba-like");
  const auto ext = scene_extent(prior);
  DatasetSpec spec;
  spec.resolution = 32;
  const auto rc = dataset_render_config(spec);
  const auto a = analytic_render<double>(make_scene(3, id, ext), pa, rc);
  const auto b = analytic_render<double>(make_scene(3, other == ~0ull ? id : other, ext), pb, rc);
  return {a, b};
}

}  // namespace

TEST(Frechet, OneDimensionalClosedForm) {
  // (m1 - m2)^2 + (s1 - s2)^2
  Eigen::VectorXd m1(1), m2(1);
  m1 << 0.3;
  m2 << -1.1;
  Eigen::MatrixXd c1(1, 1), c2(1, 1);
  c1 << 4.0;
  c2 << 0.25;
  EXPECT_NEAR(frechet_distance(fit(m1, c1), fit(m2, c2)), 1.4 * 1.4 + 1.5 * 1.5, 1e-12);
}

TEST(Frechet, DiagonalClosedForm) {
  Rng rng(4, Stream::eval);
  Eigen::VectorXd m1(6), m2(6), s1(6), s2(6);
  for (int i = 0; i < 6; ++i) {
    m1(i) = rng.normal();
    m2(i) = rng.normal();
    s1(i) = rng.uniform(0.1, 2);
    s2(i) = rng.uniform(0.1, 2);
  }
  const double expected = (m1 - m2).squaredNorm() + (s1 - s2).squaredNorm();
  const Eigen::MatrixXd c1 = s1.array().square().matrix().asDiagonal(), c2 = s2.array().square().matrix().asDiagonal();
  EXPECT_NEAR(frechet_distance(fit(m1, c1), fit(m2, c2)), expected, 1e-10);
}

TEST(Frechet, ScaledCovarianceClosedForm) {
  // S2 = c^2 S1  ->  |dm|^2 + (1 - c)^2 tr S1
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto s = random_spd(7, seed);
    const double c = 0.3 + 0.4 * double(seed);
    Eigen::VectorXd m1 = Eigen::VectorXd::Zero(7), m2 = Eigen::VectorXd::Constant(7, 0.2);
    EXPECT_NEAR(frechet_distance(fit(m1, s), fit(m2, c * c * s)), 7 * 0.04 + (1 - c) * (1 - c) * s.trace(), 1e-8);
  }
}

TEST(Frechet, SymmetricAndZeroOnItself) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto a = fit(Eigen::VectorXd::Constant(5, 0.1 * double(seed)), random_spd(5, seed));
    const auto b = fit(Eigen::VectorXd::Zero(5), random_spd(5, seed + 100));
    EXPECT_NEAR(frechet_distance(a, b), frechet_distance(b, a), 1e-9 * (1 + frechet_distance(a, b)));
    EXPECT_LT(frechet_distance(a, a), 1e-9);
  }
  EXPECT_THROW(frechet_distance(fit(Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2)),
                                fit(Eigen::VectorXd::Zero(3), Eigen::MatrixXd::Identity(3, 3))),
               std::invalid_argument);
}

TEST(PixelStatistics, IdenticalSetsHaveZeroDistance) {
  std::vector<Tensor<float>> imgs(tiny_data().images.begin(), tiny_data().images.end());
  for (std::size_t res : {1, 2, 4, 8}) {
    const auto g = pixel_statistics(imgs, res);
    EXPECT_LT(frechet_distance(g, g), 1e-6) << res;
    EXPECT_EQ(g.mean.size(), Eigen::Index(3 * res * res));
  }
}

TEST(PixelStatistics, ConstantImagesAndValidation) {
  std::vector<Tensor<double>> imgs(4, Tensor<double>(Shape{8, 8, 3}, 0.25));
  const auto g = pixel_statistics(imgs, 2);
  EXPECT_NEAR(g.mean.maxCoeff(), 0.25, 1e-15);
  EXPECT_NEAR(g.mean.minCoeff(), 0.25, 1e-15);
  EXPECT_EQ(g.cov.norm(), 0.0);
  EXPECT_THROW(pixel_statistics(imgs, 3), std::invalid_argument);
  EXPECT_THROW(pixel_statistics(std::vector<Tensor<double>>(1, imgs[0]), 2), std::invalid_argument);
}

TEST(PixelStatistics, ShiftedSetDistanceIsTheMeanShift) {
  std::vector<Tensor<double>> a, b;
  for (const auto& im : tiny_data().images) {
    a.push_back(Tensor<double>::cast(im));
    b.push_back(Tensor<double>::cast(im));
    for (auto& v : b.back().data()) v += 0.1;
  }
  const double d = frechet_distance(pixel_statistics(a, 4), pixel_statistics(b, 4));
  EXPECT_NEAR(d, 48 * 0.01, 1e-6);
}

TEST(Reprojection, SameViewIsExact) {
  CameraPose p;
  p.yaw = 0.2;
  const auto [a, b] = scene_pair(1, p, p);
  const auto s = reprojection_sums(a, p, b, p, 0.1, 0.05, 0);
  ASSERT_GT(s.pixels, 20u);
  EXPECT_LT(s.raw(), 1e-9);
}

TEST(Reprojection, GroundTruthScenesAreConsistent) {
  const auto prior = pose_preset("celeba-like");
  ReprojectionSums truth, mismatched;
  for (std::uint64_t k = 0; k < 10; ++k) {
    Rng rng(1, Stream::eval, 1, k);
    CameraPose pa = sample_pose(prior, rng), pb = pa;
    pb.yaw += 0.3;
    const auto [a, b] = scene_pair(k, pa, pb);
    truth += reprojection_sums(a, pa, b, pb, 0.1, 0.05, k);
    const auto [c, d] = scene_pair(k, pa, pb, k + 50);
    mismatched += reprojection_sums(c, pa, d, pb, 0.1, 0.05, k);
  }
  EXPECT_GT(truth.pixels, 500u);
  EXPECT_LT(truth.normalized(), 0.2);
  EXPECT_GT(mismatched.normalized(), 2.5 * truth.normalized());
}

TEST(Reprojection, EmptyViewsFallBackToChance) {
  CameraPose p;
  RenderResult<double> r{Tensor<double>(Shape{4, 4, 3}, 1.0), Tensor<double>(Shape{4, 4}, 1.0),
                         Tensor<double>(Shape{4, 4})};
  const auto s = reprojection_sums(r, p, r, p, 0.1, 0.05, 0);
  EXPECT_EQ(s.pixels, 0u);
  EXPECT_EQ(s.normalized(), 1.0);
}

TEST(ViewDependence, ExactlyZeroForEveryBackbone) {
  for (auto act : {ops::Activation::sine, ops::Activation::relu})
    for (auto cond : {Conditioning::film, Conditioning::concat}) {
      auto c = tiny_config().gen;
      c.activation = act;
      c.conditioning = cond;
      c.pe_octaves = 3;
      EXPECT_EQ(view_dependence(Generator<float>::create(c, 2), 1.0, 256, 0), 0.0);
      EXPECT_EQ(view_dependence(Generator<double>::create(c, 2), 1.0, 256, 0), 0.0);
    }
}

TEST(Evaluate, ReportOnTinyModel) {
  Config cfg;
  cfg.train = tiny_config();
  cfg.eval.latents = 2;
  cfg.eval.stat_samples = 8;
  cfg.eval.stat_res = 4;
  const auto s = TrainState<float>::create(cfg.train);
  const auto r = evaluate(s.ema_generator(), cfg, tiny_data());
  EXPECT_EQ(r.resolution, 8u);
  EXPECT_TRUE(std::isfinite(r.pixel_distance));
  EXPECT_GE(r.pixel_distance, 0.0);
  EXPECT_EQ(r.view_dependence, 0.0);
  EXPECT_NE(r.text().find("proxy, not FID"), std::string::npos);
}

TEST(Evaluate, RejectsResolutionMismatch) {
  Config cfg;
  cfg.train = tiny_config();
  cfg.train.disc.resolutions = {8, 16};
  const auto s = TrainState<float>::create(cfg.train);
  EXPECT_THROW(evaluate(s.ema_generator(), cfg, tiny_data()), std::invalid_argument);
}
