#include <gtest/gtest.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <set>

#include "pifield/data.hpp"

using namespace pifield;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("pifield_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

double ks_distance(std::vector<double> x, const std::function<double(double)>& cdf) {
  std::sort(x.begin(), x.end());
  const double n = double(x.size());
  double d = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double f = cdf(x[i]);
    d = std::max({d, f - double(i) / n, double(i + 1) / n - f});
  }
  return d;
}

}  // namespace

TEST(AnalyticRender, EmptySceneIsBackground) {
  RenderConfig cfg;
  cfg.width = cfg.height = 8;
  cfg.background = {0.1, 0.2, 0.3};
  auto img = analytic_render<double>(AnalyticScene{}, CameraPose{}, cfg);
  for (std::size_t i = 0; i < 64; ++i)
    for (int c = 0; c < 3; ++c) EXPECT_EQ(img.image[3 * i + c], cfg.background[c]);
}

TEST(AnalyticRender, OpaqueSphereFillsCenter) {
  AnalyticScene s;
  s.primitives.push_back({PrimitiveKind::sphere, {}, {0.09, 0.09, 0.09}, 1e4, {0.3, 0.6, 0.9}});
  RenderConfig cfg;
  cfg.width = cfg.height = 16;
  cfg.depth_extent = 0.5;
  auto img = analytic_render<double>(s, CameraPose{}, cfg);
  for (std::size_t i : {7u, 8u})
    for (std::size_t j : {7u, 8u}) {
      EXPECT_NEAR(img.image[(i * 16 + j) * 3 + 0], 0.3, 1e-12);
      EXPECT_NEAR(img.image[(i * 16 + j) * 3 + 2], 0.9, 1e-12);
      EXPECT_NEAR(img.depth[i * 16 + j], 1 - 0.09, 1e-3);
    }
  for (std::size_t idx : {0u, 15u, 240u, 255u})
    for (int c = 0; c < 3; ++c) EXPECT_EQ(img.image[idx * 3 + c], 1.0);
}

TEST(AnalyticRender, SegmentIntegralMatchesFineQuadrature) {
  // exact transmittance and depth of one homogeneous slab against a midpoint rule
  AnalyticScene s;
  s.primitives.push_back({PrimitiveKind::box, {0, 0, 0.1}, {0.5, 0.5, 0.2}, 3, {0.2, 0.4, 0.6}});
  const Ray r{{0, 0, 1}, {0, 0, -1}, 0.2, 1.8};
  auto exact = integrate_ray(s, r, {1, 1, 1});
  const int n = 200000;
  const double h = (r.tf - r.tn) / n;
  double trans = 1, c = 0, d = 0, acc = 0;
  for (int k = 0; k < n; ++k) {
    const double t = r.tn + (k + 0.5) * h;
    const double sg = s.at(r.o + t * r.d).first;
    const double w = trans * (1 - std::exp(-sg * h));
    c += w * 0.2;
    d += w * t;
    acc += w;
    trans *= std::exp(-sg * h);
  }
  EXPECT_NEAR(exact.acc, 1 - std::exp(-3 * 0.4), 1e-12);
  EXPECT_NEAR(exact.acc, acc, 1e-5);
  EXPECT_NEAR(exact.rgb[0], c + (1 - acc), 1e-5);
  EXPECT_NEAR(exact.depth, d / acc, 1e-5);
}

TEST(AnalyticRender, QuadratureConvergesToClosedForm) {
  const auto dist = pose_preset("celeba-like");
  DatasetSpec spec;
  auto cfg = dataset_render_config(spec);
  cfg.width = cfg.height = 8;
  cfg.hierarchical = false;
  std::vector<double> errors;
  for (std::size_t n : {16u, 64u, 256u, 1024u}) {
    cfg.samples = n;
    double err = 0;
    for (std::uint64_t id = 0; id < 4; ++id) {
      const auto scene = make_scene(11, id, scene_extent(dist));
      Rng rng(11, Stream::pose, id);
      const auto pose = sample_pose(dist, rng);
      const auto [tn, tf] = near_far(pose, cfg.depth_extent);
      const auto frame = CameraFrame::from_pose(pose);
      auto exact = analytic_render<double>(scene, frame, tn, tf, cfg);
      auto quad = render_field<double>(scene.field<double>(), frame, tn, tf, cfg, {id, 0});
      for (std::size_t i = 0; i < exact.image.size(); ++i)
        err += std::abs(exact.image[i] - quad.image[i]) / double(exact.image.size() * 4);
    }
    errors.push_back(err);
  }
  for (std::size_t i = 1; i < errors.size(); ++i) EXPECT_LT(errors[i], errors[i - 1]);
  EXPECT_LT(errors.back(), 1e-3);
}

TEST(Scenes, DeterministicAndValid) {
  for (std::uint64_t id = 0; id < 200; ++id) {
    const auto a = make_scene(3, id, 0.1), b = make_scene(3, id, 0.1);
    ASSERT_EQ(scene_to_json(a), scene_to_json(b));
    ASSERT_GE(a.primitives.size(), 1u);
    ASSERT_LE(a.primitives.size(), 3u);
    a.validate();
    for (const auto& p : a.primitives) {
      EXPECT_GE(p.sigma, 5);
      EXPECT_LE(p.sigma, 50);
      EXPECT_LE(norm(p.center) + p.bounding_radius(), 0.1 + 1e-12);
    }
  }
}

TEST(Scenes, OverlapRejected) {
  AnalyticScene s;
  s.primitives.push_back({PrimitiveKind::sphere, {}, {0.1, 0.1, 0.1}, 5, {}});
  s.primitives.push_back({PrimitiveKind::sphere, {0.15, 0, 0}, {0.1, 0.1, 0.1}, 5, {}});
  EXPECT_THROW(s.validate(), std::invalid_argument);
  EXPECT_THROW(integrate_ray(s, Ray{{-1, 0, 0}, {1, 0, 0}, 0, 2}, {1, 1, 1}), std::invalid_argument);
}

TEST(Scenes, JsonRoundTrip) {
  const auto a = make_scene(5, 1, 0.1);
  const auto b = scene_from_json(scene_to_json(a));
  ASSERT_EQ(a.primitives.size(), b.primitives.size());
  for (std::size_t i = 0; i < a.primitives.size(); ++i) {
    EXPECT_EQ(a.primitives[i].center, b.primitives[i].center);
    EXPECT_EQ(a.primitives[i].sigma, b.primitives[i].sigma);
  }
}

TEST(Dataset, SameSpecIsBitIdentical) {
  DatasetSpec spec;
  spec.count = 40;
  spec.resolution = 16;
  spec.seed = 9;
  auto a = make_procedural_dataset(spec), b = make_procedural_dataset(spec);
  ASSERT_EQ(a.size(), 40u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(bit_identical(a.images[i], b.images[i]));
    EXPECT_EQ(a.poses[i].yaw, b.poses[i].yaw);
  }
  spec.seed = 10;
  auto c = make_procedural_dataset(spec);
  EXPECT_FALSE(c.images[0] == a.images[0] && c.images[1] == a.images[1]);
}

TEST(Dataset, CarlaPitchIsAreaUniform) {
  DatasetSpec spec;
  spec.preset = "carla-like";
  spec.count = 4000;
  spec.resolution = 1;
  auto ds = make_procedural_dataset(spec);
  std::vector<double> pitch;
  for (const auto& p : ds.poses) {
    ASSERT_GE(p.pitch, 0.0);
    pitch.push_back(p.pitch);
    EXPECT_EQ(p.fov_deg, 30.0);
  }
  // area-uniform upper hemisphere: P(pitch <= x) = sin(x)
  EXPECT_LT(ks_distance(pitch, [](double x) { return std::sin(x); }), 1.628 / std::sqrt(4000.0));
  // and it is not uniform in angle
  EXPECT_GT(ks_distance(pitch, [](double x) { return x / (std::numbers::pi / 2); }), 1.628 / std::sqrt(4000.0));
}

TEST(Dataset, ThousandImagesUnderOneMinute) {
  DatasetSpec spec;
  spec.count = 1000;
  spec.resolution = 32;
  const auto t0 = std::chrono::steady_clock::now();
  auto ds = make_procedural_dataset(spec);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_EQ(ds.size(), 1000u);
  EXPECT_LT(secs, 60.0);
  std::set<std::size_t> ids(ds.scene_ids.begin(), ds.scene_ids.end());
  EXPECT_GT(ids.size(), 50u);
}

TEST(Dataset, RejectsBadSpecs) {
  DatasetSpec spec;
  spec.count = 0;
  EXPECT_THROW(make_procedural_dataset(spec), std::invalid_argument);
  spec.count = 1;
  spec.preset = "dogs-like";
  EXPECT_THROW(make_procedural_dataset(spec), std::invalid_argument);
}

TEST(Dataset, SaveLoadRoundTrip) {
  DatasetSpec spec;
  spec.count = 12;
  spec.resolution = 8;
  spec.preset = "cats-like";
  auto ds = make_procedural_dataset(spec);
  const auto dir = temp_dir("roundtrip");
  save_dataset(ds, dir);
  EXPECT_TRUE(fs::exists(dir / "images" / "00011.png"));
  auto back = load_dataset(dir, 8);
  ASSERT_EQ(back.size(), 12u);
  ASSERT_EQ(back.poses.size(), 12u);
  EXPECT_EQ(back.poses[3].pitch, ds.poses[3].pitch);
  EXPECT_EQ(back.scene_ids, ds.scene_ids);
  EXPECT_EQ(back.preset, "cats-like");
  for (std::size_t i = 0; i < 12; ++i) EXPECT_LE(max_abs_diff(back.images[i], ds.images[i]), 0.5f / 255 + 1e-6f);
  fs::remove_all(dir);
}

TEST(ImageFolder, CountsSkipsAndRejectsEmpty) {
  const auto dir = temp_dir("folder");
  EXPECT_THROW(load_image_folder(dir, 8), std::runtime_error);
  for (int i = 0; i < 5; ++i) io::write_png((dir / ("img" + std::to_string(i) + ".png")).string(), Tensor<float>(Shape{10, 12, 3}, 0.5f));
  std::ofstream(dir / "broken.png") << "not a png";
  auto ds = load_image_folder(dir, 8);
  EXPECT_EQ(ds.size(), 5u);
  fs::remove_all(dir);
}

TEST(ImageFolder, CenterCropOfWideImage) {
  // 200 wide x 100 tall: left and right quarters differ from the center
  Tensor<float> img(Shape{100, 200, 3}, 0.0f);
  for (std::size_t i = 0; i < 100; ++i)
    for (std::size_t j = 50; j < 150; ++j)
      for (int c = 0; c < 3; ++c) img[(i * 200 + j) * 3 + c] = 1.0f;
  auto full = center_crop_resize(img, 100);
  EXPECT_EQ(full.shape(), (Shape{100, 100, 3}));
  for (float v : full.data()) EXPECT_EQ(v, 1.0f);
  auto small = center_crop_resize(img, 7);
  for (float v : small.data()) EXPECT_NEAR(v, 1.0f, 1e-6f);
}

TEST(ImageFolder, ConstantImageStaysConstant) {
  Tensor<float> img(Shape{37, 53, 3});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = (i % 3 == 0) ? 0.25f : (i % 3 == 1 ? 0.5f : 0.75f);
  auto out = center_crop_resize(img, 16);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], img[i % 3], 1e-6f);
}

TEST(ImageFolder, AreaAverageOfTwoByTwo) {
  Tensor<float> img(Shape{4, 4, 3});
  for (std::size_t i = 0; i < 16; ++i) img[3 * i] = float(i);
  auto out = center_crop_resize(img, 2);
  EXPECT_NEAR(out[0], (0 + 1 + 4 + 5) / 4.0f, 1e-6f);
  EXPECT_NEAR(out[9], (10 + 11 + 14 + 15) / 4.0f, 1e-6f);
}

TEST(Shuffle, EpochIsPermutationAndReproducible) {
  std::set<std::size_t> seen;
  for (std::uint64_t n = 0; n < 50; ++n) {
    seen.insert(dataset_index(50, 4, n));
    EXPECT_EQ(dataset_index(50, 4, n), dataset_index(50, 4, n));
  }
  EXPECT_EQ(seen.size(), 50u);
  bool differs = false;
  for (std::uint64_t n = 0; n < 50; ++n) differs |= dataset_index(50, 4, n) != dataset_index(50, 4, n + 50);
  EXPECT_TRUE(differs);
}

TEST(Downsample, AveragesBlocks) {
  Tensor<double> img(Shape{4, 4, 3});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = double(i);
  auto d = downsample(img, 2);
  EXPECT_EQ(d.shape(), (Shape{2, 2, 3}));
  EXPECT_DOUBLE_EQ(d[0], (0 + 3 + 12 + 15) / 4.0);
  EXPECT_THROW(downsample(Tensor<double>(Shape{5, 4, 3}), 2), ShapeError);
}
