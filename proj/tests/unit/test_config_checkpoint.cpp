#include <gtest/gtest.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "pifield/checkpoint.hpp"
#include "pifield/config.hpp"
#include "tiny.hpp"

using namespace pifield;
using namespace pifield::testing;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("pifield_ckpt_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                        "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& b) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f.write(b.data(), std::streamsize(b.size()));
}

void refresh_crc(std::string& b) {
  const std::uint32_t c = std::uint32_t(::crc32(0, reinterpret_cast<const Bytef*>(b.data()), uInt(b.size() - 4)));
  for (int i = 0; i < 4; ++i) b[b.size() - 4 + i] = char(std::uint8_t(c >> (8 * i)));
}

Config tiny_full_config() {
  Config c;
  c.train = tiny_config();
  c.precision = "double";
  return c;
}

template <class T>
void expect_identical(const TrainState<T>& a, const TrainState<T>& b) {
  EXPECT_EQ(a.gen.field, b.gen.field);
  EXPECT_EQ(a.gen.mapping, b.gen.mapping);
  EXPECT_EQ(a.disc.params, b.disc.params);
  for (auto [x, y] : {std::pair{&a.opt_field, &b.opt_field}, std::pair{&a.opt_mapping, &b.opt_mapping},
                      std::pair{&a.opt_disc, &b.opt_disc}}) {
    EXPECT_EQ(x->m, y->m);
    EXPECT_EQ(x->v, y->v);
    EXPECT_EQ(x->step, y->step);
    EXPECT_EQ(x->skipped, y->skipped);
    EXPECT_EQ(std::bit_cast<std::uint64_t>(x->lr), std::bit_cast<std::uint64_t>(y->lr));
    EXPECT_EQ(x->beta1, y->beta1);
    EXPECT_EQ(x->beta2, y->beta2);
    EXPECT_EQ(x->eps, y->eps);
  }
  EXPECT_EQ(a.ema_field.shadow, b.ema_field.shadow);
  EXPECT_EQ(a.ema_mapping.shadow, b.ema_mapping.shadow);
  EXPECT_EQ(a.ema_field.decay, b.ema_field.decay);
  EXPECT_EQ(a.iter, b.iter);
  EXPECT_EQ(a.samples_consumed, b.samples_consumed);
  EXPECT_EQ(a.disc.stage, b.disc.stage);
  EXPECT_EQ(std::bit_cast<std::uint64_t>(a.disc.alpha), std::bit_cast<std::uint64_t>(b.disc.alpha));
  EXPECT_EQ(a.disc.fade_step, b.disc.fade_step);
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

TEST(Config, KeysSortedUniqueAndDocumented) {
  const auto& keys = config_keys();
  ASSERT_GT(keys.size(), 60u);
  for (std::size_t i = 0; i < keys.size(); ++i) {
    EXPECT_FALSE(keys[i].doc.empty()) << keys[i].name;
    if (i) {
      EXPECT_LT(keys[i - 1].name, keys[i].name);
    }
  }
}

TEST(Config, DefaultsRoundTrip) {
  const Config c;
  const auto text = serialize_config(c);
  EXPECT_EQ(serialize_config(parse_config(text)), text);
  EXPECT_EQ(serialize_config(parse_config(serialize_config(c, true))), text);
}

TEST(Config, EditedValuesRoundTripExactly) {
  Config c;
  c.train.lr_g = 0.1 + 0.2;
  c.train.r1_lambda = 1e-300;
  c.train.gen.freq_offset = -std::numbers::pi;
  c.train.stage_fractions = {1.0 / 3, 1.0 / 3, 1.0 / 3};
  c.train.disc.resolutions = {8, 16, 32};
  c.train.render.background = {0.25, 1.0 / 7, 0};
  c.train.render.hierarchical = false;
  c.train.gen.activation = ops::Activation::relu;
  c.train.gen.conditioning = Conditioning::concat;
  c.train.pose_preset_name = "custom";
  c.train.pose.kind = PoseKind::uniform;
  c.train.seed = std::numeric_limits<std::uint64_t>::max();
  c.data_dir = "some/dir with spaces";
  const auto back = parse_config(serialize_config(c));
  EXPECT_EQ(serialize_config(back), serialize_config(c));
  EXPECT_EQ(back.train.lr_g, 0.1 + 0.2);
  EXPECT_EQ(back.train.r1_lambda, 1e-300);
  EXPECT_EQ(back.train.stage_fractions, c.train.stage_fractions);
  EXPECT_EQ(back.train.render.background, c.train.render.background);
  EXPECT_EQ(back.train.seed, c.train.seed);
  EXPECT_EQ(back.data_dir, c.data_dir);
  EXPECT_EQ(back.train.gen.conditioning, Conditioning::concat);
}

TEST(Config, CommentsAndWhitespace) {
  const auto c = parse_config("# header\n\n  gen.width   =  32   # trailing\n\t train.iterations=7\n");
  EXPECT_EQ(c.train.gen.width, 32u);
  EXPECT_EQ(c.train.iterations, 7u);
}

TEST(Config, PresetAppliesBeforeOtherPoseKeys) {
  const auto c = parse_config("pose.fov = 20\npose.preset = carla-like\n");
  EXPECT_EQ(c.train.pose.kind, PoseKind::hemisphere);
  EXPECT_EQ(c.train.pose.fov_deg, 20);
  EXPECT_EQ(c.train.pose_preset_name, "carla-like");
  const auto d = parse_config("pose.preset = cats-like\n");
  EXPECT_EQ(d.train.pose.kind, PoseKind::uniform);
  EXPECT_EQ(d.train.pose.yaw_max, 0.75);
}

TEST(Config, RejectsBadInput) {
  EXPECT_THROW(parse_config("gen.widht = 3\n"), ConfigError);
  EXPECT_THROW(parse_config("gen.width\n"), ConfigError);
  EXPECT_THROW(parse_config("gen.width = 3\ngen.width = 4\n"), ConfigError);
  EXPECT_THROW(parse_config("gen.width = -3\n"), ConfigError);
  EXPECT_THROW(parse_config("gen.width = 3.5\n"), ConfigError);
  EXPECT_THROW(parse_config("train.lr_g = fast\n"), ConfigError);
  EXPECT_THROW(parse_config("train.lr_g = nan\n"), ConfigError);
  EXPECT_THROW(parse_config("render.jitter = yes\n"), ConfigError);
  EXPECT_THROW(parse_config("render.background = 1, 1\n"), ConfigError);
  EXPECT_THROW(parse_config("disc.resolutions = 32, , 64\n"), ConfigError);
  EXPECT_THROW(parse_config("gen.activation = tanh\n"), ConfigError);
  EXPECT_THROW(parse_config("pose.preset = dogs-like\n"), ConfigError);
}

TEST(Config, ValidationCatchesInconsistentValues) {
  auto c = parse_config("disc.resolutions = 16, 32\n");
  EXPECT_THROW(c.validate(), std::invalid_argument);  // three stage fractions for two stages
  c = parse_config("disc.resolutions = 16, 32\ntrain.stage_fractions = 0.5, 0.5\n");
  EXPECT_NO_THROW(c.validate());
  c.precision = "half";
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Config, ShippedConfigsValidate) {
  for (const char* name : {"toy.cfg", "smoke.cfg"}) {
    const auto c = load_config(std::string(PIFIELD_SOURCE_DIR) + "/configs/" + name);
    EXPECT_NO_THROW(c.validate()) << name;
    EXPECT_EQ(c.data.resolution, c.train.disc.top_resolution()) << name;
  }
}

// ---------------------------------------------------------------------------
// Checkpoint

TEST(Checkpoint, RoundTripIsBitExactDouble) {
  TempDir dir;
  auto s = TrainState<double>::create(tiny_config());
  for (int i = 0; i < 6; ++i) train_step(s, tiny_data());  // crosses the stage boundary, mid-fade
  save_checkpoint(s, tiny_full_config(), dir.path / "a.pifd");
  Config cfg;
  const auto back = load_checkpoint<double>(dir.path / "a.pifd", &cfg);
  expect_identical(s, back);
  EXPECT_EQ(serialize_config(cfg), serialize_config(tiny_full_config()));
  EXPECT_EQ(read_checkpoint_header(dir.path / "a.pifd").width, 8u);
}

TEST(Checkpoint, RoundTripIsBitExactFloat) {
  TempDir dir;
  auto s = TrainState<float>::create(tiny_config());
  for (int i = 0; i < 3; ++i) train_step(s, tiny_data());
  save_checkpoint(s, tiny_full_config(), dir.path / "f.pifd");
  const auto h = read_checkpoint_header(dir.path / "f.pifd");
  EXPECT_EQ(h.width, 4u);
  EXPECT_EQ(h.config.precision, "float");
  expect_identical(s, load_checkpoint<float>(dir.path / "f.pifd"));
  EXPECT_THROW(load_checkpoint<double>(dir.path / "f.pifd"), CheckpointError);
}

TEST(Checkpoint, ResumeMatchesUninterruptedRun) {
  TempDir dir;
  auto straight = TrainState<double>::create(tiny_config());
  for (int i = 0; i < 8; ++i) train_step(straight, tiny_data());

  auto first = TrainState<double>::create(tiny_config());
  for (int i = 0; i < 4; ++i) train_step(first, tiny_data());
  save_checkpoint(first, tiny_full_config(), dir.path / "mid.pifd");
  auto resumed = load_checkpoint<double>(dir.path / "mid.pifd");
  for (int i = 0; i < 4; ++i) train_step(resumed, tiny_data());
  expect_identical(straight, resumed);
}

TEST(Checkpoint, CorruptionIsDetected) {
  TempDir dir;
  auto s = TrainState<float>::create(tiny_config());
  const auto p = dir.path / "c.pifd";
  save_checkpoint(s, tiny_full_config(), p);
  const std::string good = slurp(p);
  for (std::size_t pos : {std::size_t(9), good.size() / 2, good.size() - 10, good.size() - 1}) {
    auto bad = good;
    bad[pos] = char(bad[pos] ^ 0x10);
    spit(p, bad);
    EXPECT_THROW(load_checkpoint<float>(p), CheckpointError) << "flipped byte " << pos;
  }
  spit(p, good.substr(0, good.size() - 100));
  EXPECT_THROW(load_checkpoint<float>(p), CheckpointError);
  spit(p, "");
  EXPECT_THROW(load_checkpoint<float>(p), CheckpointError);
  auto magic = good;
  magic[0] = 'X';
  refresh_crc(magic);
  spit(p, magic);
  EXPECT_THROW(load_checkpoint<float>(p), CheckpointError);
  EXPECT_THROW(load_checkpoint<float>(dir.path / "missing.pifd"), CheckpointError);
}

TEST(Checkpoint, NewerVersionRejectedOlderFieldsChecked) {
  TempDir dir;
  auto s = TrainState<float>::create(tiny_config());
  const auto p = dir.path / "v.pifd";
  save_checkpoint(s, tiny_full_config(), p);
  auto b = slurp(p);
  b[4] = char(kCheckpointVersion + 1);
  refresh_crc(b);
  spit(p, b);
  try {
    load_checkpoint<float>(p);
    FAIL() << "newer version accepted";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("newer"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, OptimizerHyperparametersComeBackFromTheSnapshot) {
  TempDir dir;
  auto c = tiny_config();
  c.adam_beta1 = 0.25;
  c.adam_beta2 = 0.75;
  auto s = TrainState<double>::create(c);
  train_step(s, tiny_data());
  Config full;
  full.train = c;
  save_checkpoint(s, full, dir.path / "b.pifd");
  const auto back = load_checkpoint<double>(dir.path / "b.pifd");
  EXPECT_EQ(back.opt_disc.beta1, 0.25);
  EXPECT_EQ(back.opt_field.beta2, 0.75);
  EXPECT_EQ(back.cfg.adam_beta1, 0.25);
}
