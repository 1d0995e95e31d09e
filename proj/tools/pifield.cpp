// pifield command-line interface.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "pifield/pifield.hpp"

namespace fs = std::filesystem;
using namespace pifield;

namespace {

// exit codes
constexpr int kOk = 0, kUsage = 1, kRuntime = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out;
  std::string ckpt;
};

std::string overrides_text(const std::vector<std::string>& sets) {
  std::string text;
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
    text += s.substr(0, eq) + " = " + s.substr(eq + 1) + "\n";
  }
  return text;
}

Config resolve(const Common& c, Config base = {}) {
  if (!c.config_path.empty()) base = load_config(c.config_path);
  return parse_config(overrides_text(c.sets), base);
}

void print_config(const Config& cfg) {
  std::cout << "# resolved configuration\n" << serialize_config(cfg) << "# end configuration\n" << std::flush;
}

fs::path out_dir(const Common& c) {
  if (c.out.empty()) throw UsageError("--out is required");
  return fs::path(c.out);
}

void add_common(CLI::App* cmd, Common& c, bool needs_ckpt) {
  cmd->add_option("--config", c.config_path, "Configuration file (key = value lines)")->check(CLI::ExistingFile);
  cmd->add_option("--set", c.sets, "Override a configuration key: --set key=value (repeatable)");
  cmd->add_option("--out", c.out, "Output directory; nothing is written elsewhere")->required();
  if (needs_ckpt) cmd->add_option("--ckpt", c.ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
}

CameraPose prior_center(const Config& cfg) { return cfg.train.pose.center(); }

RenderConfig eval_render(const Config& cfg, std::size_t res) {
  RenderConfig rc = cfg.train.render;
  rc.width = rc.height = res ? res : cfg.train.disc.top_resolution();
  rc.jitter = false;
  return rc;
}

std::size_t count_nonfinite(const Tensor<float>& t) {
  std::size_t n = 0;
  for (float v : t.data()) n += !std::isfinite(v);
  return n;
}
std::size_t count_nonfinite(const Tensor<double>& t) {
  std::size_t n = 0;
  for (double v : t.data()) n += !std::isfinite(v);
  return n;
}

template <class T>
Tensor<T> tile_grid(const std::vector<Tensor<T>>& imgs, std::size_t cols) {
  const std::size_t h = imgs[0].dim(0), w = imgs[0].dim(1);
  cols = std::min(cols, imgs.size());
  const std::size_t rows = (imgs.size() + cols - 1) / cols;
  Tensor<T> g(Shape{rows * h, cols * w, 3}, T(1));
  for (std::size_t k = 0; k < imgs.size(); ++k)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        for (int c = 0; c < 3; ++c) g[(((k / cols) * h + i) * cols * w + (k % cols) * w + j) * 3 + c] = imgs[k][(i * w + j) * 3 + c];
  return g;
}

std::string numbered(const std::string& stem, std::size_t i, const std::string& ext) {
  std::ostringstream os;
  os << stem << std::setw(3) << std::setfill('0') << i << ext;
  return os.str();
}

template <class S>
struct scalar_of;
template <class T>
struct scalar_of<TrainState<T>> {
  using type = T;
};

// Model and training keys are fixed once a checkpoint exists.
void reject_model_overrides(const std::vector<std::string>& sets) {
  for (const auto& s : sets)
    if (s.rfind("gen.", 0) == 0 || s.rfind("disc.", 0) == 0 || s.rfind("train.", 0) == 0)
      throw UsageError("cannot override '" + s.substr(0, s.find('=')) + "' for an existing checkpoint");
}

// Loads the checkpoint that `run` needs in the stored precision.
template <class F>
int with_checkpoint(const Common& c, Config& cfg, F&& run) {
  reject_model_overrides(c.sets);
  const auto header = read_checkpoint_header(c.ckpt);
  cfg = resolve(c, header.config);
  cfg.validate();
  print_config(cfg);
  if (header.width == 4) return run(load_checkpoint<float>(c.ckpt));
  return run(load_checkpoint<double>(c.ckpt));
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Common& c, const std::vector<std::string>& flags) {
  Config cfg = resolve(c);
  cfg = parse_config(overrides_text(flags), cfg);
  cfg.validate();
  print_config(cfg);
  const auto out = out_dir(c);
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset ds = make_procedural_dataset(cfg.data);
  save_dataset(ds, out);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << "wrote " << ds.size() << " images at " << ds.resolution << "x" << ds.resolution << " to " << out.string()
            << " in " << std::fixed << std::setprecision(1) << secs << " s\n";
  return kOk;
}

template <class T>
int run_training(TrainState<T> s, const Config& cfg, const Dataset& data, const fs::path& out, std::uint64_t until,
                 bool resumed) {
  fs::create_directories(out / "checkpoints");
  std::ofstream(out / "config.cfg") << serialize_config(cfg, true);
  std::ofstream metrics(out / "metrics.csv", resumed ? std::ios::app : std::ios::trunc);
  const std::uint64_t goal = std::min<std::uint64_t>(until ? until : cfg.train.iterations, cfg.train.iterations);
  const std::uint64_t report = std::max<std::uint64_t>(1, cfg.train.iterations / 100);
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
  std::size_t skipped = 0;
  train<T>(
      s, data, goal,
      [&](const StepMetrics& m) {
        metrics << m.csv() << '\n';
        skipped += m.skipped;
        if (m.iter % report == 0 || m.iter == goal)
          std::cerr << "iter " << m.iter << "/" << cfg.train.iterations << "  res " << cfg.train.disc.resolutions[m.stage]
                    << "  alpha " << std::setprecision(3) << m.alpha << "  L_D " << m.loss_d << "  L_G " << m.loss_g
                    << "  " << std::fixed << std::setprecision(0) << elapsed() << " s" << std::defaultfloat << "\n";
      },
      [&](const TrainState<T>& st) {
        metrics.flush();
        std::ostringstream name;
        name << "iter_" << std::setw(7) << std::setfill('0') << st.iter << ".pifd";
        const auto p = out / "checkpoints" / name.str();
        save_checkpoint(st, cfg, p);
        fs::copy_file(p, out / "checkpoint.pifd", fs::copy_options::overwrite_existing);
      });
  std::cout << "trained to iteration " << s.iter << " in " << std::fixed << std::setprecision(1) << elapsed()
            << " s; skipped steps " << skipped << "; checkpoint " << (out / "checkpoint.pifd").string() << "\n";
  return kOk;
}

int cmd_train(const Common& c, const std::string& data_dir, const std::string& resume, std::uint64_t until) {
  const auto out = out_dir(c);
  if (!resume.empty()) {
    if (!fs::exists(resume)) throw UsageError("checkpoint not found: " + resume);
    reject_model_overrides(c.sets);
    const auto header = read_checkpoint_header(resume);
    Config cfg = resolve(Common{"", c.sets, c.out, ""}, header.config);
    if (!data_dir.empty()) cfg.data_dir = data_dir;
    cfg.validate();
    print_config(cfg);
    if (!fs::exists(cfg.data_dir)) throw UsageError("dataset not found: " + cfg.data_dir);
    const Dataset data = load_dataset(cfg.data_dir, cfg.train.disc.top_resolution());
    if (header.width == 4) return run_training(load_checkpoint<float>(resume), cfg, data, out, until, true);
    return run_training(load_checkpoint<double>(resume), cfg, data, out, until, true);
  }
  Config cfg = resolve(c);
  if (!data_dir.empty()) cfg.data_dir = data_dir;
  cfg.validate();
  print_config(cfg);
  if (!fs::exists(cfg.data_dir)) throw UsageError("dataset not found: " + cfg.data_dir);
  const Dataset data = load_dataset(cfg.data_dir, cfg.train.disc.top_resolution());
  if (cfg.precision == "double") return run_training(TrainState<double>::create(cfg.train), cfg, data, out, until, false);
  return run_training(TrainState<float>::create(cfg.train), cfg, data, out, until, false);
}

struct PoseFlags {
  double pitch = NAN, yaw = NAN, radius = NAN, fov = NAN;
  CameraPose apply(CameraPose p) const {
    if (!std::isnan(pitch)) p.pitch = pitch;
    if (!std::isnan(yaw)) p.yaw = yaw;
    if (!std::isnan(radius)) p.radius = radius;
    if (!std::isnan(fov)) p.fov_deg = fov;
    return p;
  }
};

void add_pose_flags(CLI::App* cmd, PoseFlags& p, const std::string& prefix = "") {
  cmd->add_option("--" + prefix + "pitch", p.pitch, "Camera pitch (rad); default: prior center");
  cmd->add_option("--" + prefix + "yaw", p.yaw, "Camera yaw (rad); default: prior center");
  cmd->add_option("--" + prefix + "radius", p.radius, "Camera distance; default: prior radius");
  cmd->add_option("--" + prefix + "fov", p.fov, "Field of view (degrees); default: prior fov");
}

template <class T>
Film<T> film_for(const Generator<T>& gen, std::uint64_t seed, double psi, const Config& cfg) {
  auto film = gen.map_latent(sample_latent<T>(gen.cfg.z_dim, seed, 0));
  if (psi != 1.0) film = truncate_film(film, average_film(gen, cfg.invert.average_count, 0), psi);
  return film;
}

int cmd_sample(const Common& c, std::vector<std::uint64_t> seeds, std::size_t res, double psi, const PoseFlags& pf) {
  const auto out = out_dir(c);
  Config cfg;
  return with_checkpoint(c, cfg, [&](const auto& s) {
    const auto gen = s.ema_generator();
    using T = typename scalar_of<std::remove_cvref_t<decltype(s)>>::type;
    fs::create_directories(out);
    const auto pose = pf.apply(prior_center(cfg));
    const auto rc = eval_render(cfg, res);
    std::vector<Tensor<T>> imgs;
    for (auto seed : seeds) {
      imgs.push_back(render(gen, film_for(gen, seed, psi, cfg), pose, rc, RenderKey{seed, 0}).image);
      io::write_png((out / ("sample_" + std::to_string(seed) + ".png")).string(), imgs.back());
    }
    io::write_png((out / "grid.png").string(), tile_grid(imgs, 8));
    std::cout << "wrote " << imgs.size() << " samples and grid.png to " << out.string() << "\n";
    return kOk;
  });
}

int cmd_sweep(const Common& c, std::uint64_t seed, std::size_t frames, std::size_t res, double psi, const PoseFlags& from,
              const PoseFlags& to) {
  const auto out = out_dir(c);
  Config cfg;
  return with_checkpoint(c, cfg, [&](const auto& s) {
    const auto gen = s.ema_generator();
    fs::create_directories(out);
    const auto base = prior_center(cfg);
    const auto film = film_for(gen, seed, psi, cfg);
    const auto rc = eval_render(cfg, res);
    std::size_t bad = 0;
    const auto poses = pose_sweep(from.apply(base), to.apply(base), frames);
    for (std::size_t i = 0; i < poses.size(); ++i) {
      const auto img = render(gen, film, poses[i], rc, RenderKey{seed, 0}).image;
      bad += count_nonfinite(img);
      io::write_png((out / numbered("frame_", i, ".png")).string(), img);
    }
    std::cout << "wrote " << poses.size() << " frames to " << out.string() << "; non-finite pixels: " << bad << "\n";
    return bad ? kRuntime : kOk;
  });
}

int cmd_extract_mesh(const Common& c, std::vector<std::uint64_t> seeds, bool from_depth, std::size_t res,
                     const PoseFlags& pf) {
  const auto out = out_dir(c);
  Config cfg;
  return with_checkpoint(c, cfg, [&](const auto& s) {
    const auto gen = s.ema_generator();
    fs::create_directories(out);
    const double b = cfg.mesh.bound > 0 ? cfg.mesh.bound : 1.2 * scene_extent(cfg.train.pose);
    for (auto seed : seeds) {
      const auto film = film_for(gen, seed, 1.0, cfg);
      Mesh m;
      if (from_depth) {
        const auto pose = pf.apply(prior_center(cfg));
        const auto r = render(gen, film, pose, eval_render(cfg, res), RenderKey{seed, 0});
        m = depth_to_mesh(r.depth, r.acc, pose, DepthMeshOptions{cfg.mesh.min_acc, cfg.mesh.depth_jump});
      } else {
        const auto grid = sample_density_grid(gen, film, Vec3{-b, -b, -b}, Vec3{b, b, b}, cfg.mesh.res);
        m = marching_cubes(grid, MarchingCubesOptions{cfg.mesh.iso, true});
      }
      const auto path = out / ("mesh_" + std::to_string(seed) + ".obj");
      write_obj(path.string(), m);
      std::cout << path.filename().string() << ": " << m.vertices.size() << " vertices, " << m.faces.size()
                << " faces, closed " << (m.is_closed() ? "yes" : "no") << ", euler " << m.euler_characteristic() << "\n";
    }
    return kOk;
  });
}

int cmd_invert(const Common& c, const std::string& target_png, long target_seed, std::size_t res, std::size_t views,
               const PoseFlags& pf) {
  const auto out = out_dir(c);
  if (target_png.empty() == (target_seed < 0)) throw UsageError("give exactly one of --target and --target-seed");
  Config cfg;
  return with_checkpoint(c, cfg, [&](const auto& s) {
    const auto gen = s.ema_generator();
    using T = typename scalar_of<std::remove_cvref_t<decltype(s)>>::type;
    fs::create_directories(out);
    const auto pose = pf.apply(prior_center(cfg));
    auto rc = eval_render(cfg, res);
    Tensor<T> target;
    if (!target_png.empty()) {
      target = Tensor<T>::cast(center_crop_resize(io::read_png(target_png), rc.width));
    } else {
      target = render(gen, gen.map_latent(sample_latent<T>(gen.cfg.z_dim, std::uint64_t(target_seed), 0)), pose, rc,
                      RenderKey{std::uint64_t(target_seed), 0})
                   .image;
    }
    const auto before = gen;
    const auto avg = average_film(gen, cfg.invert.average_count, 0);
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = invert(gen, target, pose, rc, RenderKey{0, 0}, cfg.invert, avg, avg);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    io::write_png((out / "target.png").string(), target);
    io::write_png((out / "reconstruction.png").string(), render(gen, r.film, pose, rc, RenderKey{0, 0}).image);
    std::ofstream log(out / "loss.csv");
    log << "iter,loss,mse\n" << std::setprecision(9);
    for (std::size_t i = 0; i < r.loss.size(); ++i) log << i << ',' << r.loss[i] << ',' << r.mse[i] << '\n';
    for (std::size_t v = 0; v < views; ++v) {
      CameraPose p = pose;
      p.yaw += views == 1 ? 0.0 : -0.5 + double(v) / double(views - 1);
      io::write_png((out / numbered("view_", v, ".png")).string(), render(gen, r.film, p, rc, RenderKey{0, 0}).image);
    }
    const bool untouched = before.field == gen.field && before.mapping == gen.mapping;
    std::cout << "inversion: " << r.loss.size() << " iterations in " << std::fixed << std::setprecision(1) << secs
              << " s, final mse " << std::scientific << r.final_mse << std::fixed << ", psnr " << std::setprecision(2)
              << r.psnr() << " dB, generator unchanged: " << (untouched ? "yes" : "no") << "\n";
    return untouched ? kOk : kRuntime;
  });
}

int cmd_interpolate(const Common& c, std::uint64_t a, std::uint64_t b, std::size_t steps, double psi, std::size_t res,
                    const PoseFlags& pf) {
  const auto out = out_dir(c);
  if (steps < 2) throw UsageError("--steps must be >= 2");
  Config cfg;
  return with_checkpoint(c, cfg, [&](const auto& s) {
    const auto gen = s.ema_generator();
    fs::create_directories(out);
    const auto fa = film_for(gen, a, psi, cfg), fb = film_for(gen, b, psi, cfg);
    const auto pose = pf.apply(prior_center(cfg));
    const auto rc = eval_render(cfg, res);
    for (std::size_t i = 0; i < steps; ++i) {
      const auto f = interpolate_film(fa, fb, double(i) / double(steps - 1));
      io::write_png((out / numbered("frame_", i, ".png")).string(), render(gen, f, pose, rc, RenderKey{a, 0}).image);
    }
    std::cout << "wrote " << steps << " frames to " << out.string() << "\n";
    return kOk;
  });
}

int cmd_eval(const Common& c, const std::string& data_dir, bool untrained) {
  const auto out = out_dir(c);
  Config cfg;
  return with_checkpoint(c, cfg, [&](const auto& s) {
    using S = std::remove_cvref_t<decltype(s)>;
    const std::string dir = data_dir.empty() ? cfg.data_dir : data_dir;
    if (!fs::exists(dir)) throw UsageError("dataset not found: " + dir);
    const Dataset data = load_dataset(dir, cfg.train.disc.top_resolution());
    const auto gen = untrained ? S::create(s.cfg).ema_generator() : s.ema_generator();
    const auto report = evaluate(gen, cfg, data);
    fs::create_directories(out);
    std::ofstream(out / "report.txt") << (untrained ? "model: untrained initialization\n" : "model: moving-average weights\n")
                                      << report.text();
    std::cout << report.text();
    return kOk;
  });
}

}  // namespace

int main(int argc, char** argv) {
  pifield::tune_allocator();
  CLI::App app{"pifield: periodic implicit radiance-field GAN toolkit"};
  app.require_subcommand(1);
  Common common;

  auto* gen_data = app.add_subcommand("gen-data", "Generate a procedural multi-view dataset");
  add_common(gen_data, common, false);
  std::string preset;
  long count = -1, res_data = -1, seed_data = -1, scenes = -1;
  gen_data->add_option("--preset", preset, "Pose preset: celeba-like | cats-like | carla-like");
  gen_data->add_option("--count", count, "Number of images");
  gen_data->add_option("--res", res_data, "Image resolution");
  gen_data->add_option("--seed", seed_data, "Dataset seed");
  gen_data->add_option("--scenes", scenes, "Distinct scenes (0: count / 10)");

  auto* train_cmd = app.add_subcommand("train", "Train from a configuration");
  add_common(train_cmd, common, false);
  std::string data_dir, resume;
  std::uint64_t until = 0;
  train_cmd->add_option("--data", data_dir, "Dataset directory (overrides data.dir)");
  train_cmd->add_option("--resume", resume, "Continue from this checkpoint");
  train_cmd->add_option("--until", until, "Stop after this iteration (0: run the full schedule)");

  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4, 5, 6, 7};
  std::size_t res = 0;
  double psi = 1.0;
  PoseFlags pose, from, to;

  auto* sample = app.add_subcommand("sample", "Render samples for given seeds");
  add_common(sample, common, true);
  sample->add_option("--seeds", seeds, "Latent seeds")->delimiter(',');
  sample->add_option("--res", res, "Output resolution (default: final training resolution)");
  sample->add_option("--psi", psi, "Truncation toward the average conditioning (1: none)");
  add_pose_flags(sample, pose);

  auto* sweep = app.add_subcommand("sweep", "Render one latent along a camera trajectory");
  add_common(sweep, common, true);
  std::uint64_t seed = 0;
  std::size_t frames = 16;
  from.yaw = -std::numbers::pi / 2;
  to.yaw = std::numbers::pi / 2;
  sweep->add_option("--seed", seed, "Latent seed");
  sweep->add_option("--frames", frames, "Number of frames");
  sweep->add_option("--res", res, "Output resolution");
  sweep->add_option("--psi", psi, "Truncation (1: none)");
  add_pose_flags(sweep, from, "from-");
  add_pose_flags(sweep, to, "to-");

  auto* mesh = app.add_subcommand("extract-mesh", "Extract meshes by marching cubes or from a depth map");
  add_common(mesh, common, true);
  std::vector<std::uint64_t> mesh_seeds{0};
  bool from_depth = false;
  mesh->add_option("--seeds", mesh_seeds, "Latent seeds")->delimiter(',');
  mesh->add_flag("--depth", from_depth, "Mesh the depth map of one view instead of the density grid");
  mesh->add_option("--res", res, "Depth-map resolution (with --depth)");
  add_pose_flags(mesh, pose);

  auto* inv = app.add_subcommand("invert", "Fit the conditioning to a target image and render novel views");
  add_common(inv, common, true);
  std::string target;
  long target_seed = -1;
  std::size_t views = 5;
  inv->add_option("--target", target, "Target PNG")->check(CLI::ExistingFile);
  inv->add_option("--target-seed", target_seed, "Use a generated image of this seed as the target");
  inv->add_option("--res", res, "Working resolution");
  inv->add_option("--views", views, "Novel views to render from the result");
  add_pose_flags(inv, pose);

  auto* interp = app.add_subcommand("interpolate", "Interpolate between two latents' conditionings");
  add_common(interp, common, true);
  std::uint64_t seed_a = 0, seed_b = 1;
  std::size_t steps = 8;
  interp->add_option("--seed-a", seed_a, "First latent seed");
  interp->add_option("--seed-b", seed_b, "Second latent seed");
  interp->add_option("--steps", steps, "Frames including both ends");
  interp->add_option("--psi", psi, "Truncation (1: none)");
  interp->add_option("--res", res, "Output resolution");
  add_pose_flags(interp, pose);

  auto* eval = app.add_subcommand("eval", "Proxy metrics against a dataset");
  add_common(eval, common, true);
  bool untrained = false;
  eval->add_option("--data", data_dir, "Dataset directory (default: data.dir of the checkpoint)");
  eval->add_flag("--untrained", untrained, "Evaluate the initialization of the checkpoint's config instead");

  auto* config = app.add_subcommand("config", "Print the resolved configuration with key descriptions");
  config->add_option("--config", common.config_path, "Configuration file")->check(CLI::ExistingFile);
  config->add_option("--set", common.sets, "Override a key: --set key=value");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    if (*gen_data) {
      std::vector<std::string> flags;
      if (!preset.empty()) flags.push_back("data.preset=" + preset);
      if (count >= 0) flags.push_back("data.count=" + std::to_string(count));
      if (res_data >= 0) flags.push_back("data.res=" + std::to_string(res_data));
      if (seed_data >= 0) flags.push_back("data.seed=" + std::to_string(seed_data));
      if (scenes >= 0) flags.push_back("data.scenes=" + std::to_string(scenes));
      return cmd_gen_data(common, flags);
    }
    if (*train_cmd) return cmd_train(common, data_dir, resume, until);
    if (*sample) return cmd_sample(common, seeds, res, psi, pose);
    if (*sweep) return cmd_sweep(common, seed, frames, res, psi, from, to);
    if (*mesh) return cmd_extract_mesh(common, mesh_seeds, from_depth, res, pose);
    if (*inv) return cmd_invert(common, target, target_seed, res, views, pose);
    if (*interp) return cmd_interpolate(common, seed_a, seed_b, steps, psi, res, pose);
    if (*eval) return cmd_eval(common, data_dir, untrained);
    if (*config) {
      const Config cfg = resolve(common);
      cfg.validate();
      std::cout << serialize_config(cfg, true);
      return kOk;
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
