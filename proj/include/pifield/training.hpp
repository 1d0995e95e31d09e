#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "pifield/core/log.hpp"
#include "pifield/core/optim.hpp"
#include "pifield/core/parallel.hpp"
#include "pifield/data.hpp"
#include "pifield/discriminator.hpp"
#include "pifield/generator.hpp"
#include "pifield/renderer.hpp"

namespace pifield {

/// f(u) = -log(1 + exp(-u)), evaluated without overflow.
inline double log_sigmoid(double u) { return u < 0 ? u - std::log1p(std::exp(u)) : -std::log1p(std::exp(-u)); }

struct GanLosses {
  double d = 0, g = 0;
};

/// L_D = mean softplus(-D_real) + mean softplus(D_fake) + lambda * r1,
/// L_G = mean softplus(-D_fake). Non-finite scores throw.
inline GanLosses gan_losses(const std::vector<double>& d_real, const std::vector<double>& d_fake, double r1,
                            double lambda) {
  GanLosses l;
  for (double s : d_real) {
    if (!std::isfinite(s)) throw std::runtime_error("gan_losses: non-finite real score");
    l.d -= log_sigmoid(s) / double(d_real.size());
  }
  for (double s : d_fake) {
    if (!std::isfinite(s)) throw std::runtime_error("gan_losses: non-finite fake score");
    l.d -= log_sigmoid(-s) / double(d_fake.size());
    l.g -= log_sigmoid(s) / double(d_fake.size());
  }
  l.d += lambda * r1;
  return l;
}

/// Linear decay from `init` at iteration 0 to `final` at `total`.
inline double lr_schedule(std::uint64_t iter, double init, double final, std::uint64_t total) {
  if (total == 0) return final;
  const double t = std::min(1.0, double(iter) / double(total));
  return init + (final - init) * t;
}

struct TrainConfig {
  GeneratorConfig gen;
  DiscriminatorConfig disc;
  RenderConfig render;  // resolution is set per stage
  PoseDistribution pose = pose_preset("celeba-like");
  std::string pose_preset_name = "celeba-like";

  double lr_g = 5e-5, lr_g_final = 1e-5;
  double lr_d = 4e-4, lr_d_final = 1e-4;
  double mapping_lr_mult = 0.05;
  double adam_beta1 = 0, adam_beta2 = 0.9;
  double r1_lambda = 1;
  double ema_decay = 0.999;

  std::uint64_t iterations = 3000;
  std::vector<double> stage_fractions{0.4, 0.3, 0.3};
  std::size_t batch_initial = 120, batch_divisor = 4, min_effective_batch = 12;
  std::uint64_t seed = 0;
  std::uint64_t checkpoint_every = 0;  // 0: only at stage boundaries and the end

  std::size_t stages() const { return disc.resolutions.size(); }

  /// Per-item batch at a stage: the initial batch divided once per upsample.
  std::size_t micro_batch(std::size_t stage) const {
    std::size_t b = batch_initial;
    for (std::size_t s = 0; s < stage; ++s) b /= batch_divisor;
    return std::max<std::size_t>(1, b);
  }
  std::size_t accumulation(std::size_t stage) const {
    const std::size_t m = micro_batch(stage);
    return m >= min_effective_batch ? 1 : (min_effective_batch + m - 1) / m;
  }
  std::size_t effective_batch(std::size_t stage) const { return micro_batch(stage) * accumulation(stage); }

  /// First iteration of each stage after the first.
  std::vector<std::uint64_t> stage_starts() const {
    std::vector<std::uint64_t> s;
    double acc = 0;
    for (std::size_t i = 0; i + 1 < stage_fractions.size(); ++i) {
      acc += stage_fractions[i];
      s.push_back(std::uint64_t(std::llround(acc * double(iterations))));
    }
    return s;
  }

  void validate() const {
    gen.validate();
    disc.validate();
    pose.validate();
    if (!(lr_g > 0 && lr_g_final > 0 && lr_d > 0 && lr_d_final > 0 && mapping_lr_mult > 0))
      throw std::invalid_argument("train: learning rates must be > 0");
    if (r1_lambda < 0) throw std::invalid_argument("train: r1 weight must be >= 0");
    if (!(ema_decay >= 0 && ema_decay <= 1)) throw std::invalid_argument("train: ema decay must lie in [0, 1]");
    if (batch_initial < 1 || batch_divisor < 1 || min_effective_batch < 1)
      throw std::invalid_argument("train: batch sizes must be >= 1");
    if (stage_fractions.size() != stages())
      throw std::invalid_argument("train: " + std::to_string(stage_fractions.size()) + " stage fractions for " +
                                  std::to_string(stages()) + " discriminator stages");
    double sum = 0;
    for (double f : stage_fractions) {
      if (f < 0) throw std::invalid_argument("train: stage fractions must be >= 0");
      sum += f;
    }
    if (std::abs(sum - 1) > 1e-9) throw std::invalid_argument("train: stage fractions must sum to 1");
    RenderConfig rc = render;
    rc.width = rc.height = disc.resolutions[0];
    rc.validate();
  }
};

struct StepMetrics {
  std::uint64_t iter = 0;
  std::size_t stage = 0;
  double alpha = 1, loss_d = 0, loss_g = 0, r1 = 0, lr_g = 0, lr_d = 0;
  bool skipped = false;

  std::string csv() const {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%llu,%zu,%.6f,%.9g,%.9g,%.9g,%.9g,%.9g", (unsigned long long)iter, stage, alpha,
                  loss_d, loss_g, r1, lr_g, lr_d);
    return buf;
  }
};

template <class T>
struct TrainState {
  TrainConfig cfg;
  Generator<T> gen;
  Discriminator<T> disc;
  AdamState<T> opt_field, opt_mapping, opt_disc;
  EmaState<T> ema_field, ema_mapping;
  std::uint64_t iter = 0;
  std::uint64_t samples_consumed = 0;  // position in the shuffled real-image stream

  static TrainState create(const TrainConfig& c) {
    c.validate();
    TrainState s;
    s.cfg = c;
    s.gen = Generator<T>::create(c.gen, c.seed);
    s.disc = Discriminator<T>::create(c.disc, c.seed);
    s.opt_field = AdamState<T>(s.gen.field, c.lr_g, c.adam_beta1, c.adam_beta2);
    s.opt_mapping = AdamState<T>(s.gen.mapping, c.lr_g * c.mapping_lr_mult, c.adam_beta1, c.adam_beta2);
    s.opt_disc = AdamState<T>(s.disc.params, c.lr_d, c.adam_beta1, c.adam_beta2);
    s.ema_field = EmaState<T>(s.gen.field, c.ema_decay);
    s.ema_mapping = EmaState<T>(s.gen.mapping, c.ema_decay);
    return s;
  }

  std::size_t resolution() const { return disc.resolution(); }

  RenderConfig render_config() const {
    RenderConfig rc = cfg.render;
    rc.width = rc.height = resolution();
    return rc;
  }

  /// Generator with the moving-average weights, used for every evaluation render.
  Generator<T> ema_generator() const {
    Generator<T> g;
    g.cfg = gen.cfg;
    g.field = with_values(gen.field, ema_field.shadow);
    g.mapping = with_values(gen.mapping, ema_mapping.shadow);
    return g;
  }
};

namespace detail {

template <class T>
struct FakeDraw {
  Tensor<T> z;
  CameraPose pose;
  RenderKey key;
};

// Counter-based draws keyed by (iteration, slot); discriminator fakes use
// slots [0, B), generator fakes [B, 2B).
template <class T>
FakeDraw<T> draw_fake(const TrainState<T>& s, std::uint64_t iter, std::uint64_t slot) {
  FakeDraw<T> d;
  Rng zr(s.cfg.seed, Stream::latent, iter, slot + 1);
  d.z = Tensor<T>(Shape{s.gen.cfg.z_dim});
  for (auto& v : d.z.data()) v = T(zr.normal());
  Rng pr(s.cfg.seed, Stream::pose, iter, slot + 1);
  d.pose = sample_pose(s.cfg.pose, pr);
  d.key = {s.cfg.seed, (iter << 20) | slot};
  return d;
}

template <class T>
std::vector<Tensor<T>> sum_in_order(std::vector<std::vector<Tensor<T>>>& parts) {
  std::vector<Tensor<T>> total = std::move(parts[0]);
  for (std::size_t i = 1; i < parts.size(); ++i) add_into(total, parts[i]);
  return total;
}

}  // namespace detail

/// Real image [R x R x 3] (any multiple of R) -> discriminator input [1 x 3 x R x R].
template <class T>
Tensor<T> real_input(const Tensor<float>& hwc, std::size_t res) {
  const std::size_t f = hwc.dim(0) / res;
  if (f < 1 || hwc.dim(0) != f * res || hwc.dim(1) != f * res)
    throw std::invalid_argument("training: real image " + shape_str(hwc.shape()) + " cannot be reduced to " +
                                std::to_string(res));
  return hwc_to_chw(Tensor<T>::cast(downsample(hwc, f)));
}

/// Fake images of the live generator, no gradient; [1 x 3 x R x R] each.
template <class T>
std::vector<Tensor<T>> render_fakes(const TrainState<T>& s, std::uint64_t iter, std::size_t first_slot,
                                   std::size_t count) {
  std::vector<Tensor<T>> out(count);
  const RenderConfig rc = s.render_config();
  parallel_for(count, [&](std::size_t j) {
    const auto d = detail::draw_fake(s, iter, first_slot + j);
    out[j] = hwc_to_chw(render(s.gen, s.gen.map_latent(d.z), d.pose, rc, d.key).image);
  });
  return out;
}

struct DiscriminatorStep {
  double loss = 0, r1 = 0;
  bool applied = false;
};

/// One discriminator update on paired real and fake inputs (equal counts).
template <class T>
DiscriminatorStep discriminator_step(TrainState<T>& s, const std::vector<Tensor<T>>& reals,
                                     const std::vector<Tensor<T>>& fakes, double lr) {
  if (reals.size() != fakes.size() || reals.empty())
    throw std::invalid_argument("discriminator_step: need equally many real and fake images");
  const std::size_t b = reals.size();
  const double lambda = s.cfg.r1_lambda;
  std::vector<std::vector<Tensor<T>>> grads(b);
  std::vector<double> losses(b), r1s(b);
  parallel_for(b, [&](std::size_t i) {
    Tape<T> tape;
    auto p = s.disc.bind(tape, true);
    auto real = tape.leaf(reals[i], lambda > 0);
    auto sr = s.disc.forward(p, real);
    auto sf = s.disc.forward(p, tape.constant(fakes[i]));
    auto loss = ops::add(ops::softplus(ops::scale(sr, T(-1))), ops::softplus(sf));
    if (lambda > 0) {
      auto r1 = gradient_penalty(sr, real);
      r1s[i] = double(r1.value()[0]);
      loss = ops::add(loss, ops::scale(r1, T(lambda)));
    }
    loss = ops::scale(ops::sum_all(loss), T(1.0 / double(b)));
    losses[i] = double(loss.value()[0]);
    grads[i] = tape.gradients(loss, std::span<const Var<T>>(p.p));
  });
  DiscriminatorStep out;
  for (std::size_t i = 0; i < b; ++i) {
    out.loss += losses[i];
    out.r1 += r1s[i] / double(b);
  }
  s.opt_disc.lr = lr;
  if (!std::isfinite(out.loss)) {
    log_event("discriminator: non-finite loss at iteration " + std::to_string(s.iter) + ", update skipped");
    ++s.opt_disc.skipped;
    return out;
  }
  out.applied = adam_step(s.disc.params, detail::sum_in_order(grads), s.opt_disc, "discriminator");
  return out;
}

struct GeneratorStep {
  double loss = 0;
  bool applied = false;
};

/// One generator + mapping update through the frozen discriminator.
template <class T>
GeneratorStep generator_step(TrainState<T>& s, std::size_t first_slot, std::size_t b, double lr) {
  const RenderConfig rc = s.render_config();
  const std::size_t nf = s.gen.field.size();
  std::vector<std::vector<Tensor<T>>> grads(b);
  std::vector<double> losses(b);
  parallel_for(b, [&](std::size_t j) {
    const auto d = detail::draw_fake(s, s.iter, first_slot + j);
    Tape<T> tape;
    auto fp = s.gen.field.bind(tape, true);
    auto mp = s.gen.mapping.bind(tape, true);
    auto film = s.gen.map_latent(tape, mp, tape.constant(d.z));
    auto img = render_on_tape(s.gen, fp, film, d.pose, rc, d.key).image;
    auto score = s.disc.forward(s.disc.bind(tape, false), img);
    auto loss = ops::scale(ops::sum_all(ops::softplus(ops::scale(score, T(-1)))), T(1.0 / double(b)));
    losses[j] = double(loss.value()[0]);
    std::vector<Var<T>> wrt = fp;
    wrt.insert(wrt.end(), mp.begin(), mp.end());
    grads[j] = tape.gradients(loss, std::span<const Var<T>>(wrt));
  });
  GeneratorStep out;
  for (double l : losses) out.loss += l;
  auto total = detail::sum_in_order(grads);
  if (!std::isfinite(out.loss) || !all_finite(total)) {
    log_event("generator: non-finite loss or gradient at iteration " + std::to_string(s.iter) + ", update skipped");
    ++s.opt_field.skipped;
    return out;
  }
  std::vector<Tensor<T>> gf(total.begin(), total.begin() + std::ptrdiff_t(nf));
  std::vector<Tensor<T>> gm(total.begin() + std::ptrdiff_t(nf), total.end());
  s.opt_field.lr = lr;
  s.opt_mapping.lr = lr * s.cfg.mapping_lr_mult;
  out.applied = adam_step(s.gen.field, gf, s.opt_field, "generator");
  if (s.gen.mapping.size() > 0) adam_step(s.gen.mapping, gm, s.opt_mapping, "mapping");
  return out;
}

/// Grows the discriminator when the iteration counter crosses a stage boundary.
template <class T>
void sync_stage(TrainState<T>& s) {
  const auto starts = s.cfg.stage_starts();
  while (s.disc.stage < starts.size() && s.iter >= starts[s.disc.stage]) s.disc.grow();
}

/// One full iteration: discriminator update with R1 on reals, generator update,
/// EMA, fade-in and schedule advance.
template <class T>
StepMetrics train_step(TrainState<T>& s, const std::vector<Tensor<T>>& reals) {
  sync_stage(s);
  const std::size_t b = s.cfg.effective_batch(s.disc.stage);
  if (reals.size() != b)
    throw std::invalid_argument("train_step: expected " + std::to_string(b) + " real images, got " +
                                std::to_string(reals.size()));
  for (const auto& r : reals)
    if (r.shape() != Shape({1, 3, s.resolution(), s.resolution()}))
      throw std::invalid_argument("train_step: real image " + shape_str(r.shape()) + " at stage resolution " +
                                  std::to_string(s.resolution()));
  StepMetrics m;
  m.iter = s.iter;
  m.stage = s.disc.stage;
  m.alpha = s.disc.alpha;
  m.lr_g = lr_schedule(s.iter, s.cfg.lr_g, s.cfg.lr_g_final, s.cfg.iterations);
  m.lr_d = lr_schedule(s.iter, s.cfg.lr_d, s.cfg.lr_d_final, s.cfg.iterations);

  const auto fakes = render_fakes(s, s.iter, 0, b);
  const auto ds = discriminator_step(s, reals, fakes, m.lr_d);
  const auto gs = generator_step(s, b, b, m.lr_g);
  m.loss_d = ds.loss;
  m.r1 = ds.r1;
  m.loss_g = gs.loss;
  m.skipped = !ds.applied || !gs.applied;
  ema_update(s.ema_field, s.gen.field);
  ema_update(s.ema_mapping, s.gen.mapping);
  s.disc.advance_fade();
  ++s.iter;
  return m;
}

/// Next real batch from the reproducible shuffled stream.
template <class T>
std::vector<Tensor<T>> next_real_batch(TrainState<T>& s, const Dataset& data) {
  sync_stage(s);
  const std::size_t b = s.cfg.effective_batch(s.disc.stage);
  std::vector<Tensor<T>> out;
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t idx = dataset_index(data.size(), s.cfg.seed, s.samples_consumed++);
    out.push_back(real_input<T>(data.images[idx], s.resolution()));
  }
  return out;
}

template <class T>
StepMetrics train_step(TrainState<T>& s, const Dataset& data) {
  return train_step(s, next_real_batch(s, data));
}

/// Runs until `until` iterations (capped by the configured total). `on_step`
/// sees each iteration's metrics; `on_checkpoint` is called at stage
/// boundaries, every `checkpoint_every` iterations and at the end.
template <class T>
void train(TrainState<T>& s, const Dataset& data, std::uint64_t until,
           const std::function<void(const StepMetrics&)>& on_step,
           const std::type_identity_t<std::function<void(const TrainState<T>&)>>& on_checkpoint = {}) {
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
  if (data.resolution < s.cfg.disc.top_resolution() || data.resolution % s.cfg.disc.top_resolution() != 0)
    throw std::invalid_argument("train: dataset resolution " + std::to_string(data.resolution) +
                                " does not cover the final stage " + std::to_string(s.cfg.disc.top_resolution()));
  until = std::min(until, s.cfg.iterations);
  const auto starts = s.cfg.stage_starts();
  while (s.iter < until) {
    const auto m = train_step(s, data);
    if (on_step) on_step(m);
    const bool boundary = std::find(starts.begin(), starts.end(), s.iter) != starts.end();
    const bool periodic = s.cfg.checkpoint_every > 0 && s.iter % s.cfg.checkpoint_every == 0;
    if (on_checkpoint && (boundary || periodic || s.iter == until)) on_checkpoint(s);
  }
}

}  // namespace pifield
