#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "pifield/core/ops.hpp"
#include "pifield/core/optim.hpp"
#include "pifield/core/rng.hpp"

namespace pifield {

struct DiscriminatorConfig {
  std::vector<std::size_t> resolutions{32, 64, 128};  // one per stage
  double width_mult = 0.25;
  double slope = 0.2;
  std::size_t fade_iters = 10000;

  /// Reference block widths by input resolution, before width_mult.
  static std::size_t reference_width(std::size_t res) { return res >= 128 ? 128 : (res == 64 ? 256 : 400); }

  std::size_t block_width(std::size_t res) const {
    return std::max<std::size_t>(1, std::size_t(std::lround(double(reference_width(res)) * width_mult)));
  }
  /// Adapter output feeds the block at `res`: it matches what the block above would hand down.
  std::size_t adapter_width(std::size_t res) const {
    if (res >= 128) return std::max<std::size_t>(1, block_width(res) / 2);
    return block_width(2 * res);
  }
  std::size_t top_resolution() const { return resolutions.back(); }

  void validate() const {
    if (resolutions.empty()) throw std::invalid_argument("discriminator: need at least one stage");
    for (std::size_t i = 0; i < resolutions.size(); ++i) {
      const std::size_t r = resolutions[i];
      if (r < 4 || (r & (r - 1)) != 0)
        throw std::invalid_argument("discriminator: stage resolution " + std::to_string(r) + " is not a power of two >= 4");
      if (i > 0 && r != 2 * resolutions[i - 1])
        throw std::invalid_argument("discriminator: stage resolutions must double");
    }
    if (!(width_mult > 0)) throw std::invalid_argument("discriminator: width_mult must be > 0");
    if (slope < 0) throw std::invalid_argument("discriminator: slope must be >= 0");
  }
};

/// Parameters for every stage exist from the start; `stage` selects the active ones.
template <class T>
struct Discriminator {
  DiscriminatorConfig cfg;
  ParamSet<T> params;
  std::size_t stage = 0;
  double alpha = 1.0;
  std::size_t fade_step = 0;  // iterations since the last grow

  static Discriminator create(const DiscriminatorConfig& c, std::uint64_t seed) {
    c.validate();
    Discriminator d;
    d.cfg = c;
    std::uint64_t slot = 1000;
    const double gain = std::sqrt(2.0 / (1.0 + c.slope * c.slope));
    auto conv = [&](const std::string& name, std::size_t out, std::size_t in, std::size_t k, bool bias) {
      Rng rng(seed, Stream::init, slot++);
      Tensor<T> w(Shape{out, in, k, k});
      const double std = gain / std::sqrt(double(in * k * k));
      for (auto& v : w.data()) v = T(std * rng.normal());
      d.params.add(name + ".weight", std::move(w));
      if (bias) d.params.add(name + ".bias", Tensor<T>(Shape{out}));
    };
    for (std::size_t r = c.top_resolution(); r >= 4; r /= 2) {
      const std::string b = "block." + std::to_string(r);
      const std::size_t in = c.adapter_width(r), out = c.block_width(r);
      conv(b + ".conv1", out, in + 2, 3, true);
      conv(b + ".conv2", out, out + 2, 3, true);
      if (in != out) conv(b + ".skip", out, in, 1, false);
    }
    for (std::size_t r : c.resolutions) conv("adapter." + std::to_string(r), c.adapter_width(r), 3, 1, true);
    conv("final", 1, c.block_width(4), 2, true);
    return d;
  }

  std::size_t resolution() const { return cfg.resolutions[stage]; }
  bool can_grow() const { return stage + 1 < cfg.resolutions.size(); }

  void grow() {
    if (!can_grow())
      throw std::logic_error("discriminator: already at the final stage (" + std::to_string(resolution()) + ")");
    ++stage;
    alpha = cfg.fade_iters > 0 ? 0.0 : 1.0;
    fade_step = 0;
  }

  /// Advances the linear fade-in by one iteration.
  void advance_fade() {
    if (alpha >= 1.0) return;
    ++fade_step;
    alpha = std::min(1.0, double(fade_step) / double(cfg.fade_iters));
  }

  // -------------------------------------------------------------------------
  // Forward

  struct Bound {
    const Discriminator* d;
    std::vector<Var<T>> p;
    const Var<T>& operator()(const std::string& name) const { return p[d->params.index(name)]; }
  };

  Bound bind(Tape<T>& tape, bool requires_grad) const { return {this, params.bind(tape, requires_grad)}; }
  Bound wrap(std::vector<Var<T>> vars) const { return {this, std::move(vars)}; }

  Var<T> conv(const Bound& p, const std::string& name, const Var<T>& x, std::size_t pad) const {
    auto y = ops::conv2d(x, p(name + ".weight"), ops::ConvSpec{1, pad});
    if (params.contains(name + ".bias")) y = ops::add_channel_bias(y, p(name + ".bias"));
    return y;
  }

  Var<T> adapter(const Bound& p, std::size_t res, const Var<T>& img) const {
    return ops::leaky_relu(conv(p, "adapter." + std::to_string(res), img, 0), T(cfg.slope));
  }

  /// Two coordinate-channel 3x3 convolutions with a residual skip, then 2x average pooling.
  Var<T> block(const Bound& p, std::size_t res, const Var<T>& x) const {
    const std::string b = "block." + std::to_string(res);
    const T s = T(cfg.slope);
    auto h = ops::leaky_relu(conv(p, b + ".conv1", ops::coord_channels(x), 1), s);
    h = ops::leaky_relu(conv(p, b + ".conv2", ops::coord_channels(h), 1), s);
    auto skip = params.contains(b + ".skip.weight") ? conv(p, b + ".skip", x, 0) : x;
    return ops::avg_pool2(ops::add(h, skip));
  }

  /// Scores [B] for images [B x 3 x R x R] at the active stage resolution.
  Var<T> forward(const Bound& p, const Var<T>& img) const { return forward(p, img, stage, alpha); }

  /// Input of the first block below the fade: the alpha blend of the new
  /// top block and the adapter applied to the 2x downsampled image.
  Var<T> faded_features(const Bound& p, const Var<T>& img, std::size_t at_stage, double a) const {
    const std::size_t res = cfg.resolutions.at(at_stage);
    const Shape& s = img.shape();
    if (s.size() != 4 || s[1] != 3 || s[2] != res || s[3] != res)
      throw std::invalid_argument("discriminator: stage " + std::to_string(at_stage) + " expects [B x 3 x " +
                                  std::to_string(res) + " x " + std::to_string(res) + "], got " + shape_str(s));
    if (at_stage == 0 || a >= 1.0) return block(p, res, adapter(p, res, img));
    auto old = adapter(p, res / 2, ops::avg_pool2(img));
    if (a <= 0.0) return old;
    auto fresh = block(p, res, adapter(p, res, img));
    return ops::add(ops::scale(fresh, T(a)), ops::scale(old, T(1.0 - a)));
  }

  Var<T> forward(const Bound& p, const Var<T>& img, std::size_t at_stage, double a) const {
    auto x = faded_features(p, img, at_stage, a);
    for (std::size_t r = x.shape()[2]; r >= 4; r /= 2) x = block(p, r, x);
    return ops::reshape(conv(p, "final", x, 0), Shape{img.shape()[0]});
  }

  Tensor<T> score(const Tensor<T>& img) const {
    Tape<T> tape;
    typename Tape<T>::NoGrad ng(tape);
    return forward(bind(tape, false), tape.constant(img)).value();
  }
};

/// Mean over the batch of |dD/dI|^2 for scores [B] of `images`, recorded so
/// that it can be differentiated again.
template <class T>
Var<T> gradient_penalty(const Var<T>& scores, const Var<T>& images) {
  if (!images.requires_grad()) throw std::invalid_argument("r1_penalty: images must require gradients");
  Tape<T>& tape = *images.tape;
  const Var<T> wrt[] = {images};
  auto g = tape.gradients_graph(ops::sum_all(scores), wrt)[0];
  if (!g.valid()) return tape.constant(Tensor<T>(Shape{1}));
  return ops::scale(ops::sum_all(ops::square(g)), T(1.0 / double(images.shape()[0])));
}

template <class T>
Var<T> r1_penalty(const Discriminator<T>& d, const typename Discriminator<T>::Bound& p, const Var<T>& images) {
  return gradient_penalty(d.forward(p, images), images);
}

}  // namespace pifield
