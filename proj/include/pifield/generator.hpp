#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "pifield/core/ops.hpp"
#include "pifield/core/optim.hpp"
#include "pifield/core/rng.hpp"

namespace pifield {

enum class Conditioning { film, concat };

struct GeneratorConfig {
  std::size_t depth = 8;
  std::size_t width = 256;
  std::size_t map_depth = 3;
  std::size_t map_width = 256;
  std::size_t z_dim = 256;
  double freq_scale = 15.0;
  double freq_offset = 30.0;
  ops::Activation activation = ops::Activation::sine;
  Conditioning conditioning = Conditioning::film;
  std::size_t pe_octaves = 10;
  // Coordinates are multiplied by this before entering the network.
  double input_scale = 1.0;
  std::string density_nl = "softplus";  // softplus | relu
  std::string color_nl = "sigmoid";

  std::size_t film_layers() const { return depth + 1; }
  std::size_t input_features() const {
    return activation == ops::Activation::sine ? 3 : 6 * pe_octaves;
  }
  // gamma = scale * raw + offset. ReLU layers are modulated around 1.
  double gamma_scale() const { return activation == ops::Activation::sine ? freq_scale : 1.0; }
  double gamma_offset() const { return activation == ops::Activation::sine ? freq_offset : 1.0; }

  void validate() const {
    if (depth < 1 || width < 1 || z_dim < 1) throw std::invalid_argument("generator: depth, width and z_dim must be >= 1");
    if (conditioning == Conditioning::film && (map_width < 1))
      throw std::invalid_argument("generator: map_width must be >= 1");
    if (activation == ops::Activation::relu && pe_octaves < 1)
      throw std::invalid_argument("generator: pe_octaves must be >= 1 for the relu backbone");
    if (density_nl != "softplus" && density_nl != "relu")
      throw std::invalid_argument("generator: density_nl must be softplus or relu, got " + density_nl);
    if (color_nl != "sigmoid") throw std::invalid_argument("generator: color_nl must be sigmoid, got " + color_nl);
  }
};

/// Per-layer frequencies and phase shifts, one row per FiLM layer (backbone
/// layers then the color layer). `z` is carried only under concatenation
/// conditioning, where gamma/beta are fixed and the latent feeds layer 0.
template <class T>
struct Film {
  Tensor<T> gamma, beta;
  Tensor<T> z;

  friend bool operator==(const Film& a, const Film& b) {
    return a.gamma == b.gamma && a.beta == b.beta && a.z == b.z;
  }
};

template <class T>
struct FilmVars {
  Var<T> gamma, beta, z;
};

template <class T>
struct FieldVars {
  Var<T> sigma;  // [P x 1]
  Var<T> rgb;    // [P x 3]
};

/// Sinusoidal positional encoding, features ordered (octave, coordinate) with
/// a (sin, cos) pair of 2^k * pi * x each. No identity term.
template <class T>
Var<T> positional_encoding(const Var<T>& x, std::size_t octaves) {
  require(x.value().rank() == 2, "positional_encoding: expects [P x C], got " + shape_str(x.shape()));
  const std::size_t p = x.shape()[0], c = x.shape()[1], f = 2 * c * octaves;
  Tensor<T> v(Shape{p, f});
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t k = 0; k < octaves; ++k)
      for (std::size_t j = 0; j < c; ++j) {
        const T a = T(std::ldexp(std::numbers::pi, int(k))) * x.value()[i * c + j];
        v[i * f + 2 * (k * c + j)] = std::sin(a);
        v[i * f + 2 * (k * c + j) + 1] = std::cos(a);
      }
  return x.tape->record(std::move(v), {x},
                        [x, octaves, p, c, f](Tape<T>& t, const Var<T>& g) {
                          Tensor<T> gx(Shape{p, c});
                          for (std::size_t i = 0; i < p; ++i)
                            for (std::size_t k = 0; k < octaves; ++k)
                              for (std::size_t j = 0; j < c; ++j) {
                                const T w = T(std::ldexp(std::numbers::pi, int(k)));
                                const T a = w * x.value()[i * c + j];
                                gx[i * c + j] += w * (g.value()[i * f + 2 * (k * c + j)] * std::cos(a) -
                                                      g.value()[i * f + 2 * (k * c + j) + 1] * std::sin(a));
                              }
                          return std::vector<Var<T>>{t.constant(std::move(gx))};
                        },
                        false);
}

/// Mapping network plus conditioned radiance field.
template <class T>
class Generator {
 public:
  GeneratorConfig cfg;
  ParamSet<T> mapping;
  ParamSet<T> field;

  Generator() = default;

  static Generator create(const GeneratorConfig& c, std::uint64_t seed) {
    c.validate();
    Generator g;
    g.cfg = c;
    std::uint64_t slot = 0;
    auto uniform = [&](Shape s, double bound) {
      Rng rng(seed, Stream::init, slot++);
      Tensor<T> t(std::move(s));
      for (auto& v : t.data()) v = T(rng.uniform(-bound, bound));
      return t;
    };
    auto normal = [&](Shape s, double std) {
      Rng rng(seed, Stream::init, slot++);
      Tensor<T> t(std::move(s));
      for (auto& v : t.data()) v = T(std * rng.normal());
      return t;
    };

    const std::size_t h = c.width;
    const bool sine = c.activation == ops::Activation::sine;
    if (c.conditioning == Conditioning::film) {
      const double gain = std::sqrt(2.0 / (1.0 + 0.2 * 0.2));
      std::size_t in = c.z_dim;
      for (std::size_t i = 0; i < c.map_depth; ++i) {
        g.mapping.add("map." + std::to_string(i) + ".weight", normal({c.map_width, in}, gain / std::sqrt(double(in))));
        g.mapping.add("map." + std::to_string(i) + ".bias", Tensor<T>(Shape{c.map_width}));
        in = c.map_width;
      }
      const std::size_t out = 2 * c.film_layers() * h;
      g.mapping.add("map.out.weight", normal({out, in}, 0.25 * gain / std::sqrt(double(in))));
      g.mapping.add("map.out.bias", Tensor<T>(Shape{out}));
    }

    std::size_t in = c.input_features() + (c.conditioning == Conditioning::concat ? c.z_dim : 0);
    for (std::size_t i = 0; i < c.depth; ++i) {
      double bound;
      if (!sine)
        bound = std::sqrt(6.0 / double(in));
      else if (i == 0)
        bound = 1.0 / double(in);
      else
        bound = std::sqrt(6.0 / double(in)) / 30.0;
      g.field.add("layer." + std::to_string(i) + ".weight", uniform({h, in}, bound));
      g.field.add("layer." + std::to_string(i) + ".bias", uniform({h}, 1.0 / std::sqrt(double(in))));
      in = h;
    }
    const double head = sine ? 25.0 : 1.0;
    g.field.add("sigma.weight", uniform({1, h}, std::sqrt(6.0 / double(h)) / head));
    g.field.add("sigma.bias", uniform({1}, 1.0 / std::sqrt(double(h))));
    g.field.add("color.weight", uniform({h, h + 3}, std::sqrt(6.0 / double(h + 3)) / (sine ? 30.0 : 1.0)));
    g.field.add("color.bias", uniform({h}, 1.0 / std::sqrt(double(h + 3))));
    g.field.add("rgb.weight", uniform({3, h}, std::sqrt(6.0 / double(h)) / head));
    g.field.add("rgb.bias", uniform({3}, 1.0 / std::sqrt(double(h))));
    return g;
  }

  std::size_t raw_film_size() const { return 2 * cfg.film_layers() * cfg.width; }

  /// Latent -> conditioning, recorded on `tape`.
  FilmVars<T> map_latent(Tape<T>& tape, const std::vector<Var<T>>& mp, const Var<T>& z) const {
    require(z.value().rank() == 1 && z.shape()[0] == cfg.z_dim,
            "map_latent: latent " + shape_str(z.shape()) + ", expected [" + std::to_string(cfg.z_dim) + "]");
    const std::size_t rows = cfg.film_layers(), h = cfg.width;
    if (cfg.conditioning == Conditioning::concat) {
      return {tape.constant(Tensor<T>(Shape{rows, h}, T(cfg.gamma_offset()))), tape.constant(Tensor<T>(Shape{rows, h})),
              z};
    }
    Var<T> a = ops::reshape(z, Shape{1, cfg.z_dim});
    const std::size_t hidden = cfg.map_depth;
    for (std::size_t i = 0; i < hidden; ++i) a = ops::leaky_relu(ops::affine(a, mp[2 * i], mp[2 * i + 1]), T(0.2));
    Var<T> raw = ops::affine(a, mp[2 * hidden], mp[2 * hidden + 1]);
    const std::size_t half = rows * h;
    Var<T> freq = ops::add_scalar(ops::scale(ops::slice_cols(raw, 0, half), T(cfg.gamma_scale())), T(cfg.gamma_offset()));
    Var<T> phase = ops::slice_cols(raw, half, half);
    return {ops::reshape(freq, Shape{rows, h}), ops::reshape(phase, Shape{rows, h}), Var<T>{}};
  }

  Film<T> map_latent(const Tensor<T>& z) const {
    Tape<T> tape;
    typename Tape<T>::NoGrad ng(tape);
    auto fv = map_latent(tape, mapping.bind(tape, false), tape.constant(z));
    Film<T> f{fv.gamma.value(), fv.beta.value(), {}};
    if (cfg.conditioning == Conditioning::concat) f.z = z;
    return f;
  }

  FilmVars<T> bind_film(Tape<T>& tape, const Film<T>& f, bool requires_grad) const {
    check_film(f);
    FilmVars<T> v{tape.leaf(f.gamma, requires_grad), tape.leaf(f.beta, requires_grad), Var<T>{}};
    if (cfg.conditioning == Conditioning::concat) v.z = tape.leaf(f.z, requires_grad);
    return v;
  }

  void check_film(const Film<T>& f) const {
    const Shape s{cfg.film_layers(), cfg.width};
    require(f.gamma.shape() == s && f.beta.shape() == s,
            "film: gamma " + shape_str(f.gamma.shape()) + " beta " + shape_str(f.beta.shape()) + ", expected " +
                shape_str(s));
    if (cfg.conditioning == Conditioning::concat)
      require(f.z.shape() == Shape{cfg.z_dim}, "film: concatenation conditioning needs z of size " +
                                                   std::to_string(cfg.z_dim));
  }

  /// Backbone features Phi(x) for points x [P x 3].
  Var<T> backbone(const std::vector<Var<T>>& fp, const Var<T>& x, const FilmVars<T>& film) const {
    require(x.value().rank() == 2 && x.shape()[1] == 3, "field: points must be [P x 3], got " + shape_str(x.shape()));
    const std::size_t p = x.shape()[0];
    Var<T> h = cfg.input_scale == 1.0 ? x : ops::scale(x, T(cfg.input_scale));
    if (cfg.activation == ops::Activation::relu) h = positional_encoding(h, cfg.pe_octaves);
    if (cfg.conditioning == Conditioning::concat) h = ops::concat_cols(h, ops::broadcast_rows(film.z, p));
    for (std::size_t i = 0; i < cfg.depth; ++i)
      h = ops::film_layer(h, fp[2 * i], fp[2 * i + 1], ops::row(film.gamma, i), ops::row(film.beta, i), cfg.activation);
    return h;
  }

  Var<T> density_head(const std::vector<Var<T>>& fp, const Var<T>& phi) const {
    const std::size_t k = 2 * cfg.depth;
    Var<T> s = ops::affine(phi, fp[k], fp[k + 1]);
    return cfg.density_nl == "relu" ? ops::relu(s) : ops::softplus(s);
  }

  /// sigma [P x 1] and rgb [P x 3] at points x with unit directions d.
  FieldVars<T> forward(const std::vector<Var<T>>& fp, const Var<T>& x, const Var<T>& d,
                       const FilmVars<T>& film) const {
    require(d.shape() == x.shape(), "field: directions " + shape_str(d.shape()) + " vs points " + shape_str(x.shape()));
    if (!x.value().all_finite() || !d.value().all_finite()) throw std::invalid_argument("field: non-finite input");
    for (std::size_t i = 0; i < d.shape()[0]; ++i) {
      const T* r = d.value().ptr() + 3 * i;
      if (std::abs(std::sqrt(double(r[0] * r[0] + r[1] * r[1] + r[2] * r[2])) - 1.0) > 1e-6)
        throw std::invalid_argument("field: view direction " + std::to_string(i) + " is not unit length");
    }
    Var<T> phi = backbone(fp, x, film);
    Var<T> sigma = density_head(fp, phi);
    const std::size_t k = 2 * cfg.depth + 2, n = cfg.depth;
    Var<T> hc = ops::film_layer(ops::concat_cols(phi, d), fp[k], fp[k + 1], ops::row(film.gamma, n),
                                ops::row(film.beta, n), cfg.activation);
    Var<T> rgb = ops::sigmoid(ops::affine(hc, fp[k + 2], fp[k + 3]));
    return {sigma, rgb};
  }

  /// Evaluation-only field query.
  std::pair<Tensor<T>, Tensor<T>> evaluate(const Tensor<T>& x, const Tensor<T>& d, const Film<T>& film) const {
    Tape<T> tape;
    typename Tape<T>::NoGrad ng(tape);
    auto out = forward(field.bind(tape, false), tape.constant(x), tape.constant(d), bind_film(tape, film, false));
    return {out.sigma.value(), out.rgb.value()};
  }

  Tensor<T> density(const Tensor<T>& x, const Film<T>& film) const {
    Tape<T> tape;
    typename Tape<T>::NoGrad ng(tape);
    auto fp = field.bind(tape, false);
    return density_head(fp, backbone(fp, tape.constant(x), bind_film(tape, film, false))).value();
  }

  template <class U>
  Generator<U> cast() const {
    Generator<U> g;
    g.cfg = cfg;
    g.mapping = mapping.template cast<U>();
    g.field = field.template cast<U>();
    return g;
  }
};

/// Standard-normal latent for (seed, index).
template <class T>
Tensor<T> sample_latent(std::size_t dim, std::uint64_t seed, std::uint64_t index) {
  Rng rng(seed, Stream::latent, index);
  Tensor<T> z(Shape{dim});
  for (auto& v : z.data()) v = T(rng.normal());
  return z;
}

}  // namespace pifield
