#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "pifield/core/geometry.hpp"
#include "pifield/generator.hpp"

using namespace pifield;
using D = double;

namespace {

GeneratorConfig small_config() {
  GeneratorConfig c;
  c.depth = 3;
  c.width = 12;
  c.map_depth = 2;
  c.map_width = 16;
  c.z_dim = 6;
  return c;
}

Tensor<D> unit_dirs(std::size_t n, Rng& rng) {
  Tensor<D> d(Shape{n, 3});
  for (std::size_t i = 0; i < n; ++i) {
    Vec3 v{rng.normal(), rng.normal(), rng.normal()};
    const double len = std::sqrt(v.x * v.x + v.y * v.y + v.z * v.z);
    d.at(i, 0) = v.x / len;
    d.at(i, 1) = v.y / len;
    d.at(i, 2) = v.z / len;
  }
  return d;
}

Tensor<D> points(std::size_t n, Rng& rng, double r = 1) {
  Tensor<D> x(Shape{n, 3});
  for (auto& v : x.data()) v = rng.uniform(-r, r);
  return x;
}

double softplus(double v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }
double sigmoid(double v) { return 1 / (1 + std::exp(-v)); }

// Direct scalar evaluation of the conditioned field for one point.
std::pair<double, std::array<double, 3>> scalar_field(const Generator<D>& g, const Film<D>& f, const double* x,
                                                      const double* d) {
  const auto& P = g.field;
  const std::size_t h = g.cfg.width;
  std::vector<double> in(x, x + 3);
  for (auto& v : in) v *= g.cfg.input_scale;
  for (std::size_t layer = 0; layer < g.cfg.depth; ++layer) {
    const auto& W = P[P.index("layer." + std::to_string(layer) + ".weight")];
    const auto& b = P[P.index("layer." + std::to_string(layer) + ".bias")];
    std::vector<double> out(h);
    for (std::size_t n = 0; n < h; ++n) {
      double acc = b[n];
      for (std::size_t m = 0; m < in.size(); ++m) acc += W.at(n, m) * in[m];
      out[n] = std::sin(f.gamma.at(layer, n) * acc + f.beta.at(layer, n));
    }
    in = out;
  }
  const auto& ws = P[P.index("sigma.weight")];
  double s = P[P.index("sigma.bias")][0];
  for (std::size_t m = 0; m < h; ++m) s += ws.at(0, m) * in[m];
  std::vector<double> cin = in;
  cin.insert(cin.end(), d, d + 3);
  const auto& wc = P[P.index("color.weight")];
  const auto& bc = P[P.index("color.bias")];
  std::vector<double> hc(h);
  const std::size_t cl = g.cfg.depth;
  for (std::size_t n = 0; n < h; ++n) {
    double acc = bc[n];
    for (std::size_t m = 0; m < h + 3; ++m) acc += wc.at(n, m) * cin[m];
    hc[n] = std::sin(f.gamma.at(cl, n) * acc + f.beta.at(cl, n));
  }
  const auto& wr = P[P.index("rgb.weight")];
  const auto& br = P[P.index("rgb.bias")];
  std::array<double, 3> c;
  for (int k = 0; k < 3; ++k) {
    double acc = br[k];
    for (std::size_t m = 0; m < h; ++m) acc += wr.at(k, m) * hc[m];
    c[k] = sigmoid(acc);
  }
  return {softplus(s), c};
}

}  // namespace

TEST(MapLatent, Deterministic) {
  auto g = Generator<D>::create(small_config(), 1);
  auto z = sample_latent<D>(6, 3, 0);
  EXPECT_EQ(g.map_latent(z), g.map_latent(z));
}

TEST(MapLatent, DefaultVectorCount) {
  GeneratorConfig c;  // 8 layers of 256 units
  auto g = Generator<float>::create(c, 2);
  auto f = g.map_latent(sample_latent<float>(c.z_dim, 1, 0));
  EXPECT_EQ(f.gamma.shape(), (Shape{9, 256}));
  EXPECT_EQ(f.beta.shape(), (Shape{9, 256}));
  EXPECT_EQ(2 * f.gamma.dim(0), 18u);
}

TEST(MapLatent, WrongDimensionRejected) {
  auto g = Generator<D>::create(small_config(), 1);
  EXPECT_THROW(g.map_latent(Tensor<D>(Shape{5})), ShapeError);
}

TEST(MapLatent, MeanFrequencyNearOffset) {
  // A single network carries an offset W·E[h]; it is zero-mean over initializations,
  // so 10^4 latents are spread across 16 independently initialized networks.
  const int nets = 16, per = 625;
  std::vector<double> net_means;
  for (int s = 0; s < nets; ++s) {
    auto g = Generator<D>::create(small_config(), 100 + s);
    double m = 0;
    for (int i = 0; i < per; ++i) {
      auto f = g.map_latent(sample_latent<D>(6, 11, s * per + i));
      m += f.gamma.sum() / double(f.gamma.size()) / per;
    }
    net_means.push_back(m);
  }
  double m = 0, v = 0;
  for (double x : net_means) m += x / nets;
  for (double x : net_means) v += (x - m) * (x - m) / (nets - 1);
  EXPECT_LT(std::abs(m - 30.0), 5 * std::sqrt(v / nets)) << "mean " << m << " sd " << std::sqrt(v);
  EXPECT_LT(std::sqrt(v), 15.0);
}

TEST(FilmLayer, IdentityFilmIsPlainSine) {
  Rng rng(5, Stream::eval);
  Tape<D> t;
  auto x = t.constant(points(4, rng)), w = t.constant(points(6, rng).reshaped({6, 3})), b = t.constant(Tensor<D>(Shape{6}, 0.3));
  auto y = ops::film_layer(x, w, b, t.constant(Tensor<D>(Shape{6}, 1.0)), t.constant(Tensor<D>(Shape{6})),
                           ops::Activation::sine);
  auto ref = ops::sine(ops::affine(x, w, b));
  EXPECT_LT(max_abs_diff(y.value(), ref.value()), 1e-15);
}

TEST(FilmLayer, ZeroWeightsQuarterPhaseGivesOne) {
  Tape<D> t;
  auto y = ops::film_layer(t.constant(Tensor<D>(Shape{3, 2}, 0.7)), t.constant(Tensor<D>(Shape{4, 2})),
                           t.constant(Tensor<D>(Shape{4})), t.constant(Tensor<D>(Shape{4}, 25.0)),
                           t.constant(Tensor<D>(Shape{4}, std::numbers::pi / 2)), ops::Activation::sine);
  for (double v : y.value().data()) EXPECT_EQ(v, 1.0);
}

TEST(FilmLayer, MatchesScalarEvaluation) {
  Rng rng(6, Stream::eval);
  auto xt = points(5, rng), wt = points(7, rng, 2).reshaped({7, 3});
  Tensor<D> bt(Shape{7}), gt(Shape{7}), st(Shape{7});
  for (std::size_t i = 0; i < 7; ++i) {
    bt[i] = rng.uniform(-1, 1);
    gt[i] = rng.uniform(10, 40);
    st[i] = rng.uniform(-3, 3);
  }
  Tape<D> t;
  auto y = ops::film_layer(t.constant(xt), t.constant(wt), t.constant(bt), t.constant(gt), t.constant(st),
                           ops::Activation::sine)
               .value();
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t n = 0; n < 7; ++n) {
      double acc = bt[n];
      for (std::size_t m = 0; m < 3; ++m) acc += wt.at(n, m) * xt.at(i, m);
      EXPECT_NEAR(y.at(i, n), std::sin(gt[n] * acc + st[n]), 1e-12);
    }
}

TEST(FilmLayer, PeriodicInEachPreactivation) {
  Rng rng(7, Stream::eval);
  auto xt = points(4, rng);
  auto wt = points(5, rng).reshaped({5, 3});
  Tensor<D> bt(Shape{5}, 0.1), gt(Shape{5}), st(Shape{5}, 0.2);
  for (auto& v : gt.data()) v = rng.uniform(10, 40);
  Tape<D> t;
  auto base = ops::film_layer(t.constant(xt), t.constant(wt), t.constant(bt), t.constant(gt), t.constant(st),
                              ops::Activation::sine)
                  .value();
  for (std::size_t j = 0; j < 5; ++j) {
    Tensor<D> shifted = bt;
    shifted[j] += 2 * std::numbers::pi / gt[j];
    auto y = ops::film_layer(t.constant(xt), t.constant(wt), t.constant(shifted), t.constant(gt), t.constant(st),
                             ops::Activation::sine)
                 .value();
    EXPECT_LT(max_abs_diff(y, base), 1e-12);
  }
}

TEST(Field, DensityIgnoresViewDirection) {
  auto g = Generator<D>::create(small_config(), 8);
  Rng rng(8, Stream::eval);
  auto f = g.map_latent(sample_latent<D>(6, 8, 0));
  auto x = points(500, rng);
  auto a = g.evaluate(x, unit_dirs(500, rng), f);
  auto b = g.evaluate(x, unit_dirs(500, rng), f);
  EXPECT_TRUE(bit_identical(a.first, b.first));
  EXPECT_FALSE(a.second == b.second);
}

TEST(Field, OutputRanges) {
  auto g = Generator<float>::create(small_config(), 9);
  Rng rng(9, Stream::eval);
  auto f = g.map_latent(sample_latent<float>(6, 9, 1));
  auto x = Tensor<float>::cast(points(10000, rng, 3));
  auto d = Tensor<float>::cast(unit_dirs(10000, rng));
  auto [s, c] = g.evaluate(x, d, f);
  for (float v : s.data()) EXPECT_GE(v, 0.0f);
  for (float v : c.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Field, MatchesScalarOracle) {
  auto cfg = small_config();
  cfg.input_scale = 3.0;
  auto g = Generator<D>::create(cfg, 10);
  Rng rng(10, Stream::eval);
  auto f = g.map_latent(sample_latent<D>(6, 10, 0));
  auto x = points(50, rng, 0.5);
  auto d = unit_dirs(50, rng);
  auto [s, c] = g.evaluate(x, d, f);
  for (std::size_t i = 0; i < 50; ++i) {
    auto [ss, cc] = scalar_field(g, f, x.ptr() + 3 * i, d.ptr() + 3 * i);
    EXPECT_NEAR(s[i], ss, 1e-10 * std::max(1.0, ss));
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(c.at(i, k), cc[k], 1e-12);
  }
}

TEST(Field, RejectsNonFiniteAndNonUnitInputs) {
  auto g = Generator<D>::create(small_config(), 11);
  auto f = g.map_latent(sample_latent<D>(6, 1, 0));
  Tensor<D> x(Shape{1, 3}), d(Shape{1, 3});
  d[2] = 1;
  x[0] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(g.evaluate(x, d, f), std::invalid_argument);
  x[0] = 0;
  d[2] = 2;
  EXPECT_THROW(g.evaluate(x, d, f), std::invalid_argument);
}

TEST(PositionalEncoding, ZeroGivesSinCosPairs) {
  Tape<D> t;
  auto pe = positional_encoding(t.constant(Tensor<D>(Shape{1, 3})), 4).value();
  ASSERT_EQ(pe.shape(), (Shape{1, 24}));
  for (std::size_t i = 0; i < 24; ++i) EXPECT_EQ(pe[i], i % 2 == 0 ? 0.0 : 1.0);
}

TEST(PositionalEncoding, OctaveLayout) {
  Tape<D> t;
  auto pe = positional_encoding(t.constant(Tensor<D>::matrix(1, 3, {0.1, 0.2, 0.3})), 2).value();
  EXPECT_DOUBLE_EQ(pe[0], std::sin(std::numbers::pi * 0.1));
  EXPECT_DOUBLE_EQ(pe[3], std::cos(std::numbers::pi * 0.2));
  EXPECT_DOUBLE_EQ(pe[6], std::sin(2 * std::numbers::pi * 0.1));
  EXPECT_DOUBLE_EQ(pe[11], std::cos(2 * std::numbers::pi * 0.3));
}

TEST(Ablation, ConcatenationIgnoresMappingNetwork) {
  auto cfg = small_config();
  cfg.conditioning = Conditioning::concat;
  auto g = Generator<D>::create(cfg, 12);
  EXPECT_EQ(g.mapping.size(), 0u);
  auto z = sample_latent<D>(6, 2, 0);
  auto f = g.map_latent(z);
  EXPECT_EQ(f.z, z);
  for (double v : f.gamma.data()) EXPECT_EQ(v, cfg.freq_offset);
  for (double v : f.beta.data()) EXPECT_EQ(v, 0.0);
}

TEST(Ablation, AllFourCellsProduceFiniteOutputs) {
  for (auto act : {ops::Activation::sine, ops::Activation::relu})
    for (auto cond : {Conditioning::film, Conditioning::concat}) {
      auto cfg = small_config();
      cfg.activation = act;
      cfg.conditioning = cond;
      cfg.pe_octaves = 4;
      auto g = Generator<float>::create(cfg, 13);
      Rng rng(13, Stream::eval);
      auto f = g.map_latent(sample_latent<float>(6, 3, 0));
      auto [s, c] = g.evaluate(Tensor<float>::cast(points(200, rng)), Tensor<float>::cast(unit_dirs(200, rng)), f);
      EXPECT_TRUE(s.all_finite());
      EXPECT_TRUE(c.all_finite());
    }
}
