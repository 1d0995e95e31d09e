#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "pifield/core/geometry.hpp"
#include "pifield/core/optim.hpp"
#include "pifield/core/parallel.hpp"
#include "pifield/generator.hpp"
#include "pifield/renderer.hpp"

namespace pifield {

// ---------------------------------------------------------------------------
// Meshes

struct Mesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<std::uint32_t, 3>> faces;

  bool empty() const { return faces.empty(); }

  std::size_t edge_count() const {
    std::set<std::pair<std::uint32_t, std::uint32_t>> e;
    for (const auto& f : faces)
      for (int k = 0; k < 3; ++k) e.insert(std::minmax(f[k], f[(k + 1) % 3]));
    return e.size();
  }

  /// V - E + F over the vertices that faces reference.
  long euler_characteristic() const {
    std::set<std::uint32_t> used;
    for (const auto& f : faces) used.insert(f.begin(), f.end());
    return long(used.size()) - long(edge_count()) + long(faces.size());
  }

  /// Every directed edge appears once and its reverse once: a closed, consistently oriented surface.
  bool is_closed() const {
    if (faces.empty()) return false;
    std::map<std::pair<std::uint32_t, std::uint32_t>, int> directed;
    for (const auto& f : faces)
      for (int k = 0; k < 3; ++k) ++directed[{f[k], f[(k + 1) % 3]}];
    for (const auto& [e, n] : directed) {
      if (n != 1) return false;
      auto it = directed.find({e.second, e.first});
      if (it == directed.end() || it->second != 1) return false;
    }
    return true;
  }

  Vec3 face_normal(std::size_t i) const {
    const auto& f = faces[i];
    return cross(vertices[f[1]] - vertices[f[0]], vertices[f[2]] - vertices[f[0]]);
  }
};

inline void write_obj(const std::string& path, const Mesh& m) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("mesh: cannot write " + path);
  out.precision(9);
  for (const auto& v : m.vertices) out << "v " << v.x << ' ' << v.y << ' ' << v.z << '\n';
  for (const auto& f : m.faces) out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
  if (!out) throw std::runtime_error("mesh: write failed for " + path);
}

// ---------------------------------------------------------------------------
// Density grids

struct DensityGrid {
  std::size_t res = 0;  // lattice points per axis
  Vec3 lo, hi;
  std::vector<double> values;  // x fastest, then y, then z

  double at(std::size_t i, std::size_t j, std::size_t k) const { return values[(k * res + j) * res + i]; }

  Vec3 point(long i, long j, long k) const {
    // also valid one step outside the lattice
    auto c = [&](double a, double b, long n) { return a + (b - a) * (double(n) / double(res - 1)); };
    return {c(lo.x, hi.x, i), c(lo.y, hi.y, j), c(lo.z, hi.z, k)};
  }
};

inline void check_grid_request(const Vec3& lo, const Vec3& hi, std::size_t res) {
  if (res < 2) throw std::invalid_argument("density grid: need at least 2 lattice points per axis");
  if (!(lo.x < hi.x && lo.y < hi.y && lo.z < hi.z)) throw std::invalid_argument("density grid: bounds must be ordered");
}

/// Density of an arbitrary scalar field at every lattice point.
inline DensityGrid sample_density_grid(const std::function<double(const Vec3&)>& f, const Vec3& lo, const Vec3& hi,
                                       std::size_t res) {
  check_grid_request(lo, hi, res);
  DensityGrid g{res, lo, hi, std::vector<double>(res * res * res)};
  parallel_for(res, [&](std::size_t k) {
    for (std::size_t j = 0; j < res; ++j)
      for (std::size_t i = 0; i < res; ++i) g.values[(k * res + j) * res + i] = f(g.point(long(i), long(j), long(k)));
  });
  return g;
}

/// Generator density for a conditioning; no view direction is involved.
template <class T>
DensityGrid sample_density_grid(const Generator<T>& gen, const Film<T>& film, const Vec3& lo, const Vec3& hi,
                                std::size_t res) {
  check_grid_request(lo, hi, res);
  DensityGrid g{res, lo, hi, std::vector<double>(res * res * res)};
  parallel_for(res, [&](std::size_t k) {
    Tensor<T> x(Shape{res * res, 3});
    for (std::size_t j = 0; j < res; ++j)
      for (std::size_t i = 0; i < res; ++i) {
        const Vec3 p = g.point(long(i), long(j), long(k));
        for (int c = 0; c < 3; ++c) x.at(j * res + i, c) = T(p[c]);
      }
    const Tensor<T> s = gen.density(x, film);
    for (std::size_t n = 0; n < res * res; ++n) {
      if (!std::isfinite(double(s[n]))) throw std::runtime_error("density grid: non-finite density");
      g.values[k * res * res + n] = double(s[n]);
    }
  });
  return g;
}

// ---------------------------------------------------------------------------
// Marching cubes

namespace detail {

// unit-cube corners and edges in the customary numbering
inline constexpr std::array<std::array<int, 3>, 8> kCorner{
    {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0}, {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}}};
inline constexpr std::array<std::array<int, 2>, 12> kEdge{
    {{0, 1}, {1, 2}, {2, 3}, {3, 0}, {4, 5}, {5, 6}, {6, 7}, {7, 4}, {0, 4}, {1, 5}, {2, 6}, {3, 7}}};
// faces, corners counter-clockwise seen from outside the cube
inline constexpr std::array<std::array<int, 4>, 6> kFace{
    {{0, 3, 2, 1}, {4, 5, 6, 7}, {0, 1, 5, 4}, {3, 7, 6, 2}, {0, 4, 7, 3}, {1, 2, 6, 5}}};

inline int edge_between(int a, int b) {
  for (int e = 0; e < 12; ++e)
    if ((kEdge[e][0] == a && kEdge[e][1] == b) || (kEdge[e][0] == b && kEdge[e][1] == a)) return e;
  return -1;
}

using CaseTable = std::array<std::vector<std::array<int, 3>>, 256>;

// Edges lying on a common cube face. A diagonal between two of them would
// also be a candidate in the neighbouring cube, so loops never use one.
inline bool share_face(int a, int b) {
  for (const auto& q : kFace) {
    bool ha = false, hb = false;
    for (int i = 0; i < 4; ++i) {
      const int e = edge_between(q[i], q[(i + 1) & 3]);
      ha |= e == a;
      hb |= e == b;
    }
    if (ha && hb) return true;
  }
  return false;
}

// Triangulates polygon `p` (in order) using only sides and interior diagonals.
inline bool triangulate_loop(const std::vector<int>& p, std::vector<std::array<int, 3>>& out) {
  const std::size_t n = p.size();
  if (n < 3) return n == 0;
  if (n == 3) {
    out.push_back({p[0], p[1], p[2]});
    return true;
  }
  // the triangle on side (p0, p1) has apex p[k]
  for (std::size_t k = 2; k < n; ++k) {
    if (k != 2 && share_face(p[1], p[k])) continue;
    if (k != n - 1 && share_face(p[k], p[0])) continue;
    std::vector<std::array<int, 3>> tris{{p[0], p[1], p[k]}};
    std::vector<int> left(p.begin() + 1, p.begin() + std::ptrdiff_t(k) + 1);
    std::vector<int> right(p.begin() + std::ptrdiff_t(k), p.end());
    right.push_back(p[0]);
    if (left.size() < 3) left.clear();
    if (right.size() < 3) right.clear();
    if (triangulate_loop(left, tris) && triangulate_loop(right, tris)) {
      out.insert(out.end(), tris.begin(), tris.end());
      return true;
    }
  }
  return false;
}

// Triangles per corner configuration. On every face each run of inside
// corners is cut off by its own segment, so neighbouring cubes agree on shared
// faces and the surface is watertight. Segments run entry -> exit, which
// orients triangles away from the inside corners.
inline CaseTable build_case_table() {
  CaseTable table;
  for (int c = 0; c < 256; ++c) {
    std::array<int, 12> next;
    next.fill(-1);
    for (const auto& q : kFace) {
      auto in = [&](int i) { return (c >> q[i & 3]) & 1; };
      for (int i = 0; i < 4; ++i) {
        if (!(in(i) && !in(i + 1))) continue;
        const int exit = edge_between(q[i], q[(i + 1) & 3]);
        int j = i;
        while (in(j)) j = (j + 3) & 3;  // walk back to the outside corner before this run
        const int entry = edge_between(q[j], q[(j + 1) & 3]);
        next[entry] = exit;
      }
    }
    std::array<bool, 12> seen{};
    for (int e = 0; e < 12; ++e) {
      if (next[e] < 0 || seen[e]) continue;
      std::vector<int> loop;
      for (int k = e; !seen[k]; k = next[k]) {
        seen[k] = true;
        loop.push_back(k);
      }
      if (!triangulate_loop(loop, table[c])) throw std::logic_error("marching cubes: no interior triangulation");
    }
  }
  return table;
}

inline const CaseTable& case_table() {
  static const CaseTable t = build_case_table();
  return t;
}

}  // namespace detail

struct MarchingCubesOptions {
  double iso = 10;
  bool close_boundary = true;  // treat everything outside the grid as empty space
};

/// Isosurface {sigma = iso}; inside (sigma > iso) lies behind each face's normal.
inline Mesh marching_cubes(const DensityGrid& g, const MarchingCubesOptions& opt = {}) {
  if (!std::isfinite(opt.iso)) throw std::invalid_argument("marching cubes: iso level must be finite");
  if (g.res < 2 || g.values.size() != g.res * g.res * g.res) throw std::invalid_argument("marching cubes: bad grid");
  const auto& table = detail::case_table();
  const long n = long(g.res);
  double vmax = opt.iso;
  for (double v : g.values) {
    if (!std::isfinite(v)) throw std::invalid_argument("marching cubes: non-finite density");
    vmax = std::max(vmax, v);
  }
  const double pad = 2 * opt.iso - vmax - 1;  // strictly below iso, so every crossing into the pad is interior
  auto value = [&](long i, long j, long k) {
    if (i < 0 || j < 0 || k < 0 || i >= n || j >= n || k >= n) return pad;
    return g.at(std::size_t(i), std::size_t(j), std::size_t(k));
  };
  const long lo = opt.close_boundary ? -1 : 0, hi = opt.close_boundary ? n : n - 1;
  const long span = n + 2;
  auto point_id = [&](long i, long j, long k) { return std::uint64_t(((k + 1) * span + (j + 1)) * span + (i + 1)); };

  Mesh m;
  std::unordered_map<std::uint64_t, std::uint32_t> vid;
  const Vec3 cell = {(g.hi.x - g.lo.x) / double(n - 1), (g.hi.y - g.lo.y) / double(n - 1),
                     (g.hi.z - g.lo.z) / double(n - 1)};
  const double min_area = 1e-12 * std::min({cell.x * cell.y, cell.y * cell.z, cell.x * cell.z});

  for (long k = lo; k < hi; ++k)
    for (long j = lo; j < hi; ++j)
      for (long i = lo; i < hi; ++i) {
        std::array<double, 8> v;
        int c = 0;
        for (int q = 0; q < 8; ++q) {
          const auto& o = detail::kCorner[q];
          v[q] = value(i + o[0], j + o[1], k + o[2]);
          if (v[q] > opt.iso) c |= 1 << q;
        }
        if (c == 0 || c == 255) continue;
        std::array<std::uint32_t, 12> ev{};
        auto vertex = [&](int e) {
          const int a = detail::kEdge[e][0], b = detail::kEdge[e][1];
          const auto& oa = detail::kCorner[a];
          const auto& ob = detail::kCorner[b];
          const std::uint64_t ia = point_id(i + oa[0], j + oa[1], k + oa[2]);
          const std::uint64_t ib = point_id(i + ob[0], j + ob[1], k + ob[2]);
          const std::uint64_t key = std::min(ia, ib) * 3 + std::uint64_t(oa[0] != ob[0] ? 0 : (oa[1] != ob[1] ? 1 : 2));
          auto it = vid.find(key);
          if (it != vid.end()) return it->second;
          // keep vertices strictly inside their edge so no two coincide
          const double t = std::clamp((opt.iso - v[a]) / (v[b] - v[a]), 1e-4, 1 - 1e-4);
          const Vec3 pa = g.point(i + oa[0], j + oa[1], k + oa[2]), pb = g.point(i + ob[0], j + ob[1], k + ob[2]);
          m.vertices.push_back(pa + t * (pb - pa));
          const auto id = std::uint32_t(m.vertices.size() - 1);
          vid.emplace(key, id);
          return id;
        };
        for (int e = 0; e < 12; ++e) {
          const int a = detail::kEdge[e][0], b = detail::kEdge[e][1];
          if (((c >> a) & 1) != ((c >> b) & 1)) ev[e] = vertex(e);
        }
        for (const auto& tri : table[c]) {
          const std::array<std::uint32_t, 3> f{ev[tri[0]], ev[tri[1]], ev[tri[2]]};
          const Vec3 nrm = cross(m.vertices[f[1]] - m.vertices[f[0]], m.vertices[f[2]] - m.vertices[f[0]]);
          if (0.5 * norm(nrm) > min_area) m.faces.push_back(f);
        }
      }
  return m;
}

// ---------------------------------------------------------------------------
// Depth-map meshing

struct DepthMeshOptions {
  double min_acc = 0.5;    // pixels with less accumulated opacity are holes
  double max_jump = 0.05;  // largest depth step bridged by a triangle
};

/// Unprojects each valid pixel along its ray and stitches grid neighbours,
/// with triangles facing the camera.
template <class T>
Mesh depth_to_mesh(const Tensor<T>& depth, const Tensor<T>& acc, const CameraPose& pose,
                   const DepthMeshOptions& opt = {}) {
  if (depth.rank() != 2 || acc.shape() != depth.shape())
    throw std::invalid_argument("depth mesh: depth " + shape_str(depth.shape()) + " and opacity " +
                                shape_str(acc.shape()) + " must be matching [H x W] maps");
  const std::size_t h = depth.dim(0), w = depth.dim(1);
  const auto rays = generate_rays(CameraFrame::from_pose(pose), w, h, 0, 1);
  Mesh m;
  std::vector<long> id(h * w, -1);
  for (std::size_t p = 0; p < h * w; ++p) {
    const double d = double(depth[p]);
    if (double(acc[p]) < opt.min_acc || !std::isfinite(d)) continue;
    id[p] = long(m.vertices.size());
    m.vertices.push_back(rays[p].o + d * rays[p].d);
  }
  auto add = [&](std::size_t a, std::size_t b, std::size_t c) {
    if (id[a] < 0 || id[b] < 0 || id[c] < 0) return;
    const double da = double(depth[a]), db = double(depth[b]), dc = double(depth[c]);
    if (std::max({da, db, dc}) - std::min({da, db, dc}) > opt.max_jump) return;
    m.faces.push_back({std::uint32_t(id[a]), std::uint32_t(id[b]), std::uint32_t(id[c])});
  };
  for (std::size_t i = 0; i + 1 < h; ++i)
    for (std::size_t j = 0; j + 1 < w; ++j) {
      const std::size_t p = i * w + j;
      add(p, p + w, p + 1);
      add(p + w, p + w + 1, p + 1);
    }
  return m;
}

// ---------------------------------------------------------------------------
// Conditioning arithmetic

namespace detail {
template <class T, class F>
Film<T> zip_film(const Film<T>& a, const Film<T>& b, F f, const char* what) {
  if (a.gamma.shape() != b.gamma.shape() || a.beta.shape() != b.beta.shape() || a.z.shape() != b.z.shape())
    throw std::invalid_argument(std::string(what) + ": conditioning shapes differ (" + shape_str(a.gamma.shape()) +
                                " vs " + shape_str(b.gamma.shape()) + ")");
  Film<T> r = a;
  auto apply = [&](Tensor<T>& out, const Tensor<T>& x, const Tensor<T>& y) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i], y[i]);
  };
  apply(r.gamma, a.gamma, b.gamma);
  apply(r.beta, a.beta, b.beta);
  apply(r.z, a.z, b.z);
  return r;
}
}  // namespace detail

/// (1 - t) * a + t * b
template <class T>
Film<T> interpolate_film(const Film<T>& a, const Film<T>& b, double t) {
  return detail::zip_film(a, b, [t](T x, T y) { return T((1.0L - t) * (long double)x + t * (long double)y); },
                          "interpolate");
}

/// avg + psi * (film - avg), evaluated as a convex combination so psi = 0 and
/// psi = 1 return the endpoints exactly.
template <class T>
Film<T> truncate_film(const Film<T>& film, const Film<T>& avg, double psi) {
  return detail::zip_film(avg, film, [psi](T a, T f) { return T((1.0L - psi) * (long double)a + psi * (long double)f); },
                          "truncate");
}

/// Elementwise mean of map_latent over `count` standard-normal latents.
template <class T>
Film<T> average_film(const Generator<T>& gen, std::size_t count, std::uint64_t seed) {
  if (count < 1) throw std::invalid_argument("average_film: count must be >= 1");
  const std::size_t block = 64, blocks = (count + block - 1) / block;
  std::vector<std::vector<double>> partial(blocks);
  const Film<T> probe = gen.map_latent(sample_latent<T>(gen.cfg.z_dim, seed, 0));
  const std::size_t ng = probe.gamma.size(), nb = probe.beta.size(), nz = probe.z.size();
  parallel_for(blocks, [&](std::size_t b) {
    std::vector<double> acc(ng + nb + nz, 0.0);
    for (std::size_t i = b * block; i < std::min(count, (b + 1) * block); ++i) {
      const Film<T> f = i == 0 ? probe : gen.map_latent(sample_latent<T>(gen.cfg.z_dim, seed, i));
      for (std::size_t k = 0; k < ng; ++k) acc[k] += double(f.gamma[k]);
      for (std::size_t k = 0; k < nb; ++k) acc[ng + k] += double(f.beta[k]);
      for (std::size_t k = 0; k < nz; ++k) acc[ng + nb + k] += double(f.z[k]);
    }
    partial[b] = std::move(acc);
  });
  std::vector<double> total(ng + nb + nz, 0.0);
  for (const auto& p : partial)
    for (std::size_t k = 0; k < total.size(); ++k) total[k] += p[k];
  Film<T> r = probe;
  for (std::size_t k = 0; k < ng; ++k) r.gamma[k] = T(total[k] / double(count));
  for (std::size_t k = 0; k < nb; ++k) r.beta[k] = T(total[ng + k] / double(count));
  for (std::size_t k = 0; k < nz; ++k) r.z[k] = T(total[ng + nb + k] / double(count));
  return r;
}

// ---------------------------------------------------------------------------
// Inversion

struct InversionConfig {
  std::size_t iterations = 700;
  double lr = 0.01;
  double lr_decay = 0.5;
  std::size_t decay_every = 200;
  double penalty = 0.1;
  std::size_t average_count = 10000;
  double beta1 = 0.9, beta2 = 0.999;

  void validate() const {
    if (iterations < 1 || decay_every < 1 || average_count < 1)
      throw std::invalid_argument("invert: iterations, decay interval and averaging count must be >= 1");
    if (!(lr > 0 && lr_decay > 0 && penalty >= 0)) throw std::invalid_argument("invert: lr and decay must be > 0, penalty >= 0");
  }
};

template <class T>
struct InversionResult {
  Film<T> film;
  std::vector<double> loss;  // objective per iteration, before that iteration's update
  std::vector<double> mse;
  double final_mse = 0;      // of the returned (best) conditioning
  double psnr() const { return final_mse > 0 ? -10.0 * std::log10(final_mse) : std::numeric_limits<double>::infinity(); }
};

inline double psnr_from_mse(double mse) { return -10.0 * std::log10(mse); }

/// Fits the conditioning to `target` [H x W x 3] seen from `pose`, with the
/// field frozen. Offsets are optimized in the mapping network's raw output
/// units (frequencies divided by their scale), starting from `init` and
/// penalized by their mean square distance from `anchor`. Returns the best
/// iterate.
template <class T>
InversionResult<T> invert(const Generator<T>& gen, const Tensor<T>& target, const CameraPose& pose,
                          const RenderConfig& rc_in, RenderKey key, const InversionConfig& cfg, const Film<T>& init,
                          const Film<T>& anchor) {
  cfg.validate();
  gen.check_film(init);
  gen.check_film(anchor);
  if (target.rank() != 3 || target.dim(2) != 3)
    throw std::invalid_argument("invert: target must be [H x W x 3], got " + shape_str(target.shape()));
  RenderConfig rc = rc_in;
  rc.height = target.dim(0);
  rc.width = target.dim(1);
  const bool concat = gen.cfg.conditioning == Conditioning::concat;
  const double gscale = gen.cfg.gamma_scale();

  // offsets relative to the anchor, in raw units
  ParamSet<T> off;
  if (concat) {
    Tensor<T> dz(init.z.shape());
    for (std::size_t i = 0; i < dz.size(); ++i) dz[i] = init.z[i] - anchor.z[i];
    off.add("z", dz);
  } else {
    Tensor<T> dg(init.gamma.shape()), db(init.beta.shape());
    for (std::size_t i = 0; i < dg.size(); ++i) dg[i] = T((double(init.gamma[i]) - double(anchor.gamma[i])) / gscale);
    for (std::size_t i = 0; i < db.size(); ++i) db[i] = init.beta[i] - anchor.beta[i];
    off.add("gamma", dg);
    off.add("beta", db);
  }
  AdamState<T> opt(off, cfg.lr, cfg.beta1, cfg.beta2);
  const double inv_n = 1.0 / double(off.scalar_count());
  const Tensor<T> target_chw = hwc_to_chw(target);

  auto build = [&](Tape<T>& tape, const std::vector<Var<T>>& o) {
    FilmVars<T> fv;
    if (concat) {
      fv.gamma = tape.constant(anchor.gamma);
      fv.beta = tape.constant(anchor.beta);
      fv.z = ops::add(tape.constant(anchor.z), o[0]);
    } else {
      fv.gamma = ops::add(tape.constant(anchor.gamma), ops::scale(o[0], T(gscale)));
      fv.beta = ops::add(tape.constant(anchor.beta), o[1]);
    }
    return fv;
  };
  auto film_of = [&](const ParamSet<T>& o) {
    Tape<T> tape;
    typename Tape<T>::NoGrad ng(tape);
    auto fv = build(tape, o.bind(tape, false));
    Film<T> f{fv.gamma.value(), fv.beta.value(), concat ? fv.z.value() : Tensor<T>()};
    return f;
  };

  struct Eval {
    double loss, mse;
    std::vector<Tensor<T>> grad;
  };
  auto evaluate = [&](std::size_t it) {
    Tape<T> tape;
    auto o = off.bind(tape, true);
    auto fp = gen.field.bind(tape, false);
    auto img = render_on_tape(gen, fp, build(tape, o), pose, rc, key).image;
    auto mse = ops::mean_all(ops::square(ops::sub(img, tape.constant(target_chw))));
    Var<T> reg = ops::sum_all(ops::square(o[0]));
    for (std::size_t i = 1; i < o.size(); ++i) reg = ops::add(reg, ops::sum_all(ops::square(o[i])));
    auto loss = ops::add(mse, ops::scale(reg, T(cfg.penalty * inv_n)));
    Eval e{double(loss.value()[0]), double(mse.value()[0]), {}};
    if (!std::isfinite(e.loss))
      throw std::runtime_error("invert: non-finite loss at iteration " + std::to_string(it) + " (mse " +
                               std::to_string(e.mse) + ")");
    e.grad = tape.gradients(loss, std::span<const Var<T>>(o));
    return e;
  };

  InversionResult<T> res;
  ParamSet<T> best = off;
  double best_loss = std::numeric_limits<double>::infinity(), best_mse = 0;
  for (std::size_t it = 0;; ++it) {
    Eval e = evaluate(it);
    // each decay event restarts from the best conditioning found so far
    if (it > 0 && it % cfg.decay_every == 0 && e.loss > best_loss) {
      off = best;
      e = evaluate(it);
    }
    if (e.loss < best_loss) {
      best_loss = e.loss;
      best_mse = e.mse;
      best = off;
    }
    if (it == cfg.iterations) break;
    res.loss.push_back(e.loss);
    res.mse.push_back(e.mse);
    opt.lr = cfg.lr * std::pow(cfg.lr_decay, double((it + 1) / cfg.decay_every));
    if (!adam_step(off, e.grad, opt, "invert"))
      throw std::runtime_error("invert: non-finite gradient at iteration " + std::to_string(it));
  }
  res.final_mse = best_mse;
  res.film = film_of(best);
  return res;
}

// ---------------------------------------------------------------------------
// Camera trajectories

/// `frames` poses linearly interpolated from `a` to `b` (pitch, yaw, radius, fov).
inline std::vector<CameraPose> pose_sweep(const CameraPose& a, const CameraPose& b, std::size_t frames) {
  if (frames < 1) throw std::invalid_argument("sweep: need at least one frame");
  std::vector<CameraPose> out;
  for (std::size_t i = 0; i < frames; ++i) {
    const double t = frames == 1 ? 0.0 : double(i) / double(frames - 1);
    CameraPose p = a;
    p.pitch = a.pitch + t * (b.pitch - a.pitch);
    p.yaw = a.yaw + t * (b.yaw - a.yaw);
    p.radius = a.radius + t * (b.radius - a.radius);
    p.fov_deg = a.fov_deg + t * (b.fov_deg - a.fov_deg);
    out.push_back(p);
  }
  return out;
}

}  // namespace pifield
