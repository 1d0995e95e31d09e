#pragma once

// Counter-based random numbers. A draw is a pure function of its key, so the
// result never depends on evaluation order or thread scheduling.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>

namespace pifield {

inline constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline constexpr std::uint64_t hash_key(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x6a09e667f3bcc909ULL;
  for (auto p : parts) h = mix64(h ^ mix64(p));
  return h;
}

/// [0, 1) with 53 random bits.
inline double to_unit(std::uint64_t h) { return double(h >> 11) * 0x1.0p-53; }

/// (0, 1): never returns 0, safe for log().
inline double to_open_unit(std::uint64_t h) { return (double(h >> 11) + 0.5) * 0x1.0p-53; }

// Stream identifiers keep draws for different purposes independent.
enum class Stream : std::uint64_t {
  init = 1,
  latent = 2,
  pose = 3,
  ray_samples = 4,
  shuffle = 5,
  scene = 6,
  fine_samples = 7,
  eval = 8,
  average = 9,
};

/// Sequential generator over a fixed key: draw i is hash(key, i).
class Rng {
 public:
  Rng(std::uint64_t seed, Stream stream, std::uint64_t a = 0, std::uint64_t b = 0)
      : key_(hash_key({seed, std::uint64_t(stream), a, b})) {}

  std::uint64_t next_u64() { return mix64(key_ ^ mix64(counter_++)); }
  double uniform() { return to_unit(next_u64()); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal() {
    const double u1 = to_open_unit(next_u64());
    const double u2 = to_unit(next_u64());
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace pifield
