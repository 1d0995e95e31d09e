#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>

#include "pifield/config.hpp"
#include "pifield/training.hpp"

namespace pifield {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(char(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(std::uint8_t(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(std::uint8_t(v >> (8 * i)));
  }
  void str(const std::string& s) {
    u32(std::uint32_t(s.size()));
    buf_ += s;
  }
  template <class T>
  void tensor(const std::string& name, const Tensor<T>& t) {
    str(name);
    u32(std::uint32_t(t.rank()));
    for (std::size_t d : t.shape()) u64(d);
    for (std::size_t i = 0; i < t.size(); ++i) {
      if constexpr (sizeof(T) == 4) u32(std::bit_cast<std::uint32_t>(t[i]));
      else u64(std::bit_cast<std::uint64_t>(t[i]));
    }
  }
  std::string& bytes() { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(const std::string& b, std::size_t end) : b_(b), end_(end) {}
  std::uint8_t u8() {
    need(1);
    return std::uint8_t(b_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(b_[pos_++])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::uint8_t(b_[pos_++])) << (8 * i);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  template <class T>
  Tensor<T> tensor(const std::string& name) {
    const std::uint32_t rank = u32();
    if (rank > 8) throw CheckpointError("checkpoint: segment " + name + " has rank " + std::to_string(rank));
    Shape s(rank);
    std::size_t count = 1;
    for (auto& d : s) {
      d = u64();
      count *= d;
    }
    need(count * sizeof(T));
    Tensor<T> t(s);
    for (std::size_t i = 0; i < count; ++i) {
      if constexpr (sizeof(T) == 4) t[i] = std::bit_cast<T>(u32());
      else t[i] = std::bit_cast<T>(u64());
    }
    return t;
  }
  bool done() const { return pos_ == end_; }

 private:
  void need(std::size_t n) const {
    if (end_ - pos_ < n) throw CheckpointError("checkpoint: truncated payload");
  }
  const std::string& b_;
  std::size_t end_, pos_ = 0;
};

inline std::uint32_t crc(const std::string& b, std::size_t n) {
  return std::uint32_t(::crc32(::crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(b.data()), uInt(n)));
}

template <class T>
void for_each_segment(TrainState<T>& s, const std::function<void(const std::string&, Tensor<T>&)>& f) {
  auto params = [&](const std::string& prefix, ParamSet<T>& p) {
    for (std::size_t i = 0; i < p.size(); ++i) f(prefix + p.name(i), p[i]);
  };
  auto list = [&](const std::string& prefix, const ParamSet<T>& names, std::vector<Tensor<T>>& v) {
    for (std::size_t i = 0; i < names.size(); ++i) f(prefix + names.name(i), v[i]);
  };
  params("gen.field/", s.gen.field);
  params("gen.mapping/", s.gen.mapping);
  params("disc/", s.disc.params);
  list("adam.field.m/", s.gen.field, s.opt_field.m);
  list("adam.field.v/", s.gen.field, s.opt_field.v);
  list("adam.mapping.m/", s.gen.mapping, s.opt_mapping.m);
  list("adam.mapping.v/", s.gen.mapping, s.opt_mapping.v);
  list("adam.disc.m/", s.disc.params, s.opt_disc.m);
  list("adam.disc.v/", s.disc.params, s.opt_disc.v);
  list("ema.field/", s.gen.field, s.ema_field.shadow);
  list("ema.mapping/", s.gen.mapping, s.ema_mapping.shadow);
}

template <class T>
std::map<std::string, std::uint64_t*> scalar_slots(TrainState<T>& s, std::vector<double*>& doubles) {
  std::map<std::string, std::uint64_t*> ints{{"iter", &s.iter},
                                             {"samples_consumed", &s.samples_consumed},
                                             {"disc.stage", &s.disc.stage},
                                             {"disc.fade_step", &s.disc.fade_step},
                                             {"adam.field.step", &s.opt_field.step},
                                             {"adam.field.skipped", &s.opt_field.skipped},
                                             {"adam.mapping.step", &s.opt_mapping.step},
                                             {"adam.mapping.skipped", &s.opt_mapping.skipped},
                                             {"adam.disc.step", &s.opt_disc.step},
                                             {"adam.disc.skipped", &s.opt_disc.skipped}};
  doubles = {&s.disc.alpha, &s.opt_field.lr, &s.opt_mapping.lr, &s.opt_disc.lr};
  return ints;
}
inline const char* kDoubleScalars[] = {"disc.alpha", "adam.field.lr", "adam.mapping.lr", "adam.disc.lr"};

static_assert(sizeof(std::size_t) == sizeof(std::uint64_t));

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot read checkpoint " + path.string());
  std::string b((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return b;
}

}  // namespace detail

struct CheckpointHeader {
  std::uint32_t version = 0;
  std::uint32_t width = 0;  // bytes per stored scalar: 4 for float runs, 8 for double runs
  Config config;
};

/// Writes the full training state: config snapshot, parameters, optimizer
/// moments, EMA weights and counters. `cfg` supplies the keys outside training.
template <class T>
void save_checkpoint(const TrainState<T>& state, Config cfg, const std::filesystem::path& path) {
  static_assert(sizeof(T) == 4 || sizeof(T) == 8);
  auto& s = const_cast<TrainState<T>&>(state);
  cfg.train = s.cfg;
  cfg.precision = sizeof(T) == 4 ? "float" : "double";
  detail::ByteWriter w;
  w.bytes() = "PIFD";
  w.u32(kCheckpointVersion);
  w.u32(sizeof(T));
  w.str(serialize_config(cfg));

  std::uint32_t nseg = 0;
  detail::for_each_segment<T>(s, [&](const std::string&, Tensor<T>&) { ++nseg; });
  w.u32(nseg);
  detail::for_each_segment<T>(s, [&](const std::string& n, Tensor<T>& t) { w.tensor(n, t); });

  std::vector<double*> doubles;
  const auto ints = detail::scalar_slots(s, doubles);
  w.u32(std::uint32_t(ints.size() + doubles.size()));
  for (const auto& [n, p] : ints) {
    w.str(n);
    w.u64(*p);
  }
  for (std::size_t i = 0; i < doubles.size(); ++i) {
    w.str(detail::kDoubleScalars[i]);
    w.u64(std::bit_cast<std::uint64_t>(*doubles[i]));
  }
  w.u32(detail::crc(w.bytes(), w.bytes().size()));

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot write checkpoint " + tmp.string());
    f.write(w.bytes().data(), std::streamsize(w.bytes().size()));
    if (!f) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

namespace detail {

inline CheckpointHeader read_header(const std::string& b, ByteReader& r) {
  if (b.size() < 16 || b.compare(0, 4, "PIFD") != 0) throw CheckpointError("checkpoint: bad magic");
  const std::size_t body = b.size() - 4;
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= std::uint32_t(std::uint8_t(b[body + i])) << (8 * i);
  if (stored != crc(b, body)) throw CheckpointError("checkpoint: checksum mismatch (file corrupt)");
  for (int i = 0; i < 4; ++i) r.u8();
  CheckpointHeader h;
  h.version = r.u32();
  if (h.version > kCheckpointVersion)
    throw CheckpointError("checkpoint: format version " + std::to_string(h.version) + " is newer than supported " +
                          std::to_string(kCheckpointVersion));
  h.width = r.u32();
  if (h.width != 4 && h.width != 8) throw CheckpointError("checkpoint: bad scalar width " + std::to_string(h.width));
  try {
    h.config = parse_config(r.str());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint: config snapshot: ") + e.what());
  }
  return h;
}

}  // namespace detail

/// Validates the checksum and version and returns the header.
inline CheckpointHeader read_checkpoint_header(const std::filesystem::path& path) {
  const std::string b = detail::read_file(path);
  detail::ByteReader r(b, b.size() < 4 ? 0 : b.size() - 4);
  return detail::read_header(b, r);
}

template <class T>
TrainState<T> load_checkpoint(const std::filesystem::path& path, Config* cfg_out = nullptr) {
  const std::string b = detail::read_file(path);
  detail::ByteReader r(b, b.size() < 4 ? 0 : b.size() - 4);
  const CheckpointHeader h = detail::read_header(b, r);
  if (h.width != sizeof(T))
    throw CheckpointError("checkpoint: stores " + std::to_string(8 * h.width) + "-bit scalars, requested " +
                          std::to_string(8 * sizeof(T)) + "-bit");

  TrainState<T> s = TrainState<T>::create(h.config.train);
  std::map<std::string, Tensor<T>> segs;
  const std::uint32_t nseg = r.u32();
  for (std::uint32_t i = 0; i < nseg; ++i) {
    auto name = r.str();
    auto t = r.tensor<T>(name);
    if (!segs.emplace(name, std::move(t)).second) throw CheckpointError("checkpoint: duplicate segment " + name);
  }
  std::size_t used = 0;
  detail::for_each_segment<T>(s, [&](const std::string& n, Tensor<T>& t) {
    auto it = segs.find(n);
    if (it == segs.end()) throw CheckpointError("checkpoint: missing segment " + n);
    if (it->second.shape() != t.shape())
      throw CheckpointError("checkpoint: segment " + n + " has shape " + shape_str(it->second.shape()) + ", expected " +
                            shape_str(t.shape()));
    t = std::move(it->second);
    ++used;
  });
  if (used != segs.size()) throw CheckpointError("checkpoint: unexpected extra segments");

  std::vector<double*> doubles;
  auto ints = detail::scalar_slots(s, doubles);
  std::map<std::string, std::uint64_t> raw;
  const std::uint32_t nsc = r.u32();
  for (std::uint32_t i = 0; i < nsc; ++i) {
    auto n = r.str();
    raw[n] = r.u64();
  }
  auto take = [&](const std::string& n) {
    auto it = raw.find(n);
    if (it == raw.end()) throw CheckpointError("checkpoint: missing scalar " + n);
    return it->second;
  };
  for (auto& [n, p] : ints) *p = take(n);
  for (std::size_t i = 0; i < doubles.size(); ++i) *doubles[i] = std::bit_cast<double>(take(detail::kDoubleScalars[i]));
  if (!r.done()) throw CheckpointError("checkpoint: trailing bytes before checksum");
  if (s.disc.stage >= s.cfg.stages()) throw CheckpointError("checkpoint: stage out of range");
  if (cfg_out) *cfg_out = h.config;
  return s;
}

}  // namespace pifield
