#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace pifield {

namespace detail {
inline std::size_t& thread_override() {
  static std::size_t n = 0;
  return n;
}
inline bool& inside_worker() {
  thread_local bool v = false;
  return v;
}
}  // namespace detail

/// Worker cap: set_thread_count() if called, else PIFIELD_THREADS, else the hardware count.
inline std::size_t thread_count() {
  if (detail::thread_override()) return detail::thread_override();
  if (const char* env = std::getenv("PIFIELD_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return std::size_t(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

inline void set_thread_count(std::size_t n) { detail::thread_override() = n; }

/// Calls f(i) for i in [0, n). Indices are split into contiguous static
/// ranges; f must write only to slots owned by i, so the result cannot
/// depend on the number of workers.
template <class F>
void parallel_for(std::size_t n, F&& f) {
  // nested calls run inline on the calling worker
  const std::size_t workers = detail::inside_worker() ? 1 : std::min(thread_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::exception_ptr err;
  std::mutex mu;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t lo = n * w / workers, hi = n * (w + 1) / workers;
    pool.emplace_back([&, lo, hi] {
      detail::inside_worker() = true;
      try {
        for (std::size_t i = lo; i < hi; ++i) f(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!err) err = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

// Large per-step buffers stay on the heap instead of going through mmap.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

}  // namespace pifield
