#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <string>

namespace pifield {

using LogSink = std::function<void(const std::string&)>;

inline LogSink& log_sink() {
  static LogSink sink = [](const std::string& m) { std::cerr << m << '\n'; };
  return sink;
}

inline void log_event(const std::string& msg) {
  static std::mutex mu;
  std::lock_guard<std::mutex> lock(mu);
  log_sink()(msg);
}

}  // namespace pifield
