#include "tipnet/log.hpp"

#include <iostream>
#include <mutex>

namespace tipnet::log {

namespace {

std::mutex& sink_mutex() {
  static std::mutex m;
  return m;
}

Sink& current_sink() {
  static Sink sink = [](Level level, const std::string& message) {
    if (level == Level::Warning) {
      std::cerr << "warning: " << message << '\n';
    } else if (level == Level::Error) {
      std::cerr << "error: " << message << '\n';
    }
  };
  return sink;
}

}  // namespace

Sink set_sink(Sink sink) {
  std::lock_guard lock(sink_mutex());
  auto previous = std::move(current_sink());
  current_sink() = std::move(sink);
  return previous;
}

void write(Level level, const std::string& message) {
  std::lock_guard lock(sink_mutex());
  if (current_sink()) current_sink()(level, message);
}

}  // namespace tipnet::log
