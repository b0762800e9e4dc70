#pragma once

#include <functional>
#include <string>

namespace tipnet::log {

enum class Level { Debug, Info, Warning, Error };

using Sink = std::function<void(Level, const std::string&)>;

/// Replace the process-wide sink (default writes warnings and errors to stderr).
/// Returns the previous sink so callers can restore it.
Sink set_sink(Sink sink);

void write(Level level, const std::string& message);
inline void info(const std::string& m) { write(Level::Info, m); }
inline void warn(const std::string& m) { write(Level::Warning, m); }

}  // namespace tipnet::log
