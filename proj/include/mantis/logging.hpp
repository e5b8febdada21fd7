#pragma once

#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <cstring>

namespace mantis {

enum class LogLevel { error = 0, info = 1, debug = 2 };

// Level comes from TS_MANTIS_LOG={error|info|debug}; default info.
inline LogLevel log_level() {
  static const LogLevel level = [] {
    const char* env = std::getenv("TS_MANTIS_LOG");
    if (!env) return LogLevel::info;
    if (std::strcmp(env, "error") == 0) return LogLevel::error;
    if (std::strcmp(env, "debug") == 0) return LogLevel::debug;
    return LogLevel::info;
  }();
  return level;
}

inline void log_at(LogLevel lvl, const char* tag, const char* fmt, va_list ap) {
  if (static_cast<int>(lvl) > static_cast<int>(log_level())) return;
  std::fprintf(stderr, "[%s] ", tag);
  std::vfprintf(stderr, fmt, ap);
  std::fprintf(stderr, "\n");
}

inline void log_error(const char* fmt, ...) {
  va_list ap;
  va_start(ap, fmt);
  log_at(LogLevel::error, "error", fmt, ap);
  va_end(ap);
}

inline void log_info(const char* fmt, ...) {
  va_list ap;
  va_start(ap, fmt);
  log_at(LogLevel::info, "info", fmt, ap);
  va_end(ap);
}

inline void log_debug(const char* fmt, ...) {
  va_list ap;
  va_start(ap, fmt);
  log_at(LogLevel::debug, "debug", fmt, ap);
  va_end(ap);
}

}  // namespace mantis
