#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>

namespace duet {

enum class LogLevel { kError = 0, kInfo = 1, kDebug = 2 };

// Level comes from DUET_LOG={error,info,debug}; default is error.
inline LogLevel log_level() {
  static LogLevel level = [] {
    const char* env = std::getenv("DUET_LOG");
    if (env == nullptr) return LogLevel::kError;
    if (std::strcmp(env, "debug") == 0) return LogLevel::kDebug;
    if (std::strcmp(env, "info") == 0) return LogLevel::kInfo;
    return LogLevel::kError;
  }();
  return level;
}

template <typename... Args>
void log_info(const char* fmt, Args... args) {
  if (log_level() >= LogLevel::kInfo) {
    std::fprintf(stderr, "[info] ");
    std::fprintf(stderr, fmt, args...);
    std::fprintf(stderr, "\n");
  }
}

template <typename... Args>
void log_debug(const char* fmt, Args... args) {
  if (log_level() >= LogLevel::kDebug) {
    std::fprintf(stderr, "[debug] ");
    std::fprintf(stderr, fmt, args...);
    std::fprintf(stderr, "\n");
  }
}

template <typename... Args>
void log_error(const char* fmt, Args... args) {
  std::fprintf(stderr, "[error] ");
  std::fprintf(stderr, fmt, args...);
  std::fprintf(stderr, "\n");
}

}  // namespace duet
