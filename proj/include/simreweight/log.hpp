#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <string>

namespace simreweight::log {

enum class Level : int { Quiet = 0, Info = 1, Debug = 2 };

// Verbosity comes from the SIMREWEIGHT_LOG env var: quiet|info|debug.
inline Level level() {
  static Level lv = [] {
    const char* e = std::getenv("SIMREWEIGHT_LOG");
    if (!e) return Level::Quiet;
    if (std::strcmp(e, "debug") == 0) return Level::Debug;
    if (std::strcmp(e, "info") == 0) return Level::Info;
    return Level::Quiet;
  }();
  return lv;
}

inline void info(const std::string& msg) {
  if (level() >= Level::Info) std::fprintf(stderr, "[info] %s\n", msg.c_str());
}

inline void debug(const std::string& msg) {
  if (level() >= Level::Debug) std::fprintf(stderr, "[debug] %s\n", msg.c_str());
}

}  // namespace simreweight::log
