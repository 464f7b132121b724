#pragma once

#include <stdexcept>
#include <string>

namespace simreweight {

// Exit codes used by the CLI. Library code throws, the CLI maps to codes.
enum class ExitCode : int {
  Ok = 0,
  Failure = 1,
  Config = 2,
  Io = 3,
  Diverged = 4,
};

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeMismatch : Error {
  using Error::Error;
};
struct NonFiniteValue : Error {
  using Error::Error;
};
struct NonScalarOutput : Error {
  using Error::Error;
};
struct NonFiniteGradient : Error {
  using Error::Error;
};
struct InvalidRange : Error {
  using Error::Error;
};
struct WindowTooLong : Error {
  using Error::Error;
};
struct ZeroTotalLoss : Error {
  using Error::Error;
};
struct DivergedError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};

}  // namespace simreweight
