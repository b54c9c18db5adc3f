#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace dt {

// Scalar used by the training stack. Core code is templated, so tests can
// instantiate double where finite-difference checks need the headroom.
using real_t = float;

// Error taxonomy; the CLI maps these onto stable exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid configuration, bad spec file, unknown override key. Exit 2.
struct ConfigError : Error {
  using Error::Error;
};

// Filesystem trouble: unreadable dataset, missing checkpoint, corrupt payload. Exit 3.
struct IoError : Error {
  using Error::Error;
};

// Shape or parameter-order mismatch between two model states.
struct StructuralError : Error {
  using Error::Error;
};

// Training diverged; carries the diagnostic snapshot in the message. Exit 4.
struct NonFiniteError : Error {
  using Error::Error;
};

template <class T>
inline bool is_finite(T v) {
  return std::isfinite(static_cast<double>(v));
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

}  // namespace dt
