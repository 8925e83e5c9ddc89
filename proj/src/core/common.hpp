#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace pgns {

// All engine errors derive from this; the C API boundary maps them to codes.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error(msg) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

// Overflow-safe softplus: log(1 + exp(x)).
template <class T>
inline T softplus_stable(T x) {
  if (x > T(30)) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

template <class T>
inline T sigmoid(T x) {
  if (x >= T(0)) {
    T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  T e = std::exp(x);
  return e / (T(1) + e);
}

constexpr double kPi = 3.14159265358979323846;

}  // namespace pgns
