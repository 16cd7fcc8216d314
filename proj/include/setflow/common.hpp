#pragma once

#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>

namespace setflow {

// Error taxonomy. Config/contract errors are caller mistakes (CLI exit 1);
// the rest are runtime/numerical failures (CLI exit 2).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct EvalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct SolverError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

inline void require_config(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}

// All emitted numbers carry 17 significant digits so a reload round-trips the
// exact double.
inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline double softplus(double x) { return x > 30 ? x : std::log1p(std::exp(x)); }

// Inverse of softplus; defined for y > 0.
inline double softplus_inv(double y) {
  if (y > 30) return y;
  return std::log(std::expm1(y));
}

inline constexpr double kLog2Pi = 1.8378770664093454836;

}  // namespace setflow
