#pragma once

#include <complex>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace nvspin {

using cplx = std::complex<double>;
using CMatrix = Eigen::MatrixXcd;
using CVector = Eigen::VectorXcd;
using RMatrix = Eigen::MatrixXd;
using RVector = Eigen::VectorXd;
using Vec3 = Eigen::Vector3d;

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kTwoPi = 2.0 * kPi;

// Base for every error raised by the library. The CLI maps ConfigError to
// exit code 2 and everything else to exit code 1.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
public:
  using Error::Error;
};

class DimensionError : public InvalidArgument {
public:
  using InvalidArgument::InvalidArgument;
};

class ConvergenceError : public Error {
public:
  using Error::Error;
};

class ConfigError : public Error {
public:
  explicit ConfigError(std::vector<std::string> problems)
      : Error(join(problems)), problems_(std::move(problems)) {}
  explicit ConfigError(const std::string &problem)
      : ConfigError(std::vector<std::string>{problem}) {}

  const std::vector<std::string> &problems() const noexcept { return problems_; }

private:
  static std::string join(const std::vector<std::string> &items) {
    std::string out;
    for (const auto &s : items) {
      if (!out.empty())
        out += '\n';
      out += s;
    }
    return out;
  }
  std::vector<std::string> problems_;
};

inline void require(bool condition, const std::string &what) {
  if (!condition)
    throw InvalidArgument(what);
}

inline bool all_finite(const Vec3 &v) { return v.allFinite(); }

} // namespace nvspin
