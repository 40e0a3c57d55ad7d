#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace fecg {

using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Runtime failure inside a numerical routine (non-finite state, rank
/// deficiency, I/O). Maps to CLI exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller supplied inputs that violate a precondition. Maps to CLI exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kTwoPi = 2.0 * kPi;

/// Maps an angle to (-pi, pi].
double wrap_to_pi(double angle);

/// Maps an angle to [0, 2pi).
double wrap_to_two_pi(double angle);

// Warnings are routed through a process-wide handler so the CLI can collect
// them into the manifest and tests can assert on them. Default: stderr.
using WarningHandler = std::function<void(std::string_view)>;
void set_warning_handler(WarningHandler handler);
void warn(std::string_view message);

/// Worker count for parallel loops: hardware concurrency capped by FECG_THREADS.
std::size_t thread_count();

/// Runs body(i) for i in [0, n) across thread_count() workers. body must only
/// write to state owned by index i.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace fecg
