#pragma once

// Gaussian-kernel dynamic model of the cardiac dipole vector.
//
// The dipole s(t) = [x, y, z] is driven by a phase variable theta that rotates
// at omega = 2*pi*f. Each coordinate is a sum of Gaussian bumps placed along
// the phase circle; the state equations are
//
//   dtheta/dt = omega
//   dx/dt     = -sum_i (alpha_i * omega / b_i^2) * dtheta_i * exp(-dtheta_i^2 / (2 b_i^2))
//
// with dtheta_i = theta - theta_i mapped to (-pi, pi], and the same form for y
// and z with their own kernel sets.

#include "fecg/common.hpp"

#include <nlohmann/json_fwd.hpp>

#include <array>
#include <cstdint>
#include <random>
#include <vector>

namespace fecg {

struct GaussianKernel {
  double amplitude = 0.0;  ///< dimensionless dipole-moment scale
  double width = 0.1;      ///< radians, > 0
  double center = 0.0;     ///< radians, normalized to [0, 2pi)
};

struct DipoleModelParams {
  std::array<std::vector<GaussianKernel>, 3> kernels;  ///< x, y, z
  /// Relative std of each kernel parameter for beat-to-beat randomization.
  double deviation_fraction = 0.0;
  /// Phase at which the R wave peaks; used for ground-truth beat annotation.
  double r_phase = kPi;

  void validate() const;
};

struct HeartRhythm {
  double mean_rate = 1.2;  ///< Hz
  double rate_std = 0.0;   ///< Hz, beat-to-beat
  std::uint64_t seed = 0;
  double initial_phase = 0.0;

  void validate() const;
};

struct DipoleTrajectory {
  std::vector<double> phase;  ///< radians in [0, 2pi), one per sample
  Matrix coords;              ///< 3 x T
  double sample_rate = 0.0;
  std::vector<std::size_t> beat_onsets;  ///< samples right after each phase wrap
  std::vector<std::size_t> r_peaks;      ///< samples nearest each r_phase crossing

  std::size_t samples() const { return phase.size(); }
};

struct DipoleState {
  double theta = 0.0;
  Vec3 s = Vec3::Zero();
};

/// Right-hand side of the state equations at `state`.
DipoleState evaluate_derivative(const DipoleState& state, const DipoleModelParams& params,
                                double omega);

/// Closed-form sum of Gaussians at `theta`, i.e. the trajectory value the
/// derivative integrates to (up to a constant).
Vec3 kernel_sum(double theta, const DipoleModelParams& params);

/// Per-beat draw: every amplitude, width and center gets independent Gaussian
/// noise with std deviation_fraction * |nominal|. Widths are clamped to >= 1e-6.
DipoleModelParams sample_beat_parameters(const DipoleModelParams& params, std::mt19937_64& rng);

/// Fixed-step RK4 at the sample interval. omega and the kernel parameters are
/// re-drawn at every phase wrap through 2pi. Deterministic for a fixed seed.
DipoleTrajectory integrate_trajectory(const DipoleModelParams& params, const HeartRhythm& rhythm,
                                      double duration, double sample_rate, std::uint64_t seed);

/// Kernel table with PQRST morphology used as the default for both hearts.
DipoleModelParams default_dipole_params();

DipoleModelParams dipole_params_from_json(const nlohmann::json& j);
nlohmann::json dipole_params_to_json(const DipoleModelParams& p);

}  // namespace fecg
