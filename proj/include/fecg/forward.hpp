#pragma once

// Homogeneous volume-conductor forward model and the abdominal mixture
//
//   X(t) = H_m R_m L_m s_m(t) + H_f R_f L_f s_f(t) + W(t)
//
// where each H row is an electrode lead vector r / (4 pi sigma |r|^3)
// relative to the montage reference.

#include "fecg/common.hpp"
#include "fecg/dipole.hpp"
#include "fecg/recording.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace fecg {

enum class Montage { Monopolar, NeighborDifferential };

Montage montage_from_string(const std::string& name);
std::string to_string(Montage m);

struct Electrode {
  Vec3 position = Vec3::Zero();  ///< meters
  int row = 0;
  int col = 0;
};

struct ElectrodeArray {
  int rows = 0;
  int cols = 0;
  std::vector<Electrode> electrodes;  ///< row-major: index = row * cols + col
  std::optional<std::size_t> reference;
  Montage montage = Montage::Monopolar;
  double torso_radius = 0.13;
  double torso_height = 0.45;
  Vec3 maternal_heart = Vec3::Zero();
  Vec3 fetal_heart = Vec3::Zero();

  void validate() const;
  std::size_t index(int row, int col) const;
  std::size_t nearest_electrode(const Vec3& point) const;
};

/// One recorded channel: electrode minus partner electrode. The partner is the
/// reference (monopolar) or the electrode one row below (neighbor-differential).
struct ChannelInfo {
  std::string label;
  GridPos grid;
  std::size_t electrode = 0;
  std::optional<std::size_t> partner;
};

std::vector<ChannelInfo> channel_layout(const ElectrodeArray& array);

/// Electrodes on a vertical cylinder: `rows` rings spanning `height` from the
/// top down, `cols` columns spread over `arc_degrees` centered on the front
/// (+z). Column 0 sits at -x.
ElectrodeArray make_cylinder_grid(int rows, int cols, double radius, double height,
                                  double arc_degrees);

ElectrodeArray electrode_array_from_json(const nlohmann::json& j);
nlohmann::json electrode_array_to_json(const ElectrodeArray& a);

struct VolumeConductor {
  double conductivity = 0.2;  ///< S/m
};

/// r / (4 pi sigma |r|^3) with r = electrode - heart.
Vec3 lead_vector(const Vec3& electrode, const Vec3& heart, double sigma);

/// N x 3 transfer matrix for the array's montage.
Matrix build_transfer_matrix(const ElectrodeArray& array, const Vec3& heart, double sigma);

enum class FetalPresentation { Identity, Vertex, Breech };
enum class Facing { Left, Right };

FetalPresentation presentation_from_string(const std::string& name);
Facing facing_from_string(const std::string& name);

/// Mean fetal orientation relative to the maternal axes (x: maternal left,
/// y: head, z: anterior). Breech flips the fetus by pi about x; the facing
/// turn about y then points the fetal anterior axis to the maternal left or right.
Mat3 fetal_rotation(FetalPresentation presentation, Facing facing);

/// Rotation about a body axis (0 = x, 1 = y, 2 = z).
Mat3 axis_rotation(int axis, double radians);

/// H * R * diag(scaling) * coords, noise free.
Matrix project(const Matrix& transfer, const Mat3& rotation, const Vec3& scaling,
               const Matrix& coords);

struct NoiseConfig {
  double base_std = 0.0;
  double envelope_period = 7.0;  ///< s
  double envelope_depth = 0.5;   ///< [0, 1)
  double color = 0.0;            ///< one-pole low-pass coefficient in [0, 1)
  std::uint64_t seed = 0;

  void validate() const;
};

/// Adds colored, amplitude-modulated Gaussian noise with overall RMS base_std.
Matrix add_noise(const Matrix& channels, const NoiseConfig& cfg, double sample_rate);

/// Uniform mid-rise quantizer clipped to +/- full_scale. Output levels sit at
/// (code + 0.5) * step, so 0 maps to +step/2.
Matrix quantize(const Matrix& channels, int bits, double full_scale);

struct HeartMixing {
  Matrix transfer;                ///< N x 3
  Mat3 rotation = Mat3::Identity();
  Vec3 scaling = Vec3::Ones();
};

struct MixtureConfig {
  HeartMixing maternal;
  HeartMixing fetal;
  NoiseConfig noise;

  void validate() const;
};

struct HeartSource {
  DipoleModelParams params;
  HeartRhythm rhythm;
  Mat3 rotation = Mat3::Identity();
  Vec3 scaling = Vec3::Ones();
};

/// Fetal dipole scale used when none is configured: a tenth of the maternal one.
inline Vec3 default_fetal_scaling(const Vec3& maternal_scaling) { return maternal_scaling / 10.0; }

struct AbdominalRecording {
  RecordingSet recordings;
  Matrix maternal_reference;  ///< noise-free maternal contribution per channel
  Matrix fetal_reference;     ///< noise-free fetal contribution per channel
  Matrix maternal_vcg;        ///< 3 x T, R_m * L_m * s_m
  Matrix fetal_vcg;           ///< 3 x T, R_f * L_f * s_f
  DipoleTrajectory maternal;
  DipoleTrajectory fetal;
};

AbdominalRecording mix_abdominal(const ElectrodeArray& array, const VolumeConductor& conductor,
                                 const HeartSource& maternal, const HeartSource& fetal,
                                 const NoiseConfig& noise, double duration, double sample_rate,
                                 std::uint64_t seed);

}  // namespace fecg
