#include "fecg/forward.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <tuple>

namespace fecg {

namespace {

std::mt19937_64 channel_rng(std::uint64_t seed, std::size_t channel) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(channel), 0x6e6f6973u};
  return std::mt19937_64(seq);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

Vec3 vec3_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw ValidationError("expected a 3-element array");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

void check_rotation(const Mat3& r, const char* what) {
  if ((r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-10 ||
      std::abs(r.determinant() - 1.0) > 1e-10) {
    throw ValidationError(std::string(what) + ": rotation must be orthonormal with det +1");
  }
}

void check_mixing(const HeartMixing& h, const char* what) {
  if (h.transfer.cols() != 3) throw ValidationError(std::string(what) + ": transfer must be N x 3");
  check_rotation(h.rotation, what);
  if ((h.scaling.array() < 0.0).any() || !h.scaling.allFinite()) {
    throw ValidationError(std::string(what) + ": scaling must be non-negative");
  }
}

}  // namespace

Montage montage_from_string(const std::string& name) {
  if (name == "monopolar") return Montage::Monopolar;
  if (name == "neighbor-differential" || name == "differential") {
    return Montage::NeighborDifferential;
  }
  throw ValidationError("unknown montage '" + name + "' (monopolar | neighbor-differential)");
}

std::string to_string(Montage m) {
  return m == Montage::Monopolar ? "monopolar" : "neighbor-differential";
}

void ElectrodeArray::validate() const {
  if (rows <= 0 || cols <= 0) throw ValidationError("electrode array: grid dims must be positive");
  if (electrodes.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols)) {
    throw ValidationError("electrode array: " + std::to_string(electrodes.size()) +
                          " positions do not fill a " + std::to_string(rows) + "x" +
                          std::to_string(cols) + " grid");
  }
  std::set<std::tuple<double, double, double>> seen;
  for (std::size_t i = 0; i < electrodes.size(); ++i) {
    const auto& e = electrodes[i];
    if (index(e.row, e.col) != i) {
      throw ValidationError("electrode array: electrodes must be stored row-major");
    }
    if (!seen.emplace(e.position.x(), e.position.y(), e.position.z()).second) {
      throw ValidationError("electrode array: duplicate electrode position at index " +
                            std::to_string(i));
    }
  }
  if (montage == Montage::Monopolar) {
    if (!reference) throw ValidationError("electrode array: monopolar montage needs a reference");
    if (*reference >= electrodes.size()) {
      throw ValidationError("electrode array: reference index out of range");
    }
  }
  if (montage == Montage::NeighborDifferential && rows < 2) {
    throw ValidationError("electrode array: neighbor-differential montage needs >= 2 rows");
  }
}

std::size_t ElectrodeArray::index(int row, int col) const {
  if (row < 0 || row >= rows || col < 0 || col >= cols) {
    throw ValidationError("electrode array: grid index out of range");
  }
  return static_cast<std::size_t>(row) * static_cast<std::size_t>(cols) +
         static_cast<std::size_t>(col);
}

std::size_t ElectrodeArray::nearest_electrode(const Vec3& point) const {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < electrodes.size(); ++i) {
    const double d = (electrodes[i].position - point).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

std::vector<ChannelInfo> channel_layout(const ElectrodeArray& array) {
  array.validate();
  std::vector<ChannelInfo> out;
  auto name = [](int r, int c) { return "r" + std::to_string(r) + "c" + std::to_string(c); };
  if (array.montage == Montage::Monopolar) {
    out.reserve(array.electrodes.size());
    for (std::size_t i = 0; i < array.electrodes.size(); ++i) {
      const auto& e = array.electrodes[i];
      out.push_back({name(e.row, e.col), {e.row, e.col}, i, array.reference});
    }
  } else {
    // vertical pairs within a column; the channel sits at the upper electrode
    for (int r = 0; r + 1 < array.rows; ++r) {
      for (int c = 0; c < array.cols; ++c) {
        out.push_back({name(r, c) + "-" + name(r + 1, c), {r, c}, array.index(r, c),
                       array.index(r + 1, c)});
      }
    }
  }
  return out;
}

ElectrodeArray make_cylinder_grid(int rows, int cols, double radius, double height,
                                  double arc_degrees) {
  if (rows <= 0 || cols <= 0) throw ValidationError("cylinder grid: dims must be positive");
  ElectrodeArray a;
  a.rows = rows;
  a.cols = cols;
  a.torso_radius = radius;
  a.torso_height = height;
  const double arc = arc_degrees * kPi / 180.0;
  for (int r = 0; r < rows; ++r) {
    const double y = rows > 1 ? height / 2.0 - r * height / (rows - 1) : 0.0;
    for (int c = 0; c < cols; ++c) {
      const double phi = cols > 1 ? -arc / 2.0 + c * arc / (cols - 1) : 0.0;
      a.electrodes.push_back({Vec3(radius * std::sin(phi), y, radius * std::cos(phi)), r, c});
    }
  }
  return a;
}

ElectrodeArray electrode_array_from_json(const nlohmann::json& j) {
  ElectrodeArray a;
  const auto& torso = j.at("torso");
  const double radius = torso.value("radius", 0.13);
  const double height = torso.value("height", 0.45);
  if (j.contains("electrodes")) {
    a.rows = j.at("rows").get<int>();
    a.cols = j.at("cols").get<int>();
    a.torso_radius = radius;
    a.torso_height = height;
    a.electrodes.resize(j.at("electrodes").size());
    for (const auto& e : j.at("electrodes")) {
      Electrode el{vec3_from_json(e.at("position")), e.at("row").get<int>(),
                   e.at("col").get<int>()};
      const auto idx = static_cast<std::size_t>(el.row) * static_cast<std::size_t>(a.cols) +
                       static_cast<std::size_t>(el.col);
      if (el.row < 0 || el.col < 0 || idx >= a.electrodes.size()) {
        throw ValidationError("geometry: electrode grid index out of range");
      }
      a.electrodes[idx] = el;
    }
  } else if (j.contains("cylinder_grid")) {
    const auto& g = j.at("cylinder_grid");
    a = make_cylinder_grid(j.at("rows").get<int>(), j.at("cols").get<int>(), radius, height,
                           g.value("arc_degrees", 210.0));
  } else {
    throw ValidationError("geometry: need either 'electrodes' or 'cylinder_grid'");
  }
  a.montage = montage_from_string(j.value("montage", std::string("monopolar")));
  if (j.contains("reference")) {
    const auto& r = j.at("reference");
    if (r.is_string()) {
      if (r.get<std::string>() != "none") throw ValidationError("geometry: bad reference");
    } else if (r.is_number_integer()) {
      a.reference = r.get<std::size_t>();
    } else {
      a.reference = a.index(r.at("row").get<int>(), r.at("col").get<int>());
    }
  }
  a.maternal_heart = vec3_from_json(j.at("maternal_heart"));
  a.fetal_heart = vec3_from_json(j.at("fetal_heart"));
  a.validate();
  return a;
}

nlohmann::json electrode_array_to_json(const ElectrodeArray& a) {
  nlohmann::json j;
  j["rows"] = a.rows;
  j["cols"] = a.cols;
  j["torso"] = {{"radius", a.torso_radius}, {"height", a.torso_height}};
  j["montage"] = to_string(a.montage);
  if (a.reference) {
    const auto& e = a.electrodes.at(*a.reference);
    j["reference"] = {{"row", e.row}, {"col", e.col}};
  } else {
    j["reference"] = "none";
  }
  auto v3 = [](const Vec3& v) { return nlohmann::json::array({v.x(), v.y(), v.z()}); };
  j["maternal_heart"] = v3(a.maternal_heart);
  j["fetal_heart"] = v3(a.fetal_heart);
  auto arr = nlohmann::json::array();
  for (const auto& e : a.electrodes) {
    arr.push_back({{"row", e.row}, {"col", e.col}, {"position", v3(e.position)}});
  }
  j["electrodes"] = std::move(arr);
  return j;
}

Vec3 lead_vector(const Vec3& electrode, const Vec3& heart, double sigma) {
  if (!(sigma > 0.0)) throw ValidationError("lead_vector: conductivity must be > 0");
  const Vec3 r = electrode - heart;
  const double n = r.norm();
  if (n == 0.0) throw ValidationError("lead_vector: electrode coincides with the dipole");
  return r / (4.0 * kPi * sigma * n * n * n);
}

Matrix build_transfer_matrix(const ElectrodeArray& array, const Vec3& heart, double sigma) {
  const auto layout = channel_layout(array);
  Matrix h(static_cast<Eigen::Index>(layout.size()), 3);
  for (std::size_t i = 0; i < layout.size(); ++i) {
    Vec3 row = lead_vector(array.electrodes[layout[i].electrode].position, heart, sigma);
    if (layout[i].partner) row -= lead_vector(array.electrodes[*layout[i].partner].position, heart, sigma);
    h.row(static_cast<Eigen::Index>(i)) = row.transpose();
  }
  return h;
}

FetalPresentation presentation_from_string(const std::string& name) {
  if (name == "identity") return FetalPresentation::Identity;
  if (name == "vertex") return FetalPresentation::Vertex;
  if (name == "breech") return FetalPresentation::Breech;
  throw ValidationError("unknown fetal presentation '" + name + "' (identity | vertex | breech)");
}

Facing facing_from_string(const std::string& name) {
  if (name == "left") return Facing::Left;
  if (name == "right") return Facing::Right;
  throw ValidationError("unknown fetal facing '" + name + "' (left | right)");
}

Mat3 axis_rotation(int axis, double radians) {
  return Eigen::AngleAxisd(radians, Vec3::Unit(axis)).toRotationMatrix();
}

Mat3 fetal_rotation(FetalPresentation presentation, Facing facing) {
  if (presentation == FetalPresentation::Identity) return Mat3::Identity();
  const double side = facing == Facing::Left ? 1.0 : -1.0;
  if (presentation == FetalPresentation::Vertex) return axis_rotation(1, side * kPi / 2.0);
  // after the flip the anterior axis points to -z, so the facing turn reverses
  return axis_rotation(1, -side * kPi / 2.0) * axis_rotation(0, kPi);
}

Matrix project(const Matrix& transfer, const Mat3& rotation, const Vec3& scaling,
               const Matrix& coords) {
  if (transfer.cols() != 3 || coords.rows() != 3) {
    throw ValidationError("project: expected N x 3 transfer and 3 x T coordinates");
  }
  const Eigen::Matrix<double, Eigen::Dynamic, 3> m = transfer * rotation * scaling.asDiagonal();
  return m * coords;
}

void NoiseConfig::validate() const {
  if (!(base_std >= 0.0)) throw ValidationError("noise: base_std must be >= 0");
  if (!(envelope_depth >= 0.0 && envelope_depth < 1.0)) {
    throw ValidationError("noise: envelope_depth must lie in [0, 1)");
  }
  if (!(color >= 0.0 && color < 1.0)) throw ValidationError("noise: color must lie in [0, 1)");
  if (!(envelope_period > 0.0)) throw ValidationError("noise: envelope_period must be > 0");
}

Matrix add_noise(const Matrix& channels, const NoiseConfig& cfg, double sample_rate) {
  cfg.validate();
  if (cfg.base_std == 0.0) return channels;
  Matrix out = channels;
  const Eigen::Index t_len = channels.cols();
  // white -> unit-variance AR(1) -> envelope; envelope RMS is sqrt(1 + depth^2 / 2)
  const double ar_gain = std::sqrt(1.0 - cfg.color * cfg.color);
  const double env_rms = std::sqrt(1.0 + 0.5 * cfg.envelope_depth * cfg.envelope_depth);
  const double scale = cfg.base_std / env_rms;
  parallel_for(static_cast<std::size_t>(channels.rows()), [&](std::size_t ch) {
    auto rng = channel_rng(cfg.seed, ch);
    std::normal_distribution<double> unit(0.0, 1.0);
    std::uniform_real_distribution<double> phase_dist(0.0, kTwoPi);
    const double phase = phase_dist(rng);
    double state = unit(rng);
    for (Eigen::Index t = 0; t < t_len; ++t) {
      if (t > 0) state = cfg.color * state + ar_gain * unit(rng);
      const double time = static_cast<double>(t) / sample_rate;
      const double env =
          1.0 + cfg.envelope_depth * std::sin(kTwoPi * time / cfg.envelope_period + phase);
      out(static_cast<Eigen::Index>(ch), t) += scale * env * state;
    }
  });
  return out;
}

Matrix quantize(const Matrix& channels, int bits, double full_scale) {
  if (!(full_scale > 0.0)) throw ValidationError("quantize: full_scale must be > 0");
  if (bits < 1 || bits > 30) throw ValidationError("quantize: bits must lie in [1, 30]");
  const double levels = std::ldexp(1.0, bits);
  const double step = 2.0 * full_scale / levels;
  const double lo = -levels / 2.0;
  const double hi = levels / 2.0 - 1.0;
  return channels.unaryExpr([=](double x) {
    const double code = std::clamp(std::floor(x / step), lo, hi);
    return (code + 0.5) * step;
  });
}

void MixtureConfig::validate() const {
  check_mixing(maternal, "maternal mixing");
  check_mixing(fetal, "fetal mixing");
  if (maternal.transfer.rows() != fetal.transfer.rows()) {
    throw ValidationError("mixture: maternal and fetal transfer row counts differ");
  }
  noise.validate();
}

AbdominalRecording mix_abdominal(const ElectrodeArray& array, const VolumeConductor& conductor,
                                 const HeartSource& maternal, const HeartSource& fetal,
                                 const NoiseConfig& noise, double duration, double sample_rate,
                                 std::uint64_t seed) {
  const auto layout = channel_layout(array);
  MixtureConfig mix;
  mix.maternal = {build_transfer_matrix(array, array.maternal_heart, conductor.conductivity),
                  maternal.rotation, maternal.scaling};
  mix.fetal = {build_transfer_matrix(array, array.fetal_heart, conductor.conductivity),
               fetal.rotation, fetal.scaling};
  mix.noise = noise;
  mix.noise.seed = derive_seed(seed ^ noise.seed, 3);
  mix.validate();

  AbdominalRecording out;
  out.maternal =
      integrate_trajectory(maternal.params, maternal.rhythm, duration, sample_rate, derive_seed(seed, 1));
  out.fetal =
      integrate_trajectory(fetal.params, fetal.rhythm, duration, sample_rate, derive_seed(seed, 2));

  out.maternal_vcg = maternal.rotation * maternal.scaling.asDiagonal() * out.maternal.coords;
  out.fetal_vcg = fetal.rotation * fetal.scaling.asDiagonal() * out.fetal.coords;
  out.maternal_reference = mix.maternal.transfer * out.maternal_vcg;
  out.fetal_reference = mix.fetal.transfer * out.fetal_vcg;

  RecordingSet& rec = out.recordings;
  rec.sample_rate = sample_rate;
  rec.data = add_noise(out.maternal_reference + out.fetal_reference, mix.noise, sample_rate);
  for (const auto& ch : layout) {
    rec.labels.push_back(ch.label);
    rec.grid.push_back(ch.grid);
    // the reference electrode records nothing in a monopolar montage
    rec.valid.push_back(!(ch.partner && *ch.partner == ch.electrode));
  }
  return out;
}

}  // namespace fecg
