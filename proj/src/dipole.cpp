#include "fecg/dipole.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <string>

namespace fecg {

namespace {

constexpr double kMinWidth = 1e-6;
const char* const kAxisNames[3] = {"x", "y", "z"};

double axis_derivative(const std::vector<GaussianKernel>& kernels, double theta, double omega) {
  double sum = 0.0;
  for (const auto& k : kernels) {
    const double d = wrap_to_pi(theta - k.center);
    const double b2 = k.width * k.width;
    sum -= k.amplitude * omega / b2 * d * std::exp(-d * d / (2.0 * b2));
  }
  return sum;
}

double draw_rate(const HeartRhythm& rhythm, std::mt19937_64& rng) {
  double f = rhythm.mean_rate;
  if (rhythm.rate_std > 0.0) {
    std::normal_distribution<double> n(rhythm.mean_rate, rhythm.rate_std);
    f = n(rng);
  }
  // beat rates stay positive: never slower than a tenth of the mean
  return std::max(f, 0.1 * rhythm.mean_rate);
}

}  // namespace

void DipoleModelParams::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (kernels[a].empty()) {
      throw ValidationError(std::string("dipole params: axis ") + kAxisNames[a] + " has no kernels");
    }
    for (const auto& k : kernels[a]) {
      if (!(k.width > 0.0) || !std::isfinite(k.width)) {
        throw ValidationError("dipole params: kernel width must be > 0");
      }
      if (!std::isfinite(k.amplitude) || !std::isfinite(k.center)) {
        throw ValidationError("dipole params: non-finite kernel parameter");
      }
    }
  }
  if (!(deviation_fraction >= 0.0 && deviation_fraction < 1.0)) {
    throw ValidationError("dipole params: deviation_fraction must lie in [0, 1)");
  }
}

void HeartRhythm::validate() const {
  if (!(mean_rate > 0.0)) throw ValidationError("heart rhythm: mean_rate must be > 0");
  if (!(rate_std >= 0.0)) throw ValidationError("heart rhythm: rate_std must be >= 0");
}

DipoleState evaluate_derivative(const DipoleState& state, const DipoleModelParams& params,
                                double omega) {
  if (!std::isfinite(state.theta) || !state.s.allFinite()) {
    throw Error("evaluate_derivative: non-finite state");
  }
  if (!(omega > 0.0)) throw ValidationError("evaluate_derivative: omega must be > 0");
  DipoleState d;
  d.theta = omega;
  for (int a = 0; a < 3; ++a) d.s[a] = axis_derivative(params.kernels[a], state.theta, omega);
  return d;
}

Vec3 kernel_sum(double theta, const DipoleModelParams& params) {
  Vec3 v = Vec3::Zero();
  for (int a = 0; a < 3; ++a) {
    for (const auto& k : params.kernels[a]) {
      const double d = wrap_to_pi(theta - k.center);
      v[a] += k.amplitude * std::exp(-d * d / (2.0 * k.width * k.width));
    }
  }
  return v;
}

DipoleModelParams sample_beat_parameters(const DipoleModelParams& params, std::mt19937_64& rng) {
  DipoleModelParams out = params;
  const double df = params.deviation_fraction;
  if (df == 0.0) return out;
  std::normal_distribution<double> unit(0.0, 1.0);
  for (auto& axis : out.kernels) {
    for (auto& k : axis) {
      k.amplitude += df * std::abs(k.amplitude) * unit(rng);
      k.width = std::max(k.width + df * std::abs(k.width) * unit(rng), kMinWidth);
      k.center = wrap_to_two_pi(k.center + df * std::abs(k.center) * unit(rng));
    }
  }
  return out;
}

DipoleTrajectory integrate_trajectory(const DipoleModelParams& params, const HeartRhythm& rhythm,
                                      double duration, double sample_rate, std::uint64_t seed) {
  params.validate();
  rhythm.validate();
  if (!(duration > 0.0)) throw ValidationError("integrate_trajectory: duration must be > 0");
  if (!(sample_rate > 0.0)) throw ValidationError("integrate_trajectory: sample_rate must be > 0");

  const auto n = static_cast<std::size_t>(std::llround(duration * sample_rate));
  if (n == 0) throw ValidationError("integrate_trajectory: duration shorter than one sample");
  const double dt = 1.0 / sample_rate;

  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(rhythm.seed),
                    static_cast<std::uint32_t>(rhythm.seed >> 32)};
  std::mt19937_64 rng(seq);

  DipoleTrajectory traj;
  traj.sample_rate = sample_rate;
  traj.phase.resize(n);
  traj.coords.resize(3, static_cast<Eigen::Index>(n));

  DipoleModelParams beat = sample_beat_parameters(params, rng);
  double omega = kTwoPi * draw_rate(rhythm, rng);

  DipoleState state;
  state.theta = wrap_to_two_pi(rhythm.initial_phase);
  state.s = kernel_sum(state.theta, beat);
  const double r_phase = wrap_to_two_pi(params.r_phase);

  auto rhs = [&](const DipoleState& st) { return evaluate_derivative(st, beat, omega); };
  auto axpy = [](const DipoleState& a, double h, const DipoleState& k) {
    DipoleState r;
    r.theta = a.theta + h * k.theta;
    r.s = a.s + h * k.s;
    return r;
  };

  for (std::size_t i = 0; i < n; ++i) {
    traj.phase[i] = state.theta;
    traj.coords.col(static_cast<Eigen::Index>(i)) = state.s;
    if (i + 1 == n) break;

    const DipoleState k1 = rhs(state);
    const DipoleState k2 = rhs(axpy(state, 0.5 * dt, k1));
    const DipoleState k3 = rhs(axpy(state, 0.5 * dt, k2));
    const DipoleState k4 = rhs(axpy(state, dt, k3));
    DipoleState next;
    next.theta = state.theta + dt * omega;
    next.s = state.s + dt / 6.0 * (k1.s + 2.0 * k2.s + 2.0 * k3.s + k4.s);
    if (!next.s.allFinite()) {
      throw Error("integrate_trajectory: non-finite state at sample " + std::to_string(i + 1));
    }

    // R-wave crossing inside (theta, next.theta]; unwrapped so r_phase near 0 works too.
    const double before = state.theta - r_phase;
    const double after = next.theta - r_phase;
    if (std::floor(before / kTwoPi) < std::floor(after / kTwoPi)) {
      const double cross = kTwoPi * std::floor(after / kTwoPi);
      const bool nearer_next = (after - cross) < (cross - before);
      traj.r_peaks.push_back(nearer_next ? i + 1 : i);
    }

    if (next.theta >= kTwoPi) {
      next.theta -= kTwoPi;
      traj.beat_onsets.push_back(i + 1);
      beat = sample_beat_parameters(params, rng);
      omega = kTwoPi * draw_rate(rhythm, rng);
    }
    state = next;
  }
  return traj;
}

DipoleModelParams default_dipole_params() {
  // Offsets from the R wave, written relative to r_phase = pi so the phase
  // wrap (and the per-beat parameter redraw) falls in diastole.
  struct Row {
    double amplitude, width, offset;
  };
  const std::vector<Row> x = {{0.05, 0.10, -1.10}, {-0.10, 0.04, -0.15}, {1.00, 0.035, 0.00},
                              {-0.20, 0.04, 0.12}, {0.20, 0.30, 1.40},   {0.15, 0.20, 1.75}};
  const std::vector<Row> y = {{0.03, 0.10, -1.10}, {0.04, 0.04, -0.17}, {0.45, 0.035, -0.02},
                              {-0.35, 0.05, 0.10}, {0.10, 0.30, 1.50}};
  const std::vector<Row> z = {{-0.03, 0.10, -1.05}, {-0.05, 0.04, -0.12}, {-0.40, 0.04, 0.02},
                              {0.45, 0.04, 0.10},   {-0.20, 0.30, 1.45}};
  DipoleModelParams p;
  p.r_phase = kPi;
  p.deviation_fraction = 0.01;
  const std::vector<Row>* rows[3] = {&x, &y, &z};
  for (int a = 0; a < 3; ++a) {
    for (const auto& r : *rows[a]) {
      p.kernels[a].push_back({r.amplitude, r.width, wrap_to_two_pi(kPi + r.offset)});
    }
  }
  return p;
}

DipoleModelParams dipole_params_from_json(const nlohmann::json& j) {
  DipoleModelParams p;
  p.deviation_fraction = j.value("deviation_fraction", 0.0);
  p.r_phase = wrap_to_two_pi(j.value("r_phase", kPi));
  for (int a = 0; a < 3; ++a) {
    if (!j.contains(kAxisNames[a])) {
      throw ValidationError(std::string("dipole params: missing axis '") + kAxisNames[a] + "'");
    }
    for (const auto& k : j.at(kAxisNames[a])) {
      GaussianKernel g;
      g.amplitude = k.at("alpha").get<double>();
      g.width = k.at("b").get<double>();
      g.center = wrap_to_two_pi(k.at("theta").get<double>());
      p.kernels[a].push_back(g);
    }
  }
  p.validate();
  return p;
}

nlohmann::json dipole_params_to_json(const DipoleModelParams& p) {
  nlohmann::json j;
  j["deviation_fraction"] = p.deviation_fraction;
  j["r_phase"] = p.r_phase;
  for (int a = 0; a < 3; ++a) {
    auto arr = nlohmann::json::array();
    for (const auto& k : p.kernels[a]) {
      arr.push_back({{"alpha", k.amplitude}, {"b", k.width}, {"theta", k.center}});
    }
    j[kAxisNames[a]] = std::move(arr);
  }
  return j;
}

}  // namespace fecg
