// One PASS/FAIL line per acceptance criterion. Exit status is the number of failures.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fecg/ica.hpp"
#include "fecg/mi.hpp"
#include "fecg/pipeline.hpp"
#include "fecg/selection.hpp"
#include "oracles.hpp"

using namespace fecg;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void report(int id, bool ok, const std::string& detail) {
  std::printf("%s C%d %s\n", ok ? "PASS" : "FAIL", id, detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[1024];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<double> row(const Matrix& m, Eigen::Index i) {
  std::vector<double> v(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index t = 0; t < m.cols(); ++t) v[static_cast<std::size_t>(t)] = m(i, t);
  return v;
}

void correlated_pair(double rho, std::size_t t, std::uint64_t seed, std::vector<double>& x, std::vector<double>& y) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  x.resize(t);
  y.resize(t);
  const double c = std::sqrt(1.0 - rho * rho);
  for (std::size_t i = 0; i < t; ++i) {
    x[i] = g(rng);
    y[i] = rho * x[i] + c * g(rng);
  }
}

double median(std::vector<double> v) {
  v.erase(std::remove_if(v.begin(), v.end(), [](double x) { return std::isnan(x); }), v.end());
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// linear-interpolated percentile over the finite values
double percentile(std::vector<double> v, double q) {
  v.erase(std::remove_if(v.begin(), v.end(), [](double x) { return std::isnan(x); }), v.end());
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

// 8-connected components of the cells above the 80th percentile
int high_components(const MIMap& m) {
  const double thr = percentile(m.values, 0.8);
  const int rows = *m.rows, cols = *m.cols;
  std::vector<int> hi(static_cast<std::size_t>(rows * cols), 0), label(hi.size(), 0);
  for (std::size_t i = 0; i < m.values.size(); ++i) {
    if (!std::isnan(m.values[i]) && m.values[i] > thr) hi[static_cast<std::size_t>(m.grid[i].row * cols + m.grid[i].col)] = 1;
  }
  int n = 0;
  for (std::size_t s = 0; s < hi.size(); ++s) {
    if (!hi[s] || label[s]) continue;
    ++n;
    std::vector<std::size_t> stack{s};
    label[s] = n;
    while (!stack.empty()) {
      const auto p = static_cast<int>(stack.back());
      stack.pop_back();
      for (int dr = -1; dr <= 1; ++dr) {
        for (int dc = -1; dc <= 1; ++dc) {
          const int r = p / cols + dr, c = p % cols + dc;
          if (r < 0 || c < 0 || r >= rows || c >= cols) continue;
          const auto q = static_cast<std::size_t>(r * cols + c);
          if (hi[q] && !label[q]) {
            label[q] = n;
            stack.push_back(q);
          }
        }
      }
    }
  }
  return n;
}

double mean_near(const MIMap& m, GridPos ref) {
  double s = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < m.values.size(); ++i) {
    if (grid_distance(m.grid[i], ref) == 1 && !std::isnan(m.values[i])) {
      s += m.values[i];
      ++n;
    }
  }
  return n ? s / n : std::nan("");
}

GridPos grid_of(const ElectrodeArray& a, std::size_t e) { return {a.electrodes[e].row, a.electrodes[e].col}; }

void criterion1() {
  bool ok = true;
  std::string d;
  for (double rho : {0.3, 0.6, 0.9}) {
    std::vector<double> x, y;
    correlated_pair(rho, 100000, 1000 + static_cast<std::uint64_t>(rho * 10), x, y);
    const auto t0 = Clock::now();
    const double est = estimate_mi_binned(x, y, 16).value;
    const double dt = seconds_since(t0);
    const double truth = oracle::gaussian_mi(rho);
    const bool good = std::abs(est - truth) < 0.05 && dt < 1.0;
    ok = ok && good;
    d += fmt("rho=%.1f est=%.4f truth=%.4f binned-limit=%.4f %.3fs%s; ", rho, est, truth,
             oracle::quantized_gaussian_mi(rho, 16), dt, good ? "" : " (out)");
  }
  report(1, ok, d);
}

void criterion2() {
  std::vector<double> x, y;
  correlated_pair(0.6, 100000, 2, x, y);
  const double base = estimate_mi_binned(x, y, 16).value;
  std::vector<double> cube(x), ex(y);
  for (auto& v : cube) v = v * v * v;
  for (auto& v : ex) v = std::exp(v);
  const double a = estimate_mi_binned(cube, y, 16).value;
  const double b = estimate_mi_binned(x, ex, 16).value;
  const double c = estimate_mi_binned(cube, ex, 16).value;
  report(2, a == base && b == base && c == base,
         fmt("I=%.17g x^3:%s exp:%s both:%s", base, a == base ? "equal" : "differs", b == base ? "equal" : "differs",
             c == base ? "equal" : "differs"));
}

void criterion3(const SimulationOutput& sim) {
  const auto e = sim.array.nearest_electrode(sim.array.maternal_heart);
  const Eigen::Index t = 10000;
  const auto x = row(sim.mix.recordings.data.leftCols(t), static_cast<Eigen::Index>(e));
  const Matrix vcg = sim.mix.maternal_vcg.leftCols(t);
  const double ref = estimate_mi_knn(x, vcg, 4).value;
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  double worst = 0.0;
  for (int n = 0; n < 5;) {
    Mat3 b;
    for (int i = 0; i < 9; ++i) b.data()[i] = g(rng);
    if (std::abs(b.determinant()) < 0.1) continue;
    ++n;
    worst = std::max(worst, std::abs(estimate_mi_knn(x, b * vcg, 4).value - ref));
  }
  report(3, worst < 0.05, fmt("channel %zu I(B=I)=%.4f max|dI|=%.2e over 5 B", e, ref, worst));
}

void criteria456(const ExperimentConfig& cfg, const SimulationOutput& sim, const MIMaps& maps, double map_seconds) {
  const int comps = high_components(maps.maternal);
  report(4, comps >= 2, fmt("%d connected components above the 80th percentile", comps));

  const auto fe = sim.array.nearest_electrode(sim.array.fetal_heart);
  const GridPos fg = grid_of(sim.array, fe);
  const auto& dv = maps.differential->values;
  std::vector<std::size_t> idx(dv.size());
  std::iota(idx.begin(), idx.end(), 0);
  auto key = [&](std::size_t i) { return std::isnan(dv[i]) ? -1e300 : dv[i]; };
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return key(a) > key(b); });
  int far = 0;
  for (int k = 0; k < 10; ++k) far = std::max(far, grid_distance(maps.differential->grid[idx[static_cast<std::size_t>(k)]], fg));
  report(5, far <= 4 && map_seconds < 120.0,
         fmt("max grid distance of top-10 to (%d,%d) = %d; maps %.1fs", fg.row, fg.col, far, map_seconds));

  const GridPos ref = grid_of(sim.array, *sim.array.reference);
  const double mono = mean_near(maps.maternal, ref), mono_med = median(maps.maternal.values);
  const auto simd = simulate(cfg, Montage::NeighborDifferential);
  const auto recd = preprocess(simd.mix.recordings, cfg.preprocess);
  const auto md = mi_map(recd, simd.mix.maternal_reference, cfg.mi, MapKind::Maternal);
  const double diff = mean_near(md, ref), diff_med = median(md.values);
  report(6, mono < mono_med && !(diff < diff_med),
         fmt("near reference: monopolar %.4f vs median %.4f, differential %.4f vs median %.4f", mono, mono_med, diff,
             diff_med));
}

void criterion7() {
  int good = 0;
  double slowest = 0.0, worst = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(7000 + seed);
    std::normal_distribution<double> g;
    Matrix s(3, 10000);
    for (Eigen::Index i = 0; i < 3; ++i) {
      const auto v = oracle::laplace(10000, rng);
      for (Eigen::Index t = 0; t < 10000; ++t) s(i, t) = v[static_cast<std::size_t>(t)];
    }
    Matrix a(6, 3);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = g(rng);
    const auto t0 = Clock::now();
    const auto r = separate(a * s, 3);
    const double dt = seconds_since(t0);
    const double amari = amari_index(r.demixing * a);
    slowest = std::max(slowest, dt);
    worst = std::max(worst, amari);
    if (amari < 0.05 && dt < 5.0) ++good;
  }
  report(7, good >= 19, fmt("%d/20 runs with Amari < 0.05 (worst %.4f), slowest %.3fs", good, worst, slowest));
}

void criterion8(const ExperimentConfig& cfg, const SimulationOutput& sim, const RecordingSet& rec) {
  SelectionInputs si;
  si.recordings = &rec;
  si.maternal_vcg = &sim.mix.maternal_vcg;
  si.fetal_refs = &sim.mix.fetal_reference;
  si.fetal_peaks = &sim.mix.fetal.r_peaks;
  auto c = cfg;
  c.selection.rule = Rule::Maternal2;
  c.selection.k = 10;
  c.selection.fetal_m = 0;
  const auto sel = run_selection(c, si);
  ExtractionInputs ei;
  ei.recordings = &rec;
  ei.channels = sel.final().selected;
  ei.fetal_refs = &sim.mix.fetal_reference;
  ei.fetal_peaks = &sim.mix.fetal.r_peaks;
  const auto rep = run_extraction(c, ei);
  const double top = rep.top_f1.value_or(0.0);
  double base = 0.0;
  for (double v : rep.baseline_f1) base += v;
  base /= static_cast<double>(std::max<std::size_t>(1, rep.baseline_f1.size()));
  report(8, top >= 0.95 && rep.baseline_f1.size() == 20 && base < top,
         fmt("top source F1 %.3f, random-10 mean F1 %.3f over %zu subsets", top, base, rep.baseline_f1.size()));
}

// Small selection instances built from a few shared latent signals.
void criterion9() {
  constexpr int bins = 8;
  constexpr Eigen::Index t = 1000;
  std::mt19937_64 rng(909);
  std::normal_distribution<double> g;
  SelectionOptions opt;
  opt.mi.bins = bins;
  int agree = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const int n = std::uniform_int_distribution<int>(3, 12)(rng);
    const auto k = static_cast<std::size_t>(std::uniform_int_distribution<int>(1, std::min(4, n))(rng));
    Matrix latent(4, t);
    for (Eigen::Index i = 0; i < latent.size(); ++i) latent.data()[i] = g(rng);
    Matrix x(n, t);
    for (int i = 0; i < n; ++i) {
      Eigen::RowVectorXd w(4);
      for (int j = 0; j < 4; ++j) w[j] = g(rng);
      x.row(i) = w * latent;
      for (Eigen::Index s = 0; s < t; ++s) x(i, s) += 0.5 * g(rng);
    }
    RecordingSet rec;
    rec.data = x;
    rec.fill_defaults();
    Matrix class_refs(3, t);
    for (int j = 0; j < 3; ++j) {
      class_refs.row(j) = latent.row(j);
      for (Eigen::Index s = 0; s < t; ++s) class_refs(j, s) += g(rng);
    }
    std::vector<int> classes;
    for (int i = 0; i < n; ++i) classes.push_back(std::uniform_int_distribution<int>(0, 2)(rng));
    Matrix local(n, t);
    for (int i = 0; i < n; ++i) {
      local.row(i) = x.row(i);
      for (Eigen::Index s = 0; s < t; ++s) local(i, s) += 2.0 * g(rng);
    }

    auto mi = [&](const Matrix& a, std::size_t i, const Matrix& b, std::size_t j) {
      return oracle::binned_mi(row(a, static_cast<Eigen::Index>(i)), row(b, static_cast<Eigen::Index>(j)), bins);
    };
    std::vector<std::size_t> ids(static_cast<std::size_t>(n));
    std::iota(ids.begin(), ids.end(), 0);
    auto pair = [&](std::size_t a, std::size_t b) { return mi(x, a, x, b); };
    auto chosen = [](const std::vector<oracle::GreedyStep>& s) {
      std::vector<std::size_t> v;
      for (const auto& e : s) v.push_back(e.channel);
      return v;
    };

    const auto r1 = maternal_rule1(rec, class_refs, classes, k, opt);
    const auto o1 = oracle::greedy_min(ids, k, [&](std::size_t j) {
      return mi(x, j, class_refs, static_cast<std::size_t>(classes[j]));
    }, pair);
    const auto r2 = maternal_rule2(rec, local, k, opt);
    const auto o2 = oracle::greedy_min(ids, k, [&](std::size_t j) { return mi(x, j, local, j); }, pair);
    bool ok = r1.selected == chosen(o1) && r2.selected == chosen(o2);
    if (r2.selected.size() >= 2) {
      const std::size_t m = r2.selected.size() - 1;
      const auto f = fetal_rule1(rec, r2, local, m, opt.mi);
      ok = ok && f.selected == oracle::repeated_argmax(r2.selected, m, [&](std::size_t j) { return mi(x, j, local, j); });
    }
    agree += ok;
  }
  report(9, agree == 50, fmt("%d/50 instances agree for rules 1, 2 and the fetal rule", agree));
}

void criterion10(const ExperimentConfig& cfg) {
  std::string hashes[2];
  for (int i = 0; i < 2; ++i) {
    auto c = cfg;
    c.output_dir = fs::temp_directory_path() / ("fecg_acceptance_det_" + std::to_string(i));
    fs::remove_all(c.output_dir);
    cmd_pipeline(c, {});
    std::ifstream f(c.output_dir / "manifest.json");
    hashes[i] = nlohmann::json::parse(f).at("outputs_hash").get<std::string>();
  }
  report(10, hashes[0] == hashes[1] && !hashes[0].empty(),
         fmt("outputs_hash %s / %s", hashes[0].substr(0, 16).c_str(), hashes[1].substr(0, 16).c_str()));
}

}  // namespace

int main() {
  try {
    criterion1();
    criterion2();

    const ExperimentConfig cfg = default_config();
    const auto sim = simulate(cfg);
    const auto rec = preprocess(sim.mix.recordings, cfg.preprocess);
    criterion3(sim);

    const auto t0 = Clock::now();
    const auto maps = compute_mimaps(rec, sim.mix.maternal_reference, &sim.mix.fetal_reference, cfg.mi);
    const double map_seconds = seconds_since(t0);
    criteria456(cfg, sim, maps, map_seconds);

    criterion7();
    criterion8(cfg, sim, rec);
    criterion9();
    criterion10(cfg);
  } catch (const std::exception& e) {
    std::printf("FAIL aborted: %s\n", e.what());
    return 100;
  }
  std::printf("%d criteria failed\n", failures);
  return failures;
}
