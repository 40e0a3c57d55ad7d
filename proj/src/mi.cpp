#include "fecg/mi.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>

#include "fecg/io.hpp"

namespace fecg {

namespace {

constexpr double kEulerGamma = 0.57721566490153286061;

void check_nonconstant(std::span<const double> x, const char* what) {
  if (x.empty()) throw ValidationError(std::string(what) + ": empty input");
  const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
  if (!std::isfinite(*lo) || !std::isfinite(*hi)) {
    throw ValidationError(std::string(what) + ": non-finite sample");
  }
  if (*lo == *hi) throw ValidationError(std::string(what) + ": degenerate variable");
}

// psi(n) for n = 1..max via the harmonic recurrence
std::vector<double> digamma_table(std::size_t max) {
  std::vector<double> t(max + 1, 0.0);
  if (max >= 1) t[1] = -kEulerGamma;
  for (std::size_t n = 2; n <= max; ++n) t[n] = t[n - 1] + 1.0 / static_cast<double>(n - 1);
  return t;
}

struct KnnData {
  std::vector<double> x;  // standardized
  Matrix y;               // whitened, d x T
};

KnnData prepare_knn(std::span<const double> x, const Matrix& y) {
  const auto t = static_cast<Eigen::Index>(x.size());
  KnnData d;
  Eigen::Map<const Vector> xv(x.data(), t);
  const double mx = xv.mean();
  const double sx = std::sqrt((xv.array() - mx).square().sum() / static_cast<double>(t - 1));
  d.x.resize(x.size());
  for (Eigen::Index i = 0; i < t; ++i) d.x[static_cast<std::size_t>(i)] = (xv[i] - mx) / sx;

  const Matrix centered = y.colwise() - y.rowwise().mean();
  const Matrix cov = centered * centered.transpose() / static_cast<double>(t - 1);
  Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
  const Vector ev = es.eigenvalues();
  if (ev.minCoeff() <= 1e-12 * std::max(ev.maxCoeff(), 1e-300)) {
    throw ValidationError("estimate_mi_knn: reference covariance is singular");
  }
  const Matrix inv_sqrt =
      es.eigenvectors() * ev.cwiseSqrt().cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
  d.y = inv_sqrt * centered;
  return d;
}

// epsilon_i = distance to the k-th neighbour in the joint max-norm space
std::vector<double> knn_radii(const KnnData& d, int k, const std::vector<std::size_t>& order,
                              const std::vector<std::size_t>& pos) {
  const std::size_t t = d.x.size();
  const auto dim = d.y.rows();
  std::vector<double> eps(t);
  parallel_for(t, [&](std::size_t i) {
    std::vector<double> best;  // max-heap of the k smallest distances
    best.reserve(static_cast<std::size_t>(k) + 1);
    auto consider = [&](std::size_t j) {
      double s = 0.0;
      for (Eigen::Index r = 0; r < dim; ++r) {
        const double v = d.y(r, static_cast<Eigen::Index>(i)) - d.y(r, static_cast<Eigen::Index>(j));
        s += v * v;
      }
      const double dist = std::max(std::abs(d.x[i] - d.x[j]), std::sqrt(s));
      if (best.size() < static_cast<std::size_t>(k)) {
        best.push_back(dist);
        std::push_heap(best.begin(), best.end());
      } else if (dist < best.front()) {
        std::pop_heap(best.begin(), best.end());
        best.back() = dist;
        std::push_heap(best.begin(), best.end());
      }
    };
    // walk outwards in x order; stop once |dx| alone exceeds the current k-th distance
    std::size_t lo = pos[i];
    std::size_t hi = pos[i] + 1;
    for (;;) {
      const double bound = best.size() < static_cast<std::size_t>(k)
                               ? std::numeric_limits<double>::infinity()
                               : best.front();
      const double dlo = lo > 0 ? d.x[i] - d.x[order[lo - 1]] : std::numeric_limits<double>::infinity();
      const double dhi = hi < t ? d.x[order[hi]] - d.x[i] : std::numeric_limits<double>::infinity();
      if (std::min(dlo, dhi) > bound || (lo == 0 && hi == t)) break;
      if (dlo <= dhi) {
        consider(order[--lo]);
      } else {
        consider(order[hi++]);
      }
    }
    eps[i] = best.front();
  });
  return eps;
}

double ksg_value(const KnnData& d, int k, const std::vector<double>& eps,
                 const std::vector<std::size_t>& order) {
  const std::size_t t = d.x.size();
  const auto dim = d.y.rows();
  std::vector<double> sorted_x(t);
  for (std::size_t r = 0; r < t; ++r) sorted_x[r] = d.x[order[r]];
  const auto psi = digamma_table(t + 1);
  std::vector<double> terms(t);
  parallel_for(t, [&](std::size_t i) {
    const double e = eps[i];
    // strictly closer than eps_i in the marginal spaces, excluding i itself
    const auto lo = std::upper_bound(sorted_x.begin(), sorted_x.end(), d.x[i] - e,
                                     [](double v, double s) { return v <= s; });
    const auto hi = std::lower_bound(sorted_x.begin(), sorted_x.end(), d.x[i] + e);
    const auto nx = static_cast<std::size_t>(hi - lo) - 1;
    std::size_t ny = 0;
    const double e2 = e * e;
    for (std::size_t j = 0; j < t; ++j) {
      double s = 0.0;
      for (Eigen::Index r = 0; r < dim; ++r) {
        const double v = d.y(r, static_cast<Eigen::Index>(i)) - d.y(r, static_cast<Eigen::Index>(j));
        s += v * v;
      }
      if (s < e2) ++ny;
    }
    ny -= 1;
    terms[i] = psi[nx + 1] + psi[ny + 1];
  });
  const double mean = std::accumulate(terms.begin(), terms.end(), 0.0) / static_cast<double>(t);
  return psi[static_cast<std::size_t>(k)] + psi[t] - mean;
}

}  // namespace

std::string to_string(MIEstimator e) { return e == MIEstimator::Binned ? "binned" : "ksg"; }

MIEstimator mi_estimator_from_string(const std::string& name) {
  if (name == "binned" || name == "binned-equiprobable") return MIEstimator::Binned;
  if (name == "ksg" || name == "knn" || name == "ksg-knn") return MIEstimator::Knn;
  throw ValidationError("unknown MI estimator '" + name + "' (binned | ksg)");
}

void MIConfig::validate() const {
  if (bins < 2 || bins > 65535) throw ValidationError("mi: bins must lie in [2, 65535]");
  if (neighbors < 1) throw ValidationError("mi: neighbors must be >= 1");
}

BinnedVariable::BinnedVariable(std::span<const double> x, int bins) : bins_(bins) {
  if (bins < 2 || bins > 65535) throw ValidationError("binning: bins must lie in [2, 65535]");
  check_nonconstant(x, "binning");
  const std::size_t t = x.size();
  std::vector<std::size_t> order(t);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  index_.resize(t);
  const auto b = static_cast<std::uint64_t>(bins);
  for (std::size_t r = 0; r < t; ++r) {
    index_[order[r]] = static_cast<std::uint16_t>(static_cast<std::uint64_t>(r) * b / t);
  }
}

double binned_mi(const BinnedVariable& a, const BinnedVariable& b) {
  if (a.size() != b.size()) throw ValidationError("binned_mi: length mismatch");
  if (a.bins() != b.bins()) throw ValidationError("binned_mi: bin count mismatch");
  const auto nb = static_cast<std::size_t>(a.bins());
  std::vector<std::uint32_t> joint(nb * nb, 0);
  std::vector<std::uint32_t> ca(nb, 0);
  std::vector<std::uint32_t> cb(nb, 0);
  const auto& ia = a.index();
  const auto& ib = b.index();
  for (std::size_t i = 0; i < ia.size(); ++i) {
    ++joint[static_cast<std::size_t>(ia[i]) * nb + ib[i]];
    ++ca[ia[i]];
    ++cb[ib[i]];
  }
  const auto t = static_cast<double>(ia.size());
  // summed in sorted order so swapping the arguments gives the same bits
  std::vector<double> terms;
  terms.reserve(nb * nb);
  for (std::size_t u = 0; u < nb; ++u) {
    for (std::size_t v = 0; v < nb; ++v) {
      const std::uint32_t c = joint[u * nb + v];
      if (c == 0) continue;
      const double cd = static_cast<double>(c);
      terms.push_back(cd * std::log(cd * t / (static_cast<double>(ca[u]) * static_cast<double>(cb[v]))));
    }
  }
  std::sort(terms.begin(), terms.end());
  double mi = 0.0;
  for (double x : terms) mi += x;
  // rounding can leave a value a hair below zero for independent bins
  return std::max(mi / t, 0.0);
}

MIEstimate estimate_mi_binned(std::span<const double> x, std::span<const double> y, int bins,
                              bool enforce_sample_floor) {
  if (x.size() != y.size()) throw ValidationError("estimate_mi_binned: length mismatch");
  if (bins < 2) throw ValidationError("estimate_mi_binned: bins must be >= 2");
  const auto b2 = static_cast<std::size_t>(bins) * static_cast<std::size_t>(bins);
  if (enforce_sample_floor && x.size() < 10 * b2) {
    throw ValidationError("estimate_mi_binned: need T >= 10 B^2 = " + std::to_string(10 * b2) +
                          " samples, got " + std::to_string(x.size()));
  }
  BinnedVariable bx(x, bins);
  BinnedVariable by(y, bins);
  return {binned_mi(bx, by), MIEstimator::Binned, bins, x.size()};
}

MIEstimate estimate_mi_knn(std::span<const double> x, const Matrix& y, int k) {
  const std::size_t t = x.size();
  if (k < 1) throw ValidationError("estimate_mi_knn: k must be >= 1");
  if (static_cast<std::size_t>(y.cols()) != t) throw ValidationError("estimate_mi_knn: length mismatch");
  if (y.rows() < 1) throw ValidationError("estimate_mi_knn: reference has no dimensions");
  if (t <= 2 * static_cast<std::size_t>(k)) throw ValidationError("estimate_mi_knn: need T > 2k");
  check_nonconstant(x, "estimate_mi_knn");

  KnnData d = prepare_knn(x, y);
  auto sort_order = [&]() {
    std::vector<std::size_t> order(t);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return d.x[a] < d.x[b]; });
    std::vector<std::size_t> pos(t);
    for (std::size_t r = 0; r < t; ++r) pos[order[r]] = r;
    return std::pair{order, pos};
  };
  auto [order, pos] = sort_order();
  auto eps = knn_radii(d, k, order, pos);
  if (*std::min_element(eps.begin(), eps.end()) <= 1e-12) {
    warn("estimate_mi_knn: duplicate points, adding 1e-10 jitter");
    std::mt19937_64 rng(0x6b736700ull + t);
    std::normal_distribution<double> jitter(0.0, 1e-10);
    for (auto& v : d.x) v += jitter(rng);
    for (Eigen::Index i = 0; i < d.y.size(); ++i) d.y.data()[i] += jitter(rng);
    std::tie(order, pos) = sort_order();
    eps = knn_radii(d, k, order, pos);
  }
  return {ksg_value(d, k, eps, order), MIEstimator::Knn, k, t};
}

MIEstimate estimate_mi_knn(std::span<const double> x, std::span<const double> y, int k) {
  Matrix ym(1, static_cast<Eigen::Index>(y.size()));
  for (std::size_t i = 0; i < y.size(); ++i) ym(0, static_cast<Eigen::Index>(i)) = y[i];
  return estimate_mi_knn(x, ym, k);
}

double pearson_correlation(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ValidationError("pearson_correlation: length mismatch");
  if (x.size() < 2) throw ValidationError("pearson_correlation: need at least 2 samples");
  const auto n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw ValidationError("pearson_correlation: degenerate variable");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double estimate_mi(std::span<const double> x, std::span<const double> y, const MIConfig& cfg) {
  if (cfg.estimator == MIEstimator::Binned) {
    return estimate_mi_binned(x, y, cfg.bins, cfg.enforce_sample_floor).value;
  }
  return estimate_mi_knn(x, y, cfg.neighbors).value;
}

std::string to_string(MapKind k) {
  switch (k) {
    case MapKind::Maternal: return "maternal";
    case MapKind::Fetal: return "fetal";
    case MapKind::Differential: return "differential";
  }
  return "?";
}

MIMap mi_map(const RecordingSet& recordings, const Matrix& refs, const MIConfig& cfg,
             MapKind kind) {
  recordings.validate();
  cfg.validate();
  if (refs.rows() != recordings.data.rows() || refs.cols() != recordings.data.cols()) {
    throw ValidationError("mi_map: reference matrix is " + std::to_string(refs.rows()) + "x" +
                          std::to_string(refs.cols()) + ", recordings are " +
                          std::to_string(recordings.data.rows()) + "x" +
                          std::to_string(recordings.data.cols()));
  }
  const std::size_t n = recordings.channels();
  MIMap map;
  map.kind = kind;
  map.grid = recordings.grid;
  map.labels = recordings.labels;
  map.values.assign(n, std::numeric_limits<double>::quiet_NaN());
  // row-major copies so each channel is a contiguous span
  const RowMatrix x = recordings.data;
  const RowMatrix r = refs;
  const auto t = static_cast<std::size_t>(x.cols());
  parallel_for(n, [&](std::size_t i) {
    if (!recordings.valid.empty() && !recordings.valid[i]) return;
    std::span<const double> xi(x.row(static_cast<Eigen::Index>(i)).data(), t);
    std::span<const double> ri(r.row(static_cast<Eigen::Index>(i)).data(), t);
    const auto [lo, hi] = std::minmax_element(ri.begin(), ri.end());
    const auto [xlo, xhi] = std::minmax_element(xi.begin(), xi.end());
    if (*lo == *hi || *xlo == *xhi) return;
    map.values[i] = estimate_mi(xi, ri, cfg);
  });
  if (!map.grid.empty()) {
    int rows = 0, cols = 0;
    for (const auto& g : map.grid) {
      rows = std::max(rows, g.row + 1);
      cols = std::max(cols, g.col + 1);
    }
    map.rows = rows;
    map.cols = cols;
  }
  return map;
}

MIMap differential_mi_map(const MIMap& fetal, const MIMap& maternal) {
  if (fetal.values.size() != maternal.values.size() || fetal.grid != maternal.grid) {
    throw ValidationError("differential_mi_map: maps are on different grids");
  }
  MIMap out = fetal;
  out.kind = MapKind::Differential;
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] -= maternal.values[i];
  return out;
}

void write_mimap_csv(const MIMap& map, std::ostream& out) {
  if (!map.grid.empty()) {
    out << "row,col,value\n";
    for (std::size_t i = 0; i < map.values.size(); ++i) {
      out << map.grid[i].row << ',' << map.grid[i].col << ',' << format_double(map.values[i]) << '\n';
    }
  } else {
    out << "label,value\n";
    for (std::size_t i = 0; i < map.values.size(); ++i) {
      const std::string label = i < map.labels.size() ? map.labels[i] : "ch" + std::to_string(i);
      out << label << ',' << format_double(map.values[i]) << '\n';
    }
  }
}

void write_mimap_grid(const MIMap& map, std::ostream& out) {
  if (!map.rows || !map.cols) throw ValidationError("write_mimap_grid: map has no grid");
  Matrix g = Matrix::Constant(*map.rows, *map.cols, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t i = 0; i < map.values.size(); ++i) g(map.grid[i].row, map.grid[i].col) = map.values[i];
  out << "# " << to_string(map.kind) << " MI (nats), " << *map.rows << " rows x " << *map.cols
      << " cols\n";
  for (Eigen::Index r = 0; r < g.rows(); ++r) {
    for (Eigen::Index c = 0; c < g.cols(); ++c) {
      if (c) out << ' ';
      out << format_double(g(r, c));
    }
    out << '\n';
  }
}

}  // namespace fecg
