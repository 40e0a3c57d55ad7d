#include "fecg/ica.hpp"

#include <nlohmann/json.hpp>

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fecg/mi.hpp"

namespace fecg {

namespace {

std::vector<ComponentScore> sorted_scores(std::vector<double> s) {
  std::vector<ComponentScore> out;
  for (std::size_t i = 0; i < s.size(); ++i) out.push_back({i, s[i]});
  std::stable_sort(out.begin(), out.end(),
                   [](const ComponentScore& a, const ComponentScore& b) { return a.score > b.score; });
  return out;
}

}  // namespace

Whitening whiten(const Matrix& x, std::size_t m) {
  const auto n = static_cast<std::size_t>(x.rows());
  if (m == 0 || m > n) throw ValidationError("whiten: m must lie in [1, N]");
  if (x.cols() < 2) throw ValidationError("whiten: need at least 2 samples");
  Whitening w;
  w.mean = x.rowwise().mean();
  const Matrix xc = x.colwise() - w.mean;
  const Matrix cov = xc * xc.transpose() / static_cast<double>(x.cols());
  Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
  if (es.info() != Eigen::Success) throw Error("whiten: eigendecomposition failed");
  w.eigenvalues = es.eigenvalues().reverse();
  const Matrix vectors = es.eigenvectors().rowwise().reverse();
  const double top = std::max(w.eigenvalues[0], 0.0);
  std::size_t rank = 0;
  for (Eigen::Index i = 0; i < w.eigenvalues.size(); ++i) {
    if (w.eigenvalues[i] > top * 1e-12 * static_cast<double>(n) && w.eigenvalues[i] > 0.0) ++rank;
  }
  if (m > rank) {
    throw ValidationError("whiten: m = " + std::to_string(m) + " exceeds the numerical rank " +
                          std::to_string(rank));
  }
  const auto mm = static_cast<Eigen::Index>(m);
  const Vector d = w.eigenvalues.head(mm);
  const Matrix e = vectors.leftCols(mm);
  w.matrix = d.cwiseSqrt().cwiseInverse().asDiagonal() * e.transpose();
  w.dewhitening = e * d.cwiseSqrt().asDiagonal();
  w.z = w.matrix * xc;
  return w;
}

JadeResult jade(const Matrix& z, const JadeOptions& opt) {
  const auto m = z.rows();
  const auto t = static_cast<double>(z.cols());
  if (m < 1 || z.cols() < 2) throw ValidationError("jade: empty input");
  JadeResult res;
  res.rotation = Matrix::Identity(m, m);
  if (m == 1) {
    res.converged = true;
    return res;
  }

  // cumulant matrices of the whitened data, one per index pair i >= j
  std::vector<std::pair<Eigen::Index, Eigen::Index>> pairs;
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) pairs.emplace_back(i, j);
  }
  std::vector<Matrix> cm(pairs.size());
  parallel_for(pairs.size(), [&](std::size_t k) {
    const auto [i, j] = pairs[k];
    const Eigen::RowVectorXd w = z.row(i).cwiseProduct(z.row(j));
    Matrix q = (z.array().rowwise() * w.array()).matrix() * z.transpose() / t;
    if (i == j) {
      q -= Matrix::Identity(m, m);
      q(i, i) -= 2.0;
    } else {
      q(i, j) -= 1.0;
      q(j, i) -= 1.0;
      q *= std::sqrt(2.0);
    }
    cm[k] = std::move(q);
  });

  Matrix v = Matrix::Identity(m, m);
  bool again = true;
  while (again && res.sweeps < opt.max_sweeps) {
    again = false;
    ++res.sweeps;
    for (Eigen::Index p = 0; p + 1 < m; ++p) {
      for (Eigen::Index q = p + 1; q < m; ++q) {
        double g11 = 0.0, g12 = 0.0, g22 = 0.0;
        for (const auto& c : cm) {
          const double a = c(p, p) - c(q, q);
          const double b = c(p, q) + c(q, p);
          g11 += a * a;
          g12 += a * b;
          g22 += b * b;
        }
        const double ton = g11 - g22;
        const double toff = 2.0 * g12;
        const double theta = 0.5 * std::atan2(toff, ton + std::sqrt(ton * ton + toff * toff));
        if (std::abs(theta) <= opt.threshold) continue;
        again = true;
        const double c = std::cos(theta);
        const double s = std::sin(theta);
        const Eigen::VectorXd vp = v.col(p), vq = v.col(q);
        v.col(p) = c * vp + s * vq;
        v.col(q) = -s * vp + c * vq;
        for (auto& mtx : cm) {
          const Eigen::RowVectorXd rp = mtx.row(p), rq = mtx.row(q);
          mtx.row(p) = c * rp + s * rq;
          mtx.row(q) = -s * rp + c * rq;
          const Eigen::VectorXd cp = mtx.col(p), cq = mtx.col(q);
          mtx.col(p) = c * cp + s * cq;
          mtx.col(q) = -s * cp + c * cq;
        }
      }
    }
  }
  res.converged = !again;
  if (!res.converged) {
    warn("jade: no convergence after " + std::to_string(res.sweeps) + " sweeps, result is best effort");
  }
  res.rotation = v.transpose();
  return res;
}

ICAResult separate(const Matrix& x, std::size_t m, const JadeOptions& opt) {
  const auto n = static_cast<std::size_t>(x.rows());
  if (m < 2 || m > n) {
    throw ValidationError("separate: need 2 <= m <= N (m = " + std::to_string(m) + ", N = " +
                          std::to_string(n) + ")");
  }
  if (static_cast<std::size_t>(x.cols()) <= n) throw ValidationError("separate: need more samples than channels");
  const Whitening w = whiten(x, m);
  const JadeResult j = jade(w.z, opt);

  Matrix demix = j.rotation * w.matrix;
  Matrix mix = w.dewhitening * j.rotation.transpose();
  Matrix src = j.rotation * w.z;

  const auto mm = static_cast<Eigen::Index>(m);
  std::vector<Eigen::Index> order(m);
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return mix.col(a).squaredNorm() > mix.col(b).squaredNorm(); });

  ICAResult r;
  r.demixing.resize(mm, x.rows());
  r.mixing.resize(x.rows(), mm);
  r.sources.resize(mm, x.cols());
  for (Eigen::Index k = 0; k < mm; ++k) {
    const Eigen::Index c = order[static_cast<std::size_t>(k)];
    Eigen::Index at = 0;
    mix.col(c).cwiseAbs().maxCoeff(&at);
    const double sign = mix(at, c) < 0.0 ? -1.0 : 1.0;
    r.mixing.col(k) = sign * mix.col(c);
    r.demixing.row(k) = sign * demix.row(c);
    r.sources.row(k) = sign * src.row(c);
  }
  r.whitening = w.matrix;
  r.eigenvalues = w.eigenvalues;
  r.sweeps = j.sweeps;
  r.converged = j.converged;

  r.kurtosis.resize(mm);
  const double t = static_cast<double>(x.cols());
  std::size_t gaussian_like = 0;
  const double kurt_tol = 4.0 * std::sqrt(24.0 / t);
  for (Eigen::Index k = 0; k < mm; ++k) {
    r.kurtosis[k] = r.sources.row(k).array().pow(4).sum() / t - 3.0;
    if (std::abs(r.kurtosis[k]) < kurt_tol) ++gaussian_like;
  }
  r.identifiable = gaussian_like <= 1;
  if (!r.identifiable) {
    warn("separate: " + std::to_string(gaussian_like) +
         " sources are close to Gaussian; their separation is not identifiable");
  }
  return r;
}

double amari_index(const Matrix& p) {
  const auto m = p.rows();
  if (m < 2 || p.cols() != m) throw ValidationError("amari_index: need a square matrix of size >= 2");
  const Matrix a = p.cwiseAbs();
  double s = 0.0;
  for (Eigen::Index i = 0; i < m; ++i) s += a.row(i).sum() / a.row(i).maxCoeff() - 1.0;
  for (Eigen::Index j = 0; j < m; ++j) s += a.col(j).sum() / a.col(j).maxCoeff() - 1.0;
  return s / (2.0 * static_cast<double>(m) * static_cast<double>(m - 1));
}

std::vector<ComponentScore> rank_fetal_components(const ICAResult& r, std::span<const double> reference,
                                                  int bins) {
  if (static_cast<std::size_t>(r.sources.cols()) != reference.size()) {
    throw ValidationError("rank_fetal_components: reference length differs from the sources");
  }
  const RowMatrix s = r.sources;
  const BinnedVariable ref(reference, bins);
  std::vector<double> score(static_cast<std::size_t>(s.rows()));
  parallel_for(score.size(), [&](std::size_t k) {
    const BinnedVariable b({s.row(static_cast<Eigen::Index>(k)).data(), static_cast<std::size_t>(s.cols())}, bins);
    score[k] = binned_mi(b, ref);
  });
  return sorted_scores(std::move(score));
}

std::vector<ComponentScore> rank_fetal_components(const ICAResult& r, const PeakTrain& peaks,
                                                  double sample_rate, const RateBand& band,
                                                  std::size_t tolerance) {
  const RowMatrix s = r.sources;
  std::vector<double> score(static_cast<std::size_t>(s.rows()), 0.0);
  for (std::size_t k = 0; k < score.size(); ++k) {
    try {
      const auto det = detect_r_peaks({s.row(static_cast<Eigen::Index>(k)).data(), static_cast<std::size_t>(s.cols())},
                                      sample_rate, band);
      score[k] = match_peaks(det.indices, peaks.indices, tolerance).f1;
    } catch (const Error&) {
      score[k] = 0.0;
    }
  }
  return sorted_scores(std::move(score));
}

nlohmann::json ica_metadata_json(const ICAResult& r) {
  nlohmann::json j;
  j["components"] = r.sources.rows();
  j["channels"] = r.mixing.rows();
  j["sweeps"] = r.sweeps;
  j["converged"] = r.converged;
  j["identifiable"] = r.identifiable;
  j["eigenvalues"] = std::vector<double>(r.eigenvalues.data(), r.eigenvalues.data() + r.eigenvalues.size());
  j["kurtosis"] = std::vector<double>(r.kurtosis.data(), r.kurtosis.data() + r.kurtosis.size());
  return j;
}

}  // namespace fecg
