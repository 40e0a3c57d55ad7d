#pragma once

// Whitening and JADE: joint approximate diagonalization of the m(m+1)/2
// fourth-order cumulant matrices by Jacobi (Givens) sweeps.

#include "fecg/common.hpp"
#include "fecg/preprocess.hpp"

#include <nlohmann/json_fwd.hpp>

#include <span>
#include <vector>

namespace fecg {

struct Whitening {
  Matrix z;            ///< m x T, identity sample covariance
  Matrix matrix;       ///< m x N, z = matrix * (x - mean)
  Matrix dewhitening;  ///< N x m
  Vector mean;         ///< N
  Vector eigenvalues;  ///< all N covariance eigenvalues, descending
};

/// Keeps the m leading principal directions. Throws when m exceeds the numerical rank.
Whitening whiten(const Matrix& x, std::size_t m);

struct JadeOptions {
  double threshold = 1e-6;  ///< rad
  int max_sweeps = 100;
};

struct JadeResult {
  Matrix rotation;  ///< m x m orthogonal, sources = rotation * z
  int sweeps = 0;
  bool converged = false;
};

JadeResult jade(const Matrix& z, const JadeOptions& opt = {});

struct ICAResult {
  Matrix demixing;     ///< W, m x N
  Matrix mixing;       ///< A, N x m, pseudo-inverse of W
  Matrix sources;      ///< m x T, zero mean, unit variance
  Matrix whitening;    ///< m x N
  Vector eigenvalues;  ///< covariance spectrum, descending
  Vector kurtosis;     ///< excess kurtosis per source
  int sweeps = 0;
  bool converged = false;
  /// False when every source is close to Gaussian and the rotation is arbitrary.
  bool identifiable = true;
};

/// Sources are ordered by decreasing mixing-column norm, signs fixed so the
/// largest mixing entry of each column is positive.
ICAResult separate(const Matrix& x, std::size_t m, const JadeOptions& opt = {});

/// Normalized Amari index of P = W * A_true; 0 for a scaled permutation.
double amari_index(const Matrix& p);

struct ComponentScore {
  std::size_t component = 0;
  double score = 0.0;
};

/// Binned MI between each source and the reference, descending.
std::vector<ComponentScore> rank_fetal_components(const ICAResult& r, std::span<const double> reference,
                                                  int bins = 16);

/// Peak-train F1 of each source's detected peaks against the given peaks, descending.
std::vector<ComponentScore> rank_fetal_components(const ICAResult& r, const PeakTrain& peaks,
                                                  double sample_rate, const RateBand& band,
                                                  std::size_t tolerance);

nlohmann::json ica_metadata_json(const ICAResult& r);

}  // namespace fecg
