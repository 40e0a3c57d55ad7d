#pragma once

// Mutual information estimators (nats) and per-electrode MI maps.

#include "fecg/common.hpp"
#include "fecg/recording.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace fecg {

enum class MIEstimator { Binned, Knn };

std::string to_string(MIEstimator e);
MIEstimator mi_estimator_from_string(const std::string& name);

struct MIEstimate {
  double value = 0.0;
  MIEstimator estimator = MIEstimator::Binned;
  int param = 16;  ///< bins B or neighbors k
  std::size_t samples = 0;
};

struct MIConfig {
  MIEstimator estimator = MIEstimator::Binned;
  int bins = 16;
  int neighbors = 4;
  bool enforce_sample_floor = true;  ///< require T >= 10 B^2 for the binned estimator

  void validate() const;
};

/// Equiprobable bin index per sample. Ranks come from a stable sort, so tied
/// values are ordered by sample index; bin = rank * B / T.
class BinnedVariable {
 public:
  BinnedVariable() = default;
  BinnedVariable(std::span<const double> x, int bins);

  int bins() const { return bins_; }
  std::size_t size() const { return index_.size(); }
  const std::vector<std::uint16_t>& index() const { return index_; }

 private:
  int bins_ = 0;
  std::vector<std::uint16_t> index_;
};

/// Plug-in MI of two pre-binned variables of equal length and bin count.
double binned_mi(const BinnedVariable& a, const BinnedVariable& b);

MIEstimate estimate_mi_binned(std::span<const double> x, std::span<const double> y, int bins,
                              bool enforce_sample_floor = true);

/// KSG (type 1) estimate of I(x; Y), Y given as d x T. Y is whitened first,
/// then distances are Euclidean inside Y and max-norm across (x, Y).
/// The estimate can be slightly negative.
MIEstimate estimate_mi_knn(std::span<const double> x, const Matrix& y, int k);
MIEstimate estimate_mi_knn(std::span<const double> x, std::span<const double> y, int k);

double pearson_correlation(std::span<const double> x, std::span<const double> y);

/// Dispatch on cfg for scalar pairs.
double estimate_mi(std::span<const double> x, std::span<const double> y, const MIConfig& cfg);

enum class MapKind { Maternal, Fetal, Differential };
std::string to_string(MapKind k);

struct MIMap {
  MapKind kind = MapKind::Maternal;
  std::vector<double> values;  ///< per channel; NaN = absent
  std::vector<GridPos> grid;
  std::vector<std::string> labels;
  std::optional<int> rows;
  std::optional<int> cols;
};

/// MI(channel_i, ref_i) per channel. Invalid channels and channels whose
/// reference is constant are absent (NaN).
MIMap mi_map(const RecordingSet& recordings, const Matrix& refs, const MIConfig& cfg,
             MapKind kind);

MIMap differential_mi_map(const MIMap& fetal, const MIMap& maternal);

/// CSV with header row,col,value (label when the map has no grid).
void write_mimap_csv(const MIMap& map, std::ostream& out);
/// Whitespace-separated rows x cols matrix for gnuplot `matrix` plots; absent cells are NaN.
void write_mimap_grid(const MIMap& map, std::ostream& out);

}  // namespace fecg
