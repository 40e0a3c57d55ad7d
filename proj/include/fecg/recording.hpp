#pragma once

#include "fecg/common.hpp"

#include <string>
#include <vector>

namespace fecg {

struct GridPos {
  int row = 0;
  int col = 0;

  friend bool operator==(const GridPos&, const GridPos&) = default;
};

/// Chebyshev distance between grid cells.
inline int grid_distance(GridPos a, GridPos b) {
  const int dr = a.row > b.row ? a.row - b.row : b.row - a.row;
  const int dc = a.col > b.col ? a.col - b.col : b.col - a.col;
  return dr > dc ? dr : dc;
}

/// N x T channel matrix with per-channel metadata.
struct RecordingSet {
  Matrix data;  ///< channels x samples
  double sample_rate = 1000.0;
  std::vector<std::string> labels;
  std::vector<bool> valid;
  std::vector<GridPos> grid;  ///< may be empty for recordings without a grid

  std::size_t channels() const { return static_cast<std::size_t>(data.rows()); }
  std::size_t samples() const { return static_cast<std::size_t>(data.cols()); }
  std::vector<std::size_t> valid_indices() const;

  /// Fills default labels/valid flags when missing and checks consistency.
  void validate() const;
  void fill_defaults();
};

}  // namespace fecg
