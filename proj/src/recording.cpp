#include "fecg/recording.hpp"

namespace fecg {

std::vector<std::size_t> RecordingSet::valid_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < channels(); ++i) {
    if (valid.empty() || valid[i]) out.push_back(i);
  }
  return out;
}

void RecordingSet::fill_defaults() {
  if (labels.empty()) {
    labels.reserve(channels());
    for (std::size_t i = 0; i < channels(); ++i) labels.push_back("ch" + std::to_string(i));
  }
  if (valid.empty()) valid.assign(channels(), true);
}

void RecordingSet::validate() const {
  if (data.rows() == 0 || data.cols() == 0) {
    throw ValidationError("recording set: data must have at least one channel and one sample");
  }
  if (!(sample_rate > 0.0)) throw ValidationError("recording set: sample_rate must be > 0");
  if (!labels.empty() && labels.size() != channels()) {
    throw ValidationError("recording set: label count does not match channel count");
  }
  if (!valid.empty() && valid.size() != channels()) {
    throw ValidationError("recording set: validity flag count does not match channel count");
  }
  if (!grid.empty() && grid.size() != channels()) {
    throw ValidationError("recording set: grid position count does not match channel count");
  }
}

}  // namespace fecg
