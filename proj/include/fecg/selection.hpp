#pragma once

// Greedy MI channel selection.
//
//   maternal rules: x'_k = argmin_j  I(x_j, ref_j) + w * sum_{i<k} I(x'_i, x_j)
//   fetal rule:     repeatedly take argmax_j I(x'_j, fetal_ref_j)
//
// Ties go to the lowest channel id.

#include "fecg/common.hpp"
#include "fecg/mi.hpp"
#include "fecg/recording.hpp"

#include <nlohmann/json_fwd.hpp>

#include <string>
#include <vector>

namespace fecg {

enum class Rule { Maternal1, Maternal2, Fetal1 };
std::string to_string(Rule r);
Rule rule_from_string(const std::string& name);

struct SelectionStep {
  std::size_t channel = 0;
  double reference_mi = 0.0;
  double redundancy = 0.0;  ///< unweighted sum over channels selected before
  double objective = 0.0;
};

struct SelectionState {
  Rule rule = Rule::Maternal1;
  std::vector<std::size_t> candidates;
  std::vector<std::size_t> selected;
  std::vector<SelectionStep> steps;
  double redundancy_weight = 1.0;
  std::string fetal_reference = "";  ///< "shared" or "per-channel" for the fetal rule
};

struct SelectionOptions {
  MIConfig mi;
  double redundancy_weight = 1.0;
  /// Restricts the candidate set; empty means every valid channel.
  std::vector<std::size_t> candidates;
};

/// refs are the class signals (n_classes x T), classes the label per channel.
SelectionState maternal_rule1(const RecordingSet& rec, const Matrix& refs,
                              const std::vector<int>& classes, std::size_t k,
                              const SelectionOptions& opt = {});

/// local_refs is N x T, one local reference per channel.
SelectionState maternal_rule2(const RecordingSet& rec, const Matrix& local_refs, std::size_t k,
                              const SelectionOptions& opt = {});

/// fetal_refs is either 1 x T (shared) or N x T (per channel). Requires m < |selected|.
SelectionState fetal_rule1(const RecordingSet& rec, const SelectionState& selected,
                           const Matrix& fetal_refs, std::size_t m, const MIConfig& mi = {});

nlohmann::json selection_to_json(const SelectionState& s, const RecordingSet& rec,
                                 const std::string& config_hash);
SelectionState selection_from_json(const nlohmann::json& j);

}  // namespace fecg
