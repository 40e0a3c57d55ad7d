#include "fecg/selection.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <map>
#include <memory>
#include <optional>

namespace fecg {

namespace {

std::span<const double> row_span(const RowMatrix& m, std::size_t i) {
  return {m.row(static_cast<Eigen::Index>(i)).data(), static_cast<std::size_t>(m.cols())};
}

bool is_constant(std::span<const double> x) {
  const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
  return *lo == *hi;
}

// Channel and reference MI with binning done once per signal.
class MICache {
 public:
  MICache(const RowMatrix& x, const MIConfig& cfg) : x_(x), cfg_(cfg), bins_(static_cast<std::size_t>(x.rows())) {
    cfg_.validate();
    if (cfg_.estimator == MIEstimator::Binned && cfg_.enforce_sample_floor) {
      const auto b2 = static_cast<std::size_t>(cfg_.bins) * static_cast<std::size_t>(cfg_.bins);
      if (static_cast<std::size_t>(x.cols()) < 10 * b2) {
        throw ValidationError("selection: need T >= 10 B^2 = " + std::to_string(10 * b2) + " samples");
      }
    }
  }

  void prepare(const std::vector<std::size_t>& ids) {
    if (cfg_.estimator != MIEstimator::Binned) return;
    parallel_for(ids.size(), [&](std::size_t k) { channel_bins(ids[k]); });
  }

  // Reference MI; a constant reference carries no information.
  double with_reference(std::size_t ch, std::span<const double> ref) {
    if (is_constant(ref)) return 0.0;
    if (cfg_.estimator == MIEstimator::Binned) {
      return binned_mi(channel_bins(ch), BinnedVariable(ref, cfg_.bins));
    }
    return estimate_mi_knn(row_span(x_, ch), ref, cfg_.neighbors).value;
  }

  double with_reference(std::size_t ch, const BinnedVariable& ref) { return binned_mi(channel_bins(ch), ref); }

  double pair(std::size_t a, std::size_t b) {
    if (cfg_.estimator == MIEstimator::Binned) return binned_mi(channel_bins(a), channel_bins(b));
    return estimate_mi_knn(row_span(x_, a), row_span(x_, b), cfg_.neighbors).value;
  }

  const MIConfig& config() const { return cfg_; }

 private:
  const BinnedVariable& channel_bins(std::size_t ch) {
    auto& slot = bins_[ch];
    if (!slot) {
      try {
        slot = std::make_unique<BinnedVariable>(row_span(x_, ch), cfg_.bins);
      } catch (const ValidationError& e) {
        throw ValidationError("channel " + std::to_string(ch) + ": " + e.what());
      }
    }
    return *slot;
  }

  const RowMatrix& x_;
  MIConfig cfg_;
  std::vector<std::unique_ptr<BinnedVariable>> bins_;  // slot i written only by the worker owning i
};

std::vector<std::size_t> candidate_set(const RecordingSet& rec, const std::vector<std::size_t>& requested) {
  std::vector<std::size_t> out;
  if (requested.empty()) {
    out = rec.valid_indices();
  } else {
    for (auto id : requested) {
      if (id >= rec.channels()) throw ValidationError("selection: candidate id out of range");
      if (rec.valid.empty() || rec.valid[id]) out.push_back(id);
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
  }
  return out;
}

SelectionState greedy_min(Rule rule, const std::vector<std::size_t>& candidates,
                          const std::vector<double>& ref_mi, std::size_t k, double weight, MICache& mi) {
  if (k > candidates.size()) {
    throw ValidationError("selection: K = " + std::to_string(k) + " exceeds the " +
                          std::to_string(candidates.size()) + " candidate channels");
  }
  SelectionState s;
  s.rule = rule;
  s.candidates = candidates;
  s.redundancy_weight = weight;
  std::vector<std::size_t> remaining(candidates.size());
  for (std::size_t i = 0; i < remaining.size(); ++i) remaining[i] = i;  // positions into candidates
  std::vector<double> red(candidates.size(), 0.0);
  for (std::size_t step = 0; step < k; ++step) {
    if (step > 0) {
      const std::size_t last = s.selected.back();
      parallel_for(remaining.size(), [&](std::size_t r) {
        const std::size_t p = remaining[r];
        red[p] += mi.pair(last, candidates[p]);
      });
    }
    std::size_t best = 0;
    double best_obj = 0.0;
    for (std::size_t r = 0; r < remaining.size(); ++r) {
      const std::size_t p = remaining[r];
      const double obj = ref_mi[p] + weight * red[p];
      // candidates are ascending, so strict comparison keeps the lowest id on ties
      if (r == 0 || obj < best_obj) {
        best = r;
        best_obj = obj;
      }
    }
    const std::size_t p = remaining[best];
    s.selected.push_back(candidates[p]);
    s.steps.push_back({candidates[p], ref_mi[p], red[p], best_obj});
    remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(best));
  }
  return s;
}

}  // namespace

std::string to_string(Rule r) {
  switch (r) {
    case Rule::Maternal1: return "maternal1";
    case Rule::Maternal2: return "maternal2";
    case Rule::Fetal1: return "fetal1";
  }
  return "?";
}

Rule rule_from_string(const std::string& name) {
  if (name == "maternal1") return Rule::Maternal1;
  if (name == "maternal2") return Rule::Maternal2;
  if (name == "fetal1") return Rule::Fetal1;
  throw ValidationError("unknown selection rule '" + name + "' (maternal1 | maternal2 | fetal1)");
}

SelectionState maternal_rule1(const RecordingSet& rec, const Matrix& refs,
                              const std::vector<int>& classes, std::size_t k,
                              const SelectionOptions& opt) {
  rec.validate();
  if (refs.cols() != rec.data.cols() || refs.rows() < 1) {
    throw ValidationError("maternal_rule1: references must be n_classes x T");
  }
  if (classes.size() != rec.channels()) throw ValidationError("maternal_rule1: one class label per channel required");
  const RowMatrix x = rec.data;
  const RowMatrix r = refs;
  MICache mi(x, opt.mi);
  const auto cand = candidate_set(rec, opt.candidates);
  for (auto c : cand) {
    if (classes[c] < 0 || classes[c] >= r.rows()) {
      throw ValidationError("maternal_rule1: channel " + std::to_string(c) + " has no valid class");
    }
  }
  mi.prepare(cand);
  std::vector<std::optional<BinnedVariable>> ref_bins(static_cast<std::size_t>(r.rows()));
  std::vector<bool> ref_const(static_cast<std::size_t>(r.rows()));
  for (std::size_t j = 0; j < ref_bins.size(); ++j) {
    ref_const[j] = is_constant(row_span(r, j));
    if (!ref_const[j] && opt.mi.estimator == MIEstimator::Binned) ref_bins[j].emplace(row_span(r, j), opt.mi.bins);
  }
  std::vector<double> ref_mi(cand.size());
  parallel_for(cand.size(), [&](std::size_t p) {
    const auto j = static_cast<std::size_t>(classes[cand[p]]);
    if (ref_const[j]) {
      ref_mi[p] = 0.0;
    } else if (ref_bins[j]) {
      ref_mi[p] = mi.with_reference(cand[p], *ref_bins[j]);
    } else {
      ref_mi[p] = mi.with_reference(cand[p], row_span(r, j));
    }
  });
  return greedy_min(Rule::Maternal1, cand, ref_mi, k, opt.redundancy_weight, mi);
}

SelectionState maternal_rule2(const RecordingSet& rec, const Matrix& local_refs, std::size_t k,
                              const SelectionOptions& opt) {
  rec.validate();
  if (local_refs.rows() != rec.data.rows() || local_refs.cols() != rec.data.cols()) {
    throw ValidationError("maternal_rule2: local references must be N x T");
  }
  const RowMatrix x = rec.data;
  const RowMatrix r = local_refs;
  MICache mi(x, opt.mi);
  const auto cand = candidate_set(rec, opt.candidates);
  mi.prepare(cand);
  std::vector<double> ref_mi(cand.size());
  parallel_for(cand.size(), [&](std::size_t p) { ref_mi[p] = mi.with_reference(cand[p], row_span(r, cand[p])); });
  return greedy_min(Rule::Maternal2, cand, ref_mi, k, opt.redundancy_weight, mi);
}

SelectionState fetal_rule1(const RecordingSet& rec, const SelectionState& selected,
                           const Matrix& fetal_refs, std::size_t m, const MIConfig& cfg) {
  rec.validate();
  const std::size_t n = selected.selected.size();
  if (m >= n) {
    throw ValidationError("fetal_rule1: M = " + std::to_string(m) + " must be smaller than the " +
                          std::to_string(n) + " previously selected channels");
  }
  const bool shared = fetal_refs.rows() == 1;
  if (fetal_refs.cols() != rec.data.cols() || (!shared && fetal_refs.rows() != rec.data.rows())) {
    throw ValidationError("fetal_rule1: fetal references must be 1 x T or N x T");
  }
  const RowMatrix x = rec.data;
  const RowMatrix r = fetal_refs;
  MICache mi(x, cfg);
  mi.prepare(selected.selected);
  std::vector<double> score(n);
  parallel_for(n, [&](std::size_t p) {
    const std::size_t ch = selected.selected[p];
    if (ch >= rec.channels()) throw ValidationError("fetal_rule1: selected id out of range");
    score[p] = mi.with_reference(ch, row_span(r, shared ? 0 : ch));
  });
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (score[a] != score[b]) return score[a] > score[b];
    return selected.selected[a] < selected.selected[b];
  });
  SelectionState s;
  s.rule = Rule::Fetal1;
  s.candidates = selected.selected;
  s.fetal_reference = shared ? "shared" : "per-channel";
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t p = order[i];
    s.selected.push_back(selected.selected[p]);
    s.steps.push_back({selected.selected[p], score[p], 0.0, score[p]});
  }
  return s;
}

nlohmann::json selection_to_json(const SelectionState& s, const RecordingSet& rec,
                                 const std::string& config_hash) {
  auto label = [&](std::size_t id) {
    return id < rec.labels.size() ? rec.labels[id] : "ch" + std::to_string(id);
  };
  nlohmann::json j;
  j["rule"] = to_string(s.rule);
  j["config_hash"] = config_hash;
  j["selected"] = s.selected;
  auto labels = nlohmann::json::array();
  for (auto id : s.selected) labels.push_back(label(id));
  j["labels"] = labels;
  j["candidates"] = s.candidates;
  j["redundancy_weight"] = s.redundancy_weight;
  if (!s.fetal_reference.empty()) j["fetal_reference"] = s.fetal_reference;
  auto steps = nlohmann::json::array();
  for (const auto& st : s.steps) {
    nlohmann::json e;
    e["channel"] = st.channel;
    e["label"] = label(st.channel);
    e["reference_mi"] = st.reference_mi;
    e["redundancy"] = st.redundancy;
    e["objective"] = st.objective;
    if (!rec.grid.empty() && st.channel < rec.grid.size()) {
      e["row"] = rec.grid[st.channel].row;
      e["col"] = rec.grid[st.channel].col;
    }
    steps.push_back(e);
  }
  j["steps"] = steps;
  return j;
}

SelectionState selection_from_json(const nlohmann::json& j) {
  SelectionState s;
  s.rule = rule_from_string(j.at("rule").get<std::string>());
  s.selected = j.at("selected").get<std::vector<std::size_t>>();
  s.candidates = j.value("candidates", std::vector<std::size_t>{});
  s.redundancy_weight = j.value("redundancy_weight", 1.0);
  s.fetal_reference = j.value("fetal_reference", std::string());
  for (const auto& e : j.value("steps", nlohmann::json::array())) {
    s.steps.push_back({e.at("channel").get<std::size_t>(), e.value("reference_mi", 0.0),
                       e.value("redundancy", 0.0), e.value("objective", 0.0)});
  }
  return s;
}

}  // namespace fecg
