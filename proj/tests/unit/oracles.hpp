#pragma once

// Reference implementations used only by the tests. Each one is written
// directly from the defining formula, without sharing code paths with the
// library routine it checks.

#include <cstddef>
#include <random>
#include <vector>

#include "fecg/common.hpp"

namespace oracle {

/// -0.5 ln(1 - rho^2)
double gaussian_mi(double rho);

/// Population MI of a standard bivariate Gaussian after both marginals are
/// cut into B equiprobable bins; numerical integration of the cell masses.
double quantized_gaussian_mi(double rho, int bins);

double normal_cdf(double x);
double normal_quantile(double p);

/// Plug-in MI of equiprobable bins assigned by rank (stable for ties).
double binned_mi(const std::vector<double>& x, const std::vector<double>& y, int bins);

struct GreedyStep {
  std::size_t channel;
  double objective;
};

/// Naive greedy: at every step the full objective
/// ref_mi(j) + sum over already chosen i of mi(i, j) is recomputed for every
/// remaining candidate. Ties go to the lowest id. `pair_mi(a, b)` and
/// `ref_mi(j)` are callables supplied by the test.
template <class RefMI, class PairMI>
std::vector<GreedyStep> greedy_min(const std::vector<std::size_t>& candidates, std::size_t k, RefMI ref_mi,
                                   PairMI pair_mi) {
  std::vector<GreedyStep> out;
  std::vector<std::size_t> chosen;
  std::vector<bool> used(candidates.size(), false);
  for (std::size_t step = 0; step < k; ++step) {
    std::size_t best = candidates.size();
    double best_obj = 0.0;
    for (std::size_t p = 0; p < candidates.size(); ++p) {
      if (used[p]) continue;
      double obj = 0.0;
      double red = 0.0;
      for (auto c : chosen) red += pair_mi(c, candidates[p]);
      obj = ref_mi(candidates[p]) + red;
      if (best == candidates.size() || obj < best_obj ||
          (obj == best_obj && candidates[p] < candidates[best])) {
        best = p;
        best_obj = obj;
      }
    }
    used[best] = true;
    chosen.push_back(candidates[best]);
    out.push_back({candidates[best], best_obj});
  }
  return out;
}

/// Fetal rule by repeated argmax over the remaining members.
template <class RefMI>
std::vector<std::size_t> repeated_argmax(std::vector<std::size_t> members, std::size_t m, RefMI ref_mi) {
  std::vector<std::size_t> out;
  for (std::size_t step = 0; step < m; ++step) {
    std::size_t best = 0;
    for (std::size_t p = 1; p < members.size(); ++p) {
      const double a = ref_mi(members[p]);
      const double b = ref_mi(members[best]);
      if (a > b || (a == b && members[p] < members[best])) best = p;
    }
    out.push_back(members[best]);
    members.erase(members.begin() + static_cast<std::ptrdiff_t>(best));
  }
  return out;
}

/// Largest mean |corr| over all row permutations matching a to b (small m only).
double best_permutation_corr(const fecg::Matrix& a, const fecg::Matrix& b, double* min_corr = nullptr);

double pearson(const double* x, const double* y, std::size_t n);

/// Unit-variance Laplace samples (super-Gaussian).
std::vector<double> laplace(std::size_t n, std::mt19937_64& rng);

}  // namespace oracle
