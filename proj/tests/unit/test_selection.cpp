#include <doctest.h>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <random>

#include "fecg/pipeline.hpp"
#include "fecg/selection.hpp"
#include "oracles.hpp"

using namespace fecg;

namespace {

constexpr int kBins = 8;
constexpr Eigen::Index kT = 1000;

std::vector<double> row(const Matrix& m, Eigen::Index i) {
  std::vector<double> v(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index t = 0; t < m.cols(); ++t) v[static_cast<std::size_t>(t)] = m(i, t);
  return v;
}

RecordingSet as_recording(const Matrix& m) {
  RecordingSet r;
  r.data = m;
  r.fill_defaults();
  return r;
}

MIConfig mi_cfg() {
  MIConfig c;
  c.bins = kBins;
  return c;
}

// Channels share a few latent signals so MI terms differ visibly.
struct Instance {
  RecordingSet rec;
  Matrix class_refs;     // 3 x T
  std::vector<int> classes;
  Matrix local_refs;     // N x T
  std::size_t k = 0;
};

Instance random_instance(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> nd(3, 12);
  std::normal_distribution<double> g;
  const int n = nd(rng);
  std::uniform_int_distribution<int> kd(1, std::min(4, n));
  Instance in;
  in.k = static_cast<std::size_t>(kd(rng));
  Matrix latent(4, kT);
  for (Eigen::Index i = 0; i < latent.size(); ++i) latent.data()[i] = g(rng);
  Matrix x(n, kT);
  for (int i = 0; i < n; ++i) {
    Eigen::RowVectorXd w(4);
    for (int j = 0; j < 4; ++j) w[j] = g(rng);
    x.row(i) = w * latent;
    for (Eigen::Index t = 0; t < kT; ++t) x(i, t) += 0.5 * g(rng);
  }
  in.rec = as_recording(x);
  in.class_refs.resize(3, kT);
  for (int j = 0; j < 3; ++j) {
    in.class_refs.row(j) = latent.row(j);
    for (Eigen::Index t = 0; t < kT; ++t) in.class_refs(j, t) += g(rng);
  }
  std::uniform_int_distribution<int> cd(0, 2);
  for (int i = 0; i < n; ++i) in.classes.push_back(cd(rng));
  in.local_refs.resize(n, kT);
  for (int i = 0; i < n; ++i) {
    in.local_refs.row(i) = x.row(i);
    for (Eigen::Index t = 0; t < kT; ++t) in.local_refs(i, t) += 2.0 * g(rng);
  }
  return in;
}

double omi(const Matrix& a, Eigen::Index i, const Matrix& b, Eigen::Index j) {
  return oracle::binned_mi(row(a, i), row(b, j), kBins);
}

std::vector<std::size_t> all_ids(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

std::vector<std::size_t> ids_of(const std::vector<oracle::GreedyStep>& s) {
  std::vector<std::size_t> v;
  for (const auto& e : s) v.push_back(e.channel);
  return v;
}

}  // namespace

TEST_SUITE("selection") {
  TEST_CASE("all three rules match the brute-force oracle") {
    std::mt19937_64 rng(20240);
    SelectionOptions opt;
    opt.mi = mi_cfg();
    for (int trial = 0; trial < 50; ++trial) {
      CAPTURE(trial);
      const auto in = random_instance(rng);
      const auto& x = in.rec.data;
      const auto n = in.rec.channels();
      auto pair = [&](std::size_t a, std::size_t b) { return omi(x, static_cast<Eigen::Index>(a), x, static_cast<Eigen::Index>(b)); };

      const auto r1 = maternal_rule1(in.rec, in.class_refs, in.classes, in.k, opt);
      const auto o1 = oracle::greedy_min(all_ids(n), in.k, [&](std::size_t j) {
        return omi(x, static_cast<Eigen::Index>(j), in.class_refs, in.classes[j]);
      }, pair);
      CHECK(r1.selected == ids_of(o1));
      for (std::size_t s = 0; s < o1.size(); ++s) CHECK(r1.steps[s].objective == doctest::Approx(o1[s].objective).epsilon(1e-12));

      const auto r2 = maternal_rule2(in.rec, in.local_refs, in.k, opt);
      const auto o2 = oracle::greedy_min(all_ids(n), in.k, [&](std::size_t j) {
        return omi(x, static_cast<Eigen::Index>(j), in.local_refs, static_cast<Eigen::Index>(j));
      }, pair);
      CHECK(r2.selected == ids_of(o2));

      if (r2.selected.size() >= 2) {
        const std::size_t m = r2.selected.size() - 1;
        const auto f = fetal_rule1(in.rec, r2, in.local_refs, m, opt.mi);
        const auto of = oracle::repeated_argmax(r2.selected, m, [&](std::size_t j) {
          return omi(x, static_cast<Eigen::Index>(j), in.local_refs, static_cast<Eigen::Index>(j));
        });
        CHECK(f.selected == of);
        CHECK(f.fetal_reference == "per-channel");
      }
    }
  }

  TEST_CASE("K = 1 is the plain argmin of the reference term") {
    std::mt19937_64 rng(5);
    const auto in = random_instance(rng);
    SelectionOptions opt;
    opt.mi = mi_cfg();
    const auto s = maternal_rule2(in.rec, in.local_refs, 1, opt);
    std::size_t best = 0;
    for (std::size_t j = 1; j < in.rec.channels(); ++j) {
      if (omi(in.rec.data, static_cast<Eigen::Index>(j), in.local_refs, static_cast<Eigen::Index>(j)) <
          omi(in.rec.data, static_cast<Eigen::Index>(best), in.local_refs, static_cast<Eigen::Index>(best))) {
        best = j;
      }
    }
    CHECK(s.selected == std::vector<std::size_t>{best});
    CHECK(s.steps[0].redundancy == 0.0);
  }

  TEST_CASE("a duplicate pays its entropy as redundancy") {
    std::mt19937_64 rng(6);
    std::normal_distribution<double> g;
    Matrix x(3, kT);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = g(rng);
    x.row(1) = x.row(0);  // duplicate of channel 0
    Matrix ref(1, kT);
    for (Eigen::Index t = 0; t < kT; ++t) ref(0, t) = g(rng);
    const auto rec = as_recording(x);
    SelectionOptions opt;
    opt.mi = mi_cfg();
    const auto s = maternal_rule1(rec, ref, {0, 0, 0}, 2, opt);
    REQUIRE(s.selected.size() == 2);
    CHECK(s.selected[0] != 2);
    CHECK(s.selected[1] == 2);
    // what the duplicate would have paid
    CHECK(omi(x, 0, x, 1) == doctest::Approx(std::log(static_cast<double>(kBins))));
  }

  TEST_CASE("identical local references reduce rule 2 to rule 1") {
    std::mt19937_64 rng(7);
    auto in = random_instance(rng);
    const auto n = in.rec.channels();
    Matrix shared(1, kT);
    shared.row(0) = in.class_refs.row(0);
    Matrix local(static_cast<Eigen::Index>(n), kT);
    for (Eigen::Index i = 0; i < local.rows(); ++i) local.row(i) = shared.row(0);
    SelectionOptions opt;
    opt.mi = mi_cfg();
    const auto a = maternal_rule2(in.rec, local, in.k, opt);
    const auto b = maternal_rule1(in.rec, shared, std::vector<int>(n, 0), in.k, opt);
    CHECK(a.selected == b.selected);
  }

  TEST_CASE("fetal rule with M = |selected| - 1 drops the weakest member") {
    std::mt19937_64 rng(8);
    std::normal_distribution<double> g;
    Matrix x(5, kT);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = g(rng);
    Matrix fref(1, kT);
    fref.row(0) = x.row(3);  // channel 3 is the reference itself
    for (Eigen::Index i = 0; i < 5; ++i) {
      if (i != 3) x.row(i) += (0.2 * static_cast<double>(i + 1)) * fref.row(0);
    }
    const auto rec = as_recording(x);
    SelectionState sel;
    sel.selected = {0, 1, 2, 3, 4};
    const auto f = fetal_rule1(rec, sel, fref, 4, mi_cfg());
    CHECK(f.fetal_reference == "shared");
    CHECK(f.selected.front() == 3);
    CHECK(f.selected == std::vector<std::size_t>{3, 4, 2, 1});
    for (std::size_t i = 1; i < f.steps.size(); ++i) CHECK(f.steps[i - 1].reference_mi >= f.steps[i].reference_mi);
    CHECK_THROWS_AS(fetal_rule1(rec, sel, fref, 5, mi_cfg()), ValidationError);
  }

  TEST_CASE("monotone maps leave the order unchanged") {
    std::mt19937_64 rng(9);
    auto in = random_instance(rng);
    SelectionOptions opt;
    opt.mi = mi_cfg();
    const auto before = maternal_rule2(in.rec, in.local_refs, in.k, opt);
    auto warped = in.rec;
    for (Eigen::Index i = 0; i < warped.data.rows(); i += 2) {
      warped.data.row(i) = warped.data.row(i).array().pow(3.0);
    }
    if (warped.data.rows() > 1) warped.data.row(1) = warped.data.row(1).array().exp();
    const auto after = maternal_rule2(warped, in.local_refs, in.k, opt);
    CHECK(before.selected == after.selected);
    for (std::size_t s = 0; s < before.steps.size(); ++s) CHECK(before.steps[s].objective == after.steps[s].objective);
  }

  TEST_CASE("determinism and permutation equivariance") {
    std::mt19937_64 rng(10);
    auto in = random_instance(rng);
    SelectionOptions opt;
    opt.mi = mi_cfg();
    const auto a = maternal_rule2(in.rec, in.local_refs, in.k, opt);
    const auto b = maternal_rule2(in.rec, in.local_refs, in.k, opt);
    CHECK(a.selected == b.selected);

    const auto n = static_cast<Eigen::Index>(in.rec.channels());
    std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = n - 1 - i;
    Matrix px(n, kT), pr(n, kT);
    for (Eigen::Index i = 0; i < n; ++i) {
      px.row(i) = in.rec.data.row(perm[static_cast<std::size_t>(i)]);
      pr.row(i) = in.local_refs.row(perm[static_cast<std::size_t>(i)]);
    }
    const auto c = maternal_rule2(as_recording(px), pr, in.k, opt);
    REQUIRE(c.selected.size() == a.selected.size());
    for (std::size_t s = 0; s < a.selected.size(); ++s) {
      CHECK(static_cast<Eigen::Index>(a.selected[s]) == perm[c.selected[s]]);
    }
  }

  TEST_CASE("contracts") {
    std::mt19937_64 rng(11);
    auto in = random_instance(rng);
    SelectionOptions opt;
    opt.mi = mi_cfg();
    const auto n = in.rec.channels();
    CHECK_THROWS_AS(maternal_rule2(in.rec, in.local_refs, n + 1, opt), ValidationError);
    const auto empty = maternal_rule2(in.rec, in.local_refs, 0, opt);
    CHECK(empty.selected.empty());
    CHECK(empty.candidates.size() == n);

    // invalid channels are not candidates
    in.rec.valid[0] = false;
    const auto s = maternal_rule2(in.rec, in.local_refs, n - 1, opt);
    CHECK(std::find(s.selected.begin(), s.selected.end(), 0) == s.selected.end());

    opt.candidates = {1, 2};
    CHECK(maternal_rule2(in.rec, in.local_refs, 2, opt).candidates == std::vector<std::size_t>{1, 2});

    MIConfig strict;  // B = 16 needs 2560 samples
    SelectionOptions so;
    so.mi = strict;
    CHECK_THROWS_AS(maternal_rule2(in.rec, in.local_refs, 1, so), ValidationError);
    CHECK_THROWS_AS(rule_from_string("greedy"), ValidationError);
  }

  TEST_CASE("selection JSON round trip") {
    std::mt19937_64 rng(12);
    auto in = random_instance(rng);
    SelectionOptions opt;
    opt.mi = mi_cfg();
    const auto s = maternal_rule2(in.rec, in.local_refs, in.k, opt);
    const auto j = selection_to_json(s, in.rec, "abc");
    CHECK(j.at("config_hash") == "abc");
    CHECK(j.at("rule") == "maternal2");
    const auto back = selection_from_json(j);
    CHECK(back.selected == s.selected);
    CHECK(back.rule == s.rule);
    REQUIRE(back.steps.size() == s.steps.size());
    for (std::size_t i = 0; i < s.steps.size(); ++i) CHECK(back.steps[i].objective == s.steps[i].objective);
  }

  TEST_CASE("rule 2 on the default simulation avoids the maternal heart") {
    const auto cfg = default_config();
    const auto sim = simulate(cfg);
    const auto rec = preprocess(sim.mix.recordings, cfg.preprocess);
    SelectionInputs in;
    in.recordings = &rec;
    in.maternal_vcg = &sim.mix.maternal_vcg;
    const auto out = run_selection(cfg, in);
    CHECK(out.maternal.selected.size() == 10);
    const auto mi = sim.array.nearest_electrode(sim.array.maternal_heart);
    const GridPos mg{sim.array.electrodes[mi].row, sim.array.electrodes[mi].col};
    for (auto c : out.maternal.selected) CHECK(grid_distance(rec.grid[c], mg) > 2);
  }

  TEST_CASE("twenty by rule 1 then six by the fetal rule land in the fetal quadrant") {
    auto cfg = default_config();
    cfg.selection.rule = Rule::Maternal1;
    cfg.selection.k = 20;
    cfg.selection.fetal_m = 6;
    // monopolar channels share the navel reference, which bends rule 1 toward it
    cfg.simulation.montage = Montage::NeighborDifferential;
    const auto sim = simulate(cfg);
    const auto rec = preprocess(sim.mix.recordings, cfg.preprocess);
    SelectionInputs in;
    in.recordings = &rec;
    in.maternal_vcg = &sim.mix.maternal_vcg;
    in.fetal_refs = &sim.mix.fetal_reference;
    in.fetal_peaks = &sim.mix.fetal.r_peaks;
    const auto out = run_selection(cfg, in);
    REQUIRE(out.fetal);
    CHECK(out.fetal->selected.size() == 6);
    const auto fi = sim.array.nearest_electrode(sim.array.fetal_heart);
    const GridPos fg{sim.array.electrodes[fi].row, sim.array.electrodes[fi].col};
    const int rmid = sim.array.rows / 2, cmid = sim.array.cols / 2;
    for (auto c : out.fetal->selected) {
      CAPTURE(c);
      CHECK((rec.grid[c].row >= rmid) == (fg.row >= rmid));
      CHECK((rec.grid[c].col >= cmid) == (fg.col >= cmid));
    }
  }
}
