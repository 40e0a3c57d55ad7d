#include <doctest.h>

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "fecg/io.hpp"
#include "fecg/pipeline.hpp"

using namespace fecg;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("fecg_unit_" + name);
  fs::remove_all(p);
  return p;
}

// Short run that still clears the binned-MI sample floor.
ExperimentConfig quick(const std::string& name) {
  ExperimentConfig c = default_config();
  c.simulation.duration = 12.0;
  c.ica.random_baselines = 2;
  c.mimap.compare_montages = false;
  c.output_dir = scratch(name);
  return c;
}

json read(const fs::path& p) {
  std::ifstream f(p);
  REQUIRE(f);
  return json::parse(f);
}

}  // namespace

TEST_SUITE("pipeline") {
  TEST_CASE("config parsing") {
    const json j = {{"seed", 42},
                    {"simulation", {{"duration", 5.0}, {"noise", {{"base_std", 0.2}}}}},
                    {"selection", {{"rule", "maternal1"}, {"k", 4}}}};
    const auto c = config_from_json(j, ".");
    CHECK(c.seed == 42);
    CHECK(c.simulation.duration == 5.0);
    CHECK(c.simulation.noise.base_std == 0.2);
    CHECK(c.selection.rule == Rule::Maternal1);
    CHECK(c.selection.k == 4);
    // defaults are spelled out and parse back to the same hash
    const auto back = config_from_json(c.to_json(), ".");
    CHECK(back.hash() == c.hash());
    CHECK(c.hash().size() == 64);

    auto moved = c;
    moved.output_dir = "elsewhere";
    CHECK(moved.hash() == c.hash());
    moved.seed = 43;
    CHECK(moved.hash() != c.hash());
  }

  TEST_CASE("config errors") {
    CHECK_THROWS_AS(config_from_json(json{{"simulation", json::object()}}, "."), ValidationError);
    CHECK_THROWS_AS(config_from_json(json{{"seed", "7"}}, "."), ValidationError);
    CHECK_THROWS_AS(config_from_json(json{{"seed", 1}, {"simulaton", json::object()}}, "."), ValidationError);
    CHECK_THROWS_AS(config_from_json(json{{"seed", 1}, {"mi", {{"bnis", 8}}}}, "."), ValidationError);
    CHECK_THROWS_AS(config_from_json(json{{"seed", 1}, {"selection", {{"k", -3}}}}, "."), ValidationError);
    CHECK_THROWS_AS(config_from_json(json{{"seed", 1}, {"selection", {{"k", 2.5}}}}, "."), ValidationError);
    CHECK_THROWS_AS(config_from_json(json{{"seed", 1}, {"selection", {{"rule", "fetal1"}}}}, ".").validate(),
                    ValidationError);
    CHECK_THROWS_AS(
        config_from_json(json{{"seed", 1}, {"simulation", {{"geometry", "no_such_geometry.json"}}}}, "."),
        ValidationError);
    CHECK_THROWS_AS(load_config(scratch("missing") / "config.json"), Error);
  }

  TEST_CASE("grids") {
    CHECK(default_geometry_8x18().electrodes.size() == 144);
    const auto small = default_geometry_8x9();
    CHECK(small.electrodes.size() == 72);
    CHECK(small.rows == 9);
    CHECK(small.cols == 8);
    auto c = default_config();
    c.simulation.duration = 3.0;
    c.simulation.montage = Montage::NeighborDifferential;
    CHECK(simulate(c).mix.recordings.channels() == 136);
  }

  TEST_CASE("references equal to the recordings give ln B everywhere") {
    auto c = quick("lnb");
    const auto sim = simulate(c);
    const auto rec = preprocess(sim.mix.recordings, c.preprocess);
    const auto maps = compute_mimaps(rec, rec.data, nullptr, c.mi);
    std::size_t n = 0;
    for (std::size_t i = 0; i < rec.channels(); ++i) {
      if (!rec.valid[i]) {
        CHECK(std::isnan(maps.maternal.values[i]));
        continue;
      }
      CHECK(maps.maternal.values[i] == doctest::Approx(std::log(16.0)).epsilon(1e-9));
      ++n;
    }
    CHECK(n == 143);
    CHECK_FALSE(maps.differential);
  }

  TEST_CASE("simulate writes the documented files") {
    auto c = quick("simulate");
    cmd_simulate(c);
    for (const char* f : {"recordings.csv", "maternal_refs.csv", "fetal_refs.csv", "maternal_vcg.csv",
                          "fetal_vcg.csv", "maternal_peaks.csv", "fetal_peaks.csv", "channels.json",
                          "simulate_manifest.json"}) {
      CHECK_MESSAGE(fs::exists(c.output_dir / f), f);
    }
    const auto meta = read(c.output_dir / "channels.json");
    CHECK(meta.at("labels").size() == 144);
    CHECK(meta.at("config_hash") == c.hash());
    const auto m = read(c.output_dir / "simulate_manifest.json");
    CHECK(m.at("status") == "ok");
    CHECK(m.at("config_hash") == c.hash());
    CHECK(m.at("command") == "simulate");
    std::set<std::string> listed;
    for (const auto& f : m.at("files")) listed.insert(f.at("path").get<std::string>());
    std::set<std::string> present;
    for (const auto& e : fs::directory_iterator(c.output_dir)) {
      if (e.path().filename() != "simulate_manifest.json") present.insert(e.path().filename().string());
    }
    CHECK(listed == present);

    // binary recordings hold the same numbers
    auto b = quick("simulate_bin");
    b.simulation.format = "bin";
    cmd_simulate(b);
    const auto x = load_recordings(c.output_dir / "recordings.csv", 1000.0);
    const auto y = load_recordings(b.output_dir / "recordings.bin", 1000.0);
    CHECK((x.data - y.data).cwiseAbs().maxCoeff() == 0.0);
  }

  TEST_CASE("missing fetal references degrade the map stage") {
    auto c = quick("nofetal");
    cmd_simulate(c);
    fs::remove(c.output_dir / "fetal_refs.csv");
    cmd_mimap(c);
    CHECK(fs::exists(c.output_dir / "mimap_maternal_monopolar.csv"));
    CHECK(fs::exists(c.output_dir / "mimap_maternal_monopolar.dat"));
    CHECK_FALSE(fs::exists(c.output_dir / "mimap_fetal_monopolar.csv"));
    CHECK_FALSE(fs::exists(c.output_dir / "mimap_differential_monopolar.csv"));
    const auto m = read(c.output_dir / "mimap_manifest.json");
    std::size_t warned = 0;
    for (const auto& n : m.at("notes")) warned += n.get<std::string>().rfind("warning:", 0) == 0;
    CHECK(warned == 1);
  }

  TEST_CASE("select and extract from disk") {
    auto c = quick("stages");
    cmd_simulate(c);
    cmd_select(c);
    const auto sel = read(c.output_dir / "selection.json");
    CHECK(sel.at("selected").size() == 10);
    CHECK(sel.at("maternal").at("rule") == "maternal2");
    CHECK(sel.at("maternal").at("steps").size() == 10);
    cmd_extract(c);
    const auto rank = read(c.output_dir / "fetal_ranking.json");
    CHECK(rank.at("ranking").size() == 10);
    CHECK(rank.at("random_baseline_f1").size() == 2);
    CHECK(rank.contains("top_peak_f1"));
    const auto meta = read(c.output_dir / "ica_meta.json");
    CHECK(meta.at("components") == 10);

    auto big = c;
    big.ica.m = 11;
    CHECK_THROWS_AS(cmd_extract(big), ValidationError);
    CHECK(read(c.output_dir / "extract_manifest.json").at("status") == "failed");
  }

  TEST_CASE("protocol mirror: rule 1 then the fetal rule") {
    auto c = quick("protocol");
    c.selection.rule = Rule::Maternal1;
    c.selection.k = 20;
    c.selection.fetal_m = 6;
    cmd_pipeline(c, {"simulate", "select"});
    const auto sel = read(c.output_dir / "selection.json");
    CHECK(sel.at("maternal").at("selected").size() == 20);
    CHECK(sel.at("fetal").at("selected").size() == 6);
    CHECK(sel.at("selected").size() == 6);
    CHECK(sel.at("fetal_reference_source") == "true");
  }

  TEST_CASE("K = 0 gives an empty but valid selection") {
    auto c = quick("k0");
    c.selection.k = 0;
    cmd_pipeline(c, {"simulate", "select"});
    const auto sel = read(c.output_dir / "selection.json");
    CHECK(sel.at("selected").empty());
    CHECK_THROWS_AS(cmd_extract(c), ValidationError);
  }

  TEST_CASE("stage subsets and names") {
    auto c = quick("subset");
    cmd_pipeline(c, {"simulate"});
    CHECK(fs::exists(c.output_dir / "recordings.csv"));
    CHECK_FALSE(fs::exists(c.output_dir / "selection.json"));
    const auto m = read(c.output_dir / "manifest.json");
    CHECK(m.at("stages").size() == 1);
    CHECK_THROWS_AS(cmd_pipeline(c, {"simulate", "plot"}), ValidationError);

    auto fresh = quick("subset_missing");
    CHECK_THROWS_AS(cmd_pipeline(fresh, {"select"}), Error);
    CHECK(read(fresh.output_dir / "manifest.json").at("status") == "failed");
  }

  TEST_CASE("same config and seed give the same outputs") {
    auto a = quick("det_a");
    auto b = quick("det_b");
    cmd_pipeline(a, {});
    cmd_pipeline(b, {});
    const auto ma = read(a.output_dir / "manifest.json");
    const auto mb = read(b.output_dir / "manifest.json");
    CHECK(ma.at("outputs_hash") == mb.at("outputs_hash"));
    CHECK(ma.at("files") == mb.at("files"));
    CHECK(ma.at("config_hash") == mb.at("config_hash"));

    auto c = quick("det_c");
    c.seed = a.seed + 1;
    cmd_pipeline(c, {"simulate"});
    CHECK(read(c.output_dir / "manifest.json").at("outputs_hash") != ma.at("outputs_hash"));
  }

  TEST_CASE("synthetic Frank references") {
    auto c = quick("synth");
    cmd_simulate(c);
    cmd_synth_ref(c, std::nullopt);
    CHECK(fs::exists(c.output_dir / "frank_refs.csv"));
    CHECK(fs::exists(c.output_dir / "maternal_detected_peaks.csv"));
    CHECK(fs::exists(c.output_dir / "frank_templates.csv"));
    CHECK_THROWS_AS(cmd_synth_ref(c, std::size_t{5000}), ValidationError);

    auto s = c;
    s.selection.vcg = "synthetic";
    cmd_select(s);
    CHECK(read(c.output_dir / "selection.json").at("selected").size() == 10);
  }
}
