// fecg command-line front end.
//
// Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.

#include <CLI11.hpp>

#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "fecg/pipeline.hpp"

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string montage;
};

void add_common(CLI::App* sub, CommonFlags& f) {
  sub->add_option("--config", f.config, "experiment config (JSON); built-in defaults when omitted");
  sub->add_option("--seed", f.seed, "override the config seed");
  sub->add_option("--out", f.out, "output directory");
  sub->add_option("--montage", f.montage, "monopolar | neighbor-differential");
}

fecg::ExperimentConfig resolve(const CommonFlags& f) {
  fecg::ExperimentConfig cfg = f.config.empty() ? fecg::default_config() : fecg::load_config(f.config);
  if (f.seed) cfg.seed = *f.seed;
  if (!f.out.empty()) cfg.output_dir = f.out;
  if (!f.montage.empty()) cfg.simulation.montage = fecg::montage_from_string(f.montage);
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fetal ECG electrode selection: simulation, MI maps, greedy selection, JADE extraction"};
  app.set_version_flag("--version", std::string("fecg ") + fecg::kToolVersion);
  app.require_subcommand(1);

  CommonFlags flags;
  std::vector<std::string> stages;
  std::optional<std::size_t> channel;

  auto* sim = app.add_subcommand("simulate", "simulate abdominal recordings and ground-truth references");
  auto* mimap = app.add_subcommand("mimap", "maternal, fetal and differential MI maps");
  auto* select = app.add_subcommand("select", "greedy channel selection");
  auto* extract = app.add_subcommand("extract", "JADE on the selected channels and fetal ranking");
  auto* pipeline = app.add_subcommand("pipeline", "run simulate, mimap, select and extract in sequence");
  auto* synth = app.add_subcommand("synth-ref", "synthetic Frank references from detected maternal peaks");
  for (auto* s : {sim, mimap, select, extract, pipeline, synth}) add_common(s, flags);
  pipeline->add_option("--stages", stages, "comma-separated subset of simulate,mimap,select,extract")
      ->delimiter(',');
  synth->add_option("--channel", channel, "channel for peak detection (default: most energetic)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    const fecg::ExperimentConfig cfg = resolve(flags);
    if (sim->parsed()) fecg::cmd_simulate(cfg);
    if (mimap->parsed()) fecg::cmd_mimap(cfg);
    if (select->parsed()) fecg::cmd_select(cfg);
    if (extract->parsed()) fecg::cmd_extract(cfg);
    if (pipeline->parsed()) fecg::cmd_pipeline(cfg, stages);
    if (synth->parsed()) fecg::cmd_synth_ref(cfg, channel);
  } catch (const fecg::ValidationError& e) {
    std::fprintf(stderr, "fecg: invalid input: %s\n", e.what());
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "fecg: invalid input: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "fecg: error: %s\n", e.what());
    return 2;
  }
  return 0;
}
