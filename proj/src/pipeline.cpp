#include "fecg/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <type_traits>

#include "fecg/io.hpp"

namespace fecg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

Vec3 vec3(const json& j, const char* what) {
  if (!j.is_array() || j.size() != 3) throw ValidationError(std::string(what) + ": expected a 3-element array");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

json vec3_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

template <class T>
void read_opt(const json& j, const char* key, T& out) {
  if (!j.contains(key) || j.at(key).is_null()) return;
  const json& v = j.at(key);
  if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
    // get<unsigned>() would wrap negatives and truncate fractions
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) throw ValidationError(std::string("config: '") + key + "' must be a non-negative integer");
  }
  out = v.get<T>();
}

// Rejects keys the schema does not know, so typos fail loudly.
void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) throw ValidationError(where + ": unknown key '" + k + "'");
  }
}

HeartConfig heart_from_json(const json& j, const std::string& where, HeartConfig h) {
  check_keys(j, {"dipole", "rate", "rate_std", "initial_phase", "scaling"}, where);
  if (j.contains("dipole") && !j.at("dipole").is_null()) h.dipole = j.at("dipole").get<std::string>();
  read_opt(j, "rate", h.rate);
  read_opt(j, "rate_std", h.rate_std);
  read_opt(j, "initial_phase", h.initial_phase);
  if (j.contains("scaling") && !j.at("scaling").is_null()) h.scaling = vec3(j.at("scaling"), "scaling");
  return h;
}

json heart_to_json(const HeartConfig& h) {
  json j;
  j["dipole"] = h.dipole ? json(h.dipole->generic_string()) : json(nullptr);
  j["rate"] = h.rate;
  j["rate_std"] = h.rate_std;
  j["initial_phase"] = h.initial_phase;
  j["scaling"] = h.scaling ? vec3_json(*h.scaling) : json(nullptr);
  return j;
}

fs::path resolve(const fs::path& base, const fs::path& p) { return p.is_absolute() ? p : base / p; }

Mat3 maternal_rotation(const Vec3& deg) {
  const double k = kPi / 180.0;
  return axis_rotation(1, deg[0] * k) * axis_rotation(2, deg[1] * k) * axis_rotation(0, deg[2] * k);
}

FrankTemplates load_templates(const ExperimentConfig& cfg, double sample_rate) {
  if (!cfg.selection.frank_templates) return default_frank_templates(sample_rate);
  const fs::path p = resolve(cfg.base_dir, *cfg.selection.frank_templates);
  std::ifstream in(p);
  if (!in) throw Error("cannot open template file '" + p.string() + "'");
  return read_frank_templates(in);
}

DipoleModelParams load_dipole(const std::optional<fs::path>& p, const fs::path& base) {
  if (!p) return default_dipole_params();
  return dipole_params_from_json(read_json_file(resolve(base, *p)));
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

std::span<const double> row_span(const RowMatrix& m, std::size_t i) {
  return {m.row(static_cast<Eigen::Index>(i)).data(), static_cast<std::size_t>(m.cols())};
}

// Rows-as-channels matrix written like a recording: header of labels, one sample per row.
std::string channel_matrix_csv(const Matrix& m, const std::vector<std::string>& labels) {
  RecordingSet r;
  r.data = m;
  r.labels = labels;
  std::ostringstream os;
  write_recordings_csv(r, os);
  return os.str();
}

std::string indices_csv(const std::vector<std::size_t>& idx) {
  std::ostringstream os;
  write_indices_csv(idx, os);
  return os.str();
}

std::string matrix_csv(const Matrix& m, const std::vector<std::string>& header = {}) {
  std::ostringstream os;
  write_matrix_csv(m, os, header);
  return os.str();
}

std::string recordings_file(const ExperimentConfig& cfg) {
  return cfg.simulation.format == "bin" ? "recordings.bin" : "recordings.csv";
}

std::ifstream open_input(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw Error("missing input '" + p.string() + "' (run the earlier stage first)");
  return f;
}

// In-memory state shared by the stages of one run; stages load from disk
// whatever an earlier stage in the same run did not produce.
struct Context {
  Context(const ExperimentConfig& c, RunManifest& m) : cfg(c), manifest(m) {}

  const ExperimentConfig& cfg;
  RunManifest& manifest;
  std::optional<SimulationOutput> sim;
  std::optional<RecordingSet> recordings;
  std::optional<Matrix> maternal_refs;
  std::optional<Matrix> fetal_refs;
  bool fetal_refs_missing = false;
  std::optional<Matrix> maternal_vcg;
  std::optional<std::vector<std::size_t>> fetal_peaks;
  std::optional<RecordingSet> preprocessed;
  std::optional<SelectionOutput> selection;
  json channels_meta;

  fs::path in(const std::string& name) const { return cfg.output_dir / name; }

  RecordingSet& recs() {
    if (recordings) return *recordings;
    json meta = read_json_file(in("channels.json"));
    RecordingSet r = load_recordings(in(meta.at("recordings").get<std::string>()), meta.at("sample_rate").get<double>());
    r.sample_rate = meta.at("sample_rate").get<double>();
    r.labels = meta.at("labels").get<std::vector<std::string>>();
    r.valid = meta.at("valid").get<std::vector<bool>>();
    r.grid.clear();
    for (const auto& g : meta.at("grid")) r.grid.push_back({g.at(0).get<int>(), g.at(1).get<int>()});
    r.validate();
    channels_meta = meta;
    recordings = std::move(r);
    return *recordings;
  }

  Matrix load_channel_matrix(const std::string& name) {
    auto f = open_input(in(name));
    return read_recordings_csv(f, recs().sample_rate).data;
  }

  const Matrix& mrefs() {
    if (!maternal_refs) maternal_refs = load_channel_matrix("maternal_refs.csv");
    return *maternal_refs;
  }

  const Matrix* frefs() {
    if (fetal_refs) return &*fetal_refs;
    if (fetal_refs_missing) return nullptr;
    if (!fs::exists(in("fetal_refs.csv"))) {
      fetal_refs_missing = true;
      return nullptr;
    }
    fetal_refs = load_channel_matrix("fetal_refs.csv");
    return &*fetal_refs;
  }

  const Matrix& mvcg() {
    if (!maternal_vcg) {
      auto f = open_input(in("maternal_vcg.csv"));
      maternal_vcg = read_matrix_csv(f, true).transpose();
    }
    return *maternal_vcg;
  }

  const std::vector<std::size_t>* fpeaks() {
    if (!fetal_peaks) {
      if (!fs::exists(in("fetal_peaks.csv"))) return nullptr;
      auto f = open_input(in("fetal_peaks.csv"));
      fetal_peaks = read_indices_csv(f);
    }
    return &*fetal_peaks;
  }

  const RecordingSet& prep() {
    if (!preprocessed) {
      std::vector<std::string> notes;
      preprocessed = preprocess(recs(), cfg.preprocess, &notes);
      for (const auto& n : notes) manifest.note(n);
    }
    return *preprocessed;
  }
};

json channels_json(const ExperimentConfig& cfg, const SimulationOutput& s) {
  const auto& r = s.mix.recordings;
  json j;
  j["config_hash"] = cfg.hash();
  j["recordings"] = recordings_file(cfg);
  j["sample_rate"] = r.sample_rate;
  j["montage"] = to_string(s.array.montage);
  j["rows"] = s.array.montage == Montage::Monopolar ? s.array.rows : s.array.rows - 1;
  j["cols"] = s.array.cols;
  j["labels"] = r.labels;
  j["valid"] = r.valid;
  auto grid = json::array();
  for (const auto& g : r.grid) grid.push_back({g.row, g.col});
  j["grid"] = grid;
  const auto& em = s.array.electrodes[s.array.nearest_electrode(s.array.maternal_heart)];
  const auto& ef = s.array.electrodes[s.array.nearest_electrode(s.array.fetal_heart)];
  j["maternal_heart_nearest"] = {em.row, em.col};
  j["fetal_heart_nearest"] = {ef.row, ef.col};
  if (s.array.reference) {
    const auto& e = s.array.electrodes[*s.array.reference];
    j["reference"] = {e.row, e.col};
  }
  return j;
}

void write_simulation(Context& ctx, const SimulationOutput& s, const std::string& suffix) {
  const auto& cfg = ctx.cfg;
  const auto& r = s.mix.recordings;
  std::ostringstream rec;
  const std::string rec_name = suffix.empty() ? recordings_file(cfg) : "recordings" + suffix + ".csv";
  if (cfg.simulation.format == "bin" && suffix.empty()) {
    write_recordings_binary(r, rec);
  } else {
    write_recordings_csv(r, rec);
  }
  ctx.manifest.write(rec_name, rec.str());
  ctx.manifest.write("maternal_refs" + suffix + ".csv", channel_matrix_csv(s.mix.maternal_reference, r.labels));
  ctx.manifest.write("fetal_refs" + suffix + ".csv", channel_matrix_csv(s.mix.fetal_reference, r.labels));
  ctx.manifest.write("maternal_vcg" + suffix + ".csv", matrix_csv(s.mix.maternal_vcg.transpose(), {"x", "y", "z"}));
  ctx.manifest.write("fetal_vcg" + suffix + ".csv", matrix_csv(s.mix.fetal_vcg.transpose(), {"x", "y", "z"}));
  ctx.manifest.write("maternal_peaks" + suffix + ".csv", indices_csv(s.mix.maternal.r_peaks));
  ctx.manifest.write("fetal_peaks" + suffix + ".csv", indices_csv(s.mix.fetal.r_peaks));
  json meta = channels_json(cfg, s);
  if (!suffix.empty()) meta["recordings"] = rec_name;
  ctx.manifest.write("channels" + suffix + ".json", dump(meta));
}

void stage_simulate(Context& ctx) {
  ctx.manifest.stage_begin("simulate");
  SimulationOutput s = simulate(ctx.cfg);
  write_simulation(ctx, s, "");
  ctx.recordings = s.mix.recordings;
  ctx.maternal_refs = s.mix.maternal_reference;
  ctx.fetal_refs = s.mix.fetal_reference;
  ctx.maternal_vcg = s.mix.maternal_vcg;
  ctx.fetal_peaks = s.mix.fetal.r_peaks;
  ctx.channels_meta = channels_json(ctx.cfg, s);
  ctx.sim = std::move(s);
  ctx.manifest.stage_end();
}

void write_maps(Context& ctx, const MIMaps& maps, const std::string& montage) {
  auto emit = [&](const MIMap& m) {
    const std::string stem = "mimap_" + to_string(m.kind) + "_" + montage;
    std::ostringstream csv, grid;
    write_mimap_csv(m, csv);
    ctx.manifest.write(stem + ".csv", csv.str());
    if (m.rows) {
      grid << "# config " << ctx.cfg.hash() << '\n';
      write_mimap_grid(m, grid);
      ctx.manifest.write(stem + ".dat", grid.str());
    }
  };
  emit(maps.maternal);
  if (maps.fetal) emit(*maps.fetal);
  if (maps.differential) emit(*maps.differential);
}

void stage_mimap(Context& ctx) {
  ctx.manifest.stage_begin("mimap");
  const auto& cfg = ctx.cfg;
  const RecordingSet& rec = ctx.prep();
  const Matrix* f = ctx.frefs();
  if (!f) {
    warn("mimap: fetal references missing; writing the maternal map only");
    ctx.manifest.note("fetal references missing; differential map skipped");
  }
  const std::string montage = ctx.channels_meta.value("montage", std::string("monopolar"));
  write_maps(ctx, compute_mimaps(rec, ctx.mrefs(), f, cfg.mi), montage);

  if (cfg.mimap.compare_montages) {
    const Montage other = montage_from_string(montage) == Montage::Monopolar ? Montage::NeighborDifferential
                                                                             : Montage::Monopolar;
    SimulationOutput s = simulate(cfg, other);
    const RecordingSet prep = preprocess(s.mix.recordings, cfg.preprocess);
    write_maps(ctx, compute_mimaps(prep, s.mix.maternal_reference, f ? &s.mix.fetal_reference : nullptr, cfg.mi),
               to_string(other));
  }
  ctx.manifest.stage_end();
}

json rejection_json(const RecordingSet& raw, const RecordingSet& prep) {
  auto arr = json::array();
  for (std::size_t i = 0; i < raw.channels(); ++i) {
    if (!prep.valid[i]) arr.push_back(raw.labels[i]);
  }
  return arr;
}

void stage_select(Context& ctx) {
  ctx.manifest.stage_begin("select");
  const auto& cfg = ctx.cfg;
  const RecordingSet& rec = ctx.prep();
  SelectionInputs in;
  in.recordings = &rec;
  if (cfg.selection.vcg == "simulated") in.maternal_vcg = &ctx.mvcg();
  FrankTemplates templates;
  if (cfg.selection.vcg == "synthetic") {
    templates = load_templates(cfg, rec.sample_rate);
    in.templates = &templates;
  }
  in.fetal_refs = ctx.frefs();
  in.fetal_peaks = ctx.fpeaks();
  SelectionOutput out = run_selection(cfg, in);
  json j;
  j["config_hash"] = cfg.hash();
  j["maternal"] = selection_to_json(out.maternal, rec, cfg.hash());
  if (out.fetal) {
    j["fetal"] = selection_to_json(*out.fetal, rec, cfg.hash());
    j["fetal_reference_source"] = cfg.selection.fetal_reference;
  }
  j["selected"] = out.final().selected;
  j["rejected"] = rejection_json(ctx.recs(), rec);
  ctx.manifest.write("selection.json", dump(j));
  ctx.selection = std::move(out);
  ctx.manifest.stage_end();
}

void stage_extract(Context& ctx) {
  ctx.manifest.stage_begin("extract");
  const auto& cfg = ctx.cfg;
  std::vector<std::size_t> channels;
  if (ctx.selection) {
    channels = ctx.selection->final().selected;
  } else {
    channels = read_json_file(ctx.in("selection.json")).at("selected").get<std::vector<std::size_t>>();
  }
  if (channels.empty()) throw ValidationError("extract: the selection is empty");
  const RecordingSet& rec = ctx.prep();
  ExtractionInputs in;
  in.recordings = &rec;
  in.channels = channels;
  in.fetal_refs = ctx.frefs();
  in.fetal_peaks = ctx.fpeaks();
  const ExtractionReport r = run_extraction(cfg, in);

  std::vector<std::string> names;
  for (Eigen::Index k = 0; k < r.ica.sources.rows(); ++k) names.push_back("ic" + std::to_string(k));
  std::vector<std::string> chan_labels;
  for (auto c : channels) chan_labels.push_back(rec.labels[c]);
  ctx.manifest.write("ica_sources.csv", channel_matrix_csv(r.ica.sources, names));
  ctx.manifest.write("ica_mixing.csv", matrix_csv(r.ica.mixing, names));
  ctx.manifest.write("ica_demixing.csv", matrix_csv(r.ica.demixing, chan_labels));
  ctx.manifest.write("ica_whitening.csv", matrix_csv(r.ica.whitening, chan_labels));
  json meta = ica_metadata_json(r.ica);
  meta["config_hash"] = cfg.hash();
  meta["channels"] = channels;
  meta["channel_labels"] = chan_labels;
  ctx.manifest.write("ica_meta.json", dump(meta));

  json rank;
  rank["config_hash"] = cfg.hash();
  rank["rank_by"] = cfg.ica.rank_by;
  auto arr = json::array();
  for (const auto& c : r.ranking) {
    json e{{"component", c.component}, {"score", c.score}};
    if (!r.f1.empty()) e["peak_f1"] = r.f1[c.component];
    arr.push_back(e);
  }
  rank["ranking"] = arr;
  rank["top_component"] = r.ranking.empty() ? json(nullptr) : json(r.ranking.front().component);
  if (r.top_f1) rank["top_peak_f1"] = *r.top_f1;
  if (!r.baseline_f1.empty()) {
    rank["random_baseline_f1"] = r.baseline_f1;
    double mean = 0.0;
    for (double v : r.baseline_f1) mean += v;
    rank["random_baseline_mean_f1"] = mean / static_cast<double>(r.baseline_f1.size());
  }
  ctx.manifest.write("fetal_ranking.json", dump(rank));
  ctx.manifest.stage_end();
}

template <class F>
void run_command(const std::string& name, const ExperimentConfig& cfg, F&& body) {
  cfg.validate();
  RunManifest manifest(name, cfg);
  Context ctx(cfg, manifest);
  std::vector<std::string> warnings;
  set_warning_handler([&](std::string_view m) {
    warnings.emplace_back(m);
    std::fprintf(stderr, "fecg: warning: %.*s\n", static_cast<int>(m.size()), m.data());
  });
  try {
    body(ctx);
  } catch (const std::exception& e) {
    set_warning_handler(nullptr);
    for (const auto& w : warnings) manifest.note("warning: " + w);
    manifest.finish("failed", e.what());
    throw;
  }
  set_warning_handler(nullptr);
  for (const auto& w : warnings) manifest.note("warning: " + w);
  manifest.finish("ok");
}

}  // namespace

// ---------------------------------------------------------------- config

void ExperimentConfig::validate() const {
  const auto& s = simulation;
  if (!(s.duration > 0.0)) throw ValidationError("config: simulation.duration must be > 0");
  if (!(s.sample_rate > 0.0)) throw ValidationError("config: simulation.sample_rate must be > 0");
  if (!(s.conductivity > 0.0)) throw ValidationError("config: simulation.conductivity must be > 0");
  if (s.format != "csv" && s.format != "bin") throw ValidationError("config: simulation.format must be csv or bin");
  for (const auto* h : {&s.maternal, &s.fetal}) {
    if (!(h->rate > 0.0) || !(h->rate_std >= 0.0)) {
      throw ValidationError("config: heart rate must be > 0 and rate_std >= 0");
    }
    if (h->scaling && (h->scaling->array() < 0.0).any()) {
      throw ValidationError("config: heart scaling must be non-negative");
    }
    if (h->dipole && !fs::exists(resolve(base_dir, *h->dipole))) {
      throw ValidationError("config: dipole file '" + resolve(base_dir, *h->dipole).string() + "' does not exist");
    }
  }
  if (s.geometry && !fs::exists(resolve(base_dir, *s.geometry))) {
    throw ValidationError("config: geometry file '" + resolve(base_dir, *s.geometry).string() + "' does not exist");
  }
  s.noise.validate();
  if (s.quantize_bits && (*s.quantize_bits < 1 || *s.quantize_bits > 30)) {
    throw ValidationError("config: simulation.quantize.bits must lie in [1, 30]");
  }
  mi.validate();
  const auto& sel = selection;
  if (sel.frank_templates && !fs::exists(resolve(base_dir, *sel.frank_templates))) {
    throw ValidationError("config: template file '" + resolve(base_dir, *sel.frank_templates).string() +
                          "' does not exist");
  }
  if (sel.rule == Rule::Fetal1) {
    throw ValidationError("config: selection.rule must be a maternal rule; use selection.fetal_m for the fetal rule");
  }
  if (sel.vcg != "simulated" && sel.vcg != "synthetic") {
    throw ValidationError("config: selection.vcg must be simulated or synthetic");
  }
  if (sel.fetal_reference != "true" && sel.fetal_reference != "averaged" && sel.fetal_reference != "shared") {
    throw ValidationError("config: selection.fetal_reference must be true, averaged or shared");
  }
  if (ica.rank_by != "mi" && ica.rank_by != "peaks") throw ValidationError("config: ica.rank_by must be mi or peaks");
}

json ExperimentConfig::to_json() const {
  const auto& s = simulation;
  json j;
  j["seed"] = seed;
  json sim;
  sim["geometry"] = s.geometry ? json(s.geometry->generic_string()) : json(nullptr);
  sim["montage"] = s.montage ? json(fecg::to_string(*s.montage)) : json(nullptr);
  sim["duration"] = s.duration;
  sim["sample_rate"] = s.sample_rate;
  sim["conductivity"] = s.conductivity;
  sim["maternal"] = heart_to_json(s.maternal);
  sim["maternal"]["rotation_deg"] = vec3_json(s.maternal_rotation_deg);
  sim["fetal"] = heart_to_json(s.fetal);
  sim["fetal"]["presentation"] = s.presentation == FetalPresentation::Breech   ? "breech"
                                 : s.presentation == FetalPresentation::Vertex ? "vertex"
                                                                              : "identity";
  sim["fetal"]["facing"] = s.facing == Facing::Left ? "left" : "right";
  sim["noise"] = {{"base_std", s.noise.base_std},
                  {"envelope_period", s.noise.envelope_period},
                  {"envelope_depth", s.noise.envelope_depth},
                  {"color", s.noise.color},
                  {"seed", s.noise.seed}};
  sim["quantize"] = s.quantize_bits ? json{{"bits", *s.quantize_bits}, {"full_scale", s.quantize_full_scale}}
                                    : json(nullptr);
  sim["format"] = s.format;
  j["simulation"] = sim;
  j["preprocess"] = {{"baseline", preprocess.baseline},
                     {"baseline_windows", {preprocess.baseline_windows.first_window, preprocess.baseline_windows.second_window}},
                     {"reject", preprocess.reject},
                     {"min_std", preprocess.rejection.min_std},
                     {"relative_min_std", preprocess.rejection.relative_min_std},
                     {"rail_fraction", preprocess.rejection.rail_fraction},
                     {"max_flatness", preprocess.rejection.max_flatness}};
  j["mi"] = {{"estimator", fecg::to_string(mi.estimator)}, {"bins", mi.bins}, {"neighbors", mi.neighbors}};
  j["mimap"] = {{"compare_montages", mimap.compare_montages}};
  j["selection"] = {{"rule", fecg::to_string(selection.rule)},
                    {"k", selection.k},
                    {"fetal_m", selection.fetal_m},
                    {"vcg", selection.vcg},
                    {"fetal_reference", selection.fetal_reference},
                    {"redundancy_weight", selection.redundancy_weight},
                    {"fetal_window", selection.fetal_window},
                    {"frank_templates", selection.frank_templates ? json(selection.frank_templates->generic_string())
                                                                  : json(nullptr)}};
  j["ica"] = {{"m", ica.m},
              {"rank_by", ica.rank_by},
              {"random_baselines", ica.random_baselines},
              {"peak_tolerance", ica.peak_tolerance},
              {"threshold", ica.jade.threshold},
              {"max_sweeps", ica.jade.max_sweeps}};
  return j;
}

std::string ExperimentConfig::hash() const { return sha256_hex(to_json().dump()); }

ExperimentConfig config_from_json(const json& j, const fs::path& base_dir) {
  check_keys(j, {"seed", "output_dir", "simulation", "preprocess", "mi", "mimap", "selection", "ica"}, "config");
  if (!j.contains("seed") || !j.at("seed").is_number_integer()) {
    throw ValidationError("config: 'seed' is mandatory and must be an integer");
  }
  ExperimentConfig c = default_config();
  c.base_dir = base_dir;
  c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("output_dir")) c.output_dir = resolve(base_dir, j.at("output_dir").get<std::string>());

  if (j.contains("simulation")) {
    const auto& s = j.at("simulation");
    check_keys(s, {"geometry", "montage", "duration", "sample_rate", "conductivity", "maternal", "fetal", "noise",
                   "quantize", "format"},
               "simulation");
    auto& o = c.simulation;
    if (s.contains("geometry") && !s.at("geometry").is_null()) o.geometry = s.at("geometry").get<std::string>();
    if (s.contains("montage") && !s.at("montage").is_null()) o.montage = montage_from_string(s.at("montage").get<std::string>());
    read_opt(s, "duration", o.duration);
    read_opt(s, "sample_rate", o.sample_rate);
    read_opt(s, "conductivity", o.conductivity);
    read_opt(s, "format", o.format);
    if (s.contains("maternal")) {
      json m = s.at("maternal");
      if (m.contains("rotation_deg")) {
        o.maternal_rotation_deg = vec3(m.at("rotation_deg"), "maternal.rotation_deg");
        m.erase("rotation_deg");
      }
      o.maternal = heart_from_json(m, "simulation.maternal", o.maternal);
    }
    if (s.contains("fetal")) {
      json f = s.at("fetal");
      if (f.contains("presentation")) {
        o.presentation = presentation_from_string(f.at("presentation").get<std::string>());
        f.erase("presentation");
      }
      if (f.contains("facing")) {
        o.facing = facing_from_string(f.at("facing").get<std::string>());
        f.erase("facing");
      }
      o.fetal = heart_from_json(f, "simulation.fetal", o.fetal);
    }
    if (s.contains("noise")) {
      const auto& n = s.at("noise");
      check_keys(n, {"base_std", "envelope_period", "envelope_depth", "color", "seed"}, "simulation.noise");
      read_opt(n, "base_std", o.noise.base_std);
      read_opt(n, "envelope_period", o.noise.envelope_period);
      read_opt(n, "envelope_depth", o.noise.envelope_depth);
      read_opt(n, "color", o.noise.color);
      read_opt(n, "seed", o.noise.seed);
    }
    if (s.contains("quantize") && !s.at("quantize").is_null()) {
      const auto& q = s.at("quantize");
      check_keys(q, {"bits", "full_scale"}, "simulation.quantize");
      o.quantize_bits = q.value("bits", 12);
      o.quantize_full_scale = q.value("full_scale", 1.0);
    }
  }
  if (j.contains("preprocess")) {
    const auto& p = j.at("preprocess");
    check_keys(p, {"baseline", "baseline_windows", "reject", "min_std", "relative_min_std", "rail_fraction",
                   "max_flatness"},
               "preprocess");
    read_opt(p, "baseline", c.preprocess.baseline);
    if (p.contains("baseline_windows")) {
      const auto w = p.at("baseline_windows").get<std::vector<double>>();
      if (w.size() != 2) throw ValidationError("preprocess.baseline_windows: expected [first, second] seconds");
      c.preprocess.baseline_windows = {w[0], w[1]};
    }
    read_opt(p, "reject", c.preprocess.reject);
    read_opt(p, "min_std", c.preprocess.rejection.min_std);
    read_opt(p, "relative_min_std", c.preprocess.rejection.relative_min_std);
    read_opt(p, "rail_fraction", c.preprocess.rejection.rail_fraction);
    read_opt(p, "max_flatness", c.preprocess.rejection.max_flatness);
  }
  if (j.contains("mi")) {
    const auto& m = j.at("mi");
    check_keys(m, {"estimator", "bins", "neighbors"}, "mi");
    if (m.contains("estimator")) c.mi.estimator = mi_estimator_from_string(m.at("estimator").get<std::string>());
    read_opt(m, "bins", c.mi.bins);
    read_opt(m, "neighbors", c.mi.neighbors);
  }
  if (j.contains("mimap")) {
    check_keys(j.at("mimap"), {"compare_montages"}, "mimap");
    read_opt(j.at("mimap"), "compare_montages", c.mimap.compare_montages);
  }
  if (j.contains("selection")) {
    const auto& s = j.at("selection");
    check_keys(s, {"rule", "k", "fetal_m", "vcg", "fetal_reference", "redundancy_weight", "fetal_window",
                   "frank_templates"},
               "selection");
    if (s.contains("rule")) c.selection.rule = rule_from_string(s.at("rule").get<std::string>());
    read_opt(s, "k", c.selection.k);
    read_opt(s, "fetal_m", c.selection.fetal_m);
    read_opt(s, "vcg", c.selection.vcg);
    read_opt(s, "fetal_reference", c.selection.fetal_reference);
    read_opt(s, "redundancy_weight", c.selection.redundancy_weight);
    read_opt(s, "fetal_window", c.selection.fetal_window);
    if (s.contains("frank_templates") && !s.at("frank_templates").is_null()) {
      c.selection.frank_templates = s.at("frank_templates").get<std::string>();
    }
  }
  if (j.contains("ica")) {
    const auto& i = j.at("ica");
    check_keys(i, {"m", "rank_by", "random_baselines", "peak_tolerance", "threshold", "max_sweeps"}, "ica");
    read_opt(i, "m", c.ica.m);
    read_opt(i, "rank_by", c.ica.rank_by);
    read_opt(i, "random_baselines", c.ica.random_baselines);
    read_opt(i, "peak_tolerance", c.ica.peak_tolerance);
    read_opt(i, "threshold", c.ica.jade.threshold);
    read_opt(i, "max_sweeps", c.ica.jade.max_sweeps);
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  return config_from_json(read_json_file(path), path.has_parent_path() ? path.parent_path() : fs::path("."));
}

ExperimentConfig default_config() {
  ExperimentConfig c;
  c.seed = 20070101;
  auto& s = c.simulation;
  s.maternal.rate = 1.2;
  s.maternal.rate_std = 0.03;
  s.maternal_rotation_deg = Vec3(-10.3, 38.5, 9.6);
  s.fetal.rate = 2.3;
  s.fetal.rate_std = 0.06;
  s.presentation = FetalPresentation::Breech;
  s.facing = Facing::Left;
  s.noise.base_std = 0.11;
  s.noise.envelope_period = 7.0;
  s.noise.envelope_depth = 0.5;
  return c;
}

ElectrodeArray default_geometry_8x18() {
  ElectrodeArray a = make_cylinder_grid(18, 8, 0.13, 0.45, 210.0);
  a.reference = a.index(8, 3);  // navel
  a.maternal_heart = Vec3(-0.057, 0.267, 0.017);
  a.fetal_heart = Vec3(0.026, -0.156, 0.077);
  return a;
}

ElectrodeArray default_geometry_8x9() {
  // eight columns all around the torso, front and back
  ElectrodeArray a = make_cylinder_grid(9, 8, 0.13, 0.40, 315.0);
  a.reference = a.index(4, 3);
  a.maternal_heart = Vec3(-0.057, 0.267, 0.017);
  a.fetal_heart = Vec3(0.026, -0.156, 0.077);
  return a;
}

ElectrodeArray load_geometry(const SimulationConfig& sim, const fs::path& base_dir) {
  ElectrodeArray a = sim.geometry ? electrode_array_from_json(read_json_file(resolve(base_dir, *sim.geometry)))
                                  : default_geometry_8x18();
  if (sim.montage) a.montage = *sim.montage;
  a.validate();
  return a;
}

// ---------------------------------------------------------------- stages

SimulationOutput simulate(const ExperimentConfig& cfg) {
  ElectrodeArray a = load_geometry(cfg.simulation, cfg.base_dir);
  return simulate(cfg, a.montage);
}

SimulationOutput simulate(const ExperimentConfig& cfg, Montage montage) {
  const auto& s = cfg.simulation;
  SimulationOutput out;
  out.array = load_geometry(s, cfg.base_dir);
  out.array.montage = montage;
  out.array.validate();

  HeartSource m;
  m.params = load_dipole(s.maternal.dipole, cfg.base_dir);
  m.rhythm = {s.maternal.rate, s.maternal.rate_std, 0, s.maternal.initial_phase};
  m.rotation = maternal_rotation(s.maternal_rotation_deg);
  m.scaling = s.maternal.scaling.value_or(Vec3::Ones());

  HeartSource f;
  f.params = load_dipole(s.fetal.dipole, cfg.base_dir);
  f.rhythm = {s.fetal.rate, s.fetal.rate_std, 0, s.fetal.initial_phase};
  f.rotation = fetal_rotation(s.presentation, s.facing);
  f.scaling = s.fetal.scaling.value_or(default_fetal_scaling(m.scaling));

  out.mix = mix_abdominal(out.array, VolumeConductor{s.conductivity}, m, f, s.noise, s.duration, s.sample_rate,
                          cfg.seed);
  if (s.quantize_bits) {
    out.mix.recordings.data = quantize(out.mix.recordings.data, *s.quantize_bits, s.quantize_full_scale);
  }
  return out;
}

RecordingSet preprocess(const RecordingSet& rec, const PreprocessConfig& cfg, std::vector<std::string>* notes) {
  RecordingSet out = cfg.baseline ? remove_baseline(rec, cfg.baseline_windows) : rec;
  out.fill_defaults();
  if (cfg.reject) {
    const auto r = reject_bad_channels(out, cfg.rejection);
    apply_rejection(out, r);
    if (notes) {
      for (std::size_t i = 0; i < r.rejected.size(); ++i) {
        notes->push_back("rejected " + out.labels[r.rejected[i]] + ": " + r.reasons[i]);
      }
    }
  }
  return out;
}

MIMaps compute_mimaps(const RecordingSet& rec, const Matrix& maternal_refs, const Matrix* fetal_refs,
                      const MIConfig& cfg) {
  MIMaps m;
  m.maternal = mi_map(rec, maternal_refs, cfg, MapKind::Maternal);
  if (fetal_refs) {
    m.fetal = mi_map(rec, *fetal_refs, cfg, MapKind::Fetal);
    m.differential = differential_mi_map(*m.fetal, m.maternal);
  }
  return m;
}

std::size_t strongest_channel(const Matrix& refs, const RecordingSet& rec) {
  std::size_t best = 0;
  double best_e = -1.0;
  for (Eigen::Index i = 0; i < refs.rows(); ++i) {
    if (!rec.valid.empty() && !rec.valid[static_cast<std::size_t>(i)]) continue;
    const double e = refs.row(i).squaredNorm();
    if (e > best_e) {
      best_e = e;
      best = static_cast<std::size_t>(i);
    }
  }
  return best;
}

SelectionOutput run_selection(const ExperimentConfig& cfg, const SelectionInputs& in) {
  const auto& sc = cfg.selection;
  const RecordingSet& rec = *in.recordings;
  Matrix vcg;
  if (sc.vcg == "simulated") {
    if (!in.maternal_vcg) throw ValidationError("select: simulated VCG requested but not available");
    vcg = *in.maternal_vcg;
  } else {
    if (!in.templates) throw ValidationError("select: synthetic VCG requested without templates");
    // maternal peaks from the most energetic valid channel
    std::size_t ch = strongest_channel(rec.data, rec);
    const RowMatrix x = rec.data;
    PeakTrain peaks = detect_r_peaks(row_span(x, ch), rec.sample_rate, maternal_rate_band());
    peaks.source_channel = ch;
    vcg = synth_frank_reference(peaks, *in.templates, rec.samples(), rec.sample_rate).signals;
  }
  if (vcg.cols() != rec.data.cols()) throw ValidationError("select: VCG length differs from the recordings");

  SelectionOptions opt;
  opt.mi = cfg.mi;
  opt.redundancy_weight = sc.redundancy_weight;
  SelectionOutput out;
  if (sc.rule == Rule::Maternal1) {
    const auto classes = classify_channels(rec, vcg);
    out.maternal = maternal_rule1(rec, vcg, classes, sc.k, opt);
  } else {
    const TransferFit fit = fit_transfer(rec.data, vcg);
    out.maternal = maternal_rule2(rec, local_references(fit, vcg).signals, sc.k, opt);
  }
  if (sc.fetal_m > 0) {
    Matrix fr;
    if (sc.fetal_reference == "averaged") {
      if (!in.fetal_peaks) throw ValidationError("select: averaged fetal references need a fetal peak train");
      PeakTrain p;
      p.indices = *in.fetal_peaks;
      fr = build_fetal_references(rec, p, sc.fetal_window).signals;
    } else {
      if (!in.fetal_refs) throw ValidationError("select: fetal rule needs fetal references");
      if (sc.fetal_reference == "shared") {
        fr = in.fetal_refs->row(static_cast<Eigen::Index>(strongest_channel(*in.fetal_refs, rec)));
      } else {
        fr = *in.fetal_refs;
      }
    }
    out.fetal = fetal_rule1(rec, out.maternal, fr, sc.fetal_m, cfg.mi);
  }
  return out;
}

namespace {

struct Scored {
  ICAResult ica;
  std::vector<ComponentScore> ranking;
  std::vector<double> f1;
};

Scored separate_and_rank(const ExperimentConfig& cfg, const RecordingSet& rec, const std::vector<std::size_t>& channels,
                         const Matrix* fetal_refs, const std::vector<std::size_t>* fetal_peaks) {
  const std::size_t m = cfg.ica.m == 0 ? channels.size() : cfg.ica.m;
  if (m > channels.size()) {
    throw ValidationError("extract: ica.m = " + std::to_string(m) + " exceeds the " +
                          std::to_string(channels.size()) + " selected channels");
  }
  Matrix x(static_cast<Eigen::Index>(channels.size()), rec.data.cols());
  for (std::size_t i = 0; i < channels.size(); ++i) {
    if (channels[i] >= rec.channels()) throw ValidationError("extract: channel id out of range");
    x.row(static_cast<Eigen::Index>(i)) = rec.data.row(static_cast<Eigen::Index>(channels[i]));
  }
  Scored s;
  s.ica = separate(x, m, cfg.ica.jade);
  PeakTrain truth;
  if (fetal_peaks) truth.indices = *fetal_peaks;
  if (cfg.ica.rank_by == "peaks") {
    if (!fetal_peaks) throw ValidationError("extract: rank_by = peaks needs the fetal peak train");
    s.ranking = rank_fetal_components(s.ica, truth, rec.sample_rate, fetal_rate_band(), cfg.ica.peak_tolerance);
  } else {
    if (!fetal_refs) throw ValidationError("extract: rank_by = mi needs fetal references");
    const RowMatrix fr = *fetal_refs;
    s.ranking = rank_fetal_components(s.ica, row_span(fr, strongest_channel(*fetal_refs, rec)), cfg.mi.bins);
  }
  if (fetal_peaks) {
    const auto by_f1 =
        rank_fetal_components(s.ica, truth, rec.sample_rate, fetal_rate_band(), cfg.ica.peak_tolerance);
    s.f1.assign(by_f1.size(), 0.0);
    for (const auto& c : by_f1) s.f1[c.component] = c.score;
  }
  return s;
}

}  // namespace

ExtractionReport run_extraction(const ExperimentConfig& cfg, const ExtractionInputs& in) {
  const RecordingSet& rec = *in.recordings;
  Scored s = separate_and_rank(cfg, rec, in.channels, in.fetal_refs, in.fetal_peaks);
  ExtractionReport r;
  r.channels = in.channels;
  r.ica = std::move(s.ica);
  r.ranking = std::move(s.ranking);
  r.f1 = std::move(s.f1);
  if (!r.f1.empty() && !r.ranking.empty()) r.top_f1 = r.f1[r.ranking.front().component];

  if (in.fetal_peaks && cfg.ica.random_baselines > 0) {
    const auto pool = rec.valid_indices();
    const std::size_t size = in.channels.size();
    if (pool.size() >= size) {
      for (std::size_t b = 0; b < cfg.ica.random_baselines; ++b) {
        // partial Fisher-Yates on the raw engine output, stable across standard libraries
        std::mt19937_64 rng(cfg.seed * 0x9e3779b97f4a7c15ull + b + 1);
        auto p = pool;
        for (std::size_t i = 0; i < size; ++i) {
          const std::size_t j = i + static_cast<std::size_t>(rng() % (p.size() - i));
          std::swap(p[i], p[j]);
        }
        p.resize(size);
        std::sort(p.begin(), p.end());
        r.baseline_f1.push_back(extraction_f1(cfg, rec, p, *in.fetal_refs, *in.fetal_peaks));
      }
    }
  }
  return r;
}

double extraction_f1(const ExperimentConfig& cfg, const RecordingSet& rec, const std::vector<std::size_t>& channels,
                     const Matrix& fetal_refs, const std::vector<std::size_t>& fetal_peaks) {
  Scored s = separate_and_rank(cfg, rec, channels, &fetal_refs, &fetal_peaks);
  return s.ranking.empty() ? 0.0 : s.f1[s.ranking.front().component];
}

// ---------------------------------------------------------------- manifest

RunManifest::RunManifest(std::string command, const ExperimentConfig& cfg)
    : command_(std::move(command)), dir_(cfg.output_dir), config_(cfg.to_json()), config_hash_(cfg.hash()) {
  fs::create_directories(dir_);
}

void RunManifest::write(const std::string& name, const std::string& contents) {
  write_file_atomic(dir_ / name, contents);
  auto it = std::find_if(files_.begin(), files_.end(), [&](const FileEntry& e) { return e.name == name; });
  FileEntry e{name, sha256_hex(contents), contents.size()};
  if (it == files_.end()) {
    files_.push_back(e);
  } else {
    *it = e;
  }
}

void RunManifest::stage_begin(const std::string& name) {
  stages_.push_back({name, 0.0});
  stage_start_ = std::chrono::steady_clock::now();
}

void RunManifest::stage_end() {
  if (stages_.empty()) return;
  stages_.back().seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - stage_start_).count();
}

void RunManifest::note(const std::string& message) { notes_.push_back(message); }

bool RunManifest::has_file(const std::string& name) const {
  return std::any_of(files_.begin(), files_.end(), [&](const FileEntry& e) { return e.name == name; });
}

fs::path RunManifest::path(const std::string& name) const { return dir_ / name; }

std::string RunManifest::outputs_hash() const {
  std::vector<std::pair<std::string, std::string>> v;
  for (const auto& f : files_) v.emplace_back(f.name, f.sha256);
  std::sort(v.begin(), v.end());
  std::string s;
  for (const auto& [n, h] : v) s += n + " " + h + "\n";
  return sha256_hex(s);
}

void RunManifest::finish(const std::string& status, const std::string& error) {
  json j;
  j["tool"] = "fecg";
  j["version"] = kToolVersion;
  j["command"] = command_;
  j["status"] = status;
  if (!error.empty()) j["error"] = error;
  j["config_hash"] = config_hash_;
  j["config"] = config_;
  auto stages = json::array();
  for (const auto& s : stages_) stages.push_back({{"name", s.name}, {"seconds", s.seconds}});
  j["stages"] = stages;
  auto files = json::array();
  for (const auto& f : files_) files.push_back({{"path", f.name}, {"sha256", f.sha256}, {"bytes", f.bytes}});
  j["files"] = files;
  j["outputs_hash"] = outputs_hash();
  j["notes"] = notes_;
  const std::string name = command_ == "pipeline" ? "manifest.json" : command_ + "_manifest.json";
  write_file_atomic(dir_ / name, dump(j));
}

// ---------------------------------------------------------------- commands

void cmd_simulate(const ExperimentConfig& cfg) {
  run_command("simulate", cfg, [](Context& ctx) { stage_simulate(ctx); });
}

void cmd_mimap(const ExperimentConfig& cfg) {
  run_command("mimap", cfg, [](Context& ctx) {
    ctx.recs();
    stage_mimap(ctx);
  });
}

void cmd_select(const ExperimentConfig& cfg) {
  run_command("select", cfg, [](Context& ctx) { stage_select(ctx); });
}

void cmd_extract(const ExperimentConfig& cfg) {
  run_command("extract", cfg, [](Context& ctx) { stage_extract(ctx); });
}

void cmd_synth_ref(const ExperimentConfig& cfg, std::optional<std::size_t> channel) {
  run_command("synth-ref", cfg, [&](Context& ctx) {
    ctx.manifest.stage_begin("synth-ref");
    const RecordingSet& rec = ctx.prep();
    const std::size_t ch = channel.value_or(strongest_channel(rec.data, rec));
    if (ch >= rec.channels()) throw ValidationError("synth-ref: channel out of range");
    const RowMatrix x = rec.data;
    PeakTrain peaks = detect_r_peaks(row_span(x, ch), rec.sample_rate, maternal_rate_band());
    if (!peaks.plausible) warn("synth-ref: detected peak intervals fall outside the maternal rate band");
    const FrankTemplates t = load_templates(cfg, rec.sample_rate);
    const ReferenceSet r = synth_frank_reference(peaks, t, rec.samples(), rec.sample_rate);
    ctx.manifest.write("frank_refs.csv", matrix_csv(r.signals.transpose(), {"x", "y", "z"}));
    ctx.manifest.write("maternal_detected_peaks.csv", indices_csv(peaks.indices));
    std::ostringstream tpl;
    write_frank_templates(t, tpl);
    ctx.manifest.write("frank_templates.csv", tpl.str());
    ctx.manifest.note("maternal peaks detected on " + rec.labels[ch]);
    ctx.manifest.stage_end();
  });
}

void cmd_pipeline(const ExperimentConfig& cfg, const std::vector<std::string>& stages) {
  static const std::vector<std::string> kAll = {"simulate", "mimap", "select", "extract"};
  std::vector<std::string> run = stages.empty() ? kAll : stages;
  for (const auto& s : run) {
    if (std::find(kAll.begin(), kAll.end(), s) == kAll.end()) {
      throw ValidationError("pipeline: unknown stage '" + s + "' (simulate, mimap, select, extract)");
    }
  }
  run_command("pipeline", cfg, [&](Context& ctx) {
    for (const auto& s : kAll) {
      if (std::find(run.begin(), run.end(), s) == run.end()) continue;
      if (s == "simulate") stage_simulate(ctx);
      if (s == "mimap") {
        ctx.recs();
        stage_mimap(ctx);
      }
      if (s == "select") stage_select(ctx);
      if (s == "extract") stage_extract(ctx);
    }
  });
}

}  // namespace fecg
