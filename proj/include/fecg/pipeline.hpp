#pragma once

// Experiment configuration, stage functions, and the run manifest behind the CLI.

#include "fecg/common.hpp"
#include "fecg/forward.hpp"
#include "fecg/ica.hpp"
#include "fecg/mi.hpp"
#include "fecg/preprocess.hpp"
#include "fecg/selection.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace fecg {

inline constexpr const char* kToolVersion = "0.3.0";

struct HeartConfig {
  std::optional<std::filesystem::path> dipole;  ///< kernel table; built-in when empty
  double rate = 1.2;
  double rate_std = 0.03;
  double initial_phase = 0.0;
  std::optional<Vec3> scaling;  ///< fetal default: maternal / 10
};

struct SimulationConfig {
  std::optional<std::filesystem::path> geometry;  ///< built-in 8x18 grid when empty
  std::optional<Montage> montage;                 ///< overrides the geometry file
  double duration = 60.0;
  double sample_rate = 1000.0;
  double conductivity = 0.2;
  HeartConfig maternal;
  /// Degrees, applied as R_y(a) * R_z(b) * R_x(c).
  Vec3 maternal_rotation_deg = Vec3::Zero();
  HeartConfig fetal;
  FetalPresentation presentation = FetalPresentation::Breech;
  Facing facing = Facing::Left;
  NoiseConfig noise;
  std::optional<int> quantize_bits;
  double quantize_full_scale = 1.0;
  std::string format = "csv";  ///< csv | bin
};

struct PreprocessConfig {
  bool baseline = true;
  BaselineConfig baseline_windows;
  bool reject = true;
  RejectionConfig rejection;
};

struct MIMapConfig {
  bool compare_montages = true;
};

struct SelectionConfig {
  Rule rule = Rule::Maternal2;
  std::size_t k = 10;
  std::size_t fetal_m = 0;  ///< fetal rule on top of the maternal selection; 0 = off
  std::string vcg = "simulated";              ///< simulated | synthetic
  std::string fetal_reference = "true";       ///< true | averaged | shared
  double redundancy_weight = 1.0;
  std::size_t fetal_window = 200;             ///< samples, for averaged references
  std::optional<std::filesystem::path> frank_templates;  ///< built-in synthetic shapes when empty
};

struct ICAConfig {
  std::size_t m = 0;  ///< 0 = number of selected channels
  std::string rank_by = "mi";  ///< mi | peaks
  std::size_t random_baselines = 20;
  std::size_t peak_tolerance = 50;  ///< samples
  JadeOptions jade;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "fecg_out";
  std::filesystem::path base_dir = ".";  ///< relative paths resolve against this
  SimulationConfig simulation;
  PreprocessConfig preprocess;
  MIConfig mi;
  MIMapConfig mimap;
  SelectionConfig selection;
  ICAConfig ica;

  void validate() const;
  /// Resolved configuration with every default spelled out.
  nlohmann::json to_json() const;
  std::string hash() const;
};

/// Parses a config document; `seed` is mandatory. base_dir anchors relative paths.
ExperimentConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Shipped defaults (the 8x18 simulation study).
ExperimentConfig default_config();

ElectrodeArray default_geometry_8x18();
ElectrodeArray default_geometry_8x9();
ElectrodeArray load_geometry(const SimulationConfig& sim, const std::filesystem::path& base_dir);

struct SimulationOutput {
  ElectrodeArray array;
  AbdominalRecording mix;
};

SimulationOutput simulate(const ExperimentConfig& cfg);
SimulationOutput simulate(const ExperimentConfig& cfg, Montage montage);

/// Baseline removal and channel rejection per the config.
RecordingSet preprocess(const RecordingSet& rec, const PreprocessConfig& cfg, std::vector<std::string>* notes = nullptr);

struct MIMaps {
  MIMap maternal;
  std::optional<MIMap> fetal;
  std::optional<MIMap> differential;
};

MIMaps compute_mimaps(const RecordingSet& rec, const Matrix& maternal_refs, const Matrix* fetal_refs,
                      const MIConfig& cfg);

/// Channel with the largest fetal energy; its true fetal trace is the shared fetal reference.
std::size_t strongest_channel(const Matrix& refs, const RecordingSet& rec);

struct SelectionOutput {
  SelectionState maternal;
  std::optional<SelectionState> fetal;
  const SelectionState& final() const { return fetal ? *fetal : maternal; }
};

struct SelectionInputs {
  const RecordingSet* recordings = nullptr;
  const Matrix* maternal_vcg = nullptr;    ///< 3 x T, for vcg = simulated
  const Matrix* fetal_refs = nullptr;      ///< N x T true fetal contributions
  const std::vector<std::size_t>* fetal_peaks = nullptr;
  const FrankTemplates* templates = nullptr;  ///< for vcg = synthetic
};

SelectionOutput run_selection(const ExperimentConfig& cfg, const SelectionInputs& in);

struct ExtractionReport {
  ICAResult ica;
  std::vector<std::size_t> channels;
  std::vector<ComponentScore> ranking;
  std::vector<double> f1;  ///< per component, vs the fetal peak truth when known
  std::optional<double> top_f1;
  std::vector<double> baseline_f1;  ///< random subsets of the same size
};

struct ExtractionInputs {
  const RecordingSet* recordings = nullptr;
  std::vector<std::size_t> channels;
  const Matrix* fetal_refs = nullptr;
  const std::vector<std::size_t>* fetal_peaks = nullptr;
};

ExtractionReport run_extraction(const ExperimentConfig& cfg, const ExtractionInputs& in);

/// Top-ranked source's peak F1 for a given channel subset.
double extraction_f1(const ExperimentConfig& cfg, const RecordingSet& rec, const std::vector<std::size_t>& channels,
                     const Matrix& fetal_refs, const std::vector<std::size_t>& fetal_peaks);

// Run manifest: what ran, how long, and the hash of every file written.
class RunManifest {
 public:
  RunManifest(std::string command, const ExperimentConfig& cfg);

  /// Writes a file under the output directory and records its hash.
  void write(const std::string& name, const std::string& contents);
  void stage_begin(const std::string& name);
  void stage_end();
  void note(const std::string& message);
  bool has_file(const std::string& name) const;
  std::filesystem::path path(const std::string& name) const;
  const std::filesystem::path& dir() const { return dir_; }

  /// Writes manifest.json atomically; status is "ok" or "failed".
  void finish(const std::string& status, const std::string& error = "");
  /// SHA-256 over the sorted (name, file hash) list.
  std::string outputs_hash() const;

 private:
  struct FileEntry {
    std::string name;
    std::string sha256;
    std::size_t bytes = 0;
  };
  struct Stage {
    std::string name;
    double seconds = 0.0;
  };
  std::string command_;
  std::filesystem::path dir_;
  nlohmann::json config_;
  std::string config_hash_;
  std::vector<FileEntry> files_;
  std::vector<Stage> stages_;
  std::vector<std::string> notes_;
  std::chrono::steady_clock::time_point stage_start_;
};

// Commands. Each writes its outputs plus manifest.json into cfg.output_dir.
void cmd_simulate(const ExperimentConfig& cfg);
void cmd_mimap(const ExperimentConfig& cfg);
void cmd_select(const ExperimentConfig& cfg);
void cmd_extract(const ExperimentConfig& cfg);
void cmd_synth_ref(const ExperimentConfig& cfg, std::optional<std::size_t> channel);
/// stages subset of {simulate, mimap, select, extract}; empty = all.
void cmd_pipeline(const ExperimentConfig& cfg, const std::vector<std::string>& stages);

}  // namespace fecg
