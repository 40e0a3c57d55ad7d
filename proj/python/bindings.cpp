#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <nlohmann/json.hpp>

#include "fecg/ica.hpp"
#include "fecg/mi.hpp"
#include "fecg/pipeline.hpp"
#include "fecg/preprocess.hpp"
#include "fecg/selection.hpp"

namespace py = pybind11;
using namespace fecg;
using nlohmann::json;

namespace {

ExperimentConfig parse_config(const std::string& text, const std::string& base_dir) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  return config_from_json(j, base_dir);
}

std::vector<double> to_vector(const Eigen::Ref<const Eigen::VectorXd>& v) { return {v.data(), v.data() + v.size()}; }

RecordingSet as_recording(const Matrix& x, double sample_rate) {
  RecordingSet r;
  r.data = x;
  r.sample_rate = sample_rate;
  r.fill_defaults();
  r.validate();
  return r;
}

py::dict selection_dict(const SelectionState& s) {
  py::list steps;
  for (const auto& st : s.steps) {
    py::dict d;
    d["channel"] = st.channel;
    d["reference_mi"] = st.reference_mi;
    d["redundancy"] = st.redundancy;
    d["objective"] = st.objective;
    steps.append(d);
  }
  py::dict out;
  out["rule"] = to_string(s.rule);
  out["selected"] = s.selected;
  out["steps"] = steps;
  return out;
}

SelectionOptions options(int bins, double weight) {
  SelectionOptions o;
  o.mi.bins = bins;
  o.redundancy_weight = weight;
  return o;
}

}  // namespace

PYBIND11_MODULE(_fecg, m) {
  m.doc() = "Fetal ECG simulation, MI-based electrode selection and JADE extraction";

  static py::exception<Error> runtime_error(m, "FecgError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ValidationError& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    } catch (const Error& e) {
      runtime_error(e.what());
    }
  });

  m.attr("__version__") = kToolVersion;

  m.def("default_config", [] { return default_config().to_json().dump(); },
        "Built-in experiment configuration as JSON text.");
  m.def("config_hash", [](const std::string& text, const std::string& base_dir) {
    return parse_config(text, base_dir).hash();
  }, py::arg("config"), py::arg("base_dir") = ".");

  m.def("simulate", [](const std::string& text, const std::string& base_dir) {
    const auto cfg = parse_config(text, base_dir);
    cfg.validate();
    SimulationOutput sim;
    {
      py::gil_scoped_release nogil;
      sim = simulate(cfg);
    }
    const auto& rec = sim.mix.recordings;
    py::dict d;
    d["recordings"] = rec.data;
    d["sample_rate"] = rec.sample_rate;
    d["labels"] = rec.labels;
    d["valid"] = rec.valid;
    std::vector<std::pair<int, int>> grid;
    for (const auto& g : rec.grid) grid.emplace_back(g.row, g.col);
    d["grid"] = grid;
    d["maternal_refs"] = sim.mix.maternal_reference;
    d["fetal_refs"] = sim.mix.fetal_reference;
    d["maternal_vcg"] = sim.mix.maternal_vcg;
    d["fetal_vcg"] = sim.mix.fetal_vcg;
    d["maternal_peaks"] = sim.mix.maternal.r_peaks;
    d["fetal_peaks"] = sim.mix.fetal.r_peaks;
    return d;
  }, py::arg("config"), py::arg("base_dir") = ".",
        "Simulates abdominal recordings; returns arrays keyed by name.");

  m.def("run_pipeline", [](const std::string& text, const std::string& out_dir, const std::vector<std::string>& stages,
                           const std::string& base_dir) {
    auto cfg = parse_config(text, base_dir);
    cfg.output_dir = out_dir;
    {
      py::gil_scoped_release nogil;
      cmd_pipeline(cfg, stages);
    }
    return (std::filesystem::path(out_dir) / "manifest.json").string();
  }, py::arg("config"), py::arg("out_dir"), py::arg("stages") = std::vector<std::string>{},
        py::arg("base_dir") = ".", "Runs the pipeline; returns the manifest path.");

  m.def("mi_binned", [](const Eigen::VectorXd& x, const Eigen::VectorXd& y, int bins, bool enforce_floor) {
    return estimate_mi_binned(to_vector(x), to_vector(y), bins, enforce_floor).value;
  }, py::arg("x"), py::arg("y"), py::arg("bins") = 16, py::arg("enforce_sample_floor") = true);

  m.def("mi_knn", [](const Eigen::VectorXd& x, const Matrix& y, int k) {
    if (y.cols() == 1 && y.rows() == x.size()) return estimate_mi_knn(to_vector(x), to_vector(y.col(0)), k).value;
    return estimate_mi_knn(to_vector(x), y, k).value;
  }, py::arg("x"), py::arg("y"), py::arg("k") = 4, "y is a vector or a d x T matrix.");

  m.def("detect_r_peaks", [](const Eigen::VectorXd& x, double sample_rate, const std::string& heart) {
    RateBand band;
    if (heart == "maternal") band = maternal_rate_band();
    else if (heart == "fetal") band = fetal_rate_band();
    else throw ValidationError("detect_r_peaks: heart must be 'maternal' or 'fetal'");
    return detect_r_peaks(to_vector(x), sample_rate, band).indices;
  }, py::arg("x"), py::arg("sample_rate") = 1000.0, py::arg("heart") = "maternal");

  m.def("remove_baseline", [](const Eigen::VectorXd& x, double sample_rate) {
    return remove_baseline(to_vector(x), sample_rate);
  }, py::arg("x"), py::arg("sample_rate") = 1000.0);

  m.def("select_rule1", [](const Matrix& x, const Matrix& refs, const std::vector<int>& classes, std::size_t k,
                           int bins, double weight) {
    return selection_dict(maternal_rule1(as_recording(x, 1000.0), refs, classes, k, options(bins, weight)));
  }, py::arg("recordings"), py::arg("class_refs"), py::arg("classes"), py::arg("k"), py::arg("bins") = 16,
        py::arg("redundancy_weight") = 1.0);

  m.def("select_rule2", [](const Matrix& x, const Matrix& local_refs, std::size_t k, int bins, double weight) {
    return selection_dict(maternal_rule2(as_recording(x, 1000.0), local_refs, k, options(bins, weight)));
  }, py::arg("recordings"), py::arg("local_refs"), py::arg("k"), py::arg("bins") = 16,
        py::arg("redundancy_weight") = 1.0);

  m.def("select_fetal", [](const Matrix& x, const std::vector<std::size_t>& selected, const Matrix& fetal_refs,
                           std::size_t count, int bins) {
    SelectionState s;
    s.rule = Rule::Maternal2;
    s.selected = selected;
    MIConfig mi;
    mi.bins = bins;
    return selection_dict(fetal_rule1(as_recording(x, 1000.0), s, fetal_refs, count, mi));
  }, py::arg("recordings"), py::arg("selected"), py::arg("fetal_refs"), py::arg("m"), py::arg("bins") = 16);

  m.def("separate", [](const Matrix& x, std::size_t components) {
    ICAResult r;
    {
      py::gil_scoped_release nogil;
      r = separate(x, components);
    }
    py::dict d;
    d["sources"] = r.sources;
    d["mixing"] = r.mixing;
    d["demixing"] = r.demixing;
    d["kurtosis"] = r.kurtosis;
    d["eigenvalues"] = r.eigenvalues;
    d["sweeps"] = r.sweeps;
    d["converged"] = r.converged;
    d["identifiable"] = r.identifiable;
    return d;
  }, py::arg("x"), py::arg("m"), "JADE; sources ordered by mixing-column norm.");

  m.def("amari_index", &amari_index, py::arg("p"));
}
