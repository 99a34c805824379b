// Python bindings for the main operations. Structured values cross the
// boundary as JSON-compatible dicts; matrices as NumPy arrays.

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <fstream>

#include "cmtraj/errors.hpp"
#include "cmtraj/experiment.hpp"
#include "cmtraj/schedule.hpp"

namespace py = pybind11;
using namespace cmtraj;
using nlohmann::json;

namespace {

py::object to_py(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

json from_py(const py::object& o) {
  return json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

RunConfig config_from(const py::object& o) {
  if (o.is_none()) return RunConfig{};
  if (py::isinstance<py::str>(o)) return load_run_config(o.cast<std::string>());
  RunConfig c = RunConfig::from_json(from_py(o));
  c.validate();
  return c;
}

Split split_from(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  throw ConfigError("split must be train, val or test");
}

}  // namespace

PYBIND11_MODULE(_cmtraj, m) {
  m.doc() = "Consistency-model multi-agent trajectory prediction";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<ContractViolation>(m, "ContractViolation", PyExc_ValueError);
  py::register_exception<UsageError>(m, "UsageError", PyExc_ValueError);

  m.def("sigmas", [](int steps, double sigma_min, double sigma_max, double rho) {
    return build_sigmas(steps, sigma_min, sigma_max, rho).sigmas;
  }, py::arg("steps"), py::arg("sigma_min") = 0.002, py::arg("sigma_max") = 1.0, py::arg("rho") = 7.0);

  m.def("timestep_pmf", [](int steps, double mu, double spread) {
    return build_pmf(build_sigmas(steps), mu, spread).pmf;
  }, py::arg("steps"), py::arg("mu") = -1.1, py::arg("spread") = 2.0);

  m.def("ratio_range", [](int q, int stage, double k, double b) {
    const auto r = ratio_range(q, stage, k, b);
    return py::make_tuple(r.lo, r.hi);
  }, py::arg("q"), py::arg("stage"), py::arg("k") = 8.0, py::arg("b") = 1.0);

  m.def("teacher_index", [](int t, int epoch, int q, int max_epochs, int N, const std::string& mode) {
    TeacherScheduler s;
    s.q = q;
    s.max_epochs = max_epochs;
    s.mode = teacher_mode_from_string(mode);
    return select_teacher_index(t, epoch, s, N);
  }, py::arg("t"), py::arg("epoch"), py::arg("q") = 4, py::arg("max_epochs") = 60, py::arg("N") = 10,
     py::arg("mode") = "ECT");

  m.def("c_skip", [](double s) { return c_skip(s); });
  m.def("c_out", [](double s) { return c_out(s); });

  m.def("default_config", [] { return to_py(RunConfig{}.to_json()); });
  m.def("config_hash", [](const py::object& cfg) { return config_from(cfg).hash(); }, py::arg("config"));

  m.def("generate_scenes", [](std::uint64_t seed, const std::string& split, int count) {
    py::list out;
    for (const auto& s : generate_split(seed, split_from(split), count, SceneConfig{})) out.append(to_py(scene_to_json(s)));
    return out;
  }, py::arg("seed"), py::arg("split"), py::arg("count"));

  m.def("fit_codec", [](const Matrix& data, int latent_dim, int epochs, std::uint64_t seed) {
    CodecFitConfig c;
    c.latent_dim = latent_dim;
    c.epochs = epochs;
    c.seed = seed;
    return to_py(fit_codec(data, c).to_json());
  }, py::arg("data"), py::arg("latent_dim") = 10, py::arg("epochs") = 20, py::arg("seed") = 0,
     "Fit a codec on trajectory rows; returns its JSON form.");
  m.def("encode", [](const py::object& codec, const Matrix& x) { return LatentCodec::from_json(from_py(codec)).encode(x); });
  m.def("decode", [](const py::object& codec, const Matrix& z) { return LatentCodec::from_json(from_py(codec)).decode(z); });

  m.def("run_pipeline", [](const py::object& cfg, const std::string& out) {
    const RunConfig c = config_from(cfg);
    PipelineResult r;
    {
      py::gil_scoped_release release;
      r = run_pipeline(c, out);
    }
    json j = r.report.to_json();
    j["config_hash"] = r.config_hash;
    j["checkpoint_hash"] = r.checkpoint_hash;
    j["dir"] = r.dir.string();
    return to_py(j);
  }, py::arg("config"), py::arg("out"), "Data, codec, train, sample, evaluate and plots into `out`.");

  m.def("run_ablation", [](const py::object& cfg, const std::string& axis, const std::string& out) {
    const RunConfig c = config_from(cfg);
    std::vector<AblationRow> rows;
    {
      py::gil_scoped_release release;
      rows = run_ablation(c, axis, out);
    }
    py::list res;
    for (const auto& r : rows) {
      json j = r.report.to_json();
      j["axis"] = r.axis;
      j["variant"] = r.variant;
      j["seed"] = r.seed;
      j["config_hash"] = r.config_hash;
      j["checkpoint_hash"] = r.checkpoint_hash;
      j["evaluations"] = r.evaluations;
      res.append(to_py(j));
    }
    return res;
  }, py::arg("config"), py::arg("axis"), py::arg("out"));

  m.def("evaluate", [](const std::string& predictions, const std::string& scenes, const py::object& cfg) {
    std::ifstream in(predictions);
    if (!in) throw ConfigError("cannot open " + predictions);
    const RunConfig c = config_from(cfg);
    return to_py(evaluate_predictions(read_predictions_jsonl(in), read_scenes_file(scenes), c.metrics).to_json());
  }, py::arg("predictions"), py::arg("scenes"), py::arg("config") = py::none());
}
