#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "setcon/config.hpp"
#include "setcon/datasets.hpp"
#include "setcon/evaluation.hpp"
#include "setcon/gradient_gate.hpp"
#include "setcon/harness.hpp"
#include "setcon/objectives.hpp"

namespace py = pybind11;
using namespace setcon;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor<double> to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor<double>(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

template <typename T>
py::array_t<T> to_array(const Tensor<T>& t) {
  py::array_t<T> out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.ptr(), t.ptr() + t.size(), out.mutable_data());
  return out;
}

py::dict sequence_dict(const data::VideoSequence& s) {
  py::array_t<std::uint8_t> masks({s.length(), s.height(), s.width()});
  std::copy(s.masks.begin(), s.masks.end(), masks.mutable_data());
  py::list pal;
  for (const auto& c : s.palette) pal.append(py::make_tuple(c.r, c.g, c.b));
  py::dict d;
  d["frames"] = to_array(s.frames);
  d["masks"] = masks;
  d["palette"] = pal;
  d["seed"] = s.seed;
  return d;
}

ExperimentConfig config_from(const py::dict& overrides) {
  auto j = config_to_json(default_config(DatasetKind::gridworld));
  if (overrides.contains("data") && py::dict(overrides["data"]).contains("dataset") &&
      py::str(py::dict(overrides["data"])["dataset"]).cast<std::string>() == "balls")
    j = config_to_json(default_config(DatasetKind::balls));
  auto json_mod = py::module_::import("json");
  j.merge_patch(nlohmann::json::parse(json_mod.attr("dumps")(overrides).cast<std::string>()));
  auto c = config_from_json(j);
  c.validate();
  return c;
}

py::list metrics_list(const std::vector<eval::HeadMetrics>& heads) {
  py::list out;
  for (const auto& h : heads) {
    py::dict d;
    d["head"] = h.head;
    d["mse_mean"] = h.mse.mean;
    d["mse_sem"] = h.mse.sem;
    d["n"] = h.mse.n;
    if (h.ari) {
      d["ari_mean"] = h.ari->mean;
      d["ari_sem"] = h.ari->sem;
    } else {
      d["ari_mean"] = py::none();
      d["ari_sem"] = py::none();
    }
    out.append(d);
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "SetCon core: datasets, losses, metrics and training";

  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<ArgumentError>(m, "ArgumentError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def("palette", [](std::size_t n, double offset) {
    py::list out;
    for (const auto& c : data::palette(n, offset)) out.append(py::make_tuple(c.r, c.g, c.b));
    return out;
  }, py::arg("n"), py::arg("offset"));

  m.def("gridworld_sequence", [](std::uint64_t seed, std::size_t num_colors, std::size_t num_objects) {
    return sequence_dict(data::gridworld_sequence(seed, num_colors, num_objects));
  }, py::arg("seed"), py::arg("num_colors") = 3, py::arg("num_objects") = 3,
     "Frames [8, 5, 5, 3] in [-1, 1], masks [8, 5, 5] (0 = background).");

  m.def("bouncing_balls_sequence", [](std::uint64_t seed, std::size_t resolution, std::size_t frames) {
    data::BallsConfig bc;
    bc.resolution = resolution;
    bc.frames = frames;
    return sequence_dict(data::bouncing_balls_sequence(seed, data::balls_palette(seed), bc));
  }, py::arg("seed"), py::arg("resolution") = 32, py::arg("frames") = 12);

  m.def("gridworld_state_count", &data::gridworld_state_count, py::arg("num_objects"));

  m.def("setcon_loss", [](const Array& zs, const Array& zp, std::size_t batch, std::size_t length, double tau,
                          bool exclude_self) {
    Tape<double> tape;
    objectives::ContrastiveOptions o{tau, exclude_self ? objectives::DenominatorMode::exclude_self
                                                       : objectives::DenominatorMode::literal};
    return objectives::setcon_loss(tape.constant(to_tensor(zs)), tape.constant(to_tensor(zp)), batch, length, o)
        .value()[0];
  }, py::arg("set_slots"), py::arg("set_predictions"), py::arg("batch"), py::arg("length"),
     py::arg("tau") = objectives::kDefaultTemperature, py::arg("exclude_self") = false);

  m.def("slotwise_loss", [](const Array& s, const Array& p, std::size_t batch, std::size_t length,
                            std::size_t num_slots, double tau) {
    Tape<double> tape;
    return objectives::slotwise_loss(tape.constant(to_tensor(s)), tape.constant(to_tensor(p)), batch, length,
                                     num_slots, {tau, objectives::DenominatorMode::literal})
        .value()[0];
  }, py::arg("slots"), py::arg("predictions"), py::arg("batch"), py::arg("length"), py::arg("num_slots"),
     py::arg("tau") = objectives::kDefaultTemperature);

  m.def("adjusted_rand_index", [](const std::vector<int>& truth, const std::vector<int>& pred) {
    return eval::adjusted_rand_index(std::span<const int>(truth), std::span<const int>(pred));
  }, py::arg("truth"), py::arg("predicted"));

  m.def("resolve_lr", &harness::resolve_lr, py::arg("base_lr"), py::arg("batch_size"));

  m.def("train", [](const py::dict& config, const std::filesystem::path& out_dir, std::size_t stop_after) {
    const auto c = config_from(config);
    harness::TrainOptions o{out_dir};
    o.stop_after = stop_after;
    harness::TrainResult r;
    {
      py::gil_scoped_release release;
      r = harness::train(c, o);
    }
    py::dict d;
    d["steps_completed"] = r.steps_completed;
    d["diverged"] = r.diverged;
    d["error"] = r.error;
    d["training_metrics"] = metrics_list(r.training_metrics);
    d["heldout_metrics"] = metrics_list(r.heldout_metrics);
    d["checkpoint"] = r.checkpoint;
    return d;
  }, py::arg("config"), py::arg("out_dir"), py::arg("stop_after") = 0,
     "Train from a nested config dict (missing keys take the dataset defaults).");

  m.def("evaluate", [](const std::filesystem::path& ckpt, std::size_t count) {
    const auto c = harness::checkpoint_config(ckpt);
    std::optional<data::Dataset> ds;
    if (c.data.dataset == DatasetKind::balls) ds = harness::load_dataset(c);
    auto seqs = harness::evaluation_sequences(c, ds ? &*ds : nullptr);
    if (count > 0 && count < seqs.size()) seqs.resize(count);
    return metrics_list(harness::evaluate_checkpoint(ckpt, seqs));
  }, py::arg("checkpoint"), py::arg("count") = 0);

  m.def("rollout_mse", [](const std::filesystem::path& ckpt, std::size_t steps, std::size_t count) {
    const auto c = harness::checkpoint_config(ckpt);
    std::optional<data::Dataset> ds;
    if (c.data.dataset == DatasetKind::balls) ds = harness::load_dataset(c);
    auto seqs = harness::evaluation_sequences(c, ds ? &*ds : nullptr);
    if (count > 0 && count < seqs.size()) seqs.resize(count);
    return harness::rollout_checkpoint(ckpt, seqs, steps).mse;
  }, py::arg("checkpoint"), py::arg("steps") = eval::kMaxRolloutSteps, py::arg("count") = 0);

  m.def("gradient_gate", [](std::size_t trials, bool objectives) {
    gate::GateOptions o;
    o.trials = trials;
    o.objectives = objectives;
    py::list out;
    for (const auto& c : gate::run_gradient_gate(o))
      out.append(py::make_tuple(c.name, c.result.max_rel_error, c.passed));
    return out;
  }, py::arg("trials") = 3, py::arg("objectives") = false,
     "List of (name, max relative error, passed).");
}
