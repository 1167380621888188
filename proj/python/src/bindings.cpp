#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "qalloc/harness.hpp"
#include "qalloc/modelio.hpp"
#include "qalloc/quantizer.hpp"

namespace py = pybind11;
using namespace qalloc;

namespace {

std::vector<Method> methods_from(const std::vector<std::string>& names) {
  std::vector<Method> out;
  for (const auto& n : names) out.push_back(method_from_string(n));
  return out;
}

py::dict profile_dict(const LayerProfile& p) {
  py::dict d;
  d["layer"] = p.layer;
  d["params"] = p.params;
  d["t"] = p.t;
  d["p"] = p.p;
  d["delta_acc"] = p.delta_acc;
  d["b_probe"] = p.b_probe;
  d["k"] = p.k;
  d["degenerate"] = p.degenerate;
  return d;
}

}  // namespace

PYBIND11_MODULE(_qalloc, m) {
  m.doc() = "Per-layer bit-width allocation for uniform weight quantization";
  m.attr("ALPHA") = kAlpha;

  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);

  py::class_<Model>(m, "Model")
      .def_property_readonly("input_shape", &Model::input_shape)
      .def_property_readonly("d", &Model::d)
      .def_property_readonly("num_layers", &Model::num_layers)
      .def("weighted_layers", &Model::weighted_layers)
      .def("layer_sizes", &Model::layer_sizes)
      .def("weights", [](const Model& self, std::size_t i) { return self.layer(i).weights.data; })
      .def("bias", [](const Model& self, std::size_t i) { return self.layer(i).bias.data; })
      .def("__eq__", [](const Model& a, const Model& b) { return a == b; });

  py::class_<Dataset>(m, "Dataset")
      .def("__len__", &Dataset::size)
      .def_readonly("labels", &Dataset::labels)
      .def("__eq__", [](const Dataset& a, const Dataset& b) { return a == b; });

  py::class_<LayerProfile>(m, "LayerProfile")
      .def(py::init<>())
      .def_readwrite("layer", &LayerProfile::layer)
      .def_readwrite("params", &LayerProfile::params)
      .def_readwrite("t", &LayerProfile::t)
      .def_readwrite("p", &LayerProfile::p)
      .def_readwrite("delta_acc", &LayerProfile::delta_acc)
      .def_readwrite("b_probe", &LayerProfile::b_probe)
      .def_readwrite("k", &LayerProfile::k)
      .def_readwrite("degenerate", &LayerProfile::degenerate)
      .def("as_dict", &profile_dict)
      .def("__repr__", [](const LayerProfile& p) {
        return "LayerProfile(layer=" + std::to_string(p.layer) + ", t=" + format_double(p.t) +
               ", p=" + format_double(p.p) + ")";
      });

  py::class_<BitAllocation>(m, "BitAllocation")
      .def_property_readonly("method", [](const BitAllocation& a) { return std::string(to_string(a.method)); })
      .def_readonly("b1", &BitAllocation::b1)
      .def_readonly("b_real", &BitAllocation::b_real)
      .def_readonly("b_int", &BitAllocation::b_int)
      .def_readonly("sizes", &BitAllocation::sizes)
      .def_readonly("saturated", &BitAllocation::saturated)
      .def_readonly("size_bits", &BitAllocation::size_bits);

  py::class_<CurvePoint>(m, "CurvePoint")
      .def_property_readonly("method", [](const CurvePoint& p) { return std::string(to_string(p.method)); })
      .def_readonly("b1", &CurvePoint::b1)
      .def_readonly("variant", &CurvePoint::variant)
      .def_readonly("b_int", &CurvePoint::b_int)
      .def_readonly("size_bits", &CurvePoint::size_bits)
      .def_readonly("size_mb", &CurvePoint::size_mb)
      .def_readonly("top1", &CurvePoint::top1);

  py::class_<Curve>(m, "Curve")
      .def_property_readonly("method", [](const Curve& c) { return std::string(to_string(c.method)); })
      .def_readonly("points", &Curve::points);

  py::class_<MatchedPoint>(m, "MatchedPoint")
      .def_readonly("accuracy", &MatchedPoint::accuracy)
      .def_readonly("size_a", &MatchedPoint::size_a)
      .def_readonly("size_b", &MatchedPoint::size_b)
      .def_readonly("ratio", &MatchedPoint::ratio);

  py::class_<Comparison>(m, "Comparison")
      .def_property_readonly("a", [](const Comparison& c) { return std::string(to_string(c.a)); })
      .def_property_readonly("b", [](const Comparison& c) { return std::string(to_string(c.b)); })
      .def_readonly("points", &Comparison::points)
      .def_readonly("dominance_fraction", &Comparison::dominance_fraction)
      .def_readonly("mean_ratio", &Comparison::mean_ratio)
      .def_readonly("empty", &Comparison::empty);

  // fixtures and files
  m.def("gen_model", [](std::uint64_t seed) { return gen_model(default_fixture_spec(seed)); },
        py::arg("seed") = kDefaultFixtureSeed);
  m.def("gen_dataset", &gen_dataset, py::arg("model"), py::arg("n"), py::arg("seed"));
  m.def("load_model", &load_model, py::arg("path"));
  m.def("save_model", &save_model, py::arg("model"), py::arg("stem"));
  m.def("load_dataset", &load_dataset, py::arg("path"));
  m.def("save_dataset", &save_dataset, py::arg("dataset"), py::arg("stem"));
  m.def("load_profiles", [](const fs::path& p) { return profiles_from_json(read_json(p)); }, py::arg("path"));
  m.def("save_profiles", [](const std::vector<LayerProfile>& ps, const fs::path& p) {
    write_json(p, profiles_to_json(ps));
  }, py::arg("profiles"), py::arg("path"));

  m.def("evaluate_accuracy", [](const Model& model, const Dataset& ds) { return evaluate_accuracy(model, ds); },
        py::arg("model"), py::arg("dataset"));

  // quantizer
  m.def("quantize_uniform",
        [](py::array_t<float, py::array::c_style | py::array::forcecast> w, double bits, double w_min, double w_max) {
          const std::span<const float> in(w.data(), static_cast<std::size_t>(w.size()));
          const auto q = quantize_uniform(in, QuantSpec{bits, w_min, w_max});
          py::array_t<float> out(w.request().shape);
          std::copy(q.begin(), q.end(), out.mutable_data());
          return out;
        },
        py::arg("w"), py::arg("bits"), py::arg("w_min"), py::arg("w_max"));
  m.def("expected_noise_power", &expected_noise_power, py::arg("count"), py::arg("w_min"), py::arg("w_max"),
        py::arg("bits"));
  m.def("quantize_model",
        [](const Model& model, const std::vector<int>& bits) { return quantize_model(model, std::span<const int>(bits)); },
        py::arg("model"), py::arg("bits"));

  // calibration
  m.def("run_pipeline",
        [](const Model& model, const Dataset& ds, double delta_acc, std::uint64_t seed, int b_probe,
           std::size_t last_n) {
          PipelineConfig c;
          c.probe.delta_acc = delta_acc;
          c.probe.seed = seed;
          c.probe.last_n = last_n;
          c.b_probe = b_probe;
          py::gil_scoped_release release;
          return run_pipeline(model, ds, c).profiles;
        },
        py::arg("model"), py::arg("dataset"), py::arg("delta_acc") = 0.0, py::arg("seed") = ProbeConfig{}.seed,
        py::arg("b_probe") = kDefaultProbeBits, py::arg("last_n") = 0);

  // allocation
  m.def("allocate_adaptive",
        [](const std::vector<LayerProfile>& ps, double b1) { return allocate_adaptive(ps, b1); },
        py::arg("profiles"), py::arg("b1"));
  m.def("allocate_sqnr", [](const std::vector<std::size_t>& sizes, double b1) { return allocate_sqnr(sizes, b1); },
        py::arg("sizes"), py::arg("b1"));
  m.def("allocate_equal", [](int bits, const std::vector<std::size_t>& sizes) { return allocate_equal(bits, sizes); },
        py::arg("bits"), py::arg("sizes"));

  // experiments
  m.def("sweep",
        [](const Model& model, const Dataset& ds, const std::vector<LayerProfile>& ps, std::vector<double> b1_values,
           const std::vector<std::string>& methods, std::size_t max_variants, std::optional<int> fc_bits) {
          SweepConfig c;
          c.b1_values = b1_values.empty() ? default_anchor_grid() : std::move(b1_values);
          c.methods = methods_from(methods);
          c.max_variants = max_variants;
          c.fc_bits = fc_bits;
          py::gil_scoped_release release;
          return sweep(model, ds, ps, c);
        },
        py::arg("model"), py::arg("dataset"), py::arg("profiles"), py::arg("b1_values") = std::vector<double>{},
        py::arg("methods") = std::vector<std::string>{"adaptive", "sqnr", "equal"}, py::arg("max_variants") = 16,
        py::arg("fc_bits") = std::nullopt);
  m.def("compare", [](const Curve& a, const Curve& b) { return compare(a, b); }, py::arg("a"), py::arg("b"));
  m.def("curves_to_csv", [](const std::vector<Curve>& cs) { return curves_to_csv(cs); }, py::arg("curves"));
}
