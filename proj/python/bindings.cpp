#include "ttac/bench.hpp"
#include "ttac/engine.hpp"
#include "ttac/serialization.hpp"
#include "ttac/source_model.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <optional>
#include <string>

namespace py = pybind11;
using namespace ttac;

namespace {

nlohmann::json parse(const std::string& text) {
  return text.empty() ? nlohmann::json::object() : nlohmann::json::parse(text);
}

Dataset dataset(const Matrix& inputs, std::vector<int> labels) {
  if (labels.empty()) labels.assign(static_cast<std::size_t>(inputs.rows()), -1);
  return {inputs, std::move(labels)};
}

py::dict dataset_dict(const Dataset& d) {
  py::dict out;
  out["inputs"] = d.inputs;
  out["labels"] = d.labels;
  return out;
}

}  // namespace

PYBIND11_MODULE(_ttac, m) {
  m.doc() = "Streaming test-time adaptation with anchored clustering";

  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<DecompositionError>(m, "DecompositionError", PyExc_ArithmeticError);

  py::class_<ModelParams>(m, "Model")
      .def_static(
          "init",
          [](int input_dim, std::vector<int> hidden, int feature_dim, int num_classes,
             std::uint64_t seed) {
            return ModelParams::init({input_dim, std::move(hidden), feature_dim, num_classes}, seed);
          },
          py::arg("input_dim"), py::arg("hidden"), py::arg("feature_dim"), py::arg("num_classes"),
          py::arg("seed") = 0)
      .def_static("load", &load_model, py::arg("path"))
      .def_static("from_json", [](const std::string& s) { return model_from_json(parse(s)); })
      .def("save", [](const ModelParams& p, const std::filesystem::path& path) { save_model(p, path); })
      .def("to_json", [](const ModelParams& p) { return model_to_json(p).dump(); })
      .def_property_readonly("input_dim", &ModelParams::input_dim)
      .def_property_readonly("feature_dim", &ModelParams::feature_dim)
      .def_property_readonly("num_classes", &ModelParams::num_classes)
      .def_property_readonly("classifier", [](const ModelParams& p) { return p.classifier; })
      .def(
          "forward",
          [](const ModelParams& p, const Matrix& x) {
            const ForwardTrace tr = forward(p, x);
            py::dict out;
            out["features"] = tr.features();
            out["logits"] = tr.logits;
            out["posteriors"] = tr.posteriors;
            return out;
          },
          py::arg("inputs"))
      .def(
          "predict", [](const ModelParams& p, const Matrix& x) { return argmax_rows(forward(p, x).posteriors); },
          py::arg("inputs"));

  py::class_<SourceBank>(m, "SourceBank")
      .def_static("load", &load_source_bank, py::arg("path"))
      .def_static("from_json", [](const std::string& s) { return source_bank_from_json(parse(s)); })
      .def("save", [](const SourceBank& b, const std::filesystem::path& path) { save_source_bank(b, path); })
      .def("to_json", [](const SourceBank& b) { return source_bank_to_json(b).dump(); })
      .def_property_readonly("provenance", [](const SourceBank& b) { return to_string(b.provenance); })
      .def_property_readonly("num_classes", &SourceBank::num_classes)
      .def_property_readonly("dim", &SourceBank::dim)
      .def_property_readonly("means",
                             [](const SourceBank& b) {
                               std::vector<Vector> out;
                               for (const auto& c : b.classes) out.push_back(c.mean);
                               return out;
                             })
      .def_property_readonly("covariances",
                             [](const SourceBank& b) {
                               std::vector<Matrix> out;
                               for (const auto& c : b.classes) out.push_back(c.cov);
                               return out;
                             })
      .def_property_readonly("global_mean", [](const SourceBank& b) { return b.global.mean; })
      .def_property_readonly("global_cov", [](const SourceBank& b) { return b.global.cov; });

  py::class_<StreamReport>(m, "StreamReport")
      .def_readonly("method", &StreamReport::method)
      .def_readonly("protocol", &StreamReport::protocol)
      .def_readonly("cumulative_error", &StreamReport::cumulative_error)
      .def_property_readonly("final_error", &StreamReport::final_error)
      .def_property_readonly("mean_accept_rate", &StreamReport::mean_accept_rate)
      .def_property_readonly("labels",
                             [](const StreamReport& r) {
                               std::vector<int> out;
                               for (const auto& p : r.predictions) out.push_back(p.label);
                               return out;
                             })
      .def("to_json", [](const StreamReport& r) { return r.to_json().dump(); })
      .def("write", &StreamReport::write, py::arg("out_dir"))
      .def("same_outcome", &StreamReport::same_outcome);

  m.def("gaussian_kl",
        [](const Vector& mp, const Matrix& cp, const Vector& mq, const Matrix& cq) {
          return gaussian_kl({mp, cp}, {mq, cq});
        },
        py::arg("mean_p"), py::arg("cov_p"), py::arg("mean_q"), py::arg("cov_q"));
  m.def("batch_moments",
        [](const Matrix& x) {
          const GaussianStats g = batch_moments(x);
          return py::make_tuple(g.mean, g.cov);
        },
        py::arg("features"));

  m.def("estimate_source_stats",
        [](const Matrix& features, const std::vector<int>& labels, int num_classes) {
          return estimate_source_stats(features, labels, num_classes);
        },
        py::arg("features"), py::arg("labels"), py::arg("num_classes"));
  m.def("infer_source_bank",
        [](const ModelParams& model, std::uint64_t seed, int max_iterations) {
          InferConfig cfg;
          cfg.seed = seed;
          cfg.max_iterations = max_iterations;
          return infer_source_bank(model, cfg);
        },
        py::arg("model"), py::arg("seed") = 0, py::arg("max_iterations") = InferConfig{}.max_iterations);

  m.def("default_config", [] { return config_to_json(default_protocol_config()).dump(); });
  m.def("run",
        [](const std::string& method, const std::string& config_json, const ModelParams& model,
           const Matrix& inputs, std::vector<int> labels, std::optional<SourceBank> source) {
          const ProtocolConfig cfg = config_from_json(parse(config_json), default_protocol_config());
          py::gil_scoped_release release;
          return run_method(method_from_string(method), cfg, source, model, {inputs, std::move(labels)});
        },
        py::arg("method"), py::arg("config"), py::arg("model"), py::arg("inputs"),
        py::arg("labels") = std::vector<int>{}, py::arg("source") = std::nullopt);

  m.def("generate_domain",
        [](const std::string& spec_json) {
          const DomainData d = generate_domain(spec_from_json(parse(spec_json)));
          py::dict out;
          out["source_train"] = dataset_dict(d.source_train);
          out["source_val"] = dataset_dict(d.source_val);
          out["target"] = dataset_dict(d.target);
          return out;
        },
        py::arg("spec") = "");
  m.def("train_source",
        [](const Matrix& train_x, std::vector<int> train_y, const Matrix& val_x, std::vector<int> val_y,
           int epochs, double lr, std::uint64_t seed) {
          TrainConfig cfg;
          cfg.epochs = epochs;
          cfg.lr = lr;
          cfg.seed = seed;
          TrainedSource s = train_source(cfg, dataset(train_x, std::move(train_y)),
                                         dataset(val_x, std::move(val_y)));
          return py::make_tuple(std::move(s.model), std::move(s.bank), s.val_accuracy);
        },
        py::arg("train_inputs"), py::arg("train_labels"), py::arg("val_inputs"), py::arg("val_labels"),
        py::arg("epochs") = TrainConfig{}.epochs, py::arg("lr") = TrainConfig{}.lr, py::arg("seed") = 0);
  m.def("run_grid",
        [](const std::string& grid_json, const std::filesystem::path& out_dir) {
          const auto rows = run_grid(grid_from_json(parse(grid_json)), out_dir);
          write_report(out_dir);
          return rows.size();
        },
        py::arg("grid"), py::arg("out_dir"));
}
