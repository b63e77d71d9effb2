#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "fcca/error.hpp"
#include "fcca/pipeline.hpp"

namespace py = pybind11;

namespace {

py::dict prediction_dict(const fcca::Prediction& p) {
  py::dict d;
  d["label"] = p.label;
  d["confidence"] = p.confidence;
  d["p_positive"] = p.p_positive;
  d["raw"] = p.raw;
  return d;
}

py::dict solution_dict(const fcca::CESolution& s) {
  py::dict d;
  d["status"] = s.status == fcca::CEStatus::Optimal ? "optimal" : "infeasible";
  d["x_ce"] = s.x_ce;
  d["cost"] = s.cost;
  d["changed"] = s.changed;
  d["margin"] = s.margin_achieved;
  return d;
}

py::dict metrics_dict(const fcca::DiscretizationMetrics& m) {
  py::dict d;
  d["eta"] = m.eta;
  d["delta"] = m.delta;
  d["distinct_cells"] = m.distinct_cells;
  d["inconsistent"] = m.inconsistent;
  d["n_columns"] = m.n_columns;
  d["dropped"] = m.dropped;
  return d;
}

fcca::TargetParams target_params(const std::string& kind, py::kwargs kw) {
  fcca::RunConfig cfg;
  fcca::apply_option(cfg, "target", kind);
  for (const auto& [k, v] : kw) fcca::apply_option(cfg, py::str(k), py::str(v));
  return cfg.target;
}

}  // namespace

PYBIND11_MODULE(_fcca, m) {
  m.doc() = "Counterfactual-driven discretization and surrogate trees";

  auto base = py::register_exception<fcca::Error>(m, "FccaError");
  py::register_exception<fcca::ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<fcca::DataError>(m, "DataError", base.ptr());
  py::register_exception<fcca::InfeasibleError>(m, "InfeasibleError", base.ptr());

  py::class_<fcca::Dataset>(m, "Dataset")
      .def_readonly("n_rows", &fcca::Dataset::n_rows)
      .def_readonly("n_cols", &fcca::Dataset::n_cols)
      .def_readonly("feature_names", &fcca::Dataset::feature_names)
      .def_readonly("labels", &fcca::Dataset::labels)
      .def_readonly("eps", &fcca::Dataset::eps)
      .def_readonly("warnings", &fcca::Dataset::warnings)
      .def("row", [](const fcca::Dataset& ds, std::size_t i) {
        if (i >= ds.n_rows) throw py::index_error("row index out of range");
        const auto r = ds.row(i);
        return std::vector<double>(r.begin(), r.end());
      })
      .def("__len__", [](const fcca::Dataset& ds) { return ds.n_rows; });

  m.def("load_csv", &fcca::load_csv, py::arg("path"), py::arg("label_column") = std::nullopt);
  m.def(
      "make_synthetic",
      [](const std::string& kind, std::size_t n, std::uint64_t seed) {
        if (kind != "boxes" && kind != "oblique") throw fcca::ConfigError("unknown synthetic dataset '" + kind + "'");
        return fcca::make_synthetic(kind == "boxes" ? fcca::SyntheticKind::Boxes : fcca::SyntheticKind::Oblique, n,
                                    seed);
      },
      py::arg("kind"), py::arg("n") = 400, py::arg("seed") = 0);
  m.def(
      "scale",
      [](const fcca::Dataset& ds) {
        auto s = fcca::scale_minmax(ds);
        s.eps = fcca::compute_feature_eps(s);
        return s;
      },
      "Min-max scaled copy with per-feature resolutions filled in.");

  py::class_<fcca::TargetModel>(m, "TargetModel")
      .def_property_readonly("kind", [](const fcca::TargetModel& t) { return fcca::to_string(t.kind()); })
      .def_readonly("feature_names", &fcca::TargetModel::feature_names)
      .def("predict", [](const fcca::TargetModel& t, const std::vector<double>& x) {
        if (x.size() != t.n_features()) throw fcca::DataError("point has the wrong dimension");
        return prediction_dict(t.predict(x));
      })
      .def("accuracy", &fcca::TargetModel::accuracy)
      .def("to_json", &fcca::model_to_json);
  m.def("model_from_json", &fcca::model_from_json);
  m.def(
      "fit_target",
      [](const fcca::Dataset& ds, const std::string& kind, py::kwargs kw) {
        return fcca::fit_target(ds, target_params(kind, kw));
      },
      py::arg("dataset"), py::arg("kind") = "gb",
      "Fits a target model. Keyword arguments use config key names, e.g. n_estimators=50.");

  m.def(
      "solve_ce",
      [](const fcca::TargetModel& model, const std::vector<double>& x0, const std::vector<double>& eps, double lambda0,
         double lambda1, double lambda2, double margin) {
        if (x0.size() != model.n_features() || eps.size() != x0.size()) {
          throw fcca::DataError("point and resolutions must match the model dimension");
        }
        const auto p = fcca::make_problem(model, x0, eps, {lambda0, lambda1, lambda2}, margin);
        py::gil_scoped_release release;
        const auto s = fcca::solve_ce(model, p);
        py::gil_scoped_acquire acquire;
        return solution_dict(s);
      },
      py::arg("model"), py::arg("x0"), py::arg("eps"), py::arg("lambda0") = 0.1, py::arg("lambda1") = 1.0,
      py::arg("lambda2") = 0.0, py::arg("margin") = 1e-4);

  py::class_<fcca::ThresholdBag>(m, "ThresholdBag")
      .def_readonly("per_feature", &fcca::ThresholdBag::per_feature)
      .def_readonly("n_couples", &fcca::ThresholdBag::n_couples)
      .def_property_readonly("n_distinct", &fcca::ThresholdBag::n_distinct)
      .def_property_readonly("total", &fcca::ThresholdBag::total);
  m.def(
      "extract_thresholds",
      [](const std::vector<std::pair<std::vector<double>, std::vector<double>>>& couples,
         const std::vector<double>& eps) {
        std::vector<fcca::Couple> cs;
        for (const auto& [a, b] : couples) {
          if (a.size() != eps.size() || b.size() != eps.size()) throw fcca::DataError("couple dimension mismatch");
          cs.push_back({a, b});
        }
        return fcca::extract_thresholds(cs, eps);
      },
      py::arg("couples"), py::arg("eps"));
  m.def(
      "select_quantile",
      [](const fcca::ThresholdBag& bag, double q) {
        const auto s = fcca::select_quantile(bag, q);
        py::dict d;
        d["q"] = s.q;
        d["f_q"] = s.f_q;
        d["tau"] = s.tau;
        return d;
      },
      py::arg("bag"), py::arg("q") = 0.0);

  py::class_<fcca::BinDataset>(m, "BinDataset")
      .def_readonly("n_rows", &fcca::BinDataset::n_rows)
      .def_readonly("n_cols", &fcca::BinDataset::n_cols)
      .def_readonly("labels", &fcca::BinDataset::labels)
      .def_readonly("dropped", &fcca::BinDataset::dropped)
      .def_property_readonly("column_names",
                             [](const fcca::BinDataset& b) {
                               std::vector<std::string> out;
                               for (std::size_t c = 0; c < b.n_cols; ++c) out.push_back(b.column_name(c));
                               return out;
                             })
      .def("row", [](const fcca::BinDataset& b, std::size_t i) {
        if (i >= b.n_rows) throw py::index_error("row index out of range");
        const auto r = b.row(i);
        return std::vector<int>(r.begin(), r.end());
      });
  m.def("binarize", [](const fcca::Dataset& ds, const std::vector<std::vector<double>>& tau) {
    if (tau.size() != ds.n_cols) throw fcca::DataError("one threshold list per feature is required");
    return fcca::binarize(ds, fcca::selection_from(tau));
  });
  m.def("metrics", [](const fcca::BinDataset& b) { return metrics_dict(fcca::metrics(b)); });

  py::class_<fcca::SurrogateTree>(m, "SurrogateTree")
      .def_readonly("objective", &fcca::SurrogateTree::objective)
      .def_readonly("certified_optimal", &fcca::SurrogateTree::certified_optimal)
      .def_property_readonly("depth", &fcca::SurrogateTree::depth)
      .def_property_readonly("n_leaves", &fcca::SurrogateTree::n_leaves)
      .def_property_readonly("n_features_used", &fcca::SurrogateTree::n_features_used)
      .def("accuracy", [](const fcca::SurrogateTree& t, const fcca::BinDataset& b) { return fcca::evaluate(t, b).accuracy; })
      .def("to_json", [](const fcca::SurrogateTree& t) { return fcca::tree_to_json(t); })
      .def("__str__", &fcca::render_text);
  m.def(
      "train_optimal",
      [](const fcca::BinDataset& b, int depth, double lambda_reg) {
        py::gil_scoped_release release;
        return fcca::train_optimal(b, {depth, lambda_reg});
      },
      py::arg("data"), py::arg("depth") = 3, py::arg("lambda_reg") = 0.0);
  m.def(
      "train_cart", [](const fcca::BinDataset& b, int depth) { return fcca::train_cart(b, depth); }, py::arg("data"),
      py::arg("depth") = 3);

  m.def("tree_objective", &fcca::tree_objective, py::arg("tree"), py::arg("data"), py::arg("lambda_reg"),
        "Misclassification rate plus lambda_reg per leaf on `data`.");

  m.def(
      "run_json",
      [](const std::string& mode, const std::map<std::string, std::string>& options) {
        fcca::RunConfig cfg;
        cfg.write_artifacts = false;
        for (const auto& [k, v] : options) fcca::apply_option(cfg, k, v);
        fcca::validate(cfg);
        py::gil_scoped_release release;
        fcca::RunReport r;
        if (mode == "run") {
          r = fcca::run_fcca(cfg);
        } else if (mode == "sweep-q") {
          r = fcca::sweep_q(cfg);
        } else if (mode == "gtre") {
          r = fcca::gtre_baseline(cfg);
        } else {
          throw fcca::ConfigError("unknown mode '" + mode + "'");
        }
        if (!cfg.out_dir.empty()) fcca::write_report(r);
        return fcca::report_to_json(r);
      },
      py::arg("mode"), py::arg("options"));
}
