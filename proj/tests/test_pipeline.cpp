#include <cmath>
#include <filesystem>
#include <sstream>

#include "doctest.h"
#include "fcca/error.hpp"
#include "fcca/pipeline.hpp"
#include "json.hpp"
#include "oracles.hpp"

using namespace fcca;
using json = nlohmann::ordered_json;

namespace {

// One feature; p_positive = sigmoid(raw) where raw is -l or +r on either side of 0.5.
TargetModel stump_target(double left, double right) {
  Ensemble e;
  e.kind = EnsembleKind::GradientBoosting;
  e.n_features = 1;
  e.learning_rate = 1.0;
  e.trees.push_back(oracle::stump(0, 0.5, left, right));
  TargetModel m;
  m.body = e;
  m.feature_names = {"x"};
  return m;
}

Dataset one_column(const std::vector<double>& x, const std::vector<int>& y) {
  Dataset ds;
  ds.n_rows = x.size();
  ds.n_cols = 1;
  ds.values = x;
  ds.labels = y;
  ds.feature_names = {"x"};
  return ds;
}

RunConfig small_config(const std::string& dataset) {
  RunConfig cfg;
  cfg.dataset = dataset;
  cfg.target.gb.n_estimators = 30;
  cfg.folds = 3;
  cfg.q_list = {0.0, 0.5};
  cfg.write_artifacts = false;
  return cfg;
}

}  // namespace

TEST_SUITE("pipeline") {
  TEST_CASE("config parsing") {
    std::istringstream in(
        "# comment\n[model]\ntarget = rf\nrf_trees = 20\n\n[search]\n; comment\nlambda0 = 0.3\nq = 0, 0.5,0.9\n"
        "dataset = data.csv\n");
    const auto cfg = parse_config(in);
    CHECK(cfg.target.kind == TargetKind::RandomForest);
    CHECK(cfg.target.rf.n_trees == 20);
    CHECK(cfg.weights.l0 == 0.3);
    CHECK(cfg.q_list == std::vector<double>{0.0, 0.5, 0.9});
    CHECK(cfg.dataset == "data.csv");

    std::istringstream bad("colour = blue\n");
    CHECK_THROWS_AS(parse_config(bad), ConfigError);
    std::istringstream bad_value("depth = three\n");
    CHECK_THROWS_AS(parse_config(bad_value), ConfigError);
    CHECK_THROWS_AS(load_config("/nonexistent/fcca.ini"), ConfigError);
  }

  TEST_CASE("config validation") {
    RunConfig cfg;
    cfg.dataset = "x.csv";
    CHECK_NOTHROW(validate(cfg));
    auto c = cfg;
    c.p0 = 0.4;
    CHECK_THROWS_AS(validate(c), ConfigError);
    c = cfg;
    c.p0 = 0.9;
    c.p1 = 0.8;
    CHECK_THROWS_AS(validate(c), ConfigError);
    c = cfg;
    c.depth = 5;
    CHECK_THROWS_AS(validate(c), ConfigError);
    c = cfg;
    c.folds = 1;
    CHECK_THROWS_AS(validate(c), ConfigError);
    c = cfg;
    c.weights.l1 = -1;
    CHECK_THROWS_AS(validate(c), ConfigError);
    c = cfg;
    c.q_list = {1.2};
    CHECK_THROWS_AS(validate(c), ConfigError);
    CHECK(default_q_grid().size() == 10);
  }

  TEST_CASE("M selection by confidence and correctness") {
    const double raw = std::log(0.6 / 0.4);
    const auto model = stump_target(-std::log(0.9 / 0.1), raw);
    // Row 0: confidence 0.6, correct. Row 1: confidence 0.9, correct. Row 2: 0.6, wrong.
    const auto ds = one_column({0.8, 0.2, 0.7}, {1, 0, 0});
    CHECK(select_m(ds, model, 0.5, 0.7) == std::vector<std::size_t>{0});
    CHECK(select_m(ds, model, 0.5, 1.0) == std::vector<std::size_t>{0, 1});
    CHECK_THROWS_AS(select_m(ds, model, 0.95, 1.0), InfeasibleError);
  }

  TEST_CASE("mean and sample standard deviation") {
    const auto s = mean_std({1.0, 2.0, 3.0, 4.0});
    CHECK(s.mean == 2.5);
    CHECK(s.std == doctest::Approx(std::sqrt(5.0 / 3.0)));
    CHECK(mean_std({7.0}).std == 0.0);
  }

  TEST_CASE("synthetic run is deterministic and internally consistent") {
    const auto cfg = small_config("synthetic:boxes:240");
    const auto a = run_fcca(cfg);
    const auto b = run_fcca(cfg);
    const auto ja = report_to_json(a);
    CHECK(ja == report_to_json(b));
    auto c4 = cfg;
    c4.threads = 4;
    CHECK(ja == report_to_json(run_fcca(c4)));

    const auto doc = json::parse(ja);
    CHECK(doc["version"] == "fcca-report-v1");
    REQUIRE(doc["folds"].size() == 3);
    std::vector<double> tacc;
    for (const auto& f : a.folds) {
      CHECK(f.ce_valid == f.ce_optimal);
      CHECK(f.m_size == f.ce_optimal + f.ce_infeasible);
      REQUIRE(f.per_q.size() == 2);
      CHECK(f.per_q[1].train_metrics.eta >= f.per_q[0].train_metrics.eta);
      CHECK(f.per_q[1].train_metrics.delta >= f.per_q[0].train_metrics.delta);
      for (const auto& q : f.per_q) {
        CHECK(q.dominance);
        CHECK(q.ceiling_ok);
        CHECK(q.majority_attains);
        CHECK(q.batch_hash == f.batch_hash);
        for (const double acc : {q.cart.train_accuracy, q.cart.test_accuracy, q.optimal.train_accuracy,
                                 q.optimal.test_accuracy}) {
          CHECK(acc >= 0.0);
          CHECK(acc <= 1.0);
        }
      }
      REQUIRE(f.gtre.has_value());
      CHECK(f.gtre->kept_thresholds <= f.gtre->initial_thresholds);
      CHECK(f.gtre->jaccard >= 0.0);
      CHECK(f.gtre->jaccard <= 1.0);
      tacc.push_back(f.per_q[0].optimal.test_accuracy);
    }
    const double mean = doc["aggregate"]["per_q"][0]["optimal"]["test_accuracy"]["mean"];
    CHECK(std::abs(mean - mean_std(tacc).mean) <= 1e-12);
    CHECK(ja.find("seconds") == std::string::npos);
  }

  TEST_CASE("sweep reuses one counterfactual batch per fold") {
    auto cfg = small_config("synthetic:oblique:200");
    cfg.q_list = {0.0};
    cfg.gtre = false;
    const auto r = sweep_q(cfg);
    REQUIRE(r.folds.size() == 3);
    for (const auto& f : r.folds) {
      REQUIRE(f.per_q.size() == 10);
      for (std::size_t k = 1; k < f.per_q.size(); ++k) {
        CHECK(f.per_q[k].train_metrics.eta >= f.per_q[k - 1].train_metrics.eta);
        CHECK(f.per_q[k].train_metrics.delta >= f.per_q[k - 1].train_metrics.delta);
        CHECK(f.per_q[k].batch_hash == f.batch_hash);
      }
      CHECK_FALSE(f.gtre.has_value());
    }
  }

  TEST_CASE("artifacts are written per fold") {
    auto cfg = small_config("synthetic:boxes:150");
    cfg.fold = 1;
    cfg.write_artifacts = true;
    cfg.out_dir = std::filesystem::temp_directory_path() / "fcca_pipeline_artifacts";
    std::filesystem::remove_all(cfg.out_dir);
    const auto r = run_fcca(cfg);
    write_report(r);
    REQUIRE(r.folds.size() == 1);
    CHECK(r.folds[0].fold == 1);
    for (const char* f : {"report.json", "timings.json", "tradeoff.csv", "folds.csv", "fold_1/model.json",
                          "fold_1/counterfactuals.csv", "fold_1/thresholds.json", "fold_1/heatmap.csv",
                          "fold_1/q_0.00/train.csv", "fold_1/q_0.00/test.csv", "fold_1/q_0.00/tree_optimal.json",
                          "fold_1/q_0.50/metrics.json"}) {
      CHECK_MESSAGE(std::filesystem::exists(cfg.out_dir / f), f);
    }
    const auto model = load_model(cfg.out_dir / "fold_1/model.json");
    const auto ces = read_ce_csv(cfg.out_dir / "fold_1/counterfactuals.csv", model.n_features());
    CHECK(ces.size() == r.folds[0].m_size);
    std::filesystem::remove_all(cfg.out_dir);
  }

  TEST_CASE("unknown datasets are data errors") {
    CHECK_THROWS_AS(run_fcca(small_config("/nonexistent/data.csv")), DataError);
    CHECK_THROWS_AS(run_fcca(small_config("synthetic:spirals")), ConfigError);
  }
}
