#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fcca/counterfactual.hpp"
#include "fcca/data.hpp"
#include "fcca/discretize.hpp"
#include "fcca/models.hpp"
#include "fcca/surrogate.hpp"
#include "fcca/thresholds.hpp"

namespace fcca {

struct RunConfig {
  // CSV path, or "synthetic:boxes[:n]" / "synthetic:oblique[:n]".
  std::string dataset;
  std::optional<std::string> label_column;
  TargetParams target;
  double p0 = 0.5;
  double p1 = 1.0;
  CostWeights weights;
  double margin = 1e-4;
  std::vector<double> q_list{0.0};
  int depth = 3;
  // Defaults to 10 / n_train.
  std::optional<double> lambda_reg;
  int folds = 5;
  // Only this fold is run when set.
  std::optional<int> fold;
  std::optional<std::size_t> cap;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir;
  // Replaces the per-feature resolution for every feature.
  std::optional<double> eps;
  unsigned threads = 0;
  bool gtre = true;
  bool gtre_prune = true;
  double gtre_tolerance = 0.01;
  std::size_t max_columns = 1024;
  bool write_artifacts = true;
};

/// Sets one option from its config-file spelling. Throws ConfigError for unknown
/// keys or malformed values.
void apply_option(RunConfig& cfg, const std::string& key, const std::string& value);
/// `key = value` lines; `[section]` headers, blank lines and `#`/`;` comments are ignored.
RunConfig parse_config(std::istream& in, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});
void validate(const RunConfig& cfg);
/// Q grid {0, 0.1, ..., 0.9}.
std::vector<double> default_q_grid();

/// Loads (or generates) the dataset named by `cfg.dataset`, unscaled.
Dataset load_dataset(const RunConfig& cfg);

/// Correctly classified rows whose predicted-label probability lies in [p0, p1].
/// Throws InfeasibleError, with a histogram of those probabilities, when none qualify.
std::vector<std::size_t> select_m(const Dataset& ds, const TargetModel& model, double p0, double p1);

struct Stat {
  double mean = 0.0;
  double std = 0.0;
};

struct TreeSummary {
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::optional<double> external_accuracy;
  double objective = 0.0;
  std::size_t leaves = 0;
  int depth = 0;
  std::size_t features_used = 0;
};

struct QResult {
  double q = 0.0;
  double f_q = 0.0;
  std::size_t n_thresholds = 0;
  std::vector<std::size_t> thresholds_per_feature;
  DiscretizationMetrics train_metrics;
  TreeSummary cart;
  TreeSummary optimal;
  bool dominance = false;          // objective(optimal) <= objective(cart) + 1e-12
  bool ceiling_ok = false;         // both trees within 1 - delta
  bool majority_attains = false;   // per-cell majority reaches 1 - delta exactly
  std::string batch_hash;
};

struct GtreResult {
  std::size_t initial_thresholds = 0;
  std::size_t kept_thresholds = 0;
  double full_refit_accuracy = 0.0;
  double final_refit_accuracy = 0.0;
  std::vector<BinColumn> thresholds;
  DiscretizationMetrics train_metrics;
  TreeSummary cart;
  TreeSummary optimal;
  // Against FCCA at Q = 0 on the same fold.
  double jaccard = 0.0;
  double overlap_fraction = 0.0;  // |GTRE ∩ FCCA| / |GTRE|
};

struct FoldResult {
  int fold = 0;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  double lambda_reg = 0.0;
  double target_train_accuracy = 0.0;
  double target_test_accuracy = 0.0;
  std::optional<double> target_external_accuracy;
  std::size_t m_size = 0;
  std::size_t ce_optimal = 0;
  std::size_t ce_infeasible = 0;
  std::size_t ce_valid = 0;  // optimal solutions whose label flips with the required margin
  std::string batch_hash;
  std::size_t thresholds_distinct = 0;
  std::size_t thresholds_total = 0;
  std::size_t thresholds_discarded = 0;
  DiscretizationMetrics raw_metrics;
  TreeSummary cart_continuous;
  std::vector<QResult> per_q;
  std::optional<GtreResult> gtre;
  std::map<std::string, double> seconds;  // phase timings, kept out of the report
};

struct RunReport {
  std::string dataset_name;
  std::size_t n_rows = 0;
  std::size_t n_features = 0;
  std::vector<std::string> feature_names;
  std::vector<std::string> warnings;
  std::size_t external_rows = 0;
  RunConfig config;
  std::vector<FoldResult> folds;
};

RunReport run_fcca(const RunConfig& cfg);
/// Runs with the GTRE baseline enabled and Q = 0 only.
RunReport gtre_baseline(RunConfig cfg);
/// Runs over cfg.q_list (the default grid when it holds a single value).
RunReport sweep_q(RunConfig cfg);

/// Versioned "fcca-report-v1" document with per-fold values and aggregates.
/// Contains no wall-clock values.
std::string report_to_json(const RunReport& report);
/// Per-phase seconds per fold.
std::string timings_to_json(const RunReport& report);
/// Q, eta, delta, train and test accuracy (means over folds), batch hashes.
void write_tradeoff_csv(const std::filesystem::path& path, const RunReport& report);
/// One row per (fold, Q).
void write_folds_csv(const std::filesystem::path& path, const RunReport& report);
/// report.json, timings.json, tradeoff.csv, folds.csv under cfg.out_dir.
void write_report(const RunReport& report);

Stat mean_std(const std::vector<double>& v);

/// Rows of a counterfactual CSV written by write_ce_csv.
struct CeRecord {
  std::size_t row = 0;
  bool optimal = false;
  std::vector<double> x_ce;
};
std::vector<CeRecord> read_ce_csv(const std::filesystem::path& path, std::size_t n_features);

}  // namespace fcca
