// Command-line front end for the FCCA library.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fcca/error.hpp"
#include "fcca/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

// Flags shared by every subcommand. Values are kept as text and applied on
// top of the config file with the same spelling as config keys.
struct CommonFlags {
  std::string config;
  std::map<std::string, std::string> values;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config, "Config file (key = value lines)");
  const std::vector<std::pair<std::string, std::string>> keys = {
      {"--dataset", "dataset"},     {"--label-column", "label_column"},
      {"--seed", "seed"},           {"--out", "out"},
      {"--target", "target"},       {"--p0", "p0"},
      {"--p1", "p1"},               {"--lambda0", "lambda0"},
      {"--lambda1", "lambda1"},     {"--lambda2", "lambda2"},
      {"--depth", "depth"},         {"--folds", "folds"},
      {"--q", "q"},                 {"--threads", "threads"},
      {"--lambda-reg", "lambda_reg"}, {"--eps", "eps"},
      {"--fold", "fold"},           {"--cap", "cap"},
  };
  for (const auto& [flag, key] : keys) {
    cmd->add_option_function<std::string>(
        flag, [&flags, key = key](const std::string& v) { flags.values[key] = v; }, "Overrides config key '" + key + "'");
  }
  cmd->add_option_function<std::vector<std::string>>(
      "--set",
      [&flags](const std::vector<std::string>& kvs) {
        for (const auto& kv : kvs) {
          const auto eq = kv.find('=');
          if (eq == std::string::npos) throw fcca::ConfigError("--set expects key=value, got '" + kv + "'");
          flags.values[kv.substr(0, eq)] = kv.substr(eq + 1);
        }
      },
      "Any config key as key=value");
}

fcca::RunConfig build_config(const CommonFlags& flags, bool needs_dataset) {
  fcca::RunConfig cfg;
  if (!flags.config.empty()) cfg = fcca::load_config(flags.config);
  for (const auto& [k, v] : flags.values) fcca::apply_option(cfg, k, v);
  if (cfg.out_dir.empty()) cfg.out_dir = "fcca_out";
  if (!needs_dataset && cfg.dataset.empty()) cfg.dataset = "-";
  fcca::validate(cfg);
  return cfg;
}

fcca::Dataset scaled_dataset(const fcca::RunConfig& cfg) {
  const auto raw = fcca::load_dataset(cfg);
  for (const auto& w : raw.warnings) std::cerr << "warning: " << w << '\n';
  return fcca::scale_minmax(raw);
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw fcca::DataError("cannot open " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) throw fcca::DataError("cannot write " + p.string());
  out << text << '\n';
}

void cmd_fit_target(const fcca::RunConfig& cfg) {
  const auto ds = scaled_dataset(cfg);
  auto params = cfg.target;
  params.gb.seed = params.rf.seed = params.linear.seed = cfg.seed;
  const auto model = fcca::fit_target(ds, params);
  fs::create_directories(cfg.out_dir);
  fcca::save_model(cfg.out_dir / "model.json", model);
  std::cout << "target " << fcca::to_string(cfg.target.kind) << " training accuracy "
            << model.accuracy(ds) << "\nwrote " << (cfg.out_dir / "model.json").string() << '\n';
}

void cmd_counterfactuals(const fcca::RunConfig& cfg, const fs::path& model_path) {
  const auto ds = scaled_dataset(cfg);
  const auto model = fcca::load_model(model_path.empty() ? cfg.out_dir / "model.json" : model_path);
  const auto eps = cfg.eps ? std::vector<double>(ds.n_cols, *cfg.eps) : fcca::compute_feature_eps(ds);
  const auto rows = fcca::select_m(ds, model, cfg.p0, cfg.p1);
  std::vector<fcca::CEProblem> problems;
  for (const auto i : rows) problems.push_back(fcca::make_problem(model, ds.row(i), eps, cfg.weights, cfg.margin));
  const auto sols = fcca::solve_batch(model, problems, cfg.threads);
  fs::create_directories(cfg.out_dir);
  fcca::write_ce_csv(cfg.out_dir / "counterfactuals.csv", model, rows, sols);
  std::size_t infeasible = 0;
  for (const auto& s : sols) infeasible += s.status == fcca::CEStatus::Infeasible ? 1 : 0;
  std::cout << "|M| = " << rows.size() << ", infeasible " << infeasible << "\nwrote "
            << (cfg.out_dir / "counterfactuals.csv").string() << '\n';
}

void cmd_thresholds(const fcca::RunConfig& cfg, const fs::path& ce_path) {
  const auto ds = scaled_dataset(cfg);
  const auto eps = cfg.eps ? std::vector<double>(ds.n_cols, *cfg.eps) : fcca::compute_feature_eps(ds);
  const auto records = fcca::read_ce_csv(ce_path.empty() ? cfg.out_dir / "counterfactuals.csv" : ce_path, ds.n_cols);
  std::vector<fcca::Couple> couples;
  for (const auto& r : records) {
    if (!r.optimal) continue;
    if (r.row >= ds.n_rows) throw fcca::DataError("counterfactual refers to row " + std::to_string(r.row));
    const auto x0 = ds.row(r.row);
    couples.push_back({{x0.begin(), x0.end()}, r.x_ce});
  }
  const auto bag = fcca::extract_thresholds(couples, eps);
  fs::create_directories(cfg.out_dir);
  write_file(cfg.out_dir / "thresholds.json", fcca::thresholds_to_json(bag, ds.feature_names, ds.scaler));
  auto levels = fcca::default_q_grid();
  levels.push_back(1.0);
  fcca::write_heatmap_csv(cfg.out_dir / "heatmap.csv", fcca::heatmap(bag, levels), ds.feature_names);
  std::cout << bag.n_distinct() << " distinct thresholds from " << couples.size() << " couples\nwrote "
            << (cfg.out_dir / "thresholds.json").string() << '\n';
}

void cmd_discretize(const fcca::RunConfig& cfg, const fs::path& thr_path) {
  const auto ds = scaled_dataset(cfg);
  const auto bag = fcca::thresholds_from_json(
      read_file(thr_path.empty() ? cfg.out_dir / "thresholds.json" : thr_path), ds.feature_names);
  const auto sel = fcca::select_quantile(bag, cfg.q_list.front());
  const auto bds = fcca::binarize(ds, sel);
  const auto m = fcca::metrics(bds);
  fs::create_directories(cfg.out_dir);
  fcca::write_bin_csv(cfg.out_dir / "binarized.csv", bds);
  write_file(cfg.out_dir / "metrics.json", fcca::metrics_to_json(m, ds.feature_names));
  std::cout << "Q = " << sel.q << ": " << bds.n_cols << " columns, eta " << m.eta << ", delta " << m.delta
            << "\nwrote " << (cfg.out_dir / "binarized.csv").string() << '\n';
}

void cmd_train_tree(const fcca::RunConfig& cfg, const fs::path& data_path) {
  const auto bds = fcca::load_bin_csv(data_path.empty() ? cfg.out_dir / "binarized.csv" : data_path);
  const double lambda = cfg.lambda_reg.value_or(10.0 / static_cast<double>(bds.n_rows));
  const auto opt = fcca::train_optimal(bds, {cfg.depth, lambda, cfg.max_columns});
  const auto cart = fcca::train_cart(bds, cfg.depth);
  fs::create_directories(cfg.out_dir);
  write_file(cfg.out_dir / "tree_optimal.json", fcca::tree_to_json(opt));
  write_file(cfg.out_dir / "tree_cart.json", fcca::tree_to_json(cart));
  const auto e = fcca::evaluate(opt, bds);
  std::cout << fcca::render_text(opt) << "training accuracy " << e.accuracy << ", leaves " << e.n_leaves
            << ", objective " << opt.objective << " (cart " << fcca::tree_objective(cart, bds, lambda) << ")\n";
}

void print_summary(const fcca::RunReport& r) {
  std::vector<double> target;
  for (const auto& f : r.folds) target.push_back(f.target_test_accuracy);
  std::cout << r.dataset_name << ": target test accuracy " << fcca::mean_std(target).mean << '\n';
  for (std::size_t k = 0; k < r.config.q_list.size(); ++k) {
    std::vector<double> eta, delta, acc;
    for (const auto& f : r.folds) {
      eta.push_back(f.per_q[k].train_metrics.eta);
      delta.push_back(f.per_q[k].train_metrics.delta);
      acc.push_back(f.per_q[k].optimal.test_accuracy);
    }
    std::cout << "  Q=" << r.config.q_list[k] << " eta " << fcca::mean_std(eta).mean << " delta "
              << fcca::mean_std(delta).mean << " optimal-tree test accuracy " << fcca::mean_std(acc).mean << '\n';
  }
  std::cout << "wrote " << (r.config.out_dir / "report.json").string() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Counterfactual-based supervised discretization and surrogate trees"};
  app.require_subcommand(1);

  CommonFlags flags;
  fs::path model_path, ce_path, thr_path, data_path;

  auto* fit = app.add_subcommand("fit-target", "Fit the target classifier on the whole dataset");
  auto* ce = app.add_subcommand("counterfactuals", "Counterfactuals for the selected query points");
  ce->add_option("--model", model_path, "Model JSON (default <out>/model.json)");
  auto* thr = app.add_subcommand("thresholds", "Extract thresholds from counterfactuals");
  thr->add_option("--ce", ce_path, "Counterfactual CSV (default <out>/counterfactuals.csv)");
  auto* disc = app.add_subcommand("discretize", "Binarize the dataset at quantile Q");
  disc->add_option("--thresholds", thr_path, "Thresholds JSON (default <out>/thresholds.json)");
  auto* tree = app.add_subcommand("train-tree", "Train optimal and CART trees on a binarized CSV");
  tree->add_option("--data", data_path, "Binarized CSV (default <out>/binarized.csv)");
  auto* run = app.add_subcommand("run", "Full cross-validated pipeline");
  auto* sweep = app.add_subcommand("sweep-q", "Pipeline over a grid of Q values");
  auto* gtre = app.add_subcommand("gtre", "Ensemble-threshold baseline next to FCCA at Q=0");
  for (auto* c : {fit, ce, thr, disc, tree, run, sweep, gtre}) add_common(c, flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const fcca::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  }

  try {
    const auto cfg = build_config(flags, !tree->parsed());
    if (fit->parsed()) {
      cmd_fit_target(cfg);
    } else if (ce->parsed()) {
      cmd_counterfactuals(cfg, model_path);
    } else if (thr->parsed()) {
      cmd_thresholds(cfg, ce_path);
    } else if (disc->parsed()) {
      cmd_discretize(cfg, thr_path);
    } else if (tree->parsed()) {
      cmd_train_tree(cfg, data_path);
    } else {
      const auto report = run->parsed()     ? fcca::run_fcca(cfg)
                          : sweep->parsed() ? fcca::sweep_q(cfg)
                                            : fcca::gtre_baseline(cfg);
      fcca::write_report(report);
      print_summary(report);
    }
  } catch (const fcca::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const fcca::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const fcca::InfeasibleError& e) {
    std::cerr << "infeasible: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
