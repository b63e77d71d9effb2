#include "fcca/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <charconv>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "fcca/error.hpp"
#include "json.hpp"

namespace fcca {

namespace {

using json = nlohmann::ordered_json;
using Clock = std::chrono::steady_clock;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (const char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto t = trim(v);
  const auto res = std::from_chars(t.data(), t.data() + t.size(), out);
  if (t.empty() || res.ec != std::errc() || res.ptr != t.data() + t.size() || !std::isfinite(out)) {
    throw ConfigError("option '" + key + "' expects a number, got '" + v + "'");
  }
  return out;
}

long long to_int(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto t = trim(v);
  const auto res = std::from_chars(t.data(), t.data() + t.size(), out);
  if (t.empty() || res.ec != std::errc() || res.ptr != t.data() + t.size()) {
    throw ConfigError("option '" + key + "' expects an integer, got '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  const auto t = trim(v);
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  throw ConfigError("option '" + key + "' expects true or false, got '" + v + "'");
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string hash_solutions(const std::vector<CESolution>& sols) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](std::uint64_t v) {
    for (int b = 0; b < 8; ++b) {
      h ^= (v >> (8 * b)) & 0xffU;
      h *= 1099511628211ULL;
    }
  };
  for (const auto& s : sols) {
    mix(s.status == CEStatus::Optimal ? 1 : 0);
    mix(std::bit_cast<std::uint64_t>(s.cost));
    for (const double v : s.x_ce) mix(std::bit_cast<std::uint64_t>(v));
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

Dataset as_dataset(const BinDataset& b) {
  Dataset d;
  d.n_rows = b.n_rows;
  d.n_cols = b.n_cols;
  d.values.assign(b.bits.begin(), b.bits.end());
  d.labels = b.labels;
  for (std::size_t c = 0; c < b.n_cols; ++c) d.feature_names.push_back(b.column_name(c));
  return d;
}

TreeSummary summarize_tree(const SurrogateTree& tree, const BinDataset& train, const BinDataset& test,
                           const std::optional<BinDataset>& ext, double lambda_reg) {
  TreeSummary s;
  const auto tr = evaluate(tree, train);
  s.train_accuracy = tr.accuracy;
  s.test_accuracy = evaluate(tree, test).accuracy;
  if (ext) s.external_accuracy = evaluate(tree, *ext).accuracy;
  s.objective = tree_objective(tree, train, lambda_reg);
  s.leaves = tr.n_leaves;
  s.depth = tr.depth;
  s.features_used = tr.n_features_used;
  return s;
}

std::string q_dir_name(double q) {
  std::ostringstream os;
  os << "q_" << std::fixed << std::setprecision(2) << q;
  return os.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!text.empty() && text.back() != '\n') out << '\n';
}

using ThresholdKey = std::pair<std::size_t, double>;

std::set<ThresholdKey> key_set(const std::vector<BinColumn>& cols) {
  std::set<ThresholdKey> s;
  for (const auto& c : cols) s.insert({c.feature, round_threshold(c.threshold)});
  return s;
}

// Greedy baseline: thresholds of a boosted ensemble, optionally pruned by
// repeatedly dropping the lowest-gain one while a refit keeps its accuracy.
GtreResult run_gtre(const RunConfig& cfg, const Dataset& train, const Dataset& test,
                    const std::optional<Dataset>& ext, const TargetModel& target, double lambda_reg,
                    const QuantileSelection& fcca_q0, const std::filesystem::path& dir) {
  Ensemble gb;
  if (target.kind() == TargetKind::GradientBoosting) {
    gb = std::get<Ensemble>(target.body);
  } else {
    gb = train_gb(train, cfg.target.gb);
  }
  auto splits = split_thresholds(gb);
  GtreResult r;
  r.initial_thresholds = splits.size();

  auto selection_of = [&](const std::vector<SplitThreshold>& s) {
    std::vector<std::vector<double>> tau(train.n_cols);
    for (const auto& t : s) tau[t.feature].push_back(t.threshold);
    return selection_from(std::move(tau));
  };
  auto refit_accuracy = [&](const std::vector<SplitThreshold>& s) {
    const auto bin = binarize(train, selection_of(s));
    const auto d = as_dataset(bin);
    TargetModel m;
    m.body = train_gb(d, cfg.target.gb);
    return m.accuracy(d);
  };

  r.full_refit_accuracy = refit_accuracy(splits);
  r.final_refit_accuracy = r.full_refit_accuracy;
  if (cfg.gtre_prune) {
    while (splits.size() > 1) {
      // Lowest gain first; ties drop the later (feature, threshold) pair.
      std::size_t drop = 0;
      for (std::size_t k = 1; k < splits.size(); ++k) {
        if (splits[k].gain <= splits[drop].gain) drop = k;
      }
      auto candidate = splits;
      candidate.erase(candidate.begin() + static_cast<std::ptrdiff_t>(drop));
      const double acc = refit_accuracy(candidate);
      if (acc < r.full_refit_accuracy - cfg.gtre_tolerance) break;
      splits = std::move(candidate);
      r.final_refit_accuracy = acc;
    }
  }
  r.kept_thresholds = splits.size();

  const auto sel = selection_of(splits);
  const auto b_train = binarize(train, sel);
  const auto b_test = binarize(test, sel);
  std::optional<BinDataset> b_ext;
  if (ext) b_ext = binarize(*ext, sel);
  r.thresholds = b_train.columns;
  r.train_metrics = metrics(b_train);
  const auto cart = train_cart(b_train, cfg.depth);
  auto opt = train_optimal(b_train, {cfg.depth, lambda_reg, cfg.max_columns});
  r.cart = summarize_tree(cart, b_train, b_test, b_ext, lambda_reg);
  r.optimal = summarize_tree(opt, b_train, b_test, b_ext, lambda_reg);

  std::vector<BinColumn> fcca_cols;
  for (std::size_t j = 0; j < fcca_q0.tau.size(); ++j) {
    for (const double t : fcca_q0.tau[j]) fcca_cols.push_back({j, t});
  }
  const auto a = key_set(r.thresholds);
  const auto b = key_set(fcca_cols);
  std::size_t inter = 0;
  for (const auto& k : a) inter += b.count(k);
  const auto uni = a.size() + b.size() - inter;
  r.jaccard = uni ? static_cast<double>(inter) / static_cast<double>(uni) : 1.0;
  r.overlap_fraction = a.empty() ? 0.0 : static_cast<double>(inter) / static_cast<double>(a.size());

  if (!dir.empty()) {
    write_bin_csv(dir / "gtre_train.csv", b_train);
    write_text(dir / "gtre_tree_optimal.json", tree_to_json(opt, train.scaler));
  }
  return r;
}

FoldResult run_fold(const RunConfig& cfg, const Dataset& scaled, const FoldPlan& plan, int f,
                    unsigned ce_threads) {
  FoldResult r;
  r.fold = f;
  auto t0 = Clock::now();
  const auto tr_idx = plan.train_indices(f);
  const auto te_idx = plan.test_indices(f);
  const Dataset train = subset(scaled, tr_idx);
  const Dataset test = subset(scaled, te_idx);
  std::optional<Dataset> ext;
  if (!plan.external_test.empty()) ext = subset(scaled, plan.external_test);
  r.n_train = train.n_rows;
  r.n_test = test.n_rows;
  r.lambda_reg = cfg.lambda_reg.value_or(10.0 / static_cast<double>(train.n_rows));

  std::filesystem::path dir;
  if (cfg.write_artifacts && !cfg.out_dir.empty()) {
    dir = cfg.out_dir / ("fold_" + std::to_string(f));
    std::filesystem::create_directories(dir);
  }

  std::vector<double> eps = cfg.eps ? std::vector<double>(train.n_cols, *cfg.eps) : compute_feature_eps(train);

  // Target model.
  auto params = cfg.target;
  params.gb.seed = params.rf.seed = params.linear.seed = cfg.seed + static_cast<std::uint64_t>(f);
  const auto model = fit_target(train, params);
  r.target_train_accuracy = model.accuracy(train);
  r.target_test_accuracy = model.accuracy(test);
  if (ext) r.target_external_accuracy = model.accuracy(*ext);
  r.seconds["target"] = seconds_since(t0);

  // Query points and counterfactuals.
  t0 = Clock::now();
  const auto m_rows = select_m(train, model, cfg.p0, cfg.p1);
  r.m_size = m_rows.size();
  std::vector<CEProblem> problems;
  problems.reserve(m_rows.size());
  for (const auto i : m_rows) problems.push_back(make_problem(model, train.row(i), eps, cfg.weights, cfg.margin));
  const auto sols = solve_batch(model, problems, ce_threads);
  r.batch_hash = hash_solutions(sols);
  std::vector<Couple> couples;
  for (std::size_t k = 0; k < sols.size(); ++k) {
    if (sols[k].status != CEStatus::Optimal) {
      ++r.ce_infeasible;
      continue;
    }
    ++r.ce_optimal;
    const auto p = model.predict(sols[k].x_ce);
    bool valid = p.label == problems[k].y_ce;
    if (const auto* e = std::get_if<Ensemble>(&model.body)) {
      valid = valid && class_margin(*e, sols[k].x_ce, problems[k].y0, problems[k].y_ce) >= cfg.margin;
    } else {
      valid = valid && class_margin(std::get<LinearModel>(model.body), sols[k].x_ce, problems[k].y_ce) >= 1.0 - 1e-9;
    }
    r.ce_valid += valid ? 1 : 0;
    couples.push_back({problems[k].x0, sols[k].x_ce});
  }
  r.seconds["counterfactuals"] = seconds_since(t0);

  // Thresholds.
  t0 = Clock::now();
  const auto bag = extract_thresholds(couples, eps);
  r.thresholds_distinct = bag.n_distinct();
  r.thresholds_total = bag.total();
  r.thresholds_discarded = bag.discarded;
  r.raw_metrics = metrics(train);
  r.seconds["thresholds"] = seconds_since(t0);
  if (!dir.empty()) {
    save_model(dir / "model.json", model);
    std::vector<std::size_t> rows;
    for (const auto i : m_rows) rows.push_back(tr_idx[i]);
    write_ce_csv(dir / "counterfactuals.csv", model, rows, sols);
    write_text(dir / "thresholds.json", thresholds_to_json(bag, train.feature_names, train.scaler));
    if (!bag.empty()) {
      std::vector<double> levels = default_q_grid();
      levels.push_back(1.0);
      write_heatmap_csv(dir / "heatmap.csv", heatmap(bag, levels), train.feature_names);
    }
  }

  // Continuous CART baseline.
  {
    const auto cart = train_cart(train, cfg.depth);
    auto& s = r.cart_continuous;
    const auto e = evaluate(cart, train);
    s.train_accuracy = e.accuracy;
    s.test_accuracy = evaluate(cart, test).accuracy;
    if (ext) s.external_accuracy = evaluate(cart, *ext).accuracy;
    s.leaves = e.n_leaves;
    s.depth = e.depth;
    s.features_used = e.n_features_used;
    s.objective = (1.0 - e.accuracy) + r.lambda_reg * static_cast<double>(e.n_leaves);
  }

  // Discretization and surrogate trees per Q.
  t0 = Clock::now();
  double trees_seconds = 0.0;
  for (const double q : cfg.q_list) {
    QResult qr;
    qr.q = q;
    qr.batch_hash = r.batch_hash;
    const auto sel = select_quantile(bag, q);
    qr.f_q = sel.f_q;
    qr.n_thresholds = sel.count();
    for (const auto& t : sel.tau) qr.thresholds_per_feature.push_back(t.size());
    const auto b_train = binarize(train, sel);
    const auto b_test = binarize(test, sel);
    std::optional<BinDataset> b_ext;
    if (ext) b_ext = binarize(*ext, sel);
    qr.train_metrics = metrics(b_train);

    const auto tt = Clock::now();
    const auto cart = train_cart(b_train, cfg.depth);
    const auto opt = train_optimal(b_train, {cfg.depth, r.lambda_reg, cfg.max_columns});
    trees_seconds += seconds_since(tt);
    qr.cart = summarize_tree(cart, b_train, b_test, b_ext, r.lambda_reg);
    qr.optimal = summarize_tree(opt, b_train, b_test, b_ext, r.lambda_reg);
    qr.dominance = qr.optimal.objective <= qr.cart.objective + 1e-12;
    const auto chk_cart = consistency_ceiling_check(b_train, qr.cart.train_accuracy);
    const auto chk_opt = consistency_ceiling_check(b_train, qr.optimal.train_accuracy);
    qr.ceiling_ok = chk_cart.within && chk_opt.within;
    qr.majority_attains = chk_opt.majority_attains;

    if (!dir.empty()) {
      const auto qdir = dir / q_dir_name(q);
      std::filesystem::create_directories(qdir);
      write_bin_csv(qdir / "train.csv", b_train);
      write_bin_csv(qdir / "test.csv", b_test);
      if (b_ext) write_bin_csv(qdir / "external.csv", *b_ext);
      write_text(qdir / "metrics.json", metrics_to_json(qr.train_metrics, train.feature_names));
      write_text(qdir / "thresholds.json", thresholds_to_json(bag, train.feature_names, train.scaler, &sel));
      write_text(qdir / "tree_optimal.json", tree_to_json(opt, train.scaler));
      write_text(qdir / "tree_optimal.txt", render_text(opt));
      write_text(qdir / "tree_cart.json", tree_to_json(cart, train.scaler));
    }
    r.per_q.push_back(std::move(qr));
  }
  r.seconds["discretize"] = seconds_since(t0) - trees_seconds;
  r.seconds["trees"] = trees_seconds;

  if (cfg.gtre) {
    t0 = Clock::now();
    r.gtre = run_gtre(cfg, train, test, ext, model, r.lambda_reg, select_quantile(bag, 0.0), dir);
    r.seconds["gtre"] = seconds_since(t0);
  }
  return r;
}

json stat_json(const std::vector<double>& v) {
  const auto s = mean_std(v);
  return json{{"mean", s.mean}, {"std", s.std}};
}

json tree_json(const TreeSummary& t) {
  json j;
  j["train_accuracy"] = t.train_accuracy;
  j["test_accuracy"] = t.test_accuracy;
  j["external_accuracy"] = t.external_accuracy ? json(*t.external_accuracy) : json(nullptr);
  j["objective"] = t.objective;
  j["leaves"] = t.leaves;
  j["depth"] = t.depth;
  j["features_used"] = t.features_used;
  return j;
}

json metrics_json(const DiscretizationMetrics& m, const std::vector<std::string>& names) {
  json j;
  j["eta"] = m.eta;
  j["delta"] = m.delta;
  j["distinct_cells"] = m.distinct_cells;
  j["inconsistent_rows"] = m.inconsistent;
  j["n_columns"] = m.n_columns;
  json dropped = json::array();
  for (const auto f : m.dropped) dropped.push_back(names.at(f));
  j["dropped_features"] = std::move(dropped);
  return j;
}

json tree_aggregate(const std::vector<const TreeSummary*>& trees) {
  std::vector<double> tr, te, ex, lv, fu;
  for (const auto* t : trees) {
    tr.push_back(t->train_accuracy);
    te.push_back(t->test_accuracy);
    if (t->external_accuracy) ex.push_back(*t->external_accuracy);
    lv.push_back(static_cast<double>(t->leaves));
    fu.push_back(static_cast<double>(t->features_used));
  }
  json j;
  j["train_accuracy"] = stat_json(tr);
  j["test_accuracy"] = stat_json(te);
  j["external_accuracy"] = ex.empty() ? json(nullptr) : stat_json(ex);
  j["leaves"] = stat_json(lv);
  j["features_used"] = stat_json(fu);
  return j;
}

json config_json(const RunConfig& c) {
  json j;
  j["dataset"] = c.dataset;
  j["label_column"] = c.label_column ? json(*c.label_column) : json(nullptr);
  j["target"] = to_string(c.target.kind);
  j["gb"] = {{"n_estimators", c.target.gb.n_estimators},
             {"max_depth", c.target.gb.max_depth},
             {"learning_rate", c.target.gb.learning_rate}};
  j["rf"] = {{"n_trees", c.target.rf.n_trees},
             {"max_depth", c.target.rf.max_depth},
             {"max_features", c.target.rf.max_features}};
  j["linear"] = {{"l2", c.target.linear.l2}, {"epochs", c.target.linear.epochs}};
  j["p0"] = c.p0;
  j["p1"] = c.p1;
  j["lambda0"] = c.weights.l0;
  j["lambda1"] = c.weights.l1;
  j["lambda2"] = c.weights.l2;
  j["margin"] = c.margin;
  j["q"] = c.q_list;
  j["depth"] = c.depth;
  j["lambda_reg"] = c.lambda_reg ? json(*c.lambda_reg) : json("10/n_train");
  j["folds"] = c.folds;
  j["fold"] = c.fold ? json(*c.fold) : json(nullptr);
  j["cap"] = c.cap ? json(*c.cap) : json(nullptr);
  j["seed"] = c.seed;
  j["eps"] = c.eps ? json(*c.eps) : json("per-feature");
  j["gtre"] = c.gtre;
  j["gtre_prune"] = c.gtre_prune;
  j["gtre_tolerance"] = c.gtre_tolerance;
  return j;
}

}  // namespace

std::vector<double> default_q_grid() {
  std::vector<double> g;
  for (int k = 0; k < 10; ++k) g.push_back(static_cast<double>(k) / 10.0);
  return g;
}

void apply_option(RunConfig& cfg, const std::string& key_in, const std::string& value_in) {
  const auto key = trim(key_in);
  const auto value = trim(value_in);
  auto num = [&] { return to_double(key, value); };
  auto integer = [&] { return to_int(key, value); };
  auto positive_int = [&] {
    const auto v = integer();
    if (v < 0) throw ConfigError("option '" + key + "' must be non-negative");
    return v;
  };
  if (key == "dataset") {
    cfg.dataset = value;
  } else if (key == "label_column") {
    cfg.label_column = value;
  } else if (key == "target") {
    cfg.target.kind = parse_target_kind(value);
  } else if (key == "n_estimators") {
    cfg.target.gb.n_estimators = static_cast<int>(integer());
  } else if (key == "learning_rate") {
    cfg.target.gb.learning_rate = num();
  } else if (key == "gb_depth") {
    cfg.target.gb.max_depth = static_cast<int>(integer());
  } else if (key == "rf_trees") {
    cfg.target.rf.n_trees = static_cast<int>(integer());
  } else if (key == "rf_depth") {
    cfg.target.rf.max_depth = static_cast<int>(integer());
  } else if (key == "rf_max_features") {
    cfg.target.rf.max_features = static_cast<int>(positive_int());
  } else if (key == "linear_l2") {
    cfg.target.linear.l2 = num();
  } else if (key == "linear_epochs") {
    cfg.target.linear.epochs = static_cast<int>(integer());
  } else if (key == "p0") {
    cfg.p0 = num();
  } else if (key == "p1") {
    cfg.p1 = num();
  } else if (key == "lambda0") {
    cfg.weights.l0 = num();
  } else if (key == "lambda1") {
    cfg.weights.l1 = num();
  } else if (key == "lambda2") {
    cfg.weights.l2 = num();
  } else if (key == "margin") {
    cfg.margin = num();
  } else if (key == "q") {
    cfg.q_list.clear();
    for (const auto& part : split(value, ',')) cfg.q_list.push_back(to_double(key, part));
  } else if (key == "depth") {
    cfg.depth = static_cast<int>(integer());
  } else if (key == "lambda_reg") {
    cfg.lambda_reg = num();
  } else if (key == "folds") {
    cfg.folds = static_cast<int>(integer());
  } else if (key == "fold") {
    cfg.fold = static_cast<int>(integer());
  } else if (key == "cap") {
    cfg.cap = static_cast<std::size_t>(positive_int());
  } else if (key == "seed") {
    cfg.seed = static_cast<std::uint64_t>(positive_int());
  } else if (key == "out") {
    cfg.out_dir = value;
  } else if (key == "eps") {
    cfg.eps = num();
  } else if (key == "threads") {
    cfg.threads = static_cast<unsigned>(positive_int());
  } else if (key == "gtre") {
    cfg.gtre = to_bool(key, value);
  } else if (key == "gtre_prune") {
    cfg.gtre_prune = to_bool(key, value);
  } else if (key == "gtre_tolerance") {
    cfg.gtre_tolerance = num();
  } else if (key == "max_columns") {
    cfg.max_columns = static_cast<std::size_t>(positive_int());
  } else if (key == "write_artifacts") {
    cfg.write_artifacts = to_bool(key, value);
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

RunConfig parse_config(std::istream& in, RunConfig base) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": malformed section header");
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    }
    apply_option(base, t.substr(0, eq), t.substr(eq + 1));
  }
  return base;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  return parse_config(in, std::move(base));
}

void validate(const RunConfig& cfg) {
  if (cfg.dataset.empty()) throw ConfigError("no dataset given");
  if (!(0.5 <= cfg.p0 && cfg.p0 <= cfg.p1 && cfg.p1 <= 1.0)) {
    throw ConfigError("probability bounds must satisfy 0.5 <= p0 <= p1 <= 1");
  }
  if (cfg.weights.l0 < 0.0 || cfg.weights.l1 < 0.0 || cfg.weights.l2 < 0.0) {
    throw ConfigError("lambda0, lambda1 and lambda2 must be non-negative");
  }
  if (!(cfg.margin > 0.0)) throw ConfigError("margin must be positive");
  if (cfg.q_list.empty()) throw ConfigError("at least one Q value is required");
  for (const double q : cfg.q_list) {
    if (!(q >= 0.0 && q <= 1.0)) throw ConfigError("Q values must lie in [0,1]");
  }
  if (cfg.depth < 1 || cfg.depth > 4) throw ConfigError("surrogate depth must be between 1 and 4");
  if (cfg.lambda_reg && *cfg.lambda_reg < 0.0) throw ConfigError("lambda_reg must be non-negative");
  if (cfg.folds < 2) throw ConfigError("at least 2 folds are required");
  if (cfg.fold && (*cfg.fold < 0 || *cfg.fold >= cfg.folds)) throw ConfigError("fold index out of range");
  if (cfg.eps && !(*cfg.eps > 0.0)) throw ConfigError("eps must be positive");
  if (cfg.gtre_tolerance < 0.0) throw ConfigError("gtre_tolerance must be non-negative");
  if (cfg.target.gb.n_estimators < 1 || cfg.target.gb.max_depth < 1 || !(cfg.target.gb.learning_rate > 0.0)) {
    throw ConfigError("invalid gradient boosting parameters");
  }
  if (cfg.target.rf.n_trees < 1 || cfg.target.rf.max_depth < 1) throw ConfigError("invalid random forest parameters");
  if (cfg.target.linear.epochs < 1 || cfg.target.linear.l2 < 0.0) throw ConfigError("invalid linear model parameters");
}

Dataset load_dataset(const RunConfig& cfg) {
  const std::string prefix = "synthetic:";
  if (cfg.dataset.rfind(prefix, 0) == 0) {
    const auto parts = split(cfg.dataset.substr(prefix.size()), ':');
    SyntheticKind kind;
    if (parts[0] == "boxes") {
      kind = SyntheticKind::Boxes;
    } else if (parts[0] == "oblique") {
      kind = SyntheticKind::Oblique;
    } else {
      throw ConfigError("unknown synthetic dataset '" + parts[0] + "'");
    }
    std::size_t n = 400;
    if (parts.size() > 1) {
      const auto v = to_int("dataset", parts[1]);
      if (v < 10) throw ConfigError("synthetic datasets need at least 10 rows");
      n = static_cast<std::size_t>(v);
    }
    return make_synthetic(kind, n, cfg.seed);
  }
  return load_csv(cfg.dataset, cfg.label_column);
}

std::vector<std::size_t> select_m(const Dataset& ds, const TargetModel& model, double p0, double p1) {
  std::vector<std::size_t> m;
  std::array<std::size_t, 10> hist{};
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < ds.n_rows; ++i) {
    const auto p = model.predict(ds.row(i));
    if (p.label != ds.labels[i]) {
      ++wrong;
      continue;
    }
    const auto bin = std::min<std::size_t>(9, static_cast<std::size_t>((p.confidence - 0.5) / 0.05));
    ++hist[bin];
    if (p0 <= p.confidence && p.confidence <= p1) m.push_back(i);
  }
  if (m.empty()) {
    std::ostringstream os;
    os << "no query points: M is empty for p0=" << p0 << ", p1=" << p1 << " (" << wrong
       << " misclassified rows); probability histogram of correctly classified rows:";
    for (std::size_t b = 0; b < hist.size(); ++b) {
      os << ' ' << std::fixed << std::setprecision(2) << 0.5 + 0.05 * static_cast<double>(b) << "-"
         << 0.55 + 0.05 * static_cast<double>(b) << ':' << hist[b];
    }
    throw InfeasibleError(os.str());
  }
  return m;
}

Stat mean_std(const std::vector<double>& v) {
  Stat s;
  if (v.empty()) return s;
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (const double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

RunReport run_fcca(const RunConfig& cfg) {
  validate(cfg);
  RunReport report;
  report.config = cfg;
  const Dataset raw = load_dataset(cfg);
  report.dataset_name = cfg.dataset.rfind("synthetic:", 0) == 0
                            ? cfg.dataset
                            : std::filesystem::path(cfg.dataset).stem().string();
  report.n_rows = raw.n_rows;
  report.n_features = raw.n_cols;
  report.feature_names = raw.feature_names;
  report.warnings = raw.warnings;
  const Dataset scaled = scale_minmax(raw);
  const auto plan = make_folds(scaled.n_rows, cfg.folds, cfg.cap, cfg.seed);
  report.external_rows = plan.external_test.size();

  std::vector<int> folds;
  for (int f = 0; f < cfg.folds; ++f) {
    if (!cfg.fold || *cfg.fold == f) folds.push_back(f);
  }
  unsigned threads = cfg.threads ? cfg.threads : std::max(1U, std::thread::hardware_concurrency());
  const unsigned fold_threads = std::min<unsigned>(threads, static_cast<unsigned>(folds.size()));
  const unsigned ce_threads = std::max(1U, threads / std::max(1U, fold_threads));

  report.folds.resize(folds.size());
  std::vector<std::exception_ptr> errors(folds.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    while (true) {
      const auto k = next.fetch_add(1);
      if (k >= folds.size()) return;
      try {
        report.folds[k] = run_fold(cfg, scaled, plan, folds[k], ce_threads);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  if (fold_threads <= 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < fold_threads; ++t) pool.emplace_back(work);
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return report;
}

RunReport gtre_baseline(RunConfig cfg) {
  cfg.gtre = true;
  cfg.q_list = {0.0};
  return run_fcca(cfg);
}

RunReport sweep_q(RunConfig cfg) {
  if (cfg.q_list.size() <= 1) cfg.q_list = default_q_grid();
  return run_fcca(cfg);
}

std::string report_to_json(const RunReport& report) {
  json j;
  j["version"] = "fcca-report-v1";
  j["dataset"] = {{"name", report.dataset_name},
                  {"rows", report.n_rows},
                  {"features", report.n_features},
                  {"feature_names", report.feature_names},
                  {"warnings", report.warnings},
                  {"external_test_rows", report.external_rows}};
  j["config"] = config_json(report.config);
  const auto& names = report.feature_names;

  json folds = json::array();
  for (const auto& f : report.folds) {
    json jf;
    jf["fold"] = f.fold;
    jf["n_train"] = f.n_train;
    jf["n_test"] = f.n_test;
    jf["lambda_reg"] = f.lambda_reg;
    jf["target"] = {{"train_accuracy", f.target_train_accuracy},
                    {"test_accuracy", f.target_test_accuracy},
                    {"external_accuracy",
                     f.target_external_accuracy ? json(*f.target_external_accuracy) : json(nullptr)}};
    jf["m_size"] = f.m_size;
    jf["counterfactuals"] = {{"optimal", f.ce_optimal},
                             {"infeasible", f.ce_infeasible},
                             {"valid", f.ce_valid},
                             {"batch_hash", f.batch_hash}};
    jf["thresholds"] = {{"distinct", f.thresholds_distinct},
                        {"total", f.thresholds_total},
                        {"discarded", f.thresholds_discarded}};
    jf["raw_metrics"] = metrics_json(f.raw_metrics, names);
    jf["cart_continuous"] = tree_json(f.cart_continuous);
    json qs = json::array();
    for (const auto& q : f.per_q) {
      json jq;
      jq["q"] = q.q;
      jq["f_q"] = q.f_q;
      jq["n_thresholds"] = q.n_thresholds;
      json per_feature = json::object();
      for (std::size_t j2 = 0; j2 < q.thresholds_per_feature.size(); ++j2) {
        if (q.thresholds_per_feature[j2]) per_feature[names.at(j2)] = q.thresholds_per_feature[j2];
      }
      jq["thresholds_per_feature"] = std::move(per_feature);
      jq["metrics"] = metrics_json(q.train_metrics, names);
      jq["cart"] = tree_json(q.cart);
      jq["optimal"] = tree_json(q.optimal);
      jq["checks"] = {{"optimal_dominates_cart", q.dominance},
                      {"within_consistency_ceiling", q.ceiling_ok},
                      {"cell_majority_attains_ceiling", q.majority_attains}};
      jq["batch_hash"] = q.batch_hash;
      qs.push_back(std::move(jq));
    }
    jf["per_q"] = std::move(qs);
    if (f.gtre) {
      const auto& g = *f.gtre;
      json jg;
      jg["initial_thresholds"] = g.initial_thresholds;
      jg["kept_thresholds"] = g.kept_thresholds;
      jg["full_refit_accuracy"] = g.full_refit_accuracy;
      jg["final_refit_accuracy"] = g.final_refit_accuracy;
      jg["metrics"] = metrics_json(g.train_metrics, names);
      jg["cart"] = tree_json(g.cart);
      jg["optimal"] = tree_json(g.optimal);
      jg["jaccard_vs_fcca_q0"] = g.jaccard;
      jg["overlap_fraction_vs_fcca_q0"] = g.overlap_fraction;
      jf["gtre"] = std::move(jg);
    } else {
      jf["gtre"] = nullptr;
    }
    folds.push_back(std::move(jf));
  }
  j["folds"] = std::move(folds);

  // Aggregates over folds.
  json agg;
  std::vector<double> tt, te, tx, msz;
  for (const auto& f : report.folds) {
    tt.push_back(f.target_train_accuracy);
    te.push_back(f.target_test_accuracy);
    if (f.target_external_accuracy) tx.push_back(*f.target_external_accuracy);
    msz.push_back(static_cast<double>(f.m_size));
  }
  agg["target"] = {{"train_accuracy", stat_json(tt)},
                   {"test_accuracy", stat_json(te)},
                   {"external_accuracy", tx.empty() ? json(nullptr) : stat_json(tx)}};
  agg["m_size"] = stat_json(msz);
  {
    std::vector<const TreeSummary*> cc;
    for (const auto& f : report.folds) cc.push_back(&f.cart_continuous);
    agg["cart_continuous"] = tree_aggregate(cc);
  }
  json aq = json::array();
  const auto nq = report.config.q_list.size();
  for (std::size_t k = 0; k < nq && !report.folds.empty(); ++k) {
    std::vector<double> eta, delta, nthr;
    std::vector<const TreeSummary*> cart, opt;
    for (const auto& f : report.folds) {
      const auto& q = f.per_q[k];
      eta.push_back(q.train_metrics.eta);
      delta.push_back(q.train_metrics.delta);
      nthr.push_back(static_cast<double>(q.n_thresholds));
      cart.push_back(&q.cart);
      opt.push_back(&q.optimal);
    }
    json jq;
    jq["q"] = report.config.q_list[k];
    jq["eta"] = stat_json(eta);
    jq["delta"] = stat_json(delta);
    jq["n_thresholds"] = stat_json(nthr);
    jq["cart"] = tree_aggregate(cart);
    jq["optimal"] = tree_aggregate(opt);
    aq.push_back(std::move(jq));
  }
  agg["per_q"] = std::move(aq);
  if (!report.folds.empty() && report.folds.front().gtre) {
    std::vector<double> kept, jac, ov;
    std::vector<const TreeSummary*> cart, opt;
    for (const auto& f : report.folds) {
      kept.push_back(static_cast<double>(f.gtre->kept_thresholds));
      jac.push_back(f.gtre->jaccard);
      ov.push_back(f.gtre->overlap_fraction);
      cart.push_back(&f.gtre->cart);
      opt.push_back(&f.gtre->optimal);
    }
    agg["gtre"] = {{"kept_thresholds", stat_json(kept)},
                   {"jaccard_vs_fcca_q0", stat_json(jac)},
                   {"overlap_fraction_vs_fcca_q0", stat_json(ov)},
                   {"cart", tree_aggregate(cart)},
                   {"optimal", tree_aggregate(opt)}};
  }
  j["aggregate"] = std::move(agg);
  return j.dump(1);
}

std::string timings_to_json(const RunReport& report) {
  json j = json::array();
  for (const auto& f : report.folds) {
    json jf;
    jf["fold"] = f.fold;
    double total = 0.0;
    for (const auto& [phase, s] : f.seconds) {
      jf[phase] = s;
      total += s;
    }
    jf["total"] = total;
    j.push_back(std::move(jf));
  }
  return j.dump(1);
}

void write_tradeoff_csv(const std::filesystem::path& path, const RunReport& report) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "q,eta,delta,optimal_train_accuracy,optimal_test_accuracy,cart_train_accuracy,cart_test_accuracy,"
         "n_thresholds,batch_hashes\n";
  for (std::size_t k = 0; k < report.config.q_list.size(); ++k) {
    std::vector<double> eta, delta, otr, ote, ctr, cte, nthr;
    std::string hashes;
    for (const auto& f : report.folds) {
      const auto& q = f.per_q[k];
      eta.push_back(q.train_metrics.eta);
      delta.push_back(q.train_metrics.delta);
      otr.push_back(q.optimal.train_accuracy);
      ote.push_back(q.optimal.test_accuracy);
      ctr.push_back(q.cart.train_accuracy);
      cte.push_back(q.cart.test_accuracy);
      nthr.push_back(static_cast<double>(q.n_thresholds));
      hashes += (hashes.empty() ? "" : ";") + q.batch_hash;
    }
    out << format_double(report.config.q_list[k]) << ',' << format_double(mean_std(eta).mean) << ','
        << format_double(mean_std(delta).mean) << ',' << format_double(mean_std(otr).mean) << ','
        << format_double(mean_std(ote).mean) << ',' << format_double(mean_std(ctr).mean) << ','
        << format_double(mean_std(cte).mean) << ',' << format_double(mean_std(nthr).mean) << ',' << hashes
        << '\n';
  }
}

void write_folds_csv(const std::filesystem::path& path, const RunReport& report) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "fold,q,target_test_accuracy,m_size,ce_optimal,ce_infeasible,n_thresholds,eta,delta,"
         "cart_train_accuracy,cart_test_accuracy,optimal_train_accuracy,optimal_test_accuracy,"
         "optimal_leaves,optimal_features_used\n";
  for (const auto& f : report.folds) {
    for (const auto& q : f.per_q) {
      out << f.fold << ',' << format_double(q.q) << ',' << format_double(f.target_test_accuracy) << ','
          << f.m_size << ',' << f.ce_optimal << ',' << f.ce_infeasible << ',' << q.n_thresholds << ','
          << format_double(q.train_metrics.eta) << ',' << format_double(q.train_metrics.delta) << ','
          << format_double(q.cart.train_accuracy) << ',' << format_double(q.cart.test_accuracy) << ','
          << format_double(q.optimal.train_accuracy) << ',' << format_double(q.optimal.test_accuracy) << ','
          << q.optimal.leaves << ',' << q.optimal.features_used << '\n';
    }
  }
}

void write_report(const RunReport& report) {
  const auto& dir = report.config.out_dir;
  if (dir.empty()) throw ConfigError("no output directory given");
  std::filesystem::create_directories(dir);
  write_text(dir / "report.json", report_to_json(report));
  write_text(dir / "timings.json", timings_to_json(report));
  write_tradeoff_csv(dir / "tradeoff.csv", report);
  write_folds_csv(dir / "folds.csv", report);
}

std::vector<CeRecord> read_ce_csv(const std::filesystem::path& path, std::size_t n_features) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open counterfactual CSV " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError("counterfactual CSV is empty");
  std::vector<CeRecord> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split(line, ',');
    if (cells.size() < 4 + n_features) {
      throw DataError("counterfactual CSV line " + std::to_string(lineno) + " has too few cells");
    }
    CeRecord r;
    const auto idx = to_int("index", cells[0]);
    if (idx < 0) throw DataError("negative row index in counterfactual CSV");
    r.row = static_cast<std::size_t>(idx);
    r.optimal = cells[1] == "optimal";
    if (r.optimal) {
      for (std::size_t j = 0; j < n_features; ++j) {
        try {
          r.x_ce.push_back(to_double("x_ce", cells[4 + j]));
        } catch (const ConfigError&) {
          throw DataError("counterfactual CSV line " + std::to_string(lineno) + ": bad value '" +
                          cells[4 + j] + "'");
        }
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace fcca
