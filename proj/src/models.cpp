#include "fcca/models.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "fcca/error.hpp"
#include "json.hpp"

namespace fcca {

namespace {

using json = nlohmann::ordered_json;

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

enum class Criterion { SquaredError, Gini };

struct SplitChoice {
  int feature = -1;
  double threshold = 0.0;
  double gain = 0.0;
};

// Impurity of a node summarised by total weight w and weighted target sum a.
double impurity(Criterion c, double w, double a) {
  if (w <= 0.0) return 0.0;
  if (c == Criterion::SquaredError) return -a * a / w;  // SSE up to a node-constant term
  return 2.0 * a * (w - a) / w;                         // weighted Gini
}

std::vector<std::vector<std::uint32_t>> presort(const Dataset& ds) {
  std::vector<std::vector<std::uint32_t>> order(ds.n_cols);
  for (std::size_t j = 0; j < ds.n_cols; ++j) {
    auto& o = order[j];
    o.resize(ds.n_rows);
    std::iota(o.begin(), o.end(), 0U);
    std::stable_sort(o.begin(), o.end(),
                     [&](std::uint32_t a, std::uint32_t b) { return ds.at(a, j) < ds.at(b, j); });
  }
  return order;
}

// Exhaustive search over midpoints of consecutive distinct values. Ties keep
// the earliest feature in `features`, then the lowest threshold.
SplitChoice best_split(const Dataset& ds, const std::vector<std::vector<std::uint32_t>>& order,
                       const std::vector<char>& in_node, std::span<const double> w,
                       std::span<const double> a, const std::vector<std::size_t>& features,
                       Criterion crit) {
  double w_tot = 0.0;
  double a_tot = 0.0;
  for (std::size_t i = 0; i < ds.n_rows; ++i) {
    if (in_node[i]) {
      w_tot += w[i];
      a_tot += a[i];
    }
  }
  const double parent = impurity(crit, w_tot, a_tot);
  SplitChoice best;
  for (const auto j : features) {
    double wl = 0.0;
    double al = 0.0;
    bool have_prev = false;
    double prev = 0.0;
    for (const auto i : order[j]) {
      if (!in_node[i]) continue;
      const double v = ds.at(i, j);
      if (have_prev && v > prev) {
        const double gain =
            parent - impurity(crit, wl, al) - impurity(crit, w_tot - wl, a_tot - al);
        if (gain > best.gain) {
          best.feature = static_cast<int>(j);
          best.threshold = prev + (v - prev) / 2.0;
          best.gain = gain;
        }
      }
      wl += w[i];
      al += a[i];
      prev = v;
      have_prev = true;
    }
  }
  return best;
}

constexpr double kMinGain = 1e-12;

struct Grower {
  const Dataset& ds;
  const std::vector<std::vector<std::uint32_t>>& order;
  std::span<const double> w;
  std::span<const double> a;
  Criterion crit;
  int max_depth;
  // Fills the payload of a leaf from the rows it holds.
  std::function<void(TreeNode&, const std::vector<std::uint32_t>&)> make_leaf;
  // Features considered at a node.
  std::function<std::vector<std::size_t>()> features;

  int grow(Tree& tree, const std::vector<std::uint32_t>& rows, int depth) {
    const int id = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    SplitChoice split;
    if (depth < max_depth && rows.size() >= 2) {
      std::vector<char> in_node(ds.n_rows, 0);
      for (const auto i : rows) in_node[i] = 1;
      split = best_split(ds, order, in_node, w, a, features(), crit);
    }
    if (split.feature < 0 || split.gain <= kMinGain) {
      make_leaf(tree.nodes[static_cast<std::size_t>(id)], rows);
      return id;
    }
    std::vector<std::uint32_t> left_rows;
    std::vector<std::uint32_t> right_rows;
    for (const auto i : rows) {
      (ds.at(i, static_cast<std::size_t>(split.feature)) <= split.threshold ? left_rows : right_rows)
          .push_back(i);
    }
    const int l = grow(tree, left_rows, depth + 1);
    const int r = grow(tree, right_rows, depth + 1);
    auto& node = tree.nodes[static_cast<std::size_t>(id)];
    node.feature = split.feature;
    node.threshold = split.threshold;
    node.gain = split.gain;
    node.left = l;
    node.right = r;
    return id;
  }
};

void require_two_classes(const Dataset& ds) {
  const auto ones = std::count(ds.labels.begin(), ds.labels.end(), 1);
  if (ones == 0 || static_cast<std::size_t>(ones) == ds.n_rows) {
    throw DataError("training labels contain a single class");
  }
}

void check_dim(std::size_t expected, std::size_t got) {
  if (expected != got) {
    throw DataError("input has " + std::to_string(got) + " features, model expects " +
                    std::to_string(expected));
  }
}

json node_to_json(const TreeNode& n) {
  json j;
  j["feature"] = n.feature;
  j["threshold"] = n.threshold;
  j["left"] = n.left;
  j["right"] = n.right;
  j["value"] = n.value;
  j["weights"] = {n.weights[0], n.weights[1]};
  j["gain"] = n.gain;
  return j;
}

TreeNode node_from_json(const json& j) {
  TreeNode n;
  n.feature = j.at("feature").get<int>();
  n.threshold = j.at("threshold").get<double>();
  n.left = j.at("left").get<int>();
  n.right = j.at("right").get<int>();
  n.value = j.at("value").get<double>();
  n.weights = {j.at("weights").at(0).get<double>(), j.at("weights").at(1).get<double>()};
  n.gain = j.at("gain").get<double>();
  return n;
}

}  // namespace

int Tree::leaf_index(std::span<const double> x) const {
  int id = 0;
  while (!nodes[static_cast<std::size_t>(id)].is_leaf()) {
    const auto& n = nodes[static_cast<std::size_t>(id)];
    id = x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right;
  }
  return id;
}

int Tree::depth() const {
  std::function<int(int)> rec = [&](int id) -> int {
    const auto& n = nodes[static_cast<std::size_t>(id)];
    if (n.is_leaf()) return 0;
    return 1 + std::max(rec(n.left), rec(n.right));
  };
  return nodes.empty() ? 0 : rec(0);
}

std::size_t Tree::n_leaves() const {
  return static_cast<std::size_t>(
      std::count_if(nodes.begin(), nodes.end(), [](const TreeNode& n) { return n.is_leaf(); }));
}

Prediction predict(const Ensemble& model, std::span<const double> x) {
  check_dim(model.n_features, x.size());
  Prediction p;
  if (model.kind == EnsembleKind::GradientBoosting) {
    double sum = 0.0;
    for (const auto& t : model.trees) {
      sum += t.nodes[static_cast<std::size_t>(t.leaf_index(x))].value;
    }
    p.raw = model.init_raw + model.learning_rate * sum;
    p.p_positive = sigmoid(p.raw);
    p.label = p.raw >= 0.0 ? 1 : 0;
  } else {
    double w0 = 0.0;
    double w1 = 0.0;
    for (const auto& t : model.trees) {
      const auto& leaf = t.nodes[static_cast<std::size_t>(t.leaf_index(x))];
      w0 += leaf.weights[0];
      w1 += leaf.weights[1];
    }
    const auto n = static_cast<double>(model.trees.size());
    w0 /= n;
    w1 /= n;
    p.raw = w1 - w0;
    p.p_positive = w1;
    p.label = w1 >= w0 ? 1 : 0;
  }
  p.confidence = p.label == 1 ? p.p_positive : 1.0 - p.p_positive;
  return p;
}

Prediction predict(const LinearModel& model, std::span<const double> x) {
  check_dim(model.w.size(), x.size());
  Prediction p;
  p.raw = model.b;
  for (std::size_t j = 0; j < x.size(); ++j) p.raw += model.w[j] * x[j];
  p.p_positive = sigmoid(p.raw);
  p.label = p.raw >= 0.0 ? 1 : 0;
  p.confidence = p.label == 1 ? p.p_positive : 1.0 - p.p_positive;
  return p;
}

Ensemble train_gb(const Dataset& ds, const GbParams& params) {
  require_two_classes(ds);
  if (params.n_estimators < 1 || params.max_depth < 1) {
    throw ConfigError("gradient boosting needs n_estimators >= 1 and depth >= 1");
  }
  const auto n = ds.n_rows;
  const auto order = presort(ds);
  const double pos = static_cast<double>(std::count(ds.labels.begin(), ds.labels.end(), 1));
  const double prior = pos / static_cast<double>(n);

  Ensemble model;
  model.kind = EnsembleKind::GradientBoosting;
  model.learning_rate = params.learning_rate;
  model.init_raw = std::log(prior / (1.0 - prior));
  model.n_features = ds.n_cols;

  std::vector<double> raw(n, model.init_raw);
  std::vector<double> ones(n, 1.0);
  std::vector<double> grad(n);
  std::vector<double> hess(n);
  std::vector<std::size_t> all_features(ds.n_cols);
  std::iota(all_features.begin(), all_features.end(), std::size_t{0});
  std::vector<std::uint32_t> all_rows(n);
  std::iota(all_rows.begin(), all_rows.end(), 0U);

  Grower grower{ds, order, ones, grad, Criterion::SquaredError, params.max_depth, {}, {}};
  grower.features = [&] { return all_features; };
  grower.make_leaf = [&](TreeNode& leaf, const std::vector<std::uint32_t>& rows) {
    double num = 0.0;
    double den = 0.0;
    for (const auto i : rows) {
      num += grad[i];
      den += hess[i];
    }
    leaf.value = std::abs(den) < 1e-150 ? 0.0 : num / den;
  };

  for (int t = 0; t < params.n_estimators; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      const double p = sigmoid(raw[i]);
      grad[i] = static_cast<double>(ds.labels[i]) - p;
      hess[i] = p * (1.0 - p);
    }
    Tree tree;
    grower.grow(tree, all_rows, 0);
    for (std::size_t i = 0; i < n; ++i) {
      raw[i] += model.learning_rate *
                tree.nodes[static_cast<std::size_t>(tree.leaf_index(ds.row(i)))].value;
    }
    model.trees.push_back(std::move(tree));
  }
  return model;
}

Ensemble train_rf(const Dataset& ds, const RfParams& params) {
  require_two_classes(ds);
  if (params.n_trees < 1 || params.max_depth < 1) {
    throw ConfigError("random forest needs n_trees >= 1 and max_depth >= 1");
  }
  const auto n = ds.n_rows;
  const auto m = ds.n_cols;
  const auto order = presort(ds);
  std::mt19937_64 rng(params.seed);
  const std::size_t n_try =
      params.max_features > 0
          ? std::min<std::size_t>(static_cast<std::size_t>(params.max_features), m)
          : std::max<std::size_t>(1, static_cast<std::size_t>(std::sqrt(static_cast<double>(m))));

  Ensemble model;
  model.kind = EnsembleKind::RandomForest;
  model.learning_rate = 1.0;
  model.init_raw = 0.0;
  model.n_features = m;

  std::vector<double> w(n);
  std::vector<double> a(n);
  Grower grower{ds, order, w, a, Criterion::Gini, params.max_depth, {}, {}};
  grower.features = [&] {
    std::vector<std::size_t> f(m);
    std::iota(f.begin(), f.end(), std::size_t{0});
    for (std::size_t k = 0; k < n_try; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, m - 1);
      std::swap(f[k], f[pick(rng)]);
    }
    f.resize(n_try);
    std::sort(f.begin(), f.end());
    return f;
  };
  grower.make_leaf = [&](TreeNode& leaf, const std::vector<std::uint32_t>& rows) {
    double wt = 0.0;
    double w1 = 0.0;
    for (const auto i : rows) {
      wt += w[i];
      w1 += a[i];
    }
    leaf.weights = {(wt - w1) / wt, w1 / wt};
    leaf.value = leaf.weights[1] - leaf.weights[0];
  };

  std::uniform_int_distribution<std::size_t> draw(0, n - 1);
  for (int t = 0; t < params.n_trees; ++t) {
    std::fill(w.begin(), w.end(), 0.0);
    for (std::size_t k = 0; k < n; ++k) w[draw(rng)] += 1.0;
    std::vector<std::uint32_t> rows;
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = w[i] * static_cast<double>(ds.labels[i]);
      if (w[i] > 0.0) rows.push_back(static_cast<std::uint32_t>(i));
    }
    Tree tree;
    grower.grow(tree, rows, 0);
    model.trees.push_back(std::move(tree));
  }
  return model;
}

LinearModel train_linear(const Dataset& ds, const LinearParams& params) {
  require_two_classes(ds);
  if (params.l2 <= 0.0 || params.epochs < 1) {
    throw ConfigError("linear fit needs l2 > 0 and epochs >= 1");
  }
  LinearModel model;
  model.w.assign(ds.n_cols, 0.0);
  std::mt19937_64 rng(params.seed);
  std::vector<std::size_t> order(ds.n_rows);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int e = 0; e < params.epochs; ++e) {
    const double eta = 0.5 / std::sqrt(static_cast<double>(e) + 1.0);
    std::shuffle(order.begin(), order.end(), rng);
    for (const auto i : order) {
      const double s = ds.labels[i] == 1 ? 1.0 : -1.0;
      const auto x = ds.row(i);
      double f = model.b;
      for (std::size_t j = 0; j < x.size(); ++j) f += model.w[j] * x[j];
      const bool active = s * f < 1.0;
      for (std::size_t j = 0; j < x.size(); ++j) {
        model.w[j] -= eta * (params.l2 * model.w[j] - (active ? s * x[j] : 0.0));
      }
      if (active) model.b += eta * s;
    }
  }
  return model;
}

std::vector<SplitThreshold> split_thresholds(const Ensemble& model) {
  std::map<std::pair<std::size_t, double>, double> acc;
  for (const auto& t : model.trees) {
    for (const auto& n : t.nodes) {
      if (!n.is_leaf()) acc[{static_cast<std::size_t>(n.feature), n.threshold}] += n.gain;
    }
  }
  std::vector<SplitThreshold> out;
  out.reserve(acc.size());
  for (const auto& [key, gain] : acc) out.push_back({key.first, key.second, gain});
  return out;
}

std::string to_string(TargetKind kind) {
  switch (kind) {
    case TargetKind::GradientBoosting: return "gb";
    case TargetKind::RandomForest: return "rf";
    case TargetKind::Linear: return "linear";
  }
  return "gb";
}

TargetKind parse_target_kind(std::string_view s) {
  if (s == "gb") return TargetKind::GradientBoosting;
  if (s == "rf") return TargetKind::RandomForest;
  if (s == "linear") return TargetKind::Linear;
  throw ConfigError("unknown target kind '" + std::string(s) + "' (expected gb, rf or linear)");
}

TargetKind TargetModel::kind() const {
  if (const auto* e = std::get_if<Ensemble>(&body)) {
    return e->kind == EnsembleKind::GradientBoosting ? TargetKind::GradientBoosting
                                                     : TargetKind::RandomForest;
  }
  return TargetKind::Linear;
}

std::size_t TargetModel::n_features() const {
  return std::visit(
      [](const auto& m) -> std::size_t {
        if constexpr (std::is_same_v<std::decay_t<decltype(m)>, Ensemble>) {
          return m.n_features;
        } else {
          return m.w.size();
        }
      },
      body);
}

Prediction TargetModel::predict(std::span<const double> x) const {
  return std::visit([&](const auto& m) { return fcca::predict(m, x); }, body);
}

double TargetModel::accuracy(const Dataset& ds) const {
  if (ds.n_rows == 0) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < ds.n_rows; ++i) {
    if (predict(ds.row(i)).label == ds.labels[i]) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(ds.n_rows);
}

TargetModel fit_target(const Dataset& ds, const TargetParams& params) {
  TargetModel out;
  out.feature_names = ds.feature_names;
  out.scaler = ds.scaler;
  switch (params.kind) {
    case TargetKind::GradientBoosting: out.body = train_gb(ds, params.gb); break;
    case TargetKind::RandomForest: out.body = train_rf(ds, params.rf); break;
    case TargetKind::Linear: out.body = train_linear(ds, params.linear); break;
  }
  return out;
}

std::string model_to_json(const TargetModel& model) {
  json j;
  j["version"] = "fcca-model-v1";
  j["kind"] = to_string(model.kind());
  if (const auto* e = std::get_if<Ensemble>(&model.body)) {
    j["lr"] = e->learning_rate;
    j["init_raw"] = e->init_raw;
    j["n_features"] = e->n_features;
    json trees = json::array();
    for (const auto& t : e->trees) {
      json nodes = json::array();
      for (const auto& n : t.nodes) nodes.push_back(node_to_json(n));
      trees.push_back({{"nodes", std::move(nodes)}});
    }
    j["trees"] = std::move(trees);
  } else {
    const auto& lin = std::get<LinearModel>(model.body);
    j["w"] = lin.w;
    j["b"] = lin.b;
  }
  if (model.scaler) {
    j["scaler"] = {{"min", model.scaler->min}, {"max", model.scaler->max}};
  } else {
    j["scaler"] = nullptr;
  }
  j["feature_names"] = model.feature_names;
  return j.dump(1);
}

TargetModel model_from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("model JSON parse error: ") + e.what());
  }
  if (j.value("version", "") != "fcca-model-v1") {
    throw DataError("unsupported model version tag");
  }
  TargetModel out;
  try {
    const auto kind = parse_target_kind(j.at("kind").get<std::string>());
    if (kind == TargetKind::Linear) {
      LinearModel lin;
      lin.w = j.at("w").get<std::vector<double>>();
      lin.b = j.at("b").get<double>();
      out.body = std::move(lin);
    } else {
      Ensemble e;
      e.kind = kind == TargetKind::GradientBoosting ? EnsembleKind::GradientBoosting
                                                    : EnsembleKind::RandomForest;
      e.learning_rate = j.at("lr").get<double>();
      e.init_raw = j.at("init_raw").get<double>();
      e.n_features = j.at("n_features").get<std::size_t>();
      for (const auto& jt : j.at("trees")) {
        Tree t;
        for (const auto& jn : jt.at("nodes")) t.nodes.push_back(node_from_json(jn));
        e.trees.push_back(std::move(t));
      }
      out.body = std::move(e);
    }
    if (!j.at("scaler").is_null()) {
      Scaler sc;
      sc.min = j["scaler"].at("min").get<std::vector<double>>();
      sc.max = j["scaler"].at("max").get<std::vector<double>>();
      out.scaler = std::move(sc);
    }
    out.feature_names = j.at("feature_names").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed model JSON: ") + e.what());
  }
  return out;
}

void save_model(const std::filesystem::path& path, const TargetModel& model) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write model file: " + path.string());
  out << model_to_json(model) << '\n';
}

TargetModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open model file: " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return model_from_json(buf.str());
}

}  // namespace fcca
