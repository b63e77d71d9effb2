#include "fcca/surrogate.hpp"

#include <algorithm>
#include <bit>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

#include "fcca/error.hpp"
#include "json.hpp"

namespace fcca {

namespace {

using json = nlohmann::ordered_json;

constexpr double kGainTol = 1e-12;
constexpr double kObjTol = 1e-12;

int majority(std::size_t c0, std::size_t c1) { return c1 > c0 ? 1 : 0; }

// Gini impurity times node size.
double gini_mass(double n, double a) { return n > 0.0 ? 2.0 * a * (n - a) / n : 0.0; }

// Greedy builder over an abstract matrix. `thresholds(rows, c)` lists the
// candidate thresholds of column c at a node in ascending order.
class CartBuilder {
 public:
  using Getter = std::function<double(std::size_t, std::size_t)>;

  CartBuilder(Getter get, std::size_t n_cols, const std::vector<int>& labels, bool binary,
              int max_depth, std::size_t min_leaf)
      : get_(std::move(get)), n_cols_(n_cols), labels_(labels), binary_(binary),
        max_depth_(max_depth), min_leaf_(std::max<std::size_t>(1, min_leaf)) {}

  std::vector<SurrogateNode> run(std::vector<std::size_t> rows) {
    build(rows, 0);
    return std::move(nodes_);
  }

 private:
  int build(std::vector<std::size_t>& rows, int depth) {
    const int id = static_cast<int>(nodes_.size());
    nodes_.emplace_back();
    std::size_t c1 = 0;
    for (const auto i : rows) c1 += labels_[i] == 1 ? 1 : 0;
    const std::size_t c0 = rows.size() - c1;
    nodes_[static_cast<std::size_t>(id)].count0 = c0;
    nodes_[static_cast<std::size_t>(id)].count1 = c1;
    nodes_[static_cast<std::size_t>(id)].label = majority(c0, c1);
    if (depth >= max_depth_ || c0 == 0 || c1 == 0 || rows.size() < 2 * min_leaf_) return id;

    const double n = static_cast<double>(rows.size());
    const double parent = gini_mass(n, static_cast<double>(c1));
    double best_gain = kGainTol;
    int best_col = -1;
    double best_thr = 0.0;
    std::vector<std::pair<double, int>> vals(rows.size());
    for (std::size_t c = 0; c < n_cols_; ++c) {
      for (std::size_t k = 0; k < rows.size(); ++k) vals[k] = {get_(rows[k], c), labels_[rows[k]]};
      std::sort(vals.begin(), vals.end());
      double left_n = 0.0;
      double left_a = 0.0;
      for (std::size_t k = 0; k + 1 < vals.size(); ++k) {
        left_n += 1.0;
        left_a += vals[k].second == 1 ? 1.0 : 0.0;
        if (vals[k].first == vals[k + 1].first) continue;
        const auto nl = k + 1;
        if (nl < min_leaf_ || rows.size() - nl < min_leaf_) continue;
        const double gain = parent - gini_mass(left_n, left_a) -
                            gini_mass(n - left_n, static_cast<double>(c1) - left_a);
        if (gain > best_gain + kGainTol || (best_col < 0 && gain > best_gain)) {
          best_gain = gain;
          best_col = static_cast<int>(c);
          if (binary_) {
            best_thr = 0.5;
          } else {
            const double lo = vals[k].first;
            const double hi = vals[k + 1].first;
            best_thr = lo + (hi - lo) / 2.0;
            if (!(best_thr < hi)) best_thr = lo;
          }
        }
      }
    }
    if (best_col < 0) return id;

    std::vector<std::size_t> left;
    std::vector<std::size_t> right;
    for (const auto i : rows) {
      (get_(i, static_cast<std::size_t>(best_col)) > best_thr ? right : left).push_back(i);
    }
    rows.clear();
    rows.shrink_to_fit();
    nodes_[static_cast<std::size_t>(id)].column = best_col;
    nodes_[static_cast<std::size_t>(id)].threshold = best_thr;
    const int l = build(left, depth + 1);
    const int r = build(right, depth + 1);
    nodes_[static_cast<std::size_t>(id)].left = l;
    nodes_[static_cast<std::size_t>(id)].right = r;
    return id;
  }

  Getter get_;
  std::size_t n_cols_;
  const std::vector<int>& labels_;
  bool binary_;
  int max_depth_;
  std::size_t min_leaf_;
  std::vector<SurrogateNode> nodes_;
};

using Bits = std::vector<std::uint64_t>;

struct BitsHash {
  std::size_t operator()(const Bits& b) const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto w : b) {
      h ^= w + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
      h *= 1099511628211ULL;
    }
    return static_cast<std::size_t>(h);
  }
};

std::size_t popcount(const Bits& b) {
  std::size_t n = 0;
  for (const auto w : b) n += static_cast<std::size_t>(std::popcount(w));
  return n;
}

std::size_t popcount_and(const Bits& a, const Bits& b) {
  std::size_t n = 0;
  for (std::size_t k = 0; k < a.size(); ++k) n += static_cast<std::size_t>(std::popcount(a[k] & b[k]));
  return n;
}

// Memoized search over (row subset, remaining depth).
class OptimalSearch {
 public:
  struct Entry {
    std::size_t mis = 0;
    int leaves = 1;
    int col = -1;  // index into cols_, -1 for a leaf
  };

  OptimalSearch(const BinDataset& data, const OptimalTreeOptions& opts)
      : data_(data), opts_(opts), n_(data.n_rows), words_((data.n_rows + 63) / 64) {
    y_.assign(words_, 0);
    for (std::size_t i = 0; i < n_; ++i) {
      if (data.labels[i] == 1) y_[i / 64] |= 1ULL << (i % 64);
    }
    // One representative per distinct non-constant column, lowest index first.
    std::unordered_map<Bits, std::size_t, BitsHash> seen;
    for (std::size_t c = 0; c < data.n_cols; ++c) {
      Bits b(words_, 0);
      for (std::size_t i = 0; i < n_; ++i) {
        if (data.at(i, c)) b[i / 64] |= 1ULL << (i % 64);
      }
      const auto ones = popcount(b);
      if (ones == 0 || ones == n_) continue;
      if (seen.emplace(b, c).second) {
        cols_.push_back(std::move(b));
        col_index_.push_back(c);
      }
    }
    if (cols_.size() > opts.max_columns) {
      throw ConfigError("optimal tree search supports at most " + std::to_string(opts.max_columns) +
                        " distinct columns, got " + std::to_string(cols_.size()));
    }
    // Cell id of every row, for inconsistency lower bounds.
    std::unordered_map<std::string, std::size_t> cell_ids;
    cell_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) {
      const auto r = data.row(i);
      cell_[i] = cell_ids.emplace(std::string(r.begin(), r.end()), cell_ids.size()).first->second;
    }
    scratch_.assign(cell_ids.size(), {0, 0});
    memo_.resize(static_cast<std::size_t>(std::max(opts.max_depth, 0)) + 1);
  }

  Entry solve(const Bits& s, int depth) {
    if (depth <= 0) return leaf(s);
    auto& table = memo_[static_cast<std::size_t>(depth)];
    if (const auto it = table.find(s); it != table.end()) return it->second;

    Entry best = leaf(s);
    const double incons = static_cast<double>(inconsistency(s));
    if (best.col < 0 && objective(best) <= (incons / nd()) + 2.0 * opts_.lambda_reg + kObjTol) {
      table.emplace(s, best);
      return best;
    }
    const auto size = popcount(s);
    Bits l(words_);
    Bits r(words_);
    for (std::size_t k = 0; k < cols_.size(); ++k) {
      for (std::size_t w = 0; w < words_; ++w) {
        r[w] = s[w] & cols_[k][w];
        l[w] = s[w] & ~cols_[k][w];
      }
      const auto nr = popcount(r);
      if (nr == 0 || nr == size) continue;
      const double lb_l = lower_bound(l);
      const double lb_r = lower_bound(r);
      if (lb_l + lb_r > objective(best) + kObjTol) continue;
      const Entry el = solve(l, depth - 1);
      if (objective(el) + lb_r > objective(best) + kObjTol) continue;
      const Entry er = solve(r, depth - 1);
      Entry cand{el.mis + er.mis, el.leaves + er.leaves, static_cast<int>(k)};
      if (better(cand, best)) best = cand;
    }
    table.emplace(s, best);
    return best;
  }

  // Emits the tree chosen by `solve` into `nodes`; returns the node id.
  int build(const Bits& s, int depth, std::vector<SurrogateNode>& nodes) {
    const Entry e = solve(s, depth);
    const int id = static_cast<int>(nodes.size());
    nodes.emplace_back();
    const auto c1 = popcount_and(s, y_);
    const auto c0 = popcount(s) - c1;
    nodes.back().count0 = c0;
    nodes.back().count1 = c1;
    nodes.back().label = majority(c0, c1);
    if (e.col < 0) return id;
    const auto& col = cols_[static_cast<std::size_t>(e.col)];
    Bits l(words_);
    Bits r(words_);
    for (std::size_t w = 0; w < words_; ++w) {
      r[w] = s[w] & col[w];
      l[w] = s[w] & ~col[w];
    }
    const int li = build(l, depth - 1, nodes);
    const int ri = build(r, depth - 1, nodes);
    auto& node = nodes[static_cast<std::size_t>(id)];
    node.column = static_cast<int>(col_index_[static_cast<std::size_t>(e.col)]);
    node.threshold = 0.5;
    node.left = li;
    node.right = ri;
    return id;
  }

  Bits all_rows() const {
    Bits b(words_, 0);
    for (std::size_t i = 0; i < n_; ++i) b[i / 64] |= 1ULL << (i % 64);
    return b;
  }

 private:
  double nd() const { return static_cast<double>(n_); }
  double objective(const Entry& e) const {
    return static_cast<double>(e.mis) / nd() + opts_.lambda_reg * static_cast<double>(e.leaves);
  }
  bool better(const Entry& a, const Entry& b) const {
    const double oa = objective(a);
    const double ob = objective(b);
    if (oa < ob - kObjTol) return true;
    if (oa > ob + kObjTol) return false;
    return a.leaves < b.leaves;
  }
  Entry leaf(const Bits& s) const {
    const auto c1 = popcount_and(s, y_);
    const auto c0 = popcount(s) - c1;
    return {std::min(c0, c1), 1, -1};
  }
  std::size_t inconsistency(const Bits& s) {
    std::size_t total = 0;
    touched_.clear();
    for (std::size_t w = 0; w < words_; ++w) {
      for (auto bits = s[w]; bits != 0; bits &= bits - 1) {
        const auto i = w * 64 + static_cast<std::size_t>(std::countr_zero(bits));
        auto& c = scratch_[cell_[i]];
        if (c[0] + c[1] == 0) touched_.push_back(cell_[i]);
        ++c[static_cast<std::size_t>(data_.labels[i])];
      }
    }
    for (const auto id : touched_) {
      total += std::min(scratch_[id][0], scratch_[id][1]);
      scratch_[id] = {0, 0};
    }
    return total;
  }
  double lower_bound(const Bits& s) {
    return static_cast<double>(inconsistency(s)) / nd() + opts_.lambda_reg;
  }

  const BinDataset& data_;
  OptimalTreeOptions opts_;
  std::size_t n_;
  std::size_t words_;
  Bits y_;
  std::vector<Bits> cols_;
  std::vector<std::size_t> col_index_;
  std::vector<std::size_t> cell_;
  std::vector<std::array<std::size_t, 2>> scratch_;
  std::vector<std::size_t> touched_;
  std::vector<std::unordered_map<Bits, Entry, BitsHash>> memo_;
};

int walk(const std::vector<SurrogateNode>& nodes, const std::function<bool(const SurrogateNode&)>& go_right) {
  std::size_t k = 0;
  while (!nodes[k].is_leaf()) {
    k = static_cast<std::size_t>(go_right(nodes[k]) ? nodes[k].right : nodes[k].left);
  }
  return nodes[k].label;
}

std::string describe(const SurrogateTree& t, const SurrogateNode& n) {
  const auto& p = t.provenance[static_cast<std::size_t>(n.column)];
  const double thr = t.binary_input ? p.threshold : n.threshold;
  return "feature `" + t.feature_names.at(p.feature) + "` > " + format_double(thr);
}

}  // namespace

int SurrogateTree::predict(std::span<const std::uint8_t> bits) const {
  return walk(nodes, [&](const SurrogateNode& n) { return bits[static_cast<std::size_t>(n.column)] != 0; });
}

int SurrogateTree::predict(std::span<const double> x) const {
  return walk(nodes, [&](const SurrogateNode& n) { return x[static_cast<std::size_t>(n.column)] > n.threshold; });
}

int SurrogateTree::depth() const {
  std::function<int(int)> rec = [&](int id) -> int {
    const auto& n = nodes[static_cast<std::size_t>(id)];
    return n.is_leaf() ? 0 : 1 + std::max(rec(n.left), rec(n.right));
  };
  return nodes.empty() ? 0 : rec(0);
}

std::size_t SurrogateTree::n_leaves() const {
  return static_cast<std::size_t>(
      std::count_if(nodes.begin(), nodes.end(), [](const SurrogateNode& n) { return n.is_leaf(); }));
}

std::size_t SurrogateTree::n_features_used() const {
  std::set<std::size_t> used;
  for (const auto& n : nodes) {
    if (!n.is_leaf()) used.insert(provenance[static_cast<std::size_t>(n.column)].feature);
  }
  return used.size();
}

SurrogateTree train_cart(const BinDataset& data, int max_depth, std::size_t min_leaf) {
  if (data.n_rows == 0) throw DataError("cannot train a tree on an empty dataset");
  if (max_depth < 1) throw ConfigError("tree depth must be at least 1");
  std::vector<std::size_t> rows(data.n_rows);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  CartBuilder builder([&](std::size_t i, std::size_t c) { return static_cast<double>(data.at(i, c)); },
                      data.n_cols, data.labels, true, max_depth, min_leaf);
  SurrogateTree t;
  t.kind = TreeKind::Cart;
  t.binary_input = true;
  t.nodes = builder.run(std::move(rows));
  t.provenance = data.columns;
  t.feature_names = data.feature_names;
  t.n_train = data.n_rows;
  return t;
}

SurrogateTree train_cart(const Dataset& data, int max_depth, std::size_t min_leaf) {
  if (data.n_rows == 0) throw DataError("cannot train a tree on an empty dataset");
  if (max_depth < 1) throw ConfigError("tree depth must be at least 1");
  std::vector<std::size_t> rows(data.n_rows);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  CartBuilder builder([&](std::size_t i, std::size_t c) { return data.at(i, c); }, data.n_cols,
                      data.labels, false, max_depth, min_leaf);
  SurrogateTree t;
  t.kind = TreeKind::Cart;
  t.binary_input = false;
  t.nodes = builder.run(std::move(rows));
  for (std::size_t j = 0; j < data.n_cols; ++j) t.provenance.push_back({j, 0.0});
  t.feature_names = data.feature_names;
  t.n_train = data.n_rows;
  return t;
}

SurrogateTree train_optimal(const BinDataset& data, const OptimalTreeOptions& opts) {
  if (data.n_rows == 0) throw DataError("cannot train a tree on an empty dataset");
  if (data.n_cols == 0) throw DataError("optimal tree needs at least one binary column");
  if (opts.max_depth < 1) throw ConfigError("tree depth must be at least 1");
  if (opts.lambda_reg < 0.0) throw ConfigError("lambda_reg must be non-negative");
  OptimalSearch search(data, opts);
  SurrogateTree t;
  t.kind = TreeKind::Optimal;
  t.binary_input = true;
  search.build(search.all_rows(), opts.max_depth, t.nodes);
  t.provenance = data.columns;
  t.feature_names = data.feature_names;
  t.n_train = data.n_rows;
  t.lambda_reg = opts.lambda_reg;
  t.objective = tree_objective(t, data, opts.lambda_reg);
  t.certified_optimal = true;
  return t;
}

double tree_objective(const SurrogateTree& tree, const BinDataset& data, double lambda_reg) {
  std::size_t mis = 0;
  for (std::size_t i = 0; i < data.n_rows; ++i) mis += tree.predict(data.row(i)) != data.labels[i] ? 1 : 0;
  return static_cast<double>(mis) / static_cast<double>(data.n_rows) +
         lambda_reg * static_cast<double>(tree.n_leaves());
}

TreeEval evaluate(const SurrogateTree& tree, const BinDataset& data) {
  if (!tree.binary_input) throw DataError("tree was trained on continuous features");
  TreeEval e;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.n_rows; ++i) correct += tree.predict(data.row(i)) == data.labels[i] ? 1 : 0;
  e.accuracy = data.n_rows ? static_cast<double>(correct) / static_cast<double>(data.n_rows) : 0.0;
  e.n_leaves = tree.n_leaves();
  e.n_features_used = tree.n_features_used();
  e.depth = tree.depth();
  return e;
}

TreeEval evaluate(const SurrogateTree& tree, const Dataset& data) {
  if (tree.binary_input) throw DataError("tree was trained on binarized features");
  TreeEval e;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.n_rows; ++i) correct += tree.predict(data.row(i)) == data.labels[i] ? 1 : 0;
  e.accuracy = data.n_rows ? static_cast<double>(correct) / static_cast<double>(data.n_rows) : 0.0;
  e.n_leaves = tree.n_leaves();
  e.n_features_used = tree.n_features_used();
  e.depth = tree.depth();
  return e;
}

std::string tree_to_json(const SurrogateTree& tree, const std::optional<Scaler>& scaler) {
  json j;
  j["kind"] = tree.kind == TreeKind::Optimal ? "optimal" : "cart";
  j["binary_input"] = tree.binary_input;
  j["depth"] = tree.depth();
  j["leaves"] = tree.n_leaves();
  j["features_used"] = tree.n_features_used();
  j["lambda_reg"] = tree.lambda_reg;
  j["objective"] = tree.objective;
  j["certificate"] = tree.certified_optimal ? json("optimal") : json(nullptr);
  j["feature_names"] = tree.feature_names;
  json nodes = json::array();
  for (const auto& n : tree.nodes) {
    json jn;
    if (n.is_leaf()) {
      jn["leaf"] = n.label;
    } else {
      const auto& p = tree.provenance[static_cast<std::size_t>(n.column)];
      const double thr = tree.binary_input ? p.threshold : n.threshold;
      jn["split"] = describe(tree, n);
      jn["column"] = n.column;
      jn["feature"] = p.feature;
      jn["threshold"] = thr;
      if (scaler) jn["threshold_original_units"] = scaler->inverse(p.feature, thr);
      jn["left"] = n.left;
      jn["right"] = n.right;
    }
    jn["counts"] = {n.count0, n.count1};
    nodes.push_back(std::move(jn));
  }
  j["nodes"] = std::move(nodes);
  return j.dump(1);
}

SurrogateTree tree_from_json(const std::string& text) {
  SurrogateTree t;
  try {
    const auto j = json::parse(text);
    t.kind = j.at("kind").get<std::string>() == "optimal" ? TreeKind::Optimal : TreeKind::Cart;
    t.binary_input = j.at("binary_input").get<bool>();
    t.lambda_reg = j.at("lambda_reg").get<double>();
    t.objective = j.at("objective").get<double>();
    t.certified_optimal = !j.at("certificate").is_null();
    t.feature_names = j.at("feature_names").get<std::vector<std::string>>();
    for (const auto& jn : j.at("nodes")) {
      SurrogateNode n;
      n.count0 = jn.at("counts").at(0).get<std::size_t>();
      n.count1 = jn.at("counts").at(1).get<std::size_t>();
      if (jn.contains("leaf")) {
        n.label = jn.at("leaf").get<int>();
      } else {
        n.column = jn.at("column").get<int>();
        n.left = jn.at("left").get<int>();
        n.right = jn.at("right").get<int>();
        const auto col = static_cast<std::size_t>(n.column);
        if (t.provenance.size() <= col) t.provenance.resize(col + 1);
        t.provenance[col] = {jn.at("feature").get<std::size_t>(), jn.at("threshold").get<double>()};
        n.threshold = t.binary_input ? 0.5 : jn.at("threshold").get<double>();
        n.label = majority(n.count0, n.count1);
      }
      t.nodes.push_back(n);
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed tree JSON: ") + e.what());
  }
  if (t.nodes.empty()) throw DataError("tree JSON has no nodes");
  return t;
}

std::string render_text(const SurrogateTree& tree) {
  std::ostringstream os;
  std::function<void(int, int)> rec = [&](int id, int indent) {
    const auto& n = tree.nodes[static_cast<std::size_t>(id)];
    const std::string pad(static_cast<std::size_t>(indent) * 2, ' ');
    if (n.is_leaf()) {
      os << pad << "predict " << n.label << "  (" << n.count0 << '/' << n.count1 << ")\n";
      return;
    }
    os << pad << "if " << describe(tree, n) << ":\n";
    rec(n.right, indent + 1);
    os << pad << "else:\n";
    rec(n.left, indent + 1);
  };
  if (!tree.nodes.empty()) rec(0, 0);
  return os.str();
}

}  // namespace fcca
