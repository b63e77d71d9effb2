#include "fcca/counterfactual.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "fcca/error.hpp"

namespace fcca {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
// Cost values closer than this are treated as ties.
constexpr double kCostTol = 1e-12;
// Slack for margin arithmetic inside the search; final acceptance is exact.
constexpr double kScoreTol = 1e-9;
// Linear models accept s*(w.x+b) >= 1 - kLinearTol.
constexpr double kLinearTol = 1e-9;

double coord_cost(const CEProblem& prob, std::size_t j, double v) {
  const double d = v - prob.x0[j];
  return (d != 0.0 ? prob.weights.l0 : 0.0) + prob.weights.l1 * std::abs(d) +
         prob.weights.l2 * d * d;
}

int count_moved(const CEProblem& prob, std::span<const double> x) {
  int n = 0;
  for (std::size_t j = 0; j < x.size(); ++j) n += x[j] != prob.x0[j] ? 1 : 0;
  return n;
}

void validate(const CEProblem& prob, std::size_t n_features) {
  const auto m = prob.dim();
  if (m != n_features) throw std::invalid_argument("query dimension does not match model");
  if (prob.eps.size() != m) throw std::invalid_argument("eps dimension does not match query");
  if ((!prob.lower.empty() && prob.lower.size() != m) ||
      (!prob.upper.empty() && prob.upper.size() != m) ||
      (!prob.immutable.empty() && prob.immutable.size() != m)) {
    throw std::invalid_argument("box or immutability mask has the wrong dimension");
  }
  if (prob.y_ce != 1 - prob.y0 || (prob.y0 != 0 && prob.y0 != 1)) {
    throw std::invalid_argument("target label must be the opposite of y0");
  }
  if (prob.weights.l0 < 0.0 || prob.weights.l1 < 0.0 || prob.weights.l2 < 0.0) {
    throw std::invalid_argument("cost weights must be non-negative");
  }
  if (!(prob.margin > 0.0)) throw std::invalid_argument("margin must be positive");
  for (std::size_t j = 0; j < m; ++j) {
    if (!(prob.eps[j] > 0.0)) throw std::invalid_argument("eps must be positive");
    if (prob.lo(j) > prob.hi(j) || prob.x0[j] < prob.lo(j) || prob.x0[j] > prob.hi(j)) {
      throw std::invalid_argument("x0 must lie inside the box");
    }
  }
}

// Incumbent with the documented tie-breaking order.
struct Incumbent {
  bool found = false;
  double cost = kInf;
  int moved = 0;
  std::vector<std::size_t> key;
  std::vector<double> x;

  bool improves(double c, int mv, const std::vector<std::size_t>& k) const {
    if (!found) return true;
    if (c < cost - kCostTol) return true;
    if (c > cost + kCostTol) return false;
    if (mv != moved) return mv < moved;
    return k < key;
  }
  void take(double c, int mv, std::vector<std::size_t> k, std::vector<double> pt) {
    found = true;
    cost = c;
    moved = mv;
    key = std::move(k);
    x = std::move(pt);
  }
  bool prunes(double lower_bound) const { return found && lower_bound > cost + kCostTol; }
};

CESolution finish(const CEProblem& prob, const Incumbent& inc, double margin_value,
                  std::size_t nodes) {
  CESolution sol;
  sol.nodes_explored = nodes;
  if (!inc.found) return sol;
  sol.status = CEStatus::Optimal;
  sol.x_ce = inc.x;
  sol.cost = ce_cost(prob, inc.x);
  sol.margin_achieved = margin_value;
  for (std::size_t j = 0; j < inc.x.size(); ++j) {
    if (std::abs(prob.x0[j] - inc.x[j]) > prob.eps[j]) sol.changed.push_back(j);
  }
  return sol;
}

// score(x) = sum_t leaf_gain[t][leaf_t(x)]; x is valid iff score(x) >= target.
struct MarginModel {
  std::vector<std::vector<double>> leaf_gain;
  double target = 0.0;

  double score(const Ensemble& e, std::span<const double> x) const {
    double s = 0.0;
    for (std::size_t t = 0; t < e.trees.size(); ++t) {
      s += leaf_gain[t][static_cast<std::size_t>(e.trees[t].leaf_index(x))];
    }
    return s;
  }
};

MarginModel margin_model(const Ensemble& e, const CEProblem& prob) {
  MarginModel mm;
  mm.leaf_gain.resize(e.trees.size());
  const double sign = prob.y_ce == 1 ? 1.0 : -1.0;
  const double n_trees = static_cast<double>(e.trees.size());
  for (std::size_t t = 0; t < e.trees.size(); ++t) {
    const auto& nodes = e.trees[t].nodes;
    mm.leaf_gain[t].assign(nodes.size(), 0.0);
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      if (!nodes[k].is_leaf()) continue;
      if (e.kind == EnsembleKind::GradientBoosting) {
        mm.leaf_gain[t][k] = sign * e.learning_rate * nodes[k].value;
      } else {
        const auto yc = static_cast<std::size_t>(prob.y_ce);
        const auto y0 = static_cast<std::size_t>(prob.y0);
        mm.leaf_gain[t][k] = (nodes[k].weights[yc] - nodes[k].weights[y0]) / n_trees;
      }
    }
  }
  mm.target = e.kind == EnsembleKind::GradientBoosting ? prob.margin - sign * e.init_raw
                                                       : prob.margin;
  return mm;
}

std::vector<std::vector<double>> splits_per_feature(const Ensemble& e, std::size_t m) {
  std::vector<std::vector<double>> out(m);
  for (const auto& t : e.trees) {
    for (const auto& n : t.nodes) {
      if (!n.is_leaf()) out[static_cast<std::size_t>(n.feature)].push_back(n.threshold);
    }
  }
  for (auto& v : out) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
  }
  return out;
}

// One representative candidate per routing interval of a feature.
struct Option {
  double value = 0.0;
  double cost = 0.0;
  std::size_t index = 0;  // position in the candidate grid
  bool moved = false;
  double gain = 0.0;      // separable solver only
};

std::vector<Option> interval_representatives(const FeatureCandidates& fc,
                                             const std::vector<double>& splits) {
  std::map<std::size_t, Option> best;
  for (std::size_t k = 0; k < fc.values.size(); ++k) {
    const double v = fc.values[k];
    const auto cell = static_cast<std::size_t>(
        std::lower_bound(splits.begin(), splits.end(), v) - splits.begin());
    Option o{v, fc.costs[k], k, k != fc.origin, 0.0};
    auto it = best.find(cell);
    if (it == best.end()) {
      best.emplace(cell, o);
      continue;
    }
    const auto& cur = it->second;
    const bool better = o.cost < cur.cost - kCostTol ||
                        (std::abs(o.cost - cur.cost) <= kCostTol &&
                         (o.moved != cur.moved ? !o.moved : o.index < cur.index));
    if (better) it->second = o;
  }
  std::vector<Option> out;
  for (const auto& [cell, o] : best) out.push_back(o);
  std::sort(out.begin(), out.end(), [](const Option& a, const Option& b) {
    if (a.cost != b.cost) return a.cost < b.cost;
    return a.index < b.index;
  });
  return out;
}

bool feature_separable(const Ensemble& e) {
  for (const auto& t : e.trees) {
    int f = -1;
    for (const auto& n : t.nodes) {
      if (n.is_leaf()) continue;
      if (f >= 0 && n.feature != f) return false;
      f = n.feature;
    }
  }
  return true;
}

struct Segment {
  double dc = 0.0;
  double dg = 0.0;
  double slope = 0.0;
};

// Upper concave hull of the (cost, gain) options of one feature, from (0,0).
std::vector<Segment> hull_segments(const std::vector<Option>& opts) {
  std::vector<std::pair<double, double>> pts;
  for (const auto& o : opts) {
    if (o.gain > 0.0) pts.emplace_back(o.cost, o.gain);
  }
  std::sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first < b.first;
    return a.second > b.second;
  });
  std::vector<std::pair<double, double>> hull{{0.0, 0.0}};
  for (const auto& p : pts) {
    if (p.second <= hull.back().second) continue;
    if (p.first == hull.back().first) hull.pop_back();
    while (hull.size() >= 2) {
      const auto& a = hull[hull.size() - 2];
      const auto& b = hull.back();
      // Drop b when it lies on or below the chord a -> p.
      if ((b.second - a.second) * (p.first - a.first) <= (p.second - a.second) * (b.first - a.first)) {
        hull.pop_back();
      } else {
        break;
      }
    }
    hull.push_back(p);
  }
  std::vector<Segment> segs;
  for (std::size_t k = 1; k < hull.size(); ++k) {
    Segment s;
    s.dc = hull[k].first - hull[k - 1].first;
    s.dg = hull[k].second - hull[k - 1].second;
    s.slope = s.dc > 0.0 ? s.dg / s.dc : kInf;
    segs.push_back(s);
  }
  return segs;
}

// Branch and bound for ensembles whose every tree splits on a single feature.
// The margin is then a sum of per-feature contributions and the problem is a
// multiple-choice knapsack; nodes are bounded by its LP relaxation.
class SeparableSearch {
 public:
  SeparableSearch(const Ensemble& e, const CEProblem& prob, const CandidateGrid& grid)
      : e_(e), prob_(prob), grid_(grid), mm_(margin_model(e, prob)) {}

  CESolution run() {
    const auto m = prob_.dim();
    const auto splits = splits_per_feature(e_, m);
    std::vector<std::vector<std::size_t>> trees_of(m);
    for (std::size_t t = 0; t < e_.trees.size(); ++t) {
      for (const auto& n : e_.trees[t].nodes) {
        if (!n.is_leaf()) {
          trees_of[static_cast<std::size_t>(n.feature)].push_back(t);
          break;
        }
      }
    }
    need_ = mm_.target - mm_.score(e_, prob_.x0);

    std::vector<double> scratch(prob_.x0);
    options_.assign(m, {});
    std::vector<std::pair<double, std::size_t>> rank;
    for (std::size_t j = 0; j < m; ++j) {
      if (trees_of[j].empty() || grid_.features[j].values.size() < 2) continue;
      auto opts = interval_representatives(grid_.features[j], splits[j]);
      if (opts.size() < 2) continue;
      auto contribution = [&](double v) {
        scratch[j] = v;
        double s = 0.0;
        for (const auto t : trees_of[j]) {
          s += mm_.leaf_gain[t][static_cast<std::size_t>(e_.trees[t].leaf_index(scratch))];
        }
        scratch[j] = prob_.x0[j];
        return s;
      };
      const double base = contribution(prob_.x0[j]);
      for (auto& o : opts) o.gain = o.moved ? contribution(o.value) - base : 0.0;
      // Options strictly costlier than another with at least the same gain never appear in an optimum.
      std::vector<Option> kept;
      for (const auto& o : opts) {
        const bool dominated = std::any_of(opts.begin(), opts.end(), [&](const Option& p) {
          return p.cost < o.cost - kCostTol && p.gain >= o.gain;
        });
        if (!dominated) kept.push_back(o);
      }
      if (kept.size() < 2) continue;
      double best_gain = 0.0;
      for (const auto& o : kept) best_gain = std::max(best_gain, o.gain);
      options_[j] = std::move(kept);
      rank.emplace_back(-best_gain, j);
    }
    std::sort(rank.begin(), rank.end());
    for (const auto& [g, j] : rank) order_.push_back(j);

    // LP-relaxation segments for every suffix of the branching order.
    suffix_.assign(order_.size() + 1, {});
    for (std::size_t p = order_.size(); p-- > 0;) {
      auto segs = hull_segments(options_[order_[p]]);
      suffix_[p] = suffix_[p + 1];
      suffix_[p].insert(suffix_[p].end(), segs.begin(), segs.end());
      std::stable_sort(suffix_[p].begin(), suffix_[p].end(),
                       [](const Segment& a, const Segment& b) { return a.slope > b.slope; });
    }

    choice_.assign(m, 0);
    for (std::size_t j = 0; j < m; ++j) choice_[j] = grid_.features[j].origin;
    x_ = prob_.x0;
    dfs(0, 0.0, 0.0);
    return finish(prob_, inc_, inc_margin_, nodes_);
  }

 private:
  double lp_bound(std::size_t pos, double need) const {
    need -= kScoreTol;
    if (need <= 0.0) return 0.0;
    double acc = 0.0;
    for (const auto& s : suffix_[pos]) {
      if (s.dg >= need) return acc + s.dc * (need / s.dg);
      acc += s.dc;
      need -= s.dg;
    }
    return kInf;
  }

  bool try_complete() {
    const double margin = class_margin(e_, x_, prob_.y0, prob_.y_ce);
    if (!(margin >= prob_.margin)) return false;
    const double c = ce_cost(prob_, x_);
    const int mv = count_moved(prob_, x_);
    if (inc_.improves(c, mv, choice_)) {
      inc_.take(c, mv, choice_, x_);
      inc_margin_ = margin;
    }
    return true;
  }

  void dfs(std::size_t pos, double cost, double gain) {
    ++nodes_;
    if (gain >= need_ - kScoreTol && try_complete()) return;
    if (pos == order_.size()) return;
    const double lb = cost + lp_bound(pos, need_ - gain);
    if (lb == kInf || inc_.prunes(lb)) return;
    const auto j = order_[pos];
    for (const auto& o : options_[j]) {
      if (inc_.prunes(cost + o.cost)) continue;
      x_[j] = o.value;
      choice_[j] = o.index;
      dfs(pos + 1, cost + o.cost, gain + o.gain);
    }
    x_[j] = prob_.x0[j];
    choice_[j] = grid_.features[j].origin;
  }

  const Ensemble& e_;
  const CEProblem& prob_;
  const CandidateGrid& grid_;
  MarginModel mm_;
  double need_ = 0.0;
  std::vector<std::vector<Option>> options_;
  std::vector<std::size_t> order_;
  std::vector<std::vector<Segment>> suffix_;
  std::vector<std::size_t> choice_;
  std::vector<double> x_;
  Incumbent inc_;
  double inc_margin_ = 0.0;
  std::size_t nodes_ = 0;
};

// Branch and bound for arbitrary ensembles. A node fixes the coordinates of a
// prefix of the branching order; the remaining ones are free. Nodes are cut
// when the best reachable leaf of every tree cannot reach the target, or when
// the accumulated cost plus the cheapest further move exceeds the incumbent.
class GeneralSearch {
 public:
  GeneralSearch(const Ensemble& e, const CEProblem& prob, const CandidateGrid& grid)
      : e_(e), prob_(prob), grid_(grid), mm_(margin_model(e, prob)) {}

  CESolution run() {
    const auto m = prob_.dim();
    const auto splits = splits_per_feature(e_, m);
    options_.assign(m, {});
    pos_of_.assign(m, -1);
    min_val_.assign(m, 0.0);
    max_val_.assign(m, 0.0);
    x_ = prob_.x0;
    const double base = mm_.score(e_, x_);

    std::vector<std::pair<double, std::size_t>> rank;
    for (std::size_t j = 0; j < m; ++j) {
      if (splits[j].empty()) continue;
      auto opts = interval_representatives(grid_.features[j], splits[j]);
      if (opts.size() < 2) continue;
      double best_gain = -kInf;
      min_val_[j] = kInf;
      max_val_[j] = -kInf;
      for (const auto& o : opts) {
        min_val_[j] = std::min(min_val_[j], o.value);
        max_val_[j] = std::max(max_val_[j], o.value);
        if (!o.moved) continue;
        x_[j] = o.value;
        best_gain = std::max(best_gain, mm_.score(e_, x_) - base);
        x_[j] = prob_.x0[j];
      }
      options_[j] = std::move(opts);
      rank.emplace_back(-best_gain, j);
    }
    std::sort(rank.begin(), rank.end());
    for (const auto& [g, j] : rank) {
      pos_of_[j] = static_cast<int>(order_.size());
      order_.push_back(j);
    }
    // Cheapest single move among features at positions >= p.
    min_move_.assign(order_.size() + 1, kInf);
    for (std::size_t p = order_.size(); p-- > 0;) {
      double c = kInf;
      for (const auto& o : options_[order_[p]]) {
        if (o.moved) c = std::min(c, o.cost);
      }
      min_move_[p] = std::min(min_move_[p + 1], c);
    }

    choice_.assign(m, 0);
    for (std::size_t j = 0; j < m; ++j) choice_[j] = grid_.features[j].origin;
    dfs(0, 0.0);
    return finish(prob_, inc_, inc_margin_, nodes_);
  }

 private:
  double reachable_max(std::size_t t, int id, std::size_t pos) const {
    const auto& nodes = e_.trees[t].nodes;
    const auto& n = nodes[static_cast<std::size_t>(id)];
    if (n.is_leaf()) return mm_.leaf_gain[t][static_cast<std::size_t>(id)];
    const auto f = static_cast<std::size_t>(n.feature);
    if (pos_of_[f] >= static_cast<int>(pos)) {
      double best = -kInf;
      if (min_val_[f] <= n.threshold) best = std::max(best, reachable_max(t, n.left, pos));
      if (max_val_[f] > n.threshold) best = std::max(best, reachable_max(t, n.right, pos));
      return best;
    }
    return reachable_max(t, x_[f] <= n.threshold ? n.left : n.right, pos);
  }

  double score_upper_bound(std::size_t pos) const {
    double s = 0.0;
    for (std::size_t t = 0; t < e_.trees.size(); ++t) s += reachable_max(t, 0, pos);
    return s;
  }

  bool try_complete() {
    const double margin = class_margin(e_, x_, prob_.y0, prob_.y_ce);
    if (!(margin >= prob_.margin)) return false;
    const double c = ce_cost(prob_, x_);
    const int mv = count_moved(prob_, x_);
    if (inc_.improves(c, mv, choice_)) {
      inc_.take(c, mv, choice_, x_);
      inc_margin_ = margin;
    }
    return true;
  }

  void dfs(std::size_t pos, double cost) {
    ++nodes_;
    if (mm_.score(e_, x_) >= mm_.target - kScoreTol && try_complete()) return;
    if (pos == order_.size()) return;
    if (inc_.prunes(cost + min_move_[pos])) return;
    if (score_upper_bound(pos) < mm_.target - kScoreTol) return;
    const auto j = order_[pos];
    for (const auto& o : options_[j]) {
      if (inc_.prunes(cost + o.cost)) break;  // options are sorted by cost
      x_[j] = o.value;
      choice_[j] = o.index;
      dfs(pos + 1, cost + o.cost);
    }
    x_[j] = prob_.x0[j];
    choice_[j] = grid_.features[j].origin;
  }

  const Ensemble& e_;
  const CEProblem& prob_;
  const CandidateGrid& grid_;
  MarginModel mm_;
  std::vector<std::vector<Option>> options_;
  std::vector<std::size_t> order_;
  std::vector<int> pos_of_;
  std::vector<double> min_val_;
  std::vector<double> max_val_;
  std::vector<double> min_move_;
  std::vector<std::size_t> choice_;
  std::vector<double> x_;
  Incumbent inc_;
  double inc_margin_ = 0.0;
  std::size_t nodes_ = 0;
};

// ---- linear models --------------------------------------------------------

struct LinearMove {
  std::size_t feature = 0;
  double alpha = 0.0;  // |s * w_j|
  double dir = 0.0;    // +1 increases x_j, -1 decreases
  double cap = 0.0;    // max |delta| inside the box
};

// Minimum of sum(l1*d + l2*d^2) subject to sum(alpha*d) >= need, 0 <= d <= cap,
// over the given moves. Returns the step sizes, or nullopt when infeasible.
std::optional<std::vector<double>> inner_solve(const std::vector<LinearMove>& moves, double need,
                                               const CostWeights& w) {
  std::vector<double> d(moves.size(), 0.0);
  if (need <= 0.0) return d;
  double capacity = 0.0;
  for (const auto& mv : moves) capacity += mv.alpha * mv.cap;
  if (capacity < need * (1.0 - 1e-12)) return std::nullopt;

  if (w.l2 <= 0.0) {
    // Cheapest gain per unit of movement first.
    std::vector<std::size_t> idx(moves.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return moves[a].alpha > moves[b].alpha; });
    double rem = need;
    for (const auto k : idx) {
      if (rem <= 0.0) break;
      const double step = std::min(moves[k].cap, rem / moves[k].alpha);
      d[k] = step;
      rem -= step * moves[k].alpha;
    }
    return d;
  }

  // KKT water filling: d_j(mu) = clamp((mu*alpha_j - l1) / (2*l2), 0, cap_j).
  auto step_at = [&](std::size_t k, double mu) {
    return std::clamp((mu * moves[k].alpha - w.l1) / (2.0 * w.l2), 0.0, moves[k].cap);
  };
  auto supply = [&](double mu) {
    double s = 0.0;
    for (std::size_t k = 0; k < moves.size(); ++k) s += moves[k].alpha * step_at(k, mu);
    return s;
  };
  std::vector<double> breaks{0.0};
  for (const auto& mv : moves) {
    breaks.push_back(w.l1 / mv.alpha);
    breaks.push_back((w.l1 + 2.0 * w.l2 * mv.cap) / mv.alpha);
  }
  std::sort(breaks.begin(), breaks.end());
  double mu = breaks.back();
  double prev_mu = breaks.front();
  double prev_s = supply(prev_mu);
  for (std::size_t b = 1; b < breaks.size(); ++b) {
    const double s = supply(breaks[b]);
    if (s >= need) {
      mu = s > prev_s ? prev_mu + (need - prev_s) * (breaks[b] - prev_mu) / (s - prev_s) : breaks[b];
      break;
    }
    prev_mu = breaks[b];
    prev_s = s;
  }
  for (std::size_t k = 0; k < moves.size(); ++k) d[k] = step_at(k, mu);
  return d;
}

class LinearSearch {
 public:
  LinearSearch(const LinearModel& model, const CEProblem& prob) : model_(model), prob_(prob) {}

  CESolution run() {
    const auto m = prob_.dim();
    s_ = prob_.y_ce == 1 ? 1.0 : -1.0;
    need_ = 1.0 - s_ * model_.b;
    for (std::size_t j = 0; j < m; ++j) need_ -= s_ * model_.w[j] * prob_.x0[j];
    for (std::size_t j = 0; j < m; ++j) {
      const double a = s_ * model_.w[j];
      if (a == 0.0 || prob_.is_immutable(j)) continue;
      LinearMove mv{j, std::abs(a), a > 0.0 ? 1.0 : -1.0,
                    a > 0.0 ? prob_.hi(j) - prob_.x0[j] : prob_.x0[j] - prob_.lo(j)};
      if (mv.cap > 0.0) moves_.push_back(mv);
    }
    std::stable_sort(moves_.begin(), moves_.end(), [](const LinearMove& a, const LinearMove& b) {
      return a.alpha * a.cap > b.alpha * b.cap;
    });
    taken_.assign(moves_.size(), false);
    dfs(0);
    return finish(prob_, inc_, inc_margin_, nodes_);
  }

 private:
  double capacity_of(const std::vector<LinearMove>& mv) const {
    double c = 0.0;
    for (const auto& x : mv) c += x.alpha * x.cap;
    return c;
  }

  void evaluate(const std::vector<LinearMove>& chosen) {
    const auto d = inner_solve(chosen, need_, prob_.weights);
    if (!d) return;
    std::vector<double> x = prob_.x0;
    for (std::size_t k = 0; k < chosen.size(); ++k) {
      x[chosen[k].feature] = std::clamp(x[chosen[k].feature] + chosen[k].dir * (*d)[k],
                                        prob_.lo(chosen[k].feature), prob_.hi(chosen[k].feature));
    }
    const double margin = class_margin(model_, x, prob_.y_ce);
    if (margin < 1.0 - kLinearTol) return;
    const double c = ce_cost(prob_, x);
    const int mv = count_moved(prob_, x);
    std::vector<std::size_t> support;
    for (std::size_t j = 0; j < x.size(); ++j) {
      if (x[j] != prob_.x0[j]) support.push_back(j);
    }
    if (inc_.improves(c, mv, support)) {
      inc_.take(c, mv, std::move(support), std::move(x));
      inc_margin_ = margin;
    }
  }

  void dfs(std::size_t pos) {
    ++nodes_;
    std::vector<LinearMove> chosen;
    std::vector<LinearMove> pool;
    for (std::size_t k = 0; k < moves_.size(); ++k) {
      if (taken_[k]) chosen.push_back(moves_[k]);
      if (taken_[k] || k >= pos) pool.push_back(moves_[k]);
    }
    if (capacity_of(pool) < need_ * (1.0 - 1e-12)) return;
    // Fewest features that can cover the need, given the ones already chosen.
    std::size_t k_min = chosen.size();
    double covered = capacity_of(chosen);
    if (covered < need_) {
      std::vector<double> caps;
      for (std::size_t k = pos; k < moves_.size(); ++k) caps.push_back(moves_[k].alpha * moves_[k].cap);
      std::sort(caps.rbegin(), caps.rend());
      for (const auto c : caps) {
        ++k_min;
        covered += c;
        if (covered >= need_ * (1.0 - 1e-12)) break;
      }
    }
    const auto relaxed = inner_solve(pool, need_, prob_.weights);
    if (!relaxed) return;
    double lb = prob_.weights.l0 * static_cast<double>(k_min);
    for (std::size_t k = 0; k < pool.size(); ++k) {
      lb += prob_.weights.l1 * (*relaxed)[k] + prob_.weights.l2 * (*relaxed)[k] * (*relaxed)[k];
    }
    if (inc_.prunes(lb - 1e-12)) return;
    if (pos == moves_.size()) {
      evaluate(chosen);
      return;
    }
    taken_[pos] = true;
    dfs(pos + 1);
    taken_[pos] = false;
    dfs(pos + 1);
  }

  const LinearModel& model_;
  const CEProblem& prob_;
  double s_ = 1.0;
  double need_ = 0.0;
  std::vector<LinearMove> moves_;
  std::vector<bool> taken_;
  Incumbent inc_;
  double inc_margin_ = 0.0;
  std::size_t nodes_ = 0;
};

std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

double ce_cost(const CEProblem& prob, std::span<const double> x) {
  double c = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) c += coord_cost(prob, j, x[j]);
  return c;
}

double class_margin(const Ensemble& model, std::span<const double> x, int y0, int y_ce) {
  if (model.kind == EnsembleKind::GradientBoosting) {
    const double raw = predict(model, x).raw;
    return y_ce == 1 ? raw : -raw;
  }
  double w_target = 0.0;
  double w_orig = 0.0;
  for (const auto& t : model.trees) {
    const auto& leaf = t.nodes[static_cast<std::size_t>(t.leaf_index(x))];
    w_target += leaf.weights[static_cast<std::size_t>(y_ce)];
    w_orig += leaf.weights[static_cast<std::size_t>(y0)];
  }
  const auto n = static_cast<double>(model.trees.size());
  return w_target / n - w_orig / n;
}

double class_margin(const LinearModel& model, std::span<const double> x, int y_ce) {
  const double raw = predict(model, x).raw;
  return y_ce == 1 ? raw : -raw;
}

CEProblem make_problem(const TargetModel& model, std::span<const double> x0,
                       std::span<const double> eps, const CostWeights& weights, double margin) {
  CEProblem p;
  p.x0.assign(x0.begin(), x0.end());
  p.eps.assign(eps.begin(), eps.end());
  p.y0 = model.predict(x0).label;
  p.y_ce = 1 - p.y0;
  p.weights = weights;
  p.margin = margin;
  return p;
}

CandidateGrid build_candidates(const Ensemble& model, const CEProblem& prob) {
  validate(prob, model.n_features);
  const auto m = prob.dim();
  const auto splits = splits_per_feature(model, m);
  CandidateGrid grid;
  grid.features.resize(m);
  for (std::size_t j = 0; j < m; ++j) {
    auto& fc = grid.features[j];
    const double x0 = prob.x0[j];
    std::vector<double> vals;
    if (!prob.is_immutable(j)) {
      const double eps = prob.eps[j];
      const double lo = prob.lo(j);
      const double hi = prob.hi(j);
      std::vector<double> raw;
      for (const double c : splits[j]) {
        raw.push_back(c - eps);
        raw.push_back(c + eps);
      }
      if (lo > 0.0) raw.push_back(lo);
      if (hi < 1.0) raw.push_back(hi);
      for (const double v : raw) {
        if (v < lo || v > hi) continue;
        const bool clear = std::all_of(splits[j].begin(), splits[j].end(),
                                       [&](double c) { return std::abs(v - c) >= eps - 1e-12; });
        if (clear) vals.push_back(v);
      }
    }
    vals.push_back(x0);
    std::sort(vals.begin(), vals.end());
    vals.erase(std::unique(vals.begin(), vals.end()), vals.end());
    fc.values = std::move(vals);
    fc.origin = static_cast<std::size_t>(
        std::lower_bound(fc.values.begin(), fc.values.end(), x0) - fc.values.begin());
    fc.costs.reserve(fc.values.size());
    for (const double v : fc.values) fc.costs.push_back(coord_cost(prob, j, v));
  }
  return grid;
}

CESolution solve_ensemble_ce(const Ensemble& model, const CEProblem& prob) {
  const auto grid = build_candidates(model, prob);
  if (predict(model, prob.x0).label != prob.y0) {
    throw std::invalid_argument("y0 does not match the model's prediction at x0");
  }
  if (feature_separable(model)) return SeparableSearch(model, prob, grid).run();
  return GeneralSearch(model, prob, grid).run();
}

CESolution solve_linear_ce(const LinearModel& model, const CEProblem& prob) {
  validate(prob, model.w.size());
  if (predict(model, prob.x0).label != prob.y0) {
    throw std::invalid_argument("y0 does not match the model's prediction at x0");
  }
  return LinearSearch(model, prob).run();
}

CESolution solve_ce(const TargetModel& model, const CEProblem& prob) {
  if (const auto* e = std::get_if<Ensemble>(&model.body)) return solve_ensemble_ce(*e, prob);
  return solve_linear_ce(std::get<LinearModel>(model.body), prob);
}

CESolution brute_force_oracle(const Ensemble& model, const CEProblem& prob) {
  const auto grid = build_candidates(model, prob);
  const auto m = prob.dim();
  double combos = 1.0;
  for (const auto& f : grid.features) combos *= static_cast<double>(f.values.size());
  if (combos > 5e7) throw std::length_error("candidate grid too large for exhaustive search");

  Incumbent inc;
  double inc_margin = 0.0;
  std::vector<std::size_t> idx(m, 0);
  std::vector<double> x(m);
  std::size_t visited = 0;
  while (true) {
    for (std::size_t j = 0; j < m; ++j) x[j] = grid.features[j].values[idx[j]];
    ++visited;
    const double margin = class_margin(model, x, prob.y0, prob.y_ce);
    if (margin >= prob.margin) {
      const double c = ce_cost(prob, x);
      const int mv = count_moved(prob, x);
      if (inc.improves(c, mv, idx)) {
        inc.take(c, mv, idx, x);
        inc_margin = margin;
      }
    }
    std::size_t j = m;
    while (j-- > 0) {
      if (++idx[j] < grid.features[j].values.size()) break;
      idx[j] = 0;
    }
    if (j == static_cast<std::size_t>(-1)) break;
  }
  return finish(prob, inc, inc_margin, visited);
}

CESolution brute_force_oracle(const LinearModel& model, const CEProblem& prob, double resolution) {
  validate(prob, model.w.size());
  if (!(resolution > 0.0)) throw std::invalid_argument("grid resolution must be positive");
  const auto m = prob.dim();
  const double s = prob.y_ce == 1 ? 1.0 : -1.0;

  std::vector<std::vector<double>> axis(m);
  for (std::size_t j = 0; j < m; ++j) {
    axis[j].push_back(prob.x0[j]);
    if (prob.is_immutable(j)) continue;
    const double lo = prob.lo(j);
    const double hi = prob.hi(j);
    const auto steps = static_cast<std::size_t>(std::floor((hi - lo) / resolution + 1e-9));
    for (std::size_t k = 0; k <= steps; ++k) axis[j].push_back(lo + static_cast<double>(k) * resolution);
    axis[j].push_back(hi);
    std::sort(axis[j].begin(), axis[j].end());
    axis[j].erase(std::unique(axis[j].begin(), axis[j].end()), axis[j].end());
  }

  Incumbent inc;
  double inc_margin = 0.0;
  std::size_t visited = 0;
  std::vector<double> x(m);
  auto consider = [&](const std::vector<double>& pt) {
    const double margin = class_margin(model, pt, prob.y_ce);
    if (margin < 1.0 - kLinearTol) return;
    const double c = ce_cost(prob, pt);
    const int mv = count_moved(prob, pt);
    std::vector<std::size_t> support;
    for (std::size_t j = 0; j < m; ++j) {
      if (pt[j] != prob.x0[j]) support.push_back(j);
    }
    if (inc.improves(c, mv, support)) {
      inc.take(c, mv, std::move(support), pt);
      inc_margin = margin;
    }
  };

  for (std::size_t close = 0; close < m; ++close) {
    std::vector<std::size_t> idx(m, 0);
    while (true) {
      ++visited;
      double partial = s * model.b;
      for (std::size_t j = 0; j < m; ++j) {
        x[j] = j == close ? prob.x0[j] : axis[j][idx[j]];
        partial += s * model.w[j] * x[j];
      }
      const double need = 1.0 - partial;
      const double a = s * model.w[close];
      if (need <= 0.0) {
        consider(x);
      } else if (a != 0.0 && !prob.is_immutable(close)) {
        const double v = prob.x0[close] + need / a;
        if (v >= prob.lo(close) && v <= prob.hi(close)) {
          x[close] = v;
          consider(x);
        }
      }
      std::size_t j = m;
      while (j-- > 0) {
        if (j == close) continue;
        if (++idx[j] < axis[j].size()) break;
        idx[j] = 0;
      }
      if (j == static_cast<std::size_t>(-1)) break;
    }
  }
  return finish(prob, inc, inc_margin, visited);
}

std::vector<CESolution> solve_batch(const TargetModel& model, std::span<const CEProblem> problems,
                                    unsigned threads) {
  std::vector<CESolution> out(problems.size());
  if (threads == 0) threads = std::max(1U, std::thread::hardware_concurrency());
  threads = std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(1, problems.size())));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&] {
    while (true) {
      const auto i = next.fetch_add(1);
      if (i >= problems.size()) return;
      try {
        out[i] = solve_ce(model, problems[i]);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  if (threads <= 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(work);
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

void write_ce_csv(const std::filesystem::path& path, const TargetModel& model,
                  std::span<const std::size_t> row_index, std::span<const CESolution> solutions) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write counterfactual CSV: " + path.string());
  const auto& names = model.feature_names;
  out << "index,status,cost,changed_features";
  for (const auto& n : names) out << ',' << n << "_scaled";
  if (model.scaler) {
    for (const auto& n : names) out << ',' << n << "_orig";
  }
  out << '\n';
  for (std::size_t k = 0; k < solutions.size(); ++k) {
    const auto& sol = solutions[k];
    out << row_index[k] << ',' << (sol.status == CEStatus::Optimal ? "optimal" : "infeasible") << ',';
    if (sol.status != CEStatus::Optimal) {
      out << ",";
      for (std::size_t j = 0; j < names.size(); ++j) out << ',';
      if (model.scaler) {
        for (std::size_t j = 0; j < names.size(); ++j) out << ',';
      }
      out << '\n';
      continue;
    }
    out << fmt_double(sol.cost) << ',';
    for (std::size_t c = 0; c < sol.changed.size(); ++c) {
      out << (c ? ";" : "") << names[sol.changed[c]];
    }
    for (const double v : sol.x_ce) out << ',' << fmt_double(v);
    if (model.scaler) {
      for (const double v : inverse_transform(*model.scaler, sol.x_ce)) out << ',' << fmt_double(v);
    }
    out << '\n';
  }
}

}  // namespace fcca
