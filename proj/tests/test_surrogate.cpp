#include <random>

#include "doctest.h"
#include "fcca/error.hpp"
#include "fcca/surrogate.hpp"
#include "oracles.hpp"

using namespace fcca;

namespace {

BinDataset bin_table(std::size_t cols, const std::vector<std::vector<std::uint8_t>>& rows,
                     const std::vector<int>& labels) {
  BinDataset b;
  b.n_rows = rows.size();
  b.n_cols = cols;
  for (const auto& r : rows) b.bits.insert(b.bits.end(), r.begin(), r.end());
  b.labels = labels;
  for (std::size_t c = 0; c < cols; ++c) {
    b.columns.push_back({c, 0.5});
    b.feature_names.push_back("f" + std::to_string(c));
  }
  return b;
}

BinDataset xor_table() {
  return bin_table(2, {{0, 0}, {0, 1}, {1, 0}, {1, 1}, {0, 0}, {0, 1}, {1, 0}, {1, 1}},
                   {0, 1, 1, 0, 0, 1, 1, 0});
}

BinDataset random_bin(std::mt19937_64& rng, std::size_t n, std::size_t cols) {
  std::vector<std::vector<std::uint8_t>> rows;
  std::vector<int> labels;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::uint8_t> r;
    for (std::size_t c = 0; c < cols; ++c) r.push_back(static_cast<std::uint8_t>(rng() % 2));
    const int noisy = rng() % 6 == 0 ? 1 : 0;
    labels.push_back(((r[0] & r[1 % cols]) | r[2 % cols]) ^ noisy);
    rows.push_back(r);
  }
  auto b = bin_table(cols, rows, labels);
  // Several columns per original feature.
  for (std::size_t c = 0; c < cols; ++c) b.columns[c] = {c / 2, 0.1 * static_cast<double>(c % 2 + 1)};
  b.feature_names.resize((cols + 1) / 2);
  return b;
}

bool columns_unique_on_paths(const SurrogateTree& t, int node, std::vector<int>& seen) {
  const auto& nd = t.nodes[static_cast<std::size_t>(node)];
  if (nd.is_leaf()) return true;
  for (const int c : seen) {
    if (c == nd.column) return false;
  }
  seen.push_back(nd.column);
  const bool ok = columns_unique_on_paths(t, nd.left, seen) && columns_unique_on_paths(t, nd.right, seen);
  seen.pop_back();
  return ok;
}

bool leaves_are_majorities(const SurrogateTree& t) {
  for (const auto& nd : t.nodes) {
    if (nd.is_leaf() && nd.label != (nd.count1 > nd.count0 ? 1 : 0)) return false;
  }
  return true;
}

}  // namespace

TEST_SUITE("surrogate") {
  TEST_CASE("pure labels give a single leaf") {
    const auto b = bin_table(2, {{0, 1}, {1, 0}, {1, 1}}, {1, 1, 1});
    CHECK(train_cart(b, 3).n_leaves() == 1);
    const auto opt = train_optimal(b, {3, 0.0});
    CHECK(opt.n_leaves() == 1);
    CHECK(evaluate(opt, b).accuracy == 1.0);
    CHECK(evaluate(opt, b).n_features_used == 0);
  }

  TEST_CASE("XOR defeats a depth-1 greedy tree and not the optimal depth-2 tree") {
    const auto b = xor_table();
    CHECK(evaluate(train_cart(b, 1), b).accuracy == 0.5);
    const auto opt = train_optimal(b, {2, 0.0});
    CHECK(opt.certified_optimal);
    CHECK(evaluate(opt, b).accuracy == 1.0);
    CHECK(opt.n_leaves() == 4);
    CHECK(opt.objective == 0.0);
  }

  TEST_CASE("heavy regularization leaves a single majority leaf") {
    const auto b = xor_table();
    const auto opt = train_optimal(b, {3, 1.0});
    CHECK(opt.n_leaves() == 1);
    CHECK(opt.objective == doctest::Approx(0.5 + 1.0));
  }

  TEST_CASE("optimal trees match exhaustive enumeration") {
    std::mt19937_64 rng(123);
    for (int k = 0; k < 100; ++k) {
      const std::size_t cols = 2 + rng() % 7;
      const std::size_t n = 8 + rng() % 57;
      const auto b = random_bin(rng, n, cols);
      const int depth = 1 + static_cast<int>(rng() % 2);
      const double lambda = (rng() % 4) * 0.01;
      const auto opt = train_optimal(b, {depth, lambda});
      const double best = oracle::best_tree_objective(b, depth, lambda);
      CHECK(opt.objective == doctest::Approx(best).epsilon(1e-12));
      CHECK(tree_objective(opt, b, lambda) == doctest::Approx(opt.objective).epsilon(1e-12));
      CHECK(opt.depth() <= depth);
      std::vector<int> seen;
      CHECK(columns_unique_on_paths(opt, 0, seen));
      CHECK(leaves_are_majorities(opt));
    }
  }

  TEST_CASE("depth, dominance and ceiling properties") {
    std::mt19937_64 rng(55);
    for (int k = 0; k < 30; ++k) {
      const auto b = random_bin(rng, 60 + rng() % 60, 6 + rng() % 6);
      const double lambda = 10.0 / static_cast<double>(b.n_rows);
      const auto delta = oracle::rates(b).delta;
      double prev = 1e9;
      for (int d = 1; d <= 4; ++d) {
        const auto opt = train_optimal(b, {d, lambda});
        const auto cart = train_cart(b, d);
        CHECK(opt.objective <= prev + 1e-12);
        CHECK(opt.objective <= tree_objective(cart, b, lambda) + 1e-12);
        CHECK(evaluate(opt, b).accuracy <= 1.0 - delta + 1e-12);
        CHECK(evaluate(cart, b).accuracy <= 1.0 - delta + 1e-12);
        std::vector<int> seen;
        CHECK(columns_unique_on_paths(cart, 0, seen));
        CHECK(leaves_are_majorities(cart));
        prev = opt.objective;
      }
    }
  }

  TEST_CASE("features used counts original features") {
    auto b = bin_table(2, {{0, 0}, {1, 0}, {1, 1}, {1, 1}}, {0, 1, 0, 0});
    b.columns = {{0, 0.2}, {0, 0.4}};
    b.feature_names = {"a"};
    const auto opt = train_optimal(b, {2, 0.0});
    REQUIRE(opt.n_leaves() == 3);
    CHECK(evaluate(opt, b).n_features_used == 1);
  }

  TEST_CASE("continuous CART splits at midpoints") {
    Dataset ds;
    ds.n_rows = 4;
    ds.n_cols = 1;
    ds.values = {0.1, 0.2, 0.6, 0.8};
    ds.labels = {0, 0, 1, 1};
    ds.feature_names = {"x"};
    const auto t = train_cart(ds, 2);
    REQUIRE(t.n_leaves() == 2);
    CHECK(t.nodes[0].threshold == doctest::Approx(0.4));
    CHECK(evaluate(t, ds).accuracy == 1.0);
    CHECK_THROWS_AS(evaluate(t, xor_table()), DataError);
  }

  TEST_CASE("JSON and text rendering") {
    auto b = xor_table();
    b.columns = {{0, 0.51}, {1, 0.25}};
    b.feature_names = {"a04", "b"};
    const auto opt = train_optimal(b, {2, 0.0});
    const auto text = tree_to_json(opt);
    CHECK(text.find("feature `a04` > 0.51") != std::string::npos);
    const auto back = tree_from_json(text);
    CHECK(back.n_leaves() == opt.n_leaves());
    CHECK(back.objective == opt.objective);
    CHECK(evaluate(back, b).accuracy == 1.0);
    CHECK(render_text(opt).find("a04") != std::string::npos);
    CHECK_THROWS_AS(tree_from_json("{"), DataError);
  }

  TEST_CASE("invalid inputs") {
    BinDataset none = bin_table(0, {{}, {}}, {0, 1});
    CHECK_THROWS_AS(train_optimal(none, {2, 0.0}), DataError);
    std::mt19937_64 rng(2);
    const auto b = random_bin(rng, 20, 6);
    CHECK_THROWS_AS(train_optimal(b, {2, 0.0, 3}), ConfigError);
    CHECK_THROWS_AS(train_optimal(b, {0, 0.0}), ConfigError);
    CHECK_THROWS_AS(train_cart(b, 0), ConfigError);
  }
}
