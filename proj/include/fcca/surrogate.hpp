#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fcca/data.hpp"
#include "fcca/discretize.hpp"

namespace fcca {

/// Internal nodes send a row right when value[column] > threshold.
struct SurrogateNode {
  int column = -1;  // -1 marks a leaf
  double threshold = 0.5;
  int left = -1;
  int right = -1;
  int label = 0;
  std::size_t count0 = 0;  // training rows per label reaching the node
  std::size_t count1 = 0;

  bool is_leaf() const { return column < 0; }
};

enum class TreeKind { Cart, Optimal };

struct SurrogateTree {
  TreeKind kind = TreeKind::Cart;
  bool binary_input = true;
  std::vector<SurrogateNode> nodes;  // root at index 0
  // Column -> original feature (and threshold for binarized inputs).
  std::vector<BinColumn> provenance;
  std::vector<std::string> feature_names;
  std::size_t n_train = 0;
  double lambda_reg = 0.0;
  double objective = 0.0;  // training misclassification rate + lambda_reg * leaves
  bool certified_optimal = false;

  int predict(std::span<const std::uint8_t> bits) const;
  int predict(std::span<const double> x) const;
  int depth() const;
  std::size_t n_leaves() const;
  std::size_t n_features_used() const;
};

/// Greedy Gini tree. Ties go to the lowest column, then the lowest threshold.
SurrogateTree train_cart(const BinDataset& data, int max_depth, std::size_t min_leaf = 1);
/// Continuous variant with midpoint thresholds.
SurrogateTree train_cart(const Dataset& data, int max_depth, std::size_t min_leaf = 1);

struct OptimalTreeOptions {
  int max_depth = 3;
  double lambda_reg = 0.0;
  // Distinct columns allowed before the search refuses to run.
  std::size_t max_columns = 1024;
};

/// Minimizes misclassification rate + lambda_reg * leaves over all trees of
/// depth <= max_depth. Among equal objectives the tree with fewer leaves wins,
/// then the one with the lowest column at the first differing node in preorder.
SurrogateTree train_optimal(const BinDataset& data, const OptimalTreeOptions& opts);

/// misclassifications / n + lambda_reg * leaves
double tree_objective(const SurrogateTree& tree, const BinDataset& data, double lambda_reg);

struct TreeEval {
  double accuracy = 0.0;
  std::size_t n_leaves = 0;
  std::size_t n_features_used = 0;
  int depth = 0;
};

TreeEval evaluate(const SurrogateTree& tree, const BinDataset& data);
TreeEval evaluate(const SurrogateTree& tree, const Dataset& data);

std::string tree_to_json(const SurrogateTree& tree, const std::optional<Scaler>& scaler = {});
SurrogateTree tree_from_json(const std::string& text);
/// Indented if/else listing.
std::string render_text(const SurrogateTree& tree);

}  // namespace fcca
