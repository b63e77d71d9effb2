#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "fcca/data.hpp"

namespace fcca {

/// Node of an axis-aligned binary tree. Rows with x[feature] <= threshold go left.
struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double value = 0.0;                   // gradient-boosting leaf output
  std::array<double, 2> weights{};      // random-forest class weights
  double gain = 0.0;                    // training impurity decrease of the split

  bool is_leaf() const { return feature < 0; }
};

struct Tree {
  std::vector<TreeNode> nodes;  // root at index 0

  int leaf_index(std::span<const double> x) const;
  int depth() const;
  std::size_t n_leaves() const;
};

enum class EnsembleKind { RandomForest, GradientBoosting };

/// Tree ensemble.
///
/// Gradient boosting: raw(x) = init_raw + learning_rate * sum_t value(leaf_t(x)),
/// label 1 iff raw(x) >= 0. Random forest: class weights averaged over trees,
/// label 1 iff avg w1 >= avg w0.
struct Ensemble {
  EnsembleKind kind = EnsembleKind::GradientBoosting;
  std::vector<Tree> trees;
  double learning_rate = 1.0;
  double init_raw = 0.0;
  std::size_t n_features = 0;
};

/// Linear margin classifier: label 1 iff w.x + b >= 0.
struct LinearModel {
  std::vector<double> w;
  double b = 0.0;
};

struct Prediction {
  int label = 0;
  // Probability of the predicted label (always >= 0.5).
  double confidence = 0.5;
  // Probability of class 1.
  double p_positive = 0.5;
  // Raw decision value: boosting margin, forest weight difference w1 - w0,
  // or w.x + b for linear models.
  double raw = 0.0;
};

Prediction predict(const Ensemble& model, std::span<const double> x);
Prediction predict(const LinearModel& model, std::span<const double> x);

struct GbParams {
  int n_estimators = 100;
  int max_depth = 1;
  double learning_rate = 0.1;
  std::uint64_t seed = 0;
};

struct RfParams {
  int n_trees = 100;
  int max_depth = 4;
  int max_features = 0;  // 0 selects floor(sqrt(m))
  std::uint64_t seed = 0;
};

struct LinearParams {
  double l2 = 1e-3;
  int epochs = 200;
  std::uint64_t seed = 0;
};

/// Logistic-loss boosting of squared-error regression trees with Newton leaves.
Ensemble train_gb(const Dataset& ds, const GbParams& params);
/// Bootstrap + Gini trees; each leaf stores its class frequencies.
Ensemble train_rf(const Dataset& ds, const RfParams& params);
/// L2-regularized hinge loss fitted by stochastic subgradient descent.
LinearModel train_linear(const Dataset& ds, const LinearParams& params);

struct SplitThreshold {
  std::size_t feature = 0;
  double threshold = 0.0;
  double gain = 0.0;  // summed training impurity decrease of the splits using this pair
};

/// Distinct (feature, threshold) pairs used by the ensemble, sorted by feature
/// then threshold.
std::vector<SplitThreshold> split_thresholds(const Ensemble& model);

enum class TargetKind { GradientBoosting, RandomForest, Linear };

std::string to_string(TargetKind kind);
TargetKind parse_target_kind(std::string_view s);

/// A fitted target classifier together with the feature space it lives in.
struct TargetModel {
  std::variant<Ensemble, LinearModel> body;
  std::vector<std::string> feature_names;
  std::optional<Scaler> scaler;

  TargetKind kind() const;
  std::size_t n_features() const;
  Prediction predict(std::span<const double> x) const;
  double accuracy(const Dataset& ds) const;
};

struct TargetParams {
  TargetKind kind = TargetKind::GradientBoosting;
  GbParams gb;
  RfParams rf;
  LinearParams linear;
};

TargetModel fit_target(const Dataset& ds, const TargetParams& params);

/// JSON document tagged "fcca-model-v1". Round trips reproduce predictions bit-exactly.
std::string model_to_json(const TargetModel& model);
TargetModel model_from_json(std::string_view text);
void save_model(const std::filesystem::path& path, const TargetModel& model);
TargetModel load_model(const std::filesystem::path& path);

}  // namespace fcca
