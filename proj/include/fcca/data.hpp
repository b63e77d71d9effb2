#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace fcca {

/// Per-feature min-max map between original units and [0,1].
struct Scaler {
  std::vector<double> min;
  std::vector<double> max;

  double transform(std::size_t feature, double value) const;
  double inverse(std::size_t feature, double value) const;
  std::size_t size() const { return min.size(); }
};

/// Row-major tabular dataset with binary labels.
///
/// After `scale_minmax` every value lies in [0,1] and `scaler` holds the
/// original ranges. `eps` is filled by `compute_feature_eps` (or left empty).
struct Dataset {
  std::size_t n_rows = 0;
  std::size_t n_cols = 0;
  std::vector<double> values;
  std::vector<int> labels;
  std::vector<std::string> feature_names;
  std::vector<double> eps;
  std::optional<Scaler> scaler;
  // Original label spelling for class 0 and class 1.
  std::vector<std::string> label_values;
  std::vector<std::string> warnings;

  std::span<const double> row(std::size_t i) const {
    return {values.data() + i * n_cols, n_cols};
  }
  double at(std::size_t i, std::size_t j) const { return values[i * n_cols + j]; }
  std::vector<double> column(std::size_t j) const;
};

/// Parses a comma-separated table with a header row. The label column is
/// `label_column` when given, otherwise the last column. Labels must take
/// exactly two values; they map in ascending order to 0 and 1 (numerically
/// when both parse as numbers, lexicographically otherwise). Constant
/// feature columns are dropped and reported in `warnings` as "dropped: <name>".
Dataset parse_csv(std::istream& in, const std::optional<std::string>& label_column = {},
                  const std::string& source = "<stream>");
Dataset load_csv(const std::filesystem::path& path,
                 const std::optional<std::string>& label_column = {});

/// Fits a min-max scaler on `ds` and returns the scaled copy.
Dataset scale_minmax(const Dataset& ds);

/// Applies an existing scaler. Values outside the fitted range are clipped to [0,1].
Dataset apply_scaler(const Dataset& ds, const Scaler& scaler);

std::vector<double> inverse_transform(const Scaler& scaler, std::span<const double> row);

/// Smallest gap between consecutive distinct values of each feature.
/// A feature with fewer than two distinct values gets resolution 1.0.
std::vector<double> compute_feature_eps(const Dataset& ds);

Dataset subset(const Dataset& ds, std::span<const std::size_t> indices);

/// Reorders (and restricts) the feature columns to `names`.
Dataset select_columns(const Dataset& ds, const std::vector<std::string>& names);

/// Cross-validation plan over a dataset of `assignments.size()` rows.
/// Rows in the external test set carry fold index -1.
struct FoldPlan {
  int k = 0;
  std::vector<int> assignments;
  std::vector<std::size_t> external_test;
  std::uint64_t seed = 0;

  std::vector<std::size_t> pool() const;
  std::vector<std::size_t> train_indices(int fold) const;
  std::vector<std::size_t> test_indices(int fold) const;
};

/// Seeded k-fold partition. When `cap` is set and smaller than `n`, a uniform
/// random subset of `cap` rows forms the CV pool and the rest becomes the
/// external test set.
FoldPlan make_folds(std::size_t n, int k, std::optional<std::size_t> cap, std::uint64_t seed);

enum class SyntheticKind { Boxes, Oblique };

/// Deterministic synthetic binary-classification tables (unscaled, values
/// rounded to three decimals, with a small fraction of flipped labels).
/// Boxes: axis-aligned rule on 3 of 5 features. Oblique: linear boundary on 4 features.
Dataset make_synthetic(SyntheticKind kind, std::size_t n, std::uint64_t seed);

}  // namespace fcca
