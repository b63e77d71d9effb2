#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fcca/data.hpp"
#include "fcca/thresholds.hpp"

namespace fcca {

/// Binary column "x[feature] > threshold".
struct BinColumn {
  std::size_t feature = 0;
  double threshold = 0.0;
};

struct BinDataset {
  std::size_t n_rows = 0;
  std::size_t n_cols = 0;
  std::vector<std::uint8_t> bits;  // row-major
  std::vector<int> labels;
  std::vector<BinColumn> columns;
  std::vector<std::string> feature_names;  // names of the original features
  std::vector<std::size_t> dropped;        // original features without thresholds

  std::span<const std::uint8_t> row(std::size_t i) const {
    return {bits.data() + i * n_cols, n_cols};
  }
  std::uint8_t at(std::size_t i, std::size_t c) const { return bits[i * n_cols + c]; }
  /// "name:threshold"
  std::string column_name(std::size_t c) const;
};

/// Bit is 0 when x <= t and 1 otherwise. Columns are ordered by feature, then threshold.
BinDataset binarize(const Dataset& ds, const QuantileSelection& sel);

/// Pattern -> (count of label 0, count of label 1). Keys are '0'/'1' strings.
using CellTable = std::map<std::string, std::array<std::size_t, 2>>;

CellTable cell_table(const BinDataset& bds);

struct DiscretizationMetrics {
  double eta = 0.0;
  double delta = 0.0;
  std::size_t n_rows = 0;
  std::size_t distinct_cells = 0;
  // Rows holding the minority label of their cell.
  std::size_t inconsistent = 0;
  std::size_t n_columns = 0;
  std::vector<std::size_t> dropped;
};

DiscretizationMetrics metrics(const BinDataset& bds);
/// Same quantities with cells given by identical continuous rows.
DiscretizationMetrics metrics(const Dataset& ds);

/// Majority label of a cell; ties go to 0.
inline int cell_majority(const std::array<std::size_t, 2>& counts) {
  return counts[1] > counts[0] ? 1 : 0;
}

struct CeilingCheck {
  double ceiling = 1.0;             // 1 - delta
  double accuracy = 0.0;            // accuracy under test
  bool within = false;              // accuracy <= ceiling + 1e-12
  std::size_t majority_correct = 0; // rows classified correctly by per-cell majority
  bool majority_attains = false;    // majority_correct == n - inconsistent
};

CeilingCheck consistency_ceiling_check(const BinDataset& bds, double train_accuracy);

/// Header: one "feature:threshold" per column, then "label".
void write_bin_csv(const std::filesystem::path& path, const BinDataset& bds);
BinDataset load_bin_csv(const std::filesystem::path& path);

/// {eta, delta, distinct_cells, n_columns, dropped_features}
std::string metrics_to_json(const DiscretizationMetrics& m, const std::vector<std::string>& feature_names);

/// Shortest decimal text that parses back to `v`.
std::string format_double(double v);

}  // namespace fcca
