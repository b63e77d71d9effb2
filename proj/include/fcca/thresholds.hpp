#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fcca/data.hpp"

namespace fcca {

/// An original point and its counterfactual, both in scaled units.
struct Couple {
  std::vector<double> x0;
  std::vector<double> x_ce;
};

struct ThresholdOrigin {
  std::size_t couple = 0;
  std::size_t feature = 0;
  double t = 0.0;
};

/// Candidate thresholds per feature with their multiplicities.
struct ThresholdBag {
  std::vector<std::map<double, std::size_t>> per_feature;
  std::size_t n_couples = 0;
  // Shifted values that fell outside the open interval (0,1).
  std::size_t discarded = 0;
  std::vector<ThresholdOrigin> provenance;

  std::size_t n_features() const { return per_feature.size(); }
  std::size_t n_distinct() const;
  // Sum of all multiplicities.
  std::size_t total() const;
  bool empty() const { return n_distinct() == 0; }
};

/// Rounds to the 1e-10 grid used for multiplicity aggregation.
double round_threshold(double t);

/// t_j = x_ce_j + eps_j * sign(x0_j - x_ce_j) for every coordinate with
/// |x0_j - x_ce_j| > eps_j. Values outside (0,1) are discarded and counted.
ThresholdBag extract_thresholds(std::span<const Couple> couples, std::span<const double> eps);

struct QuantileSelection {
  double q = 0.0;
  double f_q = 0.0;
  std::vector<std::vector<double>> tau;  // per feature, ascending

  std::size_t count() const;
};

/// Linear-interpolation quantile of the distinct thresholds' multiplicities;
/// keeps thresholds with multiplicity >= F_Q. Throws InfeasibleError on an empty bag.
QuantileSelection select_quantile(const ThresholdBag& bag, double q);

/// Selection holding every (feature, threshold) pair given, with q = 0.
QuantileSelection selection_from(std::vector<std::vector<double>> tau);

constexpr std::size_t kHeatmapBins = 20;

struct Heatmap {
  std::vector<double> levels;
  // cells[j][b]: largest level at which some threshold of feature j in bin b is selected.
  std::vector<std::array<std::optional<double>, kHeatmapBins>> cells;
};

Heatmap heatmap(const ThresholdBag& bag, std::span<const double> levels);
void write_heatmap_csv(const std::filesystem::path& path, const Heatmap& map,
                       const std::vector<std::string>& feature_names);

/// {feature: [{t_scaled, t_original_units, multiplicity}]}. With `only`, only
/// the selected thresholds are listed.
std::string thresholds_to_json(const ThresholdBag& bag, const std::vector<std::string>& feature_names,
                               const std::optional<Scaler>& scaler,
                               const QuantileSelection* only = nullptr);
/// Rebuilds the multiplicity table from `thresholds_to_json` output.
ThresholdBag thresholds_from_json(std::string_view text, const std::vector<std::string>& feature_names);

}  // namespace fcca
