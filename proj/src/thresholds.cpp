#include "fcca/thresholds.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "fcca/error.hpp"
#include "json.hpp"

namespace fcca {

namespace {

using json = nlohmann::ordered_json;

double quantile_linear(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  if (lo + 1 >= v.size()) return v.back();
  const double frac = pos - static_cast<double>(lo);
  return v[lo] + frac * (v[lo + 1] - v[lo]);
}

}  // namespace

std::size_t ThresholdBag::n_distinct() const {
  std::size_t n = 0;
  for (const auto& f : per_feature) n += f.size();
  return n;
}

std::size_t ThresholdBag::total() const {
  std::size_t n = 0;
  for (const auto& f : per_feature) {
    for (const auto& [t, c] : f) n += c;
  }
  return n;
}

double round_threshold(double t) { return std::round(t * 1e10) / 1e10; }

ThresholdBag extract_thresholds(std::span<const Couple> couples, std::span<const double> eps) {
  ThresholdBag bag;
  bag.per_feature.resize(eps.size());
  bag.n_couples = couples.size();
  for (std::size_t c = 0; c < couples.size(); ++c) {
    const auto& [x0, x_ce] = couples[c];
    if (x0.size() != eps.size() || x_ce.size() != eps.size()) {
      throw DataError("counterfactual couple has the wrong dimension");
    }
    for (std::size_t j = 0; j < eps.size(); ++j) {
      const double diff = x0[j] - x_ce[j];
      if (!(std::abs(diff) > eps[j])) continue;
      const double t = round_threshold(x_ce[j] + (diff > 0.0 ? eps[j] : -eps[j]));
      if (!(t > 0.0 && t < 1.0)) {
        ++bag.discarded;
        continue;
      }
      ++bag.per_feature[j][t];
      bag.provenance.push_back({c, j, t});
    }
  }
  return bag;
}

std::size_t QuantileSelection::count() const {
  std::size_t n = 0;
  for (const auto& f : tau) n += f.size();
  return n;
}

QuantileSelection select_quantile(const ThresholdBag& bag, double q) {
  if (!(q >= 0.0 && q <= 1.0)) throw ConfigError("quantile Q must lie in [0,1]");
  std::vector<double> mult;
  for (const auto& f : bag.per_feature) {
    for (const auto& [t, c] : f) mult.push_back(static_cast<double>(c));
  }
  if (mult.empty()) throw InfeasibleError("no thresholds extracted");
  QuantileSelection sel;
  sel.q = q;
  sel.f_q = quantile_linear(std::move(mult), q);
  sel.tau.resize(bag.n_features());
  for (std::size_t j = 0; j < bag.n_features(); ++j) {
    for (const auto& [t, c] : bag.per_feature[j]) {
      if (static_cast<double>(c) >= sel.f_q) sel.tau[j].push_back(t);
    }
  }
  return sel;
}

QuantileSelection selection_from(std::vector<std::vector<double>> tau) {
  QuantileSelection sel;
  for (auto& f : tau) {
    std::sort(f.begin(), f.end());
    f.erase(std::unique(f.begin(), f.end()), f.end());
  }
  sel.tau = std::move(tau);
  return sel;
}

Heatmap heatmap(const ThresholdBag& bag, std::span<const double> levels) {
  Heatmap map;
  map.levels.assign(levels.begin(), levels.end());
  map.cells.resize(bag.n_features());
  if (bag.empty()) return map;
  for (const double q : levels) {
    const auto sel = select_quantile(bag, q);
    for (std::size_t j = 0; j < sel.tau.size(); ++j) {
      for (const double t : sel.tau[j]) {
        const auto b = std::min(static_cast<std::size_t>(t / 0.05), kHeatmapBins - 1);
        auto& cell = map.cells[j][b];
        if (!cell || *cell < q) cell = q;
      }
    }
  }
  return map;
}

void write_heatmap_csv(const std::filesystem::path& path, const Heatmap& map,
                       const std::vector<std::string>& feature_names) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write heatmap CSV: " + path.string());
  out << "feature";
  for (std::size_t b = 0; b < kHeatmapBins; ++b) {
    out << ',' << std::fixed << std::setprecision(2) << 0.05 * static_cast<double>(b) << '-'
        << 0.05 * static_cast<double>(b + 1);
  }
  out << '\n' << std::defaultfloat << std::setprecision(17);
  for (std::size_t j = 0; j < map.cells.size(); ++j) {
    out << feature_names.at(j);
    for (const auto& cell : map.cells[j]) {
      out << ',';
      if (cell) out << *cell;
    }
    out << '\n';
  }
}

std::string thresholds_to_json(const ThresholdBag& bag, const std::vector<std::string>& feature_names,
                               const std::optional<Scaler>& scaler, const QuantileSelection* only) {
  json doc = json::object();
  for (std::size_t j = 0; j < bag.n_features(); ++j) {
    json list = json::array();
    for (const auto& [t, c] : bag.per_feature[j]) {
      if (only && !std::binary_search(only->tau[j].begin(), only->tau[j].end(), t)) continue;
      json e;
      e["t_scaled"] = t;
      e["t_original_units"] = scaler ? scaler->inverse(j, t) : t;
      e["multiplicity"] = c;
      list.push_back(std::move(e));
    }
    if (!list.empty()) doc[feature_names.at(j)] = std::move(list);
  }
  return doc.dump(1);
}

ThresholdBag thresholds_from_json(std::string_view text, const std::vector<std::string>& feature_names) {
  ThresholdBag bag;
  bag.per_feature.resize(feature_names.size());
  try {
    const auto doc = json::parse(text);
    for (const auto& [name, list] : doc.items()) {
      const auto it = std::find(feature_names.begin(), feature_names.end(), name);
      if (it == feature_names.end()) throw DataError("thresholds refer to unknown feature " + name);
      auto& f = bag.per_feature[static_cast<std::size_t>(it - feature_names.begin())];
      for (const auto& e : list) {
        f[e.at("t_scaled").get<double>()] += e.at("multiplicity").get<std::size_t>();
      }
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed thresholds JSON: ") + e.what());
  }
  return bag;
}

}  // namespace fcca
