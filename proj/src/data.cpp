#include "fcca/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "fcca/error.hpp"

namespace fcca {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  s = s.substr(first, last - first + 1);
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
  return std::string(s);
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.push_back(trim(std::string_view(line).substr(start, pos - start)));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

std::optional<double> parse_double(const std::string& s) {
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  const char* begin = s.data();
  if (*begin == '+') ++begin;
  const auto [ptr, ec] = std::from_chars(begin, s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

}  // namespace

double Scaler::transform(std::size_t feature, double value) const {
  return (value - min[feature]) / (max[feature] - min[feature]);
}

double Scaler::inverse(std::size_t feature, double value) const {
  return min[feature] + value * (max[feature] - min[feature]);
}

std::vector<double> Dataset::column(std::size_t j) const {
  std::vector<double> out(n_rows);
  for (std::size_t i = 0; i < n_rows; ++i) out[i] = at(i, j);
  return out;
}

Dataset parse_csv(std::istream& in, const std::optional<std::string>& label_column,
                  const std::string& source) {
  std::string line;
  if (!std::getline(in, line)) throw DataError(source + ": empty file");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  const auto header = split_line(line);
  if (header.size() < 2) throw DataError(source + ": need at least one feature and a label column");

  std::size_t label_idx = header.size() - 1;
  if (label_column) {
    const auto it = std::find(header.begin(), header.end(), *label_column);
    if (it == header.end()) throw DataError(source + ": label column '" + *label_column + "' not found");
    label_idx = static_cast<std::size_t>(it - header.begin());
  }

  std::vector<std::vector<double>> cols(header.size());
  std::vector<std::string> raw_labels;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_line(line);
    if (cells.size() != header.size()) {
      throw DataError(source + ": row " + std::to_string(line_no) + " has " +
                      std::to_string(cells.size()) + " cells, expected " +
                      std::to_string(header.size()));
    }
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (c == label_idx) {
        if (cells[c].empty()) {
          throw DataError(source + ": missing label at row " + std::to_string(line_no));
        }
        raw_labels.push_back(cells[c]);
        continue;
      }
      const auto v = parse_double(cells[c]);
      if (!v) {
        throw DataError(source + ": non-numeric value '" + cells[c] + "' at row " +
                        std::to_string(line_no) + ", column '" + header[c] + "'");
      }
      cols[c].push_back(*v);
    }
  }
  if (raw_labels.empty()) throw DataError(source + ": no data rows");

  // Label mapping: ascending order, numeric when possible.
  std::vector<std::string> distinct(raw_labels.begin(), raw_labels.end());
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (distinct.size() != 2) {
    throw DataError(source + ": label column must hold exactly two distinct values, found " +
                    std::to_string(distinct.size()));
  }
  const auto a = parse_double(distinct[0]);
  const auto b = parse_double(distinct[1]);
  if (a && b && *b < *a) std::swap(distinct[0], distinct[1]);

  Dataset ds;
  ds.label_values = distinct;
  ds.n_rows = raw_labels.size();
  ds.labels.reserve(ds.n_rows);
  for (const auto& l : raw_labels) ds.labels.push_back(l == distinct[1] ? 1 : 0);

  std::vector<std::size_t> kept;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c == label_idx) continue;
    const auto [lo, hi] = std::minmax_element(cols[c].begin(), cols[c].end());
    if (*lo == *hi) {
      ds.warnings.push_back("dropped: " + header[c]);
      continue;
    }
    kept.push_back(c);
  }
  if (kept.empty()) throw DataError(source + ": no non-constant feature columns");

  ds.n_cols = kept.size();
  ds.values.resize(ds.n_rows * ds.n_cols);
  for (std::size_t j = 0; j < kept.size(); ++j) {
    ds.feature_names.push_back(header[kept[j]]);
    for (std::size_t i = 0; i < ds.n_rows; ++i) ds.values[i * ds.n_cols + j] = cols[kept[j]][i];
  }
  return ds;
}

Dataset load_csv(const std::filesystem::path& path, const std::optional<std::string>& label_column) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset file: " + path.string());
  return parse_csv(in, label_column, path.string());
}

Dataset scale_minmax(const Dataset& ds) {
  Scaler sc;
  sc.min.resize(ds.n_cols);
  sc.max.resize(ds.n_cols);
  for (std::size_t j = 0; j < ds.n_cols; ++j) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (std::size_t i = 0; i < ds.n_rows; ++i) {
      lo = std::min(lo, ds.at(i, j));
      hi = std::max(hi, ds.at(i, j));
    }
    if (!(hi > lo)) {
      throw DataError("feature '" + ds.feature_names[j] + "' has zero range and cannot be scaled");
    }
    sc.min[j] = lo;
    sc.max[j] = hi;
  }
  return apply_scaler(ds, sc);
}

Dataset apply_scaler(const Dataset& ds, const Scaler& scaler) {
  if (scaler.size() != ds.n_cols) throw DataError("scaler dimension does not match dataset");
  Dataset out = ds;
  for (std::size_t i = 0; i < ds.n_rows; ++i) {
    for (std::size_t j = 0; j < ds.n_cols; ++j) {
      out.values[i * ds.n_cols + j] = std::clamp(scaler.transform(j, ds.at(i, j)), 0.0, 1.0);
    }
  }
  out.scaler = scaler;
  out.eps.clear();
  return out;
}

std::vector<double> inverse_transform(const Scaler& scaler, std::span<const double> row) {
  std::vector<double> out(row.size());
  for (std::size_t j = 0; j < row.size(); ++j) out[j] = scaler.inverse(j, row[j]);
  return out;
}

std::vector<double> compute_feature_eps(const Dataset& ds) {
  std::vector<double> eps(ds.n_cols, 1.0);
  std::vector<double> col;
  for (std::size_t j = 0; j < ds.n_cols; ++j) {
    col = ds.column(j);
    std::sort(col.begin(), col.end());
    col.erase(std::unique(col.begin(), col.end()), col.end());
    if (col.size() < 2) continue;
    double gap = std::numeric_limits<double>::infinity();
    for (std::size_t k = 1; k < col.size(); ++k) gap = std::min(gap, col[k] - col[k - 1]);
    eps[j] = gap;
  }
  return eps;
}

Dataset subset(const Dataset& ds, std::span<const std::size_t> indices) {
  Dataset out;
  out.n_rows = indices.size();
  out.n_cols = ds.n_cols;
  out.feature_names = ds.feature_names;
  out.scaler = ds.scaler;
  out.label_values = ds.label_values;
  out.values.reserve(out.n_rows * out.n_cols);
  out.labels.reserve(out.n_rows);
  for (const auto i : indices) {
    if (i >= ds.n_rows) throw DataError("row index out of range in subset");
    const auto r = ds.row(i);
    out.values.insert(out.values.end(), r.begin(), r.end());
    out.labels.push_back(ds.labels[i]);
  }
  return out;
}

Dataset select_columns(const Dataset& ds, const std::vector<std::string>& names) {
  std::vector<std::size_t> src;
  for (const auto& name : names) {
    const auto it = std::find(ds.feature_names.begin(), ds.feature_names.end(), name);
    if (it == ds.feature_names.end()) throw DataError("dataset has no feature named '" + name + "'");
    src.push_back(static_cast<std::size_t>(it - ds.feature_names.begin()));
  }
  Dataset out = ds;
  out.n_cols = names.size();
  out.feature_names = names;
  out.values.assign(out.n_rows * out.n_cols, 0.0);
  for (std::size_t i = 0; i < ds.n_rows; ++i) {
    for (std::size_t j = 0; j < src.size(); ++j) out.values[i * out.n_cols + j] = ds.at(i, src[j]);
  }
  if (ds.scaler) {
    Scaler sc;
    for (const auto s : src) {
      sc.min.push_back(ds.scaler->min[s]);
      sc.max.push_back(ds.scaler->max[s]);
    }
    out.scaler = sc;
  }
  if (!ds.eps.empty()) {
    out.eps.clear();
    for (const auto s : src) out.eps.push_back(ds.eps[s]);
  }
  return out;
}

std::vector<std::size_t> FoldPlan::pool() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    if (assignments[i] >= 0) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> FoldPlan::train_indices(int fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    if (assignments[i] >= 0 && assignments[i] != fold) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> FoldPlan::test_indices(int fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    if (assignments[i] == fold) out.push_back(i);
  }
  return out;
}

FoldPlan make_folds(std::size_t n, int k, std::optional<std::size_t> cap, std::uint64_t seed) {
  if (k < 2) throw ConfigError("fold count must be at least 2");
  if (cap && *cap > n) throw ConfigError("training cap exceeds the number of rows");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  FoldPlan plan;
  plan.k = k;
  plan.seed = seed;
  plan.assignments.assign(n, -1);

  std::size_t pool_size = n;
  if (cap && *cap < n) {
    std::shuffle(order.begin(), order.end(), rng);
    pool_size = *cap;
    plan.external_test.assign(order.begin() + static_cast<std::ptrdiff_t>(pool_size), order.end());
    std::sort(plan.external_test.begin(), plan.external_test.end());
    order.resize(pool_size);
    std::sort(order.begin(), order.end());
  }
  if (static_cast<std::size_t>(k) > pool_size) {
    throw ConfigError("fold count " + std::to_string(k) + " exceeds pool size " +
                      std::to_string(pool_size));
  }
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t p = 0; p < order.size(); ++p) {
    plan.assignments[order[p]] = static_cast<int>(p % static_cast<std::size_t>(k));
  }
  return plan;
}

Dataset make_synthetic(SyntheticKind kind, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const std::size_t m = kind == SyntheticKind::Boxes ? 5 : 4;
  const double flip_rate = 0.05;

  Dataset ds;
  ds.n_rows = n;
  ds.n_cols = m;
  ds.values.resize(n * m);
  ds.labels.resize(n);
  ds.label_values = {"0", "1"};
  for (std::size_t j = 0; j < m; ++j) ds.feature_names.push_back("x" + std::to_string(j));

  for (std::size_t i = 0; i < n; ++i) {
    double* x = ds.values.data() + i * m;
    for (std::size_t j = 0; j < m; ++j) x[j] = std::round(unif(rng) * 1000.0) / 1000.0;
    int y = 0;
    if (kind == SyntheticKind::Boxes) {
      y = ((x[0] > 0.3 && x[1] <= 0.7) || x[2] > 0.8) ? 1 : 0;
    } else {
      y = (0.6 * x[0] + 0.4 * x[1] - 0.3 * x[2] - 0.35 > 0.0) ? 1 : 0;
    }
    if (unif(rng) < flip_rate) y = 1 - y;
    ds.labels[i] = y;
  }
  // Pin the range so that scaling is the identity on [0,1].
  for (std::size_t j = 0; j < m; ++j) {
    ds.values[j] = 0.0;
    ds.values[m + j] = 1.0;
  }
  return ds;
}

}  // namespace fcca
