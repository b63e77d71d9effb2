#include "fcca/discretize.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "fcca/error.hpp"
#include "json.hpp"

namespace fcca {

namespace {

using json = nlohmann::ordered_json;

std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

template <class Key>
DiscretizationMetrics summarize(const std::unordered_map<Key, std::array<std::size_t, 2>>& cells,
                                std::size_t n) {
  DiscretizationMetrics m;
  m.n_rows = n;
  m.distinct_cells = cells.size();
  for (const auto& [k, c] : cells) m.inconsistent += std::min(c[0], c[1]);
  if (n > 0) {
    m.eta = 1.0 - static_cast<double>(m.distinct_cells) / static_cast<double>(n);
    m.delta = static_cast<double>(m.inconsistent) / static_cast<double>(n);
  }
  return m;
}

}  // namespace

std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, res.ptr};
}

std::string BinDataset::column_name(std::size_t c) const {
  return feature_names.at(columns[c].feature) + ":" + format_double(columns[c].threshold);
}

BinDataset binarize(const Dataset& ds, const QuantileSelection& sel) {
  if (sel.tau.size() != ds.n_cols) {
    throw DataError("threshold selection has " + std::to_string(sel.tau.size()) +
                    " features but the dataset has " + std::to_string(ds.n_cols));
  }
  BinDataset b;
  b.feature_names = ds.feature_names;
  b.labels = ds.labels;
  b.n_rows = ds.n_rows;
  for (std::size_t j = 0; j < ds.n_cols; ++j) {
    auto tau = sel.tau[j];
    std::sort(tau.begin(), tau.end());
    if (tau.empty()) b.dropped.push_back(j);
    for (const double t : tau) b.columns.push_back({j, t});
  }
  if (b.columns.empty()) throw InfeasibleError("no thresholds selected");
  b.n_cols = b.columns.size();
  b.bits.resize(b.n_rows * b.n_cols);
  for (std::size_t i = 0; i < b.n_rows; ++i) {
    for (std::size_t c = 0; c < b.n_cols; ++c) {
      b.bits[i * b.n_cols + c] = ds.at(i, b.columns[c].feature) <= b.columns[c].threshold ? 0 : 1;
    }
  }
  return b;
}

CellTable cell_table(const BinDataset& bds) {
  CellTable table;
  std::string key(bds.n_cols, '0');
  for (std::size_t i = 0; i < bds.n_rows; ++i) {
    for (std::size_t c = 0; c < bds.n_cols; ++c) key[c] = bds.at(i, c) ? '1' : '0';
    ++table[key][static_cast<std::size_t>(bds.labels[i])];
  }
  return table;
}

DiscretizationMetrics metrics(const BinDataset& bds) {
  std::unordered_map<std::string, std::array<std::size_t, 2>> cells;
  for (std::size_t i = 0; i < bds.n_rows; ++i) {
    const auto r = bds.row(i);
    ++cells[std::string(r.begin(), r.end())][static_cast<std::size_t>(bds.labels[i])];
  }
  auto m = summarize(cells, bds.n_rows);
  m.n_columns = bds.n_cols;
  m.dropped = bds.dropped;
  return m;
}

DiscretizationMetrics metrics(const Dataset& ds) {
  std::unordered_map<std::string, std::array<std::size_t, 2>> cells;
  for (std::size_t i = 0; i < ds.n_rows; ++i) {
    const auto r = ds.row(i);
    std::string key(reinterpret_cast<const char*>(r.data()), r.size() * sizeof(double));
    ++cells[key][static_cast<std::size_t>(ds.labels[i])];
  }
  auto m = summarize(cells, ds.n_rows);
  m.n_columns = ds.n_cols;
  return m;
}

CeilingCheck consistency_ceiling_check(const BinDataset& bds, double train_accuracy) {
  const auto m = metrics(bds);
  CeilingCheck chk;
  chk.ceiling = 1.0 - m.delta;
  chk.accuracy = train_accuracy;
  chk.within = train_accuracy <= chk.ceiling + 1e-12;
  for (const auto& [key, counts] : cell_table(bds)) {
    chk.majority_correct += counts[static_cast<std::size_t>(cell_majority(counts))];
  }
  chk.majority_attains = chk.majority_correct == m.n_rows - m.inconsistent;
  return chk;
}

void write_bin_csv(const std::filesystem::path& path, const BinDataset& bds) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write binarized CSV: " + path.string());
  for (std::size_t c = 0; c < bds.n_cols; ++c) out << bds.column_name(c) << ',';
  out << "label\n";
  for (std::size_t i = 0; i < bds.n_rows; ++i) {
    for (std::size_t c = 0; c < bds.n_cols; ++c) out << static_cast<int>(bds.at(i, c)) << ',';
    out << bds.labels[i] << '\n';
  }
}

BinDataset load_bin_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open binarized CSV: " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError("binarized CSV is empty: " + path.string());
  if (!line.empty() && line.back() == '\r') line.pop_back();
  auto header = split_commas(line);
  if (header.size() < 2 || header.back() != "label") {
    throw DataError("binarized CSV header must end with a label column");
  }
  header.pop_back();
  BinDataset b;
  for (const auto& h : header) {
    const auto colon = h.rfind(':');
    if (colon == std::string::npos) throw DataError("bad column header '" + h + "'");
    const auto name = h.substr(0, colon);
    double t = 0.0;
    const auto* first = h.data() + colon + 1;
    const auto* last = h.data() + h.size();
    const auto res = std::from_chars(first, last, t);
    if (res.ec != std::errc() || res.ptr != last) throw DataError("bad threshold in header '" + h + "'");
    auto it = std::find(b.feature_names.begin(), b.feature_names.end(), name);
    if (it == b.feature_names.end()) {
      b.feature_names.push_back(name);
      it = b.feature_names.end() - 1;
    }
    b.columns.push_back({static_cast<std::size_t>(it - b.feature_names.begin()), t});
  }
  b.n_cols = b.columns.size();
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_commas(line);
    if (cells.size() != b.n_cols + 1) {
      throw DataError("line " + std::to_string(lineno) + ": expected " + std::to_string(b.n_cols + 1) +
                      " cells");
    }
    for (std::size_t c = 0; c <= b.n_cols; ++c) {
      if (cells[c] != "0" && cells[c] != "1") {
        throw DataError("line " + std::to_string(lineno) + ": non-binary value '" + cells[c] + "'");
      }
      if (c < b.n_cols) {
        b.bits.push_back(cells[c] == "1" ? 1 : 0);
      } else {
        b.labels.push_back(cells[c] == "1" ? 1 : 0);
      }
    }
    ++b.n_rows;
  }
  return b;
}

std::string metrics_to_json(const DiscretizationMetrics& m, const std::vector<std::string>& feature_names) {
  json j;
  j["eta"] = m.eta;
  j["delta"] = m.delta;
  j["distinct_cells"] = m.distinct_cells;
  j["n_columns"] = m.n_columns;
  json dropped = json::array();
  for (const auto f : m.dropped) dropped.push_back(feature_names.at(f));
  j["dropped_features"] = std::move(dropped);
  return j.dump(1);
}

}  // namespace fcca
