#pragma once

// Long-format CSV ingestion: one row per (unit, condition) pair with the
// required columns unit_id, condition_id, x, n and arbitrary extra columns
// carried as string-valued covariates.

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "bbgp/errors.hpp"
#include "bbgp/model.hpp"

namespace bbgp {

// Covariate values aligned to the (unit, condition) grid in row order
// r = g * p + h.
struct CovariateTable {
  std::vector<std::string> names;
  std::vector<std::vector<std::string>> rows;  // M * p rows, one entry per name

  long column(const std::string& name) const {
    const auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end())
      throw config_error("covariate column not found: " + name);
    return it - names.begin();
  }
};

struct LoadedData {
  RepeatedCountData data;
  CovariateTable covariates;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(trim(field));
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

inline long parse_count(const std::string& s, const std::string& what, long line_no) {
  try {
    std::size_t pos = 0;
    const long v = std::stol(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw load_error("line " + std::to_string(line_no) + ": cannot parse " + what +
                     " value '" + s + "'");
  }
}

}  // namespace detail

// Parses the long-format file; `unit_level_names` lists covariates that must
// be constant within each unit (violations are reported with the line of the
// first conflicting row).
inline LoadedData load_csv(const std::string& path,
                           const std::vector<std::string>& unit_level_names = {}) {
  std::ifstream in(path);
  if (!in) throw load_error("cannot open file: " + path);

  std::string line;
  long line_no = 0;
  if (!std::getline(in, line)) throw load_error(path + ": empty file");
  ++line_no;
  const auto header = detail::split_csv_line(line);
  long c_unit = -1, c_cond = -1, c_x = -1, c_n = -1;
  std::vector<long> cov_cols;
  std::vector<std::string> cov_names;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (header[c] == "unit_id") c_unit = c;
    else if (header[c] == "condition_id") c_cond = c;
    else if (header[c] == "x") c_x = c;
    else if (header[c] == "n") c_n = c;
    else {
      cov_cols.push_back(static_cast<long>(c));
      cov_names.push_back(header[c]);
    }
  }
  if (c_unit < 0 || c_cond < 0 || c_x < 0 || c_n < 0)
    throw load_error(path + ": header must contain unit_id, condition_id, x, n");

  struct Row {
    std::string unit, cond;
    long x, n, line;
    std::vector<std::string> covs;
  };
  std::vector<Row> rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto fields = detail::split_csv_line(line);
    if (fields.size() != header.size())
      throw load_error("line " + std::to_string(line_no) + ": expected " +
                       std::to_string(header.size()) + " fields, found " +
                       std::to_string(fields.size()));
    Row r;
    r.unit = fields[c_unit];
    r.cond = fields[c_cond];
    r.x = detail::parse_count(fields[c_x], "x", line_no);
    r.n = detail::parse_count(fields[c_n], "n", line_no);
    r.line = line_no;
    if (r.unit.empty() || r.cond.empty())
      throw load_error("line " + std::to_string(line_no) +
                       ": unit_id and condition_id must be non-empty");
    if (r.x < 0 || r.n < 0 || r.x > r.n)
      throw load_error("line " + std::to_string(line_no) + ": requires 0 <= x <= n, found x=" +
                       std::to_string(r.x) + ", n=" + std::to_string(r.n));
    for (long c : cov_cols) r.covs.push_back(fields[c]);
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw load_error(path + ": no data rows");

  // Unit and condition order follow first appearance.
  std::vector<std::string> units, conds;
  std::map<std::string, int> unit_idx, cond_idx;
  for (const auto& r : rows) {
    if (unit_idx.emplace(r.unit, static_cast<int>(units.size())).second)
      units.push_back(r.unit);
    if (cond_idx.emplace(r.cond, static_cast<int>(conds.size())).second)
      conds.push_back(r.cond);
  }
  const int M = static_cast<int>(units.size());
  const int p = static_cast<int>(conds.size());

  LoadedData out;
  out.data.condition_ids = conds;
  out.data.units.resize(M);
  out.covariates.names = cov_names;
  out.covariates.rows.resize(static_cast<std::size_t>(M) * p);
  std::vector<long> seen(static_cast<std::size_t>(M) * p, 0);
  for (int g = 0; g < M; ++g) {
    out.data.units[g].unit_id = units[g];
    out.data.units[g].observations.resize(p);
  }
  for (const auto& r : rows) {
    const int g = unit_idx[r.unit];
    const int h = cond_idx[r.cond];
    const std::size_t idx = static_cast<std::size_t>(g) * p + h;
    if (seen[idx])
      throw load_error("line " + std::to_string(r.line) + ": duplicate (unit_id=" + r.unit +
                       ", condition_id=" + r.cond + "), first seen on line " +
                       std::to_string(seen[idx]));
    seen[idx] = r.line;
    out.data.units[g].observations[h] = {r.x, r.n};
    out.covariates.rows[idx] = r.covs;
  }
  for (int g = 0; g < M; ++g)
    for (int h = 0; h < p; ++h)
      if (!seen[static_cast<std::size_t>(g) * p + h])
        throw load_error(path + ": unit_id=" + units[g] + " has no row for condition_id=" +
                         conds[h] + " (units must be observed under every condition)");

  for (const auto& name : unit_level_names) {
    const long c = out.covariates.column(name);
    for (int g = 0; g < M; ++g) {
      const std::size_t base = static_cast<std::size_t>(g) * p;
      for (int h = 1; h < p; ++h) {
        if (out.covariates.rows[base + h][c] != out.covariates.rows[base][c])
          throw load_error("line " + std::to_string(seen[base + h]) + ": covariate '" + name +
                           "' must be constant within unit_id=" + units[g] + " (found '" +
                           out.covariates.rows[base + h][c] + "' vs '" +
                           out.covariates.rows[base][c] + "')");
      }
    }
  }
  return out;
}

inline void save_csv(const std::string& path, const RepeatedCountData& data,
                     const CovariateTable& covariates) {
  data.validate();
  const int p = data.p();
  if (covariates.rows.size() != static_cast<std::size_t>(data.M()) * p)
    throw config_error("save_csv: covariate table does not match the data grid");
  std::ofstream outf(path, std::ios::trunc);
  if (!outf) throw load_error("cannot open file for writing: " + path);
  outf << "unit_id,condition_id,x,n";
  for (const auto& name : covariates.names) outf << "," << name;
  outf << "\n";
  for (int g = 0; g < data.M(); ++g) {
    for (int h = 0; h < p; ++h) {
      const auto& o = data.units[g].observations[h];
      outf << data.units[g].unit_id << "," << data.condition_ids[h] << "," << o.x << ","
           << o.n;
      for (const auto& v : covariates.rows[static_cast<std::size_t>(g) * p + h])
        outf << "," << v;
      outf << "\n";
    }
  }
  if (!outf) throw load_error("write failed: " + path);
}

}  // namespace bbgp
