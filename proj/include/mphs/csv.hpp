#pragma once

#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "mphs/errors.hpp"
#include "mphs/ocp.hpp"

namespace mphs::csv {

/// Shortest decimal that round-trips to the same double; locale independent.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s, const std::string& where) {
  double v = 0.0;
  const char* b = s.data();
  const char* e = s.data() + s.size();
  while (b < e && *b == ' ') ++b;
  while (e > b && (e[-1] == ' ' || e[-1] == '\r')) --e;
  const auto res = std::from_chars(b, e, v);
  if (res.ec != std::errc() || res.ptr != e) {
    throw FormatError(where + ": '" + s + "' is not a number");
  }
  return v;
}

inline std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

/// A numeric table plus named one-line records such as `lambda0,...`.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
  std::map<std::string, std::vector<double>> records;
};

inline std::string join_row(const std::vector<double>& row) {
  std::string s;
  for (std::size_t j = 0; j < row.size(); ++j) {
    if (j) s += ',';
    s += format_double(row[j]);
  }
  return s;
}

inline void write(const std::string& path, const Table& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  for (std::size_t j = 0; j < t.header.size(); ++j) {
    if (j) out << ',';
    out << t.header[j];
  }
  out << '\n';
  for (const auto& row : t.rows) {
    if (row.size() != t.header.size()) {
      throw FormatError("csv row width differs from header in '" + path + "'");
    }
    out << join_row(row) << '\n';
  }
  for (const auto& [name, values] : t.records) {
    out << name;
    for (double v : values) out << ',' << format_double(v);
    out << '\n';
  }
  if (!out) throw FormatError("write to '" + path + "' failed");
}

inline Table read(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  Table t;
  std::string line;
  if (!std::getline(in, line)) throw FormatError("'" + path + "' is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  t.header = split(line);
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = split(line);
    const std::string where = path + ":" + std::to_string(lineno);
    double probe = 0.0;
    const auto& first = cells.front();
    const bool named =
        std::from_chars(first.data(), first.data() + first.size(), probe).ec !=
        std::errc();
    if (named) {
      std::vector<double> vals;
      for (std::size_t j = 1; j < cells.size(); ++j) {
        vals.push_back(parse_double(cells[j], where));
      }
      t.records[first] = std::move(vals);
      continue;
    }
    if (cells.size() != t.header.size()) {
      throw FormatError(where + ": expected " +
                        std::to_string(t.header.size()) + " fields, got " +
                        std::to_string(cells.size()));
    }
    std::vector<double> row;
    for (const auto& c : cells) row.push_back(parse_double(c, where));
    t.rows.push_back(std::move(row));
  }
  return t;
}

struct Comparison {
  double max_diff = 0.0;
  std::string worst_column;
  std::size_t worst_row = 0;  // 1-based data row, 0 for records
  bool within = true;
};

/// Column-wise max absolute difference. Headers, row counts and record names
/// must agree, otherwise FormatError.
inline Comparison compare(const Table& golden, const Table& cand, double tol) {
  if (golden.header != cand.header) {
    throw FormatError("compare: headers differ");
  }
  if (golden.rows.size() != cand.rows.size()) {
    throw FormatError("compare: row counts differ (" +
                      std::to_string(golden.rows.size()) + " vs " +
                      std::to_string(cand.rows.size()) + ")");
  }
  Comparison c;
  auto visit = [&](double a, double b, const std::string& col, std::size_t row) {
    const double d = (std::isnan(a) || std::isnan(b))
                         ? ((std::isnan(a) && std::isnan(b))
                                ? 0.0
                                : std::numeric_limits<double>::infinity())
                         : std::abs(a - b);
    if (d > c.max_diff || (c.worst_column.empty() && d >= c.max_diff)) {
      c.max_diff = d;
      c.worst_column = col;
      c.worst_row = row;
    }
  };
  for (std::size_t i = 0; i < golden.rows.size(); ++i) {
    for (std::size_t j = 0; j < golden.header.size(); ++j) {
      visit(golden.rows[i][j], cand.rows[i][j], golden.header[j], i + 1);
    }
  }
  for (const auto& [name, vals] : golden.records) {
    const auto it = cand.records.find(name);
    if (it == cand.records.end() || it->second.size() != vals.size()) {
      throw FormatError("compare: record '" + name + "' missing or resized");
    }
    for (std::size_t j = 0; j < vals.size(); ++j) {
      visit(vals[j], it->second[j], name + "[" + std::to_string(j + 1) + "]",
            0);
    }
  }
  if (cand.records.size() != golden.records.size()) {
    throw FormatError("compare: record sets differ");
  }
  c.within = c.max_diff <= tol;
  return c;
}

// ---------------------------------------------------------------------------
// Golden file of the KKT point

/// Rows are grid nodes: tau, x, u, lambda. The lambda columns of row i >= 1
/// carry the multiplier of the interval ending at tau_i; row 0 repeats
/// lambda0. The `lambda0` record is authoritative for lambda0.
inline Table kkt_table(const ocp::DiscretizedOCP& problem,
                       const ocp::OptimizerState& s) {
  const ocp::Layout& L = problem.layout;
  Table t;
  t.header.push_back("tau");
  for (Eigen::Index j = 1; j <= L.n; ++j) t.header.push_back("x_" + std::to_string(j));
  for (Eigen::Index j = 1; j <= L.m; ++j) t.header.push_back("u_" + std::to_string(j));
  for (Eigen::Index j = 1; j <= L.n; ++j) {
    t.header.push_back("lambda_" + std::to_string(j));
  }
  for (int i = 0; i <= L.N; ++i) {
    std::vector<double> row{problem.grid.nodes[i]};
    for (Eigen::Index j = 0; j < L.n; ++j) row.push_back(s.primal.x(j, i));
    for (Eigen::Index j = 0; j < L.m; ++j) row.push_back(s.primal.u(j, i));
    for (Eigen::Index j = 0; j < L.n; ++j) {
      row.push_back(i == 0 ? s.dual.lambda0[j] : s.dual.lambda(j, i - 1));
    }
    t.rows.push_back(std::move(row));
  }
  t.records["lambda0"] = std::vector<double>(
      s.dual.lambda0.data(), s.dual.lambda0.data() + s.dual.lambda0.size());
  return t;
}

inline ocp::OptimizerState kkt_from_table(const Table& t) {
  Eigen::Index n = 0, m = 0;
  for (const auto& h : t.header) {
    if (h.rfind("x_", 0) == 0) ++n;
    if (h.rfind("u_", 0) == 0) ++m;
  }
  if (t.header.empty() || t.header[0] != "tau" ||
      static_cast<Eigen::Index>(t.header.size()) != 1 + 2 * n + m) {
    throw FormatError("kkt csv: header must be tau,x_*,u_*,lambda_*");
  }
  const auto it = t.records.find("lambda0");
  if (it == t.records.end() || static_cast<Eigen::Index>(it->second.size()) != n) {
    throw FormatError("kkt csv: missing lambda0 record");
  }
  const int N = static_cast<int>(t.rows.size()) - 1;
  if (N < 2) throw FormatError("kkt csv: need at least 3 node rows");
  ocp::OptimizerState s;
  s.primal.x.resize(n, N + 1);
  s.primal.u.resize(m, N + 1);
  s.dual.lambda.resize(n, N);
  s.dual.lambda0 = Eigen::Map<const Vector>(it->second.data(), n);
  for (int i = 0; i <= N; ++i) {
    const auto& r = t.rows[i];
    for (Eigen::Index j = 0; j < n; ++j) s.primal.x(j, i) = r[1 + j];
    for (Eigen::Index j = 0; j < m; ++j) s.primal.u(j, i) = r[1 + n + j];
    if (i > 0) {
      for (Eigen::Index j = 0; j < n; ++j) {
        s.dual.lambda(j, i - 1) = r[1 + n + m + j];
      }
    }
  }
  return s;
}

}  // namespace mphs::csv
