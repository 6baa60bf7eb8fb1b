#pragma once

// Columnar text artifacts: '#'-prefixed header lines (format version stamp,
// column names), then one row per line, 17 significant digits so float64
// round-trips are lossless.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fermi/errors.hpp"
#include "fermi/version.hpp"

namespace fermi {

struct ColumnarTable {
  std::vector<std::string> comments;  // without the leading '#'
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;
};

inline std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_columnar(const std::filesystem::path& path,
                           const std::vector<std::string>& columns,
                           const std::vector<std::vector<double>>& rows,
                           const std::vector<std::string>& comments = {}) {
  std::ofstream out(path);
  if (!out) throw IoError("write_columnar: cannot open " + path.string());
  out << "# fermi-bouncer columnar format_version=" << kFormatVersion << "\n";
  for (const auto& c : comments) out << "# " << c << "\n";
  out << "#";
  for (const auto& c : columns) out << " " << c;
  out << "\n";
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i)
      out << (i ? " " : "") << format_g17(row[i]);
    out << "\n";
  }
  if (!out) throw IoError("write_columnar: write failed for " + path.string());
}

inline ColumnarTable read_columnar(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("read_columnar: cannot open " + path.string());
  ColumnarTable table;
  std::string line;
  bool have_columns = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::string trimmed = line.substr(1);
      while (!trimmed.empty() && (trimmed.front() == ' ' || trimmed.front() == '\t'))
        trimmed.erase(trimmed.begin());
      if (!have_columns) table.comments.push_back(trimmed);
      continue;
    }
    if (!have_columns && !table.comments.empty()) {
      // the last comment line before the data carries the column names
      std::istringstream hdr(table.comments.back());
      table.comments.pop_back();
      std::string tok;
      while (hdr >> tok) table.columns.push_back(tok);
      have_columns = true;
    }
    std::istringstream ss(line);
    std::vector<double> row;
    double v;
    while (ss >> v) row.push_back(v);
    if (!row.empty()) table.rows.push_back(std::move(row));
  }
  return table;
}

/// Key-value fit report ("key value" per line, '#' comments).
inline void write_kv_block(const std::filesystem::path& path,
                           const std::vector<std::pair<std::string, std::string>>& entries,
                           const std::vector<std::string>& comments = {}) {
  std::ofstream out(path);
  if (!out) throw IoError("write_kv_block: cannot open " + path.string());
  out << "# fermi-bouncer report format_version=" << kFormatVersion << "\n";
  for (const auto& c : comments) out << "# " << c << "\n";
  for (const auto& [k, v] : entries) out << k << " " << v << "\n";
  if (!out) throw IoError("write_kv_block: write failed for " + path.string());
}

}  // namespace fermi
