#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "tal/error.hpp"
#include "tal/experiment.hpp"

namespace tal {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw FormatError("CSV has no column '" + name + "'", 0);
  }
};

/// Parses the harness CSV (no quoting; fields never contain commas).
inline CsvTable parse_csv(const std::string& text) {
  CsvTable t;
  std::istringstream in(text);
  std::string line;
  std::size_t offset = 0;
  auto split = [](const std::string& l) {
    std::vector<std::string> out;
    std::string f;
    std::istringstream s(l);
    while (std::getline(s, f, ',')) out.push_back(f);
    if (!l.empty() && l.back() == ',') out.emplace_back();
    return out;
  };
  while (std::getline(in, line)) {
    const std::size_t here = offset;
    offset += line.size() + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split(line);
    if (t.header.empty()) {
      t.header = std::move(fields);
      continue;
    }
    if (fields.size() != t.header.size()) {
      throw FormatError("CSV row has " + std::to_string(fields.size()) + " fields, expected " +
                            std::to_string(t.header.size()),
                        here);
    }
    if (fields == t.header) continue;  // repeated header from concatenated files
    t.rows.push_back(std::move(fields));
  }
  if (t.header.empty()) throw FormatError("empty CSV", 0);
  return t;
}

namespace detail {
inline std::string percent(const std::string& v) {
  if (v == "NA" || v.empty()) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", 100.0 * std::stod(v));
  return buf;
}
}  // namespace detail

/// Aligned text table: one line per run, whitebox and per-victim transfer
/// success in percent, mean last.
inline std::string render_report(const CsvTable& t) {
  const std::size_t c_run = t.column("run_id"), c_method = t.column("method"), c_tricks = t.column("tricks"),
                    c_axis = t.column("axis"), c_value = t.column("axis_value"), c_victim = t.column("victim"),
                    c_wb = t.column("whitebox_asr"), c_asr = t.column("transfer_asr"),
                    c_sur = t.column("surrogate");
  std::vector<std::string> victims;
  std::vector<std::string> order;
  std::map<std::string, std::vector<std::string>> head;
  std::map<std::string, std::map<std::string, std::string>> cells;
  for (const auto& r : t.rows) {
    const std::string key = r[c_run] + "|" + r[c_axis] + "|" + r[c_value] + "|" + r[c_method];
    if (!head.count(key)) {
      order.push_back(key);
      head[key] = {r[c_method], r[c_tricks], r[c_axis] == "none" ? "" : r[c_axis] + "=" + r[c_value], r[c_sur],
                   detail::percent(r[c_wb])};
    }
    if (r[c_victim] != "mean" && std::find(victims.begin(), victims.end(), r[c_victim]) == victims.end()) {
      victims.push_back(r[c_victim]);
    }
    cells[key][r[c_victim]] = detail::percent(r[c_asr]);
  }
  std::vector<std::string> cols = {"method", "tricks", "axis", "surrogate", "whitebox"};
  cols.insert(cols.end(), victims.begin(), victims.end());
  cols.push_back("mean");
  std::vector<std::vector<std::string>> lines;
  for (const auto& key : order) {
    auto line = head[key];
    for (const auto& v : victims) line.push_back(cells[key].count(v) ? cells[key][v] : "-");
    line.push_back(cells[key].count("mean") ? cells[key]["mean"] : "-");
    lines.push_back(std::move(line));
  }
  std::vector<std::size_t> width(cols.size());
  for (std::size_t i = 0; i < cols.size(); ++i) width[i] = cols[i].size();
  for (const auto& l : lines)
    for (std::size_t i = 0; i < l.size(); ++i) width[i] = std::max(width[i], l[i].size());
  std::ostringstream o;
  auto emit = [&](const std::vector<std::string>& l) {
    for (std::size_t i = 0; i < l.size(); ++i) {
      const std::size_t pad = width[i] - l[i].size();
      if (i < 4) {
        o << l[i] << std::string(pad, ' ');
      } else {
        o << std::string(pad, ' ') << l[i];
      }
      o << (i + 1 < l.size() ? "  " : "\n");
    }
  };
  emit(cols);
  std::size_t total = 0;
  for (std::size_t w : width) total += w + 2;
  o << std::string(total - 2, '-') << "\n";
  for (const auto& l : lines) emit(l);
  return o.str();
}

/// gnuplot data blocks, one per (method, tricks): "axis_value mean_transfer
/// whitebox" lines, blocks separated by two blank lines.
inline std::string render_gnuplot(const CsvTable& t) {
  const std::size_t c_method = t.column("method"), c_tricks = t.column("tricks"), c_axis = t.column("axis"),
                    c_value = t.column("axis_value"), c_victim = t.column("victim"),
                    c_wb = t.column("whitebox_asr"), c_asr = t.column("transfer_asr");
  std::vector<std::string> order;
  std::map<std::string, std::vector<std::string>> blocks;
  for (const auto& r : t.rows) {
    if (r[c_victim] != "mean") continue;
    const std::string key = r[c_method] + " " + r[c_tricks] + " " + r[c_axis];
    if (!blocks.count(key)) order.push_back(key);
    blocks[key].push_back((r[c_value].empty() ? "0" : r[c_value]) + " " + r[c_asr] + " " + r[c_wb]);
  }
  std::ostringstream o;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (i) o << "\n\n";
    o << "# " << order[i] << "\n# axis_value mean_transfer whitebox\n";
    for (const auto& l : blocks[order[i]]) o << l << "\n";
  }
  return o.str();
}

}  // namespace tal
