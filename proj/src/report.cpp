#include "mtuda/report.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <future>

#include "mtuda/error.hpp"

using nlohmann::json;

namespace mtuda {

std::string format_mean_std(const SampleStats& s, int digits) {
  char buf[96];
  std::snprintf(buf, sizeof(buf), "%.*f ± %.*f", digits, s.mean, digits, s.std);
  return buf;
}

void add_run(Report& report, const std::string& label, const std::string& run,
             const std::map<std::string, double>& metrics) {
  auto it = std::find_if(report.rows.begin(), report.rows.end(), [&](const ReportRow& r) { return r.label == label; });
  if (it == report.rows.end()) {
    report.rows.push_back({label, {}, {}, {}});
    it = report.rows.end() - 1;
  }
  it->runs.push_back(run);
  for (const auto& [name, v] : metrics) {
    it->values[name].push_back(v);
    if (std::find(report.metrics.begin(), report.metrics.end(), name) == report.metrics.end())
      report.metrics.push_back(name);
  }
}

void finalize(Report& report) {
  for (auto& row : report.rows)
    for (const auto& [name, vals] : row.values) row.stats[name] = sample_stats(vals);
}

json Report::to_json() const {
  json rows_json = json::array();
  for (const auto& row : rows) {
    json m = json::object();
    for (const auto& [name, s] : row.stats)
      m[name] = {{"mean", s.mean}, {"std", s.std}, {"n", s.count}, {"values", row.values.at(name)}};
    rows_json.push_back({{"label", row.label}, {"runs", row.runs}, {"metrics", m}});
  }
  return {{"metrics", metrics}, {"rows", rows_json}};
}

std::string Report::to_table() const {
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> head{"label", "n"};
  head.insert(head.end(), metrics.begin(), metrics.end());
  cells.push_back(head);
  for (const auto& row : rows) {
    std::vector<std::string> line{row.label, std::to_string(row.runs.size())};
    for (const auto& m : metrics) {
      auto it = row.stats.find(m);
      line.push_back(it == row.stats.end() ? "-" : format_mean_std(it->second));
    }
    cells.push_back(line);
  }
  // the plus-minus sign is two bytes but one column
  auto width = [](const std::string& s) {
    std::size_t w = 0;
    for (unsigned char c : s) w += (c & 0xC0) != 0x80;
    return w;
  };
  std::vector<std::size_t> widths(head.size(), 0);
  for (const auto& line : cells)
    for (std::size_t i = 0; i < line.size(); ++i) widths[i] = std::max(widths[i], width(line[i]));
  std::string out;
  for (std::size_t r = 0; r < cells.size(); ++r) {
    for (std::size_t i = 0; i < cells[r].size(); ++i) {
      const auto& c = cells[r][i];
      out += c;
      if (i + 1 < cells[r].size()) out += std::string(widths[i] - width(c) + 2, ' ');
    }
    out += "\n";
    if (r == 0) {
      std::size_t total = 0;
      for (auto w : widths) total += w + 2;
      out += std::string(total - 2, '-') + "\n";
    }
  }
  return out;
}

namespace {

struct RunMetrics {
  std::string label;
  std::string run;
  std::map<std::string, double> metrics;
};

json read_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  require(static_cast<bool>(in), ErrorKind::format, "cannot read " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, "corrupt JSON in " + p.string() + ": " + e.what());
  }
}

RunMetrics read_run(const std::filesystem::path& dir) {
  const json manifest = read_json(dir / "manifest.json");
  RunMetrics r;
  r.run = dir.string();
  try {
    r.label = manifest.value("label", std::string("run"));
    const auto& best = manifest.at("best");
    r.metrics["selection_score"] = best.at("selection_score").get<double>();
    r.metrics["source_val_metric"] = best.at("source_val_metric").get<double>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, "malformed manifest in " + dir.string() + ": " + e.what());
  }
  if (std::filesystem::exists(dir / "eval.json")) {
    const json ev = read_json(dir / "eval.json");
    for (const auto& [domain, report] : ev.items()) {
      if (!report.is_object() || !report.contains("foreground_iou")) continue;
      r.metrics[domain + "_foreground_iou"] = report.at("foreground_iou").get<double>();
      r.metrics[domain + "_mean_dice"] = report.at("mean_dice").get<double>();
    }
  }
  return r;
}

}  // namespace

Report aggregate_runs(const std::vector<std::filesystem::path>& run_dirs) {
  std::vector<std::future<RunMetrics>> jobs;
  for (const auto& d : run_dirs) jobs.push_back(std::async(std::launch::async, read_run, d));
  Report report;
  for (auto& j : jobs) {
    const auto r = j.get();
    add_run(report, r.label, r.run, r.metrics);
  }
  finalize(report);
  return report;
}

}  // namespace mtuda
