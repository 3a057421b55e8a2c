#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtuda/metrics.hpp"

namespace mtuda {

/// One row of a report: a group of runs sharing a label.
struct ReportRow {
  std::string label;
  std::vector<std::string> runs;
  std::map<std::string, std::vector<double>> values;  ///< metric -> per-run values
  std::map<std::string, SampleStats> stats;
};

struct Report {
  std::vector<std::string> metrics;  ///< column order
  std::vector<ReportRow> rows;

  nlohmann::json to_json() const;
  /// Aligned plain-text table, cells "mean ± std".
  std::string to_table() const;
};

/// Adds one run's metrics to the row with `label`, creating it if needed.
void add_run(Report& report, const std::string& label, const std::string& run,
             const std::map<std::string, double>& metrics);
/// Fills every row's stats.
void finalize(Report& report);

/// Reads manifest.json (and eval.json when present) from each run directory.
/// Runs are grouped by the manifest's label.
Report aggregate_runs(const std::vector<std::filesystem::path>& run_dirs);

std::string format_mean_std(const SampleStats& s, int digits = 4);

}  // namespace mtuda
