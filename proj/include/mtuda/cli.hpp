#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "mtuda/trainer.hpp"

namespace mtuda {

enum ExitCode : int { exit_ok = 0, exit_usage = 2, exit_data = 3, exit_divergence = 4 };

/// Entry point of the `mtuda` tool. Subcommands: gen-data, train, eval,
/// style-demo, patch-demo, report.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, const char* const* argv);

/// Trains one seed into `run_dir` (config.toml, epochs.csv, best.ckpt,
/// manifest.json). Returns the trainer result; throws on failure after
/// recording what was written so far.
TrainResult train_run(const TrainConfig& cfg, const TrainData& data, std::uint64_t seed,
                      const std::filesystem::path& run_dir, const std::string& label);

std::string epoch_csv_header();
std::string epoch_csv_row(const EpochRecord& r);

}  // namespace mtuda
