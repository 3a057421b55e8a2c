#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "mtuda/data.hpp"
#include "mtuda/trainer.hpp"

namespace mtuda::testing {

enum class Variant { source_only, mt, mt_pa, mt_pa_aalp, full };

std::string to_string(Variant v);
TrainConfig variant_config(const TrainConfig& base, Variant v);

struct VariantResult {
  Variant variant;
  std::vector<double> target_iou;
  std::vector<double> source_val_iou;
  double seconds = 0.0;
  std::uint64_t train_mask_reads = 0;  ///< target mask reads while training
  std::uint64_t eval_mask_reads = 0;   ///< target mask reads by the final evaluation
};

struct Experiment {
  SyntheticConfig data;
  std::uint64_t data_seed = 2024;
  TrainConfig base;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  bool trace = false;  ///< per-epoch target metrics, diagnostics only
  std::vector<Variant> variants{Variant::source_only, Variant::mt, Variant::mt_pa, Variant::mt_pa_aalp, Variant::full};
};

/// The scaled-down configuration used by the acceptance suite.
Experiment default_experiment();

/// Trains every variant for every seed. Target masks are sealed during
/// training and opened only for the final evaluation.
std::vector<VariantResult> run_experiment(const Experiment& e, std::ostream& log);

double mean(const std::vector<double>& v);

}  // namespace mtuda::testing
