#pragma once

#include <cstdint>
#include <vector>

#include "mtuda/grid.hpp"

namespace mtuda {

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0;
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
};

ConfusionCounts confusion_counts(const Mask& pred, const Mask& truth, std::uint8_t cls);

/// TP / (TP + FP + FN); 1 when the union is empty.
double iou(const ConfusionCounts& c);
/// 2 TP / (2 TP + FP + FN); 1 when the union is empty.
double dice_score(const ConfusionCounts& c);

double iou(const Mask& pred, const Mask& truth, std::uint8_t cls);
double dice_score(const Mask& pred, const Mask& truth, std::uint8_t cls);

/// metric_source + 0.5 * metric_pseudo.
double selection_score(double metric_source, double metric_pseudo);

/// Mean and sample (n - 1) standard deviation; std is 0 for fewer than two values.
struct SampleStats {
  double mean = 0.0;
  double std = 0.0;
  std::size_t count = 0;
};
SampleStats sample_stats(const std::vector<double>& values);

}  // namespace mtuda
