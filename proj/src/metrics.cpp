#include "mtuda/metrics.hpp"

#include <cmath>

namespace mtuda {

ConfusionCounts confusion_counts(const Mask& pred, const Mask& truth, std::uint8_t cls) {
  require_same_shape(pred, truth, "metric");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == cls, t = truth[i] == cls;
    c.tp += p && t;
    c.fp += p && !t;
    c.fn += !p && t;
  }
  return c;
}

double iou(const ConfusionCounts& c) {
  const auto denom = c.tp + c.fp + c.fn;
  return denom == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(denom);
}

double dice_score(const ConfusionCounts& c) {
  const auto denom = 2 * c.tp + c.fp + c.fn;
  return denom == 0 ? 1.0 : 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

double iou(const Mask& pred, const Mask& truth, std::uint8_t cls) { return iou(confusion_counts(pred, truth, cls)); }

double dice_score(const Mask& pred, const Mask& truth, std::uint8_t cls) {
  return dice_score(confusion_counts(pred, truth, cls));
}

double selection_score(double metric_source, double metric_pseudo) { return metric_source + 0.5 * metric_pseudo; }

SampleStats sample_stats(const std::vector<double>& values) {
  SampleStats s;
  s.count = values.size();
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  if (values.size() < 2) return s;
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  return s;
}

}  // namespace mtuda
