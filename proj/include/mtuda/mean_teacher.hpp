#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <optional>

#include "mtuda/segnet.hpp"

namespace mtuda {

/// Linear ramp of the EMA coefficient from alpha_start to alpha_end over
/// warmup_steps updates, constant afterwards.
struct EmaSchedule {
  double alpha_start = 0.99;
  double alpha_end = 0.999;
  std::int64_t warmup_steps = 1000;

  void validate() const;
  double alpha_at(std::int64_t step) const;
};

/// teacher <- alpha * teacher + (1 - alpha) * student for every parameter;
/// increments teacher->step_count.
void ema_update(SegNet& teacher, const SegNet& student, double alpha);

/// Natural-log entropy per pixel of a [C, H, W] (or [B, C, H, W]) probability
/// map; 0 * log 0 counts as 0.
torch::Tensor pixel_entropy(const torch::Tensor& prob);

struct PseudoLabel {
  torch::Tensor labels;  ///< [H, W] (or [B, H, W]) int64, argmax class everywhere
  torch::Tensor valid;   ///< same shape, bool
  double keep_fraction = 1.0;
};

/// Argmax labels plus a validity mask over the floor(keep_fraction * H * W)
/// lowest-entropy pixels of each image; entropy ties go to the lower
/// row-major index. keep_fraction may be 0 (nothing valid).
PseudoLabel make_pseudo_labels(const torch::Tensor& prob, double keep_fraction);

/// Smoothed Dice loss averaged over foreground classes 1..C-1:
/// 1 - (2 sum p y + eps) / (sum p + sum y + eps), sums over the valid pixels
/// of the whole batch.
/// pred_prob [B, C, H, W] or [C, H, W]; target int64 of matching spatial shape.
torch::Tensor dice_loss(const torch::Tensor& pred_prob, const torch::Tensor& target,
                        const std::optional<torch::Tensor>& valid = std::nullopt, double eps = 1.0);

/// Dice loss of the student's strong-view prediction against the teacher's
/// pseudo-labels, restricted to valid pixels.
torch::Tensor consistency_loss(const torch::Tensor& student_prob, const PseudoLabel& pseudo);

}  // namespace mtuda
