#pragma once

#include <torch/torch.h>

#include <optional>
#include <vector>

namespace mtuda {

/// Per-class feature centroids maintained with momentum.
///
/// `prototypes` rows of the classes touched in the current step may still
/// carry autograd history; `momentum_update` detaches the stored value before
/// mixing, so gradients only ever reach the current batch.
struct PrototypeBank {
  torch::Tensor prototypes;        ///< [C, D]
  std::vector<bool> initialized;   ///< per class
  double momentum = 0.01;          ///< weight of the stored prototype

  PrototypeBank() = default;
  PrototypeBank(int num_classes, int dim, double momentum, torch::Dtype dtype = torch::kFloat32);

  int num_classes() const { return static_cast<int>(initialized.size()); }
  PrototypeBank detached() const;
};

using BatchPrototypes = std::vector<std::optional<torch::Tensor>>;

/// Nearest-neighbour resize of an integer/bool map [B, H, W] to [B, h, w].
torch::Tensor downsample_nearest(const torch::Tensor& labels, std::int64_t h, std::int64_t w);

/// Masked class means of feature vectors. features [B, D, h, w] (or [D, h, w]),
/// labels and valid [B, h, w] (or [h, w]). Classes without a contributing
/// pixel come back empty.
BatchPrototypes batch_prototypes(const torch::Tensor& features, const torch::Tensor& labels,
                                 const std::optional<torch::Tensor>& valid, int num_classes);

/// z_c <- m * z_c + (1 - m) * z_batch for present classes; an uninitialized
/// class adopts the batch value outright.
PrototypeBank momentum_update(const PrototypeBank& bank, const BatchPrototypes& batch);

/// Sum over classes initialized in both banks of the Euclidean distance.
torch::Tensor prototype_loss(const PrototypeBank& source, const PrototypeBank& target);

}  // namespace mtuda
