#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <random>
#include <vector>

#include "mtuda/grid.hpp"
#include "mtuda/segnet.hpp"

namespace mtuda {

/// Token-grid saliency built from attention maps.
struct SaliencyMap {
  Image values;
  double mean_value = 0.0;
};

struct PatchBounds {
  std::size_t row = 0, col = 0, height = 0, width = 0;
  friend bool operator==(const PatchBounds&, const PatchBounds&) = default;
};

struct PatchSelection {
  PatchBounds bounds;
  Mask region_mask;                          ///< cells of the feature grid overlapped by the patch
  std::size_t component_size = 0;            ///< 0 when the fallback was used
  std::vector<std::size_t> component_sizes;  ///< all candidate components, in label order
  bool fallback = false;
};

/// For each block: average heads, sum every column of the N x N matrix
/// (contribution each token receives), then add the blocks and reshape the
/// length-N vector to sqrt(N) x sqrt(N). Each map is [H, N, N] (or [N, N]).
SaliencyMap fuse_attention(const std::vector<torch::Tensor>& attention_maps);
/// Same with an explicit token grid for non-square layouts.
SaliencyMap fuse_attention(const std::vector<torch::Tensor>& attention_maps, std::size_t rows, std::size_t cols);

/// 4-connected labeling of `candidates`; returns per-cell labels (-1 for
/// non-candidates) numbered in row-major order of first appearance.
Grid<int> label_components(const Mask& candidates, std::vector<std::size_t>* sizes = nullptr);

/// Cells of a (rows x cols) grid laid over an image of `image_size` that
/// overlap `bounds`.
Mask region_mask_for(const PatchBounds& bounds, std::size_t image_rows, std::size_t image_cols,
                     std::size_t grid_rows, std::size_t grid_cols);

/// Cells strictly above the mean are candidates; the largest 4-connected
/// component (ties: the one holding the highest saliency value, then the
/// lowest label) has its centroid rounded to a cell, mapped to the cell
/// center in image coordinates, and a patch of `patch_h` x `patch_w` is
/// centered there and clamped into the image. No candidates: centered patch.
/// `feature_rows/cols` size the region mask (0 = saliency grid size).
PatchSelection select_patch(const SaliencyMap& saliency, std::size_t image_rows, std::size_t image_cols,
                            std::size_t patch_h, std::size_t patch_w, std::size_t feature_rows = 0,
                            std::size_t feature_cols = 0);

/// Uniformly random patch position; the ablation alternative to select_patch.
PatchSelection random_patch(std::mt19937_64& rng, std::size_t image_rows, std::size_t image_cols, std::size_t patch_h,
                            std::size_t patch_w, std::size_t feature_rows, std::size_t feature_cols);

struct FusedPrediction {
  torch::Tensor logits;         ///< [B, C, h, w] at the local feature resolution
  torch::Tensor global_region;  ///< [B, F, h, w], masked, cropped and upsampled global features
};

/// Global features are multiplied by the region mask, the mask's bounding box
/// is cropped and bilinearly resized to the local feature size, then the two
/// are concatenated along channels and decoded by the auxiliary head.
/// f_local [B, F, h, w]; f_global [B, F, Hg, Wg]; masks: one region mask per image.
FusedPrediction global_local_fuse(SegNet& net, const torch::Tensor& f_local, const torch::Tensor& f_global,
                                  const std::vector<Mask>& masks);

enum class CosineDenominator { product, max };

/// 1 - <a, b> / (|a| |b|) (or / max(|a|, |b|)), averaged over rows.
/// a, b: [D] or [B, D]. Zero vectors are an error.
torch::Tensor cosine_reg(const torch::Tensor& a, const torch::Tensor& b,
                         CosineDenominator denom = CosineDenominator::product);

struct AalpTerms {
  torch::Tensor dice;
  torch::Tensor cosine;
};

/// gamma * dice_s + delta * cos_s + 2 gamma * dice_t + 2 delta * cos_t.
torch::Tensor aalp_loss(const AalpTerms& source, const AalpTerms& target, double gamma, double delta);

/// Cut `bounds` out of [B, ...] spatial tensors (last two dims).
torch::Tensor crop_tensor(const torch::Tensor& t, const PatchBounds& bounds);

}  // namespace mtuda
