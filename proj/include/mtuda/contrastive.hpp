#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <vector>

namespace mtuda {

/// Fixed-capacity FIFO of unit vectors used as extra contrastive negatives.
/// Entries are stored detached and never receive gradient.
class NegativeQueue {
 public:
  NegativeQueue() = default;
  NegativeQueue(std::int64_t capacity, std::int64_t dim, torch::Dtype dtype = torch::kFloat32);

  /// Appends rows of `vectors` [M, dim] in order, evicting the oldest past capacity.
  /// Throws if any row deviates from unit norm by more than 1e-4.
  void push(const torch::Tensor& vectors);

  /// Copy of the live rows [size, dim], oldest first.
  torch::Tensor entries() const;
  std::int64_t size() const noexcept { return size_; }
  std::int64_t capacity() const noexcept { return capacity_; }
  std::int64_t dim() const noexcept { return storage_.defined() ? storage_.size(1) : 0; }
  std::int64_t write_cursor() const noexcept { return cursor_; }

  /// Raw ring buffer state for checkpointing.
  const torch::Tensor& storage() const noexcept { return storage_; }
  static NegativeQueue restore(torch::Tensor storage, std::int64_t size, std::int64_t cursor);

 private:
  torch::Tensor storage_;  // [capacity, dim]
  std::int64_t capacity_ = 0;
  std::int64_t size_ = 0;
  std::int64_t cursor_ = 0;  // next slot to write
};

enum class PositiveSelection {
  most_similar,  ///< positive = paired location with maximal cosine similarity
  same_index,    ///< positive = paired vector at the same location
};

/// Index of the positive for every anchor row: argmax of anchor . paired over
/// the paired rows, ties to the lowest index. anchor, paired [M, K].
std::vector<std::int64_t> select_local_positives(const torch::Tensor& anchor, const torch::Tensor& paired);

/// InfoNCE over the S^2 locations of one image, averaged over anchors; all
/// paired locations other than the positive are negatives. Inputs [M, K] or
/// batched [B, M, K] (averaged over the batch).
torch::Tensor local_contrastive_loss(const torch::Tensor& anchor, const torch::Tensor& paired, double tau,
                                     PositiveSelection selection = PositiveSelection::most_similar);

/// InfoNCE with anchor_i / positive_i pairs. The denominator of anchor i holds
/// its positive, the other anchors j != i, every row of `cross_negatives` and
/// every queue entry. anchors, positives [N, G]; cross_negatives [M, G] (M may be 0).
torch::Tensor global_contrastive_loss(const torch::Tensor& anchors, const torch::Tensor& positives,
                                      const torch::Tensor& cross_negatives, const NegativeQueue& queue, double tau);

/// Projections of the four views {s, s->t, t, t->s} of one batch, index aligned.
struct ContrastiveBatch {
  torch::Tensor local_s, local_st, local_t, local_ts;      ///< [N, S*S, K]
  torch::Tensor global_s, global_st, global_t, global_ts;  ///< [N, G]
  torch::Tensor teacher_keys;                              ///< [M, G], pushed into the queue afterwards
  double tau = 0.07;
  PositiveSelection selection = PositiveSelection::most_similar;
};

struct GlclLoss {
  torch::Tensor total;   ///< lambda * global + (1 - lambda) * local
  torch::Tensor global;  ///< mean of the source and target directions
  torch::Tensor local;
};

/// Computes both losses, then pushes `batch.teacher_keys` into `queue`.
GlclLoss glcl_loss(const ContrastiveBatch& batch, NegativeQueue& queue, double lambda_mix);

}  // namespace mtuda
