#include "mtuda/contrastive.hpp"

#include <cmath>

#include "mtuda/error.hpp"

namespace mtuda {

NegativeQueue::NegativeQueue(std::int64_t capacity, std::int64_t dim, torch::Dtype dtype)
    : storage_(torch::zeros({capacity, dim}, dtype)), capacity_(capacity) {
  require(capacity >= 1 && dim >= 1, ErrorKind::config, "queue capacity and dim must be >= 1");
}

void NegativeQueue::push(const torch::Tensor& vectors) {
  if (!vectors.defined() || vectors.numel() == 0) return;
  require(vectors.dim() == 2 && vectors.size(1) == storage_.size(1), ErrorKind::shape_mismatch,
          "queue push: expected [M, " + std::to_string(storage_.size(1)) + "]");
  const auto v = vectors.detach().to(storage_.dtype());
  const double worst = (v.to(torch::kFloat64).norm(2, 1) - 1.0).abs().max().item<double>();
  require(worst <= 1e-4, ErrorKind::invalid_argument, "queue push: vector is not unit-norm");
  for (std::int64_t i = 0; i < v.size(0); ++i) {
    storage_[cursor_].copy_(v[i]);
    cursor_ = (cursor_ + 1) % capacity_;
    size_ = std::min(size_ + 1, capacity_);
  }
}

torch::Tensor NegativeQueue::entries() const {
  if (size_ < capacity_) return storage_.narrow(0, 0, size_).clone();
  // full ring: oldest entry sits at the cursor
  return torch::cat({storage_.narrow(0, cursor_, capacity_ - cursor_), storage_.narrow(0, 0, cursor_)});
}

NegativeQueue NegativeQueue::restore(torch::Tensor storage, std::int64_t size, std::int64_t cursor) {
  NegativeQueue q;
  q.capacity_ = storage.size(0);
  require(size >= 0 && size <= q.capacity_ && cursor >= 0 && cursor < q.capacity_, ErrorKind::format,
          "queue state out of range");
  q.storage_ = std::move(storage);
  q.size_ = size;
  q.cursor_ = cursor;
  return q;
}

std::vector<std::int64_t> select_local_positives(const torch::Tensor& anchor, const torch::Tensor& paired) {
  const auto sim = torch::matmul(anchor.detach(), paired.detach().t()).to(torch::kFloat64).contiguous();
  const auto m = sim.size(0), n = sim.size(1);
  const double* s = sim.data_ptr<double>();
  std::vector<std::int64_t> out(static_cast<std::size_t>(m));
  for (std::int64_t i = 0; i < m; ++i) {
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < n; ++j)
      if (s[i * n + j] > s[i * n + best]) best = j;
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

torch::Tensor local_contrastive_loss(const torch::Tensor& anchor, const torch::Tensor& paired, double tau,
                                     PositiveSelection selection) {
  require(tau > 0.0, ErrorKind::invalid_argument, "temperature must be > 0");
  require(anchor.sizes() == paired.sizes(), ErrorKind::shape_mismatch, "local contrastive: grids differ in shape");
  if (anchor.dim() == 3) {
    torch::Tensor sum;
    for (std::int64_t b = 0; b < anchor.size(0); ++b) {
      auto l = local_contrastive_loss(anchor[b], paired[b], tau, selection);
      sum = sum.defined() ? sum + l : l;
    }
    return sum / static_cast<double>(anchor.size(0));
  }
  require(anchor.dim() == 2, ErrorKind::shape_mismatch, "local contrastive: expected [M, K]");
  const auto m = anchor.size(0);
  std::vector<std::int64_t> pos(static_cast<std::size_t>(m));
  if (selection == PositiveSelection::most_similar) {
    pos = select_local_positives(anchor, paired);
  } else {
    for (std::int64_t i = 0; i < m; ++i) pos[static_cast<std::size_t>(i)] = i;
  }
  const auto logits = torch::matmul(anchor, paired.t()) / tau;  // [M, M]
  const auto index = torch::tensor(pos, torch::kLong).unsqueeze(1);
  const auto positive = logits.gather(1, index).squeeze(1);
  return (torch::logsumexp(logits, 1) - positive).mean();
}

torch::Tensor global_contrastive_loss(const torch::Tensor& anchors, const torch::Tensor& positives,
                                      const torch::Tensor& cross_negatives, const NegativeQueue& queue, double tau) {
  require(tau > 0.0, ErrorKind::invalid_argument, "temperature must be > 0");
  require(anchors.dim() == 2 && anchors.size(0) > 0, ErrorKind::invalid_argument, "global contrastive: no anchors");
  require(positives.sizes() == anchors.sizes(), ErrorKind::shape_mismatch, "global contrastive: anchors/positives differ");
  const auto n = anchors.size(0);
  const auto pos = (anchors * positives).sum(1, true) / tau;  // [N, 1]
  std::vector<torch::Tensor> parts{pos};
  if (n > 1) {
    const auto same = torch::matmul(anchors, anchors.t()) / tau;
    const auto off_diag = ~torch::eye(n, torch::TensorOptions().dtype(torch::kBool));
    parts.push_back(same.masked_select(off_diag).reshape({n, n - 1}));
  }
  if (cross_negatives.defined() && cross_negatives.numel() > 0)
    parts.push_back(torch::matmul(anchors, cross_negatives.t()) / tau);
  if (queue.size() > 0) parts.push_back(torch::matmul(anchors, queue.entries().to(anchors.dtype()).t()) / tau);
  const auto all = torch::cat(parts, 1);
  return (torch::logsumexp(all, 1) - pos.squeeze(1)).mean();
}

GlclLoss glcl_loss(const ContrastiveBatch& batch, NegativeQueue& queue, double lambda_mix) {
  require(lambda_mix >= 0.0 && lambda_mix <= 1.0, ErrorKind::invalid_argument, "lambda_mix must be in [0,1]");
  GlclLoss out;
  // source anchors pair with their stylized copies; other-style negatives come from t->s
  const auto global_s = global_contrastive_loss(batch.global_s, batch.global_st, batch.global_ts, queue, batch.tau);
  const auto global_t = global_contrastive_loss(batch.global_t, batch.global_ts, batch.global_st, queue, batch.tau);
  out.global = 0.5 * (global_s + global_t);
  const auto local_s = local_contrastive_loss(batch.local_s, batch.local_ts, batch.tau, batch.selection);
  const auto local_t = local_contrastive_loss(batch.local_t, batch.local_st, batch.tau, batch.selection);
  out.local = 0.5 * (local_s + local_t);
  out.total = lambda_mix * out.global + (1.0 - lambda_mix) * out.local;
  if (batch.teacher_keys.defined()) queue.push(batch.teacher_keys);
  return out;
}

}  // namespace mtuda
