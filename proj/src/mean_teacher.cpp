#include "mtuda/mean_teacher.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "mtuda/error.hpp"

namespace mtuda {

void EmaSchedule::validate() const {
  require(0.0 <= alpha_start && alpha_start <= alpha_end && alpha_end < 1.0, ErrorKind::config,
          "EMA schedule must satisfy 0 <= alpha_start <= alpha_end < 1");
  require(warmup_steps >= 0, ErrorKind::config, "EMA warmup_steps must be >= 0");
}

double EmaSchedule::alpha_at(std::int64_t step) const {
  if (warmup_steps <= 0 || step >= warmup_steps) return alpha_end;
  const double t = static_cast<double>(std::max<std::int64_t>(step, 0)) / static_cast<double>(warmup_steps);
  return alpha_start + t * (alpha_end - alpha_start);
}

void ema_update(SegNet& teacher, const SegNet& student, double alpha) {
  require(alpha >= 0.0 && alpha <= 1.0, ErrorKind::invalid_argument, "EMA alpha must be in [0,1]");
  auto t_params = teacher->named_parameters();
  const auto s_params = student->named_parameters();
  require(t_params.size() == s_params.size(), ErrorKind::shape_mismatch, "teacher/student parameter count differs");
  torch::NoGradGuard no_grad;
  for (const auto& s : s_params) {
    auto* t = t_params.find(s.key());
    require(t != nullptr, ErrorKind::shape_mismatch, "teacher lacks parameter '" + s.key() + "'");
    require(t->sizes() == s.value().sizes(), ErrorKind::shape_mismatch, "shape mismatch for '" + s.key() + "'");
    // two separately rounded products and one sum, no fused multiply-add
    const auto kept = *t * alpha;
    const auto mixed = s.value().to(t->dtype()) * (1.0 - alpha);
    t->copy_(kept + mixed);
  }
  ++teacher->step_count;
}

namespace {

void check_probabilities(const torch::Tensor& prob) {
  require(prob.dim() == 3 || prob.dim() == 4, ErrorKind::shape_mismatch, "probability map must be [C,H,W] or [B,C,H,W]");
  const auto lo = prob.min().item<double>(), hi = prob.max().item<double>();
  require(lo >= 0.0 && hi <= 1.0 + 1e-9, ErrorKind::invalid_argument, "probabilities outside [0,1]");
}

}  // namespace

torch::Tensor pixel_entropy(const torch::Tensor& prob) {
  check_probabilities(prob);
  const int class_dim = prob.dim() == 3 ? 0 : 1;
  const auto plogp = torch::where(prob > 0, prob * torch::log(prob.clamp_min(1e-300)), torch::zeros_like(prob));
  return -plogp.sum(class_dim);
}

PseudoLabel make_pseudo_labels(const torch::Tensor& prob, double keep_fraction) {
  require(keep_fraction >= 0.0 && keep_fraction <= 1.0, ErrorKind::invalid_argument, "keep_fraction must be in [0,1]");
  const bool batched = prob.dim() == 4;
  const auto p = batched ? prob.detach() : prob.detach().unsqueeze(0);
  const auto entropy = pixel_entropy(p).to(torch::kFloat64).contiguous();  // [B, H, W]
  const auto b = entropy.size(0), h = entropy.size(1), w = entropy.size(2);
  const auto n = static_cast<std::size_t>(h * w);
  const auto keep = static_cast<std::size_t>(std::floor(keep_fraction * static_cast<double>(n)));

  auto valid = torch::zeros({b, h, w}, torch::kBool);
  auto* valid_ptr = valid.data_ptr<bool>();
  const double* ent_ptr = entropy.data_ptr<double>();
  std::vector<std::size_t> order(n);
  for (std::int64_t img = 0; img < b; ++img) {
    const double* e = ent_ptr + img * static_cast<std::int64_t>(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [e](std::size_t a, std::size_t c) { return e[a] < e[c]; });
    for (std::size_t i = 0; i < keep; ++i) valid_ptr[img * static_cast<std::int64_t>(n) + order[i]] = true;
  }
  PseudoLabel out{p.argmax(1), valid, keep_fraction};
  if (!batched) {
    out.labels = out.labels.squeeze(0);
    out.valid = out.valid.squeeze(0);
  }
  return out;
}

torch::Tensor dice_loss(const torch::Tensor& pred_prob, const torch::Tensor& target,
                        const std::optional<torch::Tensor>& valid, double eps) {
  const bool batched = pred_prob.dim() == 4;
  const auto p = batched ? pred_prob : pred_prob.unsqueeze(0);
  const auto y = batched ? target : target.unsqueeze(0);
  require(p.dim() == 4 && y.dim() == 3 && p.size(0) == y.size(0) && p.size(2) == y.size(1) && p.size(3) == y.size(2),
          ErrorKind::shape_mismatch, "dice_loss: prediction and target shapes differ");
  const auto classes = p.size(1);
  const auto onehot = torch::one_hot(y.to(torch::kLong), classes).permute({0, 3, 1, 2}).to(p.dtype());
  torch::Tensor weight = torch::ones_like(y, p.options());
  if (valid) {
    const auto v = batched ? *valid : valid->unsqueeze(0);
    require(v.sizes() == y.sizes(), ErrorKind::shape_mismatch, "dice_loss: validity mask shape differs");
    weight = v.to(p.dtype());
  }
  weight = weight.unsqueeze(1);
  const auto pf = (p * weight).narrow(1, 1, classes - 1);  // foreground classes
  const auto yf = (onehot * weight).narrow(1, 1, classes - 1);
  // counts pooled over the batch, so images without foreground do not each pull towards all-background
  const auto inter = (pf * yf).sum({0, 2, 3});
  const auto denom = pf.sum({0, 2, 3}) + yf.sum({0, 2, 3});
  return (1.0 - (2.0 * inter + eps) / (denom + eps)).mean();
}

torch::Tensor consistency_loss(const torch::Tensor& student_prob, const PseudoLabel& pseudo) {
  const int spatial = student_prob.dim() == 4 ? 2 : 1;
  require(student_prob.dim() >= 3 && pseudo.labels.dim() == student_prob.dim() - 1 &&
              student_prob.size(spatial) == pseudo.labels.size(-2) &&
              student_prob.size(spatial + 1) == pseudo.labels.size(-1),
          ErrorKind::shape_mismatch, "consistency_loss: student view and pseudo-labels are not aligned");
  return dice_loss(student_prob, pseudo.labels, pseudo.valid);
}

}  // namespace mtuda
