#include "mtuda/prototype.hpp"

#include "mtuda/error.hpp"

namespace mtuda {

PrototypeBank::PrototypeBank(int num_classes, int dim, double m, torch::Dtype dtype)
    : prototypes(torch::zeros({num_classes, dim}, dtype)),
      initialized(static_cast<std::size_t>(num_classes), false),
      momentum(m) {}

PrototypeBank PrototypeBank::detached() const {
  PrototypeBank out = *this;
  out.prototypes = prototypes.detach().clone();
  return out;
}

torch::Tensor downsample_nearest(const torch::Tensor& labels, std::int64_t h, std::int64_t w) {
  const auto src_h = labels.size(-2), src_w = labels.size(-1);
  if (src_h == h && src_w == w) return labels;
  // sample at output cell centers
  auto rows = ((torch::arange(h, torch::kFloat64) + 0.5) * (static_cast<double>(src_h) / h)).floor().to(torch::kLong);
  auto cols = ((torch::arange(w, torch::kFloat64) + 0.5) * (static_cast<double>(src_w) / w)).floor().to(torch::kLong);
  return labels.index_select(-2, rows.clamp_max(src_h - 1)).index_select(-1, cols.clamp_max(src_w - 1));
}

BatchPrototypes batch_prototypes(const torch::Tensor& features, const torch::Tensor& labels,
                                 const std::optional<torch::Tensor>& valid, int num_classes) {
  const bool batched = features.dim() == 4;
  const auto f = batched ? features : features.unsqueeze(0);
  const auto y = batched ? labels : labels.unsqueeze(0);
  require(f.dim() == 4 && y.dim() == 3 && f.size(0) == y.size(0) && f.size(2) == y.size(1) && f.size(3) == y.size(2),
          ErrorKind::shape_mismatch, "batch_prototypes: features and labels are not aligned");
  const auto dim = f.size(1);
  const auto vectors = f.permute({0, 2, 3, 1}).reshape({-1, dim});  // [P, D]
  auto keep = torch::ones({vectors.size(0)}, torch::kBool);
  if (valid) {
    const auto v = batched ? *valid : valid->unsqueeze(0);
    require(v.sizes() == y.sizes(), ErrorKind::shape_mismatch, "batch_prototypes: validity mask not aligned");
    keep = v.reshape({-1}).to(torch::kBool);
  }
  const auto flat_labels = y.reshape({-1});
  BatchPrototypes out(static_cast<std::size_t>(num_classes));
  for (int c = 0; c < num_classes; ++c) {
    const auto idx = torch::nonzero(keep & (flat_labels == c)).squeeze(1);
    if (idx.numel() == 0) continue;
    out[static_cast<std::size_t>(c)] = vectors.index_select(0, idx).mean(0);
  }
  return out;
}

PrototypeBank momentum_update(const PrototypeBank& bank, const BatchPrototypes& batch) {
  require(static_cast<int>(batch.size()) == bank.num_classes(), ErrorKind::shape_mismatch,
          "momentum_update: class count mismatch");
  PrototypeBank out = bank;
  const auto stored = bank.prototypes.detach();
  std::vector<torch::Tensor> rows;
  for (int c = 0; c < bank.num_classes(); ++c) {
    const auto& z = batch[static_cast<std::size_t>(c)];
    if (!z) {
      rows.push_back(stored[c]);
      continue;
    }
    require(z->dim() == 1 && z->size(0) == bank.prototypes.size(1), ErrorKind::shape_mismatch,
            "momentum_update: prototype dimension mismatch");
    const auto batch_value = z->to(stored.dtype());
    if (!bank.initialized[static_cast<std::size_t>(c)]) {
      rows.push_back(batch_value);
      out.initialized[static_cast<std::size_t>(c)] = true;
    } else {
      rows.push_back(stored[c] * bank.momentum + batch_value * (1.0 - bank.momentum));
    }
  }
  out.prototypes = torch::stack(rows);
  return out;
}

torch::Tensor prototype_loss(const PrototypeBank& source, const PrototypeBank& target) {
  require(source.num_classes() == target.num_classes() &&
              source.prototypes.sizes() == target.prototypes.sizes(),
          ErrorKind::shape_mismatch, "prototype_loss: banks differ in shape");
  auto loss = torch::zeros({}, source.prototypes.options().requires_grad(false));
  for (int c = 0; c < source.num_classes(); ++c) {
    if (!source.initialized[static_cast<std::size_t>(c)] || !target.initialized[static_cast<std::size_t>(c)]) continue;
    const auto diff = source.prototypes[c] - target.prototypes[c].to(source.prototypes.dtype());
    // coincident prototypes contribute 0 with a zero subgradient
    if (diff.detach().abs().max().item<double>() == 0.0) continue;
    loss = loss + torch::linalg_vector_norm(diff, 2, std::nullopt, false, std::nullopt);
  }
  return loss;
}

}  // namespace mtuda
