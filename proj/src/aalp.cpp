#include "mtuda/aalp.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

#include "mtuda/error.hpp"

namespace F = torch::nn::functional;

namespace mtuda {

SaliencyMap fuse_attention(const std::vector<torch::Tensor>& attention_maps) {
  require(!attention_maps.empty(), ErrorKind::invalid_argument, "fuse_attention: no attention maps");
  const auto n = attention_maps.front().size(-1);
  const auto side = static_cast<std::int64_t>(std::llround(std::sqrt(static_cast<double>(n))));
  require(side * side == n, ErrorKind::invalid_argument,
          "fuse_attention: token count " + std::to_string(n) + " is not a perfect square");
  return fuse_attention(attention_maps, static_cast<std::size_t>(side), static_cast<std::size_t>(side));
}

SaliencyMap fuse_attention(const std::vector<torch::Tensor>& attention_maps, std::size_t rows, std::size_t cols) {
  require(!attention_maps.empty(), ErrorKind::invalid_argument, "fuse_attention: no attention maps");
  torch::Tensor total;
  for (const auto& a : attention_maps) {
    require(a.dim() == 2 || a.dim() == 3, ErrorKind::shape_mismatch, "fuse_attention: expected [H, N, N] or [N, N]");
    require(a.size(-1) == a.size(-2) && static_cast<std::size_t>(a.size(-1)) == rows * cols,
            ErrorKind::shape_mismatch, "fuse_attention: attention size does not match the token grid");
    const auto heads_mean = a.dim() == 3 ? a.detach().to(torch::kFloat64).mean(0) : a.detach().to(torch::kFloat64);
    const auto column_sums = heads_mean.sum(0);  // contribution received by each token
    total = total.defined() ? total + column_sums : column_sums;
  }
  total = total.contiguous();
  SaliencyMap out{Image(rows, cols, std::vector<double>(total.data_ptr<double>(), total.data_ptr<double>() + total.numel())), 0.0};
  double sum = 0.0;
  for (double v : out.values.values()) sum += v;
  out.mean_value = sum / static_cast<double>(out.values.size());
  return out;
}

Grid<int> label_components(const Mask& candidates, std::vector<std::size_t>* sizes) {
  Grid<int> labels(candidates.rows(), candidates.cols(), -1);
  if (sizes) sizes->clear();
  int next = 0;
  std::deque<std::pair<std::size_t, std::size_t>> frontier;
  for (std::size_t r = 0; r < candidates.rows(); ++r) {
    for (std::size_t c = 0; c < candidates.cols(); ++c) {
      if (!candidates(r, c) || labels(r, c) >= 0) continue;
      std::size_t count = 0;
      labels(r, c) = next;
      frontier.emplace_back(r, c);
      while (!frontier.empty()) {
        const auto [y, x] = frontier.front();
        frontier.pop_front();
        ++count;
        auto visit = [&](std::size_t yy, std::size_t xx) {
          if (candidates(yy, xx) && labels(yy, xx) < 0) {
            labels(yy, xx) = next;
            frontier.emplace_back(yy, xx);
          }
        };
        if (y > 0) visit(y - 1, x);
        if (y + 1 < candidates.rows()) visit(y + 1, x);
        if (x > 0) visit(y, x - 1);
        if (x + 1 < candidates.cols()) visit(y, x + 1);
      }
      if (sizes) sizes->push_back(count);
      ++next;
    }
  }
  return labels;
}

Mask region_mask_for(const PatchBounds& b, std::size_t image_rows, std::size_t image_cols, std::size_t grid_rows,
                     std::size_t grid_cols) {
  Mask m(grid_rows, grid_cols, 0);
  // cell i spans [i*H/g, (i+1)*H/g); compare in integer cross-multiplied form
  for (std::size_t i = 0; i < grid_rows; ++i) {
    const bool row_overlap = i * image_rows < (b.row + b.height) * grid_rows && (i + 1) * image_rows > b.row * grid_rows;
    if (!row_overlap) continue;
    for (std::size_t j = 0; j < grid_cols; ++j) {
      const bool col_overlap =
          j * image_cols < (b.col + b.width) * grid_cols && (j + 1) * image_cols > b.col * grid_cols;
      if (col_overlap) m(i, j) = 1;
    }
  }
  return m;
}

namespace {

std::size_t clamp_origin(double center, std::size_t extent, std::size_t limit) {
  const double start = std::round(center - static_cast<double>(extent) / 2.0);
  return static_cast<std::size_t>(std::clamp(start, 0.0, static_cast<double>(limit - extent)));
}

}  // namespace

PatchSelection select_patch(const SaliencyMap& saliency, std::size_t image_rows, std::size_t image_cols,
                            std::size_t patch_h, std::size_t patch_w, std::size_t feature_rows,
                            std::size_t feature_cols) {
  require(patch_h >= 1 && patch_w >= 1 && patch_h <= image_rows && patch_w <= image_cols, ErrorKind::invalid_argument,
          "patch " + std::to_string(patch_h) + "x" + std::to_string(patch_w) + " does not fit the image");
  const Image& s = saliency.values;
  require(!s.empty(), ErrorKind::invalid_argument, "select_patch: empty saliency map");
  if (feature_rows == 0) feature_rows = s.rows();
  if (feature_cols == 0) feature_cols = s.cols();

  // a rounded mean can sit just below a constant map; those have no candidates
  const double lowest = *std::min_element(s.values().begin(), s.values().end());
  Mask candidates(s.rows(), s.cols(), 0);
  for (std::size_t i = 0; i < s.size(); ++i) candidates[i] = s[i] > saliency.mean_value && s[i] > lowest ? 1 : 0;

  PatchSelection out;
  const Grid<int> labels = label_components(candidates, &out.component_sizes);
  if (out.component_sizes.empty()) {
    out.fallback = true;
    out.bounds = {(image_rows - patch_h) / 2, (image_cols - patch_w) / 2, patch_h, patch_w};
  } else {
    std::vector<double> peak(out.component_sizes.size(), -std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < s.size(); ++i)
      if (labels[i] >= 0) peak[static_cast<std::size_t>(labels[i])] = std::max(peak[static_cast<std::size_t>(labels[i])], s[i]);
    std::size_t best = 0;
    for (std::size_t k = 1; k < out.component_sizes.size(); ++k) {
      if (out.component_sizes[k] > out.component_sizes[best] ||
          (out.component_sizes[k] == out.component_sizes[best] && peak[k] > peak[best]))
        best = k;
    }
    double sum_r = 0, sum_c = 0;
    for (std::size_t r = 0; r < s.rows(); ++r)
      for (std::size_t c = 0; c < s.cols(); ++c)
        if (labels(r, c) == static_cast<int>(best)) {
          sum_r += static_cast<double>(r);
          sum_c += static_cast<double>(c);
        }
    const auto size = static_cast<double>(out.component_sizes[best]);
    const double cell_r = std::round(sum_r / size), cell_c = std::round(sum_c / size);
    const double center_r = (cell_r + 0.5) * static_cast<double>(image_rows) / static_cast<double>(s.rows());
    const double center_c = (cell_c + 0.5) * static_cast<double>(image_cols) / static_cast<double>(s.cols());
    out.bounds = {clamp_origin(center_r, patch_h, image_rows), clamp_origin(center_c, patch_w, image_cols), patch_h,
                  patch_w};
    out.component_size = out.component_sizes[best];
  }
  out.region_mask = region_mask_for(out.bounds, image_rows, image_cols, feature_rows, feature_cols);
  return out;
}

PatchSelection random_patch(std::mt19937_64& rng, std::size_t image_rows, std::size_t image_cols, std::size_t patch_h,
                            std::size_t patch_w, std::size_t feature_rows, std::size_t feature_cols) {
  require(patch_h <= image_rows && patch_w <= image_cols, ErrorKind::invalid_argument, "patch does not fit the image");
  std::uniform_int_distribution<std::size_t> rows(0, image_rows - patch_h), cols(0, image_cols - patch_w);
  PatchSelection out;
  out.bounds.row = rows(rng);
  out.bounds.col = cols(rng);
  out.bounds.height = patch_h;
  out.bounds.width = patch_w;
  out.region_mask = region_mask_for(out.bounds, image_rows, image_cols, feature_rows, feature_cols);
  return out;
}

torch::Tensor crop_tensor(const torch::Tensor& t, const PatchBounds& b) {
  const auto d = t.dim();
  require(d >= 2 && static_cast<std::int64_t>(b.row + b.height) <= t.size(d - 2) &&
              static_cast<std::int64_t>(b.col + b.width) <= t.size(d - 1),
          ErrorKind::invalid_argument, "crop_tensor: bounds outside the tensor");
  return t.narrow(d - 2, static_cast<std::int64_t>(b.row), static_cast<std::int64_t>(b.height))
      .narrow(d - 1, static_cast<std::int64_t>(b.col), static_cast<std::int64_t>(b.width));
}

FusedPrediction global_local_fuse(SegNet& net, const torch::Tensor& f_local, const torch::Tensor& f_global,
                                  const std::vector<Mask>& masks) {
  require(f_local.dim() == 4 && f_global.dim() == 4 && f_local.size(0) == f_global.size(0) &&
              f_local.size(1) == f_global.size(1),
          ErrorKind::shape_mismatch, "global_local_fuse: feature batches differ");
  require(static_cast<std::int64_t>(masks.size()) == f_global.size(0), ErrorKind::shape_mismatch,
          "global_local_fuse: one region mask per image required");
  const auto h = f_local.size(2), w = f_local.size(3);
  std::vector<torch::Tensor> regions;
  for (std::size_t i = 0; i < masks.size(); ++i) {
    const Mask& m = masks[i];
    require(static_cast<std::int64_t>(m.rows()) == f_global.size(2) && static_cast<std::int64_t>(m.cols()) == f_global.size(3),
            ErrorKind::shape_mismatch, "global_local_fuse: region mask does not match the global feature grid");
    std::size_t r0 = m.rows(), r1 = 0, c0 = m.cols(), c1 = 0;
    for (std::size_t r = 0; r < m.rows(); ++r)
      for (std::size_t c = 0; c < m.cols(); ++c)
        if (m(r, c)) {
          r0 = std::min(r0, r);
          r1 = std::max(r1, r + 1);
          c0 = std::min(c0, c);
          c1 = std::max(c1, c + 1);
        }
    if (r0 >= r1) {  // empty mask: whole grid, which the mask zeroes anyway
      r0 = 0;
      c0 = 0;
      r1 = m.rows();
      c1 = m.cols();
    }
    std::vector<float> mv(m.storage().begin(), m.storage().end());
    const auto mask_t = torch::from_blob(mv.data(), {1, 1, static_cast<std::int64_t>(m.rows()), static_cast<std::int64_t>(m.cols())},
                                         torch::kFloat32)
                            .clone()
                            .to(f_global.dtype());
    auto region = crop_tensor(f_global[static_cast<std::int64_t>(i)].unsqueeze(0) * mask_t, {r0, c0, r1 - r0, c1 - c0});
    region = F::interpolate(region, F::InterpolateFuncOptions()
                                        .size(std::vector<std::int64_t>{h, w})
                                        .mode(torch::kBilinear)
                                        .align_corners(false));
    regions.push_back(region);
  }
  FusedPrediction out;
  out.global_region = torch::cat(regions, 0);
  require(out.global_region.sizes() == f_local.sizes(), ErrorKind::shape_mismatch,
          "global_local_fuse: resolution mismatch after upsampling");
  out.logits = net->aux_decoder->forward(torch::cat({f_local, out.global_region}, 1));
  return out;
}

torch::Tensor cosine_reg(const torch::Tensor& a, const torch::Tensor& b, CosineDenominator denom) {
  require(a.sizes() == b.sizes(), ErrorKind::shape_mismatch, "cosine_reg: vectors differ in shape");
  const auto x = a.dim() == 1 ? a.unsqueeze(0) : a;
  const auto y = b.dim() == 1 ? b.unsqueeze(0) : b;
  const auto nx = x.norm(2, 1), ny = y.norm(2, 1);
  require(nx.min().item<double>() > 0.0 && ny.min().item<double>() > 0.0, ErrorKind::invalid_argument,
          "cosine_reg: zero vector");
  const auto dot = (x * y).sum(1);
  const auto d = denom == CosineDenominator::product ? nx * ny : torch::maximum(nx, ny);
  return (1.0 - dot / d).mean();
}

torch::Tensor aalp_loss(const AalpTerms& source, const AalpTerms& target, double gamma, double delta) {
  return gamma * source.dice + delta * source.cosine + 2.0 * gamma * target.dice + 2.0 * delta * target.cosine;
}

}  // namespace mtuda
