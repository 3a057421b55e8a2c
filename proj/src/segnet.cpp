#include "mtuda/segnet.hpp"

#include <cmath>

#include "mtuda/error.hpp"

namespace F = torch::nn::functional;
using nlohmann::json;

namespace mtuda {

void NetworkConfig::validate() const {
  auto bad = [](const std::string& what) { throw Error(ErrorKind::config, "network config: " + what); };
  if (stages.empty()) bad("at least one stage required");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    if (s.patch_size < 1 || s.stride < 1 || s.embed_dim < 1 || s.num_heads < 1 || s.num_blocks < 1)
      bad("stage " + std::to_string(i) + " has a non-positive dimension");
    if (s.embed_dim % s.num_heads != 0)
      bad("stage " + std::to_string(i) + ": embed_dim " + std::to_string(s.embed_dim) +
          " not divisible by num_heads " + std::to_string(s.num_heads));
  }
  if (in_channels < 1 || num_classes < 2 || fpn_channels < 1 || mlp_ratio < 1 || local_proj_dim < 1 ||
      local_proj_grid < 1 || global_proj_dim < 1)
    bad("all dimensions must be >= 1 and num_classes >= 2");
  if (!(foreground_prior > 0.0 && foreground_prior < 1.0)) bad("foreground_prior must be in (0,1)");
}

int NetworkConfig::total_stride() const {
  int s = 1;
  for (const auto& st : stages) s *= st.stride;
  return s;
}

json NetworkConfig::to_json() const {
  json st = json::array();
  for (const auto& s : stages)
    st.push_back({{"patch_size", s.patch_size}, {"stride", s.stride}, {"embed_dim", s.embed_dim},
                  {"num_heads", s.num_heads}, {"num_blocks", s.num_blocks}});
  return {{"stages", st},
          {"in_channels", in_channels},
          {"num_classes", num_classes},
          {"fpn_channels", fpn_channels},
          {"mlp_ratio", mlp_ratio},
          {"local_proj_dim", local_proj_dim},
          {"local_proj_grid", local_proj_grid},
          {"global_proj_dim", global_proj_dim},
          {"foreground_prior", foreground_prior}};
}

NetworkConfig NetworkConfig::from_json(const json& j) {
  require(j.is_object(), ErrorKind::config, "network section must be a table");
  NetworkConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "stages") {
      c.stages.clear();
      for (const auto& s : v) {
        StageConfig st;
        for (const auto& [k, x] : s.items()) {
          if (k == "patch_size") st.patch_size = x.get<int>();
          else if (k == "stride") st.stride = x.get<int>();
          else if (k == "embed_dim") st.embed_dim = x.get<int>();
          else if (k == "num_heads") st.num_heads = x.get<int>();
          else if (k == "num_blocks") st.num_blocks = x.get<int>();
          else throw Error(ErrorKind::config, "unknown stage key '" + k + "'");
        }
        c.stages.push_back(st);
      }
    } else if (key == "in_channels") {
      c.in_channels = v.get<int>();
    } else if (key == "num_classes") {
      c.num_classes = v.get<int>();
    } else if (key == "fpn_channels") {
      c.fpn_channels = v.get<int>();
    } else if (key == "mlp_ratio") {
      c.mlp_ratio = v.get<int>();
    } else if (key == "local_proj_dim") {
      c.local_proj_dim = v.get<int>();
    } else if (key == "local_proj_grid") {
      c.local_proj_grid = v.get<int>();
    } else if (key == "global_proj_dim") {
      c.global_proj_dim = v.get<int>();
    } else if (key == "foreground_prior") {
      c.foreground_prior = v.get<double>();
    } else {
      throw Error(ErrorKind::config, "unknown key '" + key + "' in [network]");
    }
  }
  c.validate();
  return c;
}

namespace {

// [..., N, D] -> [..., H, N, D/H]
torch::Tensor split_heads(const torch::Tensor& x, int heads) {
  auto sizes = x.sizes().vec();
  const std::int64_t n = sizes[sizes.size() - 2], d = sizes.back();
  sizes.pop_back();
  sizes.pop_back();
  auto shape = sizes;
  shape.insert(shape.end(), {n, heads, d / heads});
  return x.reshape(shape).transpose(-3, -2);
}

}  // namespace

torch::Tensor attention_matrix(const torch::Tensor& q, const torch::Tensor& k, int heads) {
  require(q.sizes() == k.sizes() && q.dim() >= 2, ErrorKind::shape_mismatch, "attention_matrix: Q/K shape mismatch");
  const std::int64_t dim = q.size(-1);
  require(heads >= 1 && dim % heads == 0, ErrorKind::config,
          "attention_matrix: dimension " + std::to_string(dim) + " not divisible into " + std::to_string(heads) +
              " heads");
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim / heads));
  const auto qh = split_heads(q, heads), kh = split_heads(k, heads);
  return torch::softmax(torch::matmul(qh, kh.transpose(-2, -1)) * scale, -1);
}

// ---------------------------------------------------------------------------

SelfAttentionImpl::SelfAttentionImpl(int dim, int heads) : heads_(heads) {
  require(dim % heads == 0, ErrorKind::config, "attention: dim not divisible by heads");
  q_ = register_module("q", torch::nn::Linear(dim, dim));
  kv_ = register_module("kv", torch::nn::Linear(dim, 2 * dim));
  proj_ = register_module("proj", torch::nn::Linear(dim, dim));
}

torch::Tensor SelfAttentionImpl::forward(const torch::Tensor& x, torch::Tensor* attention) {
  const auto q = q_(x);
  const auto kv = kv_(x).chunk(2, -1);
  const auto att = attention_matrix(q, kv[0], heads_);  // [B, H, N, N]
  if (attention) *attention = att;
  const auto out = torch::matmul(att, split_heads(kv[1], heads_));  // [B, H, N, d]
  return proj_(out.transpose(1, 2).reshape(x.sizes()));
}

MixFfnImpl::MixFfnImpl(int dim, int hidden) {
  fc1_ = register_module("fc1", torch::nn::Linear(dim, hidden));
  dw_ = register_module("dw", torch::nn::Conv2d(torch::nn::Conv2dOptions(hidden, hidden, 3).padding(1).groups(hidden)));
  fc2_ = register_module("fc2", torch::nn::Linear(hidden, dim));
}

torch::Tensor MixFfnImpl::forward(const torch::Tensor& x, std::int64_t h, std::int64_t w) {
  auto y = fc1_(x);  // [B, N, hidden]
  const auto b = y.size(0), c = y.size(2);
  y = dw_(y.transpose(1, 2).reshape({b, c, h, w})).flatten(2).transpose(1, 2);
  return fc2_(F::gelu(y));
}

EncoderBlockImpl::EncoderBlockImpl(int dim, int heads, int mlp_ratio) {
  norm1_ = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  attn_ = register_module("attn", SelfAttention(dim, heads));
  norm2_ = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  ffn_ = register_module("ffn", MixFfn(dim, dim * mlp_ratio));
}

torch::Tensor EncoderBlockImpl::forward(const torch::Tensor& x, std::int64_t h, std::int64_t w,
                                        torch::Tensor* attention) {
  auto y = x + attn_(norm1_(x), attention);
  return y + ffn_(norm2_(y), h, w);
}

EncoderStageImpl::EncoderStageImpl(int in_channels, const StageConfig& cfg, int mlp_ratio) {
  embed_ = register_module("embed", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, cfg.embed_dim, cfg.patch_size)
                                                          .stride(cfg.stride)
                                                          .padding(cfg.patch_size / 2)));
  embed_norm_ = register_module("embed_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({cfg.embed_dim})));
  blocks_ = register_module("blocks", torch::nn::ModuleList());
  for (int i = 0; i < cfg.num_blocks; ++i) blocks_->push_back(EncoderBlock(cfg.embed_dim, cfg.num_heads, mlp_ratio));
  out_norm_ = register_module("out_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({cfg.embed_dim})));
}

torch::Tensor EncoderStageImpl::forward(const torch::Tensor& x, std::vector<torch::Tensor>* attention,
                                        int capture_last) {
  auto y = embed_(x);
  const auto b = y.size(0), d = y.size(1), h = y.size(2), w = y.size(3);
  auto tokens = embed_norm_(y.flatten(2).transpose(1, 2));
  const int n_blocks = static_cast<int>(blocks_->size());
  for (int i = 0; i < n_blocks; ++i) {
    const bool capture = attention && i >= n_blocks - capture_last;
    torch::Tensor att;
    tokens = blocks_[i]->as<EncoderBlock>()->forward(tokens, h, w, capture ? &att : nullptr);
    if (capture) attention->push_back(att);
  }
  return out_norm_(tokens).transpose(1, 2).reshape({b, d, h, w});
}

FpnDecoderImpl::FpnDecoderImpl(const std::vector<int>& in_dims, int channels) {
  lateral_ = register_module("lateral", torch::nn::ModuleList());
  smooth_ = register_module("smooth", torch::nn::ModuleList());
  for (int d : in_dims) {
    lateral_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(d, channels, 1)));
    smooth_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1)));
  }
  fuse_ = register_module("fuse", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1)));
}

torch::Tensor FpnDecoderImpl::forward(const std::vector<torch::Tensor>& features, int drop_level) {
  const auto levels = static_cast<int>(features.size());
  std::vector<torch::Tensor> lat(features.size());
  for (int i = 0; i < levels; ++i) {
    lat[i] = lateral_[i]->as<torch::nn::Conv2d>()->forward(features[i]);
    if (i == drop_level) lat[i] = torch::zeros_like(lat[i]);
  }
  auto resize = [](const torch::Tensor& t, const torch::Tensor& like) {
    if (t.size(2) == like.size(2) && t.size(3) == like.size(3)) return t;
    return F::interpolate(t, F::InterpolateFuncOptions()
                                 .size(std::vector<std::int64_t>{like.size(2), like.size(3)})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
  };
  for (int i = levels - 2; i >= 0; --i) lat[i] = lat[i] + resize(lat[i + 1], lat[i]);
  torch::Tensor sum;
  for (int i = 0; i < levels; ++i) {
    auto s = resize(smooth_[i]->as<torch::nn::Conv2d>()->forward(lat[i]), lat[0]);
    sum = sum.defined() ? sum + s : s;
  }
  return F::gelu(fuse_(sum));
}

LocalProjectionHeadImpl::LocalProjectionHeadImpl(int in_dim, int hidden, int out_dim, int grid) : grid_(grid) {
  conv1_ = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_dim, hidden, 1)));
  conv2_ = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(hidden, out_dim, 1)));
}

torch::Tensor LocalProjectionHeadImpl::forward(const torch::Tensor& features) {
  auto y = conv2_(torch::relu(conv1_(features)));
  y = F::adaptive_avg_pool2d(y, F::AdaptiveAvgPool2dFuncOptions({grid_, grid_}));
  y = y.flatten(2).transpose(1, 2);  // [B, S*S, K]
  return F::normalize(y, F::NormalizeFuncOptions().dim(-1));
}

GlobalProjectionHeadImpl::GlobalProjectionHeadImpl(int in_dim, int out_dim) {
  conv_ = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_dim, out_dim, 1)));
}

torch::Tensor GlobalProjectionHeadImpl::forward(const torch::Tensor& features) {
  const auto pooled = std::get<0>(conv_(features).flatten(2).max(-1));
  return F::normalize(pooled, F::NormalizeFuncOptions().dim(-1));
}

// ---------------------------------------------------------------------------

SegNetImpl::SegNetImpl(NetworkConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  stages_ = register_module("stages", torch::nn::ModuleList());
  int in = cfg_.in_channels;
  std::vector<int> dims;
  for (const auto& s : cfg_.stages) {
    stages_->push_back(EncoderStage(in, s, cfg_.mlp_ratio));
    in = s.embed_dim;
    dims.push_back(s.embed_dim);
  }
  const int f = cfg_.fpn_channels;
  fpn_ = register_module("fpn", FpnDecoder(dims, f));
  seg_head_ = register_module("seg_head", torch::nn::Conv2d(torch::nn::Conv2dOptions(f, cfg_.num_classes, 1)));
  local_head = register_module("local_head", LocalProjectionHead(f, f, cfg_.local_proj_dim, cfg_.local_proj_grid));
  global_head = register_module("global_head", GlobalProjectionHead(f, cfg_.global_proj_dim));
  aux_decoder = register_module("aux_decoder", torch::nn::Sequential(torch::nn::Conv2d(torch::nn::Conv2dOptions(2 * f, f, 1)),
                                                                     torch::nn::GELU(),
                                                                     torch::nn::Conv2d(torch::nn::Conv2dOptions(f, cfg_.num_classes, 1))));
  // Start near "all background": soft Dice on ~1% foreground otherwise tends
  // to fall into the all-foreground optimum before features form.
  torch::NoGradGuard no_grad;
  const double fg_bias = std::log(cfg_.foreground_prior / (1.0 - cfg_.foreground_prior));
  for (auto* bias : {&seg_head_->bias, &aux_decoder[2]->as<torch::nn::Conv2d>()->bias}) {
    bias->fill_(fg_bias);
    (*bias)[0].fill_(0.0);
  }
}

ForwardOutput SegNetImpl::forward(const torch::Tensor& images, ForwardOptions opts) {
  require(images.dim() == 4 && images.size(1) == cfg_.in_channels, ErrorKind::shape_mismatch,
          "forward expects [B, " + std::to_string(cfg_.in_channels) + ", H, W]");
  const auto stride = cfg_.total_stride();
  require(images.size(2) % stride == 0 && images.size(3) % stride == 0, ErrorKind::shape_mismatch,
          "input " + std::to_string(images.size(2)) + "x" + std::to_string(images.size(3)) +
              " is not a multiple of the encoder stride " + std::to_string(stride));

  ForwardOutput out;
  auto x = images;
  const auto n_stages = static_cast<int>(stages_->size());
  for (int i = 0; i < n_stages; ++i) {
    const bool last = i == n_stages - 1;
    x = stages_[i]->as<EncoderStage>()->forward(x, opts.capture_attention && last ? &out.attention : nullptr, 2);
    out.stage_features.push_back(x);
  }
  out.token_rows = x.size(2);
  out.token_cols = x.size(3);
  out.fused = fpn_(out.stage_features, opts.drop_stage);
  out.logits = F::interpolate(seg_head_(out.fused), F::InterpolateFuncOptions()
                                                        .size(std::vector<std::int64_t>{images.size(2), images.size(3)})
                                                        .mode(torch::kBilinear)
                                                        .align_corners(false));
  return out;
}

std::vector<torch::Tensor> SegNetImpl::encoder_parameters() const {
  std::vector<torch::Tensor> out;
  for (const auto& p : named_parameters())
    if (p.key().rfind("stages.", 0) == 0) out.push_back(p.value());
  return out;
}

std::vector<torch::Tensor> SegNetImpl::decoder_parameters() const {
  std::vector<torch::Tensor> out;
  for (const auto& p : named_parameters())
    if (p.key().rfind("stages.", 0) != 0) out.push_back(p.value());
  return out;
}

SegNet clone_network(const SegNet& net) {
  SegNet copy(net->config());
  torch::NoGradGuard no_grad;
  const auto src = net->named_parameters();
  auto dst = copy->named_parameters();
  for (const auto& p : src) {
    auto& d = dst[p.key()];
    d.set_data(p.value().detach().clone());
  }
  copy->step_count = net->step_count;
  return copy;
}

std::size_t load_matching_parameters(SegNet& net, const std::vector<std::pair<std::string, torch::Tensor>>& weights) {
  torch::NoGradGuard no_grad;
  auto params = net->named_parameters();
  std::size_t matched = 0;
  for (const auto& [name, value] : weights) {
    auto* p = params.find(name);
    if (!p) continue;
    require(p->sizes() == value.sizes(), ErrorKind::shape_mismatch, "pretrained weight '" + name + "' has wrong shape");
    p->copy_(value.to(p->dtype()));
    ++matched;
  }
  return matched;
}

}  // namespace mtuda
