#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace mtuda {

struct StageConfig {
  int patch_size = 7;  ///< overlapping patch-embedding kernel
  int stride = 4;
  int embed_dim = 32;
  int num_heads = 1;
  int num_blocks = 2;
};

struct NetworkConfig {
  std::vector<StageConfig> stages{{7, 4, 32, 1, 2}, {3, 2, 64, 2, 2}, {3, 2, 128, 4, 2}};
  int in_channels = 1;
  int num_classes = 2;
  int fpn_channels = 32;
  int mlp_ratio = 2;
  int local_proj_dim = 16;   ///< K
  int local_proj_grid = 4;   ///< S
  int global_proj_dim = 32;
  double foreground_prior = 0.01;  ///< initial foreground probability of the classifier heads

  void validate() const;
  /// Product of the stage strides; input sides must be multiples of it.
  int total_stride() const;
  /// Stride of the fused decoder features relative to the input.
  int feature_stride() const { return stages.empty() ? 1 : stages.front().stride; }

  nlohmann::json to_json() const;
  static NetworkConfig from_json(const nlohmann::json& j);
};

/// softmax(Q K^T / sqrt(D/H)) per head. q, k: [..., N, D]; returns [..., H, N, N].
torch::Tensor attention_matrix(const torch::Tensor& q, const torch::Tensor& k, int heads);

class SelfAttentionImpl : public torch::nn::Module {
 public:
  SelfAttentionImpl(int dim, int heads);
  /// x: [B, N, D]. When `attention` is non-null it receives [B, H, N, N].
  torch::Tensor forward(const torch::Tensor& x, torch::Tensor* attention = nullptr);

 private:
  int heads_;
  torch::nn::Linear q_{nullptr}, kv_{nullptr}, proj_{nullptr};
};
TORCH_MODULE(SelfAttention);

/// Linear -> depthwise 3x3 conv -> GELU -> Linear, the Mix-FFN of hierarchical ViTs.
class MixFfnImpl : public torch::nn::Module {
 public:
  MixFfnImpl(int dim, int hidden);
  torch::Tensor forward(const torch::Tensor& x, std::int64_t h, std::int64_t w);

 private:
  torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
  torch::nn::Conv2d dw_{nullptr};
};
TORCH_MODULE(MixFfn);

class EncoderBlockImpl : public torch::nn::Module {
 public:
  EncoderBlockImpl(int dim, int heads, int mlp_ratio);
  torch::Tensor forward(const torch::Tensor& x, std::int64_t h, std::int64_t w, torch::Tensor* attention = nullptr);

 private:
  torch::nn::LayerNorm norm1_{nullptr}, norm2_{nullptr};
  SelfAttention attn_{nullptr};
  MixFfn ffn_{nullptr};
};
TORCH_MODULE(EncoderBlock);

class EncoderStageImpl : public torch::nn::Module {
 public:
  EncoderStageImpl(int in_channels, const StageConfig& cfg, int mlp_ratio);
  /// x: [B, C, H, W] -> [B, D, H/stride, W/stride]. Attention maps of the
  /// blocks listed in `capture` are appended to `attention`.
  torch::Tensor forward(const torch::Tensor& x, std::vector<torch::Tensor>* attention = nullptr,
                        int capture_last = 0);

 private:
  torch::nn::Conv2d embed_{nullptr};
  torch::nn::LayerNorm embed_norm_{nullptr}, out_norm_{nullptr};
  torch::nn::ModuleList blocks_{nullptr};
};
TORCH_MODULE(EncoderStage);

/// Lateral 1x1 convs, top-down pathway, 3x3 smoothing, then all levels are
/// upsampled to the finest one and summed.
class FpnDecoderImpl : public torch::nn::Module {
 public:
  FpnDecoderImpl(const std::vector<int>& in_dims, int channels);
  /// `drop_level` >= 0 removes that encoder level's contribution.
  torch::Tensor forward(const std::vector<torch::Tensor>& features, int drop_level = -1);

 private:
  torch::nn::ModuleList lateral_{nullptr}, smooth_{nullptr};
  torch::nn::Conv2d fuse_{nullptr};
};
TORCH_MODULE(FpnDecoder);

/// Two 1x1 conv layers, adaptive average pooling to S x S, unit-normalized
/// per location. Output [B, S*S, K], row-major locations.
class LocalProjectionHeadImpl : public torch::nn::Module {
 public:
  LocalProjectionHeadImpl(int in_dim, int hidden, int out_dim, int grid);
  torch::Tensor forward(const torch::Tensor& features);

 private:
  int grid_;
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
};
TORCH_MODULE(LocalProjectionHead);

/// 1x1 conv followed by global max pooling; output [B, G], unit-normalized.
class GlobalProjectionHeadImpl : public torch::nn::Module {
 public:
  GlobalProjectionHeadImpl(int in_dim, int out_dim);
  torch::Tensor forward(const torch::Tensor& features);

 private:
  torch::nn::Conv2d conv_{nullptr};
};
TORCH_MODULE(GlobalProjectionHead);

struct ForwardOutput {
  torch::Tensor logits;                      ///< [B, C, H, W]
  torch::Tensor fused;                       ///< [B, F, H/4, W/4], penultimate decoder features
  std::vector<torch::Tensor> stage_features; ///< per encoder stage [B, D_i, h_i, w_i]
  std::vector<torch::Tensor> attention;      ///< last two blocks of the last stage, [B, H, N, N]
  std::int64_t token_rows = 0;               ///< last-stage token grid
  std::int64_t token_cols = 0;
};

struct ForwardOptions {
  bool capture_attention = false;
  int drop_stage = -1;
};

class SegNetImpl : public torch::nn::Module {
 public:
  explicit SegNetImpl(NetworkConfig cfg);

  ForwardOutput forward(const torch::Tensor& images, ForwardOptions opts = {});

  const NetworkConfig& config() const { return cfg_; }

  LocalProjectionHead local_head{nullptr};
  GlobalProjectionHead global_head{nullptr};
  /// Auxiliary decoder of the global-local fusion branch: 2F -> F -> C.
  torch::nn::Sequential aux_decoder{nullptr};

  /// Encoder parameters get the encoder learning rate; everything else the decoder one.
  std::vector<torch::Tensor> encoder_parameters() const;
  std::vector<torch::Tensor> decoder_parameters() const;

  /// Incremented by every EMA update applied to this network.
  std::int64_t step_count = 0;

 private:
  NetworkConfig cfg_;
  torch::nn::ModuleList stages_{nullptr};
  FpnDecoder fpn_{nullptr};
  torch::nn::Conv2d seg_head_{nullptr};
};
TORCH_MODULE(SegNet);

/// Deep copy with identical parameter values (the teacher is built this way).
SegNet clone_network(const SegNet& net);

/// Copies named parameters present in `weights` into `net`; returns how many matched.
/// Shape mismatches are errors; unknown names are ignored.
std::size_t load_matching_parameters(SegNet& net, const std::vector<std::pair<std::string, torch::Tensor>>& weights);

}  // namespace mtuda
