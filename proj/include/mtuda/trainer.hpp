#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtuda/aalp.hpp"
#include "mtuda/contrastive.hpp"
#include "mtuda/data.hpp"
#include "mtuda/mean_teacher.hpp"
#include "mtuda/prototype.hpp"
#include "mtuda/segnet.hpp"
#include "mtuda/spectral.hpp"

namespace mtuda {

struct LossWeights {
  double seg = 1.0;
  double consistency = 1.0;
  double pro = 0.1;
  double aalp = 1.0;
  double contrast = 0.5;
};

enum class PatchStrategy { attention, random };
enum class SelectionMetric { iou, dice };

/// Which data the run sees. `source_only` never leaves warm-up;
/// `supervised` is the same loop fed with labeled target images as its source.
enum class TrainMode { uda, source_only, supervised };

std::string to_string(StyleMethod m);
std::string to_string(PatchStrategy p);
std::string to_string(CosineDenominator d);
std::string to_string(PositiveSelection p);
std::string to_string(SelectionMetric m);
std::string to_string(TrainMode m);

struct TrainConfig {
  NetworkConfig network;
  LossWeights weights;
  double beta = 0.04;
  double keep_fraction = 0.8;
  double temperature = 0.07;
  double lambda_mix = 0.5;
  double gamma = 0.05;
  double delta = 0.025;
  double prototype_momentum = 0.01;
  EmaSchedule ema;
  int epochs = 120;
  int warmup_epochs = 50;
  int batch_size = 8;
  int steps_per_epoch = 0;  ///< 0: one pass over the source training images
  double lr_encoder = 6e-5;
  double lr_decoder = 6e-4;
  double weight_decay = 5e-4;
  double grad_clip = 1.0;  ///< global norm; 0 disables
  std::string lr_schedule = "cosine";
  std::int64_t lr_warmup_steps = 0;  ///< linear ramp of the learning rate over the first steps
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  StyleMethod style_method = StyleMethod::fft;
  PatchStrategy patch_strategy = PatchStrategy::attention;
  CosineDenominator cosine_denominator = CosineDenominator::product;
  PositiveSelection positive_selection = PositiveSelection::most_similar;
  SelectionMetric selection_metric = SelectionMetric::iou;
  int queue_capacity = 512;
  double val_fraction = 0.2;
  double patch_fraction = 0.25;  ///< local patch side relative to the image side
  int global_downsample = 2;
  AugmentationPolicy weak{0.0, 0.0, 15.0, 0.0, AugmentStrength::weak};
  AugmentationPolicy strong{0.3, 1.0, 15.0, 0.05, AugmentStrength::strong};
  TrainMode mode = TrainMode::uda;
  int threads = 1;

  void validate() const;
  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are a config error.
  static TrainConfig from_json(const nlohmann::json& j);
  /// FNV-1a of the canonical JSON form.
  std::uint64_t hash() const;
};

/// Everything that evolves during training.
struct TrainState {
  SegNet student{nullptr};
  SegNet teacher{nullptr};
  PrototypeBank proto_source;
  PrototypeBank proto_target;
  NegativeQueue queue;
  std::int64_t step = 0;  ///< optimizer steps taken
  int epoch = 0;          ///< epochs completed

  /// Fresh student initialized from `seed`, teacher as its copy.
  static TrainState init(const TrainConfig& cfg, std::uint64_t seed, torch::Dtype dtype = torch::kFloat32);
  TrainState clone() const;
};

/// One step's images, already augmented and stylized. Images [B, 1, H, W].
struct StepBatch {
  torch::Tensor xs;         ///< strong-augmented source
  torch::Tensor ys;         ///< [B, H, W] int64 source labels, aligned with xs
  torch::Tensor xst;        ///< source in target style
  torch::Tensor xt_weak;    ///< teacher view of the target
  torch::Tensor xt_strong;  ///< student view of the target
  torch::Tensor xts;        ///< strong target in source style
};

struct LossComponents {
  torch::Tensor seg, consistency, pro, aalp, contrast;
};

/// Side products of a step that are committed only after the optimizer step.
struct StepUpdates {
  PrototypeBank proto_source;
  PrototypeBank proto_target;
  torch::Tensor queue_keys;  ///< teacher global projections [2B, G]
};

/// Weighted sum. During warm-up only the segmentation term contributes.
/// A non-finite component among the used ones raises a divergence error naming it.
torch::Tensor total_loss(const LossComponents& c, const LossWeights& w, bool warmup);

/// Builds all loss terms of one step without mutating `state`. Components whose
/// weight is zero (and all but seg during warm-up) come back as zero scalars.
LossComponents compute_losses(const TrainState& state, const StepBatch& batch, const TrainConfig& cfg, bool warmup,
                              std::mt19937_64& rng, StepUpdates* updates = nullptr);

/// Draws the augmented, stylized views for one step.
StepBatch make_step_batch(const std::vector<const LabeledImage*>& source, const std::vector<const Image*>& target,
                          const TrainConfig& cfg, std::mt19937_64& rng, bool warmup);

struct EvalReport {
  std::vector<double> per_class_iou;
  std::vector<double> per_class_dice;
  double mean_dice = 0.0;
  double foreground_iou = 0.0;
  double selection_score = 0.0;
  int epoch = 0;
  std::uint64_t seed = 0;
  std::size_t images = 0;

  nlohmann::json to_json() const;
};

/// Dataset-level confusion counts of argmax predictions against masks.
EvalReport evaluate(SegNet& net, const std::vector<const LabeledImage*>& images, int num_classes);

/// Foreground IoU (or Dice) between the student's argmax and the teacher's
/// pseudo-labels over entropy-valid pixels of unlabeled target images.
double pseudo_agreement(SegNet& student, SegNet& teacher, const std::vector<const Image*>& images, double keep_fraction,
                        int num_classes, SelectionMetric metric);

struct EpochRecord {
  int epoch = 0;
  double seg = 0, consistency = 0, pro = 0, aalp = 0, contrast = 0;
  double selection_score = 0;
  double source_val_metric = 0;
  double pseudo_metric = 0;
};

/// The data one run sees; target images carry no labels for the trainer.
struct TrainData {
  std::vector<LabeledImage> source;
  std::vector<LabeledImage> target;
};

struct RunSplits {
  DatasetSplit source;
  DatasetSplit target;
  nlohmann::json to_json() const;
  static RunSplits from_json(const nlohmann::json& j);
};

RunSplits make_splits(const TrainData& data, double val_fraction, std::uint64_t seed);

struct TrainHooks {
  /// Called after each epoch with the live state; `best` marks a new best score.
  std::function<void(const EpochRecord&, const TrainState&, bool best)> on_epoch;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  double best_score = 0.0;
  TrainState best;
  RunSplits splits;
};

/// Full schedule: warm-up epochs on source only, then mean-teacher adaptation.
/// Target masks are never read. Per epoch the selection score is computed and
/// the best state kept. Throws ErrorKind::divergence on a non-finite loss.
TrainResult train(const TrainConfig& cfg, const TrainData& data, std::uint64_t seed, const TrainHooks& hooks = {});

/// Scores a state the same way train() does at epoch end.
struct SelectionInputs {
  double source_metric = 0;
  double pseudo_metric = 0;
  double score = 0;
};
SelectionInputs selection_for(TrainState& state, const TrainConfig& cfg, const TrainData& data, const RunSplits& splits);

torch::Tensor images_to_tensor(const std::vector<const Image*>& images, torch::Dtype dtype = torch::kFloat32);
torch::Tensor masks_to_tensor(const std::vector<const Mask*>& masks);

}  // namespace mtuda
