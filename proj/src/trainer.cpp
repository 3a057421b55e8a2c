#include "mtuda/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "mtuda/error.hpp"
#include "mtuda/metrics.hpp"

namespace F = torch::nn::functional;
using nlohmann::json;

namespace mtuda {

namespace {

constexpr std::int64_t kEvalBatch = 16;

template <typename E>
E enum_from(const std::string& s, std::initializer_list<std::pair<const char*, E>> table, const char* what) {
  for (const auto& [name, value] : table)
    if (s == name) return value;
  throw Error(ErrorKind::config, std::string("unknown ") + what + " '" + s + "'");
}

StyleMethod style_from(const std::string& s) {
  return enum_from<StyleMethod>(s, {{"fft", StyleMethod::fft}, {"histogram", StyleMethod::histogram}}, "style_method");
}
PatchStrategy patch_from(const std::string& s) {
  return enum_from<PatchStrategy>(s, {{"attention", PatchStrategy::attention}, {"random", PatchStrategy::random}},
                                  "patch_strategy");
}
CosineDenominator denom_from(const std::string& s) {
  return enum_from<CosineDenominator>(s, {{"product", CosineDenominator::product}, {"max", CosineDenominator::max}},
                                      "cosine_denominator");
}
PositiveSelection positive_from(const std::string& s) {
  return enum_from<PositiveSelection>(
      s, {{"most_similar", PositiveSelection::most_similar}, {"same_index", PositiveSelection::same_index}},
      "positive_selection");
}
SelectionMetric metric_from(const std::string& s) {
  return enum_from<SelectionMetric>(s, {{"iou", SelectionMetric::iou}, {"dice", SelectionMetric::dice}},
                                    "selection_metric");
}
TrainMode mode_from(const std::string& s) {
  return enum_from<TrainMode>(
      s, {{"uda", TrainMode::uda}, {"source_only", TrainMode::source_only}, {"supervised", TrainMode::supervised}},
      "mode");
}

json policy_json(const AugmentationPolicy& p) {
  return {{"blur_sigma", {p.blur_sigma_lo, p.blur_sigma_hi}},
          {"rotation_degrees_max", p.rotation_degrees_max},
          {"dropout_fraction", p.dropout_fraction}};
}

AugmentationPolicy policy_from(const json& j, AugmentationPolicy p) {
  for (const auto& [key, v] : j.items()) {
    if (key == "blur_sigma") {
      require(v.is_array() && v.size() == 2, ErrorKind::config, "blur_sigma must be [lo, hi]");
      p.blur_sigma_lo = v[0].get<double>();
      p.blur_sigma_hi = v[1].get<double>();
    } else if (key == "rotation_degrees_max") {
      p.rotation_degrees_max = v.get<double>();
    } else if (key == "dropout_fraction") {
      p.dropout_fraction = v.get<double>();
    } else {
      throw Error(ErrorKind::config, "unknown augmentation key '" + key + "'");
    }
  }
  return p;
}

// Reads known keys from `j` into a visitor; unknown keys are errors.
template <typename Fn>
void for_each_key(const json& j, const char* section, Fn&& fn) {
  require(j.is_object(), ErrorKind::config, std::string("section '") + section + "' must be a table");
  for (const auto& [key, v] : j.items())
    if (!fn(key, v)) throw Error(ErrorKind::config, std::string("unknown key '") + key + "' in [" + section + "]");
}

torch::Tensor zero_like_scalar(torch::Dtype dtype) { return torch::zeros({}, torch::TensorOptions().dtype(dtype)); }

std::int64_t patch_side(std::int64_t image, double fraction, std::int64_t stride) {
  const auto cells = std::max<std::int64_t>(1, std::llround(static_cast<double>(image) * fraction / static_cast<double>(stride)));
  return std::min(image, cells * stride);
}

Mask tensor_row_to_mask(const torch::Tensor& t) {
  const auto c = t.to(torch::kUInt8).contiguous();
  return Mask(static_cast<std::size_t>(c.size(0)), static_cast<std::size_t>(c.size(1)),
              std::vector<std::uint8_t>(c.data_ptr<std::uint8_t>(), c.data_ptr<std::uint8_t>() + c.numel()));
}

}  // namespace

std::string to_string(StyleMethod m) { return m == StyleMethod::fft ? "fft" : "histogram"; }
std::string to_string(PatchStrategy p) { return p == PatchStrategy::attention ? "attention" : "random"; }
std::string to_string(CosineDenominator d) { return d == CosineDenominator::product ? "product" : "max"; }
std::string to_string(PositiveSelection p) {
  return p == PositiveSelection::most_similar ? "most_similar" : "same_index";
}
std::string to_string(SelectionMetric m) { return m == SelectionMetric::iou ? "iou" : "dice"; }
std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::uda: return "uda";
    case TrainMode::source_only: return "source_only";
    case TrainMode::supervised: return "supervised";
  }
  return "uda";
}

void TrainConfig::validate() const {
  network.validate();
  ema.validate();
  weak.validate();
  strong.validate();
  for (double w : {weights.seg, weights.consistency, weights.pro, weights.aalp, weights.contrast})
    require(w >= 0.0 && std::isfinite(w), ErrorKind::config, "loss weights must be finite and >= 0");
  require(epochs >= 1, ErrorKind::config, "epochs must be >= 1");
  require(warmup_epochs >= 0 && warmup_epochs <= epochs, ErrorKind::config, "warmup_epochs must be in [0, epochs]");
  require(batch_size >= 1, ErrorKind::config, "batch_size must be >= 1");
  require(steps_per_epoch >= 0, ErrorKind::config, "steps_per_epoch must be >= 0");
  require(beta >= 0.0 && beta <= 1.0, ErrorKind::config, "beta must be in [0,1]");
  require(keep_fraction >= 0.0 && keep_fraction <= 1.0, ErrorKind::config, "keep_fraction must be in [0,1]");
  require(temperature > 0.0, ErrorKind::config, "temperature must be > 0");
  require(lambda_mix >= 0.0 && lambda_mix <= 1.0, ErrorKind::config, "lambda_mix must be in [0,1]");
  require(gamma >= 0.0 && delta >= 0.0, ErrorKind::config, "gamma and delta must be >= 0");
  require(prototype_momentum >= 0.0 && prototype_momentum <= 1.0, ErrorKind::config,
          "prototype_momentum must be in [0,1]");
  require(lr_encoder >= 0.0 && lr_decoder >= 0.0 && weight_decay >= 0.0 && grad_clip >= 0.0, ErrorKind::config,
          "learning rates, weight decay and grad_clip must be >= 0");
  require(lr_schedule == "cosine", ErrorKind::config, "lr_schedule must be 'cosine'");
  require(lr_warmup_steps >= 0, ErrorKind::config, "lr_warmup_steps must be >= 0");
  require(!seeds.empty(), ErrorKind::config, "seeds must not be empty");
  require(queue_capacity >= 1, ErrorKind::config, "queue_capacity must be >= 1");
  require(val_fraction > 0.0 && val_fraction < 1.0, ErrorKind::config, "val_fraction must be in (0,1)");
  require(patch_fraction > 0.0 && patch_fraction <= 1.0, ErrorKind::config, "patch_fraction must be in (0,1]");
  require(global_downsample >= 1, ErrorKind::config, "global_downsample must be >= 1");
  require(threads >= 1, ErrorKind::config, "threads must be >= 1");
}

json TrainConfig::to_json() const {
  return {
      {"network", network.to_json()},
      {"loss",
       {{"seg", weights.seg},
        {"consistency", weights.consistency},
        {"pro", weights.pro},
        {"aalp", weights.aalp},
        {"contrast", weights.contrast}}},
      {"style", {{"method", to_string(style_method)}, {"beta", beta}}},
      {"pseudo", {{"keep_fraction", keep_fraction}}},
      {"contrastive",
       {{"temperature", temperature},
        {"lambda_mix", lambda_mix},
        {"queue_capacity", queue_capacity},
        {"positive_selection", to_string(positive_selection)}}},
      {"aalp",
       {{"gamma", gamma},
        {"delta", delta},
        {"patch_strategy", to_string(patch_strategy)},
        {"patch_fraction", patch_fraction},
        {"global_downsample", global_downsample},
        {"cosine_denominator", to_string(cosine_denominator)}}},
      {"prototype", {{"momentum", prototype_momentum}}},
      {"ema", {{"alpha_start", ema.alpha_start}, {"alpha_end", ema.alpha_end}, {"warmup_steps", ema.warmup_steps}}},
      {"optim",
       {{"epochs", epochs},
        {"warmup_epochs", warmup_epochs},
        {"batch_size", batch_size},
        {"steps_per_epoch", steps_per_epoch},
        {"lr_encoder", lr_encoder},
        {"lr_decoder", lr_decoder},
        {"weight_decay", weight_decay},
        {"grad_clip", grad_clip},
        {"lr_schedule", lr_schedule},
        {"lr_warmup_steps", lr_warmup_steps}}},
      {"augment", {{"weak", policy_json(weak)}, {"strong", policy_json(strong)}}},
      {"run",
       {{"seeds", seeds},
        {"val_fraction", val_fraction},
        {"selection_metric", to_string(selection_metric)},
        {"mode", to_string(mode)},
        {"threads", threads}}},
  };
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  try {
  for_each_key(j, "root", [&](const std::string& section, const json& v) {
    if (section == "network") {
      c.network = NetworkConfig::from_json(v);
    } else if (section == "loss") {
      for_each_key(v, "loss", [&](const std::string& k, const json& x) {
        if (k == "seg") c.weights.seg = x.get<double>();
        else if (k == "consistency") c.weights.consistency = x.get<double>();
        else if (k == "pro") c.weights.pro = x.get<double>();
        else if (k == "aalp") c.weights.aalp = x.get<double>();
        else if (k == "contrast") c.weights.contrast = x.get<double>();
        else return false;
        return true;
      });
    } else if (section == "style") {
      for_each_key(v, "style", [&](const std::string& k, const json& x) {
        if (k == "method") c.style_method = style_from(x.get<std::string>());
        else if (k == "beta") c.beta = x.get<double>();
        else return false;
        return true;
      });
    } else if (section == "pseudo") {
      for_each_key(v, "pseudo", [&](const std::string& k, const json& x) {
        if (k == "keep_fraction") c.keep_fraction = x.get<double>();
        else return false;
        return true;
      });
    } else if (section == "contrastive") {
      for_each_key(v, "contrastive", [&](const std::string& k, const json& x) {
        if (k == "temperature") c.temperature = x.get<double>();
        else if (k == "lambda_mix") c.lambda_mix = x.get<double>();
        else if (k == "queue_capacity") c.queue_capacity = x.get<int>();
        else if (k == "positive_selection") c.positive_selection = positive_from(x.get<std::string>());
        else return false;
        return true;
      });
    } else if (section == "aalp") {
      for_each_key(v, "aalp", [&](const std::string& k, const json& x) {
        if (k == "gamma") c.gamma = x.get<double>();
        else if (k == "delta") c.delta = x.get<double>();
        else if (k == "patch_strategy") c.patch_strategy = patch_from(x.get<std::string>());
        else if (k == "patch_fraction") c.patch_fraction = x.get<double>();
        else if (k == "global_downsample") c.global_downsample = x.get<int>();
        else if (k == "cosine_denominator") c.cosine_denominator = denom_from(x.get<std::string>());
        else return false;
        return true;
      });
    } else if (section == "prototype") {
      for_each_key(v, "prototype", [&](const std::string& k, const json& x) {
        if (k == "momentum") c.prototype_momentum = x.get<double>();
        else return false;
        return true;
      });
    } else if (section == "ema") {
      for_each_key(v, "ema", [&](const std::string& k, const json& x) {
        if (k == "alpha_start") c.ema.alpha_start = x.get<double>();
        else if (k == "alpha_end") c.ema.alpha_end = x.get<double>();
        else if (k == "warmup_steps") c.ema.warmup_steps = x.get<std::int64_t>();
        else return false;
        return true;
      });
    } else if (section == "optim") {
      for_each_key(v, "optim", [&](const std::string& k, const json& x) {
        if (k == "epochs") c.epochs = x.get<int>();
        else if (k == "warmup_epochs") c.warmup_epochs = x.get<int>();
        else if (k == "batch_size") c.batch_size = x.get<int>();
        else if (k == "steps_per_epoch") c.steps_per_epoch = x.get<int>();
        else if (k == "lr_encoder") c.lr_encoder = x.get<double>();
        else if (k == "lr_decoder") c.lr_decoder = x.get<double>();
        else if (k == "weight_decay") c.weight_decay = x.get<double>();
        else if (k == "grad_clip") c.grad_clip = x.get<double>();
        else if (k == "lr_schedule") c.lr_schedule = x.get<std::string>();
        else if (k == "lr_warmup_steps") c.lr_warmup_steps = x.get<std::int64_t>();
        else return false;
        return true;
      });
    } else if (section == "augment") {
      for_each_key(v, "augment", [&](const std::string& k, const json& x) {
        if (k == "weak") c.weak = policy_from(x, c.weak);
        else if (k == "strong") c.strong = policy_from(x, c.strong);
        else return false;
        return true;
      });
    } else if (section == "run") {
      for_each_key(v, "run", [&](const std::string& k, const json& x) {
        if (k == "seeds") c.seeds = x.get<std::vector<std::uint64_t>>();
        else if (k == "val_fraction") c.val_fraction = x.get<double>();
        else if (k == "selection_metric") c.selection_metric = metric_from(x.get<std::string>());
        else if (k == "mode") c.mode = mode_from(x.get<std::string>());
        else if (k == "threads") c.threads = x.get<int>();
        else return false;
        return true;
      });
    } else if (section == "synthetic") {
      // consumed by gen-data
    } else {
      return false;
    }
    return true;
  });
  } catch (const json::exception& e) {
    throw Error(ErrorKind::config, std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

std::uint64_t TrainConfig::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : to_json().dump()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// State

TrainState TrainState::init(const TrainConfig& cfg, std::uint64_t seed, torch::Dtype dtype) {
  torch::manual_seed(seed);
  TrainState s;
  s.student = SegNet(cfg.network);
  s.student->to(dtype);
  s.teacher = clone_network(s.student);
  for (auto& p : s.teacher->parameters()) p.set_requires_grad(false);
  const auto& n = cfg.network;
  s.proto_source = PrototypeBank(n.num_classes, n.fpn_channels, cfg.prototype_momentum, dtype);
  s.proto_target = PrototypeBank(n.num_classes, n.fpn_channels, cfg.prototype_momentum, dtype);
  s.queue = NegativeQueue(cfg.queue_capacity, n.global_proj_dim, dtype);
  return s;
}

TrainState TrainState::clone() const {
  TrainState s;
  s.student = clone_network(student);
  s.teacher = clone_network(teacher);
  for (auto& p : s.teacher->parameters()) p.set_requires_grad(false);
  s.proto_source = proto_source.detached();
  s.proto_target = proto_target.detached();
  s.queue = NegativeQueue::restore(queue.storage().clone(), queue.size(), queue.write_cursor());
  s.step = step;
  s.epoch = epoch;
  return s;
}

// ---------------------------------------------------------------------------
// Tensors

torch::Tensor images_to_tensor(const std::vector<const Image*>& images, torch::Dtype dtype) {
  require(!images.empty(), ErrorKind::invalid_argument, "no images");
  const auto h = static_cast<std::int64_t>(images.front()->rows()), w = static_cast<std::int64_t>(images.front()->cols());
  auto out = torch::empty({static_cast<std::int64_t>(images.size()), 1, h, w}, torch::kFloat64);
  double* dst = out.data_ptr<double>();
  for (const Image* im : images) {
    require(static_cast<std::int64_t>(im->rows()) == h && static_cast<std::int64_t>(im->cols()) == w,
            ErrorKind::shape_mismatch, "images in a batch differ in size");
    dst = std::copy(im->storage().begin(), im->storage().end(), dst);
  }
  return out.to(dtype);
}

torch::Tensor masks_to_tensor(const std::vector<const Mask*>& masks) {
  require(!masks.empty(), ErrorKind::invalid_argument, "no masks");
  const auto h = static_cast<std::int64_t>(masks.front()->rows()), w = static_cast<std::int64_t>(masks.front()->cols());
  auto out = torch::empty({static_cast<std::int64_t>(masks.size()), h, w}, torch::kLong);
  std::int64_t* dst = out.data_ptr<std::int64_t>();
  for (const Mask* m : masks) {
    require(static_cast<std::int64_t>(m->rows()) == h && static_cast<std::int64_t>(m->cols()) == w,
            ErrorKind::shape_mismatch, "masks in a batch differ in size");
    dst = std::copy(m->storage().begin(), m->storage().end(), dst);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses

torch::Tensor total_loss(const LossComponents& c, const LossWeights& w, bool warmup) {
  const std::pair<const char*, std::pair<const torch::Tensor*, double>> terms[] = {
      {"seg", {&c.seg, w.seg}},
      {"consistency", {&c.consistency, w.consistency}},
      {"pro", {&c.pro, w.pro}},
      {"aalp", {&c.aalp, w.aalp}},
      {"contrast", {&c.contrast, w.contrast}},
  };
  torch::Tensor total;
  for (const auto& [name, term] : terms) {
    const auto& [value, weight] = term;
    if (warmup && value != &c.seg) continue;
    if (!value->defined()) continue;
    require(std::isfinite(value->detach().item<double>()), ErrorKind::divergence,
            std::string("non-finite loss component '") + name + "'");
    const auto part = *value * weight;
    total = total.defined() ? total + part : part;
  }
  require(total.defined(), ErrorKind::invalid_argument, "total_loss: no components");
  return total;
}

StepBatch make_step_batch(const std::vector<const LabeledImage*>& source, const std::vector<const Image*>& target,
                          const TrainConfig& cfg, std::mt19937_64& rng, bool warmup) {
  require(!source.empty(), ErrorKind::invalid_argument, "empty source batch");
  std::vector<Image> xs, xst, xt_weak, xt_strong, xts;
  std::vector<Mask> ys;
  for (const LabeledImage* im : source) {
    const auto aug = augment(*im, cfg.strong, rng());
    xs.push_back(aug.pixels);
    ys.push_back(aug.mask());
  }
  if (!warmup) {
    require(target.size() == source.size(), ErrorKind::invalid_argument, "batches must be balanced");
    AugmentationPolicy geometric = cfg.weak;
    AugmentationPolicy photometric = cfg.strong;
    photometric.rotation_degrees_max = 0.0;
    for (std::size_t i = 0; i < target.size(); ++i) {
      const LabeledImage unlabeled(*target[i], std::nullopt, Domain::target, "");
      const auto weak = augment(unlabeled, geometric, rng());
      const auto strong = augment(weak, photometric, rng());
      xt_weak.push_back(weak.pixels);
      xt_strong.push_back(strong.pixels);
    }
    for (std::size_t i = 0; i < source.size(); ++i) {
      if (cfg.style_method == StyleMethod::fft) {
        xst.push_back(fft_style_transfer(xs[i], xt_weak[i], cfg.beta));
        xts.push_back(fft_style_transfer(xt_strong[i], xs[i], cfg.beta));
      } else {
        xst.push_back(histogram_match(xs[i], xt_weak[i]));
        xts.push_back(histogram_match(xt_strong[i], xs[i]));
      }
    }
  }
  auto ptrs = [](const std::vector<Image>& v) {
    std::vector<const Image*> p;
    for (const auto& x : v) p.push_back(&x);
    return p;
  };
  std::vector<const Mask*> mask_ptrs;
  for (const auto& m : ys) mask_ptrs.push_back(&m);
  StepBatch b;
  b.xs = images_to_tensor(ptrs(xs));
  b.ys = masks_to_tensor(mask_ptrs);
  if (!warmup) {
    b.xst = images_to_tensor(ptrs(xst));
    b.xt_weak = images_to_tensor(ptrs(xt_weak));
    b.xt_strong = images_to_tensor(ptrs(xt_strong));
    b.xts = images_to_tensor(ptrs(xts));
  }
  return b;
}

LossComponents compute_losses(const TrainState& state, const StepBatch& b, const TrainConfig& cfg, bool warmup,
                              std::mt19937_64& rng, StepUpdates* updates) {
  SegNet student = state.student;
  SegNet teacher = state.teacher;
  const auto dtype = student->parameters().front().scalar_type();
  const int C = cfg.network.num_classes;
  LossComponents c;
  c.seg = c.consistency = c.pro = c.aalp = c.contrast = zero_like_scalar(dtype);
  if (updates) {
    updates->proto_source = state.proto_source;
    updates->proto_target = state.proto_target;
    updates->queue_keys = torch::Tensor();
  }
  const auto xs = b.xs.to(dtype);
  const auto B = xs.size(0);

  if (warmup) {
    const auto out = student->forward(xs);
    c.seg = dice_loss(torch::softmax(out.logits, 1), b.ys);
    return c;
  }

  const auto& w = cfg.weights;
  const bool use_pro = w.pro > 0.0;
  const bool use_contrast = w.contrast > 0.0;
  const bool use_aalp = w.aalp > 0.0 && (cfg.gamma > 0.0 || cfg.delta > 0.0);
  const bool attention_patches = use_aalp && cfg.patch_strategy == PatchStrategy::attention;
  const auto H = xs.size(2), W = xs.size(3);

  // teacher on the weak views: pseudo-labels, target features, queue keys, saliency
  PseudoLabel pseudo;
  torch::Tensor teacher_fused;
  std::vector<SaliencyMap> saliency;
  {
    torch::NoGradGuard no_grad;
    const auto out = teacher->forward(torch::cat({xs, b.xt_weak.to(dtype)}), {.capture_attention = attention_patches});
    pseudo = make_pseudo_labels(torch::softmax(out.logits.narrow(0, B, B), 1), cfg.keep_fraction);
    teacher_fused = out.fused;
    if (use_contrast && updates) updates->queue_keys = teacher->global_head(out.fused).detach();
    if (attention_patches) {
      require(out.attention.size() >= 1, ErrorKind::invalid_argument, "teacher returned no attention maps");
      for (std::int64_t i = 0; i < 2 * B; ++i) {
        std::vector<torch::Tensor> maps;
        for (const auto& a : out.attention) maps.push_back(a[i]);
        saliency.push_back(fuse_attention(maps, static_cast<std::size_t>(out.token_rows),
                                          static_cast<std::size_t>(out.token_cols)));
      }
    }
  }

  const auto out = student->forward(torch::cat({xs, b.xst.to(dtype), b.xt_strong.to(dtype), b.xts.to(dtype)}));
  const auto prob = torch::softmax(out.logits, 1);
  c.seg = dice_loss(prob.narrow(0, 0, 2 * B), torch::cat({b.ys, b.ys}));
  c.consistency = dice_loss(prob.narrow(0, 2 * B, 2 * B), torch::cat({pseudo.labels, pseudo.labels}),
                            torch::cat({pseudo.valid, pseudo.valid}));

  if (use_pro) {
    const auto fh = out.fused.size(2), fw = out.fused.size(3);
    const auto src = batch_prototypes(out.fused.narrow(0, 0, B), downsample_nearest(b.ys, fh, fw), std::nullopt, C);
    const auto tgt = batch_prototypes(teacher_fused.narrow(0, B, B), downsample_nearest(pseudo.labels, fh, fw),
                                      downsample_nearest(pseudo.valid, fh, fw), C);
    const auto bank_s = momentum_update(state.proto_source, src);
    const auto bank_t = momentum_update(state.proto_target, tgt);
    c.pro = prototype_loss(bank_s, bank_t);
    if (updates) {
      updates->proto_source = bank_s.detached();
      updates->proto_target = bank_t.detached();
    }
  }

  if (use_contrast) {
    const auto local = student->local_head(out.fused);
    const auto global = student->global_head(out.fused);
    ContrastiveBatch cb;
    cb.local_s = local.narrow(0, 0, B);
    cb.local_st = local.narrow(0, B, B);
    cb.local_t = local.narrow(0, 2 * B, B);
    cb.local_ts = local.narrow(0, 3 * B, B);
    cb.global_s = global.narrow(0, 0, B);
    cb.global_st = global.narrow(0, B, B);
    cb.global_t = global.narrow(0, 2 * B, B);
    cb.global_ts = global.narrow(0, 3 * B, B);
    cb.tau = cfg.temperature;
    cb.selection = cfg.positive_selection;
    NegativeQueue frozen = state.queue;  // keys are pushed after the optimizer step
    c.contrast = glcl_loss(cb, frozen, cfg.lambda_mix).total;
  }

  if (use_aalp) {
    const auto stride = cfg.network.total_stride();
    const auto ph = patch_side(H, cfg.patch_fraction, stride), pw = patch_side(W, cfg.patch_fraction, stride);
    const auto gh = H / cfg.global_downsample, gw = W / cfg.global_downsample;
    require(gh % stride == 0 && gw % stride == 0, ErrorKind::config,
            "downsampled global view is not a multiple of the encoder stride");
    const auto fs = cfg.network.feature_stride();
    const auto grid_h = static_cast<std::size_t>(gh / fs), grid_w = static_cast<std::size_t>(gw / fs);

    const auto views = torch::cat({xs, b.xt_strong.to(dtype)});
    const auto labels = torch::cat({b.ys, pseudo.labels});
    const auto valid = torch::cat({torch::ones_like(pseudo.valid), pseudo.valid});
    std::vector<Mask> regions;
    std::vector<torch::Tensor> patches, patch_labels, patch_valid;
    for (std::int64_t i = 0; i < 2 * B; ++i) {
      const auto sel =
          attention_patches
              ? select_patch(saliency[static_cast<std::size_t>(i)], static_cast<std::size_t>(H),
                             static_cast<std::size_t>(W), static_cast<std::size_t>(ph), static_cast<std::size_t>(pw),
                             grid_h, grid_w)
              : random_patch(rng, static_cast<std::size_t>(H), static_cast<std::size_t>(W),
                             static_cast<std::size_t>(ph), static_cast<std::size_t>(pw), grid_h, grid_w);
      regions.push_back(sel.region_mask);
      patches.push_back(crop_tensor(views[i], sel.bounds));
      patch_labels.push_back(crop_tensor(labels[i], sel.bounds));
      patch_valid.push_back(crop_tensor(valid[i], sel.bounds));
    }
    const auto local_out = student->forward(torch::stack(patches));
    const auto global_in = cfg.global_downsample == 1
                               ? views
                               : F::avg_pool2d(views, F::AvgPool2dFuncOptions(cfg.global_downsample));
    const auto global_out = student->forward(global_in);
    const auto fused = global_local_fuse(student, local_out.fused, global_out.fused, regions);
    const auto logits = F::interpolate(fused.logits, F::InterpolateFuncOptions()
                                                         .size(std::vector<std::int64_t>{ph, pw})
                                                         .mode(torch::kBilinear)
                                                         .align_corners(false));
    const auto p = torch::softmax(logits, 1);
    const auto y = torch::stack(patch_labels);
    const auto v = torch::stack(patch_valid);
    const auto pooled_local = local_out.fused.mean({2, 3});
    const auto pooled_global = fused.global_region.mean({2, 3});
    AalpTerms src{dice_loss(p.narrow(0, 0, B), y.narrow(0, 0, B)),
                  cosine_reg(pooled_local.narrow(0, 0, B), pooled_global.narrow(0, 0, B), cfg.cosine_denominator)};
    AalpTerms tgt{dice_loss(p.narrow(0, B, B), y.narrow(0, B, B), v.narrow(0, B, B)),
                  cosine_reg(pooled_local.narrow(0, B, B), pooled_global.narrow(0, B, B), cfg.cosine_denominator)};
    c.aalp = aalp_loss(src, tgt, cfg.gamma, cfg.delta);
  }
  return c;
}

// ---------------------------------------------------------------------------
// Evaluation

json EvalReport::to_json() const {
  return {{"per_class_iou", per_class_iou}, {"per_class_dice", per_class_dice}, {"mean_dice", mean_dice},
          {"foreground_iou", foreground_iou}, {"selection_score", selection_score}, {"epoch", epoch},
          {"seed", seed}, {"images", images}};
}

namespace {

torch::Tensor predict(SegNet& net, const torch::Tensor& images) {
  torch::NoGradGuard no_grad;
  const auto dtype = net->parameters().front().scalar_type();
  return net->forward(images.to(dtype)).logits.argmax(1);
}

}  // namespace

EvalReport evaluate(SegNet& net, const std::vector<const LabeledImage*>& images, int num_classes) {
  require(!images.empty(), ErrorKind::invalid_argument, "evaluate: no images");
  std::vector<ConfusionCounts> counts(static_cast<std::size_t>(num_classes));
  for (std::size_t start = 0; start < images.size(); start += kEvalBatch) {
    const auto end = std::min(images.size(), start + static_cast<std::size_t>(kEvalBatch));
    std::vector<const Image*> px;
    for (std::size_t i = start; i < end; ++i) px.push_back(&images[i]->pixels);
    const auto pred = predict(net, images_to_tensor(px));
    for (std::size_t i = start; i < end; ++i) {
      const Mask p = tensor_row_to_mask(pred[static_cast<std::int64_t>(i - start)]);
      const Mask& truth = images[i]->mask();
      for (int c = 0; c < num_classes; ++c)
        counts[static_cast<std::size_t>(c)] += confusion_counts(p, truth, static_cast<std::uint8_t>(c));
    }
  }
  EvalReport r;
  r.images = images.size();
  double fg_iou = 0.0, dice_sum = 0.0;
  for (int c = 0; c < num_classes; ++c) {
    r.per_class_iou.push_back(iou(counts[static_cast<std::size_t>(c)]));
    r.per_class_dice.push_back(dice_score(counts[static_cast<std::size_t>(c)]));
    dice_sum += r.per_class_dice.back();
    if (c > 0) fg_iou += r.per_class_iou.back();
  }
  r.mean_dice = dice_sum / num_classes;
  r.foreground_iou = num_classes > 1 ? fg_iou / (num_classes - 1) : r.per_class_iou.front();
  return r;
}

double pseudo_agreement(SegNet& student, SegNet& teacher, const std::vector<const Image*>& images, double keep_fraction,
                        int num_classes, SelectionMetric metric) {
  if (images.empty()) return 0.0;
  std::vector<ConfusionCounts> counts(static_cast<std::size_t>(num_classes));
  torch::NoGradGuard no_grad;
  const auto dtype = teacher->parameters().front().scalar_type();
  for (std::size_t start = 0; start < images.size(); start += kEvalBatch) {
    const auto end = std::min(images.size(), start + static_cast<std::size_t>(kEvalBatch));
    const std::vector<const Image*> px(images.begin() + static_cast<std::ptrdiff_t>(start),
                                       images.begin() + static_cast<std::ptrdiff_t>(end));
    const auto x = images_to_tensor(px);
    const auto pseudo = make_pseudo_labels(torch::softmax(teacher->forward(x.to(dtype)).logits, 1), keep_fraction);
    const auto pred = predict(student, x);
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(px.size()); ++i) {
      const auto valid = pseudo.valid[i];
      // invalid pixels are mapped to a class id outside [0, C) in both maps
      const auto outside = torch::full_like(pred[i], num_classes);
      const Mask p = tensor_row_to_mask(torch::where(valid, pred[i], outside));
      const Mask t = tensor_row_to_mask(torch::where(valid, pseudo.labels[i], outside));
      for (int c = 1; c < num_classes; ++c)
        counts[static_cast<std::size_t>(c)] += confusion_counts(p, t, static_cast<std::uint8_t>(c));
    }
  }
  double sum = 0.0;
  for (int c = 1; c < num_classes; ++c) {
    const auto& k = counts[static_cast<std::size_t>(c)];
    sum += metric == SelectionMetric::iou ? iou(k) : dice_score(k);
  }
  return num_classes > 1 ? sum / (num_classes - 1) : 0.0;
}

// ---------------------------------------------------------------------------
// Splits

json RunSplits::to_json() const {
  return {{"source", {{"train", source.train}, {"val", source.val}}},
          {"target", {{"train", target.train}, {"val", target.val}}}};
}

RunSplits RunSplits::from_json(const json& j) {
  RunSplits s;
  s.source.train = j.at("source").at("train").get<std::vector<std::string>>();
  s.source.val = j.at("source").at("val").get<std::vector<std::string>>();
  s.target.train = j.at("target").at("train").get<std::vector<std::string>>();
  s.target.val = j.at("target").at("val").get<std::vector<std::string>>();
  return s;
}

RunSplits make_splits(const TrainData& data, double val_fraction, std::uint64_t seed) {
  RunSplits s;
  s.source = split_cases(data.source, val_fraction, seed);
  if (!data.target.empty()) s.target = split_cases(data.target, val_fraction, seed + 1);
  return s;
}

namespace {

std::vector<const LabeledImage*> pick(const std::vector<LabeledImage>& images, const std::vector<std::string>& ids) {
  std::vector<const LabeledImage*> out;
  for (const auto& im : images)
    if (std::find(ids.begin(), ids.end(), im.case_id) != ids.end()) out.push_back(&im);
  return out;
}

std::vector<const Image*> pixels_of(const std::vector<const LabeledImage*>& images) {
  std::vector<const Image*> out;
  for (const auto* im : images) out.push_back(&im->pixels);
  return out;
}

}  // namespace

SelectionInputs selection_for(TrainState& state, const TrainConfig& cfg, const TrainData& data,
                              const RunSplits& splits) {
  SelectionInputs s;
  const auto val = pick(data.source, splits.source.val);
  const auto report = evaluate(state.teacher, val, cfg.network.num_classes);
  s.source_metric = cfg.selection_metric == SelectionMetric::iou ? report.foreground_iou : report.mean_dice;
  const auto target = pixels_of(pick(data.target, splits.target.train));
  s.pseudo_metric = pseudo_agreement(state.student, state.teacher, target, cfg.keep_fraction,
                                     cfg.network.num_classes, cfg.selection_metric);
  s.score = selection_score(s.source_metric, s.pseudo_metric);
  return s;
}

// ---------------------------------------------------------------------------
// Training loop

TrainResult train(const TrainConfig& cfg, const TrainData& data, std::uint64_t seed, const TrainHooks& hooks) {
  cfg.validate();
  torch::set_num_threads(cfg.threads);
  require(!data.source.empty(), ErrorKind::invalid_argument, "no source images");
  const bool adapt = cfg.mode == TrainMode::uda;
  require(!adapt || !data.target.empty(), ErrorKind::invalid_argument, "no target images");

  TrainResult result;
  result.splits = make_splits(data, cfg.val_fraction, seed);
  const auto source_train = pick(data.source, result.splits.source.train);
  const auto target_train = pixels_of(pick(data.target, result.splits.target.train));
  require(!source_train.empty(), ErrorKind::invalid_argument, "empty source training split");
  require(!adapt || !target_train.empty(), ErrorKind::invalid_argument, "empty target training split");

  TrainState state = TrainState::init(cfg, seed);
  std::vector<torch::optim::OptimizerParamGroup> groups;
  groups.emplace_back(state.student->encoder_parameters(),
                      std::make_unique<torch::optim::AdamWOptions>(torch::optim::AdamWOptions(cfg.lr_encoder).weight_decay(cfg.weight_decay)));
  groups.emplace_back(state.student->decoder_parameters(),
                      std::make_unique<torch::optim::AdamWOptions>(torch::optim::AdamWOptions(cfg.lr_decoder).weight_decay(cfg.weight_decay)));
  torch::optim::AdamW optimizer(std::move(groups));
  const double base_lr[2] = {cfg.lr_encoder, cfg.lr_decoder};

  const auto B = static_cast<std::size_t>(cfg.batch_size);
  const int steps_per_epoch =
      cfg.steps_per_epoch > 0 ? cfg.steps_per_epoch : static_cast<int>((source_train.size() + B - 1) / B);
  const double total_steps = static_cast<double>(cfg.epochs) * steps_per_epoch;
  const auto params = state.student->parameters();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const bool warmup = !adapt || epoch < cfg.warmup_epochs;
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(epoch)};
    std::mt19937_64 rng(seq);
    std::vector<std::size_t> src_order(source_train.size()), tgt_order(target_train.size());
    std::iota(src_order.begin(), src_order.end(), 0);
    std::iota(tgt_order.begin(), tgt_order.end(), 0);
    std::shuffle(src_order.begin(), src_order.end(), rng);
    std::shuffle(tgt_order.begin(), tgt_order.end(), rng);

    EpochRecord rec;
    rec.epoch = epoch;
    for (int s = 0; s < steps_per_epoch; ++s) {
      std::vector<const LabeledImage*> src;
      std::vector<const Image*> tgt;
      for (std::size_t i = 0; i < B; ++i) {
        const auto k = static_cast<std::size_t>(s) * B + i;
        src.push_back(source_train[src_order[k % src_order.size()]]);
        if (!warmup) tgt.push_back(target_train[tgt_order[k % tgt_order.size()]]);
      }
      const auto batch = make_step_batch(src, tgt, cfg, rng, warmup);
      StepUpdates updates;
      const auto comps = compute_losses(state, batch, cfg, warmup, rng, &updates);
      const auto loss = total_loss(comps, cfg.weights, warmup);

      double lr_scale = 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(state.step) / total_steps));
      if (state.step < cfg.lr_warmup_steps)
        lr_scale *= static_cast<double>(state.step + 1) / static_cast<double>(cfg.lr_warmup_steps);
      for (std::size_t g = 0; g < optimizer.param_groups().size(); ++g)
        static_cast<torch::optim::AdamWOptions&>(optimizer.param_groups()[g].options()).lr(base_lr[g] * lr_scale);
      optimizer.zero_grad();
      loss.backward();
      if (cfg.grad_clip > 0.0) torch::nn::utils::clip_grad_norm_(params, cfg.grad_clip);
      optimizer.step();
      ++state.step;
      ema_update(state.teacher, state.student, cfg.ema.alpha_at(state.step));
      if (!warmup) {
        state.proto_source = std::move(updates.proto_source);
        state.proto_target = std::move(updates.proto_target);
        if (updates.queue_keys.defined()) state.queue.push(updates.queue_keys);
      }
      rec.seg += comps.seg.item<double>();
      rec.consistency += comps.consistency.item<double>();
      rec.pro += comps.pro.item<double>();
      rec.aalp += comps.aalp.item<double>();
      rec.contrast += comps.contrast.item<double>();
    }
    for (double* v : {&rec.seg, &rec.consistency, &rec.pro, &rec.aalp, &rec.contrast}) *v /= steps_per_epoch;
    state.epoch = epoch + 1;

    const auto sel = selection_for(state, cfg, data, result.splits);
    rec.selection_score = sel.score;
    rec.source_val_metric = sel.source_metric;
    rec.pseudo_metric = sel.pseudo_metric;
    result.history.push_back(rec);
    const bool best = result.history.size() == 1 || sel.score > result.best_score;
    if (best) {
      result.best_score = sel.score;
      result.best_epoch = epoch;
      result.best = state.clone();
    }
    if (hooks.on_epoch) hooks.on_epoch(rec, state, best);
  }
  return result;
}

}  // namespace mtuda
