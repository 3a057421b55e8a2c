#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mtuda/grid.hpp"

namespace mtuda {

enum class Domain { source, target };

std::string to_string(Domain d);
Domain domain_from_string(const std::string& s);

/// One 2D slice with an optional per-pixel class mask.
///
/// Mask access goes through `mask()`, which counts every read of a
/// target-domain mask and throws once the mask has been sealed. The trainer
/// never touches target masks; tests seal them to prove it.
class LabeledImage {
 public:
  Image pixels;
  Domain domain = Domain::source;
  std::string case_id;
  int slice_index = 0;

  LabeledImage() = default;
  LabeledImage(Image px, std::optional<Mask> mask, Domain dom, std::string case_id, int slice = 0);

  bool has_mask() const noexcept { return mask_.has_value(); }
  const Mask& mask() const;
  void set_mask(Mask m);
  void clear_mask() noexcept { mask_.reset(); }

  /// After sealing, any `mask()` call throws a label_firewall error.
  void seal_mask() noexcept { sealed_ = true; }
  bool sealed() const noexcept { return sealed_; }

  /// Process-wide count of target-domain mask reads.
  static std::uint64_t target_mask_reads() noexcept;
  static void reset_target_mask_reads() noexcept;

  /// Compares content including the mask, bypassing the read guard.
  bool same_content(const LabeledImage& other) const;

 private:
  std::optional<Mask> mask_;
  bool sealed_ = false;
  static std::atomic<std::uint64_t> target_reads_;
};

/// Patient-wise partition of case ids.
struct DatasetSplit {
  std::vector<std::string> train;
  std::vector<std::string> val;
};

/// Deterministic case-level split; `val_fraction` of the distinct case ids
/// (rounded up, at least one when there are two or more cases) go to val.
DatasetSplit split_cases(const std::vector<LabeledImage>& images, double val_fraction,
                         std::uint64_t seed);
std::vector<LabeledImage> select_cases(const std::vector<LabeledImage>& images,
                                       const std::vector<std::string>& case_ids);

enum class AugmentStrength { weak, strong };

struct AugmentationPolicy {
  double blur_sigma_lo = 0.0;
  double blur_sigma_hi = 0.0;
  double rotation_degrees_max = 0.0;
  double dropout_fraction = 0.0;
  AugmentStrength strength = AugmentStrength::weak;

  void validate() const;
  static AugmentationPolicy identity() { return {}; }
};

/// Clamp raw Hounsfield units to [lo, hi] and rescale to [0,1].
Image hu_window(const Grid<std::int32_t>& raw, std::int32_t lo, std::int32_t hi);

/// Centered crop with offsets floor((H-h)/2), floor((W-w)/2).
template <typename T>
Grid<T> center_crop(const Grid<T>& image, std::size_t h, std::size_t w) {
  require(h <= image.rows() && w <= image.cols(), ErrorKind::invalid_argument,
          "crop too large: " + std::to_string(h) + "x" + std::to_string(w) + " from " +
              std::to_string(image.rows()) + "x" + std::to_string(image.cols()));
  const std::size_t r0 = (image.rows() - h) / 2;
  const std::size_t c0 = (image.cols() - w) / 2;
  Grid<T> out(h, w);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) out(r, c) = image(r0 + r, c0 + c);
  return out;
}

/// Rotation (bilinear pixels, nearest mask), Gaussian blur and pixel dropout,
/// in that order. Geometry touches pixels and mask; blur and dropout touch
/// pixels only. Deterministic for a fixed seed.
LabeledImage augment(const LabeledImage& image, const AugmentationPolicy& policy, std::uint64_t seed);

Image rotate_bilinear(const Image& image, double degrees);
Mask rotate_nearest(const Mask& mask, double degrees);
Image gaussian_blur(const Image& image, double sigma);
/// Zeroes exactly floor(fraction * H * W) pixels chosen by a seeded permutation.
Image pixel_dropout(const Image& image, double fraction, std::uint64_t seed);

/// Intensity style of one synthetic domain. Pixel value is
/// gain * (anatomy + texture) + bias + noise, clamped to [0,1].
struct DomainStyle {
  double gain = 1.0;
  double bias = 0.0;
  double texture_frequency = 1.0;  ///< sinusoid cycles across the image
  double texture_amplitude = 0.03;
  double noise_sigma = 0.02;
};

struct SyntheticConfig {
  int image_size = 64;
  int cases = 20;
  int slices_per_case = 8;
  int lesion_count_min = 1;
  int lesion_count_max = 2;
  double lesion_radius_min = 2.5;
  double lesion_radius_max = 4.5;
  int vessel_count = 3;
  double tissue_level = 0.15;
  double vessel_level = 0.40;
  double lesion_level = 0.90;
  DomainStyle source{1.0, 0.0, 1.0, 0.03, 0.02};
  DomainStyle target{0.50, 0.50, 1.0, 0.05, 0.03};

  void validate() const;
};

struct SyntheticDomains {
  std::vector<LabeledImage> source;
  std::vector<LabeledImage> target;
};

/// Two domains drawn from the same anatomy model with different styles.
/// Every image carries its ground-truth mask; pixels are quantized to the
/// 16-bit lattice so the on-disk form is lossless.
SyntheticDomains gen_synthetic_domains(const SyntheticConfig& config, std::uint64_t seed);

inline double quantize16(double v) { return static_cast<double>(static_cast<std::uint16_t>(v * 65535.0 + 0.5)) / 65535.0; }

enum class MaskLoad { load, skip };

/// Layout: <root>/<domain>/<case_id>/{manifest.json, slice_###.png, slice_###_mask.png}.
void save_dataset(const std::vector<LabeledImage>& cases, const std::filesystem::path& root);
/// Loads every domain found under `root`, or only `only_domain` when given.
/// With MaskLoad::skip no mask file is ever opened.
std::vector<LabeledImage> load_dataset(const std::filesystem::path& root,
                                       std::optional<Domain> only_domain = std::nullopt,
                                       MaskLoad masks = MaskLoad::load);

}  // namespace mtuda
