#include "mtuda/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

#include "mtuda/png_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mtuda {

std::atomic<std::uint64_t> LabeledImage::target_reads_{0};

std::string to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

Domain domain_from_string(const std::string& s) {
  if (s == "source") return Domain::source;
  if (s == "target") return Domain::target;
  throw Error(ErrorKind::format, "unknown domain tag '" + s + "'");
}

LabeledImage::LabeledImage(Image px, std::optional<Mask> mask, Domain dom, std::string id, int slice)
    : pixels(std::move(px)), domain(dom), case_id(std::move(id)), slice_index(slice), mask_(std::move(mask)) {
  if (mask_) require_same_shape(pixels, *mask_, "LabeledImage mask");
}

const Mask& LabeledImage::mask() const {
  if (domain == Domain::target) target_reads_.fetch_add(1, std::memory_order_relaxed);
  if (sealed_) throw Error(ErrorKind::label_firewall, "read of sealed mask for case " + case_id);
  require(mask_.has_value(), ErrorKind::invalid_argument, "image of case " + case_id + " has no mask");
  return *mask_;
}

void LabeledImage::set_mask(Mask m) {
  require_same_shape(pixels, m, "LabeledImage mask");
  mask_ = std::move(m);
}

std::uint64_t LabeledImage::target_mask_reads() noexcept { return target_reads_.load(); }
void LabeledImage::reset_target_mask_reads() noexcept { target_reads_.store(0); }

bool LabeledImage::same_content(const LabeledImage& o) const {
  return pixels == o.pixels && mask_ == o.mask_ && domain == o.domain && case_id == o.case_id &&
         slice_index == o.slice_index;
}

DatasetSplit split_cases(const std::vector<LabeledImage>& images, double val_fraction, std::uint64_t seed) {
  require(val_fraction >= 0.0 && val_fraction < 1.0, ErrorKind::invalid_argument, "val_fraction must be in [0,1)");
  std::set<std::string> unique;
  for (const auto& im : images) unique.insert(im.case_id);
  std::vector<std::string> ids(unique.begin(), unique.end());
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  std::size_t n_val = static_cast<std::size_t>(std::ceil(val_fraction * static_cast<double>(ids.size())));
  if (val_fraction > 0.0 && ids.size() >= 2) n_val = std::clamp<std::size_t>(n_val, 1, ids.size() - 1);
  DatasetSplit split;
  split.val.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_val));
  split.train.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_val), ids.end());
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.val.begin(), split.val.end());
  return split;
}

std::vector<LabeledImage> select_cases(const std::vector<LabeledImage>& images,
                                       const std::vector<std::string>& case_ids) {
  const std::set<std::string> wanted(case_ids.begin(), case_ids.end());
  std::vector<LabeledImage> out;
  for (const auto& im : images)
    if (wanted.count(im.case_id)) out.push_back(im);
  return out;
}

// ---------------------------------------------------------------------------
// Preprocessing and augmentation

void AugmentationPolicy::validate() const {
  require(blur_sigma_lo >= 0.0 && blur_sigma_lo <= blur_sigma_hi, ErrorKind::invalid_argument,
          "blur sigma range must satisfy 0 <= lo <= hi");
  require(dropout_fraction >= 0.0 && dropout_fraction < 1.0, ErrorKind::invalid_argument,
          "dropout_fraction must be in [0,1)");
  require(rotation_degrees_max >= 0.0, ErrorKind::invalid_argument, "rotation_degrees_max must be >= 0");
}

Image hu_window(const Grid<std::int32_t>& raw, std::int32_t lo, std::int32_t hi) {
  require(lo < hi, ErrorKind::invalid_argument,
          "invalid HU window [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  Image out(raw.rows(), raw.cols());
  const double span = static_cast<double>(hi) - static_cast<double>(lo);
  for (std::size_t i = 0; i < raw.size(); ++i)
    out[i] = (static_cast<double>(std::clamp(raw[i], lo, hi)) - lo) / span;
  return out;
}

namespace {

// Maps output coordinates to the input location under a rotation about the
// grid center.
struct Rotation {
  double cos_t, sin_t, cy, cx;
  Rotation(std::size_t rows, std::size_t cols, double degrees)
      : cos_t(std::cos(degrees * std::numbers::pi / 180.0)),
        sin_t(std::sin(degrees * std::numbers::pi / 180.0)),
        cy((static_cast<double>(rows) - 1.0) / 2.0),
        cx((static_cast<double>(cols) - 1.0) / 2.0) {}
  std::pair<double, double> source(double r, double c) const {
    const double dy = r - cy, dx = c - cx;
    return {cy + cos_t * dy - sin_t * dx, cx + sin_t * dy + cos_t * dx};
  }
};

}  // namespace

Image rotate_bilinear(const Image& image, double degrees) {
  if (degrees == 0.0) return image;
  const Rotation rot(image.rows(), image.cols(), degrees);
  const auto rows = static_cast<long>(image.rows()), cols = static_cast<long>(image.cols());
  auto at = [&](long r, long c) { return (r < 0 || c < 0 || r >= rows || c >= cols) ? 0.0 : image(r, c); };
  Image out(image.rows(), image.cols());
  for (long r = 0; r < rows; ++r) {
    for (long c = 0; c < cols; ++c) {
      const auto [sy, sx] = rot.source(static_cast<double>(r), static_cast<double>(c));
      const double fy = std::floor(sy), fx = std::floor(sx);
      const double wy = sy - fy, wx = sx - fx;
      const long y0 = static_cast<long>(fy), x0 = static_cast<long>(fx);
      out(r, c) = (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x0 + 1)) +
                  wy * ((1 - wx) * at(y0 + 1, x0) + wx * at(y0 + 1, x0 + 1));
    }
  }
  return out;
}

Mask rotate_nearest(const Mask& mask, double degrees) {
  if (degrees == 0.0) return mask;
  const Rotation rot(mask.rows(), mask.cols(), degrees);
  const auto rows = static_cast<long>(mask.rows()), cols = static_cast<long>(mask.cols());
  Mask out(mask.rows(), mask.cols(), 0);
  for (long r = 0; r < rows; ++r) {
    for (long c = 0; c < cols; ++c) {
      const auto [sy, sx] = rot.source(static_cast<double>(r), static_cast<double>(c));
      const long y = std::lround(sy), x = std::lround(sx);
      if (y >= 0 && x >= 0 && y < rows && x < cols) out(r, c) = mask(y, x);
    }
  }
  return out;
}

Image gaussian_blur(const Image& image, double sigma) {
  if (sigma <= 0.0 || image.empty()) return image;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  for (int k = -radius; k <= radius; ++k) kernel[k + radius] = std::exp(-0.5 * k * k / (sigma * sigma));
  const double norm = std::accumulate(kernel.begin(), kernel.end(), 0.0);
  for (auto& k : kernel) k /= norm;

  auto reflect = [](long i, long n) {
    if (n == 1) return 0L;
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return i;
  };
  const auto rows = static_cast<long>(image.rows()), cols = static_cast<long>(image.cols());
  Image tmp(image.rows(), image.cols()), out(image.rows(), image.cols());
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < cols; ++c) {
      double acc = 0;
      for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * image(r, reflect(c + k, cols));
      tmp(r, c) = acc;
    }
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < cols; ++c) {
      double acc = 0;
      for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * tmp(reflect(r + k, rows), c);
      out(r, c) = acc;
    }
  return out;
}

Image pixel_dropout(const Image& image, double fraction, std::uint64_t seed) {
  require(fraction >= 0.0 && fraction < 1.0, ErrorKind::invalid_argument, "dropout fraction must be in [0,1)");
  const auto count = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(image.size())));
  if (count == 0) return image;
  std::vector<std::size_t> order(image.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  Image out = image;
  for (std::size_t i = 0; i < count; ++i) out[order[i]] = 0.0;
  return out;
}

LabeledImage augment(const LabeledImage& image, const AugmentationPolicy& policy, std::uint64_t seed) {
  policy.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double angle =
      policy.rotation_degrees_max > 0 ? (2.0 * unit(rng) - 1.0) * policy.rotation_degrees_max : 0.0;
  const double sigma = policy.blur_sigma_hi > 0
                           ? policy.blur_sigma_lo + unit(rng) * (policy.blur_sigma_hi - policy.blur_sigma_lo)
                           : 0.0;
  const std::uint64_t dropout_seed = rng();

  LabeledImage out = image;
  out.pixels = rotate_bilinear(image.pixels, angle);
  // a sealed mask is never read, so the augmented copy carries none
  if (image.sealed()) out.clear_mask();
  else if (image.has_mask()) out.set_mask(rotate_nearest(image.mask(), angle));
  out.pixels = gaussian_blur(out.pixels, sigma);
  out.pixels = pixel_dropout(out.pixels, policy.dropout_fraction, dropout_seed);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic domains

void SyntheticConfig::validate() const {
  auto bad = [](const std::string& what) { throw Error(ErrorKind::config, "synthetic config: " + what); };
  if (image_size < 8) bad("image_size must be >= 8");
  if (cases < 1 || slices_per_case < 1) bad("cases and slices_per_case must be >= 1");
  if (lesion_count_min < 0 || lesion_count_min > lesion_count_max) bad("lesion count range invalid");
  if (lesion_radius_min <= 0 || lesion_radius_min > lesion_radius_max) bad("lesion radius range invalid");
  if (2.0 * lesion_radius_max + 2.0 >= image_size) bad("lesion larger than image");
  if (vessel_count < 1) bad("vessel_count must be >= 1");
  if (!(0.0 <= tissue_level && tissue_level < vessel_level && vessel_level < lesion_level))
    bad("levels must satisfy 0 <= tissue < vessel < lesion");
  for (const auto* s : {&source, &target}) {
    if (s->gain <= 0 || s->noise_sigma < 0 || s->texture_amplitude < 0) bad("gain must be > 0, noise and texture >= 0");
    // lesions must stay brighter than anything around them after style and noise
    if (s->gain * (lesion_level - vessel_level - 2 * s->texture_amplitude) <= 6 * s->noise_sigma)
      bad("lesion contrast too low for the given noise and texture");
    if (s->bias + s->gain * (vessel_level + s->texture_amplitude) + 3 * s->noise_sigma >= 1.0)
      bad("background saturates at the given gain and bias");
  }
}

namespace {

struct Ellipse {
  double cy, cx, ay, ax, theta;
  bool contains(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    const double u = std::cos(theta) * dx + std::sin(theta) * dy;
    const double v = -std::sin(theta) * dx + std::cos(theta) * dy;
    return (u * u) / (ax * ax) + (v * v) / (ay * ay) <= 1.0;
  }
};

struct CaseAnatomy {
  Ellipse body;
  std::vector<Ellipse> vessels;
  std::vector<std::pair<double, double>> drift;  // per-vessel (dy, dx) per slice
};

std::vector<LabeledImage> generate_domain(const SyntheticConfig& cfg, const DomainStyle& style, Domain domain,
                                          std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto noise = [&] {
    if (style.noise_sigma == 0.0) return 0.0;
    double z;
    do z = gauss(rng);
    while (std::abs(z) > 3.0);
    return z * style.noise_sigma;
  };

  const int n = cfg.image_size;
  const double s = n;
  const std::string prefix = domain == Domain::source ? "src_" : "tgt_";
  std::vector<LabeledImage> out;
  out.reserve(static_cast<std::size_t>(cfg.cases * cfg.slices_per_case));

  for (int case_idx = 0; case_idx < cfg.cases; ++case_idx) {
    CaseAnatomy anat;
    anat.body = {s / 2 + uniform(-0.03, 0.03) * s, s / 2 + uniform(-0.03, 0.03) * s, uniform(0.36, 0.42) * s,
                 uniform(0.40, 0.46) * s, uniform(-0.2, 0.2)};
    for (int v = 0; v < cfg.vessel_count; ++v) {
      anat.vessels.push_back({anat.body.cy + uniform(-0.2, 0.2) * s, anat.body.cx + uniform(-0.25, 0.25) * s,
                              uniform(0.07, 0.10) * s, uniform(0.18, 0.28) * s, uniform(0, std::numbers::pi)});
      anat.drift.emplace_back(uniform(-0.01, 0.01) * s, uniform(-0.01, 0.01) * s);
    }
    char id[32];
    std::snprintf(id, sizeof id, "%s%03d", prefix.c_str(), case_idx);

    for (int slice = 0; slice < cfg.slices_per_case; ++slice) {
      std::vector<Ellipse> vessels = anat.vessels;
      for (std::size_t v = 0; v < vessels.size(); ++v) {
        vessels[v].cy += anat.drift[v].first * slice;
        vessels[v].cx += anat.drift[v].second * slice;
      }
      // lesions sit inside vessels, fully inside the image
      struct Lesion { double cy, cx, r; };
      std::vector<Lesion> lesions;
      const int count = cfg.lesion_count_min +
                        static_cast<int>(unit(rng) * (cfg.lesion_count_max - cfg.lesion_count_min + 1) * 0.999999);
      for (int l = 0; l < count; ++l) {
        const double r = uniform(cfg.lesion_radius_min, cfg.lesion_radius_max);
        const Ellipse& host = vessels[static_cast<std::size_t>(unit(rng) * vessels.size() * 0.999999)];
        double cy = host.cy, cx = host.cx;
        for (int attempt = 0; attempt < 64; ++attempt) {
          const double y = host.cy + uniform(-1, 1) * std::max(host.ay, host.ax);
          const double x = host.cx + uniform(-1, 1) * std::max(host.ay, host.ax);
          if (host.contains(y, x) && anat.body.contains(y, x)) {
            cy = y;
            cx = x;
            break;
          }
        }
        cy = std::clamp(cy, r + 1, s - r - 2);
        cx = std::clamp(cx, r + 1, s - r - 2);
        lesions.push_back({cy, cx, r});
      }

      const double tex_angle = uniform(0, std::numbers::pi);
      const double tex_phase = uniform(0, 2 * std::numbers::pi);
      Image px(static_cast<std::size_t>(n), static_cast<std::size_t>(n));
      Mask mask(static_cast<std::size_t>(n), static_cast<std::size_t>(n), 0);
      for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c) {
          const double y = r + 0.5, x = c + 0.5;
          double level = 0.0;
          if (anat.body.contains(y, x)) level = cfg.tissue_level;
          for (const auto& v : vessels)
            if (v.contains(y, x) && anat.body.contains(y, x)) level = cfg.vessel_level;
          for (const auto& l : lesions) {
            if ((y - l.cy) * (y - l.cy) + (x - l.cx) * (x - l.cx) <= l.r * l.r) {
              level = cfg.lesion_level;
              mask(r, c) = 1;
            }
          }
          const double texture =
              style.texture_amplitude *
              std::sin(2 * std::numbers::pi * style.texture_frequency *
                           (x * std::cos(tex_angle) + y * std::sin(tex_angle)) / s +
                       tex_phase);
          const double value = style.gain * (level + texture) + style.bias + noise();
          px(r, c) = quantize16(std::clamp(value, 0.0, 1.0));
        }
      }
      out.emplace_back(std::move(px), std::move(mask), domain, id, slice);
    }
  }
  return out;
}

}  // namespace

SyntheticDomains gen_synthetic_domains(const SyntheticConfig& config, std::uint64_t seed) {
  config.validate();
  std::seed_seq src_seq{seed, std::uint64_t{0x5eed0}}, tgt_seq{seed, std::uint64_t{0x5eed1}};
  std::uint64_t src_seed = 0, tgt_seed = 0;
  {
    std::array<std::uint32_t, 2> a{}, b{};
    src_seq.generate(a.begin(), a.end());
    tgt_seq.generate(b.begin(), b.end());
    src_seed = (std::uint64_t{a[0]} << 32) | a[1];
    tgt_seed = (std::uint64_t{b[0]} << 32) | b[1];
  }
  return {generate_domain(config, config.source, Domain::source, src_seed),
          generate_domain(config, config.target, Domain::target, tgt_seed)};
}

// ---------------------------------------------------------------------------
// On-disk format

namespace {

std::string slice_name(int index, bool mask) {
  char buf[40];
  std::snprintf(buf, sizeof buf, mask ? "slice_%03d_mask.png" : "slice_%03d.png", index);
  return buf;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::format, path.string() + ": cannot open");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, path.string() + ": " + e.what());
  }
}

}  // namespace

void save_dataset(const std::vector<LabeledImage>& cases, const fs::path& root) {
  // group slices per (domain, case) keeping first-seen order
  std::map<std::pair<std::string, std::string>, std::vector<const LabeledImage*>> groups;
  for (const auto& im : cases) groups[{to_string(im.domain), im.case_id}].push_back(&im);

  for (const auto& [key, slices] : groups) {
    const fs::path dir = root / key.first / key.second;
    fs::create_directories(dir);
    json manifest{{"case_id", key.second}, {"domain", key.first}, {"slices", json::array()}};
    for (const auto* im : slices) {
      const std::string image_file = slice_name(im->slice_index, false);
      png::write_gray16(dir / image_file, im->pixels);
      json entry{{"index", im->slice_index}, {"image", image_file}, {"mask", nullptr}};
      if (im->has_mask() && !im->sealed()) {
        const std::string mask_file = slice_name(im->slice_index, true);
        png::write_mask(dir / mask_file, im->mask());
        entry["mask"] = mask_file;
      }
      manifest["slices"].push_back(entry);
    }
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
  }
}

std::vector<LabeledImage> load_dataset(const fs::path& root, std::optional<Domain> only_domain, MaskLoad masks) {
  require(fs::is_directory(root), ErrorKind::format, root.string() + ": dataset root is not a directory");
  std::vector<LabeledImage> out;
  for (const Domain domain : {Domain::source, Domain::target}) {
    if (only_domain && *only_domain != domain) continue;
    const fs::path domain_dir = root / to_string(domain);
    if (!fs::is_directory(domain_dir)) continue;
    std::vector<fs::path> case_dirs;
    for (const auto& entry : fs::directory_iterator(domain_dir))
      if (entry.is_directory()) case_dirs.push_back(entry.path());
    std::sort(case_dirs.begin(), case_dirs.end());

    for (const auto& dir : case_dirs) {
      const json manifest = read_json(dir / "manifest.json");
      try {
        const std::string case_id = manifest.at("case_id").get<std::string>();
        if (domain_from_string(manifest.at("domain").get<std::string>()) != domain)
          throw Error(ErrorKind::format, (dir / "manifest.json").string() + ": domain tag disagrees with directory");
        for (const auto& entry : manifest.at("slices")) {
          const int index = entry.at("index").get<int>();
          Image px = png::read_gray(dir / entry.at("image").get<std::string>());
          std::optional<Mask> mask;
          if (masks == MaskLoad::load) {
            const auto& mask_entry = entry.at("mask");
            const fs::path mask_path = mask_entry.is_null() ? dir / slice_name(index, true)
                                                            : dir / mask_entry.get<std::string>();
            if (fs::exists(mask_path)) {
              mask = png::read_mask(mask_path);
              require_same_shape(px, *mask, mask_path.string().c_str());
            } else if (domain == Domain::source) {
              throw Error(ErrorKind::format, mask_path.string() + ": missing mask for source-domain image");
            }
          }
          out.emplace_back(std::move(px), std::move(mask), domain, case_id, index);
        }
      } catch (const json::exception& e) {
        throw Error(ErrorKind::format, (dir / "manifest.json").string() + ": " + e.what());
      }
    }
  }
  return out;
}

}  // namespace mtuda
