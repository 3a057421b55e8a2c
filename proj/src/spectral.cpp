#include "mtuda/spectral.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <memory>
#include <mutex>
#include <numeric>

namespace mtuda {
namespace {

// FFTW's planner is not re-entrant; execution is.
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

struct FftwFree {
  void operator()(fftw_complex* p) const noexcept { fftw_free(p); }
};
using ComplexBuffer = std::unique_ptr<fftw_complex[], FftwFree>;

ComplexBuffer allocate(std::size_t n) {
  auto* p = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * n));
  if (!p) throw std::bad_alloc();
  return ComplexBuffer(p);
}

/// Unnormalized 2D DFT in place; sign = FFTW_FORWARD or FFTW_BACKWARD.
void dft2(fftw_complex* data, std::size_t rows, std::size_t cols, int sign) {
  fftw_plan plan;
  {
    std::lock_guard lock(planner_mutex());
    plan = fftw_plan_dft_2d(static_cast<int>(rows), static_cast<int>(cols), data, data, sign, FFTW_ESTIMATE);
  }
  fftw_execute(plan);
  std::lock_guard lock(planner_mutex());
  fftw_destroy_plan(plan);
}

// index in the centered layout of unshifted frequency index k
inline std::size_t centered(std::size_t k, std::size_t n) { return (k + n / 2) % n; }

}  // namespace

SpectralDecomposition fft_decompose(const Image& image) {
  require(!image.empty(), ErrorKind::invalid_argument, "fft_decompose: empty image");
  const std::size_t rows = image.rows(), cols = image.cols();
  auto buf = allocate(rows * cols);
  for (std::size_t i = 0; i < image.size(); ++i) {
    require(std::isfinite(image[i]), ErrorKind::invalid_argument, "fft_decompose: non-finite pixel");
    buf[i][0] = image[i];
    buf[i][1] = 0.0;
  }
  dft2(buf.get(), rows, cols, FFTW_FORWARD);

  SpectralDecomposition spec{Image(rows, cols), Image(rows, cols)};
  for (std::size_t u = 0; u < rows; ++u) {
    for (std::size_t v = 0; v < cols; ++v) {
      const std::complex<double> z(buf[u * cols + v][0], buf[u * cols + v][1]);
      const std::size_t cu = centered(u, rows), cv = centered(v, cols);
      spec.amplitude(cu, cv) = std::abs(z);
      spec.phase(cu, cv) = std::arg(z);
    }
  }
  return spec;
}

Image fft_compose_raw(const SpectralDecomposition& spec) {
  require_same_shape(spec.amplitude, spec.phase, "fft_compose amplitude/phase");
  const std::size_t rows = spec.amplitude.rows(), cols = spec.amplitude.cols();
  auto buf = allocate(rows * cols);
  for (std::size_t u = 0; u < rows; ++u) {
    for (std::size_t v = 0; v < cols; ++v) {
      const std::size_t cu = centered(u, rows), cv = centered(v, cols);
      const double a = spec.amplitude(cu, cv);
      require(a >= 0.0, ErrorKind::invalid_argument, "fft_compose: negative amplitude");
      const std::complex<double> z = std::polar(a, spec.phase(cu, cv));
      buf[u * cols + v][0] = z.real();
      buf[u * cols + v][1] = z.imag();
    }
  }
  dft2(buf.get(), rows, cols, FFTW_BACKWARD);
  Image out(rows, cols);
  const double scale = 1.0 / static_cast<double>(rows * cols);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = buf[i][0] * scale;
  return out;
}

Image fft_compose(const SpectralDecomposition& spec) {
  Image out = fft_compose_raw(spec);
  for (auto& v : out.values()) v = std::clamp(v, 0.0, 1.0);
  return out;
}

FrequencyMask build_lowfreq_mask(std::size_t h, std::size_t w, double beta) {
  require(beta >= 0.0 && beta <= 1.0, ErrorKind::invalid_argument, "beta must be in [0,1]");
  FrequencyMask out{Mask(h, w, 0), beta};
  if (beta == 0.0) return out;
  const auto half_h = static_cast<long>(std::floor(beta * static_cast<double>(h) / 2.0));
  const auto half_w = static_cast<long>(std::floor(beta * static_cast<double>(w) / 2.0));
  const auto ch = static_cast<long>(h / 2), cw = static_cast<long>(w / 2);
  for (long u = 0; u < static_cast<long>(h); ++u)
    for (long v = 0; v < static_cast<long>(w); ++v)
      if (std::abs(u - ch) <= half_h && std::abs(v - cw) <= half_w) out.mask(u, v) = 1;
  return out;
}

SpectralDecomposition style_transfer_spectrum(const Image& src, const Image& tgt, double beta) {
  require_same_shape(src, tgt, "fft_style_transfer");
  SpectralDecomposition s = fft_decompose(src);
  const SpectralDecomposition t = fft_decompose(tgt);
  const FrequencyMask m = build_lowfreq_mask(src.rows(), src.cols(), beta);
  for (std::size_t i = 0; i < s.amplitude.size(); ++i)
    if (m.mask[i]) s.amplitude[i] = t.amplitude[i];
  return s;
}

Image fft_style_transfer(const Image& src, const Image& tgt, double beta) {
  return fft_compose(style_transfer_spectrum(src, tgt, beta));
}

std::size_t intensity_bin(double v, std::size_t bins) {
  const double scaled = std::floor(std::clamp(v, 0.0, 1.0) * static_cast<double>(bins));
  return std::min(bins - 1, static_cast<std::size_t>(scaled));
}

HistogramMapping histogram_mapping(const Image& src, const Image& tgt, std::size_t bins) {
  require(bins >= 2, ErrorKind::invalid_argument, "histogram_match needs at least 2 bins");
  require(!src.empty() && !tgt.empty(), ErrorKind::invalid_argument, "histogram_match: empty image");

  std::vector<std::uint64_t> src_count(bins, 0), tgt_count(bins, 0);
  // observed target range per bin; its midpoint is the value a bin maps to
  std::vector<double> tgt_lo(bins, 1.0), tgt_hi(bins, 0.0);
  for (double v : src.values()) ++src_count[intensity_bin(v, bins)];
  for (double v : tgt.values()) {
    const std::size_t k = intensity_bin(v, bins);
    const double c = std::clamp(v, 0.0, 1.0);
    ++tgt_count[k];
    tgt_lo[k] = std::min(tgt_lo[k], c);
    tgt_hi[k] = std::max(tgt_hi[k], c);
  }
  // cumulative counts; CDF comparisons are done on integers cross-multiplied
  // by the other image's pixel count so they are exact
  std::vector<std::uint64_t> src_cdf(bins), tgt_cdf(bins);
  std::partial_sum(src_count.begin(), src_count.end(), src_cdf.begin());
  std::partial_sum(tgt_count.begin(), tgt_count.end(), tgt_cdf.begin());
  const std::uint64_t n_src = src.size(), n_tgt = tgt.size();

  HistogramMapping map{std::vector<std::size_t>(bins), std::vector<double>(bins)};
  std::size_t j = 0;
  for (std::size_t k = 0; k < bins; ++k) {
    // CDFs are non-decreasing, so j only moves forward
    while (j + 1 < bins && tgt_cdf[j] * n_src < src_cdf[k] * n_tgt) ++j;
    map.target_bin[k] = j;
  }
  for (std::size_t k = 0; k < bins; ++k) {
    const std::size_t t = map.target_bin[k];
    map.value[k] = tgt_count[t] > 0 ? (tgt_lo[t] + tgt_hi[t]) / 2.0
                                    : (static_cast<double>(t) + 0.5) / static_cast<double>(bins);
  }
  return map;
}

Image histogram_match(const Image& src, const Image& tgt, std::size_t bins) {
  const HistogramMapping map = histogram_mapping(src, tgt, bins);
  Image out(src.rows(), src.cols());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = map.value[intensity_bin(src[i], bins)];
  return out;
}

}  // namespace mtuda
