#pragma once

#include <cstddef>
#include <vector>

#include "mtuda/grid.hpp"

namespace mtuda {

/// Amplitude and phase of a centered 2D DFT: the zero-frequency term sits at
/// cell (H/2, W/2), the numpy `fftshift` convention.
struct SpectralDecomposition {
  Image amplitude;
  Image phase;  ///< in (-pi, pi]
};

struct FrequencyMask {
  Mask mask;
  double beta = 0.0;
};

SpectralDecomposition fft_decompose(const Image& image);

/// Real part of the inverse transform of amplitude * exp(i * phase), without clamping.
Image fft_compose_raw(const SpectralDecomposition& spec);
/// As above, clamped to [0,1].
Image fft_compose(const SpectralDecomposition& spec);

/// Ones on the centered rectangle |u - H/2| <= floor(beta*H/2), |v - W/2| <= floor(beta*W/2).
FrequencyMask build_lowfreq_mask(std::size_t h, std::size_t w, double beta);

/// Source amplitude with its low-frequency block replaced by the target's;
/// the source phase is carried over untouched.
SpectralDecomposition style_transfer_spectrum(const Image& src, const Image& tgt, double beta);
Image fft_style_transfer(const Image& src, const Image& tgt, double beta);

/// Per-bin lookup used by `histogram_match`: `target_bin[k]` is the smallest
/// target bin whose CDF reaches the source CDF at bin k, `value[k]` the
/// intensity written for source bin k.
struct HistogramMapping {
  std::vector<std::size_t> target_bin;
  std::vector<double> value;
};

std::size_t intensity_bin(double v, std::size_t bins);
HistogramMapping histogram_mapping(const Image& src, const Image& tgt, std::size_t bins = 256);
Image histogram_match(const Image& src, const Image& tgt, std::size_t bins = 256);

enum class StyleMethod { fft, histogram };

}  // namespace mtuda
