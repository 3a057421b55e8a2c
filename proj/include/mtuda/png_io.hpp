#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "mtuda/grid.hpp"

namespace mtuda::png {

/// 16-bit grayscale; values in [0,1] are stored as round(v * 65535).
void write_gray16(const std::filesystem::path& path, const Image& image);
/// Accepts 8- or 16-bit grayscale and rescales to [0,1].
Image read_gray(const std::filesystem::path& path);

/// 8-bit palette PNG holding class ids.
void write_mask(const std::filesystem::path& path, const Mask& mask);
Mask read_mask(const std::filesystem::path& path);

using Rgb = std::array<std::uint8_t, 3>;
void write_rgb(const std::filesystem::path& path, const Grid<Rgb>& image);

}  // namespace mtuda::png
