#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <torch/torch.h>

namespace cnd::io {

/// Writes an 8-bit RGB PNG. `rgb` is row-major, 3 bytes per pixel.
void write_png_rgb(const std::filesystem::path& path, int width, int height,
                   std::span<const std::uint8_t> rgb);

/// Writes a 3×H×W float image in [0,1] (values are clamped) as PNG.
void write_png(const std::filesystem::path& path, const torch::Tensor& chw);

/// Maps scalars to RGB with a black-red-yellow-white ramp scaled by max(values).
/// Cells beyond `values.size()` in the width×height raster are left black.
[[nodiscard]] std::vector<std::uint8_t> heatmap_rgb(std::span<const double> values, int width, int height);

}  // namespace cnd::io
