#include "cnd/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include <png.h>

#include "cnd/errors.hpp"

namespace cnd::io {

void write_png_rgb(const std::filesystem::path& path, int width, int height,
                   std::span<const std::uint8_t> rgb) {
  if (width <= 0 || height <= 0 || rgb.size() != static_cast<std::size_t>(width) * height * 3) {
    throw ShapeError("write_png_rgb: buffer does not match " + std::to_string(width) + "x" +
                     std::to_string(height));
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::unique_ptr<FILE, int (*)(FILE*)> file(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!file) throw FormatError("cannot write " + path.string());

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr) {
    png_destroy_write_struct(&png, &info);
    throw FormatError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw FormatError("libpng error while writing " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, width, height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(rgb.data() + static_cast<std::size_t>(y) * width * 3));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

void write_png(const std::filesystem::path& path, const torch::Tensor& chw) {
  if (chw.dim() != 3 || chw.size(0) != 3) throw ShapeError("write_png expects a 3xHxW tensor");
  const auto hwc = (chw.detach().to(torch::kFloat32).clamp(0.0, 1.0) * 255.0)
                       .round()
                       .to(torch::kUInt8)
                       .permute({1, 2, 0})
                       .contiguous();
  const auto* data = hwc.data_ptr<std::uint8_t>();
  write_png_rgb(path, static_cast<int>(chw.size(2)), static_cast<int>(chw.size(1)),
                std::span<const std::uint8_t>(data, static_cast<std::size_t>(hwc.numel())));
}

std::vector<std::uint8_t> heatmap_rgb(std::span<const double> values, int width, int height) {
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(width) * height * 3, 0);
  double peak = 0.0;
  for (double v : values) peak = std::max(peak, std::abs(v));
  const std::size_t cells = std::min(values.size(), static_cast<std::size_t>(width) * height);
  for (std::size_t i = 0; i < cells; ++i) {
    const double x = peak > 0.0 ? std::clamp(std::abs(values[i]) / peak, 0.0, 1.0) : 0.0;
    // black -> red -> yellow -> white
    const double r = std::clamp(3.0 * x, 0.0, 1.0);
    const double g = std::clamp(3.0 * x - 1.0, 0.0, 1.0);
    const double b = std::clamp(3.0 * x - 2.0, 0.0, 1.0);
    rgb[3 * i + 0] = static_cast<std::uint8_t>(std::lround(255.0 * r));
    rgb[3 * i + 1] = static_cast<std::uint8_t>(std::lround(255.0 * g));
    rgb[3 * i + 2] = static_cast<std::uint8_t>(std::lround(255.0 * b));
  }
  return rgb;
}

}  // namespace cnd::io
