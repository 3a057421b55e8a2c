#include "mtuda/png_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>
#include <string>

namespace mtuda::png {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const noexcept {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void fail(const std::filesystem::path& path, const std::string& what) {
  throw Error(ErrorKind::format, path.string() + ": " + what);
}

void on_png_error(png_structp png, png_const_charp msg) {
  auto* text = static_cast<std::string*>(png_get_error_ptr(png));
  if (text) *text = msg;
  png_longjmp(png, 1);
}

void on_png_warning(png_structp, png_const_charp) {}

struct Decoded {
  std::size_t rows = 0;
  std::size_t cols = 0;
  int bit_depth = 0;
  int color_type = 0;
  std::vector<std::uint8_t> bytes;  // packed rows as stored
};

Decoded decode(const std::filesystem::path& path) {
  FilePtr file(std::fopen(path.string().c_str(), "rb"));
  if (!file) fail(path, "cannot open");
  png_byte sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) fail(path, "not a PNG file");

  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, on_png_error, on_png_warning);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(path, "libpng init failed");
  }
  Decoded out;
  std::vector<png_bytep> rows;
  // libpng reports errors by longjmp; nothing with a destructor may be
  // created between setjmp and the end of decoding except `out` and `rows`.
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(path, "corrupt PNG (" + err + ")");
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  out.cols = png_get_image_width(png, info);
  out.rows = png_get_image_height(png, info);
  out.bit_depth = png_get_bit_depth(png, info);
  out.color_type = png_get_color_type(png, info);
  if (out.bit_depth < 8) png_set_packing(png);
  png_read_update_info(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  out.bytes.resize(stride * out.rows);
  rows.resize(out.rows);
  for (std::size_t r = 0; r < out.rows; ++r) rows[r] = out.bytes.data() + r * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  if (out.bit_depth < 8) out.bit_depth = 8;
  return out;
}

void encode(const std::filesystem::path& path, std::size_t rows, std::size_t cols, int bit_depth,
            int color_type, const std::vector<std::uint8_t>& bytes, const std::vector<png_color>* palette) {
  FilePtr file(std::fopen(path.string().c_str(), "wb"));
  if (!file) fail(path, "cannot open for writing");
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, on_png_error, on_png_warning);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    fail(path, "libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail(path, "write failed (" + err + ")");
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(cols), static_cast<png_uint_32>(rows), bit_depth, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  if (palette) png_set_PLTE(png, info, palette->data(), static_cast<int>(palette->size()));
  png_write_info(png, info);
  const std::size_t stride = bytes.size() / rows;
  for (std::size_t r = 0; r < rows; ++r)
    png_write_row(png, const_cast<png_bytep>(bytes.data() + r * stride));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

void write_gray16(const std::filesystem::path& path, const Image& image) {
  std::vector<std::uint8_t> bytes(image.size() * 2);
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double v = std::clamp(image[i], 0.0, 1.0);
    const auto q = static_cast<std::uint16_t>(v * 65535.0 + 0.5);
    bytes[2 * i] = static_cast<std::uint8_t>(q >> 8);  // PNG is big-endian
    bytes[2 * i + 1] = static_cast<std::uint8_t>(q & 0xff);
  }
  encode(path, image.rows(), image.cols(), 16, PNG_COLOR_TYPE_GRAY, bytes, nullptr);
}

Image read_gray(const std::filesystem::path& path) {
  const Decoded d = decode(path);
  if (d.color_type != PNG_COLOR_TYPE_GRAY) fail(path, "expected a grayscale PNG");
  Image out(d.rows, d.cols);
  if (d.bit_depth == 16) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      const unsigned q = (unsigned{d.bytes[2 * i]} << 8) | d.bytes[2 * i + 1];
      out[i] = static_cast<double>(q) / 65535.0;
    }
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(d.bytes[i]) / 255.0;
  }
  return out;
}

void write_mask(const std::filesystem::path& path, const Mask& mask) {
  // background black, class 1 red, class 2 green, class 3 blue, rest gray
  std::vector<png_color> palette(256, png_color{128, 128, 128});
  palette[0] = {0, 0, 0};
  palette[1] = {255, 0, 0};
  palette[2] = {0, 255, 0};
  palette[3] = {0, 0, 255};
  encode(path, mask.rows(), mask.cols(), 8, PNG_COLOR_TYPE_PALETTE, mask.storage(), &palette);
}

Mask read_mask(const std::filesystem::path& path) {
  Decoded d = decode(path);
  if (d.bit_depth != 8 || (d.color_type != PNG_COLOR_TYPE_PALETTE && d.color_type != PNG_COLOR_TYPE_GRAY))
    fail(path, "expected an 8-bit indexed or grayscale mask");
  return Mask(d.rows, d.cols, std::move(d.bytes));
}

void write_rgb(const std::filesystem::path& path, const Grid<Rgb>& image) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(image.size() * 3);
  for (const auto& px : image.values()) bytes.insert(bytes.end(), px.begin(), px.end());
  encode(path, image.rows(), image.cols(), 8, PNG_COLOR_TYPE_RGB, bytes, nullptr);
}

}  // namespace mtuda::png
