#include "crossfuse/image.hpp"

#include "crossfuse/error.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <jpeglib.h>
#include <setjmp.h>
#include <string>

namespace crossfuse {

Image::Image(int rows, int cols, int channels, double fill)
    : rows_(rows), cols_(cols), channels_(channels) {
  if (rows < 0 || cols < 0 || channels < 1) throw ShapeError("invalid image dimensions");
  pixels_.assign(static_cast<std::size_t>(rows) * cols * channels, fill);
}

Image Image::from_grid(const Grid& g) {
  Image img(static_cast<int>(g.rows()), static_cast<int>(g.cols()), 1);
  img.set_plane(0, g);
  return img;
}

Grid Image::plane(int ch) const {
  Grid g(rows_, cols_);
  for (int r = 0; r < rows_; ++r)
    for (int c = 0; c < cols_; ++c) g(r, c) = at(r, c, ch);
  return g;
}

void Image::set_plane(int ch, const Grid& g) {
  if (g.rows() != rows_ || g.cols() != cols_) throw ShapeError("plane size mismatch");
  for (int r = 0; r < rows_; ++r)
    for (int c = 0; c < cols_; ++c) at(r, c, ch) = g(r, c);
}

namespace {
constexpr double kLuma[3] = {0.299, 0.587, 0.114};
}

Grid Image::gray() const {
  if (channels_ == 1) return plane(0);
  if (channels_ != 3) throw ShapeError("gray conversion needs 1 or 3 channels");
  Grid g(rows_, cols_);
  for (int r = 0; r < rows_; ++r)
    for (int c = 0; c < cols_; ++c)
      g(r, c) = kLuma[0] * at(r, c, 0) + kLuma[1] * at(r, c, 1) + kLuma[2] * at(r, c, 2);
  return g;
}

Image gray_adjoint(const Grid& grad, int channels) {
  Image out(static_cast<int>(grad.rows()), static_cast<int>(grad.cols()), channels);
  if (channels == 1) {
    out.set_plane(0, grad);
    return out;
  }
  if (channels != 3) throw ShapeError("gray adjoint needs 1 or 3 channels");
  for (int ch = 0; ch < 3; ++ch) out.set_plane(ch, grad * kLuma[ch]);
  return out;
}

Image Image::to_rgb() const {
  if (channels_ == 3) return *this;
  Image out(rows_, cols_, 3);
  for (int r = 0; r < rows_; ++r)
    for (int c = 0; c < cols_; ++c)
      for (int ch = 0; ch < 3; ++ch) out.at(r, c, ch) = at(r, c, 0);
  return out;
}

void Image::clamp01() {
  for (double& v : pixels_) v = std::clamp(v, 0.0, 1.0);
}

bool Image::in_unit_range() const {
  return std::all_of(pixels_.begin(), pixels_.end(),
                     [](double v) { return v >= 0.0 && v <= 1.0; });
}

Grid resize_bilinear(const Grid& src, int rows, int cols) {
  if (src.size() == 0 || rows < 1 || cols < 1) throw ShapeError("resize of empty image");
  if (src.rows() == rows && src.cols() == cols) return src;
  const double sy = static_cast<double>(src.rows()) / rows;
  const double sx = static_cast<double>(src.cols()) / cols;
  const int maxr = static_cast<int>(src.rows()) - 1;
  const int maxc = static_cast<int>(src.cols()) - 1;
  Grid out(rows, cols);
  for (int r = 0; r < rows; ++r) {
    const double y = std::clamp((r + 0.5) * sy - 0.5, 0.0, static_cast<double>(maxr));
    const int y0 = static_cast<int>(std::floor(y));
    const int y1 = std::min(y0 + 1, maxr);
    const double wy = y - y0;
    for (int c = 0; c < cols; ++c) {
      const double x = std::clamp((c + 0.5) * sx - 0.5, 0.0, static_cast<double>(maxc));
      const int x0 = static_cast<int>(std::floor(x));
      const int x1 = std::min(x0 + 1, maxc);
      const double wx = x - x0;
      out(r, c) = (1 - wy) * ((1 - wx) * src(y0, x0) + wx * src(y0, x1)) +
                  wy * ((1 - wx) * src(y1, x0) + wx * src(y1, x1));
    }
  }
  return out;
}

namespace {

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

std::vector<std::uint8_t> to_bytes(const Image& img) {
  std::vector<std::uint8_t> bytes(img.size());
  std::transform(img.data().begin(), img.data().end(), bytes.begin(), to_byte);
  return bytes;
}

Image from_bytes(const std::uint8_t* bytes, int rows, int cols, int channels) {
  Image img(rows, cols, channels);
  for (std::size_t i = 0; i < img.size(); ++i) img.data()[i] = bytes[i] / 255.0;
  return img;
}

}  // namespace

void quantize_8bit(Image& img) {
  for (double& v : img.data()) v = to_byte(v) / 255.0;
}

void write_png(const Image& img, const std::filesystem::path& path) {
  if (img.channels() != 1 && img.channels() != 3) throw ShapeError("png needs 1 or 3 channels");
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(img.cols());
  png.height = static_cast<png_uint_32>(img.rows());
  png.format = img.channels() == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  const auto bytes = to_bytes(img);
  if (!png_image_write_to_file(&png, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    std::string msg = png.message;
    png_image_free(&png);
    throw std::runtime_error("cannot write " + path.string() + ": " + msg);
  }
}

Image read_png(const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str()))
    throw DataError("cannot read " + path.string() + ": " + png.message);
  const bool color = (png.format & PNG_FORMAT_FLAG_COLOR) != 0;
  png.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, bytes.data(), 0, nullptr)) {
    std::string msg = png.message;
    png_image_free(&png);
    throw DataError("cannot decode " + path.string() + ": " + msg);
  }
  return from_bytes(bytes.data(), static_cast<int>(png.height), static_cast<int>(png.width),
                    color ? 3 : 1);
}

namespace {

struct JpegErrorManager {
  jpeg_error_mgr base;
  jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  longjmp(err->jump, 1);
}

// Only C objects live in these frames, so longjmp cannot skip a destructor.
bool jpeg_encode(const std::uint8_t* pixels, int rows, int cols, int channels, int quality,
                 unsigned char** buffer, unsigned long* size) {
  jpeg_compress_struct cinfo{};
  JpegErrorManager jerr{};
  cinfo.err = jpeg_std_error(&jerr.base);
  jerr.base.error_exit = jpeg_error_exit;
  if (setjmp(jerr.jump)) {
    jpeg_destroy_compress(&cinfo);
    return false;
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, buffer, size);
  cinfo.image_width = static_cast<JDIMENSION>(cols);
  cinfo.image_height = static_cast<JDIMENSION>(rows);
  cinfo.input_components = channels;
  cinfo.in_color_space = channels == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  const std::size_t stride = static_cast<std::size_t>(cols) * static_cast<std::size_t>(channels);
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW row = const_cast<JSAMPROW>(pixels + cinfo.next_scanline * stride);
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
  return true;
}

bool jpeg_decode(const unsigned char* buffer, unsigned long size, int rows, int cols, int channels,
                 std::uint8_t* out) {
  jpeg_decompress_struct dinfo{};
  JpegErrorManager jerr{};
  dinfo.err = jpeg_std_error(&jerr.base);
  jerr.base.error_exit = jpeg_error_exit;
  if (setjmp(jerr.jump)) {
    jpeg_destroy_decompress(&dinfo);
    return false;
  }
  jpeg_create_decompress(&dinfo);
  jpeg_mem_src(&dinfo, buffer, size);
  jpeg_read_header(&dinfo, TRUE);
  dinfo.out_color_space = channels == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_start_decompress(&dinfo);
  if (dinfo.output_width != static_cast<JDIMENSION>(cols) || dinfo.output_height != static_cast<JDIMENSION>(rows)) {
    jpeg_destroy_decompress(&dinfo);
    return false;
  }
  const std::size_t stride = static_cast<std::size_t>(cols) * static_cast<std::size_t>(channels);
  while (dinfo.output_scanline < dinfo.output_height) {
    JSAMPROW row = out + dinfo.output_scanline * stride;
    jpeg_read_scanlines(&dinfo, &row, 1);
  }
  jpeg_finish_decompress(&dinfo);
  jpeg_destroy_decompress(&dinfo);
  return true;
}

}  // namespace

Image jpeg_roundtrip(const Image& img, int quality) {
  if (quality < 1 || quality > 100) throw ConfigError("jpeg quality must be in 1..100");
  if (img.channels() != 1 && img.channels() != 3) throw ShapeError("jpeg needs 1 or 3 channels");
  const auto bytes = to_bytes(img);
  unsigned char* buffer = nullptr;
  unsigned long buffer_size = 0;
  if (!jpeg_encode(bytes.data(), img.rows(), img.cols(), img.channels(), quality, &buffer, &buffer_size)) {
    std::free(buffer);
    throw DataError("jpeg encode failed");
  }
  std::vector<std::uint8_t> decoded(bytes.size());
  const bool ok = jpeg_decode(buffer, buffer_size, img.rows(), img.cols(), img.channels(), decoded.data());
  std::free(buffer);
  if (!ok) throw DataError("jpeg decode failed");
  return from_bytes(decoded.data(), img.rows(), img.cols(), img.channels());
}

std::vector<double> gaussian_kernel_1d(double sigma) {
  if (sigma < 0) throw ConfigError("gaussian sigma must be >= 0");
  if (sigma == 0) return {1.0};
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-(i * i) / (2 * sigma * sigma));
    sum += k[i + radius];
  }
  for (double& v : k) v /= sum;
  return k;
}

namespace {

int reflect101(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

}  // namespace

Grid gaussian_blur(const Grid& g, double sigma) {
  const auto k = gaussian_kernel_1d(sigma);
  if (k.size() == 1) return g;
  const int radius = static_cast<int>(k.size() / 2);
  const int rows = static_cast<int>(g.rows());
  const int cols = static_cast<int>(g.cols());
  Grid tmp(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * g(r, reflect101(c + i, cols));
      tmp(r, c) = acc;
    }
  Grid out(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp(reflect101(r + i, rows), c);
      out(r, c) = acc;
    }
  return out;
}

}  // namespace crossfuse
