#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <vector>

namespace crossfuse {

using Grid = Eigen::MatrixXd;

/// Row-major, channel-interleaved pixel raster with values nominally in [0,1].
class Image {
 public:
  Image() = default;
  Image(int rows, int cols, int channels = 1, double fill = 0.0);

  static Image from_grid(const Grid& g);

  int rows() const noexcept { return rows_; }
  int cols() const noexcept { return cols_; }
  int channels() const noexcept { return channels_; }
  bool empty() const noexcept { return pixels_.empty(); }
  std::size_t size() const noexcept { return pixels_.size(); }

  double& at(int r, int c, int ch = 0) { return pixels_[index(r, c, ch)]; }
  double at(int r, int c, int ch = 0) const { return pixels_[index(r, c, ch)]; }

  std::vector<double>& data() noexcept { return pixels_; }
  const std::vector<double>& data() const noexcept { return pixels_; }

  Grid plane(int ch) const;
  void set_plane(int ch, const Grid& g);

  /// Luma conversion (ITU-R 601 weights); single-channel images are returned as-is.
  Grid gray() const;

  /// Replicates a single channel into three.
  Image to_rgb() const;

  void clamp01();
  bool in_unit_range() const;

  bool operator==(const Image& o) const = default;

 private:
  std::size_t index(int r, int c, int ch) const {
    return (static_cast<std::size_t>(r) * cols_ + c) * channels_ + ch;
  }

  int rows_ = 0;
  int cols_ = 0;
  int channels_ = 0;
  std::vector<double> pixels_;
};

/// Adjoint of Image::gray(): spreads a gray-level gradient back over channels.
Image gray_adjoint(const Grid& grad, int channels);

/// Bilinear resampling with half-pixel centers; identity when sizes match.
Grid resize_bilinear(const Grid& src, int rows, int cols);

/// Sampled Gaussian G(x) truncated at radius ceil(3 sigma) and renormalized to unit sum.
std::vector<double> gaussian_kernel_1d(double sigma);

/// Separable Gaussian blur with reflect-101 borders; sigma == 0 is the identity.
Grid gaussian_blur(const Grid& g, double sigma);

/// Rounds every pixel to the nearest k/255 level.
void quantize_8bit(Image& img);

void write_png(const Image& img, const std::filesystem::path& path);
Image read_png(const std::filesystem::path& path);

/// Lossy JPEG encode/decode round trip at the given quality (1..100).
Image jpeg_roundtrip(const Image& img, int quality);

}  // namespace crossfuse
