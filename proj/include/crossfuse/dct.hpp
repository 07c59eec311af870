#pragma once

#include "crossfuse/image.hpp"

#include <Eigen/Dense>

#include <span>

namespace crossfuse {

inline constexpr double kLogEps = 1e-12;

/// Cosine basis C(m, k) = cos(pi/M (m + 1/2) k), indexed [m, k].
Grid dct_basis(int size);

/// Unnormalized 2-D DCT-II: F[k,l] = sum_m sum_n I[m,n] C_M(m,k) C_N(n,l).
/// Computed separably as C_M^T I C_N.
Grid dct2(const Grid& image);

/// Exact inverse of dct2().
Grid idct2(const Grid& coeffs);

/// Adjoint of dct2() as a linear map, used to pull gradients back to pixels.
Grid dct2_adjoint(const Grid& grad);

/// Orthonormally scaled coefficients: s_k s_l F[k,l] with s_0 = sqrt(1/M), s_k = sqrt(2/M).
Grid dct2_orthonormal(const Grid& image);

/// Elementwise log(|F| + eps).
Grid log_abs_features(const Grid& coeffs, double eps = kLogEps);

/// Row-major flattening, the layout every frequency feature vector uses.
Eigen::VectorXd flatten(const Grid& g);
Grid unflatten(const Eigen::VectorXd& v, int rows, int cols);

/// Per-coefficient standardization statistics for log-DCT features.
struct FreqNormalizer {
  int rows = 0;
  int cols = 0;
  Eigen::VectorXd mean;    // row-major, rows*cols
  Eigen::VectorXd stddev;  // population std, floored at kMinStd

  static constexpr double kMinStd = 1e-6;

  Eigen::VectorXd apply(const Eigen::VectorXd& features) const;
  bool operator==(const FreqNormalizer&) const = default;
};

/// Fits mean/std of log_abs_features(dct2(image)) per coefficient. Needs >= 2 images.
FreqNormalizer fit_freq_normalizer(std::span<const Grid> images, double eps = kLogEps);
FreqNormalizer fit_freq_normalizer_features(std::span<const Eigen::VectorXd> features, int rows,
                                            int cols);

/// Raw (unnormalized) log-DCT feature vector of a gray image.
Eigen::VectorXd freq_features(const Grid& gray, double eps = kLogEps);

/// Gradient of the loss with respect to the gray image, given the gradient with respect to the
/// raw feature vector returned by freq_features().
Grid freq_features_backward(const Grid& gray, const Eigen::VectorXd& grad_features,
                            double eps = kLogEps);

/// Frequency modality parameters: normalizer plus the linear map to the embedding width.
struct FreqFeatureParams {
  FreqNormalizer normalizer;
  Eigen::MatrixXd projection;  // d_e x (rows*cols)
  double eps = kLogEps;

  int embed_dim() const { return static_cast<int>(projection.rows()); }
};

/// e_F = P * ((log|dct2(x)| + eps) - mean) / std.
Eigen::VectorXd freq_embed(const Grid& gray, const FreqFeatureParams& params);

}  // namespace crossfuse
