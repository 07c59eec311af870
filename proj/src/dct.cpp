#include "crossfuse/dct.hpp"

#include "crossfuse/error.hpp"

#include <cmath>
#include <map>
#include <numbers>
#include <string>

namespace crossfuse {

namespace {

const Grid& cached_basis(int size) {
  thread_local std::map<int, Grid> cache;
  auto it = cache.find(size);
  if (it == cache.end()) {
    Grid c(size, size);
    for (int m = 0; m < size; ++m)
      for (int k = 0; k < size; ++k)
        c(m, k) = std::cos(std::numbers::pi / size * (m + 0.5) * k);
    it = cache.emplace(size, std::move(c)).first;
  }
  return it->second;
}

void check_nonempty(const Grid& g, const char* what) {
  if (g.rows() < 1 || g.cols() < 1) throw ShapeError(std::string(what) + ": empty input");
}

}  // namespace

Grid dct_basis(int size) {
  if (size < 1) throw ShapeError("dct_basis: size must be >= 1");
  return cached_basis(size);
}

Grid dct2(const Grid& image) {
  check_nonempty(image, "dct2");
  if (!image.allFinite()) throw DataError("dct2: non-finite pixel");
  const Grid& cm = cached_basis(static_cast<int>(image.rows()));
  const Grid& cn = cached_basis(static_cast<int>(image.cols()));
  return cm.transpose() * image * cn;
}

Grid idct2(const Grid& coeffs) {
  check_nonempty(coeffs, "idct2");
  const int m = static_cast<int>(coeffs.rows());
  const int n = static_cast<int>(coeffs.cols());
  Eigen::VectorXd wm = Eigen::VectorXd::Constant(m, 2.0 / m);
  Eigen::VectorXd wn = Eigen::VectorXd::Constant(n, 2.0 / n);
  wm(0) = 1.0 / m;
  wn(0) = 1.0 / n;
  const Grid& cm = cached_basis(m);
  const Grid& cn = cached_basis(n);
  return cm * wm.asDiagonal() * coeffs * wn.asDiagonal() * cn.transpose();
}

Grid dct2_adjoint(const Grid& grad) {
  check_nonempty(grad, "dct2_adjoint");
  const Grid& cm = cached_basis(static_cast<int>(grad.rows()));
  const Grid& cn = cached_basis(static_cast<int>(grad.cols()));
  return cm * grad * cn.transpose();
}

Grid dct2_orthonormal(const Grid& image) {
  Grid f = dct2(image);
  const int m = static_cast<int>(f.rows());
  const int n = static_cast<int>(f.cols());
  Eigen::VectorXd sm = Eigen::VectorXd::Constant(m, std::sqrt(2.0 / m));
  Eigen::VectorXd sn = Eigen::VectorXd::Constant(n, std::sqrt(2.0 / n));
  sm(0) = std::sqrt(1.0 / m);
  sn(0) = std::sqrt(1.0 / n);
  return sm.asDiagonal() * f * sn.asDiagonal();
}

Grid log_abs_features(const Grid& coeffs, double eps) {
  if (!(eps > 0)) throw ConfigError("log_abs_features: eps must be > 0");
  return (coeffs.array().abs() + eps).log().matrix();
}

Eigen::VectorXd flatten(const Grid& g) {
  Eigen::VectorXd v(g.size());
  for (Eigen::Index r = 0; r < g.rows(); ++r)
    for (Eigen::Index c = 0; c < g.cols(); ++c) v(r * g.cols() + c) = g(r, c);
  return v;
}

Grid unflatten(const Eigen::VectorXd& v, int rows, int cols) {
  if (v.size() != static_cast<Eigen::Index>(rows) * cols) throw ShapeError("unflatten: size mismatch");
  Grid g(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) g(r, c) = v(static_cast<Eigen::Index>(r) * cols + c);
  return g;
}

Eigen::VectorXd FreqNormalizer::apply(const Eigen::VectorXd& features) const {
  if (features.size() != mean.size())
    throw ShapeError("frequency features: expected " + std::to_string(mean.size()) +
                     " coefficients, got " + std::to_string(features.size()));
  return ((features - mean).array() / stddev.array()).matrix();
}

FreqNormalizer fit_freq_normalizer_features(std::span<const Eigen::VectorXd> features, int rows,
                                            int cols) {
  if (features.size() < 2) throw DataError("fit_freq_normalizer: need at least 2 training images");
  const Eigen::Index dim = static_cast<Eigen::Index>(rows) * cols;
  FreqNormalizer norm{rows, cols, Eigen::VectorXd::Zero(dim), Eigen::VectorXd::Zero(dim)};
  for (const auto& f : features) {
    if (f.size() != dim) throw ShapeError("fit_freq_normalizer: mixed image sizes");
    norm.mean += f;
  }
  norm.mean /= static_cast<double>(features.size());
  for (const auto& f : features) norm.stddev += (f - norm.mean).array().square().matrix();
  norm.stddev = (norm.stddev / static_cast<double>(features.size())).array().sqrt().max(
      FreqNormalizer::kMinStd);
  return norm;
}

FreqNormalizer fit_freq_normalizer(std::span<const Grid> images, double eps) {
  if (images.size() < 2) throw DataError("fit_freq_normalizer: need at least 2 training images");
  std::vector<Eigen::VectorXd> feats;
  feats.reserve(images.size());
  for (const auto& img : images) feats.push_back(freq_features(img, eps));
  return fit_freq_normalizer_features(feats, static_cast<int>(images.front().rows()),
                                      static_cast<int>(images.front().cols()));
}

Eigen::VectorXd freq_features(const Grid& gray, double eps) {
  return flatten(log_abs_features(dct2(gray), eps));
}

Grid freq_features_backward(const Grid& gray, const Eigen::VectorXd& grad_features, double eps) {
  const Grid f = dct2(gray);
  const Grid g = unflatten(grad_features, static_cast<int>(f.rows()), static_cast<int>(f.cols()));
  // d log(|F| + eps) / dF = sign(F) / (|F| + eps)
  const Grid dF = (g.array() * f.array().sign() / (f.array().abs() + eps)).matrix();
  return dct2_adjoint(dF);
}

Eigen::VectorXd freq_embed(const Grid& gray, const FreqFeatureParams& params) {
  const auto& norm = params.normalizer;
  if (gray.rows() != norm.rows || gray.cols() != norm.cols)
    throw ShapeError("freq_embed: expected " + std::to_string(norm.rows) + "x" +
                     std::to_string(norm.cols) + " image, got " + std::to_string(gray.rows()) +
                     "x" + std::to_string(gray.cols()));
  if (params.projection.cols() != norm.mean.size())
    throw ShapeError("freq_embed: projection width does not match feature count");
  return params.projection * norm.apply(freq_features(gray, params.eps));
}

}  // namespace crossfuse
