#pragma once

// Independent reference implementations. Deliberately naive: scalar loops, no shared helpers
// with the library beyond plain containers.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

namespace oracle {

inline constexpr double kPi = 3.14159265358979323846;

/// Direct double-sum DCT-II, F[k,l] = sum_m sum_n I[m,n] cos(pi/M (m+1/2) k) cos(pi/N (n+1/2) l).
inline Eigen::MatrixXd dct2(const Eigen::MatrixXd& img) {
  const auto M = img.rows(), N = img.cols();
  Eigen::MatrixXd F(M, N);
  for (Eigen::Index k = 0; k < M; ++k)
    for (Eigen::Index l = 0; l < N; ++l) {
      double s = 0;
      for (Eigen::Index m = 0; m < M; ++m)
        for (Eigen::Index n = 0; n < N; ++n)
          s += img(m, n) * std::cos(kPi / M * (m + 0.5) * k) * std::cos(kPi / N * (n + 0.5) * l);
      F(k, l) = s;
    }
  return F;
}

inline double softmax_row(const std::vector<double>& logits, std::size_t j) {
  double mx = logits[0];
  for (double v : logits) mx = v > mx ? v : mx;
  double den = 0;
  for (double v : logits) den += std::exp(v - mx);
  return std::exp(logits[j] - mx) / den;
}

/// One head: weights (n x n) and output (n x dv) from scalar loops.
inline void attention(const Eigen::MatrixXd& q, const Eigen::MatrixXd& k, const Eigen::MatrixXd& v,
                      int dk, Eigen::MatrixXd& weights, Eigen::MatrixXd& out) {
  const auto n = q.rows();
  weights.resize(n, n);
  out = Eigen::MatrixXd::Zero(n, v.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    std::vector<double> logits(static_cast<std::size_t>(n));
    for (Eigen::Index j = 0; j < n; ++j) {
      double dot = 0;
      for (Eigen::Index c = 0; c < q.cols(); ++c) dot += q(i, c) * k(j, c);
      logits[static_cast<std::size_t>(j)] = dot / std::sqrt(static_cast<double>(dk));
    }
    for (Eigen::Index j = 0; j < n; ++j) weights(i, j) = softmax_row(logits, static_cast<std::size_t>(j));
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index c = 0; c < v.cols(); ++c) out(i, c) += weights(i, j) * v(j, c);
  }
}

inline Eigen::MatrixXd matmul(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(a.rows(), b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.cols(); ++j)
      for (Eigen::Index t = 0; t < a.cols(); ++t) c(i, j) += a(i, t) * b(t, j);
  return c;
}

/// Concat of per-head outputs times W^O, all by loops.
inline Eigen::MatrixXd multi_head(const Eigen::MatrixXd& e, const std::vector<Eigen::MatrixXd>& wq,
                                  const std::vector<Eigen::MatrixXd>& wk,
                                  const std::vector<Eigen::MatrixXd>& wv, const Eigen::MatrixXd& wo,
                                  int dk, std::vector<Eigen::MatrixXd>* weights = nullptr) {
  const auto heads = wq.size();
  const auto dv = wv[0].cols();
  Eigen::MatrixXd concat(e.rows(), static_cast<Eigen::Index>(heads) * dv);
  for (std::size_t h = 0; h < heads; ++h) {
    Eigen::MatrixXd w, o;
    attention(matmul(e, wq[h]), matmul(e, wk[h]), matmul(e, wv[h]), dk, w, o);
    concat.block(0, static_cast<Eigen::Index>(h) * dv, e.rows(), dv) = o;
    if (weights) weights->push_back(w);
  }
  return matmul(concat, wo);
}

struct Counts {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

inline Counts count(const std::vector<int>& pred, const std::vector<int>& label) {
  Counts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == 1 && label[i] == 1) ++c.tp;
    if (pred[i] == 1 && label[i] == 0) ++c.fp;
    if (pred[i] == 0 && label[i] == 0) ++c.tn;
    if (pred[i] == 0 && label[i] == 1) ++c.fn;
  }
  return c;
}

inline double f1(const Counts& c) {
  const double p = c.tp + c.fp ? double(c.tp) / double(c.tp + c.fp) : 0.0;
  const double r = c.tp + c.fn ? double(c.tp) / double(c.tp + c.fn) : 0.0;
  return p + r > 0 ? 2 * p * r / (p + r) : 0.0;
}

/// Closed-form Frechet distance of two 1-D samples from their sample moments.
inline double frechet_1d(const std::vector<double>& a, const std::vector<double>& b) {
  auto moments = [](const std::vector<double>& x, double& mean, double& var) {
    mean = 0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(x.size());
    var = 0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(x.size() - 1);
  };
  double ma, va, mb, vb;
  moments(a, ma, va);
  moments(b, mb, vb);
  return (ma - mb) * (ma - mb) + va + vb - 2 * std::sqrt(va * vb);
}

/// Sampled 2-D Gaussian G(x, y) = exp(-(x^2 + y^2) / (2 s^2)) / (2 pi s^2) on the truncated
/// square of radius ceil(3s), normalized to unit sum.
inline Eigen::MatrixXd gaussian_kernel_2d(double sigma) {
  const int r = static_cast<int>(std::ceil(3 * sigma));
  Eigen::MatrixXd k(2 * r + 1, 2 * r + 1);
  for (int y = -r; y <= r; ++y)
    for (int x = -r; x <= r; ++x)
      k(y + r, x + r) = std::exp(-(x * x + y * y) / (2 * sigma * sigma)) / (2 * kPi * sigma * sigma);
  return k / k.sum();
}

inline Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double lo = -1,
                                     double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

}  // namespace oracle
