#include "helpers.hpp"
#include "oracles.hpp"

#include "crossfuse/error.hpp"

#include <doctest.h>

using namespace crossfuse;

TEST_CASE("gaussian kernel is truncated at ceil(3 sigma) and sums to one") {
  for (double sigma : {0.5, 1.0, 1.5, 2.2}) {
    const auto k = gaussian_kernel_1d(sigma);
    CHECK(k.size() == static_cast<std::size_t>(2 * std::ceil(3 * sigma) + 1));
    double s = 0;
    for (double v : k) s += v;
    CHECK(s == doctest::Approx(1.0).epsilon(1e-15));
  }
  CHECK(gaussian_kernel_1d(0) == std::vector<double>{1.0});
  CHECK_THROWS_AS(gaussian_kernel_1d(-1), ConfigError);
}

TEST_CASE("blurring an impulse reproduces the sampled 2-D Gaussian") {
  for (double sigma : {0.5, 1.0, 1.5}) {
    Grid g = Grid::Zero(21, 21);
    g(10, 10) = 1;
    const Grid out = gaussian_blur(g, sigma);
    const Eigen::MatrixXd k = oracle::gaussian_kernel_2d(sigma);
    const auto r = (k.rows() - 1) / 2;
    CHECK((out.block(10 - r, 10 - r, k.rows(), k.cols()) - k).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(out.sum() == doctest::Approx(1.0));
  }
}

TEST_CASE("zero blur is the identity") {
  std::mt19937_64 rng(3);
  const Grid g = oracle::random_matrix(9, 7, rng, 0, 1);
  CHECK(gaussian_blur(g, 0) == g);
}

TEST_CASE("bilinear resize keeps same-size input and constants") {
  std::mt19937_64 rng(4);
  const Grid g = oracle::random_matrix(8, 8, rng, 0, 1);
  CHECK(resize_bilinear(g, 8, 8) == g);
  const Grid c = Grid::Constant(10, 6, 0.3);
  CHECK((resize_bilinear(c, 17, 5).array() - 0.3).abs().maxCoeff() < 1e-15);
}

TEST_CASE("gray conversion and its adjoint") {
  Image rgb(2, 2, 3);
  rgb.at(0, 0, 0) = 1;
  rgb.at(1, 1, 2) = 1;
  const Grid g = rgb.gray();
  CHECK(g(0, 0) == doctest::Approx(0.299));
  CHECK(g(1, 1) == doctest::Approx(0.114));
  std::mt19937_64 rng(5);
  const Grid w = oracle::random_matrix(2, 2, rng);
  const Image adj = gray_adjoint(w, 3);
  double lhs = (g.array() * w.array()).sum(), rhs = 0;
  for (std::size_t i = 0; i < rgb.size(); ++i) rhs += rgb.data()[i] * adj.data()[i];
  CHECK(lhs == doctest::Approx(rhs));
}

TEST_CASE("8-bit images survive a PNG round trip exactly") {
  const auto dir = testing_support::temp_dir("png");
  std::mt19937_64 rng(6);
  for (int ch : {1, 3}) {
    Image img(12, 9, ch);
    std::uniform_int_distribution<int> u(0, 255);
    for (auto& v : img.data()) v = u(rng) / 255.0;
    write_png(img, dir / "a.png");
    CHECK(read_png(dir / "a.png") == img);
  }
  CHECK_THROWS_AS(read_png(dir / "missing.png"), DataError);
}

TEST_CASE("jpeg round trip is lossy but close, and validates quality") {
  std::mt19937_64 rng(7);
  Image img = Image::from_grid(gaussian_blur(oracle::random_matrix(32, 32, rng, 0, 1), 1.5));
  quantize_8bit(img);
  const Image q90 = jpeg_roundtrip(img, 90), q30 = jpeg_roundtrip(img, 30);
  auto err = [&](const Image& o) {
    double e = 0;
    for (std::size_t i = 0; i < img.size(); ++i) e = std::max(e, std::abs(o.data()[i] - img.data()[i]));
    return e;
  };
  CHECK(err(q90) < 0.05);
  CHECK(err(q30) >= err(q90));
  CHECK(q90.rows() == 32);
  CHECK_THROWS_AS(jpeg_roundtrip(img, 0), ConfigError);
  CHECK_THROWS_AS(jpeg_roundtrip(img, 101), ConfigError);
}
