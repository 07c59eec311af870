#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

namespace crossfuse {

/// A trainable tensor and its accumulated gradient.
struct Param {
  Eigen::MatrixXd value;
  Eigen::MatrixXd grad;

  Param() = default;
  explicit Param(Eigen::MatrixXd v) : value(std::move(v)), grad(Eigen::MatrixXd::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

struct NamedParam {
  std::string name;
  Param* param;
};

/// Uniform(-bound, bound) with bound = sqrt(gain / fan_in).
Eigen::MatrixXd scaled_uniform(Eigen::Index rows, Eigen::Index cols, double fan_in, double gain,
                               std::uint64_t seed);

/// Little-endian binary stream helpers for checkpoints.
class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& out) : out_(out) {}
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void str(const std::string& s);
  void matrix(const Eigen::MatrixXd& m);

 private:
  std::ostream& out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(std::istream& in) : in_(in) {}
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::string str();
  Eigen::MatrixXd matrix();

 private:
  void read(void* dst, std::size_t n);
  std::istream& in_;
};

}  // namespace crossfuse
