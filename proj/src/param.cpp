#include "crossfuse/param.hpp"

#include "crossfuse/error.hpp"
#include "crossfuse/rng.hpp"

#include <cmath>

namespace crossfuse {

Eigen::MatrixXd scaled_uniform(Eigen::Index rows, Eigen::Index cols, double fan_in, double gain,
                               std::uint64_t seed) {
  const double bound = std::sqrt(gain / fan_in);
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-bound, bound);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = u(rng);
  return m;
}

void BinaryWriter::u32(std::uint32_t v) { out_.write(reinterpret_cast<const char*>(&v), sizeof v); }
void BinaryWriter::u64(std::uint64_t v) { out_.write(reinterpret_cast<const char*>(&v), sizeof v); }
void BinaryWriter::f64(double v) { out_.write(reinterpret_cast<const char*>(&v), sizeof v); }

void BinaryWriter::str(const std::string& s) {
  u64(s.size());
  out_.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void BinaryWriter::matrix(const Eigen::MatrixXd& m) {
  u64(static_cast<std::uint64_t>(m.rows()));
  u64(static_cast<std::uint64_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) f64(m(r, c));
}

void BinaryReader::read(void* dst, std::size_t n) {
  in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in_.gcount()) != n) throw VersionError("truncated checkpoint");
}

std::uint32_t BinaryReader::u32() {
  std::uint32_t v;
  read(&v, sizeof v);
  return v;
}

std::uint64_t BinaryReader::u64() {
  std::uint64_t v;
  read(&v, sizeof v);
  return v;
}

double BinaryReader::f64() {
  double v;
  read(&v, sizeof v);
  return v;
}

std::string BinaryReader::str() {
  const auto n = u64();
  if (n > (1u << 26)) throw VersionError("corrupt checkpoint string");
  std::string s(n, '\0');
  read(s.data(), n);
  return s;
}

Eigen::MatrixXd BinaryReader::matrix() {
  const auto rows = u64();
  const auto cols = u64();
  if (rows > (1u << 24) || cols > (1u << 24) || rows * cols > (1ull << 30))
    throw VersionError("corrupt checkpoint matrix header");
  Eigen::MatrixXd m(rows, cols);
  for (std::uint64_t r = 0; r < rows; ++r)
    for (std::uint64_t c = 0; c < cols; ++c) m(r, c) = f64();
  return m;
}

}  // namespace crossfuse
