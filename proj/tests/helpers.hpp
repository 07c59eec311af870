#pragma once

#include "crossfuse/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

namespace testing_support {

using namespace crossfuse;

inline std::vector<SyntheticDomainSpec> two_domains() {
  return {{"grid", ArtifactKind::grid_periodic, 0.08, 8, CaptionTemplates::defaults(), 101},
          {"checker", ArtifactKind::checkerboard_highfreq, 0.08, 8, CaptionTemplates::defaults(), 202}};
}

inline DatasetManifest tiny_manifest(int n_per_class = 20, int size = 32,
                                     std::vector<SyntheticDomainSpec> specs = two_domains(),
                                     std::uint64_t seed = 5) {
  return generate_benchmark({std::move(specs), n_per_class, size}, seed);
}

inline ModelConfig tiny_model(int size = 32, int embed = 8, int heads = 2) {
  ModelConfig c;
  c.image_size = size;
  c.embed_dim = embed;
  c.heads = heads;
  return c;
}

/// Mean BCE from logits, computed independently of accumulate_gradients().
inline double batch_loss(const Model& m, const std::vector<const PreparedSample*>& batch) {
  const Eigen::VectorXd l = m.logits(batch);
  double s = 0;
  for (Eigen::Index i = 0; i < l.size(); ++i) {
    const double y = batch[static_cast<std::size_t>(i)]->label;
    // -log sigmoid(x) = log1p(exp(-x)), written to stay finite for large |x|.
    const double x = y == 1 ? l(i) : -l(i);
    s += x > 0 ? std::log1p(std::exp(-x)) : -x + std::log1p(std::exp(x));
  }
  return s / static_cast<double>(l.size());
}

struct GroupCheck {
  std::string name;
  double rel_error = 0;
  std::size_t entries = 0;
};

/// Central differences (step h) for every entry of every trainable parameter group, compared
/// with backprop by the relative error ||g_bp - g_fd|| / max(||g_bp||, ||g_fd||).
inline std::vector<GroupCheck> gradient_check(Model& m, const std::vector<const PreparedSample*>& batch,
                                              double h = 1e-5) {
  m.zero_grad();
  m.accumulate_gradients(batch);
  std::vector<GroupCheck> out;
  for (auto& np : m.trainable_params()) {
    Eigen::MatrixXd& w = np.param->value;
    const Eigen::MatrixXd analytic = np.param->grad;
    Eigen::MatrixXd numeric(w.rows(), w.cols());
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      const double orig = w.data()[i];
      w.data()[i] = orig + h;
      const double up = batch_loss(m, batch);
      w.data()[i] = orig - h;
      const double down = batch_loss(m, batch);
      w.data()[i] = orig;
      numeric.data()[i] = (up - down) / (2 * h);
    }
    const double denom = std::max({analytic.norm(), numeric.norm(), 1e-300});
    out.push_back({np.name, (analytic - numeric).norm() / denom, static_cast<std::size_t>(w.size())});
  }
  return out;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("crossfuse-test-" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testing_support
