#pragma once

#include "crossfuse/metrics.hpp"
#include "crossfuse/model.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace crossfuse {

enum class PerturbationKind { gaussian_noise, gaussian_blur, jpeg, sharpen, color_jitter };

std::string to_string(PerturbationKind k);
PerturbationKind parse_perturbation_kind(const std::string& s);
const std::vector<PerturbationKind>& all_perturbation_kinds();
std::vector<double> default_intensity_grid(PerturbationKind k);
/// Intensity at which the perturbation is the identity (jpeg: 100, the lossless path).
double identity_intensity(PerturbationKind k);

/// Output is clamped to [0,1]. `seed` only matters for gaussian noise.
Image apply_perturbation(const Image& img, PerturbationKind kind, double intensity,
                         std::uint64_t seed = 0);

/// PIL-style sharpness enhancer: smooth + factor * (img - smooth), borders copied.
Grid sharpen(const Grid& g, double factor);
/// Brightness (x * f) then contrast (mean + f * (x - mean)), both with factor f.
Image color_jitter(const Image& img, double factor);

struct FidResult {
  double value = 0;
  bool jittered = false;
};

/// Frechet distance between Gaussian fits of two feature sets (rows are samples). A 1e-6
/// diagonal jitter is added when either covariance is singular.
FidResult fid_lite(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);
/// Features from the frozen visual encoder at its input size.
Eigen::MatrixXd visual_features(std::span<const Image> images, const VisualEncoder& encoder);

/// Anything an attack can differentiate through.
class AttackTarget {
 public:
  virtual ~AttackTarget() = default;
  /// BCE loss at label y; writes d loss / d x into `grad`.
  virtual double loss_and_grad(const Grid& x, int y, Grid& grad) const = 0;
  virtual double probability(const Grid& x) const = 0;
};

/// f(x) = sigmoid(<w, x> + b).
class LogisticLinearTarget : public AttackTarget {
 public:
  LogisticLinearTarget(Grid w, double b) : w_(std::move(w)), b_(b) {}
  double loss_and_grad(const Grid& x, int y, Grid& grad) const override;
  double probability(const Grid& x) const override;

 private:
  Grid w_;
  double b_;
};

/// A trained model on one record; x is the model-resolution gray image.
class ModelAttackTarget : public AttackTarget {
 public:
  ModelAttackTarget(const Model& model, PreparedSample base);
  double loss_and_grad(const Grid& x, int y, Grid& grad) const override;
  double probability(const Grid& x) const override;

 private:
  const Model& model_;
  PreparedSample base_;
};

enum class AttackKind { fgsm, pgd };
std::string to_string(AttackKind k);
AttackKind parse_attack_kind(const std::string& s);

struct AttackConfig {
  AttackKind kind = AttackKind::fgsm;
  double epsilon = 0.1;
  double alpha = 0.01;
  int steps = 20;
  int label = kFake;

  void validate() const;
  std::string name() const;
  nlohmann::json to_json() const;
  static AttackConfig from_json(const nlohmann::json& j);
};

/// Largest y within [x - eps, x + eps] (elementwise, after rounding) nearest to `candidate`;
/// guarantees |y - x| <= eps when evaluated in floating point.
Grid project_linf(const Grid& x, const Grid& candidate, double eps);

/// x + eps * sign(grad L(x, y)) projected onto the eps-ball, then clamped to [0,1].
Grid fgsm(const AttackTarget& target, const Grid& x, int y, double eps);

/// Called after every step with the step index (1-based) and the pre-clamp iterate.
using PgdObserver = std::function<void(int step, const Grid& iterate)>;
Grid pgd(const AttackTarget& target, const Grid& x, int y, double eps, double alpha, int steps,
         const PgdObserver& observer = {});

Grid run_attack(const AttackTarget& target, const Grid& x, const AttackConfig& config);

struct RobustnessConfig {
  std::vector<PerturbationKind> kinds = all_perturbation_kinds();
  std::map<PerturbationKind, std::vector<double>> grids;  // overrides default_intensity_grid
  std::vector<AttackConfig> attacks;
  bool compute_fid = true;
  std::uint64_t seed = 1;

  std::vector<double> grid(PerturbationKind k) const;
  nlohmann::json to_json() const;
  static RobustnessConfig from_json(const nlohmann::json& j);
};

struct RobustnessCell {
  std::string name;
  double intensity = 0;
  MetricBundle metrics;
  std::vector<double> probabilities;
  std::vector<int> labels;
  double fid = -1;  // per-intensity FID-lite, -1 when not computed
};

struct RobustnessReport {
  MetricBundle baseline;
  MetricBundle baseline_fake;
  std::vector<RobustnessCell> perturbations;
  std::vector<RobustnessCell> attacks;
  std::map<std::string, double> average_f1;
  std::map<std::string, double> pooled_fid;
  std::vector<std::string> notes;

  std::string to_csv() const;
};

/// Perturbations hit every test record; attacks hit the fake records only.
RobustnessReport robustness_eval(const Model& model, std::span<const SampleRecord* const> test_records,
                                 const RobustnessConfig& config);

}  // namespace crossfuse
