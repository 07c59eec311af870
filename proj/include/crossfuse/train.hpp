#pragma once

#include "crossfuse/metrics.hpp"
#include "crossfuse/model.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <memory>
#include <utility>

namespace crossfuse {

/// -[y log p + (1-y) log(1-p)] with p clamped to [1e-12, 1 - 1e-12].
double bce_loss(double p, int y);

struct TrainConfig {
  int batch_size = 128;
  double learning_rate = 1e-3;
  int max_epochs = 30;
  int patience = 5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  /// Global gradient-norm clip; 0 disables clipping.
  double clip_norm = 0.0;
  std::uint64_t seed = 1;

  void validate() const;
  nlohmann::json to_json() const;
  /// Flat key/value object; unknown keys are a ConfigError.
  static TrainConfig from_json(const nlohmann::json& j);
  static TrainConfig load(const std::filesystem::path& path);
  bool operator==(const TrainConfig&) const = default;
};

struct TrainLog {
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  std::vector<double> val_f1;
  int best_epoch = -1;
  double wall_seconds = 0;

  nlohmann::json to_json() const;
  /// Compares everything except wall time.
  bool same_trajectory(const TrainLog& o) const;
};

class Adam {
 public:
  Adam(std::vector<NamedParam> params, const TrainConfig& config);
  void step();
  long steps() const { return t_; }

 private:
  std::vector<NamedParam> params_;
  std::vector<Eigen::MatrixXd> m_, v_;
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
};

/// Prepared inputs shared by every model with the same frozen encoders. Entries are keyed by
/// (encoder key, record id); reads still go through DatasetManifest::select for access logging.
class PreparedCache {
 public:
  const PreparedSample& get(const Model& model, const SampleRecord& record);
  std::vector<const PreparedSample*> get_all(const Model& model,
                                             std::span<const SampleRecord* const> records);
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

 private:
  std::map<std::pair<std::uint64_t, std::string>, std::unique_ptr<PreparedSample>> entries_;
};

struct TrainResult {
  Model model;
  TrainLog log;
};

/// Mean BCE and metrics of `model` on prepared samples.
struct EvalResult {
  double loss = 0;
  std::vector<double> probabilities;
  MetricBundle metrics;
};
EvalResult evaluate_prepared(const Model& model, std::span<const PreparedSample* const> samples,
                             int batch_size = 256);

/// Fits the frequency normalizer on the source train split, then runs Adam with early stopping
/// on validation loss. Only (source, train) and (source, val) are read.
TrainResult train_model(const DatasetManifest& manifest, const std::string& source, Model init,
                        const TrainConfig& config, AccessLog* log = nullptr,
                        PreparedCache* cache = nullptr);

}  // namespace crossfuse
