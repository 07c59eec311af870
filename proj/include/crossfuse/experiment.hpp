#pragma once

#include "crossfuse/robustness.hpp"
#include "crossfuse/transfer.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace crossfuse {

/// A failure inside one pipeline stage; what() is "<stage>: <cause>".
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& cause)
      : std::runtime_error(stage + ": " + cause), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct GenDataConfig {
  std::vector<SyntheticDomainSpec> domains;
  int n_per_class = 400;
  int image_size = 64;
};

struct ExperimentConfig {
  std::filesystem::path manifest;  // input manifest; ignored when gen_data is set
  std::optional<GenDataConfig> gen_data;
  std::vector<std::string> domains;          // empty: every manifest domain
  std::vector<std::string> ablation_sources;  // empty: `domains`
  ModelConfig model;
  TrainConfig train;
  RobustnessConfig robustness;
  double clip_lo = -25;
  double clip_hi = 5;
  std::filesystem::path output_dir = "runs/default";
  std::uint64_t seed = 1;

  /// Relative paths resolve against `base` (the config file's directory).
  static ExperimentConfig from_json(const nlohmann::json& j, const std::filesystem::path& base = {});
  static ExperimentConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;

  /// Copies with every seed derived from `seed`.
  ModelConfig seeded_model() const;
  TrainConfig seeded_train() const;
  RobustnessConfig seeded_robustness() const;
  std::vector<SyntheticDomainSpec> seeded_domains() const;
};

/// Generates, splits and saves the synthetic benchmark described by `gen`.
DatasetManifest generate_benchmark(const GenDataConfig& gen, std::uint64_t seed);

enum class AblationAxis { aggregator, modality_subset, heads, image_size };
std::string to_string(AblationAxis a);
AblationAxis parse_ablation_axis(const std::string& s);
std::vector<std::string> default_axis_values(AblationAxis a);
/// Applies one axis value to a model config; throws ConfigError for invalid values.
ModelConfig apply_axis_value(const ModelConfig& base, AblationAxis axis, const std::string& value);

struct AblationEntry {
  std::string value;
  TransferMatrix matrix;
};

/// Writes <out>/ablation-<axis>/<value>/transfer.{csv,txt} and comparison.csv. Every value is
/// validated before training starts.
std::vector<AblationEntry> run_ablation(const ExperimentConfig& config, AblationAxis axis,
                                        std::vector<std::string> values = {});

/// gen-data (optional) -> train -> eval-transfer -> robustness -> analysis. The resolved config
/// snapshot is written first; with `resume`, existing checkpoints are reused.
std::filesystem::path run_full_pipeline(const ExperimentConfig& config, bool resume = false);

}  // namespace crossfuse
