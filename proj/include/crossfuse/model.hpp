#pragma once

#include "crossfuse/data_synth.hpp"
#include "crossfuse/dct.hpp"
#include "crossfuse/encoders.hpp"
#include "crossfuse/fusion.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace crossfuse {

std::string modality_letters(const std::vector<Modality>& mods);
/// Parses "ITF"-style subsets (any order, no repeats) into canonical (I, T, F) order.
std::vector<Modality> parse_modalities(const std::string& letters);

struct ModelConfig {
  int image_size = 64;
  int embed_dim = 64;
  int heads = 8;
  int key_dim = 0;    // 0: embed_dim / heads
  int value_dim = 0;  // 0: embed_dim / heads
  bool residual_norm = false;
  Aggregator aggregator = Aggregator::cross_attention;
  std::vector<Modality> modalities{Modality::visual, Modality::text, Modality::frequency};
  bool freeze_visual = true;
  bool freeze_text = true;
  std::uint64_t encoder_seed = 1;
  std::uint64_t init_seed = 1;

  /// Fills derived dims and checks invariants; throws ConfigError.
  ModelConfig resolved() const;
  FusionConfig fusion_config() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);

  bool operator==(const ModelConfig&) const = default;
};

/// Per-record model inputs. Frozen-encoder embeddings are cached so training does not re-run
/// the encoders; `encoder_key` ties the cache to the encoder weights that produced it.
struct PreparedSample {
  Grid gray;
  Eigen::VectorXd text_bag;
  Eigen::VectorXd freq_raw;
  Eigen::VectorXd visual_embedding;
  Eigen::VectorXd text_embedding;
  std::uint64_t encoder_key = 0;
  int label = kReal;
};

struct Prediction {
  double probability = 0.5;
  AttentionTrace trace;
};

class Model {
 public:
  Model() = default;
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  const VisualEncoder& visual() const { return visual_; }
  VisualEncoder& visual() { return visual_; }
  const TextEncoder& text() const { return text_; }
  TextEncoder& text() { return text_; }
  const FusionHead& fusion() const { return fusion_; }
  FusionHead& fusion() { return fusion_; }
  const FreqNormalizer& normalizer() const { return normalizer_; }
  void set_normalizer(FreqNormalizer n);
  const Param& freq_projection() const { return projection_; }
  Param& freq_projection() { return projection_; }
  FreqFeatureParams freq_params() const;

  const std::string& source_domain() const { return source_domain_; }
  void set_source_domain(std::string s) { source_domain_ = std::move(s); }

  bool uses(Modality m) const;
  std::uint64_t encoder_key() const;

  PreparedSample prepare(const SampleRecord& record) const;
  PreparedSample prepare_gray(const Grid& gray, const std::string& caption, int label) const;

  Eigen::VectorXd logits(std::span<const PreparedSample* const> batch,
                         std::vector<AttentionTrace>* traces = nullptr) const;
  std::vector<double> probabilities(std::span<const PreparedSample* const> batch) const;

  Prediction forward(const SampleRecord& record) const;
  EmbeddingTriple embed(const SampleRecord& record) const;

  /// Mean binary cross-entropy over the batch; adds its gradient to every trainable Param.
  double accumulate_gradients(std::span<const PreparedSample* const> batch);

  /// Loss of one sample at its own label and d loss / d gray image.
  double input_gradient(const PreparedSample& sample, Grid& grad) const;

  std::vector<NamedParam> trainable_params();
  std::vector<NamedParam> all_params();
  void zero_grad();

 private:
  friend Model load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected);
  struct Tokens;
  Tokens build_tokens(std::span<const PreparedSample* const> batch, bool keep_caches) const;

  ModelConfig config_;
  VisualEncoder visual_;
  TextEncoder text_;
  FreqNormalizer normalizer_;
  Param projection_;
  FusionHead fusion_;
  std::string source_domain_;
};

void save_checkpoint(const Model& model, const std::filesystem::path& path);
/// Throws VersionError on a bad header; ConfigError if `expected` disagrees with the stored config.
Model load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr);

}  // namespace crossfuse
