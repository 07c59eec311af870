#pragma once

#include "crossfuse/data_synth.hpp"
#include "crossfuse/dct.hpp"
#include "crossfuse/param.hpp"

#include <Eigen/Dense>

#include <array>
#include <string>
#include <vector>

namespace crossfuse {

enum class Modality { visual = 0, text = 1, frequency = 2 };

inline constexpr int kNumModalities = 3;

struct EncoderSpec {
  Modality modality = Modality::visual;
  std::string architecture;
  int embed_dim = 64;
  bool frozen = true;
  std::uint64_t seed = 0;

  bool operator==(const EncoderSpec&) const = default;
};

/// Small stand-in for a pretrained image backbone: three stride-2 3x3 conv blocks with ReLU,
/// global average pooling and a linear map to the embedding width.
class VisualEncoder {
 public:
  static constexpr const char* kArchitecture = "conv3-s2-v1";
  static constexpr std::array<int, 3> kChannels{8, 16, 32};

  VisualEncoder() = default;
  VisualEncoder(EncoderSpec spec, int input_size);

  const EncoderSpec& spec() const { return spec_; }
  int input_size() const { return input_size_; }
  bool frozen() const { return spec_.frozen; }
  void set_frozen(bool f) { spec_.frozen = f; }

  struct Cache {
    std::array<Eigen::MatrixXd, 3> cols;  // im2col inputs per block
    std::array<Eigen::MatrixXd, 3> act;   // post-ReLU activations (channels x pixels)
    std::array<int, 4> side{};            // spatial side length at each stage
  };

  /// Throws ShapeError unless the image is input_size x input_size.
  Eigen::VectorXd forward(const Grid& gray, Cache* cache = nullptr) const;

  /// Adds parameter gradients to `param_grads` (aligned with params()) when non-null;
  /// returns d loss / d image when want_input is set (empty grid otherwise).
  Grid backward(const Cache& cache, const Eigen::VectorXd& grad_out,
                std::vector<Eigen::MatrixXd>* param_grads, bool want_input) const;

  std::vector<NamedParam> params();
  void save(BinaryWriter& w) const;
  static VisualEncoder load(BinaryReader& r);

 private:
  EncoderSpec spec_;
  int input_size_ = 0;
  std::array<Param, 3> conv_w_;
  std::array<Param, 3> conv_b_;
  Param fc_w_;
  Param fc_b_;
};

/// Stand-in text tower: hashed bag of lowercase alphanumeric tokens followed by a linear layer.
class TextEncoder {
 public:
  static constexpr const char* kArchitecture = "hashbag-v1";
  static constexpr int kBuckets = 256;

  TextEncoder() = default;
  explicit TextEncoder(EncoderSpec spec);

  const EncoderSpec& spec() const { return spec_; }
  bool frozen() const { return spec_.frozen; }
  void set_frozen(bool f) { spec_.frozen = f; }

  static std::vector<std::string> tokenize(const std::string& caption);
  /// Normalized token-count histogram; throws DataError for captions without tokens.
  static Eigen::VectorXd bag(const std::string& caption);

  Eigen::VectorXd forward(const std::string& caption) const;
  Eigen::VectorXd forward_bag(const Eigen::VectorXd& bag) const;
  void backward(const Eigen::VectorXd& bag, const Eigen::VectorXd& grad_out,
                std::vector<Eigen::MatrixXd>& param_grads) const;

  std::vector<NamedParam> params();
  void save(BinaryWriter& w) const;
  static TextEncoder load(BinaryReader& r);

 private:
  EncoderSpec spec_;
  Param w_;
  Param b_;
};

/// Per-modality embeddings, always in (visual, text, frequency) order.
struct EmbeddingTriple {
  Eigen::VectorXd visual;
  Eigen::VectorXd text;
  Eigen::VectorXd frequency;

  const Eigen::VectorXd& operator[](Modality m) const;
};

/// Gray + bilinear resize to the model's square input size.
Grid prepare_image(const Image& img, int size);

EmbeddingTriple embed_all(const SampleRecord& record, const VisualEncoder& visual,
                          const TextEncoder& text, const FreqFeatureParams& freq);

std::vector<EmbeddingTriple> embed_all(std::span<const SampleRecord* const> records,
                                       const VisualEncoder& visual, const TextEncoder& text,
                                       const FreqFeatureParams& freq);

}  // namespace crossfuse
