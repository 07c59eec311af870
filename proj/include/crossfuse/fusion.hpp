#pragma once

#include "crossfuse/encoders.hpp"
#include "crossfuse/param.hpp"

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <vector>

namespace crossfuse {

enum class Aggregator { cross_attention, add, concat, avgpool, learned_weighted, passthrough };

std::string to_string(Aggregator a);
Aggregator parse_aggregator(const std::string& s);

/// Number of modality tokens in the full sequence.
inline constexpr Eigen::Index kTokenCount = 3;

/// Per-head projections W^Q_i, W^K_i (d_e x d_k), W^V_i (d_e x d_v) and shared W^O (H*d_v x d_e).
struct AttentionParams {
  int embed_dim = 0;
  int heads = 0;
  int key_dim = 0;
  int value_dim = 0;
  std::vector<Param> wq;
  std::vector<Param> wk;
  std::vector<Param> wv;
  Param wo;

  static AttentionParams init(int embed_dim, int heads, int key_dim, int value_dim,
                              std::uint64_t seed);
  /// Throws ShapeError if any matrix disagrees with the declared dims.
  void validate() const;
};

struct QKV {
  Eigen::MatrixXd q, k, v;
};

/// Q = e W^Q_i, K = e W^K_i, V = e W^V_i for one head.
QKV project_qkv(const Eigen::MatrixXd& tokens, const AttentionParams& params, int head);

struct AttentionOutput {
  Eigen::MatrixXd output;   // n x d_v
  Eigen::MatrixXd weights;  // n x n, row-stochastic
};

/// softmax(Q K^T / sqrt(d_k)) V.
AttentionOutput attention(const Eigen::MatrixXd& q, const Eigen::MatrixXd& k,
                          const Eigen::MatrixXd& v, int key_dim);

struct AttentionTrace {
  std::vector<Eigen::MatrixXd> head_weights;
  Eigen::VectorXd aggregated;
};

struct MultiHeadOutput {
  Eigen::MatrixXd output;  // n x d_e
  AttentionTrace trace;
};

/// Concat(h_1..h_H) W^O with every head's weights recorded.
MultiHeadOutput multi_head(const Eigen::MatrixXd& tokens, const AttentionParams& params);

/// Unweighted mean over token rows; throws ShapeError when the row count differs.
Eigen::VectorXd aggregate_mean(const Eigen::MatrixXd& mh, Eigen::Index expected_rows = kTokenCount);

/// Linear layer d -> 1 logit followed by the logistic link.
struct ClassifierHead {
  Param weight;  // d x 1
  Param bias;    // 1 x 1

  static ClassifierHead init(int in_dim, std::uint64_t seed);
  double logit(const Eigen::VectorXd& z) const;
};

/// Probability of the fake class.
double classify(const Eigen::VectorXd& z, const ClassifierHead& head);

double sigmoid(double x);

/// Non-attention fusion baselines over the (I, T, F) triple. `mix_logits` (size 3) is required
/// for learned_weighted and ignored otherwise.
Eigen::VectorXd baseline_aggregate(const EmbeddingTriple& triple, Aggregator method,
                                   const Eigen::VectorXd* mix_logits = nullptr);

struct FusionConfig {
  Aggregator aggregator = Aggregator::cross_attention;
  int embed_dim = 64;
  int heads = 8;
  int key_dim = 8;
  int value_dim = 8;
  bool residual_norm = false;
  int tokens = 3;
};

/// Batched, differentiable fusion + classifier. Token matrices are B x d_e, one per active
/// modality, in (visual, text, frequency) order.
class FusionHead {
 public:
  FusionHead() = default;
  FusionHead(const FusionConfig& config, std::uint64_t seed);

  const FusionConfig& config() const { return config_; }
  int output_dim() const;

  struct Cache {
    Eigen::MatrixXd x;                 // (B*n) x d_e stacked tokens
    std::vector<Eigen::MatrixXd> q, k, v;
    std::vector<Eigen::MatrixXd> attn;  // per head: (B*n) x n weights
    Eigen::MatrixXd concat;            // (B*n) x (H*d_v)
    Eigen::MatrixXd normed;            // residual path: normalized rows
    Eigen::VectorXd inv_std;           // residual path
    Eigen::MatrixXd z;                 // B x output_dim
    Eigen::VectorXd mix;               // softmax of mix logits
    std::vector<Eigen::MatrixXd> tokens;
  };

  Eigen::VectorXd forward(const std::vector<Eigen::MatrixXd>& tokens, Cache* cache = nullptr,
                          std::vector<AttentionTrace>* traces = nullptr) const;

  /// Gradients of sum_b dlogits[b] * logit_b. Parameter gradients are added to `param_grads`
  /// (aligned with params()) when non-null. Returns d/d tokens.
  std::vector<Eigen::MatrixXd> backward(const Cache& cache, const Eigen::VectorXd& dlogits,
                                        std::vector<Eigen::MatrixXd>* param_grads) const;

  std::vector<NamedParam> params();
  const AttentionParams& attention_params() const { return attn_; }
  AttentionParams& attention_params() { return attn_; }
  const ClassifierHead& classifier() const { return head_; }
  ClassifierHead& classifier() { return head_; }
  const Param& mix_logits() const { return mix_; }
  Param& mix_logits() { return mix_; }

  void save(BinaryWriter& w) const;
  static FusionHead load(BinaryReader& r, const FusionConfig& config);

 private:
  FusionConfig config_;
  AttentionParams attn_;
  ClassifierHead head_;
  Param mix_;
};

}  // namespace crossfuse
