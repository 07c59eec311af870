#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace crossfuse {

inline constexpr double kDecisionThreshold = 0.5;

/// Binary metrics with fake (1) as the positive class.
struct MetricBundle {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  double precision = 0, recall = 0, f1 = 0, accuracy = 0;

  std::size_t total() const { return tp + fp + tn + fn; }
  static MetricBundle from_counts(std::size_t tp, std::size_t fp, std::size_t tn, std::size_t fn);
  bool operator==(const MetricBundle&) const = default;
};

/// Hard predictions in {0, 1}. Throws DataError on empty or mismatched input.
MetricBundle compute_metrics(std::span<const int> predictions, std::span<const int> labels);
/// Probabilities of fake, thresholded at kDecisionThreshold (p >= 0.5 counts as fake).
MetricBundle compute_metrics_prob(std::span<const double> probabilities, std::span<const int> labels);

int hard_label(double probability);

class TransferMatrix {
 public:
  TransferMatrix() = default;
  explicit TransferMatrix(std::vector<std::string> domains);

  const std::vector<std::string>& domains() const { return domains_; }
  std::size_t size() const { return domains_.size(); }
  bool empty() const { return domains_.empty(); }

  MetricBundle& at(std::size_t source, std::size_t target) { return cells_[source * size() + target]; }
  const MetricBundle& at(std::size_t source, std::size_t target) const {
    return cells_[source * size() + target];
  }
  std::size_t index_of(const std::string& domain) const;

  /// Mean F1 over targets other than `source`; needs at least two domains.
  double ia(std::size_t source) const;
  /// Unweighted mean of ia() over sources.
  double average_ia() const;

  bool operator==(const TransferMatrix&) const = default;

 private:
  std::vector<std::string> domains_;
  std::vector<MetricBundle> cells_;
};

enum class TableFormat { text, csv, latex };
TableFormat parse_table_format(const std::string& s);

/// Throws DataError on an empty matrix.
std::string render_table(const TransferMatrix& m, TableFormat format);
/// Inverse of render_table(..., csv).
TransferMatrix parse_transfer_csv(const std::string& csv);

}  // namespace crossfuse
