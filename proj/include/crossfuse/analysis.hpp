#pragma once

#include "crossfuse/model.hpp"

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace crossfuse {

struct AttentionGroup {
  std::size_t count = 0;
  std::vector<Eigen::MatrixXd> per_head;  // mean n x n weights per head
  Eigen::MatrixXd head_mean;              // mean over heads
};

struct AttentionSummary {
  std::string source;
  std::string target;
  std::vector<std::string> token_names;
  std::map<std::string, AttentionGroup> groups;
};

enum class AttentionGrouping { by_class, all };

/// Mean attention weights over records. Throws DataError for an empty group and ConfigError for
/// models without an attention block.
AttentionSummary attention_summary(const Model& model, std::span<const SampleRecord* const> records,
                                   AttentionGrouping grouping = AttentionGrouping::by_class);
/// Mean of traces; the building block of attention_summary().
AttentionGroup mean_traces(std::span<const AttentionTrace> traces);

struct SpectrumSummary {
  int rows = 0;
  int cols = 0;
  double clip_lo = -25;
  double clip_hi = 5;
  /// Keyed by "<domain>/<real|fake>"; values unclipped.
  std::map<std::string, Grid> mean;
  std::map<std::string, std::size_t> count;
};

/// Mean of log(|dct2(gray)| + eps) over images; throws ShapeError on mixed sizes.
Grid mean_log_spectrum(std::span<const Grid> grays);
SpectrumSummary spectrum_summary(std::span<const SampleRecord* const> records, double clip_lo = -25,
                                 double clip_hi = 5);

void write_grid_csv(const Grid& g, const std::filesystem::path& path);
Grid read_grid_csv(const std::filesystem::path& path);

/// Raw csv grids plus an annotated SVG heat map per group; returns written files.
std::vector<std::filesystem::path> render_attention(const AttentionSummary& s, const std::filesystem::path& dir);
/// Raw csv grids plus a PNG per group with values clipped to the display range.
std::vector<std::filesystem::path> render_spectra(const SpectrumSummary& s, const std::filesystem::path& dir);

}  // namespace crossfuse
