#pragma once

#include "crossfuse/image.hpp"
#include "crossfuse/rng.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace crossfuse {

enum class Split { unassigned, train, val, test };

std::string to_string(Split s);
Split parse_split(const std::string& s);

inline constexpr int kReal = 0;
inline constexpr int kFake = 1;

/// One labeled image. label 0 = real, 1 = fake.
struct SampleRecord {
  std::string id;
  Image image;
  std::string caption;
  int label = kReal;
  std::string domain;
  Split split = Split::unassigned;

  bool operator==(const SampleRecord&) const = default;
};

/// Counts records handed out per (domain, split); lets callers prove which data a stage read.
class AccessLog {
 public:
  void record(const std::string& domain, Split split, std::size_t count);
  std::size_t count(const std::string& domain, Split split) const;
  std::size_t total() const;
  const std::map<std::pair<std::string, Split>, std::size_t>& entries() const { return counts_; }

 private:
  std::map<std::pair<std::string, Split>, std::size_t> counts_;
};

struct DatasetManifest {
  std::vector<SampleRecord> records;
  std::vector<std::string> domains;
  std::uint64_t seed = 0;

  /// Records of one domain and split, in manifest order.
  std::vector<const SampleRecord*> select(const std::string& domain, Split split,
                                          AccessLog* log = nullptr) const;
  bool has_domain(const std::string& domain) const;

  /// Throws DataError if class balance or 80:10:10 proportions are violated.
  void validate() const;

  bool operator==(const DatasetManifest&) const = default;
};

enum class ArtifactKind {
  grid_periodic,
  checkerboard_highfreq,
  band_limited_lowpass,
  blocky_quantized,
  smooth_natural
};

std::string to_string(ArtifactKind k);
/// Throws ConfigError on unknown names.
ArtifactKind parse_artifact_kind(const std::string& s);

struct CaptionTemplates {
  /// "{}" is replaced by the content class name.
  std::vector<std::string> real;
  std::vector<std::string> fake;
  /// Probability that a record draws from its own class's template list.
  double fidelity = 0.7;

  static CaptionTemplates defaults();
};

struct SyntheticDomainSpec {
  std::string id;
  ArtifactKind kind = ArtifactKind::grid_periodic;
  double strength = 0.05;
  /// Tile or block period in pixels for grid-periodic and blocky-quantized artifacts.
  int period = 8;
  CaptionTemplates captions = CaptionTemplates::defaults();
  std::uint64_t seed = 0;
};

/// Procedural texture classes shared by every domain's real images.
const std::vector<std::string>& content_classes();

/// Real base texture: band-limited noise shaped per content class, plus mild sensor noise.
Grid synth_base_texture(int size, std::size_t content_class, Rng& rng);

/// Adds the domain artifact to a base texture (before clamping/quantization).
Grid apply_artifact(const Grid& base, const SyntheticDomainSpec& spec, Rng& rng);

/// 2*n_per_class records (real first, then fake), 8-bit quantized, split unassigned.
std::vector<SampleRecord> generate_domain(const SyntheticDomainSpec& spec, int n_per_class,
                                          int image_size);

/// Stratified deterministic 80:10:10 split per domain.
DatasetManifest split_manifest(std::vector<SampleRecord> records, std::uint64_t seed);

/// Writes `manifest.jsonl` style file at `path`, images as PNG next to it under images/.
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest load_manifest(const std::filesystem::path& path);

/// JSON array of spec objects, or an object holding one under "domains".
std::vector<SyntheticDomainSpec> domain_specs_from_json(const nlohmann::json& doc);
nlohmann::json domain_spec_to_json(const SyntheticDomainSpec& spec);
/// Domain specs file (JSON array of objects).
std::vector<SyntheticDomainSpec> load_domain_specs(const std::filesystem::path& path);

}  // namespace crossfuse
