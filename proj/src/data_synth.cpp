#include "crossfuse/data_synth.hpp"

#include "crossfuse/dct.hpp"
#include "crossfuse/error.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

namespace crossfuse {

using json = nlohmann::json;

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::unassigned: return "none";
  }
  return "none";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  if (s == "none") return Split::unassigned;
  throw ConfigError("unknown split '" + s + "'");
}

void AccessLog::record(const std::string& domain, Split split, std::size_t count) {
  counts_[{domain, split}] += count;
}

std::size_t AccessLog::count(const std::string& domain, Split split) const {
  auto it = counts_.find({domain, split});
  return it == counts_.end() ? 0 : it->second;
}

std::size_t AccessLog::total() const {
  std::size_t t = 0;
  for (const auto& [key, n] : counts_) t += n;
  return t;
}

std::vector<const SampleRecord*> DatasetManifest::select(const std::string& domain, Split split,
                                                         AccessLog* log) const {
  std::vector<const SampleRecord*> out;
  for (const auto& r : records)
    if (r.domain == domain && r.split == split) out.push_back(&r);
  if (log) log->record(domain, split, out.size());
  return out;
}

bool DatasetManifest::has_domain(const std::string& domain) const {
  return std::find(domains.begin(), domains.end(), domain) != domains.end();
}

namespace {

struct SplitTargets {
  std::size_t train, val, test;
};

// Largest-remainder rounding of 80:10:10.
SplitTargets split_targets(std::size_t n) {
  const double exact[3] = {0.8 * n, 0.1 * n, 0.1 * n};
  std::size_t counts[3];
  double rem[3];
  std::size_t assigned = 0;
  for (int i = 0; i < 3; ++i) {
    counts[i] = static_cast<std::size_t>(std::floor(exact[i] + 1e-9));
    rem[i] = exact[i] - counts[i];
    assigned += counts[i];
  }
  int order[3] = {0, 1, 2};
  std::stable_sort(order, order + 3, [&](int a, int b) { return rem[a] > rem[b]; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++counts[order[k % 3]];
  return {counts[0], counts[1], counts[2]};
}

}  // namespace

void DatasetManifest::validate() const {
  for (const auto& d : domains) {
    std::size_t real = 0, fake = 0, per_split[4] = {0, 0, 0, 0};
    for (const auto& r : records) {
      if (r.domain != d) continue;
      (r.label == kFake ? fake : real)++;
      per_split[static_cast<int>(r.split)]++;
    }
    if (real != fake)
      throw DataError("domain '" + d + "' is unbalanced: " + std::to_string(real) + " real vs " +
                      std::to_string(fake) + " fake");
    const std::size_t n = real + fake;
    const double want[3] = {0.8 * n, 0.1 * n, 0.1 * n};
    for (int s = 0; s < 3; ++s)
      if (std::abs(static_cast<double>(per_split[s + 1]) - want[s]) > 1.0)
        throw DataError("domain '" + d + "' split " + to_string(static_cast<Split>(s + 1)) +
                        " has " + std::to_string(per_split[s + 1]) + " records");
  }
}

std::string to_string(ArtifactKind k) {
  switch (k) {
    case ArtifactKind::grid_periodic: return "grid-periodic";
    case ArtifactKind::checkerboard_highfreq: return "checkerboard-highfreq";
    case ArtifactKind::band_limited_lowpass: return "band-limited-lowpass";
    case ArtifactKind::blocky_quantized: return "blocky-quantized";
    case ArtifactKind::smooth_natural: return "smooth-natural";
  }
  return "?";
}

ArtifactKind parse_artifact_kind(const std::string& s) {
  for (auto k : {ArtifactKind::grid_periodic, ArtifactKind::checkerboard_highfreq,
                 ArtifactKind::band_limited_lowpass, ArtifactKind::blocky_quantized,
                 ArtifactKind::smooth_natural})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown artifact kind '" + s + "'");
}

CaptionTemplates CaptionTemplates::defaults() {
  // Real images get descriptive captioner-style text; fakes get generator prompts.
  return {{"a close up of a {} texture with soft shading",
           "an old picture of {} on a grey afternoon",
           "a blurry image of some {} seen from above",
           "there is a {} pattern in this picture"},
          {"photo of {}", "a photo of {}"},
          0.7};
}

const std::vector<std::string>& content_classes() {
  static const std::vector<std::string> names{"clouds", "ripples", "grain", "mottled stone",
                                              "haze"};
  return names;
}

namespace {

struct ClassShape {
  double cutoff;      // fraction of image size
  double anisotropy;  // >1 stretches along columns
};

constexpr ClassShape kShapes[] = {{0.04, 1.0}, {0.06, 2.5}, {0.06, 0.4}, {0.10, 1.0}, {0.02, 1.0}};

Grid standardize(Grid g) {
  const double mean = g.mean();
  g.array() -= mean;
  const double sd = std::sqrt(g.array().square().mean());
  if (sd > 0) g /= sd;
  return g;
}

Grid normal_grid(int rows, int cols, Rng& rng) {
  std::normal_distribution<double> n01;
  Grid g(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) g(r, c) = n01(rng);
  return g;
}

constexpr double kSensorNoise = 0.01;

}  // namespace

Grid synth_base_texture(int size, std::size_t content_class, Rng& rng) {
  const ClassShape shape = kShapes[content_class % std::size(kShapes)];
  Grid spec = normal_grid(size, size, rng);
  const double r0 = shape.cutoff * size;
  for (int k = 0; k < size; ++k)
    for (int l = 0; l < size; ++l) {
      const double rk = k * shape.anisotropy;
      const double rl = l / shape.anisotropy;
      const double r2 = (rk * rk + rl * rl) / (r0 * r0);
      spec(k, l) /= (1.0 + r2);
    }
  spec(0, 0) = 0.0;
  Grid z = standardize(idct2(spec));
  std::uniform_real_distribution<double> brightness(-0.08, 0.08);
  std::uniform_real_distribution<double> contrast(0.7, 1.3);
  const double b = brightness(rng);
  const double c = contrast(rng);
  Grid x = (0.5 + b + 0.15 * c * z.array()).matrix();
  x += kSensorNoise * normal_grid(size, size, rng);
  return x;
}

Grid apply_artifact(const Grid& base, const SyntheticDomainSpec& spec, Rng& rng) {
  if (!(spec.strength > 0))
    throw ConfigError("domain '" + spec.id + "': artifact strength must be > 0 for fakes");
  const int rows = static_cast<int>(base.rows());
  const int cols = static_cast<int>(base.cols());
  const double s = spec.strength;
  Grid out = base;
  switch (spec.kind) {
    case ArtifactKind::grid_periodic: {
      // One fixed tile per domain, like a shared codebook.
      Rng tile_rng(derive_seed(spec.seed, {0x711e}));
      const int p = std::max(2, spec.period);
      const Grid tile = standardize(normal_grid(p, p, tile_rng));
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) out(r, c) += s * tile(r % p, c % p);
      break;
    }
    case ArtifactKind::checkerboard_highfreq:
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
          out(r, c) += s * ((r + c) % 2 == 0 ? 1.0 : -1.0) * 2.0 * base(r, c);
      break;
    case ArtifactKind::band_limited_lowpass:
      out = gaussian_blur(base, s);
      break;
    case ArtifactKind::blocky_quantized: {
      const int p = std::max(2, spec.period / 2);
      const double w = std::min(1.0, s);
      for (int r0 = 0; r0 < rows; r0 += p)
        for (int c0 = 0; c0 < cols; c0 += p) {
          const int h = std::min(p, rows - r0);
          const int wd = std::min(p, cols - c0);
          const double m = base.block(r0, c0, h, wd).mean();
          out.block(r0, c0, h, wd).array() = (1 - w) * base.block(r0, c0, h, wd).array() + w * m;
        }
      break;
    }
    case ArtifactKind::smooth_natural: {
      Grid ring = normal_grid(rows, cols, rng);
      const double lo = 0.25 * std::max(rows, cols);
      const double hi = 0.5 * std::max(rows, cols);
      for (int k = 0; k < rows; ++k)
        for (int l = 0; l < cols; ++l) {
          const double r = std::hypot(k, l);
          if (r < lo || r > hi) ring(k, l) = 0.0;
        }
      out += s * standardize(idct2(ring));
      break;
    }
  }
  return out;
}

namespace {

std::string fill_template(const std::string& tmpl, const std::string& cls) {
  const auto pos = tmpl.find("{}");
  if (pos == std::string::npos) return tmpl;
  return tmpl.substr(0, pos) + cls + tmpl.substr(pos + 2);
}

}  // namespace

std::vector<SampleRecord> generate_domain(const SyntheticDomainSpec& spec, int n_per_class,
                                          int image_size) {
  if (n_per_class < 1) throw ConfigError("generate_domain: n_per_class must be >= 1");
  if (image_size < 16) throw ConfigError("generate_domain: image_size must be >= 16");
  if (!(spec.strength > 0))
    throw ConfigError("domain '" + spec.id + "': artifact strength must be > 0 for fakes");
  const auto& cap = spec.captions;
  if (cap.real.empty() || cap.fake.empty())
    throw ConfigError("domain '" + spec.id + "': caption templates must be non-empty");

  std::vector<SampleRecord> out;
  out.reserve(2 * static_cast<std::size_t>(n_per_class));
  const auto& classes = content_classes();
  for (int label : {kReal, kFake}) {
    for (int i = 0; i < n_per_class; ++i) {
      Rng rng(derive_seed(spec.seed, {static_cast<std::uint64_t>(label),
                                      static_cast<std::uint64_t>(i)}));
      const std::size_t cls = std::uniform_int_distribution<std::size_t>(0, classes.size() - 1)(rng);
      Grid g = synth_base_texture(image_size, cls, rng);
      if (label == kFake) g = apply_artifact(g, spec, rng);

      std::bernoulli_distribution faithful(cap.fidelity);
      const bool own = faithful(rng);
      const auto& pool = ((label == kFake) == own) ? cap.fake : cap.real;
      const auto& tmpl = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];

      SampleRecord rec;
      rec.id = spec.id + "-" + (label == kFake ? "fake" : "real") + "-" + std::to_string(i);
      rec.image = Image::from_grid(g);
      rec.image.clamp01();
      quantize_8bit(rec.image);
      rec.caption = fill_template(tmpl, classes[cls]);
      rec.label = label;
      rec.domain = spec.id;
      out.push_back(std::move(rec));
    }
  }
  return out;
}

DatasetManifest split_manifest(std::vector<SampleRecord> records, std::uint64_t seed) {
  DatasetManifest m;
  m.seed = seed;
  for (const auto& r : records)
    if (!m.has_domain(r.domain)) m.domains.push_back(r.domain);

  for (const auto& d : m.domains) {
    std::vector<std::size_t> by_label[2];
    for (std::size_t i = 0; i < records.size(); ++i)
      if (records[i].domain == d) {
        if (records[i].label != kReal && records[i].label != kFake)
          throw DataError("record '" + records[i].id + "' has non-binary label");
        by_label[records[i].label].push_back(i);
      }
    const std::size_t n = by_label[0].size() + by_label[1].size();
    if (n < 10)
      throw DataError("domain '" + d + "' has " + std::to_string(n) +
                      " records; at least 10 are needed to split");
    for (int label : {kReal, kFake}) {
      Rng rng(derive_seed(seed, {fnv1a(d), static_cast<std::uint64_t>(label)}));
      auto& v = by_label[label];
      for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng() % i]);
    }
    // Interleave classes so every prefix is balanced to within one sample.
    std::vector<std::size_t> order;
    order.reserve(n);
    for (std::size_t i = 0; i < std::max(by_label[0].size(), by_label[1].size()); ++i)
      for (int label : {kReal, kFake})
        if (i < by_label[label].size()) order.push_back(by_label[label][i]);
    const auto t = split_targets(n);
    for (std::size_t k = 0; k < order.size(); ++k)
      records[order[k]].split = k < t.train ? Split::train
                                : k < t.train + t.val ? Split::val
                                                      : Split::test;
  }
  m.records = std::move(records);
  return m;
}

namespace {

constexpr const char* kManifestFormat = "crossfuse-manifest";
constexpr int kManifestVersion = 1;

}  // namespace

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  const fs::path dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
  fs::create_directories(dir / "images");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  json header{{"format", kManifestFormat},
              {"version", kManifestVersion},
              {"seed", manifest.seed},
              {"domains", manifest.domains},
              {"records", manifest.records.size()}};
  out << header.dump() << '\n';
  for (const auto& r : manifest.records) {
    const std::string rel = "images/" + r.id + ".png";
    write_png(r.image, dir / rel);
    json line{{"id", r.id},        {"image", rel},   {"caption", r.caption},
              {"label", r.label},  {"domain", r.domain}, {"split", to_string(r.split)}};
    out << line.dump() << '\n';
  }
  if (!out) throw std::runtime_error("failed writing manifest " + path.string());
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  const auto dir = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  DatasetManifest m;
  std::string line;
  std::size_t lineno = 0;
  std::size_t expected = 0;
  try {
    if (!std::getline(in, line)) throw ParseError("missing header", 1);
    ++lineno;
    const json header = json::parse(line);
    if (header.value("format", "") != kManifestFormat) throw ParseError("not a manifest", lineno);
    if (header.value("version", 0) != kManifestVersion)
      throw ParseError("unsupported manifest version " + header.value("version", json()).dump(),
                       lineno);
    m.seed = header.at("seed").get<std::uint64_t>();
    m.domains = header.at("domains").get<std::vector<std::string>>();
    expected = header.at("records").get<std::size_t>();
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      const json j = json::parse(line);
      SampleRecord r;
      r.id = j.at("id").get<std::string>();
      r.caption = j.at("caption").get<std::string>();
      if (r.caption.empty()) throw ParseError("empty caption", lineno);
      r.label = j.at("label").get<int>();
      if (r.label != kReal && r.label != kFake)
        throw ParseError("label must be 0 or 1, got " + std::to_string(r.label), lineno);
      r.domain = j.at("domain").get<std::string>();
      if (!m.has_domain(r.domain)) throw ParseError("unknown domain '" + r.domain + "'", lineno);
      r.split = parse_split(j.at("split").get<std::string>());
      r.image = read_png(dir / j.at("image").get<std::string>());
      m.records.push_back(std::move(r));
    }
  } catch (const ParseError&) {
    throw;
  } catch (const std::exception& e) {
    throw ParseError(e.what(), lineno);
  }
  if (m.records.size() != expected)
    throw ParseError("header announces " + std::to_string(expected) + " records, found " +
                         std::to_string(m.records.size()),
                     lineno);
  return m;
}

std::vector<SyntheticDomainSpec> domain_specs_from_json(const json& doc) {
  std::vector<SyntheticDomainSpec> specs;
  try {
    const json& arr = doc.is_object() ? doc.at("domains") : doc;
    if (!arr.is_array()) throw ConfigError("domain specs must be a JSON array");
    for (const auto& j : arr) {
      SyntheticDomainSpec s;
      s.id = j.at("id").get<std::string>();
      s.kind = parse_artifact_kind(j.at("kind").get<std::string>());
      s.strength = j.at("strength").get<double>();
      s.period = j.value("period", s.period);
      s.seed = j.value("seed", fnv1a(s.id));
      if (j.contains("captions")) {
        const auto& c = j.at("captions");
        s.captions.real = c.value("real", s.captions.real);
        s.captions.fake = c.value("fake", s.captions.fake);
        s.captions.fidelity = c.value("fidelity", s.captions.fidelity);
      }
      specs.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw ConfigError("domain specs: " + std::string(e.what()));
  }
  return specs;
}

json domain_spec_to_json(const SyntheticDomainSpec& s) {
  return {{"id", s.id},
          {"kind", to_string(s.kind)},
          {"strength", s.strength},
          {"period", s.period},
          {"seed", s.seed},
          {"captions", {{"real", s.captions.real}, {"fake", s.captions.fake}, {"fidelity", s.captions.fidelity}}}};
}

std::vector<SyntheticDomainSpec> load_domain_specs(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open domain spec file " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("domain spec file: " + std::string(e.what()));
  }
  return domain_specs_from_json(doc);
}

}  // namespace crossfuse
