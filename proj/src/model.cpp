#include "crossfuse/model.hpp"

#include "crossfuse/error.hpp"
#include "crossfuse/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace crossfuse {

using json = nlohmann::json;

namespace {

char modality_letter(Modality m) {
  switch (m) {
    case Modality::visual: return 'I';
    case Modality::text: return 'T';
    case Modality::frequency: return 'F';
  }
  return '?';
}

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace

std::string modality_letters(const std::vector<Modality>& mods) {
  std::string s;
  for (auto m : mods) s.push_back(modality_letter(m));
  return s;
}

std::vector<Modality> parse_modalities(const std::string& letters) {
  bool seen[3] = {false, false, false};
  for (char c : letters) {
    int idx = c == 'I' ? 0 : c == 'T' ? 1 : c == 'F' ? 2 : -1;
    if (idx < 0) throw ConfigError(std::string("unknown modality letter '") + c + "'");
    if (seen[idx]) throw ConfigError("modality '" + std::string(1, c) + "' listed twice");
    seen[idx] = true;
  }
  std::vector<Modality> out;
  for (int i = 0; i < 3; ++i)
    if (seen[i]) out.push_back(static_cast<Modality>(i));
  if (out.empty()) throw ConfigError("modality subset must be non-empty");
  return out;
}

ModelConfig ModelConfig::resolved() const {
  ModelConfig c = *this;
  if (c.image_size < 8) throw ConfigError("image_size must be >= 8");
  if (c.embed_dim < 1) throw ConfigError("embed_dim must be >= 1");
  if (c.heads < 1) throw ConfigError("heads must be >= 1");
  if (c.key_dim == 0 || c.value_dim == 0) {
    if (c.embed_dim % c.heads != 0)
      throw ConfigError("embed_dim " + std::to_string(c.embed_dim) + " is not divisible by " +
                        std::to_string(c.heads) + " heads; set key_dim/value_dim explicitly");
    if (c.key_dim == 0) c.key_dim = c.embed_dim / c.heads;
    if (c.value_dim == 0) c.value_dim = c.embed_dim / c.heads;
  }
  if (c.key_dim < 1 || c.value_dim < 1) throw ConfigError("key/value dims must be >= 1");
  if (c.modalities.empty()) throw ConfigError("modality subset must be non-empty");
  auto sorted = c.modalities;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
    throw ConfigError("duplicate modality in subset");
  c.modalities = sorted;
  if (c.aggregator == Aggregator::passthrough && c.modalities.size() != 1)
    throw ConfigError("passthrough aggregation takes exactly one modality");
  if (c.aggregator != Aggregator::passthrough && c.modalities.size() < 2)
    throw ConfigError("single-modality models must use the passthrough aggregator");
  return c;
}

FusionConfig ModelConfig::fusion_config() const {
  return {aggregator, embed_dim, heads, key_dim, value_dim, residual_norm,
          static_cast<int>(modalities.size())};
}

json ModelConfig::to_json() const {
  return {{"image_size", image_size},       {"embed_dim", embed_dim},
          {"heads", heads},                 {"key_dim", key_dim},
          {"value_dim", value_dim},         {"residual_norm", residual_norm},
          {"aggregator", to_string(aggregator)}, {"modalities", modality_letters(modalities)},
          {"freeze_visual", freeze_visual}, {"freeze_text", freeze_text},
          {"encoder_seed", encoder_seed},   {"init_seed", init_seed}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  try {
    c.image_size = j.value("image_size", c.image_size);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.heads = j.value("heads", c.heads);
    c.key_dim = j.value("key_dim", c.key_dim);
    c.value_dim = j.value("value_dim", c.value_dim);
    c.residual_norm = j.value("residual_norm", c.residual_norm);
    if (j.contains("aggregator")) c.aggregator = parse_aggregator(j.at("aggregator").get<std::string>());
    if (j.contains("modalities")) c.modalities = parse_modalities(j.at("modalities").get<std::string>());
    c.freeze_visual = j.value("freeze_visual", c.freeze_visual);
    c.freeze_text = j.value("freeze_text", c.freeze_text);
    c.encoder_seed = j.value("encoder_seed", c.encoder_seed);
    c.init_seed = j.value("init_seed", c.init_seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return c;
}

Model::Model(const ModelConfig& config) : config_(config.resolved()) {
  const int d = config_.embed_dim;
  visual_ = VisualEncoder({Modality::visual, "", d, config_.freeze_visual,
                           derive_seed(config_.encoder_seed, {0x715})},
                          config_.image_size);
  text_ = TextEncoder({Modality::text, "", d, config_.freeze_text,
                       derive_seed(config_.encoder_seed, {0x7e7})});
  const int side = config_.image_size;
  const Eigen::Index features = static_cast<Eigen::Index>(side) * side;
  normalizer_ = {side, side, Eigen::VectorXd::Zero(features), Eigen::VectorXd::Ones(features)};
  projection_ = Param(scaled_uniform(d, features, static_cast<double>(features), 3.0,
                                     derive_seed(config_.init_seed, {0xf0})));
  fusion_ = FusionHead(config_.fusion_config(), derive_seed(config_.init_seed, {0xf5}));
}

void Model::set_normalizer(FreqNormalizer n) {
  if (n.rows != config_.image_size || n.cols != config_.image_size)
    throw ShapeError("normalizer fitted for " + std::to_string(n.rows) + "x" +
                     std::to_string(n.cols) + " images, model uses " +
                     std::to_string(config_.image_size));
  normalizer_ = std::move(n);
}

FreqFeatureParams Model::freq_params() const { return {normalizer_, projection_.value, kLogEps}; }

bool Model::uses(Modality m) const {
  return std::find(config_.modalities.begin(), config_.modalities.end(), m) !=
         config_.modalities.end();
}

std::uint64_t Model::encoder_key() const {
  return derive_seed(config_.encoder_seed,
                     {static_cast<std::uint64_t>(config_.embed_dim),
                      static_cast<std::uint64_t>(config_.image_size),
                      static_cast<std::uint64_t>(visual_.frozen()),
                      static_cast<std::uint64_t>(text_.frozen())});
}

PreparedSample Model::prepare_gray(const Grid& gray, const std::string& caption, int label) const {
  if (gray.rows() != config_.image_size || gray.cols() != config_.image_size)
    throw ShapeError("prepared image must be " + std::to_string(config_.image_size) + " pixels square");
  PreparedSample s;
  s.gray = gray;
  s.label = label;
  s.text_bag = TextEncoder::bag(caption);
  s.freq_raw = freq_features(gray);
  if (visual_.frozen()) s.visual_embedding = visual_.forward(gray);
  if (text_.frozen()) s.text_embedding = text_.forward_bag(s.text_bag);
  s.encoder_key = encoder_key();
  return s;
}

PreparedSample Model::prepare(const SampleRecord& record) const {
  return prepare_gray(prepare_image(record.image, config_.image_size), record.caption, record.label);
}

struct Model::Tokens {
  std::vector<Eigen::MatrixXd> tokens;
  Eigen::MatrixXd freq_norm;  // B x features
  std::vector<VisualEncoder::Cache> visual_caches;
  int visual_slot = -1, text_slot = -1, freq_slot = -1;
};

Model::Tokens Model::build_tokens(std::span<const PreparedSample* const> batch,
                                  bool keep_caches) const {
  const auto bsz = static_cast<Eigen::Index>(batch.size());
  const Eigen::Index d = config_.embed_dim;
  Tokens t;
  const std::uint64_t key = encoder_key();
  for (Modality m : config_.modalities) {
    Eigen::MatrixXd tok(bsz, d);
    switch (m) {
      case Modality::visual: {
        t.visual_slot = static_cast<int>(t.tokens.size());
        const bool cached = visual_.frozen() && !keep_caches;
        if (keep_caches) t.visual_caches.resize(batch.size());
        for (Eigen::Index b = 0; b < bsz; ++b) {
          const auto& s = *batch[b];
          if (cached && s.encoder_key == key && s.visual_embedding.size() == d)
            tok.row(b) = s.visual_embedding.transpose();
          else
            tok.row(b) = visual_.forward(s.gray, keep_caches ? &t.visual_caches[b] : nullptr).transpose();
        }
        break;
      }
      case Modality::text: {
        t.text_slot = static_cast<int>(t.tokens.size());
        for (Eigen::Index b = 0; b < bsz; ++b) {
          const auto& s = *batch[b];
          if (text_.frozen() && s.encoder_key == key && s.text_embedding.size() == d)
            tok.row(b) = s.text_embedding.transpose();
          else
            tok.row(b) = text_.forward_bag(s.text_bag).transpose();
        }
        break;
      }
      case Modality::frequency: {
        t.freq_slot = static_cast<int>(t.tokens.size());
        t.freq_norm.resize(bsz, normalizer_.mean.size());
        for (Eigen::Index b = 0; b < bsz; ++b) {
          const auto& s = *batch[b];
          const Eigen::VectorXd raw = s.freq_raw.size() ? s.freq_raw : freq_features(s.gray);
          t.freq_norm.row(b) = normalizer_.apply(raw).transpose();
        }
        tok.noalias() = t.freq_norm * projection_.value.transpose();
        break;
      }
    }
    t.tokens.push_back(std::move(tok));
  }
  return t;
}

Eigen::VectorXd Model::logits(std::span<const PreparedSample* const> batch,
                              std::vector<AttentionTrace>* traces) const {
  if (batch.empty()) return {};
  const Tokens t = build_tokens(batch, false);
  return fusion_.forward(t.tokens, nullptr, traces);
}

std::vector<double> Model::probabilities(std::span<const PreparedSample* const> batch) const {
  const Eigen::VectorXd l = logits(batch);
  std::vector<double> p(static_cast<std::size_t>(l.size()));
  for (Eigen::Index i = 0; i < l.size(); ++i) p[i] = sigmoid(l(i));
  return p;
}

Prediction Model::forward(const SampleRecord& record) const {
  const PreparedSample s = prepare(record);
  const PreparedSample* ptr = &s;
  std::vector<AttentionTrace> traces;
  const Eigen::VectorXd l = logits(std::span(&ptr, 1), &traces);
  return {sigmoid(l(0)), std::move(traces.front())};
}

EmbeddingTriple Model::embed(const SampleRecord& record) const {
  return embed_all(record, visual_, text_, freq_params());
}

double Model::accumulate_gradients(std::span<const PreparedSample* const> batch) {
  if (batch.empty()) throw DataError("empty training batch");
  const bool train_visual = !visual_.frozen() && uses(Modality::visual);
  Tokens t = build_tokens(batch, train_visual);
  FusionHead::Cache cache;
  const Eigen::VectorXd l = fusion_.forward(t.tokens, &cache);
  const auto bsz = static_cast<double>(batch.size());
  double loss = 0;
  Eigen::VectorXd dl(l.size());
  for (Eigen::Index b = 0; b < l.size(); ++b) {
    const double y = batch[b]->label;
    loss += softplus(l(b)) - y * l(b);
    dl(b) = (sigmoid(l(b)) - y) / bsz;
  }
  loss /= bsz;

  auto fusion_params = fusion_.params();
  std::vector<Eigen::MatrixXd> fgrads;
  for (const auto& p : fusion_params) fgrads.push_back(Eigen::MatrixXd::Zero(p.param->value.rows(), p.param->value.cols()));
  const auto dtok = fusion_.backward(cache, dl, &fgrads);
  for (std::size_t i = 0; i < fusion_params.size(); ++i) fusion_params[i].param->grad += fgrads[i];

  if (t.freq_slot >= 0) projection_.grad.noalias() += dtok[t.freq_slot].transpose() * t.freq_norm;
  if (train_visual) {
    auto vp = visual_.params();
    std::vector<Eigen::MatrixXd> vg;
    for (const auto& p : vp) vg.push_back(Eigen::MatrixXd::Zero(p.param->value.rows(), p.param->value.cols()));
    for (std::size_t b = 0; b < batch.size(); ++b)
      visual_.backward(t.visual_caches[b], dtok[t.visual_slot].row(static_cast<Eigen::Index>(b)).transpose(), &vg, false);
    for (std::size_t i = 0; i < vp.size(); ++i) vp[i].param->grad += vg[i];
  }
  if (!text_.frozen() && t.text_slot >= 0) {
    auto tp = text_.params();
    std::vector<Eigen::MatrixXd> tg;
    for (const auto& p : tp) tg.push_back(Eigen::MatrixXd::Zero(p.param->value.rows(), p.param->value.cols()));
    for (std::size_t b = 0; b < batch.size(); ++b)
      text_.backward(batch[b]->text_bag, dtok[t.text_slot].row(static_cast<Eigen::Index>(b)).transpose(), tg);
    for (std::size_t i = 0; i < tp.size(); ++i) tp[i].param->grad += tg[i];
  }
  return loss;
}

double Model::input_gradient(const PreparedSample& sample, Grid& grad) const {
  PreparedSample s = sample;
  // Pixel-dependent features are recomputed from the (possibly perturbed) image.
  s.visual_embedding.resize(0);
  s.freq_raw.resize(0);
  const PreparedSample* ptr = &s;
  Tokens t = build_tokens(std::span(&ptr, 1), uses(Modality::visual));
  FusionHead::Cache cache;
  const Eigen::VectorXd l = fusion_.forward(t.tokens, &cache);
  const double y = s.label;
  const double loss = softplus(l(0)) - y * l(0);
  Eigen::VectorXd dl(1);
  dl(0) = sigmoid(l(0)) - y;
  const auto dtok = fusion_.backward(cache, dl, nullptr);
  grad = Grid::Zero(s.gray.rows(), s.gray.cols());
  if (t.visual_slot >= 0)
    grad += visual_.backward(t.visual_caches[0], dtok[t.visual_slot].row(0).transpose(), nullptr, true);
  if (t.freq_slot >= 0) {
    const Eigen::VectorXd dnorm = projection_.value.transpose() * dtok[t.freq_slot].row(0).transpose();
    const Eigen::VectorXd draw = (dnorm.array() / normalizer_.stddev.array()).matrix();
    grad += freq_features_backward(s.gray, draw);
  }
  return loss;
}

std::vector<NamedParam> Model::trainable_params() {
  std::vector<NamedParam> out;
  if (uses(Modality::visual) && !visual_.frozen())
    for (auto p : visual_.params()) out.push_back(p);
  if (uses(Modality::text) && !text_.frozen())
    for (auto p : text_.params()) out.push_back(p);
  if (uses(Modality::frequency)) out.push_back({"freq.projection", &projection_});
  for (auto p : fusion_.params()) out.push_back(p);
  return out;
}

std::vector<NamedParam> Model::all_params() {
  std::vector<NamedParam> out = visual_.params();
  for (auto p : text_.params()) out.push_back(p);
  out.push_back({"freq.projection", &projection_});
  for (auto p : fusion_.params()) out.push_back(p);
  return out;
}

void Model::zero_grad() {
  for (auto& p : all_params()) p.param->zero_grad();
}

namespace {

constexpr char kMagic[8] = {'X', 'F', 'U', 'S', 'E', 'C', 'K', 'P'};
constexpr std::uint32_t kCheckpointVersion = 1;

void check_config_match(const ModelConfig& stored, const ModelConfig& want) {
  const ModelConfig w = want.resolved();
  auto fail = [](const std::string& field, const std::string& a, const std::string& b) {
    throw ConfigError("checkpoint " + field + " is " + a + " but " + b + " was requested");
  };
  if (stored.heads != w.heads) fail("heads", std::to_string(stored.heads), std::to_string(w.heads));
  if (stored.embed_dim != w.embed_dim)
    fail("embed_dim", std::to_string(stored.embed_dim), std::to_string(w.embed_dim));
  if (stored.key_dim != w.key_dim) fail("key_dim", std::to_string(stored.key_dim), std::to_string(w.key_dim));
  if (stored.value_dim != w.value_dim)
    fail("value_dim", std::to_string(stored.value_dim), std::to_string(w.value_dim));
  if (stored.image_size != w.image_size)
    fail("image_size", std::to_string(stored.image_size), std::to_string(w.image_size));
  if (stored.aggregator != w.aggregator) fail("aggregator", to_string(stored.aggregator), to_string(w.aggregator));
  if (stored.modalities != w.modalities)
    fail("modalities", modality_letters(stored.modalities), modality_letters(w.modalities));
  if (stored.residual_norm != w.residual_norm) fail("residual_norm", "different", "another");
}

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof kMagic);
  BinaryWriter w(out);
  w.u32(kCheckpointVersion);
  w.str(model.config().to_json().dump());
  w.str(model.source_domain());
  const auto& n = model.normalizer();
  w.u32(static_cast<std::uint32_t>(n.rows));
  w.u32(static_cast<std::uint32_t>(n.cols));
  w.matrix(n.mean);
  w.matrix(n.stddev);
  model.visual().save(w);
  model.text().save(w);
  w.matrix(model.freq_projection().value);
  model.fusion().save(w);
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  char magic[8] = {};
  in.read(magic, sizeof magic);
  if (in.gcount() != sizeof magic || !std::equal(magic, magic + 8, kMagic))
    throw VersionError(path.string() + " is not a checkpoint (bad magic)");
  BinaryReader r(in);
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw VersionError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  ModelConfig cfg;
  try {
    cfg = ModelConfig::from_json(json::parse(r.str())).resolved();
  } catch (const json::exception& e) {
    throw VersionError(std::string("corrupt checkpoint config: ") + e.what());
  }
  if (expected) check_config_match(cfg, *expected);
  Model m;
  m.config_ = cfg;
  m.source_domain_ = r.str();
  FreqNormalizer n;
  n.rows = static_cast<int>(r.u32());
  n.cols = static_cast<int>(r.u32());
  n.mean = r.matrix();
  n.stddev = r.matrix();
  m.normalizer_ = std::move(n);
  m.visual_ = VisualEncoder::load(r);
  m.text_ = TextEncoder::load(r);
  m.projection_ = Param(r.matrix());
  m.fusion_ = FusionHead::load(r, cfg.fusion_config());
  if (m.projection_.value.rows() != cfg.embed_dim ||
      m.projection_.value.cols() != m.normalizer_.mean.size())
    throw VersionError("checkpoint frequency projection does not match its config");
  return m;
}

}  // namespace crossfuse
