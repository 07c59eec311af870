#include "crossfuse/train.hpp"

#include "crossfuse/error.hpp"
#include "crossfuse/rng.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

namespace crossfuse {

using json = nlohmann::json;

double bce_loss(double p, int y) {
  constexpr double lo = 1e-12;
  const double q = std::clamp(p, lo, 1.0 - lo);
  return y == 1 ? -std::log(q) : -std::log1p(-q);
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(learning_rate >= 0) || !std::isfinite(learning_rate))
    throw ConfigError("learning_rate must be finite and >= 0");
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("Adam betas must be in [0, 1)");
  if (!(adam_eps > 0)) throw ConfigError("adam_eps must be > 0");
  if (!(clip_norm >= 0)) throw ConfigError("clip_norm must be >= 0");
}

json TrainConfig::to_json() const {
  return {{"batch_size", batch_size}, {"learning_rate", learning_rate}, {"max_epochs", max_epochs},
          {"patience", patience},     {"beta1", beta1},                 {"beta2", beta2},
          {"adam_eps", adam_eps},     {"clip_norm", clip_norm},         {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  static const std::set<std::string> known{"batch_size", "learning_rate", "max_epochs",
                                           "patience",   "beta1",         "beta2",
                                           "adam_eps",   "clip_norm",     "seed",
                                           "optimizer",  "loss"};
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw ConfigError("unknown train config key '" + k + "'");
  TrainConfig c;
  try {
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.patience = j.value("patience", c.patience);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.seed = j.value("seed", c.seed);
    if (j.value("optimizer", std::string("adam")) != "adam") throw ConfigError("only the adam optimizer is supported");
    if (j.value("loss", std::string("bce")) != "bce") throw ConfigError("only the bce loss is supported");
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open train config " + path.string());
  try {
    return from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ConfigError("train config " + path.string() + ": " + e.what());
  }
}

json TrainLog::to_json() const {
  return {{"train_loss", train_loss}, {"val_loss", val_loss},     {"val_f1", val_f1},
          {"best_epoch", best_epoch}, {"wall_seconds", wall_seconds}};
}

bool TrainLog::same_trajectory(const TrainLog& o) const {
  return train_loss == o.train_loss && val_loss == o.val_loss && val_f1 == o.val_f1 &&
         best_epoch == o.best_epoch;
}

Adam::Adam(std::vector<NamedParam> params, const TrainConfig& config)
    : params_(std::move(params)),
      lr_(config.learning_rate),
      b1_(config.beta1),
      b2_(config.beta2),
      eps_(config.adam_eps) {
  for (const auto& p : params_) {
    m_.push_back(Eigen::MatrixXd::Zero(p.param->value.rows(), p.param->value.cols()));
    v_.push_back(m_.back());
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& g = params_[i].param->grad;
    m_[i] = b1_ * m_[i] + (1 - b1_) * g;
    v_[i] = b2_ * v_[i] + (1 - b2_) * g.cwiseProduct(g);
    params_[i].param->value.array() -=
        lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
}

const PreparedSample& PreparedCache::get(const Model& model, const SampleRecord& record) {
  auto key = std::make_pair(model.encoder_key(), record.id);
  auto it = entries_.find(key);
  if (it == entries_.end())
    it = entries_.emplace(key, std::make_unique<PreparedSample>(model.prepare(record))).first;
  return *it->second;
}

std::vector<const PreparedSample*> PreparedCache::get_all(const Model& model,
                                                          std::span<const SampleRecord* const> records) {
  std::vector<const PreparedSample*> out;
  out.reserve(records.size());
  for (const auto* r : records) out.push_back(&get(model, *r));
  return out;
}

EvalResult evaluate_prepared(const Model& model, std::span<const PreparedSample* const> samples,
                             int batch_size) {
  if (samples.empty()) throw DataError("evaluation set is empty");
  EvalResult r;
  std::vector<int> labels;
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto len = std::min<std::size_t>(static_cast<std::size_t>(batch_size), samples.size() - start);
    const auto batch = samples.subspan(start, len);
    const Eigen::VectorXd l = model.logits(batch);
    for (std::size_t i = 0; i < len; ++i) {
      const double p = sigmoid(l(static_cast<Eigen::Index>(i)));
      r.probabilities.push_back(p);
      labels.push_back(batch[i]->label);
      r.loss += bce_loss(p, batch[i]->label);
    }
  }
  r.loss /= static_cast<double>(samples.size());
  r.metrics = compute_metrics_prob(r.probabilities, labels);
  return r;
}

namespace {

void clip_gradients(std::vector<NamedParam>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params) sq += p.param->grad.squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm)
    for (auto& p : params) p.param->grad *= max_norm / norm;
}

}  // namespace

TrainResult train_model(const DatasetManifest& manifest, const std::string& source, Model init,
                        const TrainConfig& config, AccessLog* log, PreparedCache* cache) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  if (!manifest.has_domain(source)) throw DataError("source domain '" + source + "' is not in the manifest");
  const auto train_recs = manifest.select(source, Split::train, log);
  const auto val_recs = manifest.select(source, Split::val, log);
  if (train_recs.empty()) throw DataError("source domain '" + source + "' has no train split");
  if (val_recs.empty()) throw DataError("source domain '" + source + "' has no val split");

  PreparedCache local;
  PreparedCache& pc = cache ? *cache : local;
  Model model = std::move(init);
  model.set_source_domain(source);
  const auto train = pc.get_all(model, train_recs);
  const auto val = pc.get_all(model, val_recs);

  if (model.uses(Modality::frequency)) {
    std::vector<Eigen::VectorXd> feats;
    feats.reserve(train.size());
    for (const auto* s : train) feats.push_back(s->freq_raw);
    model.set_normalizer(fit_freq_normalizer_features(feats, model.config().image_size,
                                                      model.config().image_size));
  }

  auto params = model.trainable_params();
  Adam adam(params, config);
  TrainLog tl;
  Model best = model;
  double best_val = std::numeric_limits<double>::infinity();
  int since_best = 0;
  std::vector<std::size_t> order(train.size());
  std::vector<const PreparedSample*> batch;

  for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(config.seed, {fnv1a(source), static_cast<std::uint64_t>(epoch)}));
    for (std::size_t i = order.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(order[i - 1], order[pick(rng)]);
    }
    double epoch_loss = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const auto end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(train[order[i]]);
      model.zero_grad();
      const double loss = model.accumulate_gradients(batch);
      if (!std::isfinite(loss))
        throw DivergenceError("non-finite training loss at epoch " + std::to_string(epoch) +
                              ", batch starting at " + std::to_string(start) + " (source " + source +
                              ", lr " + std::to_string(config.learning_rate) + ")");
      if (config.clip_norm > 0) clip_gradients(params, config.clip_norm);
      adam.step();
      epoch_loss += loss * static_cast<double>(batch.size());
    }
    tl.train_loss.push_back(epoch_loss / static_cast<double>(train.size()));
    const EvalResult ev = evaluate_prepared(model, val);
    if (!std::isfinite(ev.loss))
      throw DivergenceError("non-finite validation loss at epoch " + std::to_string(epoch) + " (source " + source + ")");
    tl.val_loss.push_back(ev.loss);
    tl.val_f1.push_back(ev.metrics.f1);
    if (ev.loss < best_val) {
      best_val = ev.loss;
      best = model;
      tl.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  best.zero_grad();
  tl.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {std::move(best), std::move(tl)};
}

}  // namespace crossfuse
