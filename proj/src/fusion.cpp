#include "crossfuse/fusion.hpp"

#include "crossfuse/error.hpp"
#include "crossfuse/rng.hpp"

#include <cmath>

namespace crossfuse {

std::string to_string(Aggregator a) {
  switch (a) {
    case Aggregator::cross_attention: return "cross-attention";
    case Aggregator::add: return "add";
    case Aggregator::concat: return "concat";
    case Aggregator::avgpool: return "avgpool";
    case Aggregator::learned_weighted: return "learned-weighted";
    case Aggregator::passthrough: return "passthrough";
  }
  return "?";
}

Aggregator parse_aggregator(const std::string& s) {
  for (auto a : {Aggregator::cross_attention, Aggregator::add, Aggregator::concat,
                 Aggregator::avgpool, Aggregator::learned_weighted, Aggregator::passthrough})
    if (to_string(a) == s) return a;
  throw ConfigError("unknown aggregation method '" + s + "'");
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

AttentionParams AttentionParams::init(int embed_dim, int heads, int key_dim, int value_dim,
                                      std::uint64_t seed) {
  if (heads < 1) throw ConfigError("attention needs at least one head");
  if (embed_dim < 1 || key_dim < 1 || value_dim < 1)
    throw ConfigError("attention dimensions must be >= 1");
  AttentionParams p;
  p.embed_dim = embed_dim;
  p.heads = heads;
  p.key_dim = key_dim;
  p.value_dim = value_dim;
  for (int h = 0; h < heads; ++h) {
    const auto hs = static_cast<std::uint64_t>(h);
    p.wq.emplace_back(scaled_uniform(embed_dim, key_dim, embed_dim, 3.0, derive_seed(seed, {1, hs})));
    p.wk.emplace_back(scaled_uniform(embed_dim, key_dim, embed_dim, 3.0, derive_seed(seed, {2, hs})));
    p.wv.emplace_back(scaled_uniform(embed_dim, value_dim, embed_dim, 3.0, derive_seed(seed, {3, hs})));
  }
  p.wo = Param(scaled_uniform(heads * value_dim, embed_dim, heads * value_dim, 3.0,
                              derive_seed(seed, {4})));
  return p;
}

void AttentionParams::validate() const {
  if (heads < 1) throw ShapeError("attention needs at least one head");
  auto check = [](const Param& p, int r, int c, const char* what) {
    if (p.value.rows() != r || p.value.cols() != c)
      throw ShapeError(std::string(what) + ": expected " + std::to_string(r) + "x" +
                       std::to_string(c) + ", got " + std::to_string(p.value.rows()) + "x" +
                       std::to_string(p.value.cols()));
  };
  if (wq.size() != static_cast<std::size_t>(heads) || wk.size() != wq.size() ||
      wv.size() != wq.size())
    throw ShapeError("attention: per-head weight count differs from head count");
  for (int h = 0; h < heads; ++h) {
    check(wq[h], embed_dim, key_dim, "W^Q");
    check(wk[h], embed_dim, key_dim, "W^K");
    check(wv[h], embed_dim, value_dim, "W^V");
  }
  check(wo, heads * value_dim, embed_dim, "W^O");
}

QKV project_qkv(const Eigen::MatrixXd& tokens, const AttentionParams& params, int head) {
  if (head < 0 || head >= params.heads) throw ShapeError("project_qkv: head index out of range");
  if (tokens.cols() != params.wq[head].value.rows() ||
      tokens.cols() != params.wk[head].value.rows() || tokens.cols() != params.wv[head].value.rows())
    throw ShapeError("project_qkv: token width " + std::to_string(tokens.cols()) +
                     " does not match projection input " +
                     std::to_string(params.wq[head].value.rows()));
  return {tokens * params.wq[head].value, tokens * params.wk[head].value,
          tokens * params.wv[head].value};
}

namespace {

// Row softmax of the n x n score block, written in place.
void softmax_rows(Eigen::Ref<Eigen::MatrixXd> s) {
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const double mx = s.row(i).maxCoeff();
    s.row(i) = (s.row(i).array() - mx).exp();
    s.row(i) /= s.row(i).sum();
  }
}

}  // namespace

AttentionOutput attention(const Eigen::MatrixXd& q, const Eigen::MatrixXd& k,
                          const Eigen::MatrixXd& v, int key_dim) {
  if (key_dim <= 0) throw ShapeError("attention: d_k must be > 0");
  if (q.cols() != k.cols() || k.rows() != v.rows())
    throw ShapeError("attention: Q/K/V shapes are inconsistent");
  Eigen::MatrixXd w = q * k.transpose() / std::sqrt(static_cast<double>(key_dim));
  softmax_rows(w);
  return {w * v, w};
}

MultiHeadOutput multi_head(const Eigen::MatrixXd& tokens, const AttentionParams& params) {
  params.validate();
  const Eigen::Index n = tokens.rows();
  Eigen::MatrixXd concat(n, params.heads * params.value_dim);
  MultiHeadOutput out;
  for (int h = 0; h < params.heads; ++h) {
    const QKV qkv = project_qkv(tokens, params, h);
    AttentionOutput a = attention(qkv.q, qkv.k, qkv.v, params.key_dim);
    concat.middleCols(h * params.value_dim, params.value_dim) = a.output;
    out.trace.head_weights.push_back(std::move(a.weights));
  }
  out.output = concat * params.wo.value;
  return out;
}

Eigen::VectorXd aggregate_mean(const Eigen::MatrixXd& mh, Eigen::Index expected_rows) {
  if (mh.rows() != expected_rows)
    throw ShapeError("aggregate_mean: expected " + std::to_string(expected_rows) + " rows, got " +
                     std::to_string(mh.rows()));
  return mh.colwise().mean().transpose();
}

ClassifierHead ClassifierHead::init(int in_dim, std::uint64_t seed) {
  return {Param(scaled_uniform(in_dim, 1, in_dim, 3.0, seed)), Param(Eigen::MatrixXd::Zero(1, 1))};
}

double ClassifierHead::logit(const Eigen::VectorXd& z) const {
  if (z.size() != weight.value.rows())
    throw ShapeError("classifier: expected width " + std::to_string(weight.value.rows()) +
                     ", got " + std::to_string(z.size()));
  return z.dot(weight.value.col(0)) + bias.value(0, 0);
}

double classify(const Eigen::VectorXd& z, const ClassifierHead& head) {
  return sigmoid(head.logit(z));
}

Eigen::VectorXd baseline_aggregate(const EmbeddingTriple& t, Aggregator method,
                                   const Eigen::VectorXd* mix_logits) {
  if (t.visual.size() != t.text.size() || t.text.size() != t.frequency.size())
    throw ShapeError("baseline_aggregate: embeddings differ in width");
  switch (method) {
    case Aggregator::add: return t.visual + t.text + t.frequency;
    case Aggregator::avgpool: return (t.visual + t.text + t.frequency) / 3.0;
    case Aggregator::concat: {
      Eigen::VectorXd z(3 * t.visual.size());
      z << t.visual, t.text, t.frequency;
      return z;
    }
    case Aggregator::learned_weighted: {
      if (!mix_logits || mix_logits->size() != 3)
        throw ConfigError("learned-weighted aggregation needs a weight vector of size 3");
      Eigen::VectorXd s = (mix_logits->array() - mix_logits->maxCoeff()).exp();
      s /= s.sum();
      return s(0) * t.visual + s(1) * t.text + s(2) * t.frequency;
    }
    default: throw ConfigError("baseline_aggregate: unsupported method " + to_string(method));
  }
}

FusionHead::FusionHead(const FusionConfig& config, std::uint64_t seed) : config_(config) {
  if (config_.tokens < 1) throw ConfigError("fusion needs at least one token");
  if (config_.aggregator == Aggregator::passthrough && config_.tokens != 1)
    throw ConfigError("passthrough fusion takes exactly one modality");
  if (config_.aggregator != Aggregator::passthrough && config_.tokens < 2)
    throw ConfigError(to_string(config_.aggregator) + " fusion needs at least two modalities");
  if (config_.aggregator == Aggregator::cross_attention)
    attn_ = AttentionParams::init(config_.embed_dim, config_.heads, config_.key_dim,
                                  config_.value_dim, derive_seed(seed, {0xa7}));
  if (config_.aggregator == Aggregator::learned_weighted)
    mix_ = Param(Eigen::MatrixXd::Zero(config_.tokens, 1));
  head_ = ClassifierHead::init(output_dim(), derive_seed(seed, {0xc1}));
}

int FusionHead::output_dim() const {
  return config_.aggregator == Aggregator::concat ? config_.tokens * config_.embed_dim
                                                  : config_.embed_dim;
}

std::vector<NamedParam> FusionHead::params() {
  std::vector<NamedParam> out;
  if (config_.aggregator == Aggregator::cross_attention) {
    for (int h = 0; h < attn_.heads; ++h) out.push_back({"attn.wq" + std::to_string(h), &attn_.wq[h]});
    for (int h = 0; h < attn_.heads; ++h) out.push_back({"attn.wk" + std::to_string(h), &attn_.wk[h]});
    for (int h = 0; h < attn_.heads; ++h) out.push_back({"attn.wv" + std::to_string(h), &attn_.wv[h]});
    out.push_back({"attn.wo", &attn_.wo});
  }
  if (config_.aggregator == Aggregator::learned_weighted) out.push_back({"mix", &mix_});
  out.push_back({"head.w", &head_.weight});
  out.push_back({"head.b", &head_.bias});
  return out;
}

namespace {

constexpr double kNormEps = 1e-5;

}  // namespace

Eigen::VectorXd FusionHead::forward(const std::vector<Eigen::MatrixXd>& tokens, Cache* cache,
                                    std::vector<AttentionTrace>* traces) const {
  const auto n = static_cast<Eigen::Index>(config_.tokens);
  if (static_cast<Eigen::Index>(tokens.size()) != n)
    throw ShapeError("fusion: expected " + std::to_string(n) + " token matrices, got " +
                     std::to_string(tokens.size()));
  const Eigen::Index batch = tokens.front().rows();
  const Eigen::Index d = config_.embed_dim;
  for (const auto& t : tokens)
    if (t.rows() != batch || t.cols() != d)
      throw ShapeError("fusion: token matrix shape mismatch (expected width " + std::to_string(d) +
                       ")");

  Eigen::MatrixXd z(batch, output_dim());
  if (traces) traces->assign(static_cast<std::size_t>(batch), AttentionTrace{});
  Cache local;
  Cache& c = cache ? *cache : local;
  c.tokens = tokens;

  switch (config_.aggregator) {
    case Aggregator::cross_attention: {
      const int heads = attn_.heads;
      const int dv = attn_.value_dim;
      const double scale = 1.0 / std::sqrt(static_cast<double>(attn_.key_dim));
      c.x.resize(batch * n, d);
      for (Eigen::Index b = 0; b < batch; ++b)
        for (Eigen::Index m = 0; m < n; ++m) c.x.row(b * n + m) = tokens[m].row(b);
      c.q.resize(heads);
      c.k.resize(heads);
      c.v.resize(heads);
      c.attn.resize(heads);
      c.concat.resize(batch * n, heads * dv);
      for (int h = 0; h < heads; ++h) {
        c.q[h] = c.x * attn_.wq[h].value;
        c.k[h] = c.x * attn_.wk[h].value;
        c.v[h] = c.x * attn_.wv[h].value;
        c.attn[h].resize(batch * n, n);
        for (Eigen::Index b = 0; b < batch; ++b) {
          auto w = c.attn[h].middleRows(b * n, n);
          w.noalias() = c.q[h].middleRows(b * n, n) * c.k[h].middleRows(b * n, n).transpose();
          w *= scale;
          softmax_rows(w);
          c.concat.block(b * n, h * dv, n, dv).noalias() = w * c.v[h].middleRows(b * n, n);
          if (traces) (*traces)[b].head_weights.push_back(w);
        }
      }
      Eigen::MatrixXd y = c.concat * attn_.wo.value;
      if (config_.residual_norm) {
        y += c.x;
        c.inv_std.resize(y.rows());
        for (Eigen::Index r = 0; r < y.rows(); ++r) {
          const double mu = y.row(r).mean();
          y.row(r).array() -= mu;
          const double var = y.row(r).squaredNorm() / static_cast<double>(d);
          c.inv_std(r) = 1.0 / std::sqrt(var + kNormEps);
          y.row(r) *= c.inv_std(r);
        }
        c.normed = y;
      }
      for (Eigen::Index b = 0; b < batch; ++b) z.row(b) = y.middleRows(b * n, n).colwise().mean();
      break;
    }
    case Aggregator::add:
    case Aggregator::avgpool:
      z = tokens[0];
      for (Eigen::Index m = 1; m < n; ++m) z += tokens[m];
      if (config_.aggregator == Aggregator::avgpool) z /= static_cast<double>(n);
      break;
    case Aggregator::concat:
      for (Eigen::Index m = 0; m < n; ++m) z.middleCols(m * d, d) = tokens[m];
      break;
    case Aggregator::learned_weighted: {
      Eigen::VectorXd s = (mix_.value.col(0).array() - mix_.value.maxCoeff()).exp();
      s /= s.sum();
      c.mix = s;
      z = s(0) * tokens[0];
      for (Eigen::Index m = 1; m < n; ++m) z += s(m) * tokens[m];
      break;
    }
    case Aggregator::passthrough:
      z = tokens[0];
      break;
  }
  c.z = z;
  if (traces)
    for (Eigen::Index b = 0; b < batch; ++b) (*traces)[b].aggregated = z.row(b).transpose();
  return (z * head_.weight.value).col(0).array() + head_.bias.value(0, 0);
}

std::vector<Eigen::MatrixXd> FusionHead::backward(const Cache& c, const Eigen::VectorXd& dlogits,
                                                  std::vector<Eigen::MatrixXd>* grads) const {
  const auto n = static_cast<Eigen::Index>(config_.tokens);
  const Eigen::Index batch = c.z.rows();
  const Eigen::Index d = config_.embed_dim;
  std::vector<Eigen::MatrixXd> dtokens(n, Eigen::MatrixXd::Zero(batch, d));

  // Gradient slots follow params() order; the classifier is always last.
  std::size_t slot = 0;
  auto add_grad = [&](const Eigen::MatrixXd& g) {
    if (grads) (*grads)[slot] += g;
    ++slot;
  };

  const Eigen::MatrixXd dz = dlogits * head_.weight.value.transpose();

  switch (config_.aggregator) {
    case Aggregator::cross_attention: {
      const int heads = attn_.heads;
      const int dv = attn_.value_dim;
      const double scale = 1.0 / std::sqrt(static_cast<double>(attn_.key_dim));
      Eigen::MatrixXd dy(batch * n, d);
      for (Eigen::Index b = 0; b < batch; ++b)
        for (Eigen::Index m = 0; m < n; ++m) dy.row(b * n + m) = dz.row(b) / static_cast<double>(n);
      Eigen::MatrixXd dx = Eigen::MatrixXd::Zero(batch * n, d);
      if (config_.residual_norm) {
        Eigen::MatrixXd dr(batch * n, d);
        for (Eigen::Index r = 0; r < dy.rows(); ++r) {
          const auto xhat = c.normed.row(r);
          const double mean_dy = dy.row(r).mean();
          const double mean_dyx = dy.row(r).dot(xhat) / static_cast<double>(d);
          dr.row(r) = c.inv_std(r) * (dy.row(r).array() - mean_dy - xhat.array() * mean_dyx).matrix();
        }
        dx += dr;
        dy = std::move(dr);
      }
      const Eigen::MatrixXd dconcat = dy * attn_.wo.value.transpose();
      std::vector<Eigen::MatrixXd> dwq(heads), dwk(heads), dwv(heads);
      for (int h = 0; h < heads; ++h) {
        Eigen::MatrixXd dq(batch * n, attn_.key_dim), dk(batch * n, attn_.key_dim),
            dvv(batch * n, dv);
        for (Eigen::Index b = 0; b < batch; ++b) {
          const auto a = c.attn[h].middleRows(b * n, n);
          const auto dh = dconcat.block(b * n, h * dv, n, dv);
          const Eigen::MatrixXd da = dh * c.v[h].middleRows(b * n, n).transpose();
          dvv.middleRows(b * n, n).noalias() = a.transpose() * dh;
          Eigen::MatrixXd ds(n, n);
          for (Eigen::Index i = 0; i < n; ++i) {
            const double inner = a.row(i).dot(da.row(i));
            ds.row(i) = a.row(i).array() * (da.row(i).array() - inner);
          }
          ds *= scale;
          dq.middleRows(b * n, n).noalias() = ds * c.k[h].middleRows(b * n, n);
          dk.middleRows(b * n, n).noalias() = ds.transpose() * c.q[h].middleRows(b * n, n);
        }
        if (grads) {
          dwq[h] = c.x.transpose() * dq;
          dwk[h] = c.x.transpose() * dk;
          dwv[h] = c.x.transpose() * dvv;
        }
        dx.noalias() += dq * attn_.wq[h].value.transpose();
        dx.noalias() += dk * attn_.wk[h].value.transpose();
        dx.noalias() += dvv * attn_.wv[h].value.transpose();
      }
      if (grads) {
        for (int h = 0; h < heads; ++h) add_grad(dwq[h]);
        for (int h = 0; h < heads; ++h) add_grad(dwk[h]);
        for (int h = 0; h < heads; ++h) add_grad(dwv[h]);
        add_grad(c.concat.transpose() * dy);
      } else {
        slot += 3 * heads + 1;
      }
      for (Eigen::Index b = 0; b < batch; ++b)
        for (Eigen::Index m = 0; m < n; ++m) dtokens[m].row(b) = dx.row(b * n + m);
      break;
    }
    case Aggregator::add:
    case Aggregator::avgpool: {
      const double f = config_.aggregator == Aggregator::avgpool ? 1.0 / static_cast<double>(n) : 1.0;
      for (auto& t : dtokens) t = f * dz;
      break;
    }
    case Aggregator::concat:
      for (Eigen::Index m = 0; m < n; ++m) dtokens[m] = dz.middleCols(m * d, d);
      break;
    case Aggregator::learned_weighted: {
      const Eigen::VectorXd& s = c.mix;
      Eigen::VectorXd g(n);
      for (Eigen::Index m = 0; m < n; ++m) {
        dtokens[m] = s(m) * dz;
        g(m) = dz.cwiseProduct(c.tokens[m]).sum();
      }
      const double inner = s.dot(g);
      add_grad((s.array() * (g.array() - inner)).matrix());
      break;
    }
    case Aggregator::passthrough:
      dtokens[0] = dz;
      break;
  }
  add_grad(c.z.transpose() * dlogits);
  add_grad(Eigen::MatrixXd::Constant(1, 1, dlogits.sum()));
  return dtokens;
}

void FusionHead::save(BinaryWriter& w) const {
  if (config_.aggregator == Aggregator::cross_attention) {
    for (int h = 0; h < attn_.heads; ++h) {
      w.matrix(attn_.wq[h].value);
      w.matrix(attn_.wk[h].value);
      w.matrix(attn_.wv[h].value);
    }
    w.matrix(attn_.wo.value);
  }
  if (config_.aggregator == Aggregator::learned_weighted) w.matrix(mix_.value);
  w.matrix(head_.weight.value);
  w.matrix(head_.bias.value);
}

FusionHead FusionHead::load(BinaryReader& r, const FusionConfig& config) {
  FusionHead f;
  f.config_ = config;
  if (config.aggregator == Aggregator::cross_attention) {
    f.attn_.embed_dim = config.embed_dim;
    f.attn_.heads = config.heads;
    f.attn_.key_dim = config.key_dim;
    f.attn_.value_dim = config.value_dim;
    for (int h = 0; h < config.heads; ++h) {
      f.attn_.wq.emplace_back(r.matrix());
      f.attn_.wk.emplace_back(r.matrix());
      f.attn_.wv.emplace_back(r.matrix());
    }
    f.attn_.wo = Param(r.matrix());
    try {
      f.attn_.validate();
    } catch (const ShapeError& e) {
      throw VersionError(std::string("checkpoint attention block: ") + e.what());
    }
  }
  if (config.aggregator == Aggregator::learned_weighted) f.mix_ = Param(r.matrix());
  f.head_.weight = Param(r.matrix());
  f.head_.bias = Param(r.matrix());
  if (f.head_.weight.value.rows() != f.output_dim())
    throw VersionError("checkpoint classifier width does not match its config");
  return f;
}

}  // namespace crossfuse
