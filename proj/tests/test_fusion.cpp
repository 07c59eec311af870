#include "oracles.hpp"

#include "crossfuse/error.hpp"
#include "crossfuse/fusion.hpp"

#include <doctest.h>

using namespace crossfuse;

namespace {

std::vector<Eigen::MatrixXd> values(const std::vector<Param>& ps) {
  std::vector<Eigen::MatrixXd> out;
  for (const auto& p : ps) out.push_back(p.value);
  return out;
}

double max_abs(const Eigen::MatrixXd& m) { return m.size() ? m.cwiseAbs().maxCoeff() : 0.0; }

}  // namespace

TEST_CASE("project_qkv: null, identity and matmul oracle") {
  std::mt19937_64 rng(1);
  auto p = AttentionParams::init(4, 1, 4, 4, 7);
  const QKV zero = project_qkv(Eigen::MatrixXd::Zero(3, 4), p, 0);
  CHECK(zero.q.isZero(0));
  CHECK(zero.k.isZero(0));
  CHECK(zero.v.isZero(0));

  p.wq[0].value = Eigen::MatrixXd::Identity(4, 4);
  const Eigen::MatrixXd e = oracle::random_matrix(3, 4, rng);
  CHECK(project_qkv(e, p, 0).q == e);

  auto p2 = AttentionParams::init(4, 2, 2, 2, 8);
  const QKV qkv = project_qkv(e, p2, 1);
  CHECK(max_abs(qkv.q - oracle::matmul(e, p2.wq[1].value)) < 1e-10);
  CHECK(max_abs(qkv.k - oracle::matmul(e, p2.wk[1].value)) < 1e-10);
  CHECK(max_abs(qkv.v - oracle::matmul(e, p2.wv[1].value)) < 1e-10);
  CHECK_THROWS_AS(project_qkv(e, p2, 2), ShapeError);
  CHECK_THROWS_AS(project_qkv(Eigen::MatrixXd::Zero(3, 5), p2, 0), ShapeError);
}

TEST_CASE("attention: identical tokens give uniform weights") {
  std::mt19937_64 rng(2);
  const Eigen::RowVectorXd row = oracle::random_matrix(1, 4, rng);
  const Eigen::MatrixXd q = row.replicate(3, 1);
  const Eigen::MatrixXd v = oracle::random_matrix(3, 2, rng);
  const auto out = attention(q, q, v, 4);
  CHECK(max_abs(out.weights - Eigen::MatrixXd::Constant(3, 3, 1.0 / 3)) < 1e-15);
  for (int i = 0; i < 3; ++i) CHECK(max_abs(out.output.row(i) - v.colwise().mean()) < 1e-15);
}

TEST_CASE("attention: a dominant key takes all the weight") {
  Eigen::MatrixXd q = Eigen::MatrixXd::Ones(3, 2);
  Eigen::MatrixXd k = Eigen::MatrixXd::Zero(3, 2);
  k.row(1) << 200, 200;
  const Eigen::MatrixXd v = (Eigen::MatrixXd(3, 2) << 1, 2, 3, 4, 5, 6).finished();
  const auto out = attention(q, k, v, 2);
  for (int i = 0; i < 3; ++i) {
    CHECK(out.weights(i, 1) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(max_abs(out.output.row(i) - v.row(1)) < 1e-10);
  }
}

TEST_CASE("attention: scalar-loop oracle and row-stochastic weights") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::MatrixXd q = oracle::random_matrix(3, 2, rng, -3, 3), k = oracle::random_matrix(3, 2, rng, -3, 3);
    const Eigen::MatrixXd v = oracle::random_matrix(3, 3, rng);
    Eigen::MatrixXd w, o;
    oracle::attention(q, k, v, 2, w, o);
    const auto out = attention(q, k, v, 2);
    CHECK(max_abs(out.weights - w) < 1e-8);
    CHECK(max_abs(out.output - o) < 1e-8);
    CHECK(out.weights.minCoeff() >= 0);
    CHECK(max_abs(out.weights.rowwise().sum() - Eigen::VectorXd::Ones(3)) < 1e-12);
  }
  CHECK_THROWS_AS(attention(Eigen::MatrixXd::Zero(3, 2), Eigen::MatrixXd::Zero(2, 2), Eigen::MatrixXd::Zero(3, 2), 2),
                  ShapeError);
}

TEST_CASE("multi_head: one head with identity output map") {
  std::mt19937_64 rng(4);
  auto p = AttentionParams::init(4, 1, 4, 4, 9);
  p.wo.value = Eigen::MatrixXd::Identity(4, 4);
  const Eigen::MatrixXd e = oracle::random_matrix(3, 4, rng);
  const QKV qkv = project_qkv(e, p, 0);
  const auto single = attention(qkv.q, qkv.k, qkv.v, 4);
  const auto mh = multi_head(e, p);
  CHECK(max_abs(mh.output - single.output) < 1e-14);
  REQUIRE(mh.trace.head_weights.size() == 1);
  CHECK(max_abs(mh.trace.head_weights[0] - single.weights) < 1e-15);
}

TEST_CASE("multi_head: a zero head contributes nothing") {
  std::mt19937_64 rng(5);
  auto p = AttentionParams::init(4, 2, 2, 2, 10);
  p.wq[1].value.setZero();
  p.wk[1].value.setZero();
  p.wv[1].value.setZero();
  const Eigen::MatrixXd e = oracle::random_matrix(3, 4, rng);
  const QKV qkv = project_qkv(e, p, 0);
  const auto h1 = attention(qkv.q, qkv.k, qkv.v, 2);
  const Eigen::MatrixXd expected = h1.output * p.wo.value.topRows(2);
  CHECK(max_abs(multi_head(e, p).output - expected) < 1e-14);
}

TEST_CASE("multi_head: loop oracle with traces") {
  std::mt19937_64 rng(6);
  for (auto [d, h] : {std::pair{4, 2}, {8, 4}, {6, 3}}) {
    const auto p = AttentionParams::init(d, h, 2, 2, static_cast<std::uint64_t>(d * 10 + h));
    const Eigen::MatrixXd e = oracle::random_matrix(3, d, rng);
    std::vector<Eigen::MatrixXd> weights;
    const Eigen::MatrixXd ref = oracle::multi_head(e, values(p.wq), values(p.wk), values(p.wv), p.wo.value, 2, &weights);
    const auto mh = multi_head(e, p);
    CHECK(max_abs(mh.output - ref) < 1e-8);
    REQUIRE(mh.trace.head_weights.size() == static_cast<std::size_t>(h));
    for (int i = 0; i < h; ++i) CHECK(max_abs(mh.trace.head_weights[static_cast<std::size_t>(i)] - weights[static_cast<std::size_t>(i)]) < 1e-8);
  }
}

TEST_CASE("AttentionParams::validate rejects inconsistent shapes") {
  auto p = AttentionParams::init(8, 2, 4, 4, 1);
  CHECK_NOTHROW(p.validate());
  p.wk[1].value = Eigen::MatrixXd::Zero(8, 3);
  CHECK_THROWS_AS(p.validate(), ShapeError);
}

TEST_CASE("aggregate_mean") {
  std::mt19937_64 rng(7);
  const Eigen::RowVectorXd a = oracle::random_matrix(1, 5, rng);
  CHECK(max_abs(aggregate_mean(a.replicate(3, 1)) - a.transpose()) < 1e-15);
  Eigen::MatrixXd vz = Eigen::MatrixXd::Zero(3, 5);
  vz.row(0) = a;
  CHECK(max_abs(aggregate_mean(vz) - a.transpose() / 3) < 1e-15);
  const Eigen::MatrixXd r = oracle::random_matrix(3, 5, rng);
  for (int c = 0; c < 5; ++c) CHECK(aggregate_mean(r)(c) == doctest::Approx((r(0, c) + r(1, c) + r(2, c)) / 3));
  CHECK_THROWS_AS(aggregate_mean(Eigen::MatrixXd::Zero(2, 5)), ShapeError);
}

TEST_CASE("classify") {
  ClassifierHead head = ClassifierHead::init(4, 1);
  head.weight.value.setZero();
  head.bias.value.setZero();
  const Eigen::VectorXd z = Eigen::VectorXd::LinSpaced(4, -1, 2);
  CHECK(classify(z, head) == 0.5);
  head.bias.value(0, 0) = 80;
  CHECK(classify(z, head) == doctest::Approx(1.0));
  CHECK(sigmoid(-800) >= 0);
  CHECK(sigmoid(-800) < 1e-300);
  head.weight.value << 0.3, -0.2, 0.5, 1.0;
  head.bias.value(0, 0) = -0.1;
  const double logit = 0.3 * -1 + -0.2 * 0 + 0.5 * 1 + 1.0 * 2 - 0.1;
  CHECK(classify(z, head) == doctest::Approx(1 / (1 + std::exp(-logit))).epsilon(1e-14));
}

TEST_CASE("baseline aggregators") {
  std::mt19937_64 rng(8);
  EmbeddingTriple t{oracle::random_matrix(6, 1, rng), Eigen::VectorXd::Zero(6), Eigen::VectorXd::Zero(6)};
  CHECK(baseline_aggregate(t, Aggregator::add) == t.visual);
  t.text = oracle::random_matrix(6, 1, rng);
  t.frequency = oracle::random_matrix(6, 1, rng);
  const Eigen::VectorXd add = baseline_aggregate(t, Aggregator::add);
  const Eigen::VectorXd avg = baseline_aggregate(t, Aggregator::avgpool);
  CHECK(avg == add / 3.0);
  const Eigen::VectorXd w = Eigen::VectorXd::Constant(3, 0.7);
  CHECK(max_abs(baseline_aggregate(t, Aggregator::learned_weighted, &w) - avg) < 1e-15);
  const Eigen::VectorXd cat = baseline_aggregate(t, Aggregator::concat);
  CHECK(cat.size() == 18);
  CHECK(cat.segment(6, 6) == t.text);
  CHECK_THROWS_AS(baseline_aggregate(t, Aggregator::learned_weighted), ConfigError);
  CHECK_THROWS_AS(baseline_aggregate(t, Aggregator::cross_attention), ConfigError);
  t.text = Eigen::VectorXd::Zero(5);
  CHECK_THROWS_AS(baseline_aggregate(t, Aggregator::add), ShapeError);
}

TEST_CASE("aggregator names round trip") {
  for (auto a : {Aggregator::cross_attention, Aggregator::add, Aggregator::concat, Aggregator::avgpool,
                 Aggregator::learned_weighted, Aggregator::passthrough})
    CHECK(parse_aggregator(to_string(a)) == a);
  CHECK_THROWS_AS(parse_aggregator("max"), ConfigError);
}

TEST_CASE("FusionHead batch forward agrees with the per-sample path") {
  std::mt19937_64 rng(9);
  FusionConfig cfg;
  cfg.embed_dim = 8;
  cfg.heads = 4;
  cfg.key_dim = cfg.value_dim = 2;
  const FusionHead head(cfg, 21);
  const int batch = 5;
  std::vector<Eigen::MatrixXd> tokens;
  for (int m = 0; m < 3; ++m) tokens.push_back(oracle::random_matrix(batch, 8, rng));
  std::vector<AttentionTrace> traces;
  const Eigen::VectorXd logits = head.forward(tokens, nullptr, &traces);
  REQUIRE(traces.size() == static_cast<std::size_t>(batch));
  for (int b = 0; b < batch; ++b) {
    Eigen::MatrixXd e(3, 8);
    for (int m = 0; m < 3; ++m) e.row(m) = tokens[static_cast<std::size_t>(m)].row(b);
    const auto mh = multi_head(e, head.attention_params());
    const Eigen::VectorXd z = aggregate_mean(mh.output);
    CHECK(logits(b) == doctest::Approx(head.classifier().logit(z)).epsilon(1e-12));
    CHECK(max_abs(traces[static_cast<std::size_t>(b)].aggregated - z) < 1e-12);
    for (const auto& w : traces[static_cast<std::size_t>(b)].head_weights)
      CHECK(max_abs(w.rowwise().sum() - Eigen::VectorXd::Ones(3)) < 1e-12);
  }
}

TEST_CASE("token permutation leaves the fused logit unchanged") {
  std::mt19937_64 rng(10);
  for (auto agg : {Aggregator::cross_attention, Aggregator::add, Aggregator::avgpool, Aggregator::learned_weighted}) {
    FusionConfig cfg;
    cfg.aggregator = agg;
    cfg.embed_dim = 6;
    cfg.heads = 3;
    cfg.key_dim = cfg.value_dim = 2;
    const FusionHead head(cfg, 33);
    std::vector<Eigen::MatrixXd> itf;
    for (int m = 0; m < 3; ++m) itf.push_back(oracle::random_matrix(4, 6, rng));
    const std::vector<Eigen::MatrixXd> tif{itf[1], itf[0], itf[2]};
    CHECK(max_abs(head.forward(itf) - head.forward(tif)) < 1e-12);
  }
}

TEST_CASE("FusionHead backward matches finite differences on tokens") {
  std::mt19937_64 rng(11);
  FusionConfig cfg;
  cfg.embed_dim = 4;
  cfg.heads = 2;
  cfg.key_dim = cfg.value_dim = 2;
  const FusionHead head(cfg, 5);
  std::vector<Eigen::MatrixXd> tokens;
  for (int m = 0; m < 3; ++m) tokens.push_back(oracle::random_matrix(2, 4, rng));
  const Eigen::VectorXd dl = (Eigen::VectorXd(2) << 0.7, -1.3).finished();
  FusionHead::Cache cache;
  head.forward(tokens, &cache);
  const auto grads = head.backward(cache, dl, nullptr);
  const double h = 1e-6;
  for (std::size_t m = 0; m < 3; ++m)
    for (Eigen::Index i = 0; i < tokens[m].size(); ++i) {
      auto up = tokens, down = tokens;
      up[m].data()[i] += h;
      down[m].data()[i] -= h;
      const double fd = (dl.dot(head.forward(up)) - dl.dot(head.forward(down))) / (2 * h);
      CHECK(grads[m].data()[i] == doctest::Approx(fd).epsilon(1e-6).scale(1));
    }
}

TEST_CASE("FusionHead rejects singleton fusion") {
  FusionConfig cfg;
  cfg.tokens = 1;
  CHECK_THROWS_AS(FusionHead(cfg, 1), ConfigError);
  cfg.aggregator = Aggregator::passthrough;
  CHECK_NOTHROW(FusionHead(cfg, 1));
  cfg.tokens = 2;
  CHECK_THROWS_AS(FusionHead(cfg, 1), ConfigError);
}
