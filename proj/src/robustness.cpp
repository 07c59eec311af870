#include "crossfuse/robustness.hpp"

#include "crossfuse/error.hpp"
#include "crossfuse/rng.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>
#include <sstream>

namespace crossfuse {

using json = nlohmann::json;

std::string to_string(PerturbationKind k) {
  switch (k) {
    case PerturbationKind::gaussian_noise: return "gaussian-noise";
    case PerturbationKind::gaussian_blur: return "gaussian-blur";
    case PerturbationKind::jpeg: return "jpeg";
    case PerturbationKind::sharpen: return "sharpen";
    case PerturbationKind::color_jitter: return "color-jitter";
  }
  return "?";
}

PerturbationKind parse_perturbation_kind(const std::string& s) {
  for (auto k : all_perturbation_kinds())
    if (to_string(k) == s) return k;
  throw ConfigError("unknown perturbation kind '" + s + "'");
}

const std::vector<PerturbationKind>& all_perturbation_kinds() {
  static const std::vector<PerturbationKind> kinds{
      PerturbationKind::gaussian_noise, PerturbationKind::gaussian_blur, PerturbationKind::jpeg,
      PerturbationKind::sharpen, PerturbationKind::color_jitter};
  return kinds;
}

std::vector<double> default_intensity_grid(PerturbationKind k) {
  switch (k) {
    case PerturbationKind::gaussian_noise: return {0.01, 0.015, 0.02};
    case PerturbationKind::gaussian_blur: return {0.5, 1.0, 1.5};
    case PerturbationKind::jpeg: return {30, 60, 90};
    case PerturbationKind::sharpen: return {1.0, 1.5, 2.0};
    case PerturbationKind::color_jitter: return {1.0, 1.5, 2.0};
  }
  return {};
}

double identity_intensity(PerturbationKind k) {
  switch (k) {
    case PerturbationKind::gaussian_noise:
    case PerturbationKind::gaussian_blur: return 0.0;
    case PerturbationKind::jpeg: return 100.0;
    case PerturbationKind::sharpen:
    case PerturbationKind::color_jitter: return 1.0;
  }
  return 0.0;
}

Grid sharpen(const Grid& g, double factor) {
  Grid out = g;
  if (factor == 1.0 || g.rows() < 3 || g.cols() < 3) return out;
  for (Eigen::Index r = 1; r + 1 < g.rows(); ++r)
    for (Eigen::Index c = 1; c + 1 < g.cols(); ++c) {
      const double smooth = (g.block(r - 1, c - 1, 3, 3).sum() + 4 * g(r, c)) / 13.0;
      out(r, c) = smooth + factor * (g(r, c) - smooth);
    }
  return out;
}

Image color_jitter(const Image& img, double factor) {
  Image out = img;
  if (factor == 1.0) return out;
  for (auto& v : out.data()) v = std::clamp(v * factor, 0.0, 1.0);
  const double mean = out.gray().mean();
  for (auto& v : out.data()) v = std::clamp(mean + factor * (v - mean), 0.0, 1.0);
  return out;
}

Image apply_perturbation(const Image& img, PerturbationKind kind, double intensity, std::uint64_t seed) {
  if (!std::isfinite(intensity) || intensity < 0)
    throw ConfigError(to_string(kind) + " intensity must be finite and >= 0");
  Image out = img;
  switch (kind) {
    case PerturbationKind::gaussian_noise: {
      if (intensity == 0) return out;
      Rng rng(seed);
      std::normal_distribution<double> n(0.0, intensity);
      for (auto& v : out.data()) v += n(rng);
      break;
    }
    case PerturbationKind::gaussian_blur:
      for (int ch = 0; ch < img.channels(); ++ch) out.set_plane(ch, gaussian_blur(img.plane(ch), intensity));
      break;
    case PerturbationKind::jpeg: {
      const int q = static_cast<int>(std::lround(intensity));
      if (q == 100) return out;
      out = jpeg_roundtrip(img, q);
      break;
    }
    case PerturbationKind::sharpen:
      for (int ch = 0; ch < img.channels(); ++ch) out.set_plane(ch, sharpen(img.plane(ch), intensity));
      break;
    case PerturbationKind::color_jitter:
      out = color_jitter(img, intensity);
      break;
  }
  out.clamp01();
  return out;
}

namespace {

Eigen::MatrixXd covariance(const Eigen::MatrixXd& x, Eigen::VectorXd& mean) {
  mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd c = x.rowwise() - mean.transpose();
  return (c.transpose() * c) / static_cast<double>(x.rows() - 1);
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

bool singular(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
  const double top = std::max(es.eigenvalues().cwiseAbs().maxCoeff(), 1e-300);
  return es.eigenvalues().minCoeff() <= top * 1e-12;
}

}  // namespace

FidResult fid_lite(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() < 2 || b.rows() < 2) throw DataError("fid_lite needs at least 2 samples per set");
  if (a.cols() != b.cols()) throw ShapeError("fid_lite feature widths differ");
  Eigen::VectorXd mu1, mu2;
  Eigen::MatrixXd s1 = covariance(a, mu1), s2 = covariance(b, mu2);
  FidResult r;
  if (singular(s1) || singular(s2)) {
    s1.diagonal().array() += 1e-6;
    s2.diagonal().array() += 1e-6;
    r.jittered = true;
  }
  const Eigen::MatrixXd r1 = psd_sqrt(s1);
  Eigen::MatrixXd inner = r1 * s2 * r1;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inner, Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  r.value = std::max(0.0, (mu1 - mu2).squaredNorm() + s1.trace() + s2.trace() - 2 * tr_sqrt);
  return r;
}

Eigen::MatrixXd visual_features(std::span<const Image> images, const VisualEncoder& encoder) {
  Eigen::MatrixXd f(static_cast<Eigen::Index>(images.size()), encoder.spec().embed_dim);
  for (std::size_t i = 0; i < images.size(); ++i)
    f.row(static_cast<Eigen::Index>(i)) =
        encoder.forward(prepare_image(images[i], encoder.input_size())).transpose();
  return f;
}

double LogisticLinearTarget::loss_and_grad(const Grid& x, int y, Grid& grad) const {
  const double z = (w_.array() * x.array()).sum() + b_;
  const double p = sigmoid(z);
  grad = (p - y) * w_;
  return z > 0 ? (1 - y) * z + std::log1p(std::exp(-z)) : -y * z + std::log1p(std::exp(z));
}

double LogisticLinearTarget::probability(const Grid& x) const {
  return sigmoid((w_.array() * x.array()).sum() + b_);
}

ModelAttackTarget::ModelAttackTarget(const Model& model, PreparedSample base)
    : model_(model), base_(std::move(base)) {
  base_.visual_embedding.resize(0);
  base_.freq_raw.resize(0);
}

double ModelAttackTarget::loss_and_grad(const Grid& x, int y, Grid& grad) const {
  PreparedSample s = base_;
  s.gray = x;
  s.label = y;
  return model_.input_gradient(s, grad);
}

double ModelAttackTarget::probability(const Grid& x) const {
  PreparedSample s = base_;
  s.gray = x;
  const PreparedSample* p = &s;
  return sigmoid(model_.logits(std::span(&p, 1))(0));
}

std::string to_string(AttackKind k) { return k == AttackKind::fgsm ? "fgsm" : "pgd"; }

AttackKind parse_attack_kind(const std::string& s) {
  if (s == "fgsm") return AttackKind::fgsm;
  if (s == "pgd") return AttackKind::pgd;
  throw ConfigError("unknown attack kind '" + s + "' (expected fgsm or pgd)");
}

void AttackConfig::validate() const {
  if (!(epsilon >= 0) || !std::isfinite(epsilon)) throw ConfigError("attack epsilon must be >= 0");
  if (kind == AttackKind::pgd) {
    if (!(alpha > 0)) throw ConfigError("pgd alpha must be > 0");
    if (steps < 1) throw ConfigError("pgd steps must be >= 1");
  }
  if (label != kReal && label != kFake) throw ConfigError("attack label must be 0 or 1");
}

std::string AttackConfig::name() const {
  char buf[96];
  if (kind == AttackKind::fgsm)
    std::snprintf(buf, sizeof buf, "fgsm(eps=%g)", epsilon);
  else
    std::snprintf(buf, sizeof buf, "pgd(eps=%g,alpha=%g,steps=%d)", epsilon, alpha, steps);
  return buf;
}

json AttackConfig::to_json() const {
  return {{"kind", to_string(kind)}, {"epsilon", epsilon}, {"alpha", alpha}, {"steps", steps}, {"label", label}};
}

AttackConfig AttackConfig::from_json(const json& j) {
  AttackConfig c;
  try {
    c.kind = parse_attack_kind(j.value("kind", std::string("fgsm")));
    c.epsilon = j.value("epsilon", c.epsilon);
    c.alpha = j.value("alpha", c.alpha);
    c.steps = j.value("steps", c.steps);
    c.label = j.value("label", c.label);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("attack config: ") + e.what());
  }
  c.validate();
  return c;
}

Grid project_linf(const Grid& x, const Grid& candidate, double eps) {
  Grid y = candidate;
  constexpr double inf = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double xi = x.data()[i];
    double v = std::clamp(candidate.data()[i], xi - eps, xi + eps);
    while (v - xi > eps) v = std::nextafter(v, -inf);
    while (xi - v > eps) v = std::nextafter(v, inf);
    y.data()[i] = v;
  }
  return y;
}

namespace {

Grid sign_of(const Grid& g) {
  if (!g.allFinite()) throw DivergenceError("attack gradient contains non-finite values");
  return g.unaryExpr([](double v) { return static_cast<double>((v > 0) - (v < 0)); });
}

Grid clamp01(Grid g) { return g.cwiseMax(0.0).cwiseMin(1.0); }

}  // namespace

Grid fgsm(const AttackTarget& target, const Grid& x, int y, double eps) {
  if (!(eps >= 0)) throw ConfigError("fgsm epsilon must be >= 0");
  if (eps == 0) return x;
  Grid grad;
  target.loss_and_grad(x, y, grad);
  return clamp01(project_linf(x, x + eps * sign_of(grad), eps));
}

Grid pgd(const AttackTarget& target, const Grid& x, int y, double eps, double alpha, int steps,
         const PgdObserver& observer) {
  if (!(eps >= 0)) throw ConfigError("pgd epsilon must be >= 0");
  if (!(alpha > 0) || steps < 1) throw ConfigError("pgd needs alpha > 0 and steps >= 1");
  Grid xk = x;
  Grid grad;
  for (int k = 1; k <= steps; ++k) {
    if (eps > 0) {
      target.loss_and_grad(xk, y, grad);
      xk = project_linf(x, xk + alpha * sign_of(grad), eps);
    }
    if (observer) observer(k, xk);
  }
  return clamp01(xk);
}

Grid run_attack(const AttackTarget& target, const Grid& x, const AttackConfig& config) {
  config.validate();
  if (config.kind == AttackKind::fgsm) return fgsm(target, x, config.label, config.epsilon);
  return pgd(target, x, config.label, config.epsilon, config.alpha, config.steps);
}

std::vector<double> RobustnessConfig::grid(PerturbationKind k) const {
  auto it = grids.find(k);
  return it != grids.end() ? it->second : default_intensity_grid(k);
}

json RobustnessConfig::to_json() const {
  json j;
  j["kinds"] = json::array();
  for (auto k : kinds) j["kinds"].push_back(to_string(k));
  j["grids"] = json::object();
  for (const auto& [k, g] : grids) j["grids"][to_string(k)] = g;
  j["attacks"] = json::array();
  for (const auto& a : attacks) j["attacks"].push_back(a.to_json());
  j["compute_fid"] = compute_fid;
  j["seed"] = seed;
  return j;
}

RobustnessConfig RobustnessConfig::from_json(const json& j) {
  RobustnessConfig c;
  try {
    if (j.contains("kinds")) {
      c.kinds.clear();
      for (const auto& k : j.at("kinds")) c.kinds.push_back(parse_perturbation_kind(k.get<std::string>()));
    }
    if (j.contains("grids"))
      for (const auto& [k, g] : j.at("grids").items())
        c.grids[parse_perturbation_kind(k)] = g.get<std::vector<double>>();
    if (j.contains("attacks"))
      for (const auto& a : j.at("attacks")) c.attacks.push_back(AttackConfig::from_json(a));
    c.compute_fid = j.value("compute_fid", c.compute_fid);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("robustness config: ") + e.what());
  }
  return c;
}

namespace {

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::uint64_t double_bits(double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, sizeof u);
  return u;
}

std::vector<double> probabilities_of(const Model& model, std::span<const PreparedSample> samples) {
  std::vector<const PreparedSample*> ptrs;
  for (const auto& s : samples) ptrs.push_back(&s);
  return model.probabilities(ptrs);
}

}  // namespace

std::string RobustnessReport::to_csv() const {
  std::ostringstream out;
  out << "kind,setting,intensity,n,tp,fp,tn,fn,precision,recall,f1,accuracy,fid\n";
  auto row = [&](const std::string& kind, const std::string& setting, double intensity,
                 const MetricBundle& m, double fid) {
    out << kind << ',' << setting << ',' << g17(intensity) << ',' << m.total() << ',' << m.tp << ','
        << m.fp << ',' << m.tn << ',' << m.fn << ',' << g17(m.precision) << ',' << g17(m.recall) << ','
        << g17(m.f1) << ',' << g17(m.accuracy) << ',' << (fid >= 0 ? g17(fid) : "") << '\n';
  };
  row("baseline", "clean", 0, baseline, -1);
  row("baseline", "clean-fake", 0, baseline_fake, -1);
  for (const auto& c : perturbations) row("perturbation", c.name, c.intensity, c.metrics, c.fid);
  for (const auto& [name, f1] : average_f1) {
    auto it = pooled_fid.find(name);
    out << "average," << name << ",,,,,,,,,"
        << g17(f1) << ",," << (it != pooled_fid.end() ? g17(it->second) : "") << '\n';
  }
  for (const auto& c : attacks) row("attack", c.name, c.intensity, c.metrics, -1);
  return out.str();
}

RobustnessReport robustness_eval(const Model& model, std::span<const SampleRecord* const> test_records,
                                 const RobustnessConfig& config) {
  if (test_records.empty()) throw DataError("robustness_eval: no test records");
  for (const auto* r : test_records)
    if (r->split != Split::test)
      throw DataError("robustness_eval: record '" + r->id + "' is not in the test split");
  RobustnessReport rep;
  std::vector<int> labels;
  std::vector<PreparedSample> clean;
  std::vector<Image> clean_images;
  for (const auto* r : test_records) {
    labels.push_back(r->label);
    clean.push_back(model.prepare(*r));
    clean_images.push_back(r->image);
  }
  const auto clean_p = probabilities_of(model, clean);
  rep.baseline = compute_metrics_prob(clean_p, labels);

  const Eigen::MatrixXd clean_feats =
      config.compute_fid ? visual_features(clean_images, model.visual()) : Eigen::MatrixXd();
  bool any_jitter = false;
  for (auto kind : config.kinds) {
    const auto grid = config.grid(kind);
    if (grid.empty()) throw ConfigError("empty intensity grid for " + to_string(kind));
    double f1_sum = 0;
    Eigen::MatrixXd pooled;
    for (double intensity : grid) {
      std::vector<PreparedSample> pert;
      std::vector<Image> pert_images;
      for (const auto* r : test_records) {
        const auto seed = derive_seed(config.seed, {fnv1a(r->id), static_cast<std::uint64_t>(kind),
                                                    double_bits(intensity)});
        Image img = apply_perturbation(r->image, kind, intensity, seed);
        pert.push_back(model.prepare_gray(prepare_image(img, model.config().image_size), r->caption, r->label));
        pert_images.push_back(std::move(img));
      }
      RobustnessCell cell{to_string(kind), intensity, {}, probabilities_of(model, pert), labels, -1};
      cell.metrics = compute_metrics_prob(cell.probabilities, labels);
      if (config.compute_fid) {
        const Eigen::MatrixXd feats = visual_features(pert_images, model.visual());
        const auto fid = fid_lite(clean_feats, feats);
        cell.fid = fid.value;
        any_jitter |= fid.jittered;
        Eigen::MatrixXd grown(pooled.rows() + feats.rows(), feats.cols());
        if (pooled.rows()) grown.topRows(pooled.rows()) = pooled;
        grown.bottomRows(feats.rows()) = feats;
        pooled = std::move(grown);
      }
      f1_sum += cell.metrics.f1;
      rep.perturbations.push_back(std::move(cell));
    }
    rep.average_f1[to_string(kind)] = f1_sum / static_cast<double>(grid.size());
    if (config.compute_fid) {
      const auto fid = fid_lite(clean_feats, pooled);
      any_jitter |= fid.jittered;
      rep.pooled_fid[to_string(kind)] = fid.value;
    }
  }
  if (any_jitter) rep.notes.push_back("singular feature covariance: 1e-6 diagonal jitter added to FID-lite");

  std::vector<std::size_t> fakes;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == kFake) fakes.push_back(i);
  if (!config.attacks.empty() && fakes.empty()) throw DataError("robustness_eval: no fake test records to attack");
  if (!fakes.empty()) {
    std::vector<double> p;
    std::vector<int> y(fakes.size(), kFake);
    for (auto i : fakes) p.push_back(clean_p[i]);
    rep.baseline_fake = compute_metrics_prob(p, y);
  }
  for (const auto& attack : config.attacks) {
    attack.validate();
    RobustnessCell cell{attack.name(), attack.epsilon, {}, {}, {}, -1};
    for (auto i : fakes) {
      const ModelAttackTarget target(model, clean[i]);
      const Grid adv = run_attack(target, clean[i].gray, attack);
      cell.probabilities.push_back(target.probability(adv));
      cell.labels.push_back(kFake);
    }
    cell.metrics = compute_metrics_prob(cell.probabilities, cell.labels);
    rep.attacks.push_back(std::move(cell));
  }
  return rep;
}

}  // namespace crossfuse
