#include "crossfuse/experiment.hpp"

#include "crossfuse/analysis.hpp"
#include "crossfuse/error.hpp"

#include <cstdio>
#include <fstream>
#include <set>

namespace crossfuse {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("failed writing " + path.string());
}

fs::path resolve(const fs::path& p, const fs::path& base) {
  return p.empty() || p.is_absolute() || base.empty() ? p : base / p;
}

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class F>
auto stage(const std::string& name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

std::string train_log_csv(const TrainLog& log) {
  std::string out = "epoch,train_loss,val_loss,val_f1,best\n";
  for (std::size_t e = 0; e < log.train_loss.size(); ++e)
    out += std::to_string(e) + ',' + g17(log.train_loss[e]) + ',' + g17(log.val_loss[e]) + ',' +
           g17(log.val_f1[e]) + ',' + (static_cast<int>(e) == log.best_epoch ? "1" : "0") + '\n';
  return out;
}

DatasetManifest obtain_manifest(const ExperimentConfig& c, const fs::path& data_dir, bool reuse) {
  if (!c.gen_data) return load_manifest(c.manifest);
  const fs::path path = data_dir / "manifest.jsonl";
  if (reuse && fs::exists(path)) return load_manifest(path);
  DatasetManifest m = generate_benchmark(*c.gen_data, c.seed);
  save_manifest(m, path);
  return m;
}

std::vector<std::string> resolve_domains(const ExperimentConfig& c, const DatasetManifest& m) {
  const auto domains = c.domains.empty() ? m.domains : c.domains;
  for (const auto& d : domains)
    if (!m.has_domain(d)) throw ConfigError("domain '" + d + "' is not in the manifest");
  if (domains.size() < 2) throw ConfigError("transfer experiments need at least two domains");
  return domains;
}

void check_inputs(const ExperimentConfig& c) {
  if (!c.gen_data && !fs::exists(c.manifest))
    throw StageError("config", "manifest " + (c.manifest.empty() ? std::string("(unset)") : c.manifest.string()) +
                                   " does not exist");
  c.model.resolved();
  c.train.validate();
  if (!(c.clip_lo < c.clip_hi)) throw StageError("config", "spectra clip range must satisfy lo < hi");
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const json& j, const fs::path& base) {
  ExperimentConfig c;
  try {
    if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
    static const std::set<std::string> known{"manifest", "gen_data", "domains", "ablation_sources", "model", "train",
                                             "robustness", "spectra_clip", "output_dir", "seed"};
    for (const auto& [k, v] : j.items())
      if (!known.count(k)) throw ConfigError("unknown experiment config key '" + k + "'");
    if (j.contains("manifest")) c.manifest = resolve(j.at("manifest").get<std::string>(), base);
    if (j.contains("gen_data")) {
      const auto& g = j.at("gen_data");
      GenDataConfig gen;
      if (g.contains("domains_file"))
        gen.domains = load_domain_specs(resolve(g.at("domains_file").get<std::string>(), base));
      else
        gen.domains = domain_specs_from_json(g.at("domains"));
      gen.n_per_class = g.value("n_per_class", gen.n_per_class);
      gen.image_size = g.value("image_size", gen.image_size);
      c.gen_data = std::move(gen);
    }
    c.domains = j.value("domains", c.domains);
    c.ablation_sources = j.value("ablation_sources", c.ablation_sources);
    if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
    if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
    if (j.contains("robustness")) c.robustness = RobustnessConfig::from_json(j.at("robustness"));
    if (j.contains("spectra_clip")) {
      const auto clip = j.at("spectra_clip").get<std::vector<double>>();
      if (clip.size() != 2) throw ConfigError("spectra_clip needs two values");
      c.clip_lo = clip[0];
      c.clip_hi = clip[1];
    }
    if (j.contains("output_dir")) c.output_dir = resolve(j.at("output_dir").get<std::string>(), base);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open experiment config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("experiment config " + path.string() + ": " + e.what());
  }
  return from_json(j, path.parent_path());
}

json ExperimentConfig::to_json() const {
  json j;
  j["seed"] = seed;
  if (gen_data) {
    json d = json::array();
    for (const auto& s : seeded_domains()) d.push_back(domain_spec_to_json(s));
    j["gen_data"] = {{"domains", d}, {"n_per_class", gen_data->n_per_class}, {"image_size", gen_data->image_size}};
  } else {
    j["manifest"] = manifest.string();
  }
  j["domains"] = domains;
  j["ablation_sources"] = ablation_sources;
  j["model"] = seeded_model().to_json();
  j["train"] = seeded_train().to_json();
  j["robustness"] = seeded_robustness().to_json();
  j["spectra_clip"] = {clip_lo, clip_hi};
  j["output_dir"] = output_dir.string();
  return j;
}

ModelConfig ExperimentConfig::seeded_model() const {
  ModelConfig m = model;
  m.encoder_seed = derive_seed(seed, {fnv1a("encoder")});
  m.init_seed = derive_seed(seed, {fnv1a("init")});
  return m;
}

TrainConfig ExperimentConfig::seeded_train() const {
  TrainConfig t = train;
  t.seed = derive_seed(seed, {fnv1a("train")});
  return t;
}

RobustnessConfig ExperimentConfig::seeded_robustness() const {
  RobustnessConfig r = robustness;
  r.seed = derive_seed(seed, {fnv1a("robustness")});
  return r;
}

std::vector<SyntheticDomainSpec> ExperimentConfig::seeded_domains() const {
  std::vector<SyntheticDomainSpec> out = gen_data ? gen_data->domains : std::vector<SyntheticDomainSpec>{};
  for (auto& s : out) s.seed = derive_seed(seed, {fnv1a("data"), fnv1a(s.id)});
  return out;
}

DatasetManifest generate_benchmark(const GenDataConfig& gen, std::uint64_t seed) {
  if (gen.domains.empty()) throw ConfigError("gen-data needs at least one domain spec");
  std::set<std::string> ids;
  std::vector<SampleRecord> all;
  for (auto spec : gen.domains) {
    if (!ids.insert(spec.id).second) throw ConfigError("duplicate domain id '" + spec.id + "'");
    spec.seed = derive_seed(seed, {fnv1a("data"), fnv1a(spec.id)});
    auto recs = generate_domain(spec, gen.n_per_class, gen.image_size);
    all.insert(all.end(), std::make_move_iterator(recs.begin()), std::make_move_iterator(recs.end()));
  }
  return split_manifest(std::move(all), derive_seed(seed, {fnv1a("split")}));
}

std::string to_string(AblationAxis a) {
  switch (a) {
    case AblationAxis::aggregator: return "aggregator";
    case AblationAxis::modality_subset: return "modality-subset";
    case AblationAxis::heads: return "heads";
    case AblationAxis::image_size: return "image-size";
  }
  return "?";
}

AblationAxis parse_ablation_axis(const std::string& s) {
  for (auto a : {AblationAxis::aggregator, AblationAxis::modality_subset, AblationAxis::heads, AblationAxis::image_size})
    if (to_string(a) == s) return a;
  throw ConfigError("unknown ablation axis '" + s + "' (expected aggregator, modality-subset, heads or image-size)");
}

std::vector<std::string> default_axis_values(AblationAxis a) {
  switch (a) {
    case AblationAxis::aggregator: return {"cross-attention", "add", "concat", "avgpool", "learned-weighted"};
    case AblationAxis::modality_subset: return {"IT", "IF", "TF", "ITF"};
    case AblationAxis::heads: return {"1", "2", "4", "8", "16"};
    case AblationAxis::image_size: return {"32", "64", "128", "224", "512"};
  }
  return {};
}

ModelConfig apply_axis_value(const ModelConfig& base, AblationAxis axis, const std::string& value) {
  ModelConfig m = base;
  auto as_int = [&](const std::set<int>& allowed) {
    std::size_t pos = 0;
    int v = 0;
    try {
      v = std::stoi(value, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != value.size() || !allowed.count(v))
      throw ConfigError("invalid " + to_string(axis) + " value '" + value + "'");
    return v;
  };
  switch (axis) {
    case AblationAxis::aggregator: {
      const std::string prefix = "passthrough-";
      if (value.rfind(prefix, 0) == 0) {
        m.aggregator = Aggregator::passthrough;
        m.modalities = parse_modalities(value.substr(prefix.size()));
        if (m.modalities.size() != 1) throw ConfigError("passthrough takes exactly one modality: '" + value + "'");
      } else {
        m.aggregator = parse_aggregator(value);
        if (m.aggregator == Aggregator::passthrough)
          throw ConfigError("use passthrough-I, passthrough-T or passthrough-F");
        if (m.modalities.size() < 2) m.modalities = parse_modalities("ITF");
      }
      break;
    }
    case AblationAxis::modality_subset:
      m.modalities = parse_modalities(value);
      if (m.modalities.size() < 2)
        throw ConfigError("modality subset '" + value + "' is a singleton; run it as aggregator value passthrough-" + value);
      if (m.aggregator == Aggregator::passthrough) m.aggregator = Aggregator::cross_attention;
      break;
    case AblationAxis::heads:
      m.heads = as_int({1, 2, 4, 8, 16});
      m.key_dim = m.value_dim = 0;
      break;
    case AblationAxis::image_size:
      m.image_size = as_int({32, 64, 128, 224, 512});
      break;
  }
  return m.resolved();
}

std::vector<AblationEntry> run_ablation(const ExperimentConfig& config, AblationAxis axis,
                                        std::vector<std::string> values) {
  if (values.empty()) values = default_axis_values(axis);
  std::vector<ModelConfig> models;
  stage("config", [&] {
    check_inputs(config);
    for (const auto& v : values) models.push_back(apply_axis_value(config.seeded_model(), axis, v));
    return 0;
  });
  const fs::path dir = config.output_dir / ("ablation-" + to_string(axis));
  write_text(dir / "config_snapshot.json", config.to_json().dump(2) + "\n");
  const DatasetManifest manifest =
      stage("gen-data", [&] { return obtain_manifest(config, config.output_dir / "data", true); });
  const auto domains = stage("config", [&] {
    auto d = resolve_domains(config, manifest);
    if (!config.ablation_sources.empty()) {
      for (const auto& s : config.ablation_sources)
        if (!manifest.has_domain(s)) throw ConfigError("ablation source '" + s + "' is not in the manifest");
      d = config.ablation_sources;
    }
    return d;
  });
  const TrainConfig tc = config.seeded_train();
  PreparedCache cache;
  std::vector<AblationEntry> entries;
  std::string comparison = "axis,value,average_ia,mean_intra_f1\n";
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto run = stage("ablate", [&] { return train_and_evaluate(manifest, domains, models[i], tc, &cache); });
    const fs::path vdir = dir / values[i];
    write_text(vdir / "transfer.csv", render_table(run.matrix, TableFormat::csv));
    write_text(vdir / "transfer.txt", render_table(run.matrix, TableFormat::text));
    double intra = 0;
    for (std::size_t d = 0; d < run.matrix.size(); ++d) intra += run.matrix.at(d, d).f1;
    intra /= static_cast<double>(run.matrix.size());
    comparison += to_string(axis) + ',' + values[i] + ',' + g17(run.matrix.average_ia()) + ',' + g17(intra) + '\n';
    entries.push_back({values[i], std::move(run.matrix)});
  }
  write_text(dir / "comparison.csv", comparison);
  return entries;
}

fs::path run_full_pipeline(const ExperimentConfig& config, bool resume) {
  stage("config", [&] {
    check_inputs(config);
    return 0;
  });
  const fs::path out = config.output_dir;
  std::vector<fs::path> artifacts;
  auto emit = [&](const fs::path& p, const std::string& text) {
    write_text(p, text);
    artifacts.push_back(p);
  };
  emit(out / "config_snapshot.json", config.to_json().dump(2) + "\n");

  const DatasetManifest manifest = stage("gen-data", [&] { return obtain_manifest(config, out / "data", resume); });
  if (config.gen_data) artifacts.push_back(out / "data" / "manifest.jsonl");
  const auto domains = stage("config", [&] { return resolve_domains(config, manifest); });

  const ModelConfig mc = config.seeded_model();
  const TrainConfig tc = config.seeded_train();
  PreparedCache cache;
  std::vector<Model> models;
  stage("train", [&] {
    for (const auto& d : domains) {
      const fs::path ckpt = out / "checkpoints" / (d + ".ckpt");
      const fs::path log_path = out / "train" / (d + "_log.csv");
      if (resume && fs::exists(ckpt)) {
        models.push_back(load_checkpoint(ckpt, &mc));
        if (models.back().source_domain() != d)
          throw DataError("checkpoint " + ckpt.string() + " was trained on '" + models.back().source_domain() + "'");
      } else {
        auto r = train_model(manifest, d, Model(mc), tc, nullptr, &cache);
        save_checkpoint(r.model, ckpt);
        write_text(log_path, train_log_csv(r.log));
        models.push_back(std::move(r.model));
      }
      artifacts.push_back(ckpt);
      if (fs::exists(log_path)) artifacts.push_back(log_path);
    }
    return 0;
  });

  stage("eval-transfer", [&] {
    std::map<std::string, const Model*> by_source;
    for (std::size_t i = 0; i < domains.size(); ++i) by_source[domains[i]] = &models[i];
    const auto m = evaluate_transfer(by_source, manifest, domains, nullptr, &cache);
    emit(out / "transfer" / "transfer.csv", render_table(m, TableFormat::csv));
    emit(out / "transfer" / "transfer.txt", render_table(m, TableFormat::text));
    emit(out / "transfer" / "transfer.tex", render_table(m, TableFormat::latex));
    return 0;
  });

  stage("robustness", [&] {
    const RobustnessConfig rc = config.seeded_robustness();
    for (std::size_t i = 0; i < domains.size(); ++i) {
      const auto test = manifest.select(domains[i], Split::test);
      const auto rep = robustness_eval(models[i], test, rc);
      emit(out / "robustness" / (domains[i] + ".csv"), rep.to_csv());
    }
    return 0;
  });

  stage("analysis", [&] {
    std::vector<const SampleRecord*> all_test;
    for (std::size_t i = 0; i < domains.size(); ++i) {
      const auto test = manifest.select(domains[i], Split::test);
      all_test.insert(all_test.end(), test.begin(), test.end());
      if (models[i].config().aggregator == Aggregator::cross_attention) {
        const auto summary = attention_summary(models[i], test);
        for (auto& p : render_attention(summary, out / "analysis" / "attention" / domains[i])) artifacts.push_back(p);
      }
    }
    const auto spectra = spectrum_summary(all_test, config.clip_lo, config.clip_hi);
    for (auto& p : render_spectra(spectra, out / "analysis" / "spectra")) artifacts.push_back(p);
    return 0;
  });

  json inv = json::array();
  for (const auto& p : artifacts) inv.push_back(fs::relative(p, out).generic_string());
  write_text(out / "artifacts.json", json{{"artifacts", inv}}.dump(2) + "\n");
  return out;
}

}  // namespace crossfuse
