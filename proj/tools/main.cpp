#include "crossfuse/analysis.hpp"
#include "crossfuse/error.hpp"
#include "crossfuse/experiment.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace crossfuse;

namespace {

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

std::vector<const SampleRecord*> test_records(const DatasetManifest& m, const Model& model,
                                              const std::string& domain) {
  const std::string d = domain.empty() ? model.source_domain() : domain;
  if (!m.has_domain(d)) throw DataError("domain '" + d + "' is not in the manifest");
  auto recs = m.select(d, Split::test);
  if (recs.empty()) throw DataError("domain '" + d + "' has no test split");
  return recs;
}

ExperimentConfig seeded(std::uint64_t seed) {
  ExperimentConfig c;
  c.seed = seed;
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-modal cross-attention fake-image detection toolkit"};
  app.require_subcommand(1);
  std::string stage = "cli";
  std::function<void()> action;
  std::uint64_t seed = 1;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic multi-domain benchmark");
  std::string gen_domains, gen_out;
  int gen_n = 400, gen_size = 64;
  gen->add_option("--domains", gen_domains, "Domain spec JSON file")->required()->check(CLI::ExistingFile);
  gen->add_option("--n-per-class", gen_n, "Images per class per domain");
  gen->add_option("--size", gen_size, "Image side length in pixels");
  gen->add_option("--out", gen_out, "Output directory (manifest.jsonl + images/)")->required();
  gen->add_option("--seed", seed, "Base seed");
  gen->callback([&] {
    action = [&] {
      GenDataConfig g{load_domain_specs(gen_domains), gen_n, gen_size};
      const auto m = generate_benchmark(g, seed);
      save_manifest(m, fs::path(gen_out) / "manifest.jsonl");
      std::cout << "wrote " << m.records.size() << " records in " << m.domains.size() << " domains to "
                << (fs::path(gen_out) / "manifest.jsonl").string() << "\n";
    };
  });

  // train
  auto* train = app.add_subcommand("train", "Train one model on a source domain");
  std::string tr_manifest, tr_source, tr_config, tr_model_config, tr_out;
  train->add_option("--manifest", tr_manifest)->required()->check(CLI::ExistingFile);
  train->add_option("--source", tr_source)->required();
  train->add_option("--config", tr_config, "Flat JSON train config")->check(CLI::ExistingFile);
  train->add_option("--model-config", tr_model_config, "JSON model config")->check(CLI::ExistingFile);
  train->add_option("--out", tr_out, "Checkpoint path")->required();
  train->add_option("--seed", seed);
  train->callback([&] {
    action = [&] {
      ExperimentConfig c = seeded(seed);
      if (!tr_config.empty()) c.train = TrainConfig::load(tr_config);
      if (!tr_model_config.empty()) {
        std::ifstream in(tr_model_config);
        c.model = ModelConfig::from_json(nlohmann::json::parse(in));
      }
      const auto m = load_manifest(tr_manifest);
      AccessLog log;
      auto r = train_model(m, tr_source, Model(c.seeded_model()), c.seeded_train(), &log);
      save_checkpoint(r.model, tr_out);
      write_file(fs::path(tr_out).replace_extension(".log.json"), r.log.to_json().dump(2) + "\n");
      std::cout << "best epoch " << r.log.best_epoch << ", val loss " << r.log.val_loss[r.log.best_epoch]
                << ", val F1 " << r.log.val_f1[r.log.best_epoch] << "\n";
    };
  });

  // eval-transfer
  auto* evt = app.add_subcommand("eval-transfer", "Evaluate per-source checkpoints on every target test split");
  std::string ev_models, ev_manifest, ev_out;
  evt->add_option("--models", ev_models, "Directory of <domain>.ckpt files")->required()->check(CLI::ExistingDirectory);
  evt->add_option("--manifest", ev_manifest)->required()->check(CLI::ExistingFile);
  evt->add_option("--out", ev_out, "Report directory")->required();
  evt->add_option("--seed", seed);
  evt->callback([&] {
    action = [&] {
      const auto m = load_manifest(ev_manifest);
      std::vector<std::string> domains;
      std::vector<Model> models;
      for (const auto& d : m.domains) {
        const fs::path p = fs::path(ev_models) / (d + ".ckpt");
        if (!fs::exists(p)) continue;
        models.push_back(load_checkpoint(p));
        domains.push_back(d);
      }
      if (domains.empty()) throw DataError("no <domain>.ckpt files matching manifest domains in " + ev_models);
      std::map<std::string, const Model*> by_source;
      for (std::size_t i = 0; i < domains.size(); ++i) by_source[domains[i]] = &models[i];
      const auto tm = evaluate_transfer(by_source, m, domains);
      write_file(fs::path(ev_out) / "transfer.csv", render_table(tm, TableFormat::csv));
      write_file(fs::path(ev_out) / "transfer.tex", render_table(tm, TableFormat::latex));
      const auto text = render_table(tm, TableFormat::text);
      write_file(fs::path(ev_out) / "transfer.txt", text);
      std::cout << text;
    };
  });

  // ablate
  auto* abl = app.add_subcommand("ablate", "Run one ablation axis");
  std::string ab_config, ab_axis, ab_out;
  std::vector<std::string> ab_values;
  abl->add_option("--config", ab_config, "Experiment config JSON")->required()->check(CLI::ExistingFile);
  abl->add_option("--axis", ab_axis, "aggregator | modality-subset | heads | image-size")->required();
  abl->add_option("--values", ab_values, "Axis values (default: full axis)")->delimiter(',');
  abl->add_option("--out", ab_out, "Output directory (overrides config)");
  auto* ab_seed = abl->add_option("--seed", seed);
  abl->callback([&] {
    action = [&] {
      auto c = ExperimentConfig::load(ab_config);
      if (ab_seed->count()) c.seed = seed;
      if (!ab_out.empty()) c.output_dir = ab_out;
      const auto entries = run_ablation(c, parse_ablation_axis(ab_axis), ab_values);
      for (const auto& e : entries) std::printf("%-18s Average of IA %.2f\n", e.value.c_str(), 100 * e.matrix.average_ia());
    };
  });

  // perturb
  auto* per = app.add_subcommand("perturb", "Natural perturbation suite on a test split");
  std::string pe_model, pe_manifest, pe_out, pe_domain;
  std::vector<std::string> pe_kinds;
  per->add_option("--model", pe_model)->required()->check(CLI::ExistingFile);
  per->add_option("--manifest", pe_manifest)->required()->check(CLI::ExistingFile);
  per->add_option("--kinds", pe_kinds, "gaussian-noise,gaussian-blur,jpeg,sharpen,color-jitter")->delimiter(',');
  per->add_option("--domain", pe_domain, "Test domain (default: the model's source)");
  per->add_option("--out", pe_out, "Report csv path")->required();
  per->add_option("--seed", seed);
  per->callback([&] {
    action = [&] {
      const auto model = load_checkpoint(pe_model);
      const auto m = load_manifest(pe_manifest);
      RobustnessConfig rc = seeded(seed).seeded_robustness();
      if (!pe_kinds.empty()) {
        rc.kinds.clear();
        for (const auto& k : pe_kinds) rc.kinds.push_back(parse_perturbation_kind(k));
      }
      const auto rep = robustness_eval(model, test_records(m, model, pe_domain), rc);
      write_file(pe_out, rep.to_csv());
      for (const auto& [k, f1] : rep.average_f1)
        std::printf("%-15s avg F1 %.4f  FID-lite %.4f\n", k.c_str(), f1, rep.pooled_fid.count(k) ? rep.pooled_fid.at(k) : -1.0);
      for (const auto& n : rep.notes) std::cout << "note: " << n << "\n";
    };
  });

  // attack
  auto* att = app.add_subcommand("attack", "White-box FGSM/PGD on fake test images");
  std::string at_model, at_manifest, at_out, at_kind = "fgsm", at_domain;
  AttackConfig ac;
  att->add_option("--model", at_model)->required()->check(CLI::ExistingFile);
  att->add_option("--manifest", at_manifest)->required()->check(CLI::ExistingFile);
  att->add_option("--kind", at_kind, "fgsm | pgd");
  att->add_option("--eps", ac.epsilon);
  att->add_option("--alpha", ac.alpha);
  att->add_option("--steps", ac.steps);
  att->add_option("--domain", at_domain, "Test domain (default: the model's source)");
  att->add_option("--out", at_out, "Report csv path")->required();
  att->add_option("--seed", seed);
  att->callback([&] {
    action = [&] {
      ac.kind = parse_attack_kind(at_kind);
      ac.validate();
      const auto model = load_checkpoint(at_model);
      const auto m = load_manifest(at_manifest);
      RobustnessConfig rc = seeded(seed).seeded_robustness();
      rc.kinds.clear();
      rc.compute_fid = false;
      rc.attacks = {ac};
      const auto rep = robustness_eval(model, test_records(m, model, at_domain), rc);
      write_file(at_out, rep.to_csv());
      std::printf("clean fake F1 %.4f, attacked fake F1 %.4f (%s)\n", rep.baseline_fake.f1,
                  rep.attacks.front().metrics.f1, ac.name().c_str());
    };
  });

  // spectra
  auto* spe = app.add_subcommand("spectra", "Average log-DCT spectra per domain and class");
  std::string sp_manifest, sp_out, sp_split = "test";
  std::vector<double> sp_clip{-25, 5};
  spe->add_option("--manifest", sp_manifest)->required()->check(CLI::ExistingFile);
  spe->add_option("--clip", sp_clip, "Display range lo hi")->expected(2);
  spe->add_option("--split", sp_split, "train | val | test");
  spe->add_option("--out", sp_out)->required();
  spe->add_option("--seed", seed);
  spe->callback([&] {
    action = [&] {
      const auto m = load_manifest(sp_manifest);
      const Split split = parse_split(sp_split);
      std::vector<const SampleRecord*> recs;
      for (const auto& d : m.domains) {
        auto r = m.select(d, split);
        recs.insert(recs.end(), r.begin(), r.end());
      }
      const auto s = spectrum_summary(recs, sp_clip.at(0), sp_clip.at(1));
      const auto files = render_spectra(s, sp_out);
      std::cout << "wrote " << files.size() << " files to " << sp_out << "\n";
    };
  });

  // attn-map
  auto* atn = app.add_subcommand("attn-map", "Average attention matrices on a test split");
  std::string am_model, am_manifest, am_out, am_domain, am_grouping = "class";
  atn->add_option("--model", am_model)->required()->check(CLI::ExistingFile);
  atn->add_option("--manifest", am_manifest)->required()->check(CLI::ExistingFile);
  atn->add_option("--domain", am_domain, "Test domain (default: the model's source)");
  atn->add_option("--grouping", am_grouping, "class | all");
  atn->add_option("--out", am_out)->required();
  atn->add_option("--seed", seed);
  atn->callback([&] {
    action = [&] {
      if (am_grouping != "class" && am_grouping != "all") throw ConfigError("grouping must be class or all");
      const auto model = load_checkpoint(am_model);
      const auto m = load_manifest(am_manifest);
      const auto s = attention_summary(model, test_records(m, model, am_domain),
                                       am_grouping == "all" ? AttentionGrouping::all : AttentionGrouping::by_class);
      const auto files = render_attention(s, am_out);
      std::cout << "wrote " << files.size() << " files to " << am_out << "\n";
    };
  });

  // run-all
  auto* all = app.add_subcommand("run-all", "Full pipeline: gen-data, train, eval-transfer, robustness, analysis");
  std::string ra_config, ra_out;
  bool ra_resume = false;
  all->add_option("--config", ra_config, "Experiment config JSON")->required()->check(CLI::ExistingFile);
  all->add_option("--out", ra_out, "Output directory (overrides config)");
  all->add_flag("--resume", ra_resume, "Reuse existing checkpoints");
  auto* ra_seed = all->add_option("--seed", seed);
  all->callback([&] {
    action = [&] {
      auto c = ExperimentConfig::load(ra_config);
      if (ra_seed->count()) c.seed = seed;
      if (!ra_out.empty()) c.output_dir = ra_out;
      const auto out = run_full_pipeline(c, ra_resume);
      std::cout << "reports in " << out.string() << "\n";
    };
  });

  CLI11_PARSE(app, argc, argv);
  stage = app.get_subcommands().front()->get_name();
  try {
    action();
  } catch (const StageError& e) {
    std::cerr << "error [" << stage << "/" << e.stage() << "]: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error [" << stage << "]: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
