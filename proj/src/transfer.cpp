#include "crossfuse/transfer.hpp"

#include "crossfuse/error.hpp"

namespace crossfuse {

TransferMatrix evaluate_transfer(const std::map<std::string, const Model*>& models_by_source,
                                 const DatasetManifest& manifest,
                                 const std::vector<std::string>& domains, AccessLog* log,
                                 PreparedCache* cache) {
  if (domains.empty()) throw DataError("evaluate_transfer: no domains");
  for (const auto& s : domains) {
    auto it = models_by_source.find(s);
    if (it == models_by_source.end() || !it->second)
      throw DataError("evaluate_transfer: no model for source '" + s + "'");
  }
  PreparedCache local;
  PreparedCache& pc = cache ? *cache : local;
  TransferMatrix m(domains);
  for (std::size_t t = 0; t < domains.size(); ++t) {
    if (!manifest.has_domain(domains[t]))
      throw DataError("evaluate_transfer: target '" + domains[t] + "' is not in the manifest");
    for (std::size_t s = 0; s < domains.size(); ++s) {
      const auto recs = manifest.select(domains[t], Split::test, log);
      if (recs.empty())
        throw DataError("evaluate_transfer: pair (" + domains[s] + " -> " + domains[t] +
                        ") has no test split");
      const Model& model = *models_by_source.at(domains[s]);
      const auto prepared = pc.get_all(model, recs);
      m.at(s, t) = evaluate_prepared(model, prepared).metrics;
    }
  }
  return m;
}

TransferRun train_and_evaluate(const DatasetManifest& manifest, const std::vector<std::string>& domains,
                               const ModelConfig& model_config, const TrainConfig& train_config,
                               PreparedCache* cache, AccessLog* log) {
  PreparedCache local;
  PreparedCache& pc = cache ? *cache : local;
  TransferRun run;
  for (const auto& d : domains) {
    auto r = train_model(manifest, d, Model(model_config), train_config, log, &pc);
    run.models.push_back(std::move(r.model));
    run.logs.push_back(std::move(r.log));
  }
  std::map<std::string, const Model*> by_source;
  for (std::size_t i = 0; i < domains.size(); ++i) by_source[domains[i]] = &run.models[i];
  run.matrix = evaluate_transfer(by_source, manifest, domains, log, &pc);
  return run;
}

}  // namespace crossfuse
