#pragma once

#include "crossfuse/metrics.hpp"
#include "crossfuse/train.hpp"

#include <map>
#include <string>

namespace crossfuse {

/// Per-(source, target) metrics on target test splits only. Throws DataError naming the pair
/// when a model or a test split is missing.
TransferMatrix evaluate_transfer(const std::map<std::string, const Model*>& models_by_source,
                                 const DatasetManifest& manifest,
                                 const std::vector<std::string>& domains, AccessLog* log = nullptr,
                                 PreparedCache* cache = nullptr);

struct TransferRun {
  std::vector<Model> models;  // aligned with domains
  std::vector<TrainLog> logs;
  TransferMatrix matrix;
};

/// Trains one model per domain with `model_config` and evaluates every pair.
TransferRun train_and_evaluate(const DatasetManifest& manifest, const std::vector<std::string>& domains,
                               const ModelConfig& model_config, const TrainConfig& train_config,
                               PreparedCache* cache = nullptr, AccessLog* log = nullptr);

}  // namespace crossfuse
