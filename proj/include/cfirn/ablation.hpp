#pragma once

#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cfirn/retrieval.hpp"
#include "cfirn/trainer.hpp"

namespace cfirn {

/// One configuration of the toggle matrix: config keys applied on top of the
/// base config.
struct AblationRow {
  std::string name;
  nlohmann::json overrides = nlohmann::json::object();
};

/// "components" (full / no-mfi / no-mrc), "resolutions" (scale pairs
/// 0.5+1, 1+2, 0.5+2), or "all".
std::vector<AblationRow> ablation_matrix(std::string_view name);
/// JSON array of {"name": ..., "overrides": {...}}.
std::vector<AblationRow> parse_ablation_rows(const nlohmann::json& j);

struct AblationResult {
  AblationRow row;
  bool ok = false;
  std::string error;
  MetricsReport metrics;
};

struct AblationReport {
  std::vector<AblationResult> rows;
  nlohmann::json to_json() const;
  std::string table() const;
};

/// Trains and evaluates every row; a failing row is marked and the rest
/// still run. With `options.out_dir` set, each row writes to a subdirectory
/// named after it.
AblationReport ablate(const TrainConfig& base, const DatasetManifest& manifest, const std::vector<AblationRow>& rows,
                      const TrainOptions& options = {});

}  // namespace cfirn
