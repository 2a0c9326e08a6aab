#include "cfirn/ablation.hpp"

#include <iomanip>
#include <sstream>

#include "cfirn/error.hpp"

namespace cfirn {

using nlohmann::json;

std::vector<AblationRow> ablation_matrix(std::string_view name) {
  const std::vector<AblationRow> components = {
      {"full", json::object()},
      {"no-mfi", {{"mfi_enabled", false}}},
      {"no-mrc", {{"mrc_enabled", false}}},
  };
  const std::vector<AblationRow> resolutions = {
      {"scales-0.5-1", {{"scales", {0.5, 1.0}}}},
      {"scales-1-2", {{"scales", {1.0, 2.0}}}},
      {"scales-0.5-2", {{"scales", {0.5, 2.0}}}},
  };
  if (name == "components") return components;
  if (name == "resolutions") return resolutions;
  if (name == "all") {
    auto all = components;
    all.insert(all.end(), resolutions.begin(), resolutions.end());
    return all;
  }
  throw ConfigError("unknown ablation matrix '" + std::string(name) + "' (components, resolutions, all)");
}

std::vector<AblationRow> parse_ablation_rows(const json& j) {
  if (!j.is_array() || j.empty()) throw ConfigError("ablation rows must be a non-empty JSON array");
  std::vector<AblationRow> rows;
  for (const json& r : j) {
    if (!r.is_object() || !r.contains("name") || !r["name"].is_string()) {
      throw ConfigError("each ablation row needs a string 'name'");
    }
    rows.push_back({r["name"].get<std::string>(), r.value("overrides", json::object())});
  }
  return rows;
}

json AblationReport::to_json() const {
  json out = json::array();
  for (const AblationResult& r : rows) {
    json row = {{"name", r.row.name}, {"overrides", r.row.overrides}, {"ok", r.ok}};
    if (r.ok) {
      row["metrics"] = r.metrics.to_json();
    } else {
      row["error"] = r.error;
    }
    out.push_back(row);
  }
  return {{"rows", out}};
}

std::string AblationReport::table() const {
  std::ostringstream os;
  os << std::left << std::setw(18) << "Configuration" << std::right;
  for (const char* h : {"Recall@1", "Recall@5", "Recall@10", "Recall@1%", "AP"}) os << std::setw(11) << h;
  os << '\n' << std::fixed << std::setprecision(2);
  for (const AblationResult& r : rows) {
    os << std::left << std::setw(18) << r.row.name << std::right;
    if (!r.ok) {
      os << "  failed: " << r.error << '\n';
      continue;
    }
    const MetricsReport& m = r.metrics;
    for (double v : {m.recall_at_1, m.recall_at_5, m.recall_at_10, m.recall_at_1_percent, m.ap}) {
      os << std::setw(11) << 100.0 * v;
    }
    os << '\n';
  }
  return os.str();
}

AblationReport ablate(const TrainConfig& base, const DatasetManifest& manifest, const std::vector<AblationRow>& rows,
                      const TrainOptions& options) {
  AblationReport report;
  for (const AblationRow& row : rows) {
    AblationResult result;
    result.row = row;
    try {
      TrainConfig config = base;
      config.merge_json(row.overrides);
      config.validate();
      TrainOptions row_options = options;
      if (!options.out_dir.empty()) row_options.out_dir = options.out_dir / row.name;
      const TrainResult trained = train(config, manifest, row_options);
      const auto model = model_from_checkpoint(trained.checkpoint);
      result.metrics = evaluate(*model, manifest, trained.split).metrics;
      result.ok = true;
    } catch (const std::exception& e) {
      result.error = e.what();
    }
    report.rows.push_back(std::move(result));
  }
  return report;
}

}  // namespace cfirn
