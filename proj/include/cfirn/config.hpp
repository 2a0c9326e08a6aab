#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

namespace cfirn {

/// Every hyperparameter of a training run. Field names are the config-file
/// keys. Defaults are the full-scale schedule; `desk()` is the CPU preset.
struct TrainConfig {
  static constexpr int kVersion = 1;

  int epochs = 340;
  int batch_size = 8;
  double lr_backbone = 0.0015;
  double lr_head = 0.005;
  int warmup_epochs = 80;
  std::vector<int> decay_epochs{180, 240};
  double decay_factor = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  double alpha = 5.0;
  double margin = 0.3;
  int input_size = 256;
  std::array<double, 2> scales{0.5, 1.0};
  bool mfi_enabled = true;
  bool mrc_enabled = true;
  bool kl_enabled = true;
  bool triplet_enabled = true;
  bool ce_enabled = true;
  std::uint64_t seed = 0;

  std::string backbone = "convnext_tiny";
  std::string pretrained;
  double dropout = 0.5;
  bool augment = true;
  double augment_pad = 0.125;  // max random padding per side, fraction of the side
  double holdout_fraction = 0.3;
  std::uint64_t split_seed = 0;
  int checkpoint_every = 10;
  int steps_per_epoch = 0;  // 0: one pass over the training query images

  /// Throws ConfigError on any violated invariant.
  void validate() const;

  nlohmann::json to_json() const;
  /// Keys absent from `j` keep their current values; unknown keys are rejected.
  void merge_json(const nlohmann::json& j);

  static TrainConfig full();
  static TrainConfig desk();
};

/// Parses the flat `key = value` config format (TOML subset: integers,
/// floats, booleans, double-quoted strings, one-line arrays, `#` comments)
/// into a JSON object.
nlohmann::json parse_config_text(std::string_view text);

/// Parsed but unvalidated contents of a config file.
nlohmann::json read_config_file(const std::filesystem::path& path);
/// Loads a config file on top of `base` and validates the result.
TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = TrainConfig{});
std::string to_config_text(const TrainConfig& config);

/// (lr_backbone, lr_head) for an epoch: linear warmup from 10% of base over
/// `warmup_epochs`, then times `decay_factor` per passed decay epoch.
std::pair<double, double> lr_at(int epoch, const TrainConfig& config);

}  // namespace cfirn
