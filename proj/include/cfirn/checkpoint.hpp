#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "cfirn/backbone.hpp"
#include "cfirn/config.hpp"
#include "cfirn/model.hpp"

namespace cfirn {

/// Trained model plus everything needed to rebuild and interpret it.
/// On disk: magic "CFIRNCKP", u32 format version, u64 header length, a JSON
/// header (config, encoder spec, vocabulary, epoch, metrics, tensor table),
/// then raw little-endian float64 tensor data in table order.
struct Checkpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  TrainConfig config;
  EncoderSpec encoder;
  std::vector<int> vocabulary;  // logit index -> class_id
  int epoch = 0;
  nlohmann::json metrics = nlohmann::json::object();
  std::map<std::string, Tensor> tensors;
};

Checkpoint make_checkpoint(const CfirnModel& model, std::vector<int> vocabulary, int epoch,
                           nlohmann::json metrics = nlohmann::json::object());

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);

/// Writes through a temporary file and renames, so a crash never leaves a
/// truncated checkpoint behind.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Rebuilds the model; every stored tensor must match the architecture.
std::unique_ptr<CfirnModel> model_from_checkpoint(const Checkpoint& checkpoint);

/// Copies "encoder.*" tensors from a checkpoint file into `model`.
std::size_t import_pretrained_encoder(CfirnModel& model, const std::filesystem::path& path);

}  // namespace cfirn
