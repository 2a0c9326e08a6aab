#include "cfirn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "cfirn/error.hpp"

namespace cfirn {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'C', 'F', 'I', 'R', 'N', 'C', 'K', 'P'};

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T take(std::span<const std::uint8_t> bytes, std::size_t& pos) {
  if (pos + sizeof(T) > bytes.size()) throw ValidationError("checkpoint is truncated");
  T v;
  std::memcpy(&v, bytes.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

json encoder_json(const EncoderSpec& e) {
  return {{"name", e.name}, {"in_channels", e.in_channels}, {"channels", e.channels}, {"stride", e.stride},
          {"pretrained", e.pretrained}};
}

EncoderSpec encoder_from_json(const json& j) {
  EncoderSpec e;
  e.name = j.at("name").get<std::string>();
  e.in_channels = j.at("in_channels").get<int>();
  e.channels = j.at("channels").get<int>();
  e.stride = j.at("stride").get<int>();
  e.pretrained = j.value("pretrained", std::string{});
  return e;
}

}  // namespace

Checkpoint make_checkpoint(const CfirnModel& model, std::vector<int> vocabulary, int epoch, json metrics) {
  Checkpoint ck;
  ck.config = model.config();
  ck.encoder = model.encoder().spec();
  ck.vocabulary = std::move(vocabulary);
  ck.epoch = epoch;
  ck.metrics = std::move(metrics);
  ck.tensors = model.params().state();
  return ck;
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck) {
  json table = json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : ck.tensors) {
    table.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.numel();
  }
  const json header = {{"format_version", Checkpoint::kFormatVersion},
                       {"config", ck.config.to_json()},
                       {"encoder", encoder_json(ck.encoder)},
                       {"vocabulary", ck.vocabulary},
                       {"epoch", ck.epoch},
                       {"metrics", ck.metrics},
                       {"tensors", table}};
  const std::string text = header.dump();
  std::vector<std::uint8_t> out(kMagic, kMagic + 8);
  put<std::uint32_t>(out, Checkpoint::kFormatVersion);
  put<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset * sizeof(double));
  for (const auto& [name, t] : ck.tensors) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(t.data());
    out.insert(out.end(), p, p + t.numel() * sizeof(double));
  }
  return out;
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 8) != 0) throw ValidationError("not a checkpoint file");
  std::size_t pos = 8;
  const auto version = take<std::uint32_t>(bytes, pos);
  if (version != Checkpoint::kFormatVersion) {
    throw ValidationError("unsupported checkpoint format version " + std::to_string(version));
  }
  const auto len = take<std::uint64_t>(bytes, pos);
  if (pos + len > bytes.size()) throw ValidationError("checkpoint header is truncated");
  Checkpoint ck;
  json header;
  try {
    header = json::parse(bytes.begin() + pos, bytes.begin() + pos + len);
    pos += len;
    ck.config.merge_json(header.at("config"));
    ck.encoder = encoder_from_json(header.at("encoder"));
    ck.vocabulary = header.at("vocabulary").get<std::vector<int>>();
    ck.epoch = header.at("epoch").get<int>();
    ck.metrics = header.at("metrics");
  } catch (const json::exception& e) {
    throw ValidationError(std::string("bad checkpoint header: ") + e.what());
  }
  const std::size_t data_start = pos;
  for (const json& entry : header.at("tensors")) {
    Shape shape = entry.at("shape").get<Shape>();
    const std::size_t offset = entry.at("offset").get<std::size_t>();
    Tensor t(shape);
    const std::size_t begin = data_start + offset * sizeof(double);
    if (begin + t.numel() * sizeof(double) > bytes.size()) throw ValidationError("checkpoint tensor data is truncated");
    std::memcpy(t.data(), bytes.data() + begin, t.numel() * sizeof(double));
    ck.tensors.emplace(entry.at("name").get<std::string>(), std::move(t));
  }
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  const auto bytes = serialize_checkpoint(checkpoint);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

std::unique_ptr<CfirnModel> model_from_checkpoint(const Checkpoint& ck) {
  if (ck.config.mrc_enabled && ck.vocabulary.empty()) throw ValidationError("checkpoint has an empty class vocabulary");
  const int classes = ck.vocabulary.empty() ? 1 : static_cast<int>(ck.vocabulary.size());
  auto model = std::make_unique<CfirnModel>(ck.config, classes, ck.encoder);
  model->params().load_state(ck.tensors, true);
  return model;
}

std::size_t import_pretrained_encoder(CfirnModel& model, const std::filesystem::path& path) {
  const Checkpoint src = load_checkpoint(path);
  const std::size_t n = model.params().load_state(src.tensors, false, "encoder.");
  if (n == 0) throw ValidationError("no encoder tensors found in " + path.string());
  return n;
}

}  // namespace cfirn
