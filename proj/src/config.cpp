#include "cfirn/config.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "cfirn/backbone.hpp"
#include "cfirn/error.hpp"

namespace cfirn {

using nlohmann::json;

namespace {

bool power_of_two_ratio(double a, double b) {
  const double r = std::log2(b / a);
  return std::abs(r - std::round(r)) < 1e-9 && std::round(r) >= 1.0;
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError(what); };
  if (epochs < 1) fail("epochs must be >= 1");
  if (batch_size < 2) fail("batch_size must be >= 2 (triplet mining needs two classes)");
  if (!(lr_backbone > 0.0) || !(lr_head > 0.0)) fail("learning rates must be positive");
  if (warmup_epochs < 0) fail("warmup_epochs must be >= 0");
  for (std::size_t i = 0; i < decay_epochs.size(); ++i) {
    if (decay_epochs[i] >= epochs) fail("decay epoch " + std::to_string(decay_epochs[i]) + " is not < epochs");
    if (i > 0 && decay_epochs[i] <= decay_epochs[i - 1]) fail("decay_epochs must be strictly increasing");
  }
  if (!decay_epochs.empty() && warmup_epochs >= decay_epochs.front()) {
    fail("warmup_epochs must be smaller than the first decay epoch");
  }
  if (!(decay_factor > 0.0 && decay_factor <= 1.0)) fail("decay_factor must lie in (0, 1]");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must lie in [0, 1)");
  if (weight_decay < 0.0) fail("weight_decay must be >= 0");
  if (alpha < 0.0) fail("alpha must be >= 0");
  if (margin < 0.0) fail("margin must be >= 0");
  if (!(scales[0] > 0.0) || !(scales[1] > 0.0)) fail("scales must be positive");
  if (!(scales[0] < scales[1])) fail("scales must be two distinct factors in ascending order");
  if (!power_of_two_ratio(scales[0], scales[1])) fail("scale ratio must be a power of two");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
  if (!(augment_pad >= 0.0 && augment_pad <= 0.5)) fail("augment_pad must lie in [0, 0.5]");
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) fail("holdout_fraction must lie in (0, 1)");
  if (checkpoint_every < 0) fail("checkpoint_every must be >= 0");
  if (steps_per_epoch < 0) fail("steps_per_epoch must be >= 0");
  if (input_size < 2 || input_size % 2) fail("input_size must be a positive even number");
  const EncoderSpec spec = encoder_preset(backbone);
  for (double k : scales) {
    const int side = scaled_side(input_size, k);
    if (side % spec.stride) {
      fail("input_size " + std::to_string(input_size) + " at scale " + std::to_string(k) +
           " is not divisible by the " + backbone + " stride " + std::to_string(spec.stride));
    }
  }
}

json TrainConfig::to_json() const {
  return json{{"config_version", kVersion},
              {"epochs", epochs},
              {"batch_size", batch_size},
              {"lr_backbone", lr_backbone},
              {"lr_head", lr_head},
              {"warmup_epochs", warmup_epochs},
              {"decay_epochs", decay_epochs},
              {"decay_factor", decay_factor},
              {"momentum", momentum},
              {"weight_decay", weight_decay},
              {"alpha", alpha},
              {"margin", margin},
              {"input_size", input_size},
              {"scales", scales},
              {"mfi_enabled", mfi_enabled},
              {"mrc_enabled", mrc_enabled},
              {"kl_enabled", kl_enabled},
              {"triplet_enabled", triplet_enabled},
              {"ce_enabled", ce_enabled},
              {"seed", seed},
              {"backbone", backbone},
              {"pretrained", pretrained},
              {"dropout", dropout},
              {"augment", augment},
              {"augment_pad", augment_pad},
              {"holdout_fraction", holdout_fraction},
              {"split_seed", split_seed},
              {"checkpoint_every", checkpoint_every},
              {"steps_per_epoch", steps_per_epoch}};
}

void TrainConfig::merge_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a key/value table");
  const json known = to_json();
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.contains(it.key())) throw ConfigError("unknown config key '" + it.key() + "'");
  }
  if (j.contains("config_version") && j["config_version"].get<int>() > kVersion) {
    throw ConfigError("config_version " + std::to_string(j["config_version"].get<int>()) + " is newer than supported " +
                      std::to_string(kVersion));
  }
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      const json& v = j.at(key);
      using T = std::decay_t<decltype(field)>;
      if constexpr (std::is_same_v<T, double>) {
        if (!v.is_number()) throw ConfigError(std::string(key) + " must be a number");
      } else if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
        if (!v.is_number_integer()) throw ConfigError(std::string(key) + " must be an integer");
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError(std::string(key) + " must be true or false");
      }
      field = v.get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("bad value for ") + key + ": " + e.what());
    }
  };
  get("epochs", epochs);
  get("batch_size", batch_size);
  get("lr_backbone", lr_backbone);
  get("lr_head", lr_head);
  get("warmup_epochs", warmup_epochs);
  get("decay_epochs", decay_epochs);
  get("decay_factor", decay_factor);
  get("momentum", momentum);
  get("weight_decay", weight_decay);
  get("alpha", alpha);
  get("margin", margin);
  get("input_size", input_size);
  if (j.contains("scales")) {
    const json& s = j["scales"];
    if (!s.is_array() || s.size() != 2) throw ConfigError("scales must be a list of two factors");
    scales = {s[0].get<double>(), s[1].get<double>()};
    if (scales[0] > scales[1]) std::swap(scales[0], scales[1]);
  }
  get("mfi_enabled", mfi_enabled);
  get("mrc_enabled", mrc_enabled);
  get("kl_enabled", kl_enabled);
  get("triplet_enabled", triplet_enabled);
  get("ce_enabled", ce_enabled);
  get("seed", seed);
  get("backbone", backbone);
  get("pretrained", pretrained);
  get("dropout", dropout);
  get("augment", augment);
  get("augment_pad", augment_pad);
  get("holdout_fraction", holdout_fraction);
  get("split_seed", split_seed);
  get("checkpoint_every", checkpoint_every);
  get("steps_per_epoch", steps_per_epoch);
}

TrainConfig TrainConfig::full() { return TrainConfig{}; }

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.backbone = "tiny";
  c.epochs = 30;
  c.warmup_epochs = 5;
  c.decay_epochs = {15, 25};
  c.input_size = 128;
  // Higher rates let the KL term grow late in training and end with a
  // larger loss than they started with.
  c.lr_backbone = 0.01;
  c.lr_head = 0.02;
  c.checkpoint_every = 5;
  return c;
}

// --------------------------------------------------------------------------
// Config text

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

/// Strips a trailing `# comment` that is not inside a string.
std::string strip_comment(const std::string& line) {
  bool in_string = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') in_string = !in_string;
    if (line[i] == '#' && !in_string) return line.substr(0, i);
  }
  return line;
}

json parse_scalar(const std::string& text, int line) {
  if (text.empty()) throw ParseError("missing value", line);
  if (text == "true") return true;
  if (text == "false") return false;
  if (text.front() == '"') {
    if (text.size() < 2 || text.back() != '"') throw ParseError("unterminated string", line);
    return text.substr(1, text.size() - 2);
  }
  std::string clean;
  for (char c : text) {
    if (c != '_') clean.push_back(c);
  }
  const bool is_float = clean.find_first_of(".eE") != std::string::npos;
  try {
    std::size_t used = 0;
    if (is_float) {
      const double v = std::stod(clean, &used);
      if (used == clean.size()) return v;
    } else {
      const long long v = std::stoll(clean, &used);
      if (used == clean.size()) return v;
    }
  } catch (const std::exception&) {
  }
  throw ParseError("cannot parse value '" + text + "'", line);
}

}  // namespace

json parse_config_text(std::string_view text) {
  json out = json::object();
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') continue;  // table headers carry no meaning here
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected 'key = value'", line_no);
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ParseError("empty key", line_no);
    if (out.contains(key)) throw ParseError("duplicate key '" + key + "'", line_no);
    if (!value.empty() && value.front() == '[') {
      if (value.back() != ']') throw ParseError("arrays must be written on one line", line_no);
      json arr = json::array();
      const std::string body = trim(value.substr(1, value.size() - 2));
      std::size_t start = 0;
      while (start < body.size()) {
        auto comma = body.find(',', start);
        if (comma == std::string::npos) comma = body.size();
        const std::string item = trim(body.substr(start, comma - start));
        if (!item.empty()) arr.push_back(parse_scalar(item, line_no));
        start = comma + 1;
      }
      out[key] = arr;
    } else {
      out[key] = parse_scalar(value, line_no);
    }
  }
  return out;
}

json read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

TrainConfig load_config(const std::filesystem::path& path, TrainConfig base) {
  base.merge_json(read_config_file(path));
  base.validate();
  return base;
}

std::string to_config_text(const TrainConfig& config) {
  std::ostringstream os;
  const json j = config.to_json();
  for (auto it = j.begin(); it != j.end(); ++it) os << it.key() << " = " << it.value().dump() << '\n';
  return os.str();
}

std::pair<double, double> lr_at(int epoch, const TrainConfig& config) {
  if (epoch < 0 || epoch >= config.epochs) {
    throw ContractViolation("lr_at: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(config.epochs) +
                            ")");
  }
  double factor = 1.0;
  if (epoch < config.warmup_epochs) {
    factor = 0.1 + 0.9 * static_cast<double>(epoch) / config.warmup_epochs;
  }
  for (int d : config.decay_epochs) {
    if (epoch >= d) factor *= config.decay_factor;
  }
  return {config.lr_backbone * factor, config.lr_head * factor};
}

}  // namespace cfirn
