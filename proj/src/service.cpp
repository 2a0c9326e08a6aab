#include "cfirn/service.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

// Bursts of clients queue in the kernel rather than being refused.
#define CPPHTTPLIB_LISTEN_BACKLOG 256
#include <httplib.h>

#include "cfirn/error.hpp"
#include "cfirn/hash.hpp"
#include "cfirn/version.hpp"

namespace cfirn {

using nlohmann::json;

namespace {

HttpReply json_reply(int status, const json& j) { return {status, "application/json", j.dump()}; }

HttpReply bad_request(const std::string& reason) { return json_reply(400, {{"error", reason}}); }

std::optional<int> env_int(const char* name) {
  const char* v = std::getenv(name);
  if (!v || !*v) return std::nullopt;
  try {
    std::size_t used = 0;
    const int n = std::stoi(v, &used);
    if (used == std::string_view(v).size()) return n;
  } catch (const std::exception&) {
  }
  throw ConfigError(std::string(name) + " must be an integer, got '" + v + "'");
}

std::string url_encode_path(std::string_view s) {
  static const char* hex = "0123456789ABCDEF";
  std::string out;
  for (unsigned char c : s) {
    if (std::isalnum(c) || c == '/' || c == '-' || c == '_' || c == '.' || c == '~') {
      out.push_back(static_cast<char>(c));
    } else {
      out.push_back('%');
      out.push_back(hex[c >> 4]);
      out.push_back(hex[c & 15]);
    }
  }
  return out;
}

}  // namespace

void apply_env_overrides(ServiceOptions& options, bool port_given, bool threads_given) {
  if (!port_given) {
    if (auto p = env_int("CFIRN_PORT")) options.port = *p;
  }
  if (!threads_given) {
    if (auto t = env_int("CFIRN_THREADS")) options.threads = *t;
  }
  if (options.port < 0 || options.port > 65535) throw ConfigError("port out of range");
  if (options.threads < 1) throw ConfigError("thread count must be >= 1");
}

std::map<int, std::string> load_labels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open labels file " + path.string());
  std::map<int, std::string> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError("expected 'class_id<TAB>label'", line_no);
    try {
      out[std::stoi(line.substr(0, tab))] = line.substr(tab + 1);
    } catch (const std::exception&) {
      throw ParseError("bad class id", line_no);
    }
  }
  return out;
}

RetrievalService::RetrievalService(std::shared_ptr<const CfirnModel> model, std::shared_ptr<const RetrievalIndex> index,
                                   ServiceOptions options)
    : model_(std::move(model)), index_(std::move(index)), options_(std::move(options)) {
  if (index_->size() > 0 && model_->embedding_dim() != index_->dimension()) {
    throw ValidationError("checkpoint produces " + std::to_string(model_->embedding_dim()) +
                          "-d embeddings but the gallery dump holds " + std::to_string(index_->dimension()) + "-d");
  }
  for (std::size_t i = 0; i < index_->size(); ++i) by_id_.emplace(index_->records()[i].id, i);
}

RetrievalService::~RetrievalService() { stop(); }

HttpReply RetrievalService::health() const {
  return json_reply(200, {{"status", "ok"},
                          {"version", kVersion},
                          {"index_hash", index_->hash()},
                          {"dimension", index_->dimension()},
                          {"gallery_size", index_->size()}});
}

HttpReply RetrievalService::gallery_stats() const {
  std::set<int> classes;
  std::size_t per_font[2] = {0, 0};
  for (const EmbeddingRecord& r : index_->records()) {
    if (r.class_id >= 0) classes.insert(r.class_id);
    ++per_font[static_cast<int>(r.font)];
  }
  return json_reply(200, {{"num_images", index_->size()},
                          {"num_classes", classes.size()},
                          {"images_by_font", {{"query", per_font[0]}, {"gallery", per_font[1]}}},
                          {"dimension", index_->dimension()},
                          {"index_hash", index_->hash()}});
}

HttpReply RetrievalService::query(std::string_view body) const {
  json req;
  try {
    req = json::parse(body);
  } catch (const json::exception&) {
    return bad_request("request body is not valid JSON");
  }
  if (!req.is_object()) return bad_request("request body must be a JSON object");
  if (!req.contains("image") || !req["image"].is_string()) return bad_request("'image' must be a base64 PNG string");
  if (!req.contains("k") || !req["k"].is_number_integer()) return bad_request("'k' must be an integer");
  const long long k = req["k"].get<long long>();
  if (k < 1) return bad_request("'k' must be >= 1");
  std::optional<FontRole> font;
  if (req.contains("font") && !req["font"].is_null()) {
    if (!req["font"].is_string()) return bad_request("'font' must be a string");
    font = parse_font_role(req["font"].get<std::string>());
    if (!font) return bad_request("unknown font '" + req["font"].get<std::string>() + "'");
  }
  std::size_t searchable = index_->size();
  if (font) {
    searchable = 0;
    for (const auto& r : index_->records()) searchable += r.font == *font;
  }
  if (static_cast<std::size_t>(k) > searchable) {
    return bad_request("k = " + std::to_string(k) + " exceeds the gallery size " + std::to_string(searchable));
  }
  Image image;
  try {
    const auto bytes = base64_decode(req["image"].get<std::string>());
    image = decode_png(bytes);
  } catch (const Error& e) {
    return bad_request(std::string("malformed image: ") + e.what());
  }

  try {
    const std::vector<Image> one{image};
    const auto vec = embed_images(*model_, one).front();
    const auto hits = index_->query(vec, static_cast<std::size_t>(k), font);
    json results = json::array();
    for (std::size_t i = 0; i < hits.size(); ++i) {
      const EmbeddingRecord& r = index_->records()[hits[i].index];
      const auto label = options_.labels.find(r.class_id);
      results.push_back({{"rank", i + 1},
                         {"gallery_image_id", r.id},
                         {"class_id", r.class_id},
                         {"label", label != options_.labels.end() ? label->second : std::to_string(r.class_id)},
                         {"score", hits[i].score},
                         {"font", to_string(r.font)},
                         {"thumbnail", "/thumbnail/" + url_encode_path(r.id)}});
    }
    return json_reply(200, {{"k", k}, {"index_hash", index_->hash()}, {"results", results}});
  } catch (const std::exception& e) {
    // Opaque but reproducible: the same request always maps to the same id.
    const std::string id = sha256_hex(body).substr(0, 12);
    std::cerr << "query " << id << " failed: " << e.what() << std::endl;
    return json_reply(500, {{"error", "internal error"}, {"id", id}});
  }
}

HttpReply RetrievalService::thumbnail(std::string_view id) const {
  const auto it = by_id_.find(std::string(id));
  if (it == by_id_.end()) return json_reply(404, {{"error", "unknown gallery id"}});
  if (options_.image_root.empty()) return json_reply(404, {{"error", "thumbnails are not configured"}});
  std::ifstream in(options_.image_root / it->first, std::ios::binary);
  if (!in) return json_reply(404, {{"error", "image file not found"}});
  std::ostringstream ss;
  ss << in.rdbuf();
  return {200, "image/png", ss.str()};
}

void RetrievalService::install_routes() {
  server_ = std::make_unique<httplib::Server>();
  const int threads = options_.threads;
  server_->new_task_queue = [threads] { return new httplib::ThreadPool(static_cast<std::size_t>(threads)); };
  // httplib defaults to SO_REUSEPORT, which lets a second server bind the
  // same port and silently take a share of the connections. Keep
  // SO_REUSEADDR only, so a busy port is a bind error.
  server_->set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
  });
  auto send = [](httplib::Response& res, const HttpReply& r) {
    res.status = r.status;
    res.set_content(r.body, r.content_type);
  };
  server_->Get("/health", [this, send](const httplib::Request&, httplib::Response& res) { send(res, health()); });
  server_->Get("/gallery/stats",
               [this, send](const httplib::Request&, httplib::Response& res) { send(res, gallery_stats()); });
  server_->Post("/query",
                [this, send](const httplib::Request& req, httplib::Response& res) { send(res, query(req.body)); });
  server_->Get("/thumbnail/(.+)", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, thumbnail(req.matches[1].str()));
  });
  server_->set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr) {
    res.status = 500;
    res.set_content(R"({"error":"internal error"})", "application/json");
  });
}

int RetrievalService::start() {
  install_routes();
  int port = options_.port;
  if (port == 0) {
    port = server_->bind_to_any_port(options_.host);
  } else if (!server_->bind_to_port(options_.host, port)) {
    port = -1;
  }
  if (port < 0) throw IoError("cannot bind " + options_.host + ":" + std::to_string(options_.port));
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return port;
}

void RetrievalService::run() {
  install_routes();
  if (!server_->bind_to_port(options_.host, options_.port)) {
    throw IoError("cannot bind " + options_.host + ":" + std::to_string(options_.port));
  }
  std::cerr << "serving on " << options_.host << ":" << options_.port << " (" << index_->size() << " gallery images)"
            << std::endl;
  server_->listen_after_bind();
}

void RetrievalService::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace cfirn
