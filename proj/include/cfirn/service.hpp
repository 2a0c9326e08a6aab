#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <thread>

#include "cfirn/model.hpp"
#include "cfirn/retrieval.hpp"

namespace httplib {
class Server;
}

namespace cfirn {

struct ServiceOptions {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0: pick a free port
  int threads = 4;
  std::filesystem::path image_root;   // thumbnails are image_root / gallery id
  std::map<int, std::string> labels;  // class_id -> label shown to the user
};

/// CFIRN_PORT and CFIRN_THREADS, for values the command line left unset.
void apply_env_overrides(ServiceOptions& options, bool port_given, bool threads_given);

/// Two-column TSV: class_id, label. Lines starting with # are comments.
std::map<int, std::string> load_labels(const std::filesystem::path& path);

struct HttpReply {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

/// Read-only query service over a model and a gallery index. The handlers
/// are plain functions of (model, index, request) and are what the HTTP
/// routes call, so they can be exercised without a socket.
class RetrievalService {
 public:
  /// Throws ValidationError if the model's embedding size differs from the
  /// index dimension.
  RetrievalService(std::shared_ptr<const CfirnModel> model, std::shared_ptr<const RetrievalIndex> index,
                   ServiceOptions options);
  ~RetrievalService();

  HttpReply health() const;
  HttpReply gallery_stats() const;
  /// Body: {"image": base64 PNG, "k": int, "font": "gallery" | "query" (optional)}.
  HttpReply query(std::string_view body) const;
  HttpReply thumbnail(std::string_view id) const;

  /// Binds and serves on a background thread; returns the bound port.
  int start();
  /// Binds and serves on the calling thread until stop().
  void run();
  void stop();

 private:
  void install_routes();

  std::shared_ptr<const CfirnModel> model_;
  std::shared_ptr<const RetrievalIndex> index_;
  ServiceOptions options_;
  std::map<std::string, std::size_t> by_id_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
};

}  // namespace cfirn
