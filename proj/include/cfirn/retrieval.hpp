#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cfirn/checkpoint.hpp"
#include "cfirn/glyph_data.hpp"
#include "cfirn/model.hpp"

namespace cfirn {

struct EmbeddingRecord {
  std::string id;    // manifest path of the source image
  int class_id = -1;  // -1: unknown / undeciphered
  FontRole font = FontRole::gallery;
  std::vector<float> vector;  // unit L2 norm

  friend bool operator==(const EmbeddingRecord&, const EmbeddingRecord&) = default;
};

struct ScoredHit {
  std::size_t index;
  double score;  // inner product
};

/// Immutable gallery with exact inner-product search.
class RetrievalIndex {
 public:
  explicit RetrievalIndex(std::vector<EmbeddingRecord> records);

  std::size_t size() const { return records_.size(); }
  int dimension() const { return dimension_; }
  /// SHA-256 of the embedding dump serialization of the records.
  const std::string& hash() const { return hash_; }
  const std::vector<EmbeddingRecord>& records() const { return records_; }

  /// Top-k gallery positions by descending inner product; equal scores keep
  /// insertion order. With `font`, only records of that role are ranked and
  /// k must not exceed their count.
  std::vector<ScoredHit> query(std::span<const float> q, std::size_t k,
                               std::optional<FontRole> font = std::nullopt) const;
  /// Full ranking (k = size).
  std::vector<std::size_t> rank_all(std::span<const float> q) const;

 private:
  std::vector<EmbeddingRecord> records_;
  int dimension_ = 0;
  std::string hash_;
};

using Ranking = std::vector<std::size_t>;

/// Fraction of queries with a same-class gallery item among the first k.
double recall_at_k(std::span<const Ranking> rankings, std::span<const int> query_labels,
                   std::span<const int> gallery_labels, std::size_t k);
/// K = ceil(q_percent / 100 * gallery_size), at least 1.
std::size_t percent_k(std::size_t gallery_size, double q_percent);
double recall_at_percent(std::span<const Ranking> rankings, std::span<const int> query_labels,
                         std::span<const int> gallery_labels, double q_percent = 1.0);

struct ApResult {
  double mean_ap = 0.0;
  std::size_t evaluated = 0;
  std::size_t excluded = 0;  // queries without any relevant gallery item
};
/// Per-query AP = (1/R) * sum over relevant ranks r of precision@r, averaged
/// over queries that have at least one relevant item.
ApResult average_precision(std::span<const Ranking> rankings, std::span<const int> query_labels,
                           std::span<const int> gallery_labels);

struct MetricsReport {
  double recall_at_1 = 0.0;
  double recall_at_5 = 0.0;
  double recall_at_10 = 0.0;
  double recall_at_1_percent = 0.0;
  double ap = 0.0;
  std::size_t num_queries = 0;
  std::size_t num_gallery = 0;
  std::size_t ap_excluded = 0;

  nlohmann::json to_json() const;
  /// One-row table in the usual R@1 / R@5 / R@10 / R@1% / AP layout
  /// (percentages).
  std::string table(const std::string& method = "CFIRN") const;
};

/// Ranks every query against the gallery and computes all metrics.
MetricsReport compute_metrics(const std::vector<EmbeddingRecord>& queries, const RetrievalIndex& gallery);

/// Eval-mode features for preprocessed images, in chunks.
std::vector<std::vector<float>> embed_images(const CfirnModel& model, std::span<const Image> images);

struct ExtractionResult {
  std::vector<EmbeddingRecord> records;
  std::vector<std::string> skipped;  // "path: reason"
};
/// One record per readable image; unreadable images are reported, not fatal.
ExtractionResult extract_embeddings(const CfirnModel& model, const DatasetManifest& manifest,
                                    std::span<const ManifestEntry> entries);

struct Evaluation {
  MetricsReport metrics;
  std::vector<std::string> skipped;
};
/// Queries: query-font images of the test classes. Gallery: every
/// gallery-font image of the test classes.
Evaluation evaluate(const CfirnModel& model, const DatasetManifest& manifest, const ClassSplit& split);
/// Same, with the split the checkpoint was trained on.
Evaluation evaluate(const Checkpoint& checkpoint, const DatasetManifest& manifest);

/// Embedding dump: "CFEMB\0\0\0", u32 version, u32 dimension, u64 count, then
/// per row u32 id length, id bytes, i32 class_id, u8 font, dimension x f32.
/// All little-endian.
std::vector<std::uint8_t> serialize_embeddings(std::span<const EmbeddingRecord> records);
std::vector<EmbeddingRecord> deserialize_embeddings(std::span<const std::uint8_t> bytes);
void write_embeddings(const std::filesystem::path& path, std::span<const EmbeddingRecord> records);
std::vector<EmbeddingRecord> read_embeddings(const std::filesystem::path& path);

}  // namespace cfirn
