#include "cfirn/retrieval.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "cfirn/error.hpp"
#include "cfirn/hash.hpp"

namespace cfirn {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "embedding dump I/O assumes a little-endian host");

namespace {

double dot(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

/// Descending score, then ascending position.
void sort_hits(std::vector<ScoredHit>& hits) {
  std::stable_sort(hits.begin(), hits.end(), [](const ScoredHit& a, const ScoredHit& b) { return a.score > b.score; });
}

}  // namespace

RetrievalIndex::RetrievalIndex(std::vector<EmbeddingRecord> records) : records_(std::move(records)) {
  if (!records_.empty()) dimension_ = static_cast<int>(records_.front().vector.size());
  for (const EmbeddingRecord& r : records_) {
    if (static_cast<int>(r.vector.size()) != dimension_) {
      throw ContractViolation("gallery vector '" + r.id + "' has dimension " + std::to_string(r.vector.size()) +
                              ", expected " + std::to_string(dimension_));
    }
  }
  hash_ = sha256_hex(serialize_embeddings(records_));
}

std::vector<ScoredHit> RetrievalIndex::query(std::span<const float> q, std::size_t k,
                                             std::optional<FontRole> font) const {
  if (static_cast<int>(q.size()) != dimension_) {
    throw ContractViolation("query has dimension " + std::to_string(q.size()) + ", index has " +
                            std::to_string(dimension_));
  }
  std::vector<ScoredHit> hits;
  hits.reserve(records_.size());
  for (std::size_t i = 0; i < records_.size(); ++i) {
    if (font && records_[i].font != *font) continue;
    hits.push_back({i, 0.0});
  }
  if (k > hits.size()) {
    throw ContractViolation("k = " + std::to_string(k) + " exceeds the " + std::to_string(hits.size()) +
                            " searchable gallery items");
  }
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(hits.size());
#pragma omp parallel for schedule(static) if (n > 4096)
  for (std::ptrdiff_t i = 0; i < n; ++i) hits[i].score = dot(q, records_[hits[i].index].vector);
  sort_hits(hits);
  hits.resize(k);
  return hits;
}

std::vector<std::size_t> RetrievalIndex::rank_all(std::span<const float> q) const {
  std::vector<std::size_t> out;
  for (const ScoredHit& h : query(q, records_.size())) out.push_back(h.index);
  return out;
}

double recall_at_k(std::span<const Ranking> rankings, std::span<const int> query_labels,
                   std::span<const int> gallery_labels, std::size_t k) {
  if (rankings.size() != query_labels.size()) throw ContractViolation("recall_at_k: one ranking per query expected");
  if (rankings.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t q = 0; q < rankings.size(); ++q) {
    if (query_labels[q] < 0) throw ContractViolation("recall_at_k: query " + std::to_string(q) + " is unlabeled");
    const std::size_t upto = std::min(k, rankings[q].size());
    for (std::size_t r = 0; r < upto; ++r) {
      if (gallery_labels[rankings[q][r]] == query_labels[q]) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(rankings.size());
}

std::size_t percent_k(std::size_t gallery_size, double q_percent) {
  const double raw = q_percent / 100.0 * static_cast<double>(gallery_size);
  // Guard against 0.01 * 300 landing on 3.0000000000000004.
  const auto k = static_cast<std::size_t>(std::ceil(raw - 1e-9));
  return std::max<std::size_t>(k, 1);
}

double recall_at_percent(std::span<const Ranking> rankings, std::span<const int> query_labels,
                         std::span<const int> gallery_labels, double q_percent) {
  return recall_at_k(rankings, query_labels, gallery_labels, percent_k(gallery_labels.size(), q_percent));
}

ApResult average_precision(std::span<const Ranking> rankings, std::span<const int> query_labels,
                           std::span<const int> gallery_labels) {
  if (rankings.size() != query_labels.size()) throw ContractViolation("average_precision: one ranking per query");
  ApResult out;
  double sum = 0.0;
  for (std::size_t q = 0; q < rankings.size(); ++q) {
    const std::size_t relevant =
        static_cast<std::size_t>(std::count(gallery_labels.begin(), gallery_labels.end(), query_labels[q]));
    if (relevant == 0 || query_labels[q] < 0) {
      ++out.excluded;
      continue;
    }
    double ap = 0.0;
    std::size_t found = 0;
    for (std::size_t r = 0; r < rankings[q].size() && found < relevant; ++r) {
      if (gallery_labels[rankings[q][r]] == query_labels[q]) {
        ++found;
        ap += static_cast<double>(found) / static_cast<double>(r + 1);
      }
    }
    sum += ap / static_cast<double>(relevant);
    ++out.evaluated;
  }
  out.mean_ap = out.evaluated ? sum / static_cast<double>(out.evaluated) : 0.0;
  return out;
}

json MetricsReport::to_json() const {
  return {{"recall@1", recall_at_1},
          {"recall@5", recall_at_5},
          {"recall@10", recall_at_10},
          {"recall@1%", recall_at_1_percent},
          {"ap", ap},
          {"num_queries", num_queries},
          {"num_gallery", num_gallery},
          {"ap_excluded", ap_excluded}};
}

std::string MetricsReport::table(const std::string& method) const {
  std::ostringstream os;
  os << std::left << std::setw(16) << "Method" << std::right;
  for (const char* h : {"Recall@1", "Recall@5", "Recall@10", "Recall@1%", "AP"}) os << std::setw(11) << h;
  os << '\n' << std::left << std::setw(16) << method << std::right << std::fixed << std::setprecision(2);
  for (double v : {recall_at_1, recall_at_5, recall_at_10, recall_at_1_percent, ap}) os << std::setw(11) << 100.0 * v;
  os << '\n';
  return os.str();
}

MetricsReport compute_metrics(const std::vector<EmbeddingRecord>& queries, const RetrievalIndex& gallery) {
  if (queries.empty()) throw ValidationError("evaluation has no query images");
  if (gallery.size() == 0) throw ValidationError("evaluation has no gallery images");
  std::vector<Ranking> rankings(queries.size());
  const std::ptrdiff_t nq = static_cast<std::ptrdiff_t>(queries.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t q = 0; q < nq; ++q) rankings[q] = gallery.rank_all(queries[q].vector);
  std::vector<int> ql, gl;
  for (const auto& r : queries) ql.push_back(r.class_id);
  for (const auto& r : gallery.records()) gl.push_back(r.class_id);
  MetricsReport m;
  m.recall_at_1 = recall_at_k(rankings, ql, gl, 1);
  m.recall_at_5 = recall_at_k(rankings, ql, gl, 5);
  m.recall_at_10 = recall_at_k(rankings, ql, gl, 10);
  m.recall_at_1_percent = recall_at_percent(rankings, ql, gl, 1.0);
  const ApResult ap = average_precision(rankings, ql, gl);
  m.ap = ap.mean_ap;
  m.ap_excluded = ap.excluded;
  m.num_queries = queries.size();
  m.num_gallery = gallery.size();
  return m;
}

std::vector<std::vector<float>> embed_images(const CfirnModel& model, std::span<const Image> images) {
  constexpr std::size_t kChunk = 32;
  std::vector<std::vector<float>> out;
  const int side = model.config().input_size;
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    const std::size_t end = std::min(images.size(), start + kChunk);
    std::vector<Image> chunk;
    for (std::size_t i = start; i < end; ++i) chunk.push_back(preprocess(images[i], side));
    const Tensor f = model.embed(stack_images(chunk));
    const int d = f.dim(1);
    if (!f.all_finite()) throw NumericError("retrieval", "non-finite embedding");
    for (std::size_t r = 0; r < chunk.size(); ++r) {
      std::vector<float> v(d);
      for (int c = 0; c < d; ++c) v[c] = static_cast<float>(f.at(static_cast<int>(r), c));
      out.push_back(std::move(v));
    }
  }
  return out;
}

ExtractionResult extract_embeddings(const CfirnModel& model, const DatasetManifest& manifest,
                                    std::span<const ManifestEntry> entries) {
  ExtractionResult result;
  std::vector<Image> images;
  std::vector<const ManifestEntry*> kept;
  for (const ManifestEntry& e : entries) {
    try {
      images.push_back(read_png(manifest.resolve(e)));
      kept.push_back(&e);
    } catch (const Error& err) {
      result.skipped.push_back(e.path + ": " + err.what());
    }
  }
  const auto vectors = embed_images(model, images);
  for (std::size_t i = 0; i < kept.size(); ++i) {
    result.records.push_back({kept[i]->path, kept[i]->class_id, kept[i]->font, vectors[i]});
  }
  return result;
}

Evaluation evaluate(const CfirnModel& model, const DatasetManifest& manifest, const ClassSplit& split) {
  for (int c : split.test_classes) {
    if (split.train_classes.count(c)) throw ContractViolation("class " + std::to_string(c) + " is in both splits");
  }
  const auto q_entries = select_entries(manifest, split.test_classes, FontRole::query);
  const auto g_entries = select_entries(manifest, split.test_classes, FontRole::gallery);
  if (q_entries.empty()) throw ValidationError("test split has no query-font images");
  if (g_entries.empty()) throw ValidationError("test split has no gallery-font images");
  ExtractionResult q = extract_embeddings(model, manifest, q_entries);
  ExtractionResult g = extract_embeddings(model, manifest, g_entries);
  Evaluation ev;
  ev.metrics = compute_metrics(q.records, RetrievalIndex(std::move(g.records)));
  ev.skipped = std::move(q.skipped);
  ev.skipped.insert(ev.skipped.end(), g.skipped.begin(), g.skipped.end());
  return ev;
}

Evaluation evaluate(const Checkpoint& checkpoint, const DatasetManifest& manifest) {
  const auto model = model_from_checkpoint(checkpoint);
  const ClassSplit split =
      split_by_class(manifest, checkpoint.config.holdout_fraction, checkpoint.config.split_seed);
  return evaluate(*model, manifest, split);
}

// --------------------------------------------------------------------------
// Dump format

namespace {

constexpr char kEmbMagic[8] = {'C', 'F', 'E', 'M', 'B', '\0', '\0', '\0'};
constexpr std::uint32_t kEmbVersion = 1;

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T take(std::span<const std::uint8_t> bytes, std::size_t& pos) {
  if (pos + sizeof(T) > bytes.size()) throw ValidationError("embedding dump is truncated");
  T v;
  std::memcpy(&v, bytes.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

std::vector<std::uint8_t> serialize_embeddings(std::span<const EmbeddingRecord> records) {
  const std::uint32_t dim = records.empty() ? 0 : static_cast<std::uint32_t>(records.front().vector.size());
  std::vector<std::uint8_t> out(kEmbMagic, kEmbMagic + 8);
  put<std::uint32_t>(out, kEmbVersion);
  put<std::uint32_t>(out, dim);
  put<std::uint64_t>(out, records.size());
  for (const EmbeddingRecord& r : records) {
    if (r.vector.size() != dim) throw ContractViolation("embedding '" + r.id + "' has the wrong dimension");
    put<std::uint32_t>(out, static_cast<std::uint32_t>(r.id.size()));
    out.insert(out.end(), r.id.begin(), r.id.end());
    put<std::int32_t>(out, r.class_id);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(r.font));
    for (float v : r.vector) put<float>(out, v);
  }
  return out;
}

std::vector<EmbeddingRecord> deserialize_embeddings(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kEmbMagic, 8) != 0) throw ValidationError("not an embedding dump");
  std::size_t pos = 8;
  const auto version = take<std::uint32_t>(bytes, pos);
  if (version != kEmbVersion) throw ValidationError("unsupported embedding dump version " + std::to_string(version));
  const auto dim = take<std::uint32_t>(bytes, pos);
  const auto count = take<std::uint64_t>(bytes, pos);
  std::vector<EmbeddingRecord> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    EmbeddingRecord r;
    const auto len = take<std::uint32_t>(bytes, pos);
    if (pos + len > bytes.size()) throw ValidationError("embedding dump is truncated");
    r.id.assign(reinterpret_cast<const char*>(bytes.data() + pos), len);
    pos += len;
    r.class_id = take<std::int32_t>(bytes, pos);
    const auto font = take<std::uint8_t>(bytes, pos);
    if (font > 1) throw ValidationError("embedding dump row " + std::to_string(i) + " has font tag " + std::to_string(font));
    r.font = static_cast<FontRole>(font);
    r.vector.resize(dim);
    for (auto& v : r.vector) v = take<float>(bytes, pos);
    out.push_back(std::move(r));
  }
  if (pos != bytes.size()) throw ValidationError("trailing bytes after embedding dump");
  return out;
}

void write_embeddings(const std::filesystem::path& path, std::span<const EmbeddingRecord> records) {
  const auto bytes = serialize_embeddings(records);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<EmbeddingRecord> read_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open embedding dump " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_embeddings(bytes);
}

}  // namespace cfirn
