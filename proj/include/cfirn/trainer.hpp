#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <vector>

#include <json.hpp>

#include "cfirn/checkpoint.hpp"
#include "cfirn/config.hpp"
#include "cfirn/glyph_data.hpp"
#include "cfirn/losses.hpp"

namespace cfirn {

/// 2B images: B query-font rows followed by their B gallery-font partners.
struct PairBatch {
  Tensor images;
  std::vector<int> class_ids;  // per pair
  std::vector<int> targets;    // logit index per pair
  bool repeated_classes = false;
};

/// Holds the preprocessed training images of one split and draws paired
/// batches. Classes missing either font are skipped (and counted).
class PairSampler {
 public:
  PairSampler(const DatasetManifest& manifest, const std::set<int>& train_classes, int input_size);

  /// Distinct classes when at least `batch_size` are eligible; otherwise every
  /// eligible class plus random repeats, and the warning counter is bumped.
  PairBatch next(int batch_size, std::mt19937_64& rng, const AugmentConfig& augment);

  /// Eligible classes, ascending; position = logit index.
  const std::vector<int>& vocabulary() const { return vocabulary_; }
  std::size_t skipped_classes() const { return skipped_; }
  std::size_t warnings() const { return warnings_; }
  std::size_t query_image_count() const;

 private:
  std::vector<int> vocabulary_;
  std::vector<std::vector<Image>> query_;    // by logit index
  std::vector<std::vector<Image>> gallery_;  // by logit index
  std::size_t skipped_ = 0;
  std::size_t warnings_ = 0;
};

/// One-shot form of PairSampler::next.
PairBatch build_batch(const DatasetManifest& manifest, const ClassSplit& split, const TrainConfig& config,
                      std::mt19937_64& rng);

struct LossRecord {
  int step = 0;
  int epoch = 0;
  double cel = 0.0;
  double kl = 0.0;
  double tl = 0.0;
  double total = 0.0;
  double lr = 0.0;       // backbone rate
  double lr_head = 0.0;
  std::size_t triplets = 0;

  nlohmann::json to_json() const;
  friend bool operator==(const LossRecord&, const LossRecord&) = default;
};

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: nothing is written
  bool deterministic = false;     // single-threaded kernels
  bool verbose = false;
  std::function<void(const LossRecord&)> on_step;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LossRecord> log;
  ClassSplit split;
  std::size_t skipped_classes = 0;
  std::size_t batch_warnings = 0;
  std::size_t mining_warnings = 0;
};

/// SGD with momentum (velocity = momentum * velocity + grad + wd * w, no decay
/// on biases and norm parameters), two learning-rate groups, the warmup/decay
/// schedule of `lr_at`. Writes `loss_log.jsonl`, `last.ckpt` every
/// `checkpoint_every` epochs and `model.ckpt` at the end when `out_dir` is
/// set. A non-finite loss aborts with NumericError; `last.ckpt` is left as
/// the last good state.
TrainResult train(const TrainConfig& config, const DatasetManifest& manifest, const TrainOptions& options = {});

/// Applies one SGD step to every parameter holding a gradient.
class Sgd {
 public:
  Sgd(ParamStore& store, double momentum, double weight_decay);
  void step(double lr_backbone, double lr_head);

 private:
  ParamStore& store_;
  double momentum_;
  double weight_decay_;
  std::vector<Tensor> velocity_;
};

}  // namespace cfirn
