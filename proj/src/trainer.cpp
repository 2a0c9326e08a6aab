#include "cfirn/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>

#include "cfirn/error.hpp"
#include "cfirn/kernels.hpp"

namespace cfirn {

using nlohmann::json;

PairSampler::PairSampler(const DatasetManifest& manifest, const std::set<int>& train_classes, int input_size) {
  std::map<int, std::pair<std::vector<Image>, std::vector<Image>>> by_class;
  for (int c : train_classes) by_class[c];
  for (const ManifestEntry& e : manifest.entries) {
    auto it = by_class.find(e.class_id);
    if (it == by_class.end()) continue;
    Image im = preprocess(read_png(manifest.resolve(e)), input_size);
    (e.font == FontRole::query ? it->second.first : it->second.second).push_back(std::move(im));
  }
  for (auto& [c, fonts] : by_class) {
    if (fonts.first.empty() || fonts.second.empty()) {
      ++skipped_;
      continue;
    }
    vocabulary_.push_back(c);
    query_.push_back(std::move(fonts.first));
    gallery_.push_back(std::move(fonts.second));
  }
  if (vocabulary_.empty()) throw ValidationError("no training class has images in both fonts");
}

std::size_t PairSampler::query_image_count() const {
  std::size_t n = 0;
  for (const auto& q : query_) n += q.size();
  return n;
}

PairBatch PairSampler::next(int batch_size, std::mt19937_64& rng, const AugmentConfig& augment_config) {
  const int eligible = static_cast<int>(vocabulary_.size());
  std::vector<int> picks(eligible);
  std::iota(picks.begin(), picks.end(), 0);
  PairBatch batch;
  if (eligible >= batch_size) {
    for (int i = 0; i < batch_size; ++i) {
      std::uniform_int_distribution<int> pick(i, eligible - 1);
      std::swap(picks[i], picks[pick(rng)]);
    }
    picks.resize(batch_size);
  } else {
    std::uniform_int_distribution<int> pick(0, eligible - 1);
    while (static_cast<int>(picks.size()) < batch_size) picks.push_back(pick(rng));
    batch.repeated_classes = true;
    ++warnings_;
  }
  std::vector<Image> rows(2 * batch_size);
  for (int i = 0; i < batch_size; ++i) {
    const int t = picks[i];
    std::uniform_int_distribution<std::size_t> qi(0, query_[t].size() - 1);
    std::uniform_int_distribution<std::size_t> gi(0, gallery_[t].size() - 1);
    rows[i] = query_[t][qi(rng)];
    rows[batch_size + i] = gallery_[t][gi(rng)];
    batch.targets.push_back(t);
    batch.class_ids.push_back(vocabulary_[t]);
  }
  if (augment_config.enabled) {
    for (Image& im : rows) im = augment(im, rng, augment_config);
  }
  batch.images = stack_images(rows);
  return batch;
}

PairBatch build_batch(const DatasetManifest& manifest, const ClassSplit& split, const TrainConfig& config,
                      std::mt19937_64& rng) {
  PairSampler sampler(manifest, split.train_classes, config.input_size);
  return sampler.next(config.batch_size, rng, AugmentConfig{config.augment, config.augment_pad});
}

json LossRecord::to_json() const {
  return {{"step", step}, {"epoch", epoch}, {"cel", cel},         {"kl", kl},          {"tl", tl},
          {"total", total}, {"lr", lr},     {"lr_head", lr_head}, {"triplets", triplets}};
}

Sgd::Sgd(ParamStore& store, double momentum, double weight_decay)
    : store_(store), momentum_(momentum), weight_decay_(weight_decay) {
  for (const ParamEntry& p : store.params()) velocity_.emplace_back(p.var->value.shape());
}

void Sgd::step(double lr_backbone, double lr_head) {
  const auto& params = store_.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const ParamEntry& p = params[i];
    if (p.var->grad.numel() == 0) continue;
    const double lr = p.group == ParamGroup::backbone ? lr_backbone : lr_head;
    const double wd = p.decay ? weight_decay_ : 0.0;
    double* w = p.var->value.data();
    const double* g = p.var->grad.data();
    double* v = velocity_[i].data();
    for (std::size_t j = 0; j < p.var->value.numel(); ++j) {
      v[j] = momentum_ * v[j] + (g[j] + wd * w[j]);
      w[j] -= lr * v[j];
    }
  }
}

namespace {

/// Distinct stream per purpose so toggling one consumer (augmentation,
/// dropout) does not shift the others.
std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

TrainResult train(const TrainConfig& config, const DatasetManifest& manifest, const TrainOptions& options) {
  config.validate();
  const int threads_before = kernels::max_threads();
  if (options.deterministic) kernels::set_num_threads(1);
  struct RestoreThreads {
    int n;
    bool active;
    ~RestoreThreads() {
      if (active) kernels::set_num_threads(n);
    }
  } restore{threads_before, options.deterministic};

  TrainResult result;
  result.split = split_by_class(manifest, config.holdout_fraction, config.split_seed);
  PairSampler sampler(manifest, result.split.train_classes, config.input_size);
  result.skipped_classes = sampler.skipped_classes();
  const std::size_t mining_before = mining_warning_count();

  CfirnModel model(config, static_cast<int>(sampler.vocabulary().size()));
  if (!config.pretrained.empty()) import_pretrained_encoder(model, config.pretrained);
  Sgd sgd(model.params(), config.momentum, config.weight_decay);

  std::mt19937_64 batch_rng(stream_seed(config.seed, 1));
  std::mt19937_64 dropout_rng(stream_seed(config.seed, 2));
  const AugmentConfig augment_config{config.augment, config.augment_pad};
  const int steps = config.steps_per_epoch > 0
                        ? config.steps_per_epoch
                        : static_cast<int>((sampler.query_image_count() + config.batch_size - 1) / config.batch_size);

  std::ofstream log_file;
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    log_file.open(options.out_dir / "loss_log.jsonl", std::ios::trunc);
    if (!log_file) throw IoError("cannot write " + (options.out_dir / "loss_log.jsonl").string());
    std::ofstream(options.out_dir / "config.toml") << to_config_text(config);
    // The initial weights are the first "last good" state.
    save_checkpoint(options.out_dir / "last.ckpt", make_checkpoint(model, sampler.vocabulary(), 0));
  }

  auto epoch_mean = [&](int epoch) {
    double s = 0.0;
    int n = 0;
    for (const LossRecord& r : result.log) {
      if (r.epoch == epoch) s += r.total, ++n;
    }
    return n ? s / n : 0.0;
  };

  int step = 0;
  ForwardContext ctx{true, &dropout_rng};
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto [lr_b, lr_h] = lr_at(epoch, config);
    for (int s = 0; s < steps; ++s, ++step) {
      const PairBatch batch = sampler.next(config.batch_size, batch_rng, augment_config);
      LossTerms terms;
      try {
        const ModelOutput out = model.forward(batch.images, ctx);
        terms = compute_losses(out, batch.targets, config);
        model.params().zero_grad();
        if (terms.total->requires_grad) {
          backward(terms.total);
          sgd.step(lr_b, lr_h);
        }
        // Overflow can reach the weights or BN buffers before any loss does.
        const std::string bad = model.params().first_non_finite();
        if (!bad.empty()) throw NumericError("trainer", "non-finite value in " + bad);
      } catch (const NumericError& e) {
        std::string where = options.out_dir.empty() ? std::string("no checkpoint written")
                                                    : "last good checkpoint: " + (options.out_dir / "last.ckpt").string();
        throw NumericError(e.module(), std::string(e.what()) + " at step " + std::to_string(step) + " (" + where + ")");
      }
      LossRecord rec;
      rec.step = step;
      rec.epoch = epoch;
      rec.cel = terms.breakdown.cel;
      rec.kl = terms.breakdown.kl;
      rec.tl = terms.breakdown.tl;
      rec.total = terms.breakdown.total;
      rec.lr = lr_b;
      rec.lr_head = lr_h;
      rec.triplets = terms.triplets;
      result.log.push_back(rec);
      if (log_file.is_open()) log_file << rec.to_json().dump() << '\n';
      if (options.on_step) options.on_step(rec);
    }
    if (options.verbose) {
      std::cerr << "epoch " << epoch + 1 << "/" << config.epochs << " mean total " << epoch_mean(epoch) << '\n';
    }
    if (!options.out_dir.empty() && config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0) {
      log_file.flush();
      save_checkpoint(options.out_dir / "last.ckpt", make_checkpoint(model, sampler.vocabulary(), epoch + 1));
    }
  }
  model.params().zero_grad();

  result.batch_warnings = sampler.warnings();
  result.mining_warnings = mining_warning_count() - mining_before;
  const json metrics = {{"initial_total", epoch_mean(0)},
                        {"final_total", epoch_mean(config.epochs - 1)},
                        {"steps", step},
                        {"skipped_classes", result.skipped_classes},
                        {"batch_warnings", result.batch_warnings},
                        {"mining_warnings", result.mining_warnings}};
  result.checkpoint = make_checkpoint(model, sampler.vocabulary(), config.epochs, metrics);
  if (!options.out_dir.empty()) save_checkpoint(options.out_dir / "model.ckpt", result.checkpoint);
  return result;
}

}  // namespace cfirn
