#pragma once

#include <array>
#include <memory>

#include "cfirn/backbone.hpp"
#include "cfirn/config.hpp"
#include "cfirn/mfi.hpp"
#include "cfirn/mrc.hpp"

namespace cfirn {

struct ModelOutput {
  std::array<Var, 2> maps;        // encoder outputs, ascending scale
  IntegratedVectors integrated;   // OM^k
  RefinedEmbedding refined;       // OR^k; null when MRC is disabled
  Var logits;                     // fused class prediction; null when MRC is disabled
  Var feature;                    // unit-norm retrieval feature
};

/// Shared encoder, MFI (or the pooling bypass), MRC (or the OM concatenation
/// bypass). One instance serves both siamese branches.
class CfirnModel {
 public:
  CfirnModel(const TrainConfig& config, int num_classes);
  CfirnModel(const TrainConfig& config, int num_classes, const EncoderSpec& encoder);

  /// `images` is (N, 1, S, S) at the configured input size.
  ModelOutput forward(const Tensor& images, const ForwardContext& ctx) const;
  /// Eval-mode retrieval features, (N, D), no graph recorded.
  Tensor embed(const Tensor& images) const;
  int embedding_dim() const;

  ParamStore& params() { return *store_; }
  const ParamStore& params() const { return *store_; }
  const Encoder& encoder() const { return *encoder_; }
  const Mfi* mfi() const { return mfi_.get(); }
  const Mrc* mrc() const { return mrc_.get(); }
  const TrainConfig& config() const { return config_; }
  int num_classes() const { return num_classes_; }

 private:
  TrainConfig config_;
  int num_classes_;
  std::unique_ptr<ParamStore> store_;
  std::unique_ptr<Encoder> encoder_;
  std::unique_ptr<Mfi> mfi_;
  std::unique_ptr<Mrc> mrc_;
};

/// Stacks preprocessed images into an (N, 1, S, S) batch.
Tensor stack_images(std::span<const Image> images);

}  // namespace cfirn
