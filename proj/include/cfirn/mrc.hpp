#pragma once

#include <array>

#include "cfirn/mfi.hpp"
#include "cfirn/nn.hpp"

namespace cfirn {

inline constexpr int kRefinedDim = 512;

/// Per-scale refined vectors OR^k (ascending scale order).
using RefinedEmbedding = std::array<Var, 2>;

/// Linear -> BN -> dropout.
struct LinearBlock {
  LinearBlock(ParamStore& store, const std::string& name, int in_features, int out_features, double dropout);
  Var forward(const Var& x, const ForwardContext& ctx) const;

  Linear linear;
  BatchNorm bn;
  double dropout_rate;
};

/// Multiscale refinement classifier: one LinearBlock per scale and a single
/// classifier head shared by both scales (and both branches).
class Mrc {
 public:
  Mrc(ParamStore& store, int in_channels, int num_classes, double dropout, int refined_dim = kRefinedDim);

  RefinedEmbedding refine(const IntegratedVectors& om, const ForwardContext& ctx) const;
  /// Fused prediction: mean of the shared head's per-scale logits.
  Var classify(const RefinedEmbedding& refined) const;
  int num_classes() const { return num_classes_; }

  LinearBlock block_lo;
  LinearBlock block_hi;
  Linear classifier;

 private:
  int num_classes_;
};

/// Retrieval feature: L2-normalized concatenation [OR^lo ; OR^hi]. The
/// classifier never takes part.
Var test_feature(const RefinedEmbedding& refined);

}  // namespace cfirn
