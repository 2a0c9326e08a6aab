#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cfirn/autograd.hpp"
#include "cfirn/config.hpp"
#include "cfirn/model.hpp"

namespace cfirn {

struct LossBreakdown {
  double cel = 0.0;
  double kl = 0.0;
  double tl = 0.0;
  double total = 0.0;
  double alpha = 5.0;
  double margin = 0.3;
};

/// total = cel + kl + alpha * tl. Throws NumericError naming the first
/// non-finite component.
LossBreakdown total_loss(double cel, double kl, double tl, double alpha = 5.0, double margin = 0.3);

/// Scalar triplet hinge for a single (anchor, positive, negative).
double triplet_loss(std::span<const double> anchor, std::span<const double> positive,
                    std::span<const double> negative, double margin = 0.3);

/// Batch-hard, cross-branch mining on rows of `embeddings` (B x D). For each
/// anchor: the farthest same-class row of the other branch and the nearest
/// different-class row of the other branch; equal distances resolve to the
/// lower row index. Anchors lacking either candidate are skipped. A batch
/// with fewer than two classes yields no triplets and bumps the warning
/// counter.
std::vector<ops::TripletIndex> mine_triplets(const Tensor& embeddings, std::span<const int> labels,
                                             std::span<const int> branch_tags);
std::size_t mining_warning_count();

/// Differentiable pieces of one training step.
struct LossTerms {
  Var cel;
  Var kl;
  Var tl;
  Var total;
  LossBreakdown breakdown;
  std::size_t triplets = 0;
};

/// `out` comes from a forward pass over 2B images: B query-font rows followed
/// by their B gallery-font partners; `targets` are the B logit indices.
/// Disabled terms (by toggle or because MRC is off) contribute an exact 0.
LossTerms compute_losses(const ModelOutput& out, std::span<const int> targets, const TrainConfig& config);

}  // namespace cfirn
