#pragma once

// Tape-free reverse-mode autodiff. Each op allocates a Node that keeps its
// inputs alive and a closure that pushes the node's gradient to them;
// `backward(root)` walks the graph in reverse topological order.
//
// Gradient recording is disabled inside a NoGradGuard (thread-local), which
// is how eval-mode inference stays allocation-light and free of shared
// mutable state.

#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cfirn/tensor.hpp"

namespace cfirn {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<Var> inputs;
  std::function<void(Node&)> backward_fn;

  /// Allocates a zero gradient of the value's shape on first use.
  Tensor& grad_buffer();
};

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

Var constant(Tensor value);
Var parameter(Tensor value);

/// Seeds d(root)/d(root) = 1 for a single-element root and accumulates into
/// every reachable node that requires grad.
void backward(const Var& root);

/// Running statistics of a batch-norm layer (not trained by gradient).
struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;
};

namespace ops {

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad, int groups = 1);
Var linear(const Var& x, const Var& weight, const Var& bias);

/// Batch norm over axis 1 for (N, C) or (N, C, H, W) input. In training mode
/// batch statistics normalize the input and `stats` is updated in place.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormStats& stats, bool training,
               double momentum = 0.1, double eps = 1e-5);
/// Eval-mode batch norm; never touches `stats`.
Var batch_norm_eval(const Var& x, const Var& gamma, const Var& beta, const BatchNormStats& stats,
                    double eps = 1e-5);

/// Layer norm across channels at each spatial position of (N, C, H, W).
Var layer_norm_channels(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-6);

Var relu(const Var& x);
Var gelu(const Var& x);
Var sigmoid(const Var& x);

/// Elementwise with broadcasting: `b` has the same rank as `a` and each of
/// its dims is either equal to a's or 1.
Var add(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double factor);
/// sum_i weights[i] * parts[i] over same-shaped inputs.
Var weighted_sum(const std::vector<Var>& parts, const std::vector<double>& weights);

Var concat_channels(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var slice_rows(const Var& x, int begin, int end);
Var reshape(const Var& x, Shape shape);

Var resize_bilinear(const Var& x, int out_h, int out_w);

/// (N, C, H, W) -> (N, C)
Var mean_spatial(const Var& x);
Var max_spatial(const Var& x);
/// (N, C, H, W) -> (N, 1, H, W)
Var mean_channels(const Var& x);
Var max_channels(const Var& x);

/// Inverted dropout; identity when `training` is false or rate == 0.
Var dropout(const Var& x, double rate, bool training, std::mt19937_64* rng);

/// Row-wise L2 normalization of (N, D).
Var l2_normalize_rows(const Var& x, double eps = 1e-12);

/// Mean over rows of -log softmax(logits)[target].
Var cross_entropy(const Var& logits, std::span<const int> targets);

/// Mean over rows of 0.5 * (KL(P||Q) + KL(Q||P)) with P, Q = softmax of the
/// row logits. Probabilities are floored at `floor` inside the logs.
Var symmetric_kl(const Var& p_logits, const Var& q_logits, double floor = 1e-12);

struct TripletIndex {
  int anchor;
  int positive;
  int negative;
};
/// Mean over triplets of max(|a-p| - |a-n| + margin, 0) on rows of `embeddings`.
/// Empty triplet list gives a zero loss.
Var triplet_margin(const Var& embeddings, std::span<const TripletIndex> triplets, double margin);

}  // namespace ops

}  // namespace cfirn
