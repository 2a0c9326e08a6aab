#include "cfirn/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_set>

#include "cfirn/error.hpp"
#include "cfirn/kernels.hpp"

namespace cfirn {

namespace {

thread_local bool t_grad_enabled = true;

Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool needs = false;
  if (t_grad_enabled) {
    for (const Var& in : inputs) {
      if (in && in->requires_grad) needs = true;
    }
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward_fn = std::move(fn);
  }
  return node;
}

bool wants(const Var& v) { return v && v->requires_grad; }

void require(bool cond, const std::string& what) {
  if (!cond) throw ContractViolation(what);
}

void require_rank(const Var& x, int rank, const char* op) {
  require(x->value.rank() == rank, std::string(op) + ": expected rank " + std::to_string(rank) + " input, got " +
                                       shape_str(x->value.shape()));
}

/// Per-channel view of an (N, C, ...) tensor: N blocks of C planes of `inner` elements.
struct ChannelLayout {
  int n;
  int c;
  std::size_t inner;
};

ChannelLayout channel_layout(const Tensor& t) {
  ChannelLayout l{t.dim(0), t.dim(1), 1};
  for (int a = 2; a < t.rank(); ++a) l.inner *= static_cast<std::size_t>(t.dim(a));
  return l;
}

/// Index into `b` for every element of `a` under rank-preserving broadcasting.
std::vector<std::size_t> broadcast_index(const Shape& a, const Shape& b) {
  require(a.size() == b.size(), "broadcast: rank mismatch " + shape_str(a) + " vs " + shape_str(b));
  const std::size_t rank = a.size();
  std::vector<std::size_t> bstride(rank, 0);
  std::size_t s = 1;
  for (std::size_t i = rank; i-- > 0;) {
    require(b[i] == a[i] || b[i] == 1, "broadcast: incompatible shapes " + shape_str(a) + " vs " + shape_str(b));
    bstride[i] = b[i] == 1 ? 0 : s;
    s *= static_cast<std::size_t>(b[i]);
  }
  const std::size_t total = shape_numel(a);
  std::vector<std::size_t> out(total);
  std::vector<int> idx(rank, 0);
  std::size_t bi = 0;
  for (std::size_t i = 0; i < total; ++i) {
    out[i] = bi;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      bi += bstride[d];
      if (idx[d] < a[d]) break;
      bi -= bstride[d] * static_cast<std::size_t>(idx[d]);
      idx[d] = 0;
    }
  }
  return out;
}

Shape with_axis1(const Shape& s, int c) {
  Shape r = s;
  r[1] = c;
  return r;
}

}  // namespace

Tensor& Node::grad_buffer() {
  if (grad.numel() != value.numel() || grad.shape() != value.shape()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

Var constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return node;
}

Var parameter(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return node;
}

void backward(const Var& root) {
  require(root && root->value.numel() == 1, "backward: root must be a single-element tensor");
  if (!root->requires_grad) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child && child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

namespace ops {

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad, int groups) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 4, "conv2d weight");
  kernels::ConvGeometry g;
  g.batch = x->value.dim(0);
  g.in_channels = x->value.dim(1);
  g.in_h = x->value.dim(2);
  g.in_w = x->value.dim(3);
  g.out_channels = weight->value.dim(0);
  g.kernel_h = weight->value.dim(2);
  g.kernel_w = weight->value.dim(3);
  g.stride = stride;
  g.pad = pad;
  g.groups = groups;
  require(groups > 0 && g.in_channels % groups == 0 && g.out_channels % groups == 0 &&
              weight->value.dim(1) == g.in_channels / groups,
          "conv2d: weight " + shape_str(weight->value.shape()) + " incompatible with input " +
              shape_str(x->value.shape()) + " groups " + std::to_string(groups));
  require(g.out_h() > 0 && g.out_w() > 0, "conv2d: empty output for input " + shape_str(x->value.shape()));
  require(!bias || bias->value.numel() == static_cast<std::size_t>(g.out_channels), "conv2d: bias size mismatch");

  Tensor out({g.batch, g.out_channels, g.out_h(), g.out_w()});
  kernels::conv2d_forward(g, x->value.values(), weight->value.values(),
                          bias ? bias->value.values() : std::span<const double>{}, out.values());
  return make_result(std::move(out), {x, weight, bias}, [g](Node& self) {
    const Var& in = self.inputs[0];
    const Var& w = self.inputs[1];
    const Var& b = self.inputs[2];
    if (wants(in)) kernels::conv2d_backward_input(g, self.grad.values(), w->value.values(), in->grad_buffer().values());
    if (wants(w) || wants(b)) {
      Tensor scratch_w;
      Tensor scratch_b;
      std::span<double> gw;
      std::span<double> gb;
      if (wants(w)) {
        gw = w->grad_buffer().values();
      } else {
        scratch_w = Tensor(w->value.shape());
        gw = scratch_w.values();
      }
      if (b) {
        if (wants(b)) {
          gb = b->grad_buffer().values();
        } else {
          scratch_b = Tensor(b->value.shape());
          gb = scratch_b.values();
        }
      }
      kernels::conv2d_backward_weight(g, in->value.values(), self.grad.values(), gw, gb);
    }
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear weight");
  kernels::LinearGeometry g{x->value.dim(0), x->value.dim(1), weight->value.dim(0)};
  require(weight->value.dim(1) == g.in_features,
          "linear: weight " + shape_str(weight->value.shape()) + " vs input " + shape_str(x->value.shape()));
  require(!bias || bias->value.numel() == static_cast<std::size_t>(g.out_features), "linear: bias size mismatch");
  Tensor out({g.rows, g.out_features});
  kernels::linear_forward(g, x->value.values(), weight->value.values(),
                          bias ? bias->value.values() : std::span<const double>{}, out.values());
  return make_result(std::move(out), {x, weight, bias}, [g](Node& self) {
    const Var& in = self.inputs[0];
    const Var& w = self.inputs[1];
    const Var& b = self.inputs[2];
    if (wants(in)) kernels::linear_backward_input(g, self.grad.values(), w->value.values(), in->grad_buffer().values());
    if (wants(w) || wants(b)) {
      Tensor scratch_w;
      Tensor scratch_b;
      std::span<double> gw;
      std::span<double> gb;
      if (wants(w)) {
        gw = w->grad_buffer().values();
      } else {
        scratch_w = Tensor(w->value.shape());
        gw = scratch_w.values();
      }
      if (b) {
        if (wants(b)) {
          gb = b->grad_buffer().values();
        } else {
          scratch_b = Tensor(b->value.shape());
          gb = scratch_b.values();
        }
      }
      kernels::linear_backward_weight(g, in->value.values(), self.grad.values(), gw, gb);
    }
  });
}

namespace {

/// Shared backward for the affine-normalize family once xhat and inv_std are known.
/// `batch_stats` selects the train-mode formula (statistics depend on x).
void norm_backward(Node& self, const std::vector<double>& xhat, const std::vector<double>& inv_std,
                   bool batch_stats) {
  const Var& x = self.inputs[0];
  const Var& gamma = self.inputs[1];
  const Var& beta = self.inputs[2];
  const ChannelLayout l = channel_layout(self.value);
  const double m = static_cast<double>(l.n) * static_cast<double>(l.inner);
  const double* gy = self.grad.data();
  for (int c = 0; c < l.c; ++c) {
    double sum_gy = 0.0;
    double sum_gy_xhat = 0.0;
    for (int n = 0; n < l.n; ++n) {
      const std::size_t base = (static_cast<std::size_t>(n) * l.c + c) * l.inner;
      for (std::size_t i = 0; i < l.inner; ++i) {
        sum_gy += gy[base + i];
        sum_gy_xhat += gy[base + i] * xhat[base + i];
      }
    }
    if (wants(gamma)) gamma->grad_buffer()[c] += sum_gy_xhat;
    if (wants(beta)) beta->grad_buffer()[c] += sum_gy;
    if (wants(x)) {
      double* gx = x->grad_buffer().data();
      const double gm = gamma->value[c];
      for (int n = 0; n < l.n; ++n) {
        const std::size_t base = (static_cast<std::size_t>(n) * l.c + c) * l.inner;
        for (std::size_t i = 0; i < l.inner; ++i) {
          if (batch_stats) {
            gx[base + i] += gm * inv_std[c] / m * (m * gy[base + i] - sum_gy - xhat[base + i] * sum_gy_xhat);
          } else {
            gx[base + i] += gm * inv_std[c] * gy[base + i];
          }
        }
      }
    }
  }
}

void check_norm_params(const Var& x, const Var& gamma, const Var& beta, const char* op) {
  require(x->value.rank() >= 2, std::string(op) + ": input needs rank >= 2");
  const auto c = static_cast<std::size_t>(x->value.dim(1));
  require(gamma->value.numel() == c && beta->value.numel() == c, std::string(op) + ": parameter size mismatch");
}

}  // namespace

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormStats& stats, bool training,
               double momentum, double eps) {
  if (!training) return batch_norm_eval(x, gamma, beta, stats, eps);
  check_norm_params(x, gamma, beta, "batch_norm");
  const ChannelLayout l = channel_layout(x->value);
  const double m = static_cast<double>(l.n) * static_cast<double>(l.inner);
  std::vector<double> xhat(x->value.numel());
  std::vector<double> inv_std(static_cast<std::size_t>(l.c));
  Tensor out(x->value.shape());
  const double* xv = x->value.data();
  for (int c = 0; c < l.c; ++c) {
    double mean = 0.0;
    for (int n = 0; n < l.n; ++n) {
      const std::size_t base = (static_cast<std::size_t>(n) * l.c + c) * l.inner;
      for (std::size_t i = 0; i < l.inner; ++i) mean += xv[base + i];
    }
    mean /= m;
    double var = 0.0;
    for (int n = 0; n < l.n; ++n) {
      const std::size_t base = (static_cast<std::size_t>(n) * l.c + c) * l.inner;
      for (std::size_t i = 0; i < l.inner; ++i) {
        const double d = xv[base + i] - mean;
        var += d * d;
      }
    }
    var /= m;
    inv_std[c] = 1.0 / std::sqrt(var + eps);
    for (int n = 0; n < l.n; ++n) {
      const std::size_t base = (static_cast<std::size_t>(n) * l.c + c) * l.inner;
      for (std::size_t i = 0; i < l.inner; ++i) {
        xhat[base + i] = (xv[base + i] - mean) * inv_std[c];
        out[base + i] = gamma->value[c] * xhat[base + i] + beta->value[c];
      }
    }
    const double unbiased = m > 1.0 ? var * m / (m - 1.0) : var;
    stats.running_mean[c] = (1.0 - momentum) * stats.running_mean[c] + momentum * mean;
    stats.running_var[c] = (1.0 - momentum) * stats.running_var[c] + momentum * unbiased;
  }
  return make_result(std::move(out), {x, gamma, beta},
                     [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       norm_backward(self, xhat, inv_std, true);
                     });
}

Var batch_norm_eval(const Var& x, const Var& gamma, const Var& beta, const BatchNormStats& stats, double eps) {
  check_norm_params(x, gamma, beta, "batch_norm");
  const ChannelLayout l = channel_layout(x->value);
  std::vector<double> xhat(x->value.numel());
  std::vector<double> inv_std(static_cast<std::size_t>(l.c));
  Tensor out(x->value.shape());
  for (int c = 0; c < l.c; ++c) {
    inv_std[c] = 1.0 / std::sqrt(stats.running_var[c] + eps);
    for (int n = 0; n < l.n; ++n) {
      const std::size_t base = (static_cast<std::size_t>(n) * l.c + c) * l.inner;
      for (std::size_t i = 0; i < l.inner; ++i) {
        xhat[base + i] = (x->value[base + i] - stats.running_mean[c]) * inv_std[c];
        out[base + i] = gamma->value[c] * xhat[base + i] + beta->value[c];
      }
    }
  }
  return make_result(std::move(out), {x, gamma, beta},
                     [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       norm_backward(self, xhat, inv_std, false);
                     });
}

Var layer_norm_channels(const Var& x, const Var& gamma, const Var& beta, double eps) {
  require_rank(x, 4, "layer_norm_channels");
  check_norm_params(x, gamma, beta, "layer_norm_channels");
  const ChannelLayout l = channel_layout(x->value);
  std::vector<double> xhat(x->value.numel());
  std::vector<double> inv_std(static_cast<std::size_t>(l.n) * l.inner);
  Tensor out(x->value.shape());
  const double* xv = x->value.data();
  for (int n = 0; n < l.n; ++n) {
    for (std::size_t i = 0; i < l.inner; ++i) {
      const std::size_t base = static_cast<std::size_t>(n) * l.c * l.inner + i;
      double mean = 0.0;
      for (int c = 0; c < l.c; ++c) mean += xv[base + c * l.inner];
      mean /= l.c;
      double var = 0.0;
      for (int c = 0; c < l.c; ++c) {
        const double d = xv[base + c * l.inner] - mean;
        var += d * d;
      }
      var /= l.c;
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[static_cast<std::size_t>(n) * l.inner + i] = is;
      for (int c = 0; c < l.c; ++c) {
        const std::size_t k = base + c * l.inner;
        xhat[k] = (xv[k] - mean) * is;
        out[k] = gamma->value[c] * xhat[k] + beta->value[c];
      }
    }
  }
  return make_result(std::move(out), {x, gamma, beta},
                     [xhat = std::move(xhat), inv_std = std::move(inv_std), l](Node& self) {
                       const Var& in = self.inputs[0];
                       const Var& g = self.inputs[1];
                       const Var& b = self.inputs[2];
                       const double* gy = self.grad.data();
                       for (int n = 0; n < l.n; ++n) {
                         for (std::size_t i = 0; i < l.inner; ++i) {
                           const std::size_t base = static_cast<std::size_t>(n) * l.c * l.inner + i;
                           double sum_d = 0.0;
                           double sum_d_xhat = 0.0;
                           for (int c = 0; c < l.c; ++c) {
                             const std::size_t k = base + c * l.inner;
                             const double d = gy[k] * g->value[c];
                             sum_d += d;
                             sum_d_xhat += d * xhat[k];
                             if (wants(g)) g->grad_buffer()[c] += gy[k] * xhat[k];
                             if (wants(b)) b->grad_buffer()[c] += gy[k];
                           }
                           if (wants(in)) {
                             double* gx = in->grad_buffer().data();
                             const double is = inv_std[static_cast<std::size_t>(n) * l.inner + i];
                             for (int c = 0; c < l.c; ++c) {
                               const std::size_t k = base + c * l.inner;
                               const double d = gy[k] * g->value[c];
                               gx[k] += is / l.c * (l.c * d - sum_d - xhat[k] * sum_d_xhat);
                             }
                           }
                         }
                       }
                     });
}

Var relu(const Var& x) {
  Tensor out(x->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const double v = x->value[i];
    out[i] = v > 0.0 || std::isnan(v) ? v : 0.0;  // NaN passes through like any other value
  }
  return make_result(std::move(out), {x}, [](Node& self) {
    const Var& in = self.inputs[0];
    double* gx = in->grad_buffer().data();
    for (std::size_t i = 0; i < self.value.numel(); ++i) {
      if (in->value[i] > 0.0) gx[i] += self.grad[i];
    }
  });
}

Var gelu(const Var& x) {
  Tensor out(x->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const double v = x->value[i];
    out[i] = 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2));
  }
  return make_result(std::move(out), {x}, [](Node& self) {
    const Var& in = self.inputs[0];
    double* gx = in->grad_buffer().data();
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < self.value.numel(); ++i) {
      const double v = in->value[i];
      const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
      gx[i] += self.grad[i] * (cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v));
    }
  });
}

Var sigmoid(const Var& x) {
  Tensor out(x->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const double v = x->value[i];
    out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return make_result(std::move(out), {x}, [](Node& self) {
    double* gx = self.inputs[0]->grad_buffer().data();
    for (std::size_t i = 0; i < self.value.numel(); ++i) {
      const double y = self.value[i];
      gx[i] += self.grad[i] * y * (1.0 - y);
    }
  });
}

Var add(const Var& a, const Var& b) {
  if (a->value.shape() == b->value.shape()) {
    Tensor out(a->value.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] + b->value[i];
    return make_result(std::move(out), {a, b}, [](Node& self) {
      for (const Var& in : self.inputs) {
        if (!wants(in)) continue;
        double* g = in->grad_buffer().data();
        for (std::size_t i = 0; i < self.value.numel(); ++i) g[i] += self.grad[i];
      }
    });
  }
  auto bi = broadcast_index(a->value.shape(), b->value.shape());
  Tensor out(a->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] + b->value[bi[i]];
  return make_result(std::move(out), {a, b}, [bi = std::move(bi)](Node& self) {
    const Var& lhs = self.inputs[0];
    const Var& rhs = self.inputs[1];
    if (wants(lhs)) {
      double* g = lhs->grad_buffer().data();
      for (std::size_t i = 0; i < self.value.numel(); ++i) g[i] += self.grad[i];
    }
    if (wants(rhs)) {
      double* g = rhs->grad_buffer().data();
      for (std::size_t i = 0; i < self.value.numel(); ++i) g[bi[i]] += self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  auto bi = broadcast_index(a->value.shape(), b->value.shape());
  Tensor out(a->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * b->value[bi[i]];
  return make_result(std::move(out), {a, b}, [bi = std::move(bi)](Node& self) {
    const Var& lhs = self.inputs[0];
    const Var& rhs = self.inputs[1];
    if (wants(lhs)) {
      double* g = lhs->grad_buffer().data();
      for (std::size_t i = 0; i < self.value.numel(); ++i) g[i] += self.grad[i] * rhs->value[bi[i]];
    }
    if (wants(rhs)) {
      double* g = rhs->grad_buffer().data();
      for (std::size_t i = 0; i < self.value.numel(); ++i) g[bi[i]] += self.grad[i] * lhs->value[i];
    }
  });
}

Var scale(const Var& x, double factor) {
  Tensor out(x->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x->value[i] * factor;
  return make_result(std::move(out), {x}, [factor](Node& self) {
    double* g = self.inputs[0]->grad_buffer().data();
    for (std::size_t i = 0; i < self.value.numel(); ++i) g[i] += self.grad[i] * factor;
  });
}

Var weighted_sum(const std::vector<Var>& parts, const std::vector<double>& weights) {
  require(!parts.empty() && parts.size() == weights.size(), "weighted_sum: parts/weights size mismatch");
  Tensor out(parts.front()->value.shape());
  for (std::size_t p = 0; p < parts.size(); ++p) {
    require(parts[p]->value.shape() == out.shape(), "weighted_sum: shape mismatch");
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += weights[p] * parts[p]->value[i];
  }
  return make_result(std::move(out), parts, [weights](Node& self) {
    for (std::size_t p = 0; p < self.inputs.size(); ++p) {
      if (!wants(self.inputs[p])) continue;
      double* g = self.inputs[p]->grad_buffer().data();
      for (std::size_t i = 0; i < self.value.numel(); ++i) g[i] += weights[p] * self.grad[i];
    }
  });
}

Var concat_channels(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat: no inputs");
  const Tensor& first = parts.front()->value;
  require(first.rank() >= 2, "concat: rank >= 2 required");
  int total_c = 0;
  for (const Var& p : parts) {
    require(p->value.rank() == first.rank() && p->value.dim(0) == first.dim(0), "concat: batch/rank mismatch");
    for (int a = 2; a < first.rank(); ++a) {
      require(p->value.dim(a) == first.dim(a), "concat: spatial mismatch " + shape_str(p->value.shape()) + " vs " +
                                                   shape_str(first.shape()));
    }
    total_c += p->value.dim(1);
  }
  Tensor out(with_axis1(first.shape(), total_c));
  const ChannelLayout l = channel_layout(out);
  std::vector<int> offsets;
  int off = 0;
  for (const Var& p : parts) {
    offsets.push_back(off);
    const int c = p->value.dim(1);
    for (int n = 0; n < l.n; ++n) {
      const double* src = p->value.data() + static_cast<std::size_t>(n) * c * l.inner;
      double* dst = out.data() + (static_cast<std::size_t>(n) * total_c + off) * l.inner;
      std::copy(src, src + c * l.inner, dst);
    }
    off += c;
  }
  return make_result(std::move(out), parts, [offsets, l](Node& self) {
    for (std::size_t p = 0; p < self.inputs.size(); ++p) {
      const Var& in = self.inputs[p];
      if (!wants(in)) continue;
      const int c = in->value.dim(1);
      double* g = in->grad_buffer().data();
      for (int n = 0; n < l.n; ++n) {
        const double* src = self.grad.data() + (static_cast<std::size_t>(n) * l.c + offsets[p]) * l.inner;
        double* dst = g + static_cast<std::size_t>(n) * c * l.inner;
        for (std::size_t i = 0; i < c * l.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) { return concat_channels(parts); }

Var slice_rows(const Var& x, int begin, int end) {
  const int rows = x->value.dim(0);
  require(0 <= begin && begin <= end && end <= rows, "slice_rows: bad range");
  const std::size_t inner = x->value.numel() / static_cast<std::size_t>(std::max(rows, 1));
  Shape s = x->value.shape();
  s[0] = end - begin;
  Tensor out(s);
  std::copy(x->value.data() + begin * inner, x->value.data() + end * inner, out.data());
  return make_result(std::move(out), {x}, [begin, inner](Node& self) {
    double* g = self.inputs[0]->grad_buffer().data() + begin * inner;
    for (std::size_t i = 0; i < self.value.numel(); ++i) g[i] += self.grad[i];
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x->value;
  out.reshape(std::move(shape));
  return make_result(std::move(out), {x}, [](Node& self) {
    double* g = self.inputs[0]->grad_buffer().data();
    for (std::size_t i = 0; i < self.value.numel(); ++i) g[i] += self.grad[i];
  });
}

Var resize_bilinear(const Var& x, int out_h, int out_w) {
  require_rank(x, 4, "resize_bilinear");
  require(out_h > 0 && out_w > 0, "resize_bilinear: empty output");
  kernels::ResizeGeometry g{x->value.dim(0) * x->value.dim(1), x->value.dim(2), x->value.dim(3), out_h, out_w};
  Tensor out({x->value.dim(0), x->value.dim(1), out_h, out_w});
  kernels::resize_bilinear_forward(g, x->value.values(), out.values());
  return make_result(std::move(out), {x}, [g](Node& self) {
    kernels::resize_bilinear_backward(g, self.grad.values(), self.inputs[0]->grad_buffer().values());
  });
}

Var mean_spatial(const Var& x) {
  require_rank(x, 4, "mean_spatial");
  const ChannelLayout l = channel_layout(x->value);
  Tensor out({l.n, l.c});
  for (std::size_t p = 0; p < out.numel(); ++p) {
    double s = 0.0;
    for (std::size_t i = 0; i < l.inner; ++i) s += x->value[p * l.inner + i];
    out[p] = s / static_cast<double>(l.inner);
  }
  return make_result(std::move(out), {x}, [l](Node& self) {
    double* g = self.inputs[0]->grad_buffer().data();
    for (std::size_t p = 0; p < self.value.numel(); ++p) {
      const double v = self.grad[p] / static_cast<double>(l.inner);
      for (std::size_t i = 0; i < l.inner; ++i) g[p * l.inner + i] += v;
    }
  });
}

Var max_spatial(const Var& x) {
  require_rank(x, 4, "max_spatial");
  const ChannelLayout l = channel_layout(x->value);
  Tensor out({l.n, l.c});
  std::vector<std::size_t> arg(out.numel());
  for (std::size_t p = 0; p < out.numel(); ++p) {
    std::size_t best = p * l.inner;
    for (std::size_t i = 1; i < l.inner; ++i) {
      if (x->value[p * l.inner + i] > x->value[best]) best = p * l.inner + i;
    }
    arg[p] = best;
    out[p] = x->value[best];
  }
  return make_result(std::move(out), {x}, [arg = std::move(arg)](Node& self) {
    double* g = self.inputs[0]->grad_buffer().data();
    for (std::size_t p = 0; p < self.value.numel(); ++p) g[arg[p]] += self.grad[p];
  });
}

Var mean_channels(const Var& x) {
  require_rank(x, 4, "mean_channels");
  const ChannelLayout l = channel_layout(x->value);
  Tensor out({l.n, 1, x->value.dim(2), x->value.dim(3)});
  for (int n = 0; n < l.n; ++n) {
    for (std::size_t i = 0; i < l.inner; ++i) {
      double s = 0.0;
      for (int c = 0; c < l.c; ++c) s += x->value[(static_cast<std::size_t>(n) * l.c + c) * l.inner + i];
      out[static_cast<std::size_t>(n) * l.inner + i] = s / l.c;
    }
  }
  return make_result(std::move(out), {x}, [l](Node& self) {
    double* g = self.inputs[0]->grad_buffer().data();
    for (int n = 0; n < l.n; ++n) {
      for (std::size_t i = 0; i < l.inner; ++i) {
        const double v = self.grad[static_cast<std::size_t>(n) * l.inner + i] / l.c;
        for (int c = 0; c < l.c; ++c) g[(static_cast<std::size_t>(n) * l.c + c) * l.inner + i] += v;
      }
    }
  });
}

Var max_channels(const Var& x) {
  require_rank(x, 4, "max_channels");
  const ChannelLayout l = channel_layout(x->value);
  Tensor out({l.n, 1, x->value.dim(2), x->value.dim(3)});
  std::vector<std::size_t> arg(out.numel());
  for (int n = 0; n < l.n; ++n) {
    for (std::size_t i = 0; i < l.inner; ++i) {
      std::size_t best = static_cast<std::size_t>(n) * l.c * l.inner + i;
      for (int c = 1; c < l.c; ++c) {
        const std::size_t k = (static_cast<std::size_t>(n) * l.c + c) * l.inner + i;
        if (x->value[k] > x->value[best]) best = k;
      }
      arg[static_cast<std::size_t>(n) * l.inner + i] = best;
      out[static_cast<std::size_t>(n) * l.inner + i] = x->value[best];
    }
  }
  return make_result(std::move(out), {x}, [arg = std::move(arg)](Node& self) {
    double* g = self.inputs[0]->grad_buffer().data();
    for (std::size_t p = 0; p < self.value.numel(); ++p) g[arg[p]] += self.grad[p];
  });
}

Var dropout(const Var& x, double rate, bool training, std::mt19937_64* rng) {
  if (!training || rate <= 0.0) return x;
  require(rate < 1.0, "dropout: rate must be < 1");
  require(rng != nullptr, "dropout: training mode needs an rng");
  const double keep = 1.0 - rate;
  std::vector<double> mask(x->value.numel());
  Tensor out(x->value.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const double u = static_cast<double>((*rng)() >> 11) * 0x1.0p-53;
    mask[i] = u < keep ? 1.0 / keep : 0.0;
    out[i] = x->value[i] * mask[i];
  }
  return make_result(std::move(out), {x}, [mask = std::move(mask)](Node& self) {
    double* g = self.inputs[0]->grad_buffer().data();
    for (std::size_t i = 0; i < mask.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

Var l2_normalize_rows(const Var& x, double eps) {
  require_rank(x, 2, "l2_normalize_rows");
  const int rows = x->value.dim(0);
  const int cols = x->value.dim(1);
  Tensor out(x->value.shape());
  std::vector<double> norms(static_cast<std::size_t>(rows));
  for (int r = 0; r < rows; ++r) {
    double s = 0.0;
    for (int c = 0; c < cols; ++c) s += x->value.at(r, c) * x->value.at(r, c);
    norms[r] = std::max(std::sqrt(s), eps);
    for (int c = 0; c < cols; ++c) out.at(r, c) = x->value.at(r, c) / norms[r];
  }
  return make_result(std::move(out), {x}, [norms = std::move(norms), rows, cols, eps](Node& self) {
    Tensor& g = self.inputs[0]->grad_buffer();
    for (int r = 0; r < rows; ++r) {
      if (norms[r] <= eps) {
        for (int c = 0; c < cols; ++c) g.at(r, c) += self.grad.at(r, c) / norms[r];
        continue;
      }
      double dot = 0.0;
      for (int c = 0; c < cols; ++c) dot += self.value.at(r, c) * self.grad.at(r, c);
      for (int c = 0; c < cols; ++c) g.at(r, c) += (self.grad.at(r, c) - self.value.at(r, c) * dot) / norms[r];
    }
  });
}

namespace {

void log_softmax_row(const double* z, int k, double* out) {
  double mx = z[0];
  for (int i = 1; i < k; ++i) mx = std::max(mx, z[i]);
  double s = 0.0;
  for (int i = 0; i < k; ++i) s += std::exp(z[i] - mx);
  const double lse = mx + std::log(s);
  for (int i = 0; i < k; ++i) out[i] = z[i] - lse;
}

}  // namespace

Var cross_entropy(const Var& logits, std::span<const int> targets) {
  require_rank(logits, 2, "cross_entropy");
  const int rows = logits->value.dim(0);
  const int k = logits->value.dim(1);
  require(static_cast<int>(targets.size()) == rows, "cross_entropy: target count does not match batch");
  require(rows > 0, "cross_entropy: empty batch");
  std::vector<double> probs(logits->value.numel());
  double loss = 0.0;
  for (int r = 0; r < rows; ++r) {
    require(targets[r] >= 0 && targets[r] < k, "cross_entropy: target " + std::to_string(targets[r]) +
                                                    " out of range for " + std::to_string(k) + " classes");
    double* lp = probs.data() + static_cast<std::size_t>(r) * k;
    log_softmax_row(logits->value.data() + static_cast<std::size_t>(r) * k, k, lp);
    loss -= lp[targets[r]];
    for (int i = 0; i < k; ++i) lp[i] = std::exp(lp[i]);
  }
  std::vector<int> tgt(targets.begin(), targets.end());
  return make_result(Tensor({1}, {loss / rows}), {logits},
                     [probs = std::move(probs), tgt = std::move(tgt), rows, k](Node& self) {
                       double* g = self.inputs[0]->grad_buffer().data();
                       const double go = self.grad[0] / rows;
                       for (int r = 0; r < rows; ++r) {
                         for (int i = 0; i < k; ++i) {
                           const std::size_t j = static_cast<std::size_t>(r) * k + i;
                           g[j] += go * (probs[j] - (i == tgt[r] ? 1.0 : 0.0));
                         }
                       }
                     });
}

Var symmetric_kl(const Var& p_logits, const Var& q_logits, double floor) {
  require_rank(p_logits, 2, "symmetric_kl");
  require(p_logits->value.shape() == q_logits->value.shape(), "symmetric_kl: shape mismatch");
  const int rows = p_logits->value.dim(0);
  const int k = p_logits->value.dim(1);
  require(rows > 0, "symmetric_kl: empty batch");
  const double log_floor = std::log(floor);
  const std::size_t total = p_logits->value.numel();
  std::vector<double> p(total), q(total), lp(total), lq(total);
  double loss = 0.0;
  for (int r = 0; r < rows; ++r) {
    const std::size_t o = static_cast<std::size_t>(r) * k;
    log_softmax_row(p_logits->value.data() + o, k, lp.data() + o);
    log_softmax_row(q_logits->value.data() + o, k, lq.data() + o);
    for (int i = 0; i < k; ++i) {
      p[o + i] = std::exp(lp[o + i]);
      q[o + i] = std::exp(lq[o + i]);
      lp[o + i] = std::max(lp[o + i], log_floor);
      lq[o + i] = std::max(lq[o + i], log_floor);
      loss += 0.5 * (p[o + i] - q[o + i]) * (lp[o + i] - lq[o + i]);
    }
  }
  return make_result(
      Tensor({1}, {loss / rows}), {p_logits, q_logits},
      [p = std::move(p), q = std::move(q), lp = std::move(lp), lq = std::move(lq), rows, k, log_floor](Node& self) {
        const double go = self.grad[0] / rows;
        // d/dz_k of a softmax-weighted objective: b_k - prob_k * sum_j b_j, with
        // b_j = prob_j * dL/dprob_j.
        auto push = [&](const Var& target, const std::vector<double>& own, const std::vector<double>& other,
                        const std::vector<double>& l_own, const std::vector<double>& l_other) {
          if (!wants(target)) return;
          double* g = target->grad_buffer().data();
          std::vector<double> b(static_cast<std::size_t>(k));
          for (int r = 0; r < rows; ++r) {
            const std::size_t o = static_cast<std::size_t>(r) * k;
            double sum_b = 0.0;
            for (int i = 0; i < k; ++i) {
              const bool floored = l_own[o + i] <= log_floor;
              b[i] = 0.5 * (own[o + i] * (l_own[o + i] - l_other[o + i]) +
                            (floored ? 0.0 : own[o + i] - other[o + i]));
              sum_b += b[i];
            }
            for (int i = 0; i < k; ++i) g[o + i] += go * (b[i] - own[o + i] * sum_b);
          }
        };
        push(self.inputs[0], p, q, lp, lq);
        push(self.inputs[1], q, p, lq, lp);
      });
}

Var triplet_margin(const Var& embeddings, std::span<const TripletIndex> triplets, double margin) {
  require_rank(embeddings, 2, "triplet_margin");
  const int rows = embeddings->value.dim(0);
  const int dim = embeddings->value.dim(1);
  const double* e = embeddings->value.data();
  auto dist = [&](int a, int b) {
    double s = 0.0;
    for (int c = 0; c < dim; ++c) {
      const double d = e[static_cast<std::size_t>(a) * dim + c] - e[static_cast<std::size_t>(b) * dim + c];
      s += d * d;
    }
    return std::sqrt(s);
  };
  std::vector<TripletIndex> active;
  std::vector<std::pair<double, double>> dists;
  double loss = 0.0;
  for (const TripletIndex& t : triplets) {
    require(t.anchor >= 0 && t.anchor < rows && t.positive >= 0 && t.positive < rows && t.negative >= 0 &&
                t.negative < rows,
            "triplet_margin: index out of range");
    const double dap = dist(t.anchor, t.positive);
    const double dan = dist(t.anchor, t.negative);
    const double h = dap - dan + margin;
    if (h > 0.0) {
      loss += h;
      active.push_back(t);
      dists.emplace_back(dap, dan);
    }
  }
  const double count = static_cast<double>(triplets.size());
  const double value = triplets.empty() ? 0.0 : loss / count;
  return make_result(Tensor({1}, {value}), {embeddings},
                     [active = std::move(active), dists = std::move(dists), count, dim](Node& self) {
                       if (active.empty()) return;
                       const Var& in = self.inputs[0];
                       double* g = in->grad_buffer().data();
                       const double* e = in->value.data();
                       const double go = self.grad[0] / count;
                       for (std::size_t t = 0; t < active.size(); ++t) {
                         const auto [a, p, n] = active[t];
                         const double dap = dists[t].first;
                         const double dan = dists[t].second;
                         for (int c = 0; c < dim; ++c) {
                           const double ea = e[static_cast<std::size_t>(a) * dim + c];
                           const double ep = e[static_cast<std::size_t>(p) * dim + c];
                           const double en = e[static_cast<std::size_t>(n) * dim + c];
                           const double gp = dap > 0.0 ? go * (ea - ep) / dap : 0.0;
                           const double gn = dan > 0.0 ? go * (ea - en) / dan : 0.0;
                           g[static_cast<std::size_t>(a) * dim + c] += gp - gn;
                           g[static_cast<std::size_t>(p) * dim + c] -= gp;
                           g[static_cast<std::size_t>(n) * dim + c] += gn;
                         }
                       }
                     });
}

}  // namespace ops

}  // namespace cfirn
