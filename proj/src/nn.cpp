#include "cfirn/nn.hpp"

#include <cmath>

#include "cfirn/error.hpp"

namespace cfirn {

Var ParamStore::add(const std::string& name, Tensor value, ParamGroup group, bool decay) {
  for (const ParamEntry& e : params_) {
    if (e.name == name) throw ContractViolation("duplicate parameter name " + name);
  }
  Var v = parameter(std::move(value));
  params_.push_back({name, v, group, decay});
  return v;
}

Var ParamStore::kaiming(const std::string& name, Shape shape, int fan_in, ParamGroup group) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (double& x : t.storage()) x = dist(rng_);
  return add(name, std::move(t), group, true);
}

Var ParamStore::constant(const std::string& name, Shape shape, double value, ParamGroup group, bool decay) {
  return add(name, Tensor(std::move(shape), value), group, decay);
}

BatchNormStats& ParamStore::batch_norm_stats(const std::string& name, int channels) {
  buffers_.emplace_back(name, BatchNormStats{Tensor({channels}, 0.0), Tensor({channels}, 1.0)});
  return buffers_.back().second;
}

Var ParamStore::find(const std::string& name) const {
  for (const ParamEntry& e : params_) {
    if (e.name == name) return e.var;
  }
  return nullptr;
}

std::size_t ParamStore::num_scalars() const {
  std::size_t n = 0;
  for (const ParamEntry& e : params_) n += e.var->value.numel();
  return n;
}

std::string ParamStore::first_non_finite() const {
  for (const ParamEntry& e : params_) {
    if (!e.var->value.all_finite()) return e.name;
  }
  for (const auto& [name, stats] : buffers_) {
    if (!stats.running_mean.all_finite()) return name + ".running_mean";
    if (!stats.running_var.all_finite()) return name + ".running_var";
  }
  return {};
}

void ParamStore::zero_grad() {
  for (const ParamEntry& e : params_) {
    if (!e.var->grad.empty()) e.var->grad.fill(0.0);
  }
}

std::map<std::string, Tensor> ParamStore::state() const {
  std::map<std::string, Tensor> out;
  for (const ParamEntry& e : params_) out.emplace(e.name, e.var->value);
  for (const auto& [name, stats] : buffers_) {
    out.emplace(name + ".running_mean", stats.running_mean);
    out.emplace(name + ".running_var", stats.running_var);
  }
  return out;
}

std::size_t ParamStore::load_state(const std::map<std::string, Tensor>& state, bool strict,
                                   const std::string& prefix) {
  std::size_t loaded = 0;
  auto take = [&](const std::string& name, Tensor& dst) {
    if (!strict && name.rfind(prefix, 0) != 0) return;
    auto it = state.find(name);
    if (it == state.end()) {
      if (strict) throw ValidationError("checkpoint is missing tensor " + name);
      return;
    }
    if (it->second.shape() != dst.shape()) {
      throw ValidationError("tensor " + name + " has shape " + shape_str(it->second.shape()) + ", model expects " +
                            shape_str(dst.shape()));
    }
    dst = it->second;
    ++loaded;
  };
  for (ParamEntry& e : params_) take(e.name, e.var->value);
  for (auto& [name, stats] : buffers_) {
    take(name + ".running_mean", stats.running_mean);
    take(name + ".running_var", stats.running_var);
  }
  return loaded;
}

Conv2d::Conv2d(ParamStore& store, const std::string& name, int in_channels, int out_channels, int kernel, int stride,
               int pad, ParamGroup group, int groups, bool bias)
    : stride(stride), pad(pad), groups(groups) {
  const int fan_in = in_channels / groups * kernel * kernel;
  weight = store.kaiming(name + ".weight", {out_channels, in_channels / groups, kernel, kernel}, fan_in, group);
  if (bias) this->bias = store.constant(name + ".bias", {out_channels}, 0.0, group);
}

Var Conv2d::forward(const Var& x) const { return ops::conv2d(x, weight, bias, stride, pad, groups); }

BatchNorm::BatchNorm(ParamStore& store, const std::string& name, int channels, ParamGroup group) {
  gamma = store.constant(name + ".gamma", {channels}, 1.0, group);
  beta = store.constant(name + ".beta", {channels}, 0.0, group);
  stats = &store.batch_norm_stats(name, channels);
}

Var BatchNorm::forward(const Var& x, const ForwardContext& ctx) const {
  if (ctx.training) return ops::batch_norm(x, gamma, beta, *stats, true);
  return ops::batch_norm_eval(x, gamma, beta, *stats);
}

Linear::Linear(ParamStore& store, const std::string& name, int in_features, int out_features, ParamGroup group) {
  weight = store.kaiming(name + ".weight", {out_features, in_features}, in_features, group);
  bias = store.constant(name + ".bias", {out_features}, 0.0, group);
}

Var Linear::forward(const Var& x) const { return ops::linear(x, weight, bias); }

Cbr::Cbr(ParamStore& store, const std::string& name, int in_channels, int out_channels, int kernel, ParamGroup group)
    : conv(store, name + ".conv", in_channels, out_channels, kernel, 1, kernel / 2, group),
      bn(store, name + ".bn", out_channels, group) {}

Var Cbr::forward(const Var& x, const ForwardContext& ctx) const {
  return ops::relu(bn.forward(conv.forward(x), ctx));
}

}  // namespace cfirn
