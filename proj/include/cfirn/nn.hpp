#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "cfirn/autograd.hpp"

namespace cfirn {

/// Optimizer learning-rate group.
enum class ParamGroup { backbone, head };

struct ParamEntry {
  std::string name;
  Var var;
  ParamGroup group;
  bool decay;  // false for biases and normalization parameters
};

/// Owns every trainable tensor and running buffer of a model under a stable
/// dotted name. Registration order is deterministic and defines the order of
/// initialization draws and of serialization.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed) : rng_(seed) {}
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;

  /// He-normal weight, std = sqrt(2 / fan_in).
  Var kaiming(const std::string& name, Shape shape, int fan_in, ParamGroup group);
  Var constant(const std::string& name, Shape shape, double value, ParamGroup group, bool decay = false);
  BatchNormStats& batch_norm_stats(const std::string& name, int channels);

  const std::vector<ParamEntry>& params() const { return params_; }
  Var find(const std::string& name) const;
  std::size_t num_scalars() const;

  void zero_grad();
  /// Name of the first parameter or buffer holding a NaN/inf, or empty.
  std::string first_non_finite() const;

  /// Named copy of every parameter and buffer (buffers carry ".running_mean"
  /// / ".running_var" suffixes).
  std::map<std::string, Tensor> state() const;
  /// Copies matching entries in. With `strict`, every stored name must be
  /// present with the right shape; otherwise only names sharing `prefix` are
  /// considered and missing ones are left untouched. Returns entries loaded.
  std::size_t load_state(const std::map<std::string, Tensor>& state, bool strict, const std::string& prefix = "");

  std::mt19937_64& rng() { return rng_; }

 private:
  Var add(const std::string& name, Tensor value, ParamGroup group, bool decay);

  std::vector<ParamEntry> params_;
  std::deque<std::pair<std::string, BatchNormStats>> buffers_;
  std::mt19937_64 rng_;
};

struct ForwardContext {
  bool training = false;
  std::mt19937_64* rng = nullptr;  // dropout masks; required when training
};

struct Conv2d {
  Conv2d() = default;
  Conv2d(ParamStore& store, const std::string& name, int in_channels, int out_channels, int kernel, int stride,
         int pad, ParamGroup group, int groups = 1, bool bias = true);
  Var forward(const Var& x) const;

  Var weight;
  Var bias;
  int stride = 1;
  int pad = 0;
  int groups = 1;
};

struct BatchNorm {
  BatchNorm() = default;
  BatchNorm(ParamStore& store, const std::string& name, int channels, ParamGroup group);
  /// Training mode updates the running statistics.
  Var forward(const Var& x, const ForwardContext& ctx) const;

  Var gamma;
  Var beta;
  BatchNormStats* stats = nullptr;
};

struct Linear {
  Linear() = default;
  Linear(ParamStore& store, const std::string& name, int in_features, int out_features, ParamGroup group);
  Var forward(const Var& x) const;

  Var weight;
  Var bias;
};

/// 3x3 (or 1x1) convolution, batch norm, ReLU; spatial size preserved.
struct Cbr {
  Cbr() = default;
  Cbr(ParamStore& store, const std::string& name, int in_channels, int out_channels, int kernel, ParamGroup group);
  Var forward(const Var& x, const ForwardContext& ctx) const;

  Conv2d conv;
  BatchNorm bn;
};

}  // namespace cfirn
