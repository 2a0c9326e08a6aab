#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "cfirn/autograd.hpp"

namespace cfirn::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.storage()) v = u(rng);
  return t;
}

/// Norm-based relative error between backprop and central differences of a
/// scalar function on (a subset of) the entries of `param`. `f` must rebuild
/// the graph from the current parameter values on each call.
inline double gradcheck(const std::function<Var()>& f, const Var& param, std::size_t max_entries,
                        std::mt19937_64& rng, double h = 1e-6) {
  param->grad = Tensor();
  Var out = f();
  backward(out);
  const Tensor analytic = param->grad.empty() ? Tensor(param->value.shape()) : param->grad;

  std::vector<std::size_t> idx(param->value.numel());
  std::iota(idx.begin(), idx.end(), 0);
  if (idx.size() > max_entries) {
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(max_entries);
  }
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i : idx) {
    const double keep = param->value[i];
    double plus, minus;
    {
      NoGradGuard g;
      param->value[i] = keep + h;
      plus = f()->value[0];
      param->value[i] = keep - h;
      minus = f()->value[0];
      param->value[i] = keep;
    }
    const double numeric = (plus - minus) / (2.0 * h);
    diff += (numeric - analytic[i]) * (numeric - analytic[i]);
    na += analytic[i] * analytic[i];
    nn += numeric * numeric;
  }
  if (na == 0.0 && nn == 0.0) return 1.0;  // no signal: the check would be vacuous
  const double denom = std::sqrt(na) + std::sqrt(nn);
  return std::sqrt(diff) / denom;
}

}  // namespace cfirn::testing

#include <filesystem>
#include <unistd.h>

namespace cfirn::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() / ("cfirn_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace cfirn::testing
