#include "cfirn/mfi.hpp"

#include <algorithm>
#include <cmath>

#include "cfirn/error.hpp"

namespace cfirn {

int Cbam::hidden_width(int channels) { return std::max(channels / 16, 4); }

Cbam::Cbam(ParamStore& store, const std::string& name, int channels)
    : fc1(store, name + ".mlp.fc1", channels, hidden_width(channels), ParamGroup::head),
      fc2(store, name + ".mlp.fc2", hidden_width(channels), channels, ParamGroup::head),
      spatial(store, name + ".spatial", 2, 1, 7, 1, 3, ParamGroup::head) {}

Var Cbam::forward(const Var& x) const {
  const int n = x->value.dim(0);
  const int c = x->value.dim(1);
  auto mlp = [&](const Var& v) { return fc2.forward(ops::relu(fc1.forward(v))); };
  Var channel_gate = ops::sigmoid(ops::add(mlp(ops::mean_spatial(x)), mlp(ops::max_spatial(x))));
  Var refined = ops::mul(x, ops::reshape(channel_gate, {n, c, 1, 1}));
  Var pooled = ops::concat_channels({ops::mean_channels(refined), ops::max_channels(refined)});
  Var spatial_gate = ops::sigmoid(spatial.forward(pooled));
  return ops::mul(refined, spatial_gate);
}

Mfi::Mfi(ParamStore& store, int channels)
    : cbr_a1(store, "mfi.cbr_a1", channels, channels, 3, ParamGroup::head),
      cbr_a2(store, "mfi.cbr_a2", 2 * channels, channels, 3, ParamGroup::head),
      cbr_b1(store, "mfi.cbr_b1", channels, channels, 3, ParamGroup::head),
      cbr_b2(store, "mfi.cbr_b2", 2 * channels, channels, 3, ParamGroup::head),
      cbam(store, "mfi.cbam", 2 * channels),
      proj(store, "mfi.proj", 2 * channels, channels, 1, ParamGroup::head),
      channels_(channels) {}

int Mfi::anchor_index(const std::array<double, 2>& scales) {
  if (scales[0] == 1.0) return 0;
  return 1;
}

FusedMap Mfi::fuse(const Var& anchor, const Var& other, double other_to_anchor, const ForwardContext& ctx) const {
  const Tensor& a = anchor->value;
  const Tensor& o = other->value;
  if (a.rank() != 4 || o.rank() != 4 || a.dim(0) != o.dim(0) || a.dim(1) != channels_ || o.dim(1) != channels_) {
    throw ContractViolation("mfi.fuse: incompatible inputs " + shape_str(a.shape()) + " and " + shape_str(o.shape()));
  }
  auto expect = [&](int other_size, int anchor_size) {
    return std::abs(other_size * other_to_anchor - anchor_size) < 1e-9;
  };
  if (!expect(o.dim(2), a.dim(2)) || !expect(o.dim(3), a.dim(3))) {
    throw ContractViolation("mfi.fuse: resolution mismatch, expected the second map at 1/" +
                            std::to_string(other_to_anchor) + " of " + shape_str(a.shape()) + ", got " +
                            shape_str(o.shape()));
  }
  Var resized = ops::resize_bilinear(other, a.dim(2), a.dim(3));
  Var path_a = cbr_a2.forward(ops::concat_channels({cbr_a1.forward(anchor, ctx), resized}), ctx);
  Var path_b = cbr_b2.forward(ops::concat_channels({cbr_b1.forward(resized, ctx), anchor}), ctx);
  FusedMap out;
  out.ol = ops::concat_channels({path_a, path_b});
  out.g = proj.forward(cbam.forward(out.ol), ctx);
  return out;
}

IntegratedVectors Mfi::integrate(const std::array<Var, 2>& maps, const std::array<double, 2>& scales,
                                 const ForwardContext& ctx) const {
  const int ai = anchor_index(scales);
  const int oi = 1 - ai;
  const FusedMap fused = fuse(maps[ai], maps[oi], scales[ai] / scales[oi], ctx);
  IntegratedVectors om;
  om[ai] = ops::mean_spatial(ops::add(maps[ai], fused.g));
  const Tensor& other = maps[oi]->value;
  om[oi] = ops::mean_spatial(ops::add(maps[oi], ops::resize_bilinear(fused.g, other.dim(2), other.dim(3))));
  for (const Var& v : om) {
    if (!v->value.all_finite()) throw NumericError("mfi", "non-finite integrated features");
  }
  return om;
}

IntegratedVectors pool_only(const std::array<Var, 2>& maps) {
  return {ops::mean_spatial(maps[0]), ops::mean_spatial(maps[1])};
}

}  // namespace cfirn
