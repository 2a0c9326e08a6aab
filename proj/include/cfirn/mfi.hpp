#pragma once

#include <array>

#include "cfirn/nn.hpp"

namespace cfirn {

/// Pre-attention fused map OL (2C channels at the anchor resolution) and the
/// attention-enhanced projection G (C channels).
struct FusedMap {
  Var ol;
  Var g;
};

/// Per-scale pooled vectors OM^k, ordered by ascending scale factor.
using IntegratedVectors = std::array<Var, 2>;

/// Channel-then-spatial attention gate.
class Cbam {
 public:
  Cbam(ParamStore& store, const std::string& name, int channels);
  Var forward(const Var& x) const;

  /// Hidden width of the channel MLP: max(channels / 16, 4).
  static int hidden_width(int channels);

  Linear fc1;
  Linear fc2;
  Conv2d spatial;  // 7x7, 2 -> 1
};

/// Multiscale feature integration.
///
/// The "anchor" map is the scale-1.0 encoder output (or the larger scale when
/// neither factor is 1.0); the other scale is bilinearly resized onto it.
///   A  = cbr_a2(concat(cbr_a1(anchor), other'))
///   B  = cbr_b2(concat(cbr_b1(other'), anchor))
///   OL = concat(A, B)
///   G  = cbr_proj_1x1(cbam(OL))
///   E  = per-scale map + G (G resized to that scale)
///   OM = spatial mean of E
class Mfi {
 public:
  Mfi(ParamStore& store, int channels);

  /// `other_to_anchor` is the spatial ratio anchor/other (2 for the 0.5x map
  /// against the 1x map). Throws ContractViolation when `other` does not have
  /// exactly that relative resolution.
  FusedMap fuse(const Var& anchor, const Var& other, double other_to_anchor, const ForwardContext& ctx) const;

  /// `maps` ordered by ascending `scales`; returns OM in the same order.
  IntegratedVectors integrate(const std::array<Var, 2>& maps, const std::array<double, 2>& scales,
                              const ForwardContext& ctx) const;

  int channels() const { return channels_; }

  /// Index into an ascending scale pair of the map that fusion happens on.
  static int anchor_index(const std::array<double, 2>& scales);

  Cbr cbr_a1;
  Cbr cbr_a2;
  Cbr cbr_b1;
  Cbr cbr_b2;
  Cbam cbam;
  Cbr proj;

 private:
  int channels_;
};

/// MFI bypass: plain spatial means of the encoder maps.
IntegratedVectors pool_only(const std::array<Var, 2>& maps);

}  // namespace cfirn
