#pragma once

#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cfirn/image.hpp"
#include "cfirn/nn.hpp"

namespace cfirn {

/// Encoder architecture record, stored in checkpoints.
struct EncoderSpec {
  std::string name = "tiny";
  int in_channels = 1;  // 3 for ImageNet-style stems; gray input is replicated
  int channels = 64;    // final feature channels C
  int stride = 32;      // total downsampling
  std::string pretrained;  // optional checkpoint whose "encoder." tensors are imported
};

/// "micro" (C=8, stride 2; gradient checks), "tiny" (C=64, stride 32; desk
/// scale), "convnext_tiny", "convnext_small", "convnext_base".
EncoderSpec encoder_preset(std::string_view name);
std::vector<std::string> encoder_preset_names();

/// Side length of an input of `side` pixels rescaled by `scale`. Throws
/// ConfigError unless the product is a positive integer.
int scaled_side(int side, double scale);

/// Bilinear rescale of a batch (N, 1, S, S) to every factor in `scales`.
/// Factor 1 returns the input unchanged.
std::vector<Tensor> make_scales(const Tensor& images, std::span<const double> scales);
std::vector<Image> make_scales(const Image& image, std::span<const double> scales);

class EncoderLayer {
 public:
  virtual ~EncoderLayer() = default;
  virtual Var forward(const Var& x, const ForwardContext& ctx) const = 0;
};

/// Shared-weight convolutional encoder. Both siamese branches call the same
/// instance, so they read the same parameter storage.
class Encoder {
 public:
  Encoder(ParamStore& store, EncoderSpec spec);
  Encoder(const Encoder&) = delete;
  Encoder& operator=(const Encoder&) = delete;

  /// (N, 1, S, S) -> (N, C, S / stride, S / stride).
  Var encode(const Var& images, const ForwardContext& ctx) const;
  const EncoderSpec& spec() const { return spec_; }

 private:
  EncoderSpec spec_;
  std::vector<std::unique_ptr<EncoderLayer>> layers_;
};

}  // namespace cfirn
