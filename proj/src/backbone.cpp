#include "cfirn/backbone.hpp"

#include <array>
#include <cmath>

#include "cfirn/error.hpp"
#include "cfirn/kernels.hpp"

namespace cfirn {

namespace {

struct ConvNextShape {
  std::array<int, 4> depths;
  std::array<int, 4> dims;
};

ConvNextShape convnext_shape(std::string_view name) {
  if (name == "convnext_tiny") return {{3, 3, 9, 3}, {96, 192, 384, 768}};
  if (name == "convnext_small") return {{3, 3, 27, 3}, {96, 192, 384, 768}};
  return {{3, 3, 27, 3}, {128, 256, 512, 1024}};
}

bool is_convnext(std::string_view name) { return name.rfind("convnext_", 0) == 0; }

// conv (any stride) -> BN -> ReLU
class ConvBnRelu : public EncoderLayer {
 public:
  ConvBnRelu(ParamStore& s, const std::string& name, int in, int out, int kernel, int stride, int pad)
      : conv_(s, name + ".conv", in, out, kernel, stride, pad, ParamGroup::backbone),
        bn_(s, name + ".bn", out, ParamGroup::backbone) {}
  Var forward(const Var& x, const ForwardContext& ctx) const override {
    return ops::relu(bn_.forward(conv_.forward(x), ctx));
  }

 private:
  Conv2d conv_;
  BatchNorm bn_;
};

// relu(x + BN(conv3x3(x)))
class ResidualBlock : public EncoderLayer {
 public:
  ResidualBlock(ParamStore& s, const std::string& name, int channels)
      : conv_(s, name + ".conv", channels, channels, 3, 1, 1, ParamGroup::backbone),
        bn_(s, name + ".bn", channels, ParamGroup::backbone) {}
  Var forward(const Var& x, const ForwardContext& ctx) const override {
    return ops::relu(ops::add(x, bn_.forward(conv_.forward(x), ctx)));
  }

 private:
  Conv2d conv_;
  BatchNorm bn_;
};

class ChannelLayerNorm : public EncoderLayer {
 public:
  ChannelLayerNorm(ParamStore& s, const std::string& name, int channels)
      : gamma_(s.constant(name + ".gamma", {channels}, 1.0, ParamGroup::backbone)),
        beta_(s.constant(name + ".beta", {channels}, 0.0, ParamGroup::backbone)) {}
  Var forward(const Var& x, const ForwardContext&) const override {
    return ops::layer_norm_channels(x, gamma_, beta_);
  }

 private:
  Var gamma_;
  Var beta_;
};

class PlainConv : public EncoderLayer {
 public:
  PlainConv(ParamStore& s, const std::string& name, int in, int out, int kernel, int stride)
      : conv_(s, name, in, out, kernel, stride, 0, ParamGroup::backbone) {}
  Var forward(const Var& x, const ForwardContext&) const override { return conv_.forward(x); }

 private:
  Conv2d conv_;
};

// depthwise 7x7 -> LN -> 1x1 (4x) -> GELU -> 1x1 -> layer scale -> + x
class ConvNextBlock : public EncoderLayer {
 public:
  ConvNextBlock(ParamStore& s, const std::string& name, int dim)
      : dw_(s, name + ".dwconv", dim, dim, 7, 1, 3, ParamGroup::backbone, dim),
        norm_(s, name + ".norm", dim),
        pw1_(s, name + ".pwconv1", dim, 4 * dim, 1, 1, 0, ParamGroup::backbone),
        pw2_(s, name + ".pwconv2", 4 * dim, dim, 1, 1, 0, ParamGroup::backbone),
        layer_scale_(s.constant(name + ".layer_scale", {1, dim, 1, 1}, 1e-6, ParamGroup::backbone)) {}
  Var forward(const Var& x, const ForwardContext& ctx) const override {
    Var y = norm_.forward(dw_.forward(x), ctx);
    y = pw2_.forward(ops::gelu(pw1_.forward(y)));
    return ops::add(x, ops::mul(y, layer_scale_));
  }

 private:
  Conv2d dw_;
  ChannelLayerNorm norm_;
  Conv2d pw1_;
  Conv2d pw2_;
  Var layer_scale_;
};

}  // namespace

EncoderSpec encoder_preset(std::string_view name) {
  EncoderSpec s;
  s.name = std::string(name);
  if (name == "micro") {
    s.in_channels = 1;
    s.channels = 8;
    s.stride = 2;
  } else if (name == "tiny") {
    s.in_channels = 1;
    s.channels = 64;
    s.stride = 32;
  } else if (name == "convnext_tiny" || name == "convnext_small" || name == "convnext_base") {
    s.in_channels = 3;
    s.channels = convnext_shape(name).dims[3];
    s.stride = 32;
  } else {
    throw ConfigError("unknown backbone preset '" + std::string(name) + "'");
  }
  return s;
}

std::vector<std::string> encoder_preset_names() {
  return {"micro", "tiny", "convnext_tiny", "convnext_small", "convnext_base"};
}

int scaled_side(int side, double scale) {
  if (!(scale > 0.0)) throw ConfigError("scale factors must be positive");
  const double v = side * scale;
  const double r = std::round(v);
  if (r < 1.0 || std::abs(v - r) > 1e-9) {
    throw ConfigError("input side " + std::to_string(side) + " cannot be rescaled by " + std::to_string(scale) +
                      " to an integer size (use an even input size)");
  }
  return static_cast<int>(r);
}

std::vector<Tensor> make_scales(const Tensor& images, std::span<const double> scales) {
  if (images.rank() != 4) throw ContractViolation("make_scales expects (N, C, S, S), got " + shape_str(images.shape()));
  const int side = images.dim(2);
  if (images.dim(3) != side) throw ContractViolation("make_scales expects square inputs");
  std::vector<Tensor> out;
  for (double k : scales) {
    const int s = scaled_side(side, k);
    if (s == side) {
      out.push_back(images);
      continue;
    }
    Tensor t({images.dim(0), images.dim(1), s, s});
    kernels::resize_bilinear_forward({images.dim(0) * images.dim(1), side, side, s, s}, images.values(), t.values());
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<Image> make_scales(const Image& image, std::span<const double> scales) {
  std::vector<Image> out;
  for (double k : scales) {
    const int w = scaled_side(image.width, k);
    const int h = scaled_side(image.height, k);
    out.push_back(resize_bilinear(image, w, h));
  }
  return out;
}

Encoder::Encoder(ParamStore& s, EncoderSpec spec) : spec_(std::move(spec)) {
  const std::string p = "encoder";
  if (spec_.name == "micro") {
    layers_.push_back(std::make_unique<ConvBnRelu>(s, p + ".stem", spec_.in_channels, 8, 3, 2, 1));
    layers_.push_back(std::make_unique<ResidualBlock>(s, p + ".block1", 8));
  } else if (spec_.name == "tiny") {
    // 4x4/4 stem then three 2x2/2 downsamples, one residual 3x3 block per stage.
    const std::array<int, 4> dims{16, 32, 48, 64};
    layers_.push_back(std::make_unique<ConvBnRelu>(s, p + ".stem", spec_.in_channels, dims[0], 4, 4, 0));
    layers_.push_back(std::make_unique<ResidualBlock>(s, p + ".stage0.block", dims[0]));
    for (int i = 1; i < 4; ++i) {
      const std::string st = p + ".stage" + std::to_string(i);
      layers_.push_back(std::make_unique<ConvBnRelu>(s, st + ".down", dims[i - 1], dims[i], 2, 2, 0));
      layers_.push_back(std::make_unique<ResidualBlock>(s, st + ".block", dims[i]));
    }
  } else if (is_convnext(spec_.name)) {
    const ConvNextShape shape = convnext_shape(spec_.name);
    layers_.push_back(std::make_unique<PlainConv>(s, p + ".stem.conv", spec_.in_channels, shape.dims[0], 4, 4));
    layers_.push_back(std::make_unique<ChannelLayerNorm>(s, p + ".stem.norm", shape.dims[0]));
    for (int i = 0; i < 4; ++i) {
      const std::string st = p + ".stage" + std::to_string(i);
      if (i > 0) {
        layers_.push_back(std::make_unique<ChannelLayerNorm>(s, st + ".down.norm", shape.dims[i - 1]));
        layers_.push_back(std::make_unique<PlainConv>(s, st + ".down.conv", shape.dims[i - 1], shape.dims[i], 2, 2));
      }
      for (int b = 0; b < shape.depths[i]; ++b) {
        layers_.push_back(std::make_unique<ConvNextBlock>(s, st + ".block" + std::to_string(b), shape.dims[i]));
      }
    }
    layers_.push_back(std::make_unique<ChannelLayerNorm>(s, p + ".final_norm", shape.dims[3]));
  } else {
    throw ConfigError("unknown backbone preset '" + spec_.name + "'");
  }
}

Var Encoder::encode(const Var& images, const ForwardContext& ctx) const {
  const Tensor& t = images->value;
  if (t.rank() != 4 || t.dim(1) != 1) {
    throw ContractViolation("encoder expects (N, 1, S, S) gray input, got " + shape_str(t.shape()));
  }
  if (t.dim(2) % spec_.stride != 0 || t.dim(3) % spec_.stride != 0) {
    throw ContractViolation("input " + std::to_string(t.dim(2)) + "x" + std::to_string(t.dim(3)) +
                            " is not divisible by encoder stride " + std::to_string(spec_.stride));
  }
  Var x = images;
  if (spec_.in_channels == 3) x = ops::concat_channels({x, x, x});
  for (const auto& layer : layers_) x = layer->forward(x, ctx);
  if (x->value.dim(1) != spec_.channels) {
    throw ContractViolation("encoder produced " + std::to_string(x->value.dim(1)) + " channels, spec says " +
                            std::to_string(spec_.channels));
  }
  return x;
}

}  // namespace cfirn
