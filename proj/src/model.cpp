#include "cfirn/model.hpp"

#include "cfirn/error.hpp"

namespace cfirn {

CfirnModel::CfirnModel(const TrainConfig& config, int num_classes)
    : CfirnModel(config, num_classes, encoder_preset(config.backbone)) {}

CfirnModel::CfirnModel(const TrainConfig& config, int num_classes, const EncoderSpec& encoder)
    : config_(config), num_classes_(num_classes), store_(std::make_unique<ParamStore>(config.seed)) {
  EncoderSpec spec = encoder;
  spec.pretrained = config.pretrained;
  encoder_ = std::make_unique<Encoder>(*store_, spec);
  if (config.mfi_enabled) mfi_ = std::make_unique<Mfi>(*store_, spec.channels);
  if (config.mrc_enabled) mrc_ = std::make_unique<Mrc>(*store_, spec.channels, num_classes, config.dropout);
}

ModelOutput CfirnModel::forward(const Tensor& images, const ForwardContext& ctx) const {
  if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != config_.input_size ||
      images.dim(3) != config_.input_size) {
    throw ContractViolation("model expects (N, 1, " + std::to_string(config_.input_size) + ", " +
                            std::to_string(config_.input_size) + ") input, got " + shape_str(images.shape()));
  }
  const std::vector<Tensor> scaled = make_scales(images, config_.scales);
  ModelOutput out;
  for (int k = 0; k < 2; ++k) out.maps[k] = encoder_->encode(constant(scaled[k]), ctx);
  out.integrated = mfi_ ? mfi_->integrate(out.maps, config_.scales, ctx) : pool_only(out.maps);
  if (mrc_) {
    out.refined = mrc_->refine(out.integrated, ctx);
    out.logits = mrc_->classify(out.refined);
    out.feature = test_feature(out.refined);
  } else {
    out.feature = ops::l2_normalize_rows(ops::concat_cols({out.integrated[0], out.integrated[1]}));
  }
  return out;
}

Tensor CfirnModel::embed(const Tensor& images) const {
  NoGradGuard guard;
  ForwardContext ctx;
  ctx.training = false;
  return forward(images, ctx).feature->value;
}

int CfirnModel::embedding_dim() const {
  return mrc_ ? 2 * mrc_->block_lo.linear.weight->value.dim(0) : 2 * encoder_->spec().channels;
}

Tensor stack_images(std::span<const Image> images) {
  if (images.empty()) throw ContractViolation("stack_images: empty batch");
  const int side = images.front().width;
  Tensor out({static_cast<int>(images.size()), 1, side, side});
  std::size_t offset = 0;
  for (const Image& im : images) {
    if (im.width != side || im.height != side) throw ContractViolation("stack_images: mixed image sizes");
    std::copy(im.pixels.begin(), im.pixels.end(), out.data() + offset);
    offset += im.pixels.size();
  }
  return out;
}

}  // namespace cfirn
