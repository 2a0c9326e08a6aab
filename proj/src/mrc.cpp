#include "cfirn/mrc.hpp"

#include "cfirn/error.hpp"

namespace cfirn {

LinearBlock::LinearBlock(ParamStore& store, const std::string& name, int in_features, int out_features,
                         double dropout)
    : linear(store, name + ".linear", in_features, out_features, ParamGroup::head),
      bn(store, name + ".bn", out_features, ParamGroup::head),
      dropout_rate(dropout) {}

Var LinearBlock::forward(const Var& x, const ForwardContext& ctx) const {
  return ops::dropout(bn.forward(linear.forward(x), ctx), dropout_rate, ctx.training, ctx.rng);
}

Mrc::Mrc(ParamStore& store, int in_channels, int num_classes, double dropout, int refined_dim)
    : block_lo(store, "mrc.block_lo", in_channels, refined_dim, dropout),
      block_hi(store, "mrc.block_hi", in_channels, refined_dim, dropout),
      classifier(store, "mrc.classifier", refined_dim, num_classes, ParamGroup::head),
      num_classes_(num_classes) {
  if (num_classes < 1) throw ConfigError("classifier needs at least one class");
}

RefinedEmbedding Mrc::refine(const IntegratedVectors& om, const ForwardContext& ctx) const {
  const int c = block_lo.linear.weight->value.dim(1);
  for (const Var& v : om) {
    if (v->value.rank() != 2 || v->value.dim(1) != c) {
      throw ContractViolation("mrc.refine expects (N, " + std::to_string(c) + ") inputs, got " +
                              shape_str(v->value.shape()));
    }
  }
  return {block_lo.forward(om[0], ctx), block_hi.forward(om[1], ctx)};
}

Var Mrc::classify(const RefinedEmbedding& refined) const {
  return ops::scale(ops::add(classifier.forward(refined[0]), classifier.forward(refined[1])), 0.5);
}

Var test_feature(const RefinedEmbedding& refined) {
  return ops::l2_normalize_rows(ops::concat_cols({refined[0], refined[1]}));
}

}  // namespace cfirn
