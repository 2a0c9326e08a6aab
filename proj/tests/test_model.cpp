#include <gtest/gtest.h>

#include <cmath>

#include "cfirn/error.hpp"
#include "cfirn/model.hpp"
#include "support.hpp"

using namespace cfirn;
using cfirn::testing::random_tensor;

namespace {

TrainConfig micro_config(int input = 16) {
  TrainConfig c = TrainConfig::desk();
  c.backbone = "micro";
  c.input_size = input;
  c.dropout = 0.0;
  return c;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST(Backbone, PresetOutputShapes) {
  std::mt19937_64 rng(1);
  for (auto [name, side] : {std::pair{"micro", 16}, {"tiny", 64}}) {
    ParamStore store(0);
    const EncoderSpec spec = encoder_preset(name);
    Encoder enc(store, spec);
    ForwardContext ctx;
    Var out = enc.encode(constant(random_tensor({2, 1, side, side}, rng, 0, 1)), ctx);
    EXPECT_EQ(out->value.shape(), (Shape{2, spec.channels, side / spec.stride, side / spec.stride})) << name;
  }
}

TEST(Backbone, ConvNextTinyReplicatesGrayInput) {
  std::mt19937_64 rng(2);
  ParamStore store(0);
  const EncoderSpec spec = encoder_preset("convnext_tiny");
  EXPECT_EQ(spec.in_channels, 3);
  EXPECT_EQ(spec.channels, 768);
  Encoder enc(store, spec);
  NoGradGuard guard;
  Var out = enc.encode(constant(random_tensor({1, 1, 32, 32}, rng, 0, 1)), ForwardContext{});
  EXPECT_EQ(out->value.shape(), (Shape{1, 768, 1, 1}));
  EXPECT_TRUE(out->value.all_finite());
}

TEST(Backbone, ContractsOnInput) {
  ParamStore store(0);
  Encoder enc(store, encoder_preset("tiny"));
  ForwardContext ctx;
  EXPECT_THROW(enc.encode(constant(Tensor({1, 1, 48, 48})), ctx), ContractViolation);  // not /32
  EXPECT_THROW(enc.encode(constant(Tensor({1, 3, 64, 64})), ctx), ContractViolation);  // not gray
  EXPECT_THROW(encoder_preset("resnet"), ConfigError);
}

TEST(Backbone, ScaledSidesAndMakeScales) {
  EXPECT_EQ(scaled_side(256, 0.5), 128);
  EXPECT_EQ(scaled_side(128, 2.0), 256);
  EXPECT_THROW(scaled_side(255, 0.5), ConfigError);
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({2, 1, 8, 8}, rng);
  const std::vector<double> scales{0.5, 1.0, 2.0};
  const auto out = make_scales(x, scales);
  EXPECT_EQ(out[0].shape(), (Shape{2, 1, 4, 4}));
  EXPECT_EQ(out[1], x);
  EXPECT_EQ(out[2].shape(), (Shape{2, 1, 16, 16}));
}

TEST(Backbone, SharedWeightsGiveIdenticalBranchOutputs) {
  // Both siamese branches are the same encoder: the same image in either
  // half of the batch produces the same features.
  std::mt19937_64 rng(4);
  TrainConfig c = micro_config();
  CfirnModel model(c, 3);
  const Tensor one = random_tensor({1, 1, 16, 16}, rng, 0, 1);
  Tensor pair({2, 1, 16, 16});
  std::copy(one.storage().begin(), one.storage().end(), pair.storage().begin());
  std::copy(one.storage().begin(), one.storage().end(), pair.storage().begin() + 256);
  const Tensor f = model.embed(pair);
  for (int d = 0; d < f.dim(1); ++d) EXPECT_EQ(f.at(0, d), f.at(1, d));
}

TEST(Cbam, MatchesDirectFormula) {
  std::mt19937_64 rng(5);
  ParamStore store(11);
  const int C = 8, H = 3, W = 4;
  Cbam cbam(store, "cbam", C);
  for (const ParamEntry& p : store.params()) p.var->value = random_tensor(p.var->value.shape(), rng, -0.5, 0.5);
  const Tensor x = random_tensor({1, C, H, W}, rng);
  const Tensor y = cbam.forward(constant(x))->value;

  const int hid = Cbam::hidden_width(C);
  EXPECT_EQ(hid, 4);
  auto mlp = [&](const std::vector<double>& v) {
    std::vector<double> h(hid), o(C);
    for (int j = 0; j < hid; ++j) {
      double s = cbam.fc1.bias->value[j];
      for (int i = 0; i < C; ++i) s += cbam.fc1.weight->value.at(j, i) * v[i];
      h[j] = std::max(s, 0.0);
    }
    for (int i = 0; i < C; ++i) {
      double s = cbam.fc2.bias->value[i];
      for (int j = 0; j < hid; ++j) s += cbam.fc2.weight->value.at(i, j) * h[j];
      o[i] = s;
    }
    return o;
  };
  std::vector<double> avg(C, 0.0), mx(C, -1e300);
  for (int c = 0; c < C; ++c) {
    for (int h = 0; h < H; ++h) {
      for (int w = 0; w < W; ++w) {
        avg[c] += x.at(0, c, h, w) / (H * W);
        mx[c] = std::max(mx[c], x.at(0, c, h, w));
      }
    }
  }
  const auto a = mlp(avg), m = mlp(mx);
  Tensor xc({1, C, H, W});
  for (int c = 0; c < C; ++c) {
    for (int h = 0; h < H; ++h) {
      for (int w = 0; w < W; ++w) xc.at(0, c, h, w) = x.at(0, c, h, w) * sigmoid(a[c] + m[c]);
    }
  }
  const Tensor& sw = cbam.spatial.weight->value;
  for (int h = 0; h < H; ++h) {
    for (int w = 0; w < W; ++w) {
      double s = cbam.spatial.bias->value[0];
      for (int kh = 0; kh < 7; ++kh) {
        for (int kw = 0; kw < 7; ++kw) {
          const int ih = h + kh - 3, iw = w + kw - 3;
          if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
          double cavg = 0.0, cmax = -1e300;
          for (int c = 0; c < C; ++c) {
            cavg += xc.at(0, c, ih, iw) / C;
            cmax = std::max(cmax, xc.at(0, c, ih, iw));
          }
          s += sw.at(0, 0, kh, kw) * cavg + sw.at(0, 1, kh, kw) * cmax;
        }
      }
      for (int c = 0; c < C; ++c) EXPECT_NEAR(y.at(0, c, h, w), xc.at(0, c, h, w) * sigmoid(s), 1e-12);
    }
  }
}

TEST(Mfi, FuseShapesAndResolutionContract) {
  std::mt19937_64 rng(6);
  ParamStore store(0);
  Mfi mfi(store, 8);
  ForwardContext ctx;
  const Var of1 = constant(random_tensor({2, 8, 8, 8}, rng));
  const Var of05 = constant(random_tensor({2, 8, 4, 4}, rng));
  const FusedMap f = mfi.fuse(of1, of05, 2.0, ctx);
  EXPECT_EQ(f.ol->value.shape(), (Shape{2, 16, 8, 8}));
  EXPECT_EQ(f.g->value.shape(), (Shape{2, 8, 8, 8}));
  EXPECT_THROW(mfi.fuse(of1, constant(random_tensor({2, 8, 3, 3}, rng)), 2.0, ctx), ContractViolation);
  EXPECT_THROW(mfi.fuse(of1, constant(random_tensor({2, 4, 4, 4}, rng)), 2.0, ctx), ContractViolation);
}

TEST(Mfi, DownsamplingPathForScalesOneAndTwo) {
  // {1, 2}: the 1x map stays the anchor, the 2x features are resized down
  // onto it, and the enhancement is resized back up for the 2x vector.
  std::mt19937_64 rng(7);
  ParamStore store(0);
  Mfi mfi(store, 8);
  ForwardContext ctx;
  const std::array<double, 2> scales{1.0, 2.0};
  EXPECT_EQ(Mfi::anchor_index(scales), 0);
  EXPECT_EQ(Mfi::anchor_index({0.5, 1.0}), 1);
  EXPECT_EQ(Mfi::anchor_index({0.5, 2.0}), 1);
  const std::array<Var, 2> maps{constant(random_tensor({2, 8, 4, 4}, rng)), constant(random_tensor({2, 8, 8, 8}, rng))};
  const FusedMap f = mfi.fuse(maps[0], maps[1], 0.5, ctx);
  EXPECT_EQ(f.ol->value.shape(), (Shape{2, 16, 4, 4}));
  const IntegratedVectors om = mfi.integrate(maps, scales, ctx);
  EXPECT_EQ(om[0]->value.shape(), (Shape{2, 8}));
  EXPECT_EQ(om[1]->value.shape(), (Shape{2, 8}));
}

TEST(Mfi, ZeroWeightsFallBackToPooledFeatures) {
  std::mt19937_64 rng(8);
  ParamStore store(0);
  Mfi mfi(store, 8);
  for (const ParamEntry& p : store.params()) p.var->value.fill(0.0);
  const std::array<Var, 2> maps{constant(random_tensor({3, 8, 2, 2}, rng)), constant(random_tensor({3, 8, 4, 4}, rng))};
  for (bool training : {false, true}) {
    ForwardContext ctx{training, &rng};
    const IntegratedVectors om = mfi.integrate(maps, {0.5, 1.0}, ctx);
    const IntegratedVectors plain = pool_only(maps);
    EXPECT_EQ(om[0]->value, plain[0]->value);
    EXPECT_EQ(om[1]->value, plain[1]->value);
  }
}

TEST(Mrc, EmbeddingShapesAndUnitNorm) {
  std::mt19937_64 rng(9);
  TrainConfig c = TrainConfig::desk();
  c.input_size = 64;
  CfirnModel model(c, 5);
  ForwardContext ctx{true, &rng};
  const ModelOutput out = model.forward(random_tensor({4, 1, 64, 64}, rng, 0, 1), ctx);
  EXPECT_EQ(out.refined[0]->value.shape(), (Shape{4, 512}));
  EXPECT_EQ(out.refined[1]->value.shape(), (Shape{4, 512}));
  EXPECT_EQ(out.logits->value.shape(), (Shape{4, 5}));
  EXPECT_EQ(out.feature->value.shape(), (Shape{4, 1024}));
  EXPECT_EQ(model.embedding_dim(), 1024);
  for (int r = 0; r < 4; ++r) {
    double n = 0.0;
    for (int d = 0; d < 1024; ++d) n += out.feature->value.at(r, d) * out.feature->value.at(r, d);
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-12);
  }
}

TEST(Mrc, ClassifierNeverTouchesRetrievalFeatures) {
  std::mt19937_64 rng(10);
  TrainConfig c = micro_config();
  CfirnModel model(c, 3);
  const Tensor x = random_tensor({3, 1, 16, 16}, rng, 0, 1);
  const Tensor before = model.embed(x);
  for (const char* name : {"mrc.classifier.weight", "mrc.classifier.bias"}) {
    Var p = model.params().find(name);
    ASSERT_TRUE(p);
    for (double& v : p->value.storage()) v += 10.0 * std::uniform_real_distribution<double>(-1, 1)(rng);
  }
  EXPECT_EQ(model.embed(x), before);
}

TEST(Mrc, FusedLogitsAverageTheSharedHead) {
  std::mt19937_64 rng(11);
  ParamStore store(0);
  Mrc mrc(store, 8, 4, 0.0);
  const RefinedEmbedding r{constant(random_tensor({2, 512}, rng)), constant(random_tensor({2, 512}, rng))};
  const Tensor fused = mrc.classify(r)->value;
  const Tensor lo = mrc.classifier.forward(r[0])->value;
  const Tensor hi = mrc.classifier.forward(r[1])->value;
  for (std::size_t i = 0; i < fused.numel(); ++i) EXPECT_DOUBLE_EQ(fused[i], 0.5 * (lo[i] + hi[i]));
  ParamStore fresh(0);
  EXPECT_THROW(Mrc(fresh, 8, 0, 0.0), ConfigError);
}

TEST(Init, KaimingVarianceAndZeroBiases) {
  ParamStore store(123);
  Linear big(store, "big", 256, 512, ParamGroup::head);
  double mean = 0.0, var = 0.0;
  const auto& w = big.weight->value.storage();
  for (double v : w) mean += v;
  mean /= static_cast<double>(w.size());
  for (double v : w) var += (v - mean) * (v - mean);
  var /= static_cast<double>(w.size() - 1);
  EXPECT_NEAR(var, 2.0 / 256.0, 0.03 * 2.0 / 256.0);
  EXPECT_NEAR(mean, 0.0, 0.002);
  for (double b : big.bias->value.storage()) EXPECT_EQ(b, 0.0);
  // Same seed, same draws.
  ParamStore again(123);
  Linear twin(again, "big", 256, 512, ParamGroup::head);
  EXPECT_EQ(twin.weight->value, big.weight->value);
}

TEST(Model, MrcBypassUsesPooledConcatenation) {
  std::mt19937_64 rng(12);
  TrainConfig c = micro_config();
  c.mrc_enabled = false;
  CfirnModel model(c, 3);
  EXPECT_EQ(model.mrc(), nullptr);
  EXPECT_EQ(model.embedding_dim(), 16);
  ForwardContext ctx{true, &rng};
  const ModelOutput out = model.forward(random_tensor({2, 1, 16, 16}, rng, 0, 1), ctx);
  EXPECT_FALSE(out.logits);
  EXPECT_EQ(out.feature->value.shape(), (Shape{2, 16}));
}

TEST(Model, RejectsWrongInputSize) {
  CfirnModel model(micro_config(), 3);
  EXPECT_THROW(model.embed(Tensor({1, 1, 8, 8})), ContractViolation);
}
