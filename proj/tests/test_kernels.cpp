#include <gtest/gtest.h>

#include <random>

#include "cfirn/kernels.hpp"
#include "support.hpp"

using namespace cfirn;
using cfirn::testing::random_tensor;

namespace {

struct ConvCase {
  kernels::ConvGeometry g;
};

std::vector<kernels::ConvGeometry> conv_cases() {
  std::vector<kernels::ConvGeometry> out;
  // batch, in_c, h, w, out_c, kh, kw, stride, pad, groups
  out.push_back({2, 3, 9, 7, 4, 3, 3, 1, 1, 1});
  out.push_back({1, 4, 8, 8, 6, 3, 3, 2, 1, 2});
  out.push_back({3, 1, 16, 16, 5, 4, 4, 4, 0, 1});
  out.push_back({2, 6, 7, 7, 6, 7, 7, 1, 3, 6});  // depthwise
  out.push_back({1, 2, 5, 5, 3, 1, 1, 1, 0, 1});
  out.push_back({2, 4, 6, 6, 2, 2, 2, 2, 0, 1});
  return out;
}

Tensor conv_output_shape(const kernels::ConvGeometry& g) { return Tensor({g.batch, g.out_channels, g.out_h(), g.out_w()}); }

}  // namespace

TEST(ConvOracle, HandComputedSingleChannel) {
  // 3x3 input, 2x2 kernel, stride 1, no padding.
  kernels::ConvGeometry g{1, 1, 3, 3, 1, 2, 2, 1, 0, 1};
  const std::vector<double> in{1, 2, 3, 4, 5, 6, 7, 8, 9};
  const std::vector<double> w{1, 0, -1, 2};
  const std::vector<double> b{0.5};
  std::vector<double> out(4);
  for (auto be : {kernels::Backend::reference, kernels::Backend::parallel}) {
    kernels::BackendGuard guard(be);
    kernels::conv2d_forward(g, in, w, b, out);
    // (1*1 + 2*0 + 4*-1 + 5*2) + .5 = 7.5, etc.
    EXPECT_EQ(out, (std::vector<double>{7.5, 9.5, 13.5, 15.5}));
  }
}

TEST(ConvOracle, PaddingAndStride) {
  // 1x1 channel, 4x4 ones, 3x3 ones kernel, pad 1, stride 2 -> corner sums.
  kernels::ConvGeometry g{1, 1, 4, 4, 1, 3, 3, 2, 1, 1};
  std::vector<double> in(16, 1.0), w(9, 1.0), out(4);
  kernels::conv2d_forward(g, in, w, {}, out);
  EXPECT_EQ(out, (std::vector<double>{4, 6, 6, 9}));
}

TEST(Kernels, ParallelMatchesReferenceBitwise) {
  std::mt19937_64 rng(7);
  for (const auto& g : conv_cases()) {
    const Tensor x = random_tensor({g.batch, g.in_channels, g.in_h, g.in_w}, rng);
    const Tensor w = random_tensor({g.out_channels, g.in_per_group(), g.kernel_h, g.kernel_w}, rng);
    const Tensor b = random_tensor({g.out_channels}, rng);
    const Tensor go = random_tensor(conv_output_shape(g).shape(), rng);
    Tensor out_r = conv_output_shape(g), out_p = conv_output_shape(g);
    kernels::reference::conv2d_forward(g, x.values(), w.values(), b.values(), out_r.values());
    kernels::parallel::conv2d_forward(g, x.values(), w.values(), b.values(), out_p.values());
    EXPECT_EQ(out_r, out_p);

    Tensor gi_r(x.shape()), gi_p(x.shape());
    kernels::reference::conv2d_backward_input(g, go.values(), w.values(), gi_r.values());
    kernels::parallel::conv2d_backward_input(g, go.values(), w.values(), gi_p.values());
    EXPECT_EQ(gi_r, gi_p);

    Tensor gw_r(w.shape()), gw_p(w.shape()), gb_r(b.shape()), gb_p(b.shape());
    kernels::reference::conv2d_backward_weight(g, x.values(), go.values(), gw_r.values(), gb_r.values());
    kernels::parallel::conv2d_backward_weight(g, x.values(), go.values(), gw_p.values(), gb_p.values());
    EXPECT_EQ(gw_r, gw_p);
    EXPECT_EQ(gb_r, gb_p);
  }

  kernels::LinearGeometry lg{5, 13, 7};
  const Tensor x = random_tensor({5, 13}, rng), w = random_tensor({7, 13}, rng), b = random_tensor({7}, rng);
  const Tensor go = random_tensor({5, 7}, rng);
  Tensor o_r({5, 7}), o_p({5, 7});
  kernels::reference::linear_forward(lg, x.values(), w.values(), b.values(), o_r.values());
  kernels::parallel::linear_forward(lg, x.values(), w.values(), b.values(), o_p.values());
  EXPECT_EQ(o_r, o_p);
  Tensor gi_r({5, 13}), gi_p({5, 13}), gw_r({7, 13}), gw_p({7, 13}), gb_r({7}), gb_p({7});
  kernels::reference::linear_backward_input(lg, go.values(), w.values(), gi_r.values());
  kernels::parallel::linear_backward_input(lg, go.values(), w.values(), gi_p.values());
  EXPECT_EQ(gi_r, gi_p);
  kernels::reference::linear_backward_weight(lg, x.values(), go.values(), gw_r.values(), gb_r.values());
  kernels::parallel::linear_backward_weight(lg, x.values(), go.values(), gw_p.values(), gb_p.values());
  EXPECT_EQ(gw_r, gw_p);
  EXPECT_EQ(gb_r, gb_p);

  for (auto [ih, iw, oh, ow] : {std::array{4, 4, 8, 8}, {8, 8, 4, 4}, {5, 3, 7, 11}, {2, 2, 8, 8}}) {
    kernels::ResizeGeometry rg{3, ih, iw, oh, ow};
    const Tensor in = random_tensor({3, ih, iw}, rng), gout = random_tensor({3, oh, ow}, rng);
    Tensor r_r({3, oh, ow}), r_p({3, oh, ow}), b_r({3, ih, iw}), b_p({3, ih, iw});
    kernels::reference::resize_bilinear_forward(rg, in.values(), r_r.values());
    kernels::parallel::resize_bilinear_forward(rg, in.values(), r_p.values());
    EXPECT_EQ(r_r, r_p);
    kernels::reference::resize_bilinear_backward(rg, gout.values(), b_r.values());
    kernels::parallel::resize_bilinear_backward(rg, gout.values(), b_p.values());
    EXPECT_EQ(b_r, b_p);
  }
}

TEST(Kernels, ThreadCountDoesNotChangeResults) {
  std::mt19937_64 rng(3);
  kernels::ConvGeometry g{4, 8, 12, 12, 8, 3, 3, 1, 1, 1};
  const Tensor x = random_tensor({4, 8, 12, 12}, rng), w = random_tensor({8, 8, 3, 3}, rng);
  const Tensor go = random_tensor({4, 8, 12, 12}, rng);
  auto run = [&](int threads) {
    kernels::set_num_threads(threads);
    Tensor out({4, 8, 12, 12}), gi(x.shape()), gw(w.shape());
    kernels::parallel::conv2d_forward(g, x.values(), w.values(), {}, out.values());
    kernels::parallel::conv2d_backward_input(g, go.values(), w.values(), gi.values());
    kernels::parallel::conv2d_backward_weight(g, x.values(), go.values(), gw.values(), {});
    return std::array{out, gi, gw};
  };
  const int before = kernels::max_threads();
  const auto one = run(1);
  const auto four = run(4);
  kernels::set_num_threads(before);
  EXPECT_EQ(one, four);
}

TEST(BilinearOracle, HalfPixelCenters) {
  // 2 -> 4 upsampling of [0, 1]: centers at -0.25, 0.25, 0.75, 1.25 -> clamp.
  kernels::ResizeGeometry g{1, 1, 2, 1, 4};
  const std::vector<double> in{0.0, 1.0};
  std::vector<double> out(4);
  kernels::resize_bilinear_forward(g, in, out);
  EXPECT_EQ(out, (std::vector<double>{0.0, 0.25, 0.75, 1.0}));
  // 4 -> 2 downsampling averages neighbor pairs.
  kernels::ResizeGeometry d{1, 1, 4, 1, 2};
  const std::vector<double> in4{1.0, 3.0, 5.0, 9.0};
  std::vector<double> out2(2);
  kernels::resize_bilinear_forward(d, in4, out2);
  EXPECT_EQ(out2, (std::vector<double>{2.0, 7.0}));
}

TEST(BilinearOracle, SameSizeIsIdentityAndAdjointHolds) {
  std::mt19937_64 rng(11);
  kernels::ResizeGeometry same{2, 5, 6, 5, 6};
  const Tensor x = random_tensor({2, 5, 6}, rng);
  Tensor y({2, 5, 6});
  kernels::resize_bilinear_forward(same, x.values(), y.values());
  EXPECT_EQ(x, y);

  // <R x, y> == <x, R^T y>
  kernels::ResizeGeometry g{1, 3, 5, 7, 4};
  const Tensor a = random_tensor({1, 3, 5}, rng), b = random_tensor({1, 7, 4}, rng);
  Tensor ra({1, 7, 4}), rtb({1, 3, 5});
  kernels::resize_bilinear_forward(g, a.values(), ra.values());
  kernels::resize_bilinear_backward(g, b.values(), rtb.values());
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < ra.numel(); ++i) lhs += ra[i] * b[i];
  for (std::size_t i = 0; i < a.numel(); ++i) rhs += a[i] * rtb[i];
  EXPECT_NEAR(lhs, rhs, 1e-12);
}
