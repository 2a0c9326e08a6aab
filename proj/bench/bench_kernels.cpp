// Reference vs parallel kernels on shapes taken from the tiny preset at a
// 128-pixel input with a batch of 16 images.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "cfirn/kernels.hpp"

namespace k = cfirn::kernels;

namespace {

std::vector<double> random_buffer(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

// {in_channels, out_channels, side, kernel, stride, pad, groups}
k::ConvGeometry conv_shape(const benchmark::State& s) {
  k::ConvGeometry g;
  g.batch = 16;
  g.in_channels = static_cast<int>(s.range(0));
  g.out_channels = static_cast<int>(s.range(1));
  g.in_h = g.in_w = static_cast<int>(s.range(2));
  g.kernel_h = g.kernel_w = static_cast<int>(s.range(3));
  g.stride = static_cast<int>(s.range(4));
  g.pad = static_cast<int>(s.range(5));
  g.groups = static_cast<int>(s.range(6));
  return g;
}

struct ConvBuffers {
  std::vector<double> in, w, b, out;
  explicit ConvBuffers(const k::ConvGeometry& g)
      : in(random_buffer(static_cast<std::size_t>(g.batch) * g.in_channels * g.in_h * g.in_w, 1)),
        w(random_buffer(static_cast<std::size_t>(g.out_channels) * g.in_per_group() * g.kernel_h * g.kernel_w, 2)),
        b(random_buffer(static_cast<std::size_t>(g.out_channels), 3)),
        out(static_cast<std::size_t>(g.batch) * g.out_channels * g.out_h() * g.out_w()) {}
};

void set_flops(benchmark::State& s, const k::ConvGeometry& g) {
  const double macs = static_cast<double>(g.batch) * g.out_channels * g.out_h() * g.out_w() * g.in_per_group() *
                      g.kernel_h * g.kernel_w;
  s.counters["MAC/s"] = benchmark::Counter(macs, benchmark::Counter::kIsIterationInvariantRate);
}

template <auto Fn>
void conv_forward(benchmark::State& s) {
  const auto g = conv_shape(s);
  ConvBuffers buf(g);
  for (auto _ : s) {
    Fn(g, buf.in, buf.w, buf.b, buf.out);
    benchmark::DoNotOptimize(buf.out.data());
  }
  set_flops(s, g);
}

template <auto Fn>
void conv_backward_input(benchmark::State& s) {
  const auto g = conv_shape(s);
  ConvBuffers buf(g);
  const auto go = random_buffer(buf.out.size(), 4);
  std::vector<double> gi(buf.in.size());
  for (auto _ : s) {
    Fn(g, go, buf.w, gi);
    benchmark::DoNotOptimize(gi.data());
  }
  set_flops(s, g);
}

template <auto Fn>
void conv_backward_weight(benchmark::State& s) {
  const auto g = conv_shape(s);
  ConvBuffers buf(g);
  const auto go = random_buffer(buf.out.size(), 4);
  std::vector<double> gw(buf.w.size()), gb(buf.b.size());
  for (auto _ : s) {
    Fn(g, buf.in, go, gw, gb);
    benchmark::DoNotOptimize(gw.data());
  }
  set_flops(s, g);
}

template <auto Fn>
void linear_forward(benchmark::State& s) {
  const k::LinearGeometry g{16, static_cast<int>(s.range(0)), static_cast<int>(s.range(1))};
  const auto in = random_buffer(static_cast<std::size_t>(g.rows) * g.in_features, 1);
  const auto w = random_buffer(static_cast<std::size_t>(g.in_features) * g.out_features, 2);
  const auto b = random_buffer(static_cast<std::size_t>(g.out_features), 3);
  std::vector<double> out(static_cast<std::size_t>(g.rows) * g.out_features);
  for (auto _ : s) {
    Fn(g, in, w, b, out);
    benchmark::DoNotOptimize(out.data());
  }
}

template <auto Fn>
void resize(benchmark::State& s) {
  const k::ResizeGeometry g{16 * 64, 4, 4, 8, 8};
  const auto in = random_buffer(static_cast<std::size_t>(g.planes) * g.in_h * g.in_w, 1);
  std::vector<double> out(static_cast<std::size_t>(g.planes) * g.out_h * g.out_w);
  for (auto _ : s) {
    Fn(g, in, out);
    benchmark::DoNotOptimize(out.data());
  }
}

void conv_args(benchmark::internal::Benchmark* b) {
  b->ArgNames({"cin", "cout", "side", "k", "stride", "pad", "groups"});
  b->Args({1, 16, 128, 4, 4, 0, 1});   // stem
  b->Args({16, 16, 32, 3, 1, 1, 1});   // stage 0 residual
  b->Args({48, 48, 8, 3, 1, 1, 1});    // stage 2 residual
  b->Args({64, 64, 4, 3, 1, 1, 1});    // fusion CBR
  b->Args({96, 96, 16, 7, 1, 3, 96});  // depthwise, ConvNeXt style
  b->Unit(benchmark::kMillisecond);
}

}  // namespace

BENCHMARK(conv_forward<k::reference::conv2d_forward>)->Apply(conv_args);
BENCHMARK(conv_forward<k::parallel::conv2d_forward>)->Apply(conv_args);
BENCHMARK(conv_backward_input<k::reference::conv2d_backward_input>)->Apply(conv_args);
BENCHMARK(conv_backward_input<k::parallel::conv2d_backward_input>)->Apply(conv_args);
BENCHMARK(conv_backward_weight<k::reference::conv2d_backward_weight>)->Apply(conv_args);
BENCHMARK(conv_backward_weight<k::parallel::conv2d_backward_weight>)->Apply(conv_args);
BENCHMARK(linear_forward<k::reference::linear_forward>)->Args({128, 512})->Args({512, 20});
BENCHMARK(linear_forward<k::parallel::linear_forward>)->Args({128, 512})->Args({512, 20});
BENCHMARK(resize<k::reference::resize_bilinear_forward>);
BENCHMARK(resize<k::parallel::resize_bilinear_forward>);

BENCHMARK_MAIN();
