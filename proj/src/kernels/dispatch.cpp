#include <algorithm>
#include <atomic>
#include <cmath>

#include "cfirn/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cfirn::kernels {

namespace {
std::atomic<Backend> g_backend{Backend::parallel};
}

void set_backend(Backend b) { g_backend.store(b); }
Backend backend() { return g_backend.load(); }

void set_num_threads(int threads) {
#ifdef _OPENMP
  if (threads > 0) omp_set_num_threads(threads);
#else
  (void)threads;
#endif
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

BilinearTap bilinear_tap(int out_index, int in_size, int out_size) {
  const double scale = static_cast<double>(in_size) / out_size;
  double src = (out_index + 0.5) * scale - 0.5;
  if (src < 0.0) src = 0.0;
  int i0 = static_cast<int>(std::floor(src));
  if (i0 > in_size - 1) i0 = in_size - 1;
  const int i1 = i0 < in_size - 1 ? i0 + 1 : i0;
  const double w1 = src - i0;
  return {i0, i1, 1.0 - w1, w1};
}

#define CFIRN_DISPATCH(name, ...)                     \
  if (backend() == Backend::reference) {              \
    reference::name(__VA_ARGS__);                     \
  } else {                                            \
    parallel::name(__VA_ARGS__);                      \
  }

void conv2d_forward(const ConvGeometry& g, std::span<const double> input, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> output) {
  CFIRN_DISPATCH(conv2d_forward, g, input, weight, bias, output)
}

void conv2d_backward_input(const ConvGeometry& g, std::span<const double> grad_output,
                           std::span<const double> weight, std::span<double> grad_input) {
  CFIRN_DISPATCH(conv2d_backward_input, g, grad_output, weight, grad_input)
}

void conv2d_backward_weight(const ConvGeometry& g, std::span<const double> input,
                            std::span<const double> grad_output, std::span<double> grad_weight,
                            std::span<double> grad_bias) {
  CFIRN_DISPATCH(conv2d_backward_weight, g, input, grad_output, grad_weight, grad_bias)
}

void linear_forward(const LinearGeometry& g, std::span<const double> input, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> output) {
  CFIRN_DISPATCH(linear_forward, g, input, weight, bias, output)
}

void linear_backward_input(const LinearGeometry& g, std::span<const double> grad_output,
                           std::span<const double> weight, std::span<double> grad_input) {
  CFIRN_DISPATCH(linear_backward_input, g, grad_output, weight, grad_input)
}

void linear_backward_weight(const LinearGeometry& g, std::span<const double> input,
                            std::span<const double> grad_output, std::span<double> grad_weight,
                            std::span<double> grad_bias) {
  CFIRN_DISPATCH(linear_backward_weight, g, input, grad_output, grad_weight, grad_bias)
}

void resize_bilinear_forward(const ResizeGeometry& g, std::span<const double> input, std::span<double> output) {
  CFIRN_DISPATCH(resize_bilinear_forward, g, input, output)
}

void resize_bilinear_backward(const ResizeGeometry& g, std::span<const double> grad_output,
                              std::span<double> grad_input) {
  CFIRN_DISPATCH(resize_bilinear_backward, g, grad_output, grad_input)
}

#undef CFIRN_DISPATCH

}  // namespace cfirn::kernels
