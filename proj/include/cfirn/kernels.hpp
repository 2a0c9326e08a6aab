#pragma once

// Compute kernels behind the autograd ops. Two implementations share one
// signature set:
//
//   kernels::reference  naive serial loops, one output element at a time.
//                       Slow and obviously correct; used by tests and the
//                       benchmark as the baseline.
//   kernels::parallel   loop-reordered, vectorizable, OpenMP over independent
//                       output planes. Each output element is accumulated in
//                       a fixed order, so results do not depend on the thread
//                       count.
//
// The free functions in `kernels::` dispatch on the process-wide backend.
// All backward kernels accumulate into their gradient outputs.

#include <span>

namespace cfirn::kernels {

struct ConvGeometry {
  int batch = 1;
  int in_channels = 1;
  int in_h = 1;
  int in_w = 1;
  int out_channels = 1;
  int kernel_h = 1;
  int kernel_w = 1;
  int stride = 1;
  int pad = 0;
  int groups = 1;

  int out_h() const { return (in_h + 2 * pad - kernel_h) / stride + 1; }
  int out_w() const { return (in_w + 2 * pad - kernel_w) / stride + 1; }
  int in_per_group() const { return in_channels / groups; }
  int out_per_group() const { return out_channels / groups; }
};

struct LinearGeometry {
  int rows = 1;
  int in_features = 1;
  int out_features = 1;
};

/// Bilinear resize of `planes` independent H x W planes (half-pixel centers,
/// edge clamp).
struct ResizeGeometry {
  int planes = 1;
  int in_h = 1;
  int in_w = 1;
  int out_h = 1;
  int out_w = 1;
};

enum class Backend { reference, parallel };

void set_backend(Backend backend);
Backend backend();
void set_num_threads(int threads);
int max_threads();

class BackendGuard {
 public:
  explicit BackendGuard(Backend b) : previous_(backend()) { set_backend(b); }
  ~BackendGuard() { set_backend(previous_); }
  BackendGuard(const BackendGuard&) = delete;
  BackendGuard& operator=(const BackendGuard&) = delete;

 private:
  Backend previous_;
};

#define CFIRN_KERNEL_DECLS                                                                              \
  void conv2d_forward(const ConvGeometry& g, std::span<const double> input, std::span<const double> weight, \
                      std::span<const double> bias, std::span<double> output);                         \
  void conv2d_backward_input(const ConvGeometry& g, std::span<const double> grad_output,                 \
                             std::span<const double> weight, std::span<double> grad_input);            \
  void conv2d_backward_weight(const ConvGeometry& g, std::span<const double> input,                     \
                              std::span<const double> grad_output, std::span<double> grad_weight,       \
                              std::span<double> grad_bias);                                             \
  void linear_forward(const LinearGeometry& g, std::span<const double> input, std::span<const double> weight, \
                      std::span<const double> bias, std::span<double> output);                         \
  void linear_backward_input(const LinearGeometry& g, std::span<const double> grad_output,              \
                             std::span<const double> weight, std::span<double> grad_input);             \
  void linear_backward_weight(const LinearGeometry& g, std::span<const double> input,                   \
                              std::span<const double> grad_output, std::span<double> grad_weight,       \
                              std::span<double> grad_bias);                                             \
  void resize_bilinear_forward(const ResizeGeometry& g, std::span<const double> input, std::span<double> output); \
  void resize_bilinear_backward(const ResizeGeometry& g, std::span<const double> grad_output,           \
                                std::span<double> grad_input);

namespace reference {
CFIRN_KERNEL_DECLS
}  // namespace reference

namespace parallel {
CFIRN_KERNEL_DECLS
}  // namespace parallel

CFIRN_KERNEL_DECLS

#undef CFIRN_KERNEL_DECLS

/// Source coordinate table for one axis of a bilinear resize.
struct BilinearTap {
  int i0;
  int i1;
  double w0;
  double w1;
};
BilinearTap bilinear_tap(int out_index, int in_size, int out_size);

}  // namespace cfirn::kernels
