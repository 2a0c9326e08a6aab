// Naive serial kernels. Every output element is computed straight from its
// defining sum; no loop reordering, no threading.

#include "cfirn/kernels.hpp"

namespace cfirn::kernels::reference {

namespace {

std::size_t idx4(int a, int b, int c, int d, int B, int C, int D) {
  return ((static_cast<std::size_t>(a) * B + b) * C + c) * D + d;
}

}  // namespace

void conv2d_forward(const ConvGeometry& g, std::span<const double> input, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> output) {
  const int oh_n = g.out_h();
  const int ow_n = g.out_w();
  const int cin_g = g.in_per_group();
  const int cout_g = g.out_per_group();
  for (int n = 0; n < g.batch; ++n) {
    for (int co = 0; co < g.out_channels; ++co) {
      const int group = co / cout_g;
      for (int oh = 0; oh < oh_n; ++oh) {
        for (int ow = 0; ow < ow_n; ++ow) {
          double sum = bias.empty() ? 0.0 : bias[co];
          for (int cl = 0; cl < cin_g; ++cl) {
            const int ci = group * cin_g + cl;
            for (int kh = 0; kh < g.kernel_h; ++kh) {
              for (int kw = 0; kw < g.kernel_w; ++kw) {
                const int ih = oh * g.stride - g.pad + kh;
                const int iw = ow * g.stride - g.pad + kw;
                if (ih < 0 || ih >= g.in_h || iw < 0 || iw >= g.in_w) continue;
                sum += weight[idx4(co, cl, kh, kw, cin_g, g.kernel_h, g.kernel_w)] *
                       input[idx4(n, ci, ih, iw, g.in_channels, g.in_h, g.in_w)];
              }
            }
          }
          output[idx4(n, co, oh, ow, g.out_channels, oh_n, ow_n)] = sum;
        }
      }
    }
  }
}

void conv2d_backward_input(const ConvGeometry& g, std::span<const double> grad_output,
                           std::span<const double> weight, std::span<double> grad_input) {
  const int oh_n = g.out_h();
  const int ow_n = g.out_w();
  const int cin_g = g.in_per_group();
  const int cout_g = g.out_per_group();
  for (int n = 0; n < g.batch; ++n) {
    for (int ci = 0; ci < g.in_channels; ++ci) {
      const int group = ci / cin_g;
      const int cl = ci % cin_g;
      for (int ih = 0; ih < g.in_h; ++ih) {
        for (int iw = 0; iw < g.in_w; ++iw) {
          double sum = 0.0;
          for (int co = group * cout_g; co < (group + 1) * cout_g; ++co) {
            for (int kh = 0; kh < g.kernel_h; ++kh) {
              for (int kw = 0; kw < g.kernel_w; ++kw) {
                const int th = ih + g.pad - kh;
                const int tw = iw + g.pad - kw;
                if (th < 0 || tw < 0 || th % g.stride || tw % g.stride) continue;
                const int oh = th / g.stride;
                const int ow = tw / g.stride;
                if (oh >= oh_n || ow >= ow_n) continue;
                sum += weight[idx4(co, cl, kh, kw, cin_g, g.kernel_h, g.kernel_w)] *
                       grad_output[idx4(n, co, oh, ow, g.out_channels, oh_n, ow_n)];
              }
            }
          }
          grad_input[idx4(n, ci, ih, iw, g.in_channels, g.in_h, g.in_w)] += sum;
        }
      }
    }
  }
}

void conv2d_backward_weight(const ConvGeometry& g, std::span<const double> input,
                            std::span<const double> grad_output, std::span<double> grad_weight,
                            std::span<double> grad_bias) {
  const int oh_n = g.out_h();
  const int ow_n = g.out_w();
  const int cin_g = g.in_per_group();
  const int cout_g = g.out_per_group();
  for (int co = 0; co < g.out_channels; ++co) {
    const int group = co / cout_g;
    for (int cl = 0; cl < cin_g; ++cl) {
      const int ci = group * cin_g + cl;
      for (int kh = 0; kh < g.kernel_h; ++kh) {
        for (int kw = 0; kw < g.kernel_w; ++kw) {
          double sum = 0.0;
          for (int n = 0; n < g.batch; ++n) {
            for (int oh = 0; oh < oh_n; ++oh) {
              for (int ow = 0; ow < ow_n; ++ow) {
                const int ih = oh * g.stride - g.pad + kh;
                const int iw = ow * g.stride - g.pad + kw;
                if (ih < 0 || ih >= g.in_h || iw < 0 || iw >= g.in_w) continue;
                sum += grad_output[idx4(n, co, oh, ow, g.out_channels, oh_n, ow_n)] *
                       input[idx4(n, ci, ih, iw, g.in_channels, g.in_h, g.in_w)];
              }
            }
          }
          grad_weight[idx4(co, cl, kh, kw, cin_g, g.kernel_h, g.kernel_w)] += sum;
        }
      }
    }
    if (!grad_bias.empty()) {
      double sum = 0.0;
      for (int n = 0; n < g.batch; ++n) {
        for (int oh = 0; oh < oh_n; ++oh) {
          for (int ow = 0; ow < ow_n; ++ow) sum += grad_output[idx4(n, co, oh, ow, g.out_channels, oh_n, ow_n)];
        }
      }
      grad_bias[co] += sum;
    }
  }
}

void linear_forward(const LinearGeometry& g, std::span<const double> input, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> output) {
  for (int r = 0; r < g.rows; ++r) {
    for (int o = 0; o < g.out_features; ++o) {
      double sum = bias.empty() ? 0.0 : bias[o];
      for (int i = 0; i < g.in_features; ++i) {
        sum += input[static_cast<std::size_t>(r) * g.in_features + i] *
               weight[static_cast<std::size_t>(o) * g.in_features + i];
      }
      output[static_cast<std::size_t>(r) * g.out_features + o] = sum;
    }
  }
}

void linear_backward_input(const LinearGeometry& g, std::span<const double> grad_output,
                           std::span<const double> weight, std::span<double> grad_input) {
  for (int r = 0; r < g.rows; ++r) {
    for (int i = 0; i < g.in_features; ++i) {
      double sum = 0.0;
      for (int o = 0; o < g.out_features; ++o) {
        sum += grad_output[static_cast<std::size_t>(r) * g.out_features + o] *
               weight[static_cast<std::size_t>(o) * g.in_features + i];
      }
      grad_input[static_cast<std::size_t>(r) * g.in_features + i] += sum;
    }
  }
}

void linear_backward_weight(const LinearGeometry& g, std::span<const double> input,
                            std::span<const double> grad_output, std::span<double> grad_weight,
                            std::span<double> grad_bias) {
  for (int o = 0; o < g.out_features; ++o) {
    for (int i = 0; i < g.in_features; ++i) {
      double sum = 0.0;
      for (int r = 0; r < g.rows; ++r) {
        sum += grad_output[static_cast<std::size_t>(r) * g.out_features + o] *
               input[static_cast<std::size_t>(r) * g.in_features + i];
      }
      grad_weight[static_cast<std::size_t>(o) * g.in_features + i] += sum;
    }
    if (!grad_bias.empty()) {
      double sum = 0.0;
      for (int r = 0; r < g.rows; ++r) sum += grad_output[static_cast<std::size_t>(r) * g.out_features + o];
      grad_bias[o] += sum;
    }
  }
}

void resize_bilinear_forward(const ResizeGeometry& g, std::span<const double> input, std::span<double> output) {
  for (int p = 0; p < g.planes; ++p) {
    for (int oy = 0; oy < g.out_h; ++oy) {
      const BilinearTap ty = bilinear_tap(oy, g.in_h, g.out_h);
      for (int ox = 0; ox < g.out_w; ++ox) {
        const BilinearTap tx = bilinear_tap(ox, g.in_w, g.out_w);
        auto px = [&](int y, int x) {
          return input[(static_cast<std::size_t>(p) * g.in_h + y) * g.in_w + x];
        };
        output[(static_cast<std::size_t>(p) * g.out_h + oy) * g.out_w + ox] =
            ty.w0 * (tx.w0 * px(ty.i0, tx.i0) + tx.w1 * px(ty.i0, tx.i1)) +
            ty.w1 * (tx.w0 * px(ty.i1, tx.i0) + tx.w1 * px(ty.i1, tx.i1));
      }
    }
  }
}

void resize_bilinear_backward(const ResizeGeometry& g, std::span<const double> grad_output,
                              std::span<double> grad_input) {
  for (int p = 0; p < g.planes; ++p) {
    for (int oy = 0; oy < g.out_h; ++oy) {
      const BilinearTap ty = bilinear_tap(oy, g.in_h, g.out_h);
      for (int ox = 0; ox < g.out_w; ++ox) {
        const BilinearTap tx = bilinear_tap(ox, g.in_w, g.out_w);
        const double go = grad_output[(static_cast<std::size_t>(p) * g.out_h + oy) * g.out_w + ox];
        auto acc = [&](int y, int x, double w) {
          grad_input[(static_cast<std::size_t>(p) * g.in_h + y) * g.in_w + x] += w * go;
        };
        acc(ty.i0, tx.i0, ty.w0 * tx.w0);
        acc(ty.i0, tx.i1, ty.w0 * tx.w1);
        acc(ty.i1, tx.i0, ty.w1 * tx.w0);
        acc(ty.i1, tx.i1, ty.w1 * tx.w1);
      }
    }
  }
}

}  // namespace cfirn::kernels::reference
