// OpenMP kernels. Work is split over independent output planes; within a
// plane every element is accumulated in the same term order as the
// reference kernels, so both backends agree bit for bit.

#include <algorithm>
#include <vector>

#include "cfirn/kernels.hpp"

namespace cfirn::kernels::parallel {

namespace {

/// Output indices o in [lo, hi) for which o*stride - pad + k lands inside [0, in).
struct Range {
  int lo;
  int hi;
};

Range valid_outputs(int k, int pad, int stride, int in, int out) {
  const int num = pad - k;
  int lo = num <= 0 ? 0 : (num + stride - 1) / stride;
  const int top = in - 1 + pad - k;
  int hi = top < 0 ? 0 : top / stride + 1;
  lo = std::min(lo, out);
  hi = std::clamp(hi, lo, out);
  return {lo, hi};
}

}  // namespace

void conv2d_forward(const ConvGeometry& g, std::span<const double> input, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> output) {
  const int oh_n = g.out_h();
  const int ow_n = g.out_w();
  const int cin_g = g.in_per_group();
  const int cout_g = g.out_per_group();
  const std::size_t in_plane = static_cast<std::size_t>(g.in_h) * g.in_w;
  const std::size_t out_plane = static_cast<std::size_t>(oh_n) * ow_n;
  const int s = g.stride;

#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < g.batch; ++n) {
    for (int co = 0; co < g.out_channels; ++co) {
      double* out = output.data() + (static_cast<std::size_t>(n) * g.out_channels + co) * out_plane;
      std::fill(out, out + out_plane, bias.empty() ? 0.0 : bias[co]);
      const int group = co / cout_g;
      for (int cl = 0; cl < cin_g; ++cl) {
        const int ci = group * cin_g + cl;
        const double* in = input.data() + (static_cast<std::size_t>(n) * g.in_channels + ci) * in_plane;
        const double* wk = weight.data() + (static_cast<std::size_t>(co) * cin_g + cl) * g.kernel_h * g.kernel_w;
        for (int kh = 0; kh < g.kernel_h; ++kh) {
          const Range rh = valid_outputs(kh, g.pad, s, g.in_h, oh_n);
          for (int kw = 0; kw < g.kernel_w; ++kw) {
            const Range rw = valid_outputs(kw, g.pad, s, g.in_w, ow_n);
            const double w = wk[kh * g.kernel_w + kw];
            for (int oh = rh.lo; oh < rh.hi; ++oh) {
              const double* irow = in + static_cast<std::size_t>(oh * s - g.pad + kh) * g.in_w - g.pad + kw;
              double* orow = out + static_cast<std::size_t>(oh) * ow_n;
              if (s == 1) {
                for (int ow = rw.lo; ow < rw.hi; ++ow) orow[ow] += w * irow[ow];
              } else {
                for (int ow = rw.lo; ow < rw.hi; ++ow) orow[ow] += w * irow[ow * s];
              }
            }
          }
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
  const std::size_t in_plane = static_cast<std::size_t>(g.in_h) * g.in_w;
  const std::size_t out_plane = static_cast<std::size_t>(oh_n) * ow_n;
  const int s = g.stride;

#pragma omp parallel
  {
    std::vector<double> buf(in_plane);
#pragma omp for collapse(2) schedule(static)
    for (int n = 0; n < g.batch; ++n) {
      for (int ci = 0; ci < g.in_channels; ++ci) {
        std::fill(buf.begin(), buf.end(), 0.0);
        const int group = ci / cin_g;
        const int cl = ci % cin_g;
        for (int co = group * cout_g; co < (group + 1) * cout_g; ++co) {
          const double* gout = grad_output.data() + (static_cast<std::size_t>(n) * g.out_channels + co) * out_plane;
          const double* wk = weight.data() + (static_cast<std::size_t>(co) * cin_g + cl) * g.kernel_h * g.kernel_w;
          for (int kh = 0; kh < g.kernel_h; ++kh) {
            const Range rh = valid_outputs(kh, g.pad, s, g.in_h, oh_n);
            for (int kw = 0; kw < g.kernel_w; ++kw) {
              const Range rw = valid_outputs(kw, g.pad, s, g.in_w, ow_n);
              const double w = wk[kh * g.kernel_w + kw];
              for (int oh = rh.lo; oh < rh.hi; ++oh) {
                double* irow = buf.data() + static_cast<std::size_t>(oh * s - g.pad + kh) * g.in_w - g.pad + kw;
                const double* orow = gout + static_cast<std::size_t>(oh) * ow_n;
                if (s == 1) {
                  for (int ow = rw.lo; ow < rw.hi; ++ow) irow[ow] += w * orow[ow];
                } else {
                  for (int ow = rw.lo; ow < rw.hi; ++ow) irow[ow * s] += w * orow[ow];
                }
              }
            }
          }
        }
        double* gin = grad_input.data() + (static_cast<std::size_t>(n) * g.in_channels + ci) * in_plane;
        for (std::size_t i = 0; i < in_plane; ++i) gin[i] += buf[i];
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
  const std::size_t in_plane = static_cast<std::size_t>(g.in_h) * g.in_w;
  const std::size_t out_plane = static_cast<std::size_t>(oh_n) * ow_n;
  const int s = g.stride;

#pragma omp parallel for schedule(static)
  for (int co = 0; co < g.out_channels; ++co) {
    const int group = co / cout_g;
    for (int cl = 0; cl < cin_g; ++cl) {
      const int ci = group * cin_g + cl;
      double* gw = grad_weight.data() + (static_cast<std::size_t>(co) * cin_g + cl) * g.kernel_h * g.kernel_w;
      for (int kh = 0; kh < g.kernel_h; ++kh) {
        const Range rh = valid_outputs(kh, g.pad, s, g.in_h, oh_n);
        for (int kw = 0; kw < g.kernel_w; ++kw) {
          const Range rw = valid_outputs(kw, g.pad, s, g.in_w, ow_n);
          double sum = 0.0;
          for (int n = 0; n < g.batch; ++n) {
            const double* in = input.data() + (static_cast<std::size_t>(n) * g.in_channels + ci) * in_plane;
            const double* gout = grad_output.data() + (static_cast<std::size_t>(n) * g.out_channels + co) * out_plane;
            for (int oh = rh.lo; oh < rh.hi; ++oh) {
              const double* irow = in + static_cast<std::size_t>(oh * s - g.pad + kh) * g.in_w - g.pad + kw;
              const double* orow = gout + static_cast<std::size_t>(oh) * ow_n;
              for (int ow = rw.lo; ow < rw.hi; ++ow) sum += orow[ow] * irow[ow * s];
            }
          }
          gw[kh * g.kernel_w + kw] += sum;
        }
      }
    }
    if (!grad_bias.empty()) {
      double sum = 0.0;
      for (int n = 0; n < g.batch; ++n) {
        const double* gout = grad_output.data() + (static_cast<std::size_t>(n) * g.out_channels + co) * out_plane;
        for (std::size_t i = 0; i < out_plane; ++i) sum += gout[i];
      }
      grad_bias[co] += sum;
    }
  }
}

void linear_forward(const LinearGeometry& g, std::span<const double> input, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> output) {
#pragma omp parallel for collapse(2) schedule(static)
  for (int r = 0; r < g.rows; ++r) {
    for (int o = 0; o < g.out_features; ++o) {
      const double* x = input.data() + static_cast<std::size_t>(r) * g.in_features;
      const double* w = weight.data() + static_cast<std::size_t>(o) * g.in_features;
      double sum = bias.empty() ? 0.0 : bias[o];
      for (int i = 0; i < g.in_features; ++i) sum += x[i] * w[i];
      output[static_cast<std::size_t>(r) * g.out_features + o] = sum;
    }
  }
}

void linear_backward_input(const LinearGeometry& g, std::span<const double> grad_output,
                           std::span<const double> weight, std::span<double> grad_input) {
#pragma omp parallel
  {
    std::vector<double> buf(static_cast<std::size_t>(g.in_features));
#pragma omp for schedule(static)
    for (int r = 0; r < g.rows; ++r) {
      std::fill(buf.begin(), buf.end(), 0.0);
      for (int o = 0; o < g.out_features; ++o) {
        const double go = grad_output[static_cast<std::size_t>(r) * g.out_features + o];
        const double* w = weight.data() + static_cast<std::size_t>(o) * g.in_features;
        for (int i = 0; i < g.in_features; ++i) buf[i] += go * w[i];
      }
      double* gx = grad_input.data() + static_cast<std::size_t>(r) * g.in_features;
      for (int i = 0; i < g.in_features; ++i) gx[i] += buf[i];
    }
  }
}

void linear_backward_weight(const LinearGeometry& g, std::span<const double> input,
                            std::span<const double> grad_output, std::span<double> grad_weight,
                            std::span<double> grad_bias) {
#pragma omp parallel
  {
    std::vector<double> buf(static_cast<std::size_t>(g.in_features));
#pragma omp for schedule(static)
    for (int o = 0; o < g.out_features; ++o) {
      std::fill(buf.begin(), buf.end(), 0.0);
      double bsum = 0.0;
      for (int r = 0; r < g.rows; ++r) {
        const double go = grad_output[static_cast<std::size_t>(r) * g.out_features + o];
        const double* x = input.data() + static_cast<std::size_t>(r) * g.in_features;
        for (int i = 0; i < g.in_features; ++i) buf[i] += go * x[i];
        bsum += go;
      }
      double* gw = grad_weight.data() + static_cast<std::size_t>(o) * g.in_features;
      for (int i = 0; i < g.in_features; ++i) gw[i] += buf[i];
      if (!grad_bias.empty()) grad_bias[o] += bsum;
    }
  }
}

void resize_bilinear_forward(const ResizeGeometry& g, std::span<const double> input, std::span<double> output) {
  std::vector<BilinearTap> ty(static_cast<std::size_t>(g.out_h));
  std::vector<BilinearTap> tx(static_cast<std::size_t>(g.out_w));
  for (int y = 0; y < g.out_h; ++y) ty[y] = bilinear_tap(y, g.in_h, g.out_h);
  for (int x = 0; x < g.out_w; ++x) tx[x] = bilinear_tap(x, g.in_w, g.out_w);

#pragma omp parallel for schedule(static)
  for (int p = 0; p < g.planes; ++p) {
    const double* in = input.data() + static_cast<std::size_t>(p) * g.in_h * g.in_w;
    double* out = output.data() + static_cast<std::size_t>(p) * g.out_h * g.out_w;
    for (int oy = 0; oy < g.out_h; ++oy) {
      const double* r0 = in + static_cast<std::size_t>(ty[oy].i0) * g.in_w;
      const double* r1 = in + static_cast<std::size_t>(ty[oy].i1) * g.in_w;
      for (int ox = 0; ox < g.out_w; ++ox) {
        const BilinearTap& t = tx[ox];
        out[static_cast<std::size_t>(oy) * g.out_w + ox] =
            ty[oy].w0 * (t.w0 * r0[t.i0] + t.w1 * r0[t.i1]) + ty[oy].w1 * (t.w0 * r1[t.i0] + t.w1 * r1[t.i1]);
      }
    }
  }
}

void resize_bilinear_backward(const ResizeGeometry& g, std::span<const double> grad_output,
                              std::span<double> grad_input) {
  std::vector<BilinearTap> ty(static_cast<std::size_t>(g.out_h));
  std::vector<BilinearTap> tx(static_cast<std::size_t>(g.out_w));
  for (int y = 0; y < g.out_h; ++y) ty[y] = bilinear_tap(y, g.in_h, g.out_h);
  for (int x = 0; x < g.out_w; ++x) tx[x] = bilinear_tap(x, g.in_w, g.out_w);

#pragma omp parallel for schedule(static)
  for (int p = 0; p < g.planes; ++p) {
    const double* gout = grad_output.data() + static_cast<std::size_t>(p) * g.out_h * g.out_w;
    double* gin = grad_input.data() + static_cast<std::size_t>(p) * g.in_h * g.in_w;
    for (int oy = 0; oy < g.out_h; ++oy) {
      double* r0 = gin + static_cast<std::size_t>(ty[oy].i0) * g.in_w;
      double* r1 = gin + static_cast<std::size_t>(ty[oy].i1) * g.in_w;
      for (int ox = 0; ox < g.out_w; ++ox) {
        const BilinearTap& t = tx[ox];
        const double go = gout[static_cast<std::size_t>(oy) * g.out_w + ox];
        r0[t.i0] += ty[oy].w0 * t.w0 * go;
        r0[t.i1] += ty[oy].w0 * t.w1 * go;
        r1[t.i0] += ty[oy].w1 * t.w0 * go;
        r1[t.i1] += ty[oy].w1 * t.w1 * go;
      }
    }
  }
}

}  // namespace cfirn::kernels::parallel
