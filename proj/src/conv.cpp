#include <algorithm>
#include <vector>

#include "aelab/tensor.hpp"
#include "gemm.hpp"
#include "op_support.hpp"

namespace aelab {
namespace {

struct ConvGeometry {
  std::size_t batch = 1;
  std::size_t channels = 0;  // channels of the "image" side
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t kernel_h = 0;
  std::size_t kernel_w = 0;
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t out_h = 0;  // positions of the "column" side
  std::size_t out_w = 0;

  std::size_t positions() const { return out_h * out_w; }
  std::size_t patch() const { return channels * kernel_h * kernel_w; }
  std::size_t image_size() const { return channels * height * width; }
};

// col[(c*kh + i)*kw + j][n*P + oy*out_w + ox] = image[n, c, oy*s - p + i, ox*s - p + j]
template <typename T>
void im2col(const ConvGeometry& g, const T* image, T* col) {
  const std::size_t np = g.batch * g.positions();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kernel_h; ++i) {
      for (std::size_t j = 0; j < g.kernel_w; ++j) {
        T* row = col + ((c * g.kernel_h + i) * g.kernel_w + j) * np;
        for (std::size_t n = 0; n < g.batch; ++n) {
          const T* plane = image + (n * g.channels + c) * g.height * g.width;
          T* dst = row + n * g.positions();
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const auto y = static_cast<std::ptrdiff_t>(oy * g.stride + i) -
                           static_cast<std::ptrdiff_t>(g.pad);
            if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.height)) {
              std::fill_n(dst + oy * g.out_w, g.out_w, T{0});
              continue;
            }
            const T* src = plane + static_cast<std::size_t>(y) * g.width;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const auto x = static_cast<std::ptrdiff_t>(ox * g.stride + j) -
                             static_cast<std::ptrdiff_t>(g.pad);
              dst[oy * g.out_w + ox] =
                  (x < 0 || x >= static_cast<std::ptrdiff_t>(g.width)) ? T{0}
                                                                       : src[static_cast<std::size_t>(x)];
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters columns back, accumulating into image.
template <typename T>
void col2im(const ConvGeometry& g, const T* col, T* image) {
  const std::size_t np = g.batch * g.positions();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kernel_h; ++i) {
      for (std::size_t j = 0; j < g.kernel_w; ++j) {
        const T* row = col + ((c * g.kernel_h + i) * g.kernel_w + j) * np;
        for (std::size_t n = 0; n < g.batch; ++n) {
          T* plane = image + (n * g.channels + c) * g.height * g.width;
          const T* src = row + n * g.positions();
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const auto y = static_cast<std::ptrdiff_t>(oy * g.stride + i) -
                           static_cast<std::ptrdiff_t>(g.pad);
            if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.height)) continue;
            T* dst = plane + static_cast<std::size_t>(y) * g.width;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const auto x = static_cast<std::ptrdiff_t>(ox * g.stride + j) -
                             static_cast<std::ptrdiff_t>(g.pad);
              if (x < 0 || x >= static_cast<std::ptrdiff_t>(g.width)) continue;
              dst[static_cast<std::size_t>(x)] += src[oy * g.out_w + ox];
            }
          }
        }
      }
    }
  }
}

// (N, C, P) <-> (C, N*P)
template <typename T>
void nchw_to_cnp(const T* src, std::size_t n, std::size_t c, std::size_t p, T* dst) {
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      std::copy_n(src + (b * c + ch) * p, p, dst + ch * n * p + b * p);
    }
  }
}

template <typename T>
void cnp_to_nchw(const T* src, std::size_t n, std::size_t c, std::size_t p, T* dst) {
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      std::copy_n(src + ch * n * p + b * p, p, dst + (b * c + ch) * p);
    }
  }
}

template <typename T>
void check_batched_image(const char* op, const BasicTensor<T>& x) {
  if (x.rank() != 3 && x.rank() != 4) {
    throw ShapeError(std::string(op) + ": expected C×H×W or N×C×H×W input, got " +
                     shape_str(x.shape()));
  }
}

struct ImageDims {
  std::size_t n, c, h, w;
  bool batched;
};

template <typename T>
ImageDims image_dims(const BasicTensor<T>& x) {
  if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2), x.dim(3), true};
  return {1, x.dim(0), x.dim(1), x.dim(2), false};
}

template <typename T>
void check_bias(const char* op, const BasicTensor<T>& bias, std::size_t channels,
                const BasicTensor<T>& weight) {
  if (bias.defined() && bias.shape() != Shape{channels}) {
    throw ShapeError(std::string(op) + ": bias " + shape_str(bias.shape()) +
                     " does not match weight " + shape_str(weight.shape()));
  }
}

std::ptrdiff_t conv_out_dim(std::size_t in, std::size_t k, int stride, int pad) {
  const auto padded = static_cast<std::ptrdiff_t>(in) + 2 * pad;
  if (padded < static_cast<std::ptrdiff_t>(k)) return 0;
  return (padded - static_cast<std::ptrdiff_t>(k)) / stride + 1;
}

}  // namespace

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, int stride, int pad) {
  check_batched_image("conv2d", x);
  const auto d = image_dims(x);
  if (weight.rank() != 4 || weight.dim(1) != d.c) {
    throw ShapeError("conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                     shape_str(x.shape()));
  }
  if (stride < 1 || pad < 0) {
    throw ShapeError("conv2d: stride must be >= 1 and pad >= 0 (stride " + std::to_string(stride) +
                     ", pad " + std::to_string(pad) + ")");
  }
  const std::size_t c_out = weight.dim(0);
  check_bias("conv2d", bias, c_out, weight);
  const auto oh = conv_out_dim(d.h, weight.dim(2), stride, pad);
  const auto ow = conv_out_dim(d.w, weight.dim(3), stride, pad);
  if (oh <= 0 || ow <= 0) {
    throw ShapeError("conv2d: non-positive output size for input " + shape_str(x.shape()) +
                     " and weight " + shape_str(weight.shape()));
  }

  ConvGeometry g;
  g.batch = d.n;
  g.channels = d.c;
  g.height = d.h;
  g.width = d.w;
  g.kernel_h = weight.dim(2);
  g.kernel_w = weight.dim(3);
  g.stride = static_cast<std::size_t>(stride);
  g.pad = static_cast<std::size_t>(pad);
  g.out_h = static_cast<std::size_t>(oh);
  g.out_w = static_cast<std::size_t>(ow);

  const std::size_t np = g.batch * g.positions();
  std::vector<T> col(g.patch() * np);
  im2col(g, x.data().data(), col.data());
  std::vector<T> out_mat(c_out * np);
  detail::gemm(false, false, c_out, np, g.patch(), weight.data().data(), col.data(),
               out_mat.data(), false);

  Shape out_shape = d.batched ? Shape{d.n, c_out, g.out_h, g.out_w} : Shape{c_out, g.out_h, g.out_w};
  BasicTensor<T> out(out_shape);
  auto od = out.mutable_data();
  cnp_to_nchw(out_mat.data(), g.batch, c_out, g.positions(), od.data());
  if (bias.defined()) {
    const auto bd = bias.data();
    for (std::size_t n = 0; n < g.batch; ++n) {
      for (std::size_t co = 0; co < c_out; ++co) {
        T* plane = od.data() + (n * c_out + co) * g.positions();
        for (std::size_t p = 0; p < g.positions(); ++p) plane[p] += bd[co];
      }
    }
  }

  detail::record(out, {&x, &weight, &bias},
                 [o = out.node().get(), xn = x.node().get(), wn = weight.node().get(),
                  bn = bias.defined() ? bias.node().get() : nullptr, g, c_out] {
                   const std::size_t np = g.batch * g.positions();
                   std::vector<T> grad_mat(c_out * np);
                   nchw_to_cnp(o->grad.data(), g.batch, c_out, g.positions(), grad_mat.data());
                   if (wn->requires_grad) {
                     wn->ensure_grad();
                     std::vector<T> col(g.patch() * np);
                     im2col(g, xn->data.data(), col.data());
                     detail::gemm(false, true, c_out, g.patch(), np, grad_mat.data(), col.data(),
                                  wn->grad.data(), true);
                   }
                   if (detail::wants_grad(bn)) {
                     bn->ensure_grad();
                     for (std::size_t co = 0; co < c_out; ++co) {
                       T acc{0};
                       const T* row = grad_mat.data() + co * np;
                       for (std::size_t p = 0; p < np; ++p) acc += row[p];
                       bn->grad[co] += acc;
                     }
                   }
                   if (xn->requires_grad) {
                     xn->ensure_grad();
                     std::vector<T> dcol(g.patch() * np);
                     detail::gemm(true, false, g.patch(), np, c_out, wn->data.data(),
                                  grad_mat.data(), dcol.data(), false);
                     col2im(g, dcol.data(), xn->grad.data());
                   }
                 });
  return out;
}

template <typename T>
BasicTensor<T> conv_transpose2d(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                                const BasicTensor<T>& bias, int stride, int pad) {
  check_batched_image("conv_transpose2d", x);
  const auto d = image_dims(x);
  if (weight.rank() != 4 || weight.dim(0) != d.c) {
    throw ShapeError("conv_transpose2d: weight " + shape_str(weight.shape()) +
                     " incompatible with input " + shape_str(x.shape()));
  }
  if (stride < 1 || pad < 0) {
    throw ShapeError("conv_transpose2d: stride must be >= 1 and pad >= 0 (stride " +
                     std::to_string(stride) + ", pad " + std::to_string(pad) + ")");
  }
  const std::size_t c_out = weight.dim(1);
  check_bias("conv_transpose2d", bias, c_out, weight);
  const auto kh = static_cast<std::ptrdiff_t>(weight.dim(2));
  const auto kw = static_cast<std::ptrdiff_t>(weight.dim(3));
  const auto oh = (static_cast<std::ptrdiff_t>(d.h) - 1) * stride - 2 * pad + kh;
  const auto ow = (static_cast<std::ptrdiff_t>(d.w) - 1) * stride - 2 * pad + kw;
  if (oh <= 0 || ow <= 0) {
    throw ShapeError("conv_transpose2d: non-positive output size for input " +
                     shape_str(x.shape()) + " and weight " + shape_str(weight.shape()));
  }

  // Geometry of the adjoint conv2d: the output image is the "image" side and
  // the input positions are the "column" side.
  ConvGeometry g;
  g.batch = d.n;
  g.channels = c_out;
  g.height = static_cast<std::size_t>(oh);
  g.width = static_cast<std::size_t>(ow);
  g.kernel_h = weight.dim(2);
  g.kernel_w = weight.dim(3);
  g.stride = static_cast<std::size_t>(stride);
  g.pad = static_cast<std::size_t>(pad);
  g.out_h = d.h;
  g.out_w = d.w;

  const std::size_t c_in = d.c;
  const std::size_t np = g.batch * g.positions();
  std::vector<T> x_mat(c_in * np);
  nchw_to_cnp(x.data().data(), g.batch, c_in, g.positions(), x_mat.data());
  std::vector<T> col(g.patch() * np);
  detail::gemm(true, false, g.patch(), np, c_in, weight.data().data(), x_mat.data(), col.data(),
               false);

  Shape out_shape =
      d.batched ? Shape{d.n, c_out, g.height, g.width} : Shape{c_out, g.height, g.width};
  BasicTensor<T> out(out_shape);
  auto od = out.mutable_data();
  col2im(g, col.data(), od.data());
  if (bias.defined()) {
    const auto bd = bias.data();
    const std::size_t plane = g.height * g.width;
    for (std::size_t n = 0; n < g.batch; ++n) {
      for (std::size_t co = 0; co < c_out; ++co) {
        T* p = od.data() + (n * c_out + co) * plane;
        for (std::size_t i = 0; i < plane; ++i) p[i] += bd[co];
      }
    }
  }

  detail::record(
      out, {&x, &weight, &bias},
      [o = out.node().get(), xn = x.node().get(), wn = weight.node().get(),
       bn = bias.defined() ? bias.node().get() : nullptr, g, c_in] {
        const std::size_t np = g.batch * g.positions();
        std::vector<T> dcol(g.patch() * np);
        im2col(g, o->grad.data(), dcol.data());
        if (xn->requires_grad) {
          xn->ensure_grad();
          std::vector<T> dx_mat(c_in * np);
          detail::gemm(false, false, c_in, np, g.patch(), wn->data.data(), dcol.data(),
                       dx_mat.data(), false);
          std::vector<T> dx(xn->data.size());
          cnp_to_nchw(dx_mat.data(), g.batch, c_in, g.positions(), dx.data());
          for (std::size_t i = 0; i < dx.size(); ++i) xn->grad[i] += dx[i];
        }
        if (wn->requires_grad) {
          wn->ensure_grad();
          std::vector<T> x_mat(c_in * np);
          nchw_to_cnp(xn->data.data(), g.batch, c_in, g.positions(), x_mat.data());
          detail::gemm(false, true, c_in, g.patch(), np, x_mat.data(), dcol.data(),
                       wn->grad.data(), true);
        }
        if (detail::wants_grad(bn)) {
          bn->ensure_grad();
          const std::size_t plane = g.height * g.width;
          for (std::size_t n = 0; n < g.batch; ++n) {
            for (std::size_t co = 0; co < g.channels; ++co) {
              const T* p = o->grad.data() + (n * g.channels + co) * plane;
              T acc{0};
              for (std::size_t i = 0; i < plane; ++i) acc += p[i];
              bn->grad[co] += acc;
            }
          }
        }
      });
  return out;
}

template BasicTensor<float> conv2d<float>(const BasicTensor<float>&, const BasicTensor<float>&,
                                          const BasicTensor<float>&, int, int);
template BasicTensor<double> conv2d<double>(const BasicTensor<double>&, const BasicTensor<double>&,
                                            const BasicTensor<double>&, int, int);
template BasicTensor<float> conv_transpose2d<float>(const BasicTensor<float>&,
                                                    const BasicTensor<float>&,
                                                    const BasicTensor<float>&, int, int);
template BasicTensor<double> conv_transpose2d<double>(const BasicTensor<double>&,
                                                      const BasicTensor<double>&,
                                                      const BasicTensor<double>&, int, int);

}  // namespace aelab
