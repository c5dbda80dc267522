#include "kernels.hpp"

#include <Eigen/Core>
#include <limits>

#include "gradcorr/error.hpp"

namespace gradcorr::kernels {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

// Unfolds one image (C x H x W) into a (C*kh*kw) x (out_h*out_w) matrix.
void im2col(const double* img, const ConvGeometry& g, double* col) {
  const std::int64_t cols = g.out_h * g.out_w;
  for (std::int64_t c = 0; c < g.in_c; ++c) {
    for (std::int64_t ki = 0; ki < g.kh; ++ki) {
      for (std::int64_t kj = 0; kj < g.kw; ++kj) {
        double* row = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
          const std::int64_t iy = oy * g.stride - g.padding + ki;
          double* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= g.in_h) {
            std::fill(dst, dst + g.out_w, 0.0);
            continue;
          }
          const double* src = img + (c * g.in_h + iy) * g.in_w;
          for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
            const std::int64_t ix = ox * g.stride - g.padding + kj;
            dst[ox] = (ix < 0 || ix >= g.in_w) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates columns back into an image.
void col2im(const double* col, const ConvGeometry& g, double* img) {
  const std::int64_t cols = g.out_h * g.out_w;
  for (std::int64_t c = 0; c < g.in_c; ++c) {
    for (std::int64_t ki = 0; ki < g.kh; ++ki) {
      for (std::int64_t kj = 0; kj < g.kw; ++kj) {
        const double* row = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
          const std::int64_t iy = oy * g.stride - g.padding + ki;
          if (iy < 0 || iy >= g.in_h) continue;
          double* dst = img + (c * g.in_h + iy) * g.in_w;
          const double* src = row + oy * g.out_w;
          for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
            const std::int64_t ix = ox * g.stride - g.padding + kj;
            if (ix >= 0 && ix < g.in_w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

bool is_1x1_identity(const ConvGeometry& g) {
  return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.padding == 0;
}

}  // namespace

ConvGeometry conv_geometry(const Shape& input, const Shape& kernel, int stride, int padding) {
  if (input.size() != 4 || kernel.size() != 4 || input[1] != kernel[1]) {
    throw DimensionError("conv2d: input " + shape_str(input) + " incompatible with kernel " +
                         shape_str(kernel));
  }
  if (stride < 1 || padding < 0) {
    throw DimensionError("conv2d: stride must be positive and padding nonnegative");
  }
  ConvGeometry g{input[0], input[1], input[2], input[3], kernel[0], kernel[2], kernel[3],
                 0,        0,        stride,   padding};
  if (g.in_h + 2 * padding < g.kh || g.in_w + 2 * padding < g.kw) {
    throw DimensionError("conv2d: input " + shape_str(input) + " smaller than kernel " +
                         shape_str(kernel) + " with padding " + std::to_string(padding));
  }
  g.out_h = (g.in_h + 2 * padding - g.kh) / stride + 1;
  g.out_w = (g.in_w + 2 * padding - g.kw) / stride + 1;
  return g;
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding) {
  const auto g = conv_geometry(input.shape(), kernel.shape(), stride, padding);
  const std::int64_t rows = g.in_c * g.kh * g.kw;
  const std::int64_t cols = g.out_h * g.out_w;
  Tensor out(Shape{g.batch, g.out_c, g.out_h, g.out_w});
  ConstMapMat w(kernel.data().data(), g.out_c, rows);
  std::vector<double> col(is_1x1_identity(g) ? 0 : static_cast<std::size_t>(rows * cols));
  for (std::int64_t b = 0; b < g.batch; ++b) {
    const double* img = input.data().data() + b * g.in_c * g.in_h * g.in_w;
    const double* colp = img;
    if (!is_1x1_identity(g)) {
      im2col(img, g, col.data());
      colp = col.data();
    }
    MapMat o(out.data().data() + b * g.out_c * cols, g.out_c, cols);
    o.noalias() = w * ConstMapMat(colp, rows, cols);
  }
  return out;
}

Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& kernel, const Shape& input_shape,
                         int stride, int padding) {
  const auto g = conv_geometry(input_shape, kernel.shape(), stride, padding);
  const Shape expect{g.batch, g.out_c, g.out_h, g.out_w};
  if (grad_out.shape() != expect) {
    throw DimensionError("conv2d_input_grad: gradient " + shape_str(grad_out.shape()) +
                         " does not match output " + shape_str(expect));
  }
  const std::int64_t rows = g.in_c * g.kh * g.kw;
  const std::int64_t cols = g.out_h * g.out_w;
  Tensor dx(input_shape);
  ConstMapMat w(kernel.data().data(), g.out_c, rows);
  std::vector<double> col(static_cast<std::size_t>(rows * cols));
  for (std::int64_t b = 0; b < g.batch; ++b) {
    ConstMapMat go(grad_out.data().data() + b * g.out_c * cols, g.out_c, cols);
    double* img = dx.data().data() + b * g.in_c * g.in_h * g.in_w;
    if (is_1x1_identity(g)) {
      MapMat(img, rows, cols).noalias() = w.transpose() * go;
      continue;
    }
    MapMat c(col.data(), rows, cols);
    c.noalias() = w.transpose() * go;
    col2im(col.data(), g, img);
  }
  return dx;
}

Tensor conv2d_kernel_grad(const Tensor& input, const Tensor& grad_out, const Shape& kernel_shape,
                          int stride, int padding) {
  const auto g = conv_geometry(input.shape(), kernel_shape, stride, padding);
  const Shape expect{g.batch, g.out_c, g.out_h, g.out_w};
  if (grad_out.shape() != expect) {
    throw DimensionError("conv2d_kernel_grad: gradient " + shape_str(grad_out.shape()) +
                         " does not match output " + shape_str(expect));
  }
  const std::int64_t rows = g.in_c * g.kh * g.kw;
  const std::int64_t cols = g.out_h * g.out_w;
  Tensor dw(kernel_shape);
  MapMat w(dw.data().data(), g.out_c, rows);
  std::vector<double> col(is_1x1_identity(g) ? 0 : static_cast<std::size_t>(rows * cols));
  for (std::int64_t b = 0; b < g.batch; ++b) {
    const double* img = input.data().data() + b * g.in_c * g.in_h * g.in_w;
    const double* colp = img;
    if (!is_1x1_identity(g)) {
      im2col(img, g, col.data());
      colp = col.data();
    }
    ConstMapMat go(grad_out.data().data() + b * g.out_c * cols, g.out_c, cols);
    w.noalias() += go * ConstMapMat(colp, rows, cols).transpose();
  }
  return dw;
}

std::int64_t pool_extent(std::int64_t in, int kernel, int stride) {
  if (kernel < 1 || stride < 1 || in < kernel) {
    throw DimensionError("pool window " + std::to_string(kernel) + " larger than extent " +
                         std::to_string(in));
  }
  return (in - kernel) / stride + 1;
}

PoolResult maxpool2d(const Tensor& x, int kernel, int stride) {
  if (x.rank() != 4) throw DimensionError("maxpool2d expects BxCxHxW, got " + shape_str(x.shape()));
  const auto& s = x.shape();
  const auto oh = pool_extent(s[2], kernel, stride);
  const auto ow = pool_extent(s[3], kernel, stride);
  PoolResult r{Tensor(Shape{s[0], s[1], oh, ow}), {}};
  r.argmax.resize(r.value.size());
  std::size_t o = 0;
  for (std::int64_t p = 0; p < s[0] * s[1]; ++p) {
    const std::int64_t base = p * s[2] * s[3];
    for (std::int64_t y = 0; y < oh; ++y) {
      for (std::int64_t xx = 0; xx < ow; ++xx, ++o) {
        double best = -std::numeric_limits<double>::infinity();
        std::int64_t arg = -1;
        for (int i = 0; i < kernel; ++i) {
          for (int j = 0; j < kernel; ++j) {
            const std::int64_t off = base + (y * stride + i) * s[3] + xx * stride + j;
            if (arg < 0 || x[static_cast<std::size_t>(off)] > best) {
              best = x[static_cast<std::size_t>(off)];
              arg = off;
            }
          }
        }
        r.value[o] = best;
        r.argmax[o] = arg;
      }
    }
  }
  return r;
}

Tensor avgpool2d(const Tensor& x, int kernel, int stride) {
  if (x.rank() != 4) throw DimensionError("avgpool2d expects BxCxHxW, got " + shape_str(x.shape()));
  const auto& s = x.shape();
  const auto oh = pool_extent(s[2], kernel, stride);
  const auto ow = pool_extent(s[3], kernel, stride);
  Tensor out(Shape{s[0], s[1], oh, ow});
  const double inv = 1.0 / (kernel * kernel);
  std::size_t o = 0;
  for (std::int64_t p = 0; p < s[0] * s[1]; ++p) {
    const std::int64_t base = p * s[2] * s[3];
    for (std::int64_t y = 0; y < oh; ++y) {
      for (std::int64_t xx = 0; xx < ow; ++xx, ++o) {
        double acc = 0.0;
        for (int i = 0; i < kernel; ++i) {
          for (int j = 0; j < kernel; ++j) {
            acc += x[static_cast<std::size_t>(base + (y * stride + i) * s[3] + xx * stride + j)];
          }
        }
        out[o] = acc * inv;
      }
    }
  }
  return out;
}

Tensor avgpool2d_transpose(const Tensor& g, const Shape& input_shape, int kernel, int stride) {
  const auto oh = pool_extent(input_shape[2], kernel, stride);
  const auto ow = pool_extent(input_shape[3], kernel, stride);
  if (g.shape() != Shape{input_shape[0], input_shape[1], oh, ow}) {
    throw DimensionError("avgpool2d gradient " + shape_str(g.shape()) + " does not match input " +
                         shape_str(input_shape));
  }
  Tensor dx(input_shape);
  const double inv = 1.0 / (kernel * kernel);
  std::size_t o = 0;
  for (std::int64_t p = 0; p < input_shape[0] * input_shape[1]; ++p) {
    const std::int64_t base = p * input_shape[2] * input_shape[3];
    for (std::int64_t y = 0; y < oh; ++y) {
      for (std::int64_t xx = 0; xx < ow; ++xx, ++o) {
        const double v = g[o] * inv;
        for (int i = 0; i < kernel; ++i) {
          for (int j = 0; j < kernel; ++j) {
            dx[static_cast<std::size_t>(base + (y * stride + i) * input_shape[3] + xx * stride +
                                        j)] += v;
          }
        }
      }
    }
  }
  return dx;
}

Tensor matmul(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw DimensionError("matmul expects rank-2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const auto m = ta ? a.dim(1) : a.dim(0);
  const auto k = ta ? a.dim(0) : a.dim(1);
  const auto kb = tb ? b.dim(1) : b.dim(0);
  const auto n = tb ? b.dim(0) : b.dim(1);
  if (k != kb) {
    throw DimensionError("matmul: inner extents differ for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  Tensor out(Shape{m, n});
  ConstMapMat am(a.data().data(), a.dim(0), a.dim(1));
  ConstMapMat bm(b.data().data(), b.dim(0), b.dim(1));
  MapMat om(out.data().data(), m, n);
  if (!ta && !tb) om.noalias() = am * bm;
  else if (ta && !tb) om.noalias() = am.transpose() * bm;
  else if (!ta && tb) om.noalias() = am * bm.transpose();
  else om.noalias() = am.transpose() * bm.transpose();
  return out;
}

}  // namespace gradcorr::kernels
