#pragma once

// Value-level kernels behind the autodiff ops. Internal to the library.

#include <cstdint>
#include <vector>

#include "gradcorr/tensor.hpp"

namespace gradcorr::kernels {

struct ConvGeometry {
  std::int64_t batch, in_c, in_h, in_w;
  std::int64_t out_c, kh, kw;
  std::int64_t out_h, out_w;
  int stride, padding;
};

/// Validates shapes and derives output extents. Throws DimensionError with
/// both shapes on mismatch.
ConvGeometry conv_geometry(const Shape& input, const Shape& kernel, int stride, int padding);

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding);
Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& kernel, const Shape& input_shape,
                         int stride, int padding);
Tensor conv2d_kernel_grad(const Tensor& input, const Tensor& grad_out, const Shape& kernel_shape,
                          int stride, int padding);

struct PoolResult {
  Tensor value;
  std::vector<std::int64_t> argmax;  // flat input offset per output element
};

std::int64_t pool_extent(std::int64_t in, int kernel, int stride);
PoolResult maxpool2d(const Tensor& x, int kernel, int stride);
Tensor avgpool2d(const Tensor& x, int kernel, int stride);
Tensor avgpool2d_transpose(const Tensor& g, const Shape& input_shape, int kernel, int stride);

Tensor matmul(const Tensor& a, const Tensor& b, bool ta, bool tb);

}  // namespace gradcorr::kernels
