#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace gradcorr {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major array of doubles. Activations are laid out as
/// (batch, channel, height, width); kernels as (out, in, kh, kw).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::int64_t dim(std::size_t i) const;
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& vec() const noexcept { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  double& at4(std::int64_t a, std::int64_t b, std::int64_t c, std::int64_t d);
  double at4(std::int64_t a, std::int64_t b, std::int64_t c, std::int64_t d) const;

  /// Single value of a one-element tensor.
  double item() const;

  Tensor reshaped(Shape shape) const;

  /// Rows [begin, end) along the leading axis.
  Tensor slice_rows(std::int64_t begin, std::int64_t end) const;

  bool all_finite() const noexcept;

  /// Throws NumericError naming `where` if any value is NaN or infinite.
  void check_finite(const char* where) const;

  double sum() const noexcept;
  double max_abs() const noexcept;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Stacks equally-shaped tensors along a new leading axis, or concatenates
/// along the existing leading axis when `concat` is true.
Tensor stack_rows(std::span<const Tensor> rows, bool concat = false);

}  // namespace gradcorr
