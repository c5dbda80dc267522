#include "gradcorr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "gradcorr/error.hpp"

namespace gradcorr {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw DimensionError("negative extent in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("shape " + shape_str(shape_) + " holds " +
                         std::to_string(shape_numel(shape_)) + " values, got " +
                         std::to_string(data_.size()));
  }
}

std::int64_t Tensor::dim(std::size_t i) const {
  if (i >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(i) + " out of range for shape " +
                         shape_str(shape_));
  }
  return shape_[i];
}

double& Tensor::at4(std::int64_t a, std::int64_t b, std::int64_t c, std::int64_t d) {
  return data_[static_cast<std::size_t>(((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d)];
}

double Tensor::at4(std::int64_t a, std::int64_t b, std::int64_t c, std::int64_t d) const {
  return data_[static_cast<std::size_t>(((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d)];
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw DimensionError("item() on tensor of shape " + shape_str(shape_));
  }
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

Tensor Tensor::slice_rows(std::int64_t begin, std::int64_t end) const {
  if (shape_.empty() || begin < 0 || end > shape_[0] || begin > end) {
    throw DimensionError("row slice [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of range for " + shape_str(shape_));
  }
  const std::size_t row = shape_[0] == 0 ? 0 : data_.size() / static_cast<std::size_t>(shape_[0]);
  Shape s = shape_;
  s[0] = end - begin;
  return Tensor(std::move(s),
                std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(begin * row),
                                    data_.begin() + static_cast<std::ptrdiff_t>(end * row)));
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::check_finite(const char* where) const {
  if (!all_finite()) {
    throw NumericError(std::string("non-finite value produced by ") + where + " (shape " +
                       shape_str(shape_) + ")");
  }
}

double Tensor::sum() const noexcept {
  double s = 0.0;
  for (double v : data_) s += v;
  return s;
}

double Tensor::max_abs() const noexcept {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

Tensor stack_rows(std::span<const Tensor> rows, bool concat) {
  if (rows.empty()) throw DimensionError("stack_rows on empty list");
  Shape inner = rows.front().shape();
  std::vector<double> data;
  std::int64_t lead = 0;
  for (const auto& r : rows) {
    if (concat) {
      if (r.rank() == 0 || !std::equal(r.shape().begin() + 1, r.shape().end(),
                                       inner.begin() + 1, inner.end())) {
        throw DimensionError("cannot concatenate " + shape_str(r.shape()) + " onto " +
                             shape_str(inner));
      }
      lead += r.dim(0);
    } else {
      if (r.shape() != inner) {
        throw DimensionError("cannot stack " + shape_str(r.shape()) + " with " +
                             shape_str(inner));
      }
      ++lead;
    }
    data.insert(data.end(), r.data().begin(), r.data().end());
  }
  Shape out;
  if (concat) {
    out = inner;
    out[0] = lead;
  } else {
    out.push_back(lead);
    out.insert(out.end(), inner.begin(), inner.end());
  }
  return Tensor(std::move(out), std::move(data));
}

}  // namespace gradcorr
