#pragma once

// Dynamic-graph reverse-mode differentiation over Tensor values.
//
// Every backward rule is written in terms of the differentiable ops below, so
// calling `grad(..., create_graph = true)` yields gradients that are
// themselves graph nodes and can be differentiated again. That one extra
// level is what the channel-wise and space-wise constraint losses need.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "gradcorr/tensor.hpp"

namespace gradcorr::ad {

class Var;

/// Maps the gradient of a node's output to gradients of its parents. `needs`
/// flags the parents whose gradient is actually consumed; others may be left
/// undefined.
using BackwardFn =
    std::function<std::vector<Var>(const Var& grad_out, const std::vector<bool>& needs)>;

struct Node {
  Tensor value;
  std::vector<Var> parents;
  BackwardFn backward;
  bool requires_grad = false;
  const char* op = "leaf";
  std::uint64_t id = 0;
};

/// Shared handle to a graph node. Copies alias the same node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  const char* op() const { return node_->op; }
  Node* node() const noexcept { return node_.get(); }

  /// In-place access for optimizer updates on leaves. Throws on non-leaves.
  Tensor& mutable_value();

  static Var make(Tensor value, std::vector<Var> parents, BackwardFn backward, const char* op);

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled() noexcept;

/// Disables graph recording for the guard's lifetime. Ops still compute
/// values but produce constant nodes.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class EnableGradGuard {
 public:
  EnableGradGuard();
  ~EnableGradGuard();
  EnableGradGuard(const EnableGradGuard&) = delete;
  EnableGradGuard& operator=(const EnableGradGuard&) = delete;

 private:
  bool prev_;
};

// Elementwise.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_const(const Var& a, const Tensor& c);
Var mul_const(const Var& a, const Tensor& c);
Var abs(const Var& a);
Var relu(const Var& a);

/// Identity with gradient tracking forced on; optionally adds a constant
/// (the noise draw) to the value.
Var tap(const Var& a, const Tensor* noise = nullptr);

// Reductions / broadcasts.
Var sum(const Var& a);
Var expand_scalar(const Var& s, const Shape& shape);
Var reshape(const Var& a, const Shape& shape);
Var flatten(const Var& a);

// Convolution and its two adjoints. All three are bilinear and mutually
// closed under differentiation.
Var conv2d(const Var& input, const Var& kernel, int stride, int padding);
Var conv2d_input_grad(const Var& grad_out, const Var& kernel, const Shape& input_shape,
                      int stride, int padding);
Var conv2d_kernel_grad(const Var& input, const Var& grad_out, const Shape& kernel_shape,
                       int stride, int padding);

/// Adds a per-channel bias to a BxCxHxW tensor.
Var add_channel_bias(const Var& x, const Var& bias);
/// Sums a BxCxHxW tensor down to C.
Var sum_per_channel(const Var& x);
/// Broadcasts a length-C vector to BxCxHxW.
Var broadcast_channels(const Var& v, const Shape& shape);

Var maxpool2d(const Var& x, int kernel, int stride);
Var avgpool2d(const Var& x, int kernel, int stride);

/// a(.T) @ b(.T) for rank-2 operands.
Var matmul(const Var& a, const Var& b, bool transpose_a = false, bool transpose_b = false);
Var add_row_bias(const Var& x, const Var& bias);
Var sum_rows(const Var& x);
Var broadcast_rows(const Var& v, std::int64_t rows);
/// x @ weight.T + bias, with weight of shape (out, in).
Var linear(const Var& x, const Var& weight, const Var& bias);

struct CrossEntropy {
  Var loss;             // mean over the batch
  Tensor probabilities; // BxN softmax
};

/// Mean softmax cross-entropy. The backward rule treats the softmax as a
/// constant, so the loss is differentiable once (never needed twice here).
CrossEntropy softmax_cross_entropy(const Var& logits, std::span<const int> labels);

/// Row-wise softmax of a BxN tensor.
Tensor softmax(const Tensor& logits);

/// Gradients of sum_i <seeds[i], outputs[i]> w.r.t. each of `wrt`. Entries of
/// `wrt` that the outputs do not depend on get zeros. With `create_graph`
/// the results are differentiable graph nodes.
std::vector<Var> grad(std::span<const Var> outputs, std::span<const Tensor> seeds,
                      std::span<const Var> wrt, bool create_graph = false);

/// Convenience for a scalar output seeded with 1.
std::vector<Var> grad(const Var& scalar_output, std::span<const Var> wrt,
                      bool create_graph = false);

}  // namespace gradcorr::ad
