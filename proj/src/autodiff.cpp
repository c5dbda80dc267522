#include "gradcorr/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <optional>
#include <cmath>
#include <unordered_map>
#include <unordered_set>

#include "gradcorr/error.hpp"
#include "kernels.hpp"

namespace gradcorr::ad {
namespace {

thread_local bool g_grad_enabled = true;
std::atomic<std::uint64_t> g_next_id{1};

void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
}

void require_same_shape(const char* op, const Var& a, const Tensor& c) {
  if (a.shape() != c.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(c.shape()) + " differ");
  }
}

template <class F>
Tensor map_values(const Tensor& a, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

template <class F>
Tensor zip_values(const Tensor& a, const Tensor& b, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

// Scatter/gather pair behind maxpool's backward; indices are constants.
Var pool_scatter(const Var& g, std::shared_ptr<const std::vector<std::int64_t>> idx,
                 const Shape& input_shape);

Var pool_gather(const Var& x, std::shared_ptr<const std::vector<std::int64_t>> idx,
                const Shape& output_shape) {
  Tensor out(output_shape);
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = x.value()[static_cast<std::size_t>((*idx)[o])];
  Shape in_shape = x.shape();
  return Var::make(
      std::move(out), {x},
      [idx, in_shape](const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{pool_scatter(g, idx, in_shape)};
      },
      "pool_gather");
}

Var pool_scatter(const Var& g, std::shared_ptr<const std::vector<std::int64_t>> idx,
                 const Shape& input_shape) {
  Tensor out(input_shape);
  for (std::size_t o = 0; o < g.value().size(); ++o) {
    out[static_cast<std::size_t>((*idx)[o])] += g.value()[o];
  }
  Shape out_shape = g.shape();
  return Var::make(
      std::move(out), {g},
      [idx, out_shape](const Var& h, const std::vector<bool>&) {
        return std::vector<Var>{pool_gather(h, idx, out_shape)};
      },
      "pool_scatter");
}

Var avgpool2d_transpose(const Var& g, const Shape& input_shape, int kernel, int stride) {
  return Var::make(
      kernels::avgpool2d_transpose(g.value(), input_shape, kernel, stride), {g},
      [kernel, stride](const Var& h, const std::vector<bool>&) {
        return std::vector<Var>{avgpool2d(h, kernel, stride)};
      },
      "avgpool2d_transpose");
}

}  // namespace

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
  node_->id = g_next_id++;
}

Tensor& Var::mutable_value() {
  if (!node_ || !node_->parents.empty()) {
    throw UsageError("mutable_value() is only available on leaf variables");
  }
  return node_->value;
}

Var Var::make(Tensor value, std::vector<Var> parents, BackwardFn backward, const char* op) {
  value.check_finite(op);
  Var v;
  v.node_ = std::make_shared<Node>();
  v.node_->value = std::move(value);
  v.node_->op = op;
  v.node_->id = g_next_id++;
  const bool track = g_grad_enabled && std::any_of(parents.begin(), parents.end(),
                                                   [](const Var& p) { return p.requires_grad(); });
  if (track) {
    v.node_->parents = std::move(parents);
    v.node_->backward = std::move(backward);
    v.node_->requires_grad = true;
  }
  return v;
}

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
EnableGradGuard::EnableGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = true; }
EnableGradGuard::~EnableGradGuard() { g_grad_enabled = prev_; }

Var add(const Var& a, const Var& b) {
  require_same_shape("add", a, b);
  return Var::make(
      zip_values(a.value(), b.value(), [](double x, double y) { return x + y; }), {a, b},
      [](const Var& g, const std::vector<bool>&) { return std::vector<Var>{g, g}; }, "add");
}

Var sub(const Var& a, const Var& b) {
  require_same_shape("sub", a, b);
  return Var::make(
      zip_values(a.value(), b.value(), [](double x, double y) { return x - y; }), {a, b},
      [](const Var& g, const std::vector<bool>& needs) {
        return std::vector<Var>{g, needs[1] ? scale(g, -1.0) : Var{}};
      },
      "sub");
}

Var mul(const Var& a, const Var& b) {
  require_same_shape("mul", a, b);
  return Var::make(
      zip_values(a.value(), b.value(), [](double x, double y) { return x * y; }), {a, b},
      [a, b](const Var& g, const std::vector<bool>& needs) {
        return std::vector<Var>{needs[0] ? mul(g, b) : Var{}, needs[1] ? mul(g, a) : Var{}};
      },
      "mul");
}

Var scale(const Var& a, double s) {
  return Var::make(
      map_values(a.value(), [s](double x) { return x * s; }), {a},
      [s](const Var& g, const std::vector<bool>&) { return std::vector<Var>{scale(g, s)}; },
      "scale");
}

Var add_const(const Var& a, const Tensor& c) {
  require_same_shape("add_const", a, c);
  return Var::make(
      zip_values(a.value(), c, [](double x, double y) { return x + y; }), {a},
      [](const Var& g, const std::vector<bool>&) { return std::vector<Var>{g}; }, "add_const");
}

Var mul_const(const Var& a, const Tensor& c) {
  require_same_shape("mul_const", a, c);
  return Var::make(
      zip_values(a.value(), c, [](double x, double y) { return x * y; }), {a},
      [c](const Var& g, const std::vector<bool>&) { return std::vector<Var>{mul_const(g, c)}; },
      "mul_const");
}

Var abs(const Var& a) {
  return Var::make(
      map_values(a.value(), [](double x) { return std::abs(x); }), {a},
      [a](const Var& g, const std::vector<bool>&) {
        Tensor sign = map_values(a.value(), [](double x) {
          return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
        });
        return std::vector<Var>{mul_const(g, sign)};
      },
      "abs");
}

Var relu(const Var& a) {
  return Var::make(
      map_values(a.value(), [](double x) { return x > 0.0 ? x : 0.0; }), {a},
      [a](const Var& g, const std::vector<bool>&) {
        Tensor mask = map_values(a.value(), [](double x) { return x > 0.0 ? 1.0 : 0.0; });
        return std::vector<Var>{mul_const(g, mask)};
      },
      "relu");
}

Var tap(const Var& a, const Tensor* noise) {
  Tensor value = a.value();
  if (noise) {
    if (noise->shape() != a.shape()) {
      throw DimensionError("tap: noise " + shape_str(noise->shape()) + " does not match " +
                           shape_str(a.shape()));
    }
    for (std::size_t i = 0; i < value.size(); ++i) value[i] += (*noise)[i];
  }
  Var out = Var::make(
      std::move(value), {a},
      [](const Var& g, const std::vector<bool>&) { return std::vector<Var>{g}; }, "tap");
  if (g_grad_enabled && !out.requires_grad()) {
    // Force a differentiable entry point even when nothing upstream needs
    // gradients (e.g. a constant input and frozen parameters).
    out.node()->requires_grad = true;
  }
  return out;
}

Var sum(const Var& a) {
  Shape in_shape = a.shape();
  return Var::make(
      Tensor::scalar(a.value().sum()), {a},
      [in_shape](const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{expand_scalar(g, in_shape)};
      },
      "sum");
}

Var expand_scalar(const Var& s, const Shape& shape) {
  if (s.value().size() != 1) {
    throw DimensionError("expand_scalar expects one value, got " + shape_str(s.shape()));
  }
  Shape s_shape = s.shape();
  return Var::make(
      Tensor(shape, s.value()[0]), {s},
      [s_shape](const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{reshape(sum(g), s_shape)};
      },
      "expand_scalar");
}

Var reshape(const Var& a, const Shape& shape) {
  Shape in_shape = a.shape();
  return Var::make(
      a.value().reshaped(shape), {a},
      [in_shape](const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{reshape(g, in_shape)};
      },
      "reshape");
}

Var flatten(const Var& a) {
  if (a.value().rank() < 1) throw DimensionError("flatten on a scalar");
  const auto b = a.shape()[0];
  const auto rest = b == 0 ? 0 : static_cast<std::int64_t>(a.value().size()) / b;
  return reshape(a, Shape{b, rest});
}

Var conv2d(const Var& input, const Var& kernel, int stride, int padding) {
  Shape in_shape = input.shape();
  Shape k_shape = kernel.shape();
  return Var::make(
      kernels::conv2d(input.value(), kernel.value(), stride, padding), {input, kernel},
      [input, kernel, in_shape, k_shape, stride, padding](const Var& g,
                                                          const std::vector<bool>& needs) {
        return std::vector<Var>{
            needs[0] ? conv2d_input_grad(g, kernel, in_shape, stride, padding) : Var{},
            needs[1] ? conv2d_kernel_grad(input, g, k_shape, stride, padding) : Var{}};
      },
      "conv2d");
}

Var conv2d_input_grad(const Var& grad_out, const Var& kernel, const Shape& input_shape,
                      int stride, int padding) {
  Shape k_shape = kernel.shape();
  return Var::make(
      kernels::conv2d_input_grad(grad_out.value(), kernel.value(), input_shape, stride, padding),
      {grad_out, kernel},
      [grad_out, kernel, k_shape, stride, padding](const Var& h, const std::vector<bool>& needs) {
        return std::vector<Var>{
            needs[0] ? conv2d(h, kernel, stride, padding) : Var{},
            needs[1] ? conv2d_kernel_grad(h, grad_out, k_shape, stride, padding) : Var{}};
      },
      "conv2d_input_grad");
}

Var conv2d_kernel_grad(const Var& input, const Var& grad_out, const Shape& kernel_shape,
                       int stride, int padding) {
  Shape in_shape = input.shape();
  return Var::make(
      kernels::conv2d_kernel_grad(input.value(), grad_out.value(), kernel_shape, stride, padding),
      {input, grad_out},
      [input, grad_out, in_shape, stride, padding](const Var& h, const std::vector<bool>& needs) {
        return std::vector<Var>{
            needs[0] ? conv2d_input_grad(grad_out, h, in_shape, stride, padding) : Var{},
            needs[1] ? conv2d(input, h, stride, padding) : Var{}};
      },
      "conv2d_kernel_grad");
}

Var add_channel_bias(const Var& x, const Var& bias) {
  const auto& s = x.shape();
  if (s.size() != 4 || bias.shape() != Shape{s[1]}) {
    throw DimensionError("add_channel_bias: bias " + shape_str(bias.shape()) +
                         " does not match input " + shape_str(s));
  }
  Tensor out = x.value();
  const std::int64_t hw = s[2] * s[3];
  for (std::int64_t b = 0; b < s[0]; ++b) {
    for (std::int64_t c = 0; c < s[1]; ++c) {
      const double v = bias.value()[static_cast<std::size_t>(c)];
      double* p = out.data().data() + (b * s[1] + c) * hw;
      for (std::int64_t i = 0; i < hw; ++i) p[i] += v;
    }
  }
  return Var::make(
      std::move(out), {x, bias},
      [](const Var& g, const std::vector<bool>& needs) {
        return std::vector<Var>{g, needs[1] ? sum_per_channel(g) : Var{}};
      },
      "add_channel_bias");
}

Var sum_per_channel(const Var& x) {
  const auto& s = x.shape();
  if (s.size() != 4) throw DimensionError("sum_per_channel expects BxCxHxW, got " + shape_str(s));
  Tensor out(Shape{s[1]});
  const std::int64_t hw = s[2] * s[3];
  for (std::int64_t b = 0; b < s[0]; ++b) {
    for (std::int64_t c = 0; c < s[1]; ++c) {
      const double* p = x.value().data().data() + (b * s[1] + c) * hw;
      double acc = 0.0;
      for (std::int64_t i = 0; i < hw; ++i) acc += p[i];
      out[static_cast<std::size_t>(c)] += acc;
    }
  }
  Shape in_shape = s;
  return Var::make(
      std::move(out), {x},
      [in_shape](const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{broadcast_channels(g, in_shape)};
      },
      "sum_per_channel");
}

Var broadcast_channels(const Var& v, const Shape& shape) {
  if (shape.size() != 4 || v.shape() != Shape{shape[1]}) {
    throw DimensionError("broadcast_channels: " + shape_str(v.shape()) + " onto " +
                         shape_str(shape));
  }
  Tensor out(shape);
  const std::int64_t hw = shape[2] * shape[3];
  for (std::int64_t b = 0; b < shape[0]; ++b) {
    for (std::int64_t c = 0; c < shape[1]; ++c) {
      std::fill_n(out.data().data() + (b * shape[1] + c) * hw, hw,
                  v.value()[static_cast<std::size_t>(c)]);
    }
  }
  return Var::make(
      std::move(out), {v},
      [](const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{sum_per_channel(g)};
      },
      "broadcast_channels");
}

Var maxpool2d(const Var& x, int kernel, int stride) {
  auto r = kernels::maxpool2d(x.value(), kernel, stride);
  auto idx = std::make_shared<const std::vector<std::int64_t>>(std::move(r.argmax));
  Shape in_shape = x.shape();
  return Var::make(
      std::move(r.value), {x},
      [idx, in_shape](const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{pool_scatter(g, idx, in_shape)};
      },
      "maxpool2d");
}

Var avgpool2d(const Var& x, int kernel, int stride) {
  Shape in_shape = x.shape();
  return Var::make(
      kernels::avgpool2d(x.value(), kernel, stride), {x},
      [in_shape, kernel, stride](const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{avgpool2d_transpose(g, in_shape, kernel, stride)};
      },
      "avgpool2d");
}

Var matmul(const Var& a, const Var& b, bool ta, bool tb) {
  return Var::make(
      kernels::matmul(a.value(), b.value(), ta, tb), {a, b},
      [a, b, ta, tb](const Var& g, const std::vector<bool>& needs) {
        Var da, db;
        if (needs[0]) da = ta ? matmul(b, g, tb, true) : matmul(g, b, false, !tb);
        if (needs[1]) db = tb ? matmul(g, a, true, ta) : matmul(a, g, !ta, false);
        return std::vector<Var>{da, db};
      },
      "matmul");
}

Var add_row_bias(const Var& x, const Var& bias) {
  const auto& s = x.shape();
  if (s.size() != 2 || bias.shape() != Shape{s[1]}) {
    throw DimensionError("add_row_bias: bias " + shape_str(bias.shape()) +
                         " does not match input " + shape_str(s));
  }
  Tensor out = x.value();
  for (std::int64_t r = 0; r < s[0]; ++r) {
    for (std::int64_t c = 0; c < s[1]; ++c) {
      out[static_cast<std::size_t>(r * s[1] + c)] += bias.value()[static_cast<std::size_t>(c)];
    }
  }
  return Var::make(
      std::move(out), {x, bias},
      [](const Var& g, const std::vector<bool>& needs) {
        return std::vector<Var>{g, needs[1] ? sum_rows(g) : Var{}};
      },
      "add_row_bias");
}

Var sum_rows(const Var& x) {
  const auto& s = x.shape();
  if (s.size() != 2) throw DimensionError("sum_rows expects a matrix, got " + shape_str(s));
  Tensor out(Shape{s[1]});
  for (std::int64_t r = 0; r < s[0]; ++r) {
    for (std::int64_t c = 0; c < s[1]; ++c) {
      out[static_cast<std::size_t>(c)] += x.value()[static_cast<std::size_t>(r * s[1] + c)];
    }
  }
  const auto rows = s[0];
  return Var::make(
      std::move(out), {x},
      [rows](const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{broadcast_rows(g, rows)};
      },
      "sum_rows");
}

Var broadcast_rows(const Var& v, std::int64_t rows) {
  if (v.value().rank() != 1) {
    throw DimensionError("broadcast_rows expects a vector, got " + shape_str(v.shape()));
  }
  const auto n = v.shape()[0];
  Tensor out(Shape{rows, n});
  for (std::int64_t r = 0; r < rows; ++r) {
    std::copy(v.value().data().begin(), v.value().data().end(), out.data().begin() + r * n);
  }
  return Var::make(
      std::move(out), {v},
      [](const Var& g, const std::vector<bool>&) { return std::vector<Var>{sum_rows(g)}; },
      "broadcast_rows");
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  return add_row_bias(matmul(x, weight, false, true), bias);
}

Tensor softmax(const Tensor& logits) {
  if (logits.rank() != 2) throw DimensionError("softmax expects BxN, got " + shape_str(logits.shape()));
  const auto rows = logits.dim(0);
  const auto n = logits.dim(1);
  Tensor p(logits.shape());
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* z = logits.data().data() + r * n;
    double* out = p.data().data() + r * n;
    const double m = *std::max_element(z, z + n);
    double total = 0.0;
    for (std::int64_t i = 0; i < n; ++i) total += (out[i] = std::exp(z[i] - m));
    for (std::int64_t i = 0; i < n; ++i) out[i] /= total;
  }
  return p;
}

CrossEntropy softmax_cross_entropy(const Var& logits, std::span<const int> labels) {
  const auto& z = logits.value();
  if (z.rank() != 2 || z.dim(0) != static_cast<std::int64_t>(labels.size())) {
    throw DimensionError("softmax_cross_entropy: logits " + shape_str(z.shape()) + " with " +
                         std::to_string(labels.size()) + " labels");
  }
  const auto rows = z.dim(0);
  const auto n = z.dim(1);
  Tensor p = softmax(z);
  double loss = 0.0;
  Tensor delta = p;
  for (std::int64_t r = 0; r < rows; ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= n) {
      throw InputError("label " + std::to_string(y) + " out of range for " + std::to_string(n) +
                       " classes");
    }
    const double* zr = z.data().data() + r * n;
    const double m = *std::max_element(zr, zr + n);
    double lse = 0.0;
    for (std::int64_t i = 0; i < n; ++i) lse += std::exp(zr[i] - m);
    loss += (std::log(lse) + m) - zr[y];
    delta[static_cast<std::size_t>(r * n + y)] -= 1.0;
  }
  const double inv = rows > 0 ? 1.0 / static_cast<double>(rows) : 0.0;
  for (std::size_t i = 0; i < delta.size(); ++i) delta[i] *= inv;
  Shape shape = z.shape();
  Var loss_var = Var::make(
      Tensor::scalar(loss * inv), {logits},
      [delta = std::move(delta), shape](const Var& g, const std::vector<bool>&) {
        return std::vector<Var>{mul_const(expand_scalar(g, shape), delta)};
      },
      "softmax_cross_entropy");
  return {loss_var, std::move(p)};
}

std::vector<Var> grad(std::span<const Var> outputs, std::span<const Tensor> seeds,
                      std::span<const Var> wrt, bool create_graph) {
  if (outputs.size() != seeds.size()) {
    throw UsageError("grad: one seed per output required");
  }
  std::unordered_set<const Node*> targets;
  for (const auto& w : wrt) targets.insert(w.node());

  // Post-order over the recorded graph; `depends` marks nodes whose value
  // is a function of some target, the only ones worth differentiating.
  std::vector<Node*> order;
  std::unordered_map<const Node*, bool> depends;
  std::vector<std::pair<Node*, std::size_t>> stack;
  for (const auto& out : outputs) {
    if (!out.defined() || depends.count(out.node())) continue;
    stack.emplace_back(out.node(), 0);
    depends[out.node()] = false;
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node* p = node->parents[next++].node();
        if (!depends.count(p)) {
          depends[p] = false;
          stack.emplace_back(p, 0);
        }
        continue;
      }
      bool d = targets.count(node) > 0;
      for (const auto& p : node->parents) d = d || depends[p.node()];
      depends[node] = d;
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_map<const Node*, Var> grads;
  {
    std::optional<NoGradGuard> no_grad;
    std::optional<EnableGradGuard> with_grad;
    if (create_graph) with_grad.emplace();
    else no_grad.emplace();

    for (std::size_t i = 0; i < outputs.size(); ++i) {
      if (!outputs[i].defined()) continue;
      if (seeds[i].shape() != outputs[i].shape()) {
        throw DimensionError("grad: seed " + shape_str(seeds[i].shape()) + " for output " +
                             shape_str(outputs[i].shape()));
      }
      Var seed(seeds[i]);
      auto [it, fresh] = grads.try_emplace(outputs[i].node(), seed);
      if (!fresh) it->second = add(it->second, seed);
    }

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* node = *it;
      if (!depends[node] || node->parents.empty()) continue;
      auto g = grads.find(node);
      if (g == grads.end()) continue;
      std::vector<bool> needs(node->parents.size());
      bool any = false;
      for (std::size_t i = 0; i < needs.size(); ++i) {
        needs[i] = depends[node->parents[i].node()];
        any = any || needs[i];
      }
      if (!any) continue;
      auto parent_grads = node->backward(g->second, needs);
      for (std::size_t i = 0; i < needs.size(); ++i) {
        if (!needs[i] || !parent_grads[i].defined()) continue;
        const Node* p = node->parents[i].node();
        auto [pit, fresh] = grads.try_emplace(p, parent_grads[i]);
        if (!fresh) pit->second = add(pit->second, parent_grads[i]);
      }
      // Intermediate gradients of non-targets are no longer needed.
      if (!targets.count(node)) grads.erase(g);
    }
  }

  std::vector<Var> result;
  result.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto it = grads.find(w.node());
    result.push_back(it != grads.end() ? it->second : Var(Tensor(w.shape())));
  }
  return result;
}

std::vector<Var> grad(const Var& scalar_output, std::span<const Var> wrt, bool create_graph) {
  const Tensor seed(scalar_output.shape(), 1.0);
  return grad(std::span<const Var>(&scalar_output, 1), std::span<const Tensor>(&seed, 1), wrt,
              create_graph);
}

}  // namespace gradcorr::ad
