#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

#include "gradcorr/diagnosis.hpp"
#include "gradcorr/model.hpp"
#include "gradcorr/treatment.hpp"

namespace gradcorr::oracle {
namespace {

using ad::Var;

Tensor uniform(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Entries in +-[0.1, 1], far from the kinks of relu and abs.
Tensor away_from_zero(const Shape& shape, Rng& rng) {
  Tensor t(shape);
  for (auto& v : t.data()) v = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.1, 1.0);
  return t;
}

// Distinct entries at least 0.02 apart, so pooling windows have clear maxima.
Tensor distinct(const Shape& shape, Rng& rng) {
  Tensor t(shape);
  std::vector<double> vals(t.size());
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = -1.0 + 0.02 * static_cast<double>(i);
  rng.shuffle(vals.begin(), vals.end());
  std::copy(vals.begin(), vals.end(), t.data().begin());
  return t;
}

double weighted_sum(const Tensor& out, const Tensor& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * w[i];
  return s;
}

std::vector<Var> constants(const std::vector<Tensor>& xs) {
  std::vector<Var> vs;
  for (const auto& x : xs) vs.emplace_back(x, false);
  return vs;
}

std::vector<Var> leaves(const std::vector<Tensor>& xs) {
  std::vector<Var> vs;
  for (const auto& x : xs) vs.emplace_back(x, true);
  return vs;
}

// Central differences of `f` over every entry of every input.
std::vector<double> numeric_gradient(std::vector<Tensor> xs, const std::function<double(const std::vector<Tensor>&)>& f) {
  std::vector<double> out;
  for (auto& x : xs) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double orig = x[i];
      x[i] = orig + kStep;
      const double up = f(xs);
      x[i] = orig - kStep;
      const double down = f(xs);
      x[i] = orig;
      out.push_back((up - down) / (2.0 * kStep));
    }
  }
  return out;
}

std::vector<double> flatten_grads(const std::vector<Var>& gs) {
  std::vector<double> out;
  for (const auto& g : gs) out.insert(out.end(), g.value().data().begin(), g.value().data().end());
  return out;
}

// Squared norm of d<w, f(x)>/dx, optionally as a differentiable node.
Var grad_energy(const OpCase& c, const std::vector<Var>& xs, const Tensor& w, bool create_graph) {
  const Var out = c.fn(xs);
  const Var inner = ad::sum(ad::mul_const(out, w));
  const auto g = ad::grad(inner, xs, create_graph);
  Var total(Tensor::scalar(0.0));
  for (const auto& gi : g) total = ad::add(total, ad::sum(ad::mul(gi, gi)));
  return total;
}

Shape conv_out(const Shape& in, const Shape& k, int stride, int pad) {
  return {in[0], k[0], (in[2] + 2 * pad - k[2]) / stride + 1, (in[3] + 2 * pad - k[3]) / stride + 1};
}

OpCase conv_case(const std::string& name, Shape in, Shape k, int stride, int pad) {
  return {name,
          [=](const std::vector<Var>& x) { return ad::conv2d(x[0], x[1], stride, pad); },
          [=](Rng& r) { return std::vector<Tensor>{uniform(in, r), uniform(k, r)}; }, true};
}

}  // namespace

double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-8});
}

std::vector<OpCase> op_cases() {
  std::vector<OpCase> cases;
  const Shape s{2, 3, 4};
  auto two = [s](Rng& r) { return std::vector<Tensor>{uniform(s, r), uniform(s, r)}; };
  auto one = [s](Rng& r) { return std::vector<Tensor>{uniform(s, r)}; };

  cases.push_back({"add", [](const std::vector<Var>& x) { return ad::add(x[0], x[1]); }, two, true});
  cases.push_back({"sub", [](const std::vector<Var>& x) { return ad::sub(x[0], x[1]); }, two, true});
  cases.push_back({"mul", [](const std::vector<Var>& x) { return ad::mul(x[0], x[1]); }, two, true});
  cases.push_back({"scale", [](const std::vector<Var>& x) { return ad::scale(x[0], -1.7); }, one, true});
  cases.push_back({"add_const",
                   [s](const std::vector<Var>& x) { return ad::add_const(x[0], Tensor(s, 0.3)); }, one, true});
  cases.push_back({"mul_const",
                   [s](const std::vector<Var>& x) {
                     Tensor c(s);
                     for (std::size_t i = 0; i < c.size(); ++i) c[i] = 0.1 * static_cast<double>(i) - 1.0;
                     return ad::mul_const(x[0], c);
                   },
                   one, true});
  cases.push_back({"abs", [](const std::vector<Var>& x) { return ad::abs(ad::mul(x[0], x[1])); },
                   [s](Rng& r) { return std::vector<Tensor>{away_from_zero(s, r), away_from_zero(s, r)}; }, true});
  cases.push_back({"relu", [](const std::vector<Var>& x) { return ad::relu(ad::mul(x[0], x[1])); },
                   [s](Rng& r) { return std::vector<Tensor>{away_from_zero(s, r), away_from_zero(s, r)}; }, true});
  cases.push_back({"tap",
                   [s](const std::vector<Var>& x) {
                     const Tensor noise(s, 0.05);
                     return ad::mul(ad::tap(x[0], &noise), x[1]);
                   },
                   two, true});
  cases.push_back({"sum", [](const std::vector<Var>& x) { return ad::sum(ad::mul(x[0], x[1])); }, two, true});
  cases.push_back({"expand_scalar",
                   [s](const std::vector<Var>& x) { return ad::mul(ad::expand_scalar(ad::sum(x[0]), s), x[0]); },
                   one, true});
  cases.push_back({"reshape",
                   [](const std::vector<Var>& x) { return ad::mul(ad::reshape(x[0], Shape{6, 4}), ad::reshape(x[1], Shape{6, 4})); },
                   two, true});
  cases.push_back({"flatten",
                   [](const std::vector<Var>& x) { return ad::mul(ad::flatten(x[0]), ad::flatten(x[1])); },
                   [](Rng& r) { return std::vector<Tensor>{uniform({2, 2, 3, 3}, r), uniform({2, 2, 3, 3}, r)}; },
                   true});

  cases.push_back(conv_case("conv2d", {2, 2, 5, 5}, {3, 2, 3, 3}, 1, 0));
  cases.push_back(conv_case("conv2d padded", {1, 3, 4, 4}, {2, 3, 3, 3}, 1, 1));
  cases.push_back(conv_case("conv2d strided", {2, 1, 7, 7}, {2, 1, 3, 3}, 2, 1));
  cases.push_back(conv_case("conv2d 5x5", {1, 1, 8, 8}, {2, 1, 5, 5}, 1, 2));
  {
    const Shape in{2, 2, 6, 6}, k{3, 2, 3, 3};
    const Shape out = conv_out(in, k, 2, 1);
    cases.push_back({"conv2d_input_grad",
                     [=](const std::vector<Var>& x) { return ad::conv2d_input_grad(x[0], x[1], in, 2, 1); },
                     [=](Rng& r) { return std::vector<Tensor>{uniform(out, r), uniform(k, r)}; }, true});
    cases.push_back({"conv2d_kernel_grad",
                     [=](const std::vector<Var>& x) { return ad::conv2d_kernel_grad(x[0], x[1], k, 2, 1); },
                     [=](Rng& r) { return std::vector<Tensor>{uniform(in, r), uniform(out, r)}; }, true});
  }
  const Shape img{2, 3, 4, 4};
  cases.push_back({"add_channel_bias",
                   [](const std::vector<Var>& x) { return ad::mul(ad::add_channel_bias(x[0], x[1]), x[0]); },
                   [img](Rng& r) { return std::vector<Tensor>{uniform(img, r), uniform({3}, r)}; }, true});
  cases.push_back({"sum_per_channel",
                   [](const std::vector<Var>& x) { return ad::sum_per_channel(ad::mul(x[0], x[0])); },
                   [img](Rng& r) { return std::vector<Tensor>{uniform(img, r)}; }, true});
  cases.push_back({"broadcast_channels",
                   [img](const std::vector<Var>& x) { return ad::mul(ad::broadcast_channels(x[0], img), x[1]); },
                   [img](Rng& r) { return std::vector<Tensor>{uniform({3}, r), uniform(img, r)}; }, true});
  cases.push_back({"maxpool2d", [](const std::vector<Var>& x) { return ad::maxpool2d(x[0], 2, 2); },
                   [img](Rng& r) { return std::vector<Tensor>{distinct(img, r)}; }, true});
  cases.push_back({"maxpool2d overlapping", [](const std::vector<Var>& x) { return ad::maxpool2d(x[0], 3, 1); },
                   [](Rng& r) { return std::vector<Tensor>{distinct({1, 2, 5, 5}, r)}; }, true});
  cases.push_back({"avgpool2d",
                   [](const std::vector<Var>& x) { return ad::mul(ad::avgpool2d(x[0], 2, 2), ad::avgpool2d(x[0], 2, 2)); },
                   [img](Rng& r) { return std::vector<Tensor>{uniform(img, r)}; }, true});
  for (int t = 0; t < 4; ++t) {
    const bool ta = t & 1, tb = t & 2;
    const Shape a = ta ? Shape{4, 3} : Shape{3, 4};
    const Shape b = tb ? Shape{5, 4} : Shape{4, 5};
    cases.push_back({std::string("matmul") + (ta ? " A^T" : "") + (tb ? " B^T" : ""),
                     [=](const std::vector<Var>& x) { return ad::matmul(x[0], x[1], ta, tb); },
                     [=](Rng& r) { return std::vector<Tensor>{uniform(a, r), uniform(b, r)}; }, true});
  }
  cases.push_back({"add_row_bias",
                   [](const std::vector<Var>& x) { return ad::mul(ad::add_row_bias(x[0], x[1]), x[0]); },
                   [](Rng& r) { return std::vector<Tensor>{uniform({3, 4}, r), uniform({4}, r)}; }, true});
  cases.push_back({"sum_rows", [](const std::vector<Var>& x) { return ad::sum_rows(ad::mul(x[0], x[0])); },
                   [](Rng& r) { return std::vector<Tensor>{uniform({3, 4}, r)}; }, true});
  cases.push_back({"broadcast_rows",
                   [](const std::vector<Var>& x) { return ad::mul(ad::broadcast_rows(x[0], 3), x[1]); },
                   [](Rng& r) { return std::vector<Tensor>{uniform({4}, r), uniform({3, 4}, r)}; }, true});
  cases.push_back({"linear", [](const std::vector<Var>& x) { return ad::linear(x[0], x[1], x[2]); },
                   [](Rng& r) { return std::vector<Tensor>{uniform({3, 5}, r), uniform({4, 5}, r), uniform({4}, r)}; },
                   true});
  cases.push_back({"softmax_cross_entropy",
                   [](const std::vector<Var>& x) {
                     const std::vector<int> labels{0, 2, 3};
                     return ad::softmax_cross_entropy(x[0], labels).loss;
                   },
                   [](Rng& r) { return std::vector<Tensor>{uniform({3, 4}, r, -2.0, 2.0)}; }, false});
  // The path the constraint losses differentiate twice.
  cases.push_back({"conv-relu-pool-linear chain",
                   [](const std::vector<Var>& x) {
                     const Var h = ad::relu(ad::conv2d(x[0], x[1], 1, 1));
                     return ad::linear(ad::flatten(ad::maxpool2d(h, 2, 2)), x[2], x[3]);
                   },
                   [](Rng& r) {
                     // Redraw until every pre-activation and pooling window is clear of a kink.
                     for (;;) {
                       std::vector<Tensor> in{uniform({2, 2, 4, 4}, r), uniform({3, 2, 3, 3}, r),
                                              uniform({2, 12}, r), uniform({2}, r)};
                       const Tensor pre = ad::conv2d(Var(in[0]), Var(in[1]), 1, 1).value();
                       bool ok = true;
                       for (double v : pre.data()) ok = ok && std::abs(v) > 0.02;
                       for (std::int64_t b = 0; ok && b < 2; ++b)
                         for (std::int64_t c = 0; ok && c < 3; ++c)
                           for (std::int64_t y = 0; ok && y < 4; y += 2)
                             for (std::int64_t xx = 0; ok && xx < 4; xx += 2) {
                               std::vector<double> w{std::max(0.0, pre.at4(b, c, y, xx)),
                                                     std::max(0.0, pre.at4(b, c, y, xx + 1)),
                                                     std::max(0.0, pre.at4(b, c, y + 1, xx)),
                                                     std::max(0.0, pre.at4(b, c, y + 1, xx + 1))};
                               std::sort(w.begin(), w.end());
                               ok = w[3] == 0.0 || w[3] - w[2] > 0.02;
                             }
                       if (ok) return in;
                     }
                   },
                   true});
  return cases;
}

double check_first_order(const OpCase& c, Rng& rng) {
  const auto xs = c.inputs(rng);
  const auto xv = leaves(xs);
  const Var out = c.fn(xv);
  const Tensor w = uniform(out.shape(), rng);
  const auto g = ad::grad(ad::sum(ad::mul_const(out, w)), xv);
  const auto numeric = numeric_gradient(xs, [&](const std::vector<Tensor>& p) {
    ad::NoGradGuard guard;
    return weighted_sum(c.fn(constants(p)).value(), w);
  });
  return relative_error(flatten_grads(g), numeric);
}

double check_second_order(const OpCase& c, Rng& rng) {
  const auto xs = c.inputs(rng);
  const auto xv = leaves(xs);
  const Tensor w = uniform(c.fn(constants(xs)).shape(), rng);
  const Var energy = grad_energy(c, xv, w, true);
  const auto g = ad::grad(energy, xv);
  const auto numeric = numeric_gradient(xs, [&](const std::vector<Tensor>& p) {
    return grad_energy(c, leaves(p), w, false).value().item();
  });
  return relative_error(flatten_grads(g), numeric);
}

std::vector<OracleResult> run_op_oracles(std::uint64_t seed, int instances) {
  std::vector<OracleResult> results;
  for (const auto& c : op_cases()) {
    OracleResult first{c.name, 0, 0.0, kOpTolerance};
    OracleResult second{c.name + " (2nd)", 0, 0.0, kOpTolerance};
    for (int i = 0; i < instances; ++i) {
      Rng rng(derive_seed(seed, "oracle", {fnv1a(c.name), static_cast<std::uint64_t>(i)}));
      first.worst = std::max(first.worst, check_first_order(c, rng));
      ++first.instances;
      if (c.second_order) {
        second.worst = std::max(second.worst, check_second_order(c, rng));
        ++second.instances;
      }
    }
    results.push_back(first);
    if (c.second_order) results.push_back(second);
  }
  return results;
}

namespace {

ArchSpec toy_spec() {
  ArchSpec s{"toy", 3, Shape{2, 6, 6}, {}};
  LayerSpec c1{LayerKind::Conv, 4, 3, 1, 1, true, -1};
  LayerSpec c2{LayerKind::Conv, 5, 3, 1, 1, true, -1};
  LayerSpec pool{LayerKind::MaxPool, 0, 2, 2, 0, false, -1};
  LayerSpec flat{LayerKind::Flatten, 0, 0, 1, 0, false, -1};
  LayerSpec head{LayerKind::Linear, 3, 0, 1, 0, false, -1};
  s.layers = {c1, c2, pool, flat, head};
  s.validate();
  return s;
}

struct ConstraintProblem {
  Model model;
  Tensor images;
  std::vector<int> labels;
  LayerId layer = 0;
  ChannelProfile profile;
  Tensor background;
  ConstraintNoise noise;
};

double constraint_value(const ConstraintProblem& p, bool channel) {
  const auto fwd = forward_with_taps(p.model, p.images, {p.layer});
  if (channel) return channel_loss(fwd.tape, p.labels, p.layer, p.profile, p.noise).total().value().item();
  return space_loss(fwd.tape, p.labels, p.layer, p.background, p.noise).value().item();
}

double check_constraint(ConstraintProblem& p, bool channel, Rng& rng, int* skipped) {
  const auto fwd = forward_with_taps(p.model, p.images, {p.layer});
  const Var loss = channel ? channel_loss(fwd.tape, p.labels, p.layer, p.profile, p.noise).total()
                           : space_loss(fwd.tape, p.labels, p.layer, p.background, p.noise);
  std::vector<Var> params(p.model.params().begin(), p.model.params().end());
  const auto g = ad::grad(loss, params);

  // The loss contains relu masks and pooling choices of the replayed
  // network, so it is piecewise smooth with jumps. A coordinate is usable
  // only if its stencil stays on one piece: the one-sided differences must
  // agree. This looks at numeric values only and cannot mask an analytic
  // error. Half the coordinates are drawn anywhere, half where the analytic
  // gradient is nonzero.
  std::vector<std::pair<std::size_t, std::size_t>> nonzero;
  for (std::size_t k = 0; k < params.size(); ++k)
    for (std::size_t i = 0; i < g[k].value().size(); ++i)
      if (g[k].value()[i] != 0.0) nonzero.emplace_back(k, i);
  const double base = constraint_value(p, channel);
  std::vector<double> analytic, numeric;
  for (int t = 0; t < 256 && analytic.size() < 16; ++t) {
    std::size_t k, i;
    if (t % 2 == 1 && !nonzero.empty()) {
      std::tie(k, i) = nonzero[static_cast<std::size_t>(rng.below(nonzero.size()))];
    } else {
      k = static_cast<std::size_t>(rng.below(params.size()));
      i = static_cast<std::size_t>(rng.below(params[k].value().size()));
    }
    auto& v = params[k].mutable_value();
    const double orig = v[i];
    v[i] = orig + kStep;
    const double up = constraint_value(p, channel);
    v[i] = orig - kStep;
    const double down = constraint_value(p, channel);
    v[i] = orig;
    const double fwd = (up - base) / kStep, bwd = (base - down) / kStep;
    if (std::abs(fwd - bwd) > 0.05 * std::max(std::abs(fwd), std::abs(bwd)) + 1e-6) {
      if (skipped) ++*skipped;
      continue;
    }
    analytic.push_back(g[k].value()[i]);
    numeric.push_back((up - down) / (2.0 * kStep));
  }
  if (analytic.size() < 16) return 1.0;
  return relative_error(analytic, numeric);
}

ConstraintProblem make_problem(int instance, std::uint64_t seed, Rng& rng) {
  const ArchSpec spec = instance % 2 == 0 ? toy_spec() : mini_vgg_spec(3, 16, 4);
  ConstraintProblem p{build_model(spec, derive_seed(seed, "oracle-model", {static_cast<std::uint64_t>(instance)})),
                      uniform(Shape{2, spec.input[0], spec.input[1], spec.input[2]}, rng, 0.0, 1.0),
                      {}, 0, {}, {}, {}};
  for (int b = 0; b < 2; ++b) p.labels.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.classes))));
  const auto convs = spec.conv_layers();
  p.layer = convs[static_cast<std::size_t>(rng.below(convs.size()))];
  const Shape fs = spec.feature_shape(p.layer);
  CorrelationMatrix m(p.layer, spec.classes, static_cast<int>(fs[0]));
  for (int n = 0; n < spec.classes; ++n)
    for (int k = 0; k < fs[0]; ++k) m.set_raw(n, k, rng.uniform(0.0, 1.0), 1);
  p.profile = make_channel_profile(m, 0.5);
  p.background = Tensor(Shape{2, fs[1], fs[2]});
  for (auto& v : p.background.data()) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
  p.noise.J = 1 + instance % 3;
  p.noise.delta = instance % 3 == 0 ? 0.0 : 0.05;
  p.noise.seed = derive_seed(seed, "oracle-noise", {static_cast<std::uint64_t>(instance)});
  return p;
}

}  // namespace

std::vector<OracleResult> run_constraint_oracles(std::uint64_t seed, int instances) {
  OracleResult ch{"channel constraint parameter gradient", 0, 0.0, kConstraintTolerance};
  OracleResult sp{"space constraint parameter gradient", 0, 0.0, kConstraintTolerance};
  for (int i = 0; i < instances; ++i) {
    Rng rng(derive_seed(seed, "oracle-constraint", {static_cast<std::uint64_t>(i)}));
    auto p = make_problem(i, seed, rng);
    ch.worst = std::max(ch.worst, check_constraint(p, true, rng, &ch.skipped));
    ++ch.instances;
    sp.worst = std::max(sp.worst, check_constraint(p, false, rng, &sp.skipped));
    ++sp.instances;
  }
  return {ch, sp};
}

}  // namespace gradcorr::oracle
