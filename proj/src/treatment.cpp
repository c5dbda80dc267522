#include "gradcorr/treatment.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "gradcorr/csv.hpp"
#include "gradcorr/error.hpp"
#include "gradcorr/rng.hpp"

namespace gradcorr {
namespace {

// Step of the first-order surrogate used when double backward is off.
constexpr double kSurrogateStep = 1e-4;

struct GradTerm {
  std::vector<int> classes;
  std::vector<Tensor> weights;  // each shaped like the layer's activations
};

Tensor one_hot(const Shape& logits_shape, std::span<const int> classes) {
  Tensor t(logits_shape);
  const auto n = static_cast<std::size_t>(logits_shape[1]);
  for (std::size_t b = 0; b < classes.size(); ++b) {
    t[b * n + static_cast<std::size_t>(classes[b])] = 1.0;
  }
  return t;
}

// sum_hw weight * |G| where G is the inner gradient of the selected logits,
// approximated by a directional difference so only first-order
// differentiation is needed.
ad::Var surrogate_term(const Tape& base, const Tape& noised, std::span<const int> classes,
                       LayerId layer, const Tensor& weight) {
  const Tensor g = grad_wrt_activation(noised, classes, layer).value();
  auto it = noised.noise.find(layer);
  Tensor offset = it != noised.noise.end() ? it->second : Tensor(g.shape());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double s = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
    offset[i] += kSurrogateStep * weight[i] * s;
  }
  const Tape shifted = replay_with_offset(base, layer, offset);
  const Tensor sel = one_hot(noised.logits.shape(), classes);
  const ad::Var diff = ad::sub(ad::sum(ad::mul_const(shifted.logits, sel)),
                               ad::sum(ad::mul_const(noised.logits, sel)));
  return ad::scale(diff, 1.0 / kSurrogateStep);
}

// For each term and weight, sum_j sum weight * |d y / d(m + sigma_j)|.
std::vector<std::vector<ad::Var>> constraint_terms(const Tape& base, LayerId layer,
                                                   std::span<const GradTerm> terms,
                                                   const ConstraintNoise& noise) {
  if (noise.J < 1) throw ConfigError("J must be at least 1");
  if (noise.delta < 0.0) throw ConfigError("constraint noise delta must be nonnegative");
  (void)base.tap(layer);
  const Shape& shape = base.activations.at(layer).shape();
  for (const auto& t : terms) {
    if (static_cast<std::int64_t>(t.classes.size()) != base.batch()) {
      throw UsageError("one class per batch row required");
    }
    for (const auto& w : t.weights) {
      if (w.shape() != shape) {
        throw ConfigError("constraint weight " + shape_str(w.shape()) + " does not match layer " +
                          std::to_string(layer) + " activations " + shape_str(shape));
      }
    }
  }
  if (!noise.sample_ids.empty() && static_cast<std::int64_t>(noise.sample_ids.size()) != base.batch()) {
    throw UsageError("one sample id per batch row required");
  }

  std::vector<std::vector<ad::Var>> out(terms.size());
  const int passes = noise.delta == 0.0 ? 1 : noise.J;
  for (int j = 0; j < passes; ++j) {
    Tape noised_store;
    if (noise.delta > 0.0) {
      NoiseSpec spec{noise.delta, noise.seed, {}};
      for (std::int64_t b = 0; b < base.batch(); ++b) {
        const auto id = static_cast<std::uint64_t>(
            noise.sample_ids.empty() ? b : noise.sample_ids[static_cast<std::size_t>(b)]);
        spec.row_seeds.push_back(derive_seed(noise.seed, "constraint-noise",
                                             {id, static_cast<std::uint64_t>(j),
                                              static_cast<std::uint64_t>(layer)}));
      }
      noised_store = replay_from(base, layer, spec);
    }
    const Tape& noised = noise.delta > 0.0 ? noised_store : base;
    for (std::size_t t = 0; t < terms.size(); ++t) {
      ad::Var g;
      if (noise.double_backward) g = ad::abs(grad_wrt_activation(noised, terms[t].classes, layer, true));
      for (std::size_t w = 0; w < terms[t].weights.size(); ++w) {
        ad::Var v = noise.double_backward
                        ? ad::sum(ad::mul_const(g, terms[t].weights[w]))
                        : surrogate_term(base, noised, terms[t].classes, layer, terms[t].weights[w]);
        if (out[t].size() <= w) {
          out[t].push_back(v);
        } else {
          out[t][w] = ad::add(out[t][w], v);
        }
      }
    }
  }
  if (noise.delta == 0.0 && noise.J > 1) {
    for (auto& row : out) {
      for (auto& v : row) v = ad::scale(v, static_cast<double>(noise.J));
    }
  }
  return out;
}

// Broadcasts per-row, per-channel indicators over the spatial positions.
Tensor channel_weights(const Shape& shape, const ChannelProfile& profile, std::span<const int> classes) {
  Tensor w(shape);
  const auto K = shape[1];
  const auto hw = shape[2] * shape[3];
  for (std::size_t b = 0; b < classes.size(); ++b) {
    const auto ind = profile.indicator(classes[b]);
    for (std::int64_t k = 0; k < K; ++k) {
      if (!ind[static_cast<std::size_t>(k)]) continue;
      double* p = w.data().data() + (static_cast<std::int64_t>(b) * K + k) * hw;
      std::fill(p, p + hw, 1.0);
    }
  }
  return w;
}

Tensor expand_background(const Shape& shape, const Tensor& background) {
  const Shape spatial{shape[2], shape[3]};
  const Shape batched{shape[0], shape[2], shape[3]};
  const bool shared = background.shape() == spatial;
  if (!shared && background.shape() != batched) {
    throw ConfigError("background mask " + shape_str(background.shape()) + " does not match layer shape " +
                      shape_str(spatial));
  }
  Tensor w(shape);
  const auto hw = shape[2] * shape[3];
  for (std::int64_t b = 0; b < shape[0]; ++b) {
    const double* src = background.data().data() + (shared ? 0 : b * hw);
    for (std::int64_t k = 0; k < shape[1]; ++k) {
      std::copy(src, src + hw, w.data().data() + (b * shape[1] + k) * hw);
    }
  }
  return w;
}

void check_profile(const ChannelProfile& profile, const Shape& shape, int classes) {
  if (profile.kernels != shape[1]) {
    throw ConfigError("channel profile has " + std::to_string(profile.kernels) + " kernels, layer " +
                      std::to_string(profile.layer) + " has " + std::to_string(shape[1]));
  }
  if (static_cast<int>(profile.rows.size()) < classes) {
    throw ConfigError("channel profile covers " + std::to_string(profile.rows.size()) +
                      " classes, model has " + std::to_string(classes));
  }
}

}  // namespace

// ---- config ----------------------------------------------------------------------

void TreatmentConfig::validate(const ArchSpec& spec) const {
  if (lambda_ch < 0.0 || lambda_sp < 0.0) throw ConfigError("loss weights must be nonnegative");
  if (J < 1) throw ConfigError("J must be at least 1");
  if (delta < 0.0) throw ConfigError("noise delta must be nonnegative");
  if (expansion < 0) throw ConfigError("mask expansion must be nonnegative");
  if (v_quantile < 0.0 || v_quantile > 1.0) throw ConfigError("v quantile must lie in [0, 1]");
  const auto convs = spec.conv_layers();
  for (const auto* set : {&channel_layers, &space_layers}) {
    for (auto r : *set) {
      if (std::find(convs.begin(), convs.end(), r) == convs.end()) {
        throw ConfigError("layer " + std::to_string(r) + " is not a conv layer of '" + spec.name + "'");
      }
    }
  }
}

bool TreatmentConfig::constrained() const {
  return (lambda_ch > 0.0 && !channel_layers.empty()) || (lambda_sp > 0.0 && !space_layers.empty());
}

// ---- profiles ---------------------------------------------------------------------

std::span<const std::uint8_t> ChannelProfile::indicator(int cls) const {
  if (cls < 0 || cls >= static_cast<int>(weak.size())) {
    throw InputError("class " + std::to_string(cls) + " not covered by channel profile");
  }
  return weak[static_cast<std::size_t>(cls)];
}

ChannelProfile make_channel_profile(const CorrelationMatrix& matrix, std::vector<double> v) {
  if (static_cast<int>(v.size()) != matrix.classes()) {
    throw ConfigError("need one threshold per class");
  }
  ChannelProfile p;
  p.layer = matrix.layer();
  p.kernels = matrix.kernels();
  p.v = std::move(v);
  for (int c = 0; c < matrix.classes(); ++c) {
    p.rows.push_back(matrix.row(c));
    std::vector<std::uint8_t> weak;
    for (double a : p.rows.back()) weak.push_back(a < p.v[static_cast<std::size_t>(c)] ? 1 : 0);
    p.weak.push_back(std::move(weak));
  }
  return p;
}

ChannelProfile make_channel_profile(const CorrelationMatrix& matrix, double v_quantile) {
  std::vector<double> v;
  for (int c = 0; c < matrix.classes(); ++c) v.push_back(quantile(matrix.row(c), v_quantile));
  return make_channel_profile(matrix, std::move(v));
}

// ---- losses -------------------------------------------------------------------------

std::vector<int> second_best(const Tensor& logits) {
  std::vector<int> out;
  const auto n = logits.dim(1);
  if (n < 2) throw ConfigError("second-best logit needs at least two classes");
  for (std::int64_t r = 0; r < logits.dim(0); ++r) {
    const double* z = logits.data().data() + r * n;
    const auto top = std::max_element(z, z + n) - z;
    std::int64_t best = -1;
    for (std::int64_t i = 0; i < n; ++i) {
      if (i != top && (best < 0 || z[i] > z[best])) best = i;
    }
    out.push_back(static_cast<int>(best));
  }
  return out;
}

ChannelLoss channel_loss(const Tape& tape, std::span<const int> classes, LayerId layer,
                         const ChannelProfile& profile, const ConstraintNoise& noise) {
  const Shape& shape = tape.tap(layer).shape();
  check_profile(profile, shape, static_cast<int>(tape.logits.shape()[1]));
  const GradTerm terms[] = {
      {std::vector<int>(classes.begin(), classes.end()), {channel_weights(shape, profile, classes)}},
      {second_best(tape.logits.value()), {Tensor(shape, 1.0)}},
  };
  auto out = constraint_terms(tape, layer, terms, noise);
  return {out[0][0], out[1][0]};
}

ad::Var space_loss(const Tape& tape, std::span<const int> classes, LayerId layer,
                   const Tensor& background, const ConstraintNoise& noise) {
  const Shape& shape = tape.tap(layer).shape();
  const GradTerm terms[] = {
      {std::vector<int>(classes.begin(), classes.end()), {expand_background(shape, background)}},
  };
  return constraint_terms(tape, layer, terms, noise)[0][0];
}

const Mask* BackgroundCache::get(std::int64_t sample_id, std::int64_t height, std::int64_t width) {
  auto obj = masks_->objects.find(sample_id);
  if (obj == masks_->objects.end()) return nullptr;
  const auto key = std::make_tuple(sample_id, height, width);
  auto it = cache_.find(key);
  if (it == cache_.end()) {
    it = cache_.emplace(key, background_mask(obj->second, expansion_, height, width)).first;
  }
  return &it->second;
}

BatchLoss combined_loss(const Model& model, const Tensor& images, std::span<const int> labels,
                        std::span<const std::int64_t> ids, TreatmentContext& ctx) {
  const TreatmentConfig& cfg = *ctx.config;
  if (!cfg.constrained()) return cross_entropy_loss(model, images, labels);

  std::set<LayerId> ch_layers, sp_layers;
  if (cfg.lambda_ch > 0.0) ch_layers.insert(cfg.channel_layers.begin(), cfg.channel_layers.end());
  if (cfg.lambda_sp > 0.0) sp_layers.insert(cfg.space_layers.begin(), cfg.space_layers.end());
  std::set<LayerId> layers = ch_layers;
  layers.insert(sp_layers.begin(), sp_layers.end());

  auto fwd = forward_with_taps(model, images, layers);
  auto ce = ad::softmax_cross_entropy(fwd.logits, labels);
  const auto B = fwd.tape.batch();
  const std::vector<int> classes(labels.begin(), labels.end());
  const ConstraintNoise noise{cfg.J, cfg.delta, cfg.hyper.seed, ids, cfg.double_backward};

  ad::Var l_ch, l_sp;
  auto accumulate = [](ad::Var& acc, const ad::Var& v) { acc = acc.defined() ? ad::add(acc, v) : v; };
  std::set<std::int64_t> missing;
  for (LayerId r : layers) {
    const Shape& shape = fwd.tape.activations.at(r).shape();
    GradTerm own{classes, {}};
    std::vector<GradTerm> terms;
    int ch_slot = -1, sp_slot = -1;
    if (ch_layers.count(r)) {
      auto p = ctx.profiles.find(r);
      if (p == ctx.profiles.end()) throw ConfigError("no channel profile for layer " + std::to_string(r));
      check_profile(p->second, shape, model.spec().classes);
      ch_slot = static_cast<int>(own.weights.size());
      own.weights.push_back(channel_weights(shape, p->second, classes));
    }
    if (sp_layers.count(r)) {
      Tensor bg(Shape{B, shape[2], shape[3]});
      bool any = false;
      for (std::int64_t b = 0; b < B; ++b) {
        const auto id = ids.empty() ? b : ids[static_cast<std::size_t>(b)];
        const Mask* m = ctx.backgrounds ? ctx.backgrounds->get(id, shape[2], shape[3]) : nullptr;
        if (!m) {
          missing.insert(id);
          continue;
        }
        any = true;
        std::transform(m->bits.begin(), m->bits.end(), bg.data().begin() + b * shape[2] * shape[3],
                       [](std::uint8_t v) { return static_cast<double>(v); });
      }
      if (any) {
        sp_slot = static_cast<int>(own.weights.size());
        own.weights.push_back(expand_background(shape, bg));
      }
    }
    if (own.weights.empty()) continue;
    terms.push_back(std::move(own));
    if (ch_slot >= 0) terms.push_back({second_best(fwd.logits.value()), {Tensor(shape, 1.0)}});
    auto out = constraint_terms(fwd.tape, r, terms, noise);
    if (ch_slot >= 0) {
      accumulate(l_ch, ad::add(out[0][static_cast<std::size_t>(ch_slot)], out[1][0]));
    }
    if (sp_slot >= 0) accumulate(l_sp, out[0][static_cast<std::size_t>(sp_slot)]);
  }
  ctx.missing_masks += static_cast<std::int64_t>(missing.size());

  BatchLoss bl{ce.loss, {}};
  const double inv_b = 1.0 / static_cast<double>(B);
  bl.parts["l_orig"] = ce.loss.value().item();
  bl.parts["l_ch"] = l_ch.defined() ? l_ch.value().item() * inv_b : 0.0;
  bl.parts["l_sp"] = l_sp.defined() ? l_sp.value().item() * inv_b : 0.0;
  if (l_ch.defined()) bl.total = ad::add(bl.total, ad::scale(l_ch, cfg.lambda_ch * inv_b));
  if (l_sp.defined()) bl.total = ad::add(bl.total, ad::scale(l_sp, cfg.lambda_sp * inv_b));
  return bl;
}

// ---- fine-tuning ---------------------------------------------------------------------

TreatmentOutcome treat(const Model& model, const Dataset& train, const Dataset& test,
                       const MaskSet& masks, std::span<const CorrelationMatrix> profiles,
                       const TreatmentConfig& config) {
  config.validate(model.spec());
  const auto spec_hash = model.spec().hash();
  const auto model_hash = model.content_hash();
  for (const auto& m : profiles) {
    if (m.spec_hash != spec_hash) {
      throw ConfigError("correlation profiles were computed for a different model spec (hash " +
                        std::to_string(m.spec_hash) + ", model " + std::to_string(spec_hash) + ")");
    }
    if (m.model_hash != model_hash) {
      throw ConfigError("correlation profiles were computed for different model weights");
    }
  }

  TreatmentContext ctx;
  ctx.config = &config;
  if (config.lambda_ch > 0.0) {
    for (auto r : config.channel_layers) {
      auto it = std::find_if(profiles.begin(), profiles.end(),
                             [&](const CorrelationMatrix& m) { return m.layer() == r; });
      if (it == profiles.end()) {
        throw ConfigError("channel constraint on layer " + std::to_string(r) + " needs its profile");
      }
      ctx.profiles[r] = make_channel_profile(*it, config.v_quantile);
    }
  }
  BackgroundCache backgrounds(masks, config.expansion);
  ctx.backgrounds = &backgrounds;

  TreatmentOutcome out;
  out.model = model.clone();
  out.base_acc = accuracy(model, test);
  out.base_per_class = per_class_accuracy(model, test);
  out.epochs = train_with_loss(
      out.model, train, &test, config.hyper,
      [&](const Model& m, const Tensor& x, std::span<const int> y, std::span<const std::int64_t> ids) {
        return combined_loss(m, x, y, ids, ctx);
      });
  out.treated_acc = accuracy(out.model, test);
  out.treated_per_class = per_class_accuracy(out.model, test);
  out.missing_masks = ctx.missing_masks;
  return out;
}

void write_treatment_metrics(const TreatmentOutcome& outcome, const std::filesystem::path& path) {
  CsvWriter csv(path, {"epoch", "l_orig", "l_ch", "l_sp", "test_acc"});
  auto part = [](const EpochRow& r, const char* k) {
    auto it = r.extra.find(k);
    return it == r.extra.end() ? 0.0 : it->second;
  };
  for (const auto& r : outcome.epochs) {
    csv.row(r.epoch, part(r, "l_orig"), part(r, "l_ch"), part(r, "l_sp"), r.test_acc);
  }
}

void write_per_class(const TreatmentOutcome& outcome, const std::filesystem::path& path) {
  CsvWriter csv(path, {"class", "base_acc", "treated_acc", "delta"});
  for (std::size_t c = 0; c < outcome.base_per_class.size(); ++c) {
    const double b = outcome.base_per_class[c];
    const double t = outcome.treated_per_class[c];
    csv.row(static_cast<int>(c), b, t, t - b);
  }
}

}  // namespace gradcorr
