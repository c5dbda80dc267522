#include "gradcorr/probe.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "gradcorr/csv.hpp"
#include "gradcorr/error.hpp"
#include "gradcorr/rng.hpp"

namespace gradcorr {

Tensor fgsm(const Model& model, const Tensor& images, std::span<const int> labels, double eps) {
  if (eps < 0.0) throw ConfigError("fgsm eps must be nonnegative");
  ad::EnableGradGuard grad_on;
  const ad::Var x(images, true);
  auto fwd = forward_from(model, x);
  auto ce = ad::softmax_cross_entropy(fwd.logits, labels);
  const ad::Var wrt[] = {x};
  const Tensor g = ad::grad(ce.loss, wrt)[0].value();
  Tensor out = images;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double s = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
    out[i] = std::clamp(out[i] + eps * s, 0.0, 1.0);
  }
  return out;
}

LayerPolicy LayerPolicy::parse(const std::string& text) {
  if (text == "random") return {};
  if (text.rfind("fixed:", 0) == 0) {
    try {
      std::size_t used = 0;
      const int r = std::stoi(text.substr(6), &used);
      if (used == text.size() - 6 && r >= 1) return {false, r};
    } catch (const std::logic_error&) {
    }
  }
  throw ConfigError("layer policy must be 'random' or 'fixed:R', got '" + text + "'");
}

std::string LayerPolicy::to_string() const {
  return random ? "random" : "fixed:" + std::to_string(fixed);
}

std::vector<double> default_delta_grid() { return {0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3}; }

bool StabilityCurve::persistent_at(double delta) const {
  for (std::size_t i = 0; i < deltas.size(); ++i) {
    if (deltas[i] == delta) return retain[i] == 1.0;
  }
  throw UsageError("delta " + std::to_string(delta) + " is not on the curve's grid");
}

std::vector<StabilityCurve> noise_stability(const Model& model, const Tensor& images,
                                            std::span<const int> true_labels,
                                            std::span<const std::int64_t> sample_ids,
                                            const ProbeOptions& options) {
  if (options.trials < 1) throw ConfigError("need at least one trial per noise level");
  if (options.deltas.empty()) throw ConfigError("empty noise grid");
  for (std::size_t i = 0; i < options.deltas.size(); ++i) {
    if (options.deltas[i] < 0.0 || (i > 0 && options.deltas[i] <= options.deltas[i - 1])) {
      throw ConfigError("noise grid must be nonnegative and strictly increasing");
    }
  }
  const auto B = images.dim(0);
  if (static_cast<std::int64_t>(true_labels.size()) != B ||
      static_cast<std::int64_t>(sample_ids.size()) != B) {
    throw UsageError("one label and one sample id per image required");
  }
  const auto convs = model.spec().conv_layers();
  if (!options.policy.random &&
      std::find(convs.begin(), convs.end(), options.policy.fixed) == convs.end()) {
    throw ConfigError("fixed probe layer " + std::to_string(options.policy.fixed) +
                      " is not a conv layer");
  }

  ad::NoGradGuard no_grad;
  const auto initial = argmax_rows(predict_logits(model, images));
  std::map<LayerId, double> scale;
  for (auto r : convs) scale[r] = 1.0;
  if (options.relative) {
    const std::set<LayerId> all(convs.begin(), convs.end());
    const auto fwd = forward_with_taps(model, images, all);
    for (auto r : convs) scale[r] = activation_std(fwd.tape.activations.at(r).value());
  }

  const auto D = options.deltas.size();
  const auto T = static_cast<std::size_t>(options.trials);
  std::vector<StabilityCurve> curves(static_cast<std::size_t>(B));
  std::vector<std::vector<int>> retained(static_cast<std::size_t>(B), std::vector<int>(D, 0));
  std::vector<std::vector<int>> correct(static_cast<std::size_t>(B), std::vector<int>(D, 0));

  struct Row { std::int64_t b; std::uint64_t noise_seed; };
  for (std::size_t di = 0; di < D; ++di) {
    const double delta = options.deltas[di];
    if (delta == 0.0) {
      for (std::int64_t b = 0; b < B; ++b) {
        retained[static_cast<std::size_t>(b)][di] = options.trials;
        correct[static_cast<std::size_t>(b)][di] =
            initial[static_cast<std::size_t>(b)] == true_labels[static_cast<std::size_t>(b)] ? options.trials : 0;
      }
      continue;
    }
    std::map<LayerId, std::vector<Row>> groups;
    for (std::int64_t b = 0; b < B; ++b) {
      const auto id = static_cast<std::uint64_t>(sample_ids[static_cast<std::size_t>(b)]);
      for (std::size_t t = 0; t < T; ++t) {
        LayerId layer = options.policy.fixed;
        if (options.policy.random) {
          Rng pick(derive_seed(options.seed, "probe-layer", {id, di, t}));
          layer = convs[pick.below(convs.size())];
        }
        groups[layer].push_back({b, derive_seed(options.seed, "probe-noise", {id, di, t})});
      }
    }
    constexpr std::size_t kChunk = 256;
    for (const auto& [layer, rows] : groups) {
      for (std::size_t start = 0; start < rows.size(); start += kChunk) {
        const std::size_t end = std::min(rows.size(), start + kChunk);
        std::vector<std::int64_t> src;
        NoiseSpec noise{delta * scale[layer], options.seed, {}};
        for (std::size_t i = start; i < end; ++i) {
          src.push_back(rows[i].b);
          noise.row_seeds.push_back(rows[i].noise_seed);
        }
        std::vector<Tensor> parts;
        for (auto b : src) parts.push_back(images.slice_rows(b, b + 1));
        const Tensor batch = stack_rows(parts, true);
        const auto pred = argmax_rows(forward_with_taps(model, batch, {}, {{layer, noise}}).logits.value());
        for (std::size_t i = 0; i < src.size(); ++i) {
          const auto b = static_cast<std::size_t>(src[i]);
          if (pred[i] == initial[b]) ++retained[b][di];
          if (pred[i] == true_labels[b]) ++correct[b][di];
        }
      }
    }
  }

  for (std::size_t b = 0; b < curves.size(); ++b) {
    auto& c = curves[b];
    c.deltas = options.deltas;
    c.trials = options.trials;
    c.initial_label = initial[b];
    c.true_label = true_labels[b];
    for (std::size_t di = 0; di < D; ++di) {
      c.retain.push_back(static_cast<double>(retained[b][di]) / static_cast<double>(T));
      c.true_frac.push_back(static_cast<double>(correct[b][di]) / static_cast<double>(T));
    }
  }
  return curves;
}

double isolation_score(const StabilityCurve& curve) {
  double sum = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < curve.deltas.size(); ++i) {
    if (curve.deltas[i] > 0.0) {
      sum += curve.retain[i];
      ++n;
    }
  }
  if (n == 0) throw ConfigError("isolation score needs at least one positive noise level");
  return 1.0 - sum / n;
}

const char* verdict_name(Verdict v) {
  switch (v) {
    case Verdict::Normal: return "normal";
    case Verdict::Adversarial: return "adversarial";
    case Verdict::Undecided: return "undecided";
  }
  return "?";
}

Verdict classify(double score, double threshold) {
  if (score > threshold) return Verdict::Adversarial;
  if (score < threshold) return Verdict::Normal;
  return Verdict::Undecided;
}

ProbeReport make_report(std::vector<ProbeEntry> entries, double threshold) {
  ProbeReport r;
  r.threshold = threshold;
  for (auto& e : entries) {
    e.score = isolation_score(e.curve);
    e.verdict = classify(e.score, threshold);
  }
  r.entries = std::move(entries);
  return r;
}

double ProbeReport::balanced_accuracy() const {
  double recall[2] = {0.0, 0.0};
  int count[2] = {0, 0};
  for (const auto& e : entries) {
    const int k = e.is_adversarial ? 1 : 0;
    ++count[k];
    const Verdict want = e.is_adversarial ? Verdict::Adversarial : Verdict::Normal;
    if (e.verdict == want) recall[k] += 1.0;
  }
  double total = 0.0;
  int pops = 0;
  for (int k = 0; k < 2; ++k) {
    if (count[k] > 0) {
      total += recall[k] / count[k];
      ++pops;
    }
  }
  return pops ? total / pops : 0.0;
}

double ProbeReport::mean_score(bool adversarial) const {
  double s = 0.0;
  int n = 0;
  for (const auto& e : entries) {
    if (e.is_adversarial == adversarial) {
      s += e.score;
      ++n;
    }
  }
  return n ? s / n : 0.0;
}

std::vector<double> ProbeReport::mean_retain(bool adversarial) const {
  std::vector<double> out;
  int n = 0;
  for (const auto& e : entries) {
    if (e.is_adversarial != adversarial) continue;
    if (out.empty()) out.assign(e.curve.retain.size(), 0.0);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += e.curve.retain[i];
    ++n;
  }
  for (auto& v : out) v /= n;
  return out;
}

double ProbeReport::persistent_share(bool adversarial, double delta) const {
  int hit = 0, n = 0;
  for (const auto& e : entries) {
    if (e.is_adversarial != adversarial) continue;
    ++n;
    if (e.curve.persistent_at(delta)) ++hit;
  }
  return n ? static_cast<double>(hit) / n : 0.0;
}

namespace {

double flip_share(const Model& model, const Tensor& adv, std::span<const int> labels) {
  const auto pred = argmax_rows(predict_logits(model, adv));
  std::size_t flips = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) flips += pred[i] != labels[i] ? 1 : 0;
  return pred.empty() ? 0.0 : static_cast<double>(flips) / static_cast<double>(pred.size());
}

}  // namespace

double calibrate_eps(const Model& model, const Tensor& images, std::span<const int> labels,
                     double step, double max, double target, double* flip_rate) {
  if (step <= 0.0 || max < step) throw ConfigError("eps grid needs 0 < step <= max");
  for (int k = 1; k * step <= max + 1e-12; ++k) {
    const double eps = k * step;
    const double share = flip_share(model, fgsm(model, images, labels, eps), labels);
    if (share >= target) {
      if (flip_rate) *flip_rate = share;
      return eps;
    }
  }
  throw DiagnosticError("no eps up to " + std::to_string(max) + " flips " +
                        std::to_string(target * 100.0) + "% of samples");
}

ProbeReport run_probe_experiment(const Model& model, const Dataset& test, const ProbeExperiment& exp) {
  if (exp.count < 1) throw ConfigError("probe needs at least one sample per population");
  const auto pred = argmax_rows(predict_logits(model, test.images));
  std::vector<std::int64_t> correct;
  for (std::int64_t i = 0; i < test.size(); ++i) {
    if (pred[static_cast<std::size_t>(i)] == test.labels[static_cast<std::size_t>(i)]) correct.push_back(i);
  }
  if (correct.empty()) throw DiagnosticError("model classifies no test sample correctly");
  const Tensor xc = test.batch(correct);
  const auto yc = test.batch_labels(correct);

  ProbeReport report;
  double eps = exp.eps;
  if (eps < 0.0) {
    eps = calibrate_eps(model, xc, yc, exp.eps_step, exp.eps_max, exp.flip_target, &report.flip_rate);
  }
  const Tensor adv_all = fgsm(model, xc, yc, eps);
  const auto adv_pred = argmax_rows(predict_logits(model, adv_all));
  if (exp.eps >= 0.0) report.flip_rate = flip_share(model, adv_all, yc);

  std::vector<std::int64_t> adv_ids;
  std::vector<Tensor> adv_rows;
  std::vector<int> adv_labels;
  for (std::size_t i = 0; i < correct.size() && static_cast<int>(adv_ids.size()) < exp.count; ++i) {
    if (adv_pred[i] == yc[i]) continue;
    adv_ids.push_back(correct[i]);
    adv_rows.push_back(adv_all.slice_rows(static_cast<std::int64_t>(i), static_cast<std::int64_t>(i) + 1));
    adv_labels.push_back(yc[i]);
  }

  const int per_class = (exp.count + test.num_classes - 1) / test.num_classes;
  const auto sel = select_high_confidence(model, test, exp.confidence, per_class);
  std::vector<std::int64_t> normal_ids;
  for (const auto& [cls, ids] : sel.per_class) normal_ids.insert(normal_ids.end(), ids.begin(), ids.end());
  std::sort(normal_ids.begin(), normal_ids.end());
  if (static_cast<int>(normal_ids.size()) > exp.count) normal_ids.resize(static_cast<std::size_t>(exp.count));
  if (normal_ids.empty() || adv_ids.empty()) throw DiagnosticError("probe population is empty");

  const auto normal_curves = noise_stability(model, test.batch(normal_ids), test.batch_labels(normal_ids),
                                             normal_ids, exp.options);
  const auto adv_curves = noise_stability(model, stack_rows(adv_rows, true), adv_labels, adv_ids, exp.options);
  std::vector<ProbeEntry> entries;
  for (std::size_t i = 0; i < normal_ids.size(); ++i) entries.push_back({normal_ids[i], false, normal_curves[i]});
  for (std::size_t i = 0; i < adv_ids.size(); ++i) entries.push_back({adv_ids[i], true, adv_curves[i]});
  const double flip = report.flip_rate;
  report = make_report(std::move(entries), exp.threshold);
  report.eps = eps;
  report.flip_rate = flip;
  return report;
}

void write_curves_csv(const ProbeReport& report, const std::filesystem::path& path) {
  CsvWriter csv(path, {"sample_id", "is_adv", "delta", "retain_frac", "true_frac"});
  for (const auto& e : report.entries) {
    for (std::size_t i = 0; i < e.curve.deltas.size(); ++i) {
      csv.row(e.sample_id, e.is_adversarial ? 1 : 0, e.curve.deltas[i], e.curve.retain[i],
              e.curve.true_frac[i]);
    }
  }
}

}  // namespace gradcorr
