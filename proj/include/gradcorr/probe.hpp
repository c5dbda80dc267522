#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gradcorr/data.hpp"
#include "gradcorr/model.hpp"

namespace gradcorr {

/// x' = clip(x + eps * sign(dCE/dx), 0, 1), with sign(0) = 0. Works on a
/// whole batch; each row is attacked against its own label.
Tensor fgsm(const Model& model, const Tensor& images, std::span<const int> labels, double eps);

/// Where noise goes in each trial: a uniformly drawn conv layer, or one
/// fixed layer.
struct LayerPolicy {
  bool random = true;
  LayerId fixed = 0;

  /// "random" or "fixed:R".
  static LayerPolicy parse(const std::string& text);
  std::string to_string() const;
};

std::vector<double> default_delta_grid();  // 0, 0.05, ..., 0.3

struct ProbeOptions {
  std::vector<double> deltas = default_delta_grid();
  int trials = 10;
  LayerPolicy policy;
  bool relative = false;  // scale delta by the chosen layer's activation std
  std::uint64_t seed = 1;
};

struct StabilityCurve {
  std::vector<double> deltas;
  std::vector<double> retain;      // share of trials keeping the clean prediction
  std::vector<double> true_frac;   // share of trials predicting the true label
  int trials = 0;
  int initial_label = -1;
  int true_label = -1;

  /// Retain fraction at `delta` is exactly 1 (every trial kept the label).
  bool persistent_at(double delta) const;
};

/// One curve per image. Row b's noise and layer choices are drawn from
/// (seed, sample_ids[b], delta index, trial), so curves do not depend on
/// batch composition.
std::vector<StabilityCurve> noise_stability(const Model& model, const Tensor& images,
                                            std::span<const int> true_labels,
                                            std::span<const std::int64_t> sample_ids,
                                            const ProbeOptions& options);

/// 1 - mean retain fraction over the delta > 0 grid points.
double isolation_score(const StabilityCurve& curve);

enum class Verdict { Normal, Adversarial, Undecided };
const char* verdict_name(Verdict v);
/// Above `threshold` is adversarial, below is normal, equal is undecided.
Verdict classify(double score, double threshold = 0.5);

struct ProbeEntry {
  std::int64_t sample_id = -1;
  bool is_adversarial = false;
  StabilityCurve curve;
  double score = 0.0;
  Verdict verdict = Verdict::Undecided;
};

struct ProbeReport {
  std::vector<ProbeEntry> entries;
  double threshold = 0.5;
  double eps = 0.0;
  double flip_rate = 0.0;

  /// Mean of per-population recall; undecided counts as wrong.
  double balanced_accuracy() const;
  double mean_score(bool adversarial) const;
  /// Mean over normal samples of the retain fraction at each delta.
  std::vector<double> mean_retain(bool adversarial) const;
  /// Share of the population whose label survived every trial at `delta`.
  double persistent_share(bool adversarial, double delta) const;
};

ProbeReport make_report(std::vector<ProbeEntry> entries, double threshold = 0.5);

struct ProbeExperiment {
  int count = 100;           // samples per population
  double confidence = 0.9;   // normal samples: correct with softmax above this
  double eps = -1.0;         // negative: calibrate
  double eps_step = 0.01;
  double eps_max = 0.5;
  double flip_target = 0.6;
  ProbeOptions options;
  double threshold = 0.5;
};

/// Smallest eps on the grid step, 2 step, ... <= eps_max whose FGSM flips at
/// least `target` of the given (correctly classified) images. Throws
/// DiagnosticError if none does.
double calibrate_eps(const Model& model, const Tensor& images, std::span<const int> labels,
                     double step, double max, double target, double* flip_rate = nullptr);

/// Normal population: high-confidence correct test samples. Adversarial
/// population: FGSM versions of correct test samples that changed label.
/// Both are taken in ascending sample-id order.
ProbeReport run_probe_experiment(const Model& model, const Dataset& test, const ProbeExperiment& exp);

/// `sample_id,is_adv,delta,retain_frac,true_frac`
void write_curves_csv(const ProbeReport& report, const std::filesystem::path& path);

}  // namespace gradcorr
