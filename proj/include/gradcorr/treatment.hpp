#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <utility>
#include <vector>

#include "gradcorr/data.hpp"
#include "gradcorr/diagnosis.hpp"
#include "gradcorr/model.hpp"

namespace gradcorr {

struct TreatmentConfig {
  std::vector<LayerId> channel_layers;
  std::vector<LayerId> space_layers;
  double v_quantile = 0.5;
  double lambda_ch = 1.0;
  double lambda_sp = 1.0;
  int J = 1;
  double delta = 0.0;
  int expansion = 3;
  TrainHyper hyper;
  /// false: first-order surrogate instead of differentiating the inner
  /// gradient (approximate; see channel_loss).
  bool double_backward = true;

  /// Throws ConfigError on negative weights, bad J/delta or layers that are
  /// not conv layers of `spec`.
  void validate(const ArchSpec& spec) const;
  bool constrained() const;
};

/// Frozen class profile of one layer: which kernels are weakly correlated
/// with each class (row entry below the row's v).
struct ChannelProfile {
  LayerId layer = 0;
  int kernels = 0;
  std::vector<std::vector<double>> rows;  // class x kernel
  std::vector<double> v;                  // per class
  std::vector<std::vector<std::uint8_t>> weak;  // 1 where rows[n][k] < v[n]

  /// K-wide indicator row for class n.
  std::span<const std::uint8_t> indicator(int cls) const;
};

ChannelProfile make_channel_profile(const CorrelationMatrix& matrix, double v_quantile);
/// Explicit thresholds, one per class.
ChannelProfile make_channel_profile(const CorrelationMatrix& matrix, std::vector<double> v);

struct ConstraintNoise {
  int J = 1;
  double delta = 0.0;
  std::uint64_t seed = 1;
  std::span<const std::int64_t> sample_ids;  // noise stream per row; defaults to row index
  bool double_backward = true;
};

struct ChannelLoss {
  ad::Var term1;
  ad::Var term2;
  ad::Var total() const { return ad::add(term1, term2); }
};

/// Index of the second-largest logit per row.
std::vector<int> second_best(const Tensor& logits);

/// Channel-wise constraint summed over the batch rows:
/// term1 = sum_b sum_k weak[n_b][k] sum_j sum_hw |d y_{n_b} / d(m_k + sigma_j)|,
/// term2 = sum_b sum_k sum_j sum_hw |d y_{s_b} / d(m_k + sigma_j)|,
/// where s_b is the second-largest logit of the clean forward.
ChannelLoss channel_loss(const Tape& tape, std::span<const int> classes, LayerId layer,
                         const ChannelProfile& profile, const ConstraintNoise& noise = {});

/// Space-wise constraint summed over the batch rows:
/// sum_b sum_k sum_j sum_hw bg_b * |d y_{n_b} / d(m_k + sigma_j)|.
/// `background` is H x W (shared) or B x H x W at the layer's resolution.
ad::Var space_loss(const Tape& tape, std::span<const int> classes, LayerId layer,
                   const Tensor& background, const ConstraintNoise& noise = {});

/// Per-sample background masks at each feature resolution, built on demand.
class BackgroundCache {
 public:
  BackgroundCache(const MaskSet& masks, int expansion) : masks_(&masks), expansion_(expansion) {}
  /// nullptr when the sample has no mask.
  const Mask* get(std::int64_t sample_id, std::int64_t height, std::int64_t width);

 private:
  const MaskSet* masks_;
  int expansion_;
  std::map<std::tuple<std::int64_t, std::int64_t, std::int64_t>, Mask> cache_;
};

struct TreatmentContext {
  const TreatmentConfig* config = nullptr;
  std::map<LayerId, ChannelProfile> profiles;
  BackgroundCache* backgrounds = nullptr;
  std::int64_t missing_masks = 0;  // rows of space-constrained batches without a mask
};

/// L_orig + (lambda_sp sum_r L_sp + lambda_ch sum_r L_ch) / B. With zero
/// weights or empty layer sets this is exactly cross_entropy_loss.
BatchLoss combined_loss(const Model& model, const Tensor& images, std::span<const int> labels,
                        std::span<const std::int64_t> ids, TreatmentContext& ctx);

struct TreatmentOutcome {
  Model model;
  std::vector<EpochRow> epochs;  // extra: l_orig, l_ch, l_sp
  double base_acc = 0.0;
  double treated_acc = 0.0;
  std::vector<double> base_per_class;
  std::vector<double> treated_per_class;
  std::int64_t missing_masks = 0;
};

/// Fine-tunes a copy of `model` with the combined loss and the baseline
/// optimizer settings. `profiles` must come from this very model.
TreatmentOutcome treat(const Model& model, const Dataset& train, const Dataset& test,
                       const MaskSet& masks, std::span<const CorrelationMatrix> profiles,
                       const TreatmentConfig& config);

/// `epoch,l_orig,l_ch,l_sp,test_acc`
void write_treatment_metrics(const TreatmentOutcome& outcome, const std::filesystem::path& path);
/// `class,base_acc,treated_acc,delta`
void write_per_class(const TreatmentOutcome& outcome, const std::filesystem::path& path);

}  // namespace gradcorr
