#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "gradcorr/data.hpp"
#include "gradcorr/model.hpp"

namespace gradcorr {

/// Category x kernel grid of summed correlation indices for one layer.
///
/// Per-sample contributions are kept when available, and sums are always
/// re-derived from them in ascending sample-id order, so aggregating a
/// sample set in any partition and merge order gives a bit-identical grid.
class CorrelationMatrix {
 public:
  CorrelationMatrix() = default;
  CorrelationMatrix(LayerId layer, int classes, int kernels);

  LayerId layer() const noexcept { return layer_; }
  int classes() const noexcept { return classes_; }
  int kernels() const noexcept { return kernels_; }

  double sum(int cls, int kernel) const;
  std::int64_t count(int cls) const;
  double mean(int cls, int kernel) const;
  std::vector<double> row(int cls) const;
  std::vector<double> mean_row(int cls) const;

  void add_sample(int cls, std::int64_t sample_id, std::span<const double> index);
  /// Sets a raw sum/count directly (CSV loading); drops per-sample detail.
  void set_raw(int cls, int kernel, double sum, std::int64_t count);
  /// Entrywise union. Throws on layer/shape mismatch or duplicate samples.
  void merge(const CorrelationMatrix& other);

  bool has_contributions() const noexcept { return exact_; }

  // Provenance, checked by the treatment stage.
  int J = 1;
  double delta = 0.0;
  int T = 0;
  double threshold = 0.0;
  std::uint64_t spec_hash = 0;
  std::uint64_t model_hash = 0;

 private:
  void resum(int cls);

  LayerId layer_ = 0;
  int classes_ = 0;
  int kernels_ = 0;
  bool exact_ = true;
  std::vector<double> sums_;
  std::vector<std::int64_t> counts_;
  std::vector<std::map<std::int64_t, std::vector<double>>> samples_;
};

/// Resolves a noise magnitude: negative means 0.1 x (std of the layer's
/// activations over the tape's batch).
double resolve_delta(const Tape& tape, LayerId layer, double delta);

/// Per-sample correlation index of each kernel of `layer` with each row's
/// class: (1/J) sum_j sum_{h,w} |d logit / d(m + sigma_j)|. Returns B x K.
/// With delta == 0 this is the single-pass value (no averaging).
/// Noise for row b, trial j draws from (seed, sample_ids[b], j, layer).
Tensor correlation_index(const Tape& tape, std::span<const int> classes, LayerId layer, int J,
                         double delta, std::uint64_t seed,
                         std::span<const std::int64_t> sample_ids = {});

struct AggregateOptions {
  std::vector<LayerId> layers;
  int J = 10;
  double delta = -1.0;  // negative: 0.1 x activation std
  std::uint64_t seed = 1;
  int batch = 25;
};

/// Sums correlation indices of each class's selected samples into one
/// matrix per layer.
std::vector<CorrelationMatrix> aggregate_correlation(const Model& model, const Dataset& data,
                                                     const std::map<int, std::vector<std::int64_t>>& samples,
                                                     const AggregateOptions& options);

struct SparsityRow {
  double top10_mass = 0.0;
  double gini = 0.0;
  bool zero_row = false;
};

/// Share of each row held by its ceil(K/10) largest entries, and the Gini
/// coefficient of the row.
std::vector<SparsityRow> sparsity_profile(const CorrelationMatrix& matrix);
double top_decile_mass(std::span<const double> row);
double gini(std::span<const double> row);

/// Linear-interpolated q-quantile of a row.
double quantile(std::vector<double> values, double q);

/// Summed |d logit / d m| over channels of `layer`, nearest-neighbour
/// upsampled to the input size and scaled to max 1. `cls < 0` uses the
/// predicted class. Returns H x W.
Tensor spatial_response_map(const Model& model, const Tensor& image, LayerId layer, int cls = -1);

struct LayerDiagnosis {
  LayerId layer = 0;
  std::vector<double> index;       // per-kernel correlation with the predicted class
  std::vector<int> violations;     // top-decile kernels whose class profile is below v
};

struct DiagnosisReport {
  std::int64_t sample_id = -1;
  int predicted = -1;
  int ground_truth = -1;
  std::vector<LayerDiagnosis> layers;
  double background_fraction = 0.0;  // response mass on background, in [0, 1]
  bool has_mask = false;

  std::size_t violation_count() const;
};

struct DiagnoseOptions {
  double v_quantile = 0.5;
  int J = 1;
  double delta = 0.0;
  std::uint64_t seed = 1;
};

DiagnosisReport diagnose_sample(const Model& model, const Tensor& image, int gt_label,
                                std::span<const CorrelationMatrix> matrices,
                                const DiagnoseOptions& options, const Mask* object_mask = nullptr,
                                std::int64_t sample_id = -1);

/// N x K grayscale PGM, each row scaled by its max; writes `<stem>.csv`
/// next to it with the raw sums.
void export_heatmap(const CorrelationMatrix& matrix, const std::filesystem::path& pgm_path);

/// CSV with header `layer,class,kernel,sum,count`.
void write_correlation_csv(std::span<const CorrelationMatrix> matrices, const std::filesystem::path& path);
std::vector<CorrelationMatrix> read_correlation_csv(const std::filesystem::path& path);

}  // namespace gradcorr
