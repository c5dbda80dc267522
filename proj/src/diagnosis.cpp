#include "gradcorr/diagnosis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "gradcorr/error.hpp"
#include "gradcorr/rng.hpp"
#include "gradcorr/csv.hpp"

namespace gradcorr {
namespace {

// Sum over spatial positions of |g| for each (row, channel): B x K.
Tensor reduce_abs_spatial(const Tensor& g) {
  const auto& s = g.shape();
  Tensor out(Shape{s[0], s[1]});
  const std::int64_t hw = s[2] * s[3];
  for (std::int64_t p = 0; p < s[0] * s[1]; ++p) {
    const double* src = g.data().data() + p * hw;
    double acc = 0.0;
    for (std::int64_t i = 0; i < hw; ++i) acc += std::abs(src[i]);
    out[static_cast<std::size_t>(p)] = acc;
  }
  return out;
}

std::uint64_t row_id(std::span<const std::int64_t> ids, std::size_t b) {
  return static_cast<std::uint64_t>(ids.empty() ? static_cast<std::int64_t>(b) : ids[b]);
}

}  // namespace

// ---- CorrelationMatrix --------------------------------------------------------

CorrelationMatrix::CorrelationMatrix(LayerId layer, int classes, int kernels)
    : layer_(layer),
      classes_(classes),
      kernels_(kernels),
      sums_(static_cast<std::size_t>(classes * kernels), 0.0),
      counts_(static_cast<std::size_t>(classes), 0),
      samples_(static_cast<std::size_t>(classes)) {}

double CorrelationMatrix::sum(int cls, int kernel) const {
  return sums_.at(static_cast<std::size_t>(cls * kernels_ + kernel));
}

std::int64_t CorrelationMatrix::count(int cls) const { return counts_.at(static_cast<std::size_t>(cls)); }

double CorrelationMatrix::mean(int cls, int kernel) const {
  const auto c = count(cls);
  return c > 0 ? sum(cls, kernel) / static_cast<double>(c) : 0.0;
}

std::vector<double> CorrelationMatrix::row(int cls) const {
  const auto b = sums_.begin() + static_cast<std::ptrdiff_t>(cls * kernels_);
  return std::vector<double>(b, b + kernels_);
}

std::vector<double> CorrelationMatrix::mean_row(int cls) const {
  std::vector<double> r(static_cast<std::size_t>(kernels_));
  for (int k = 0; k < kernels_; ++k) r[static_cast<std::size_t>(k)] = mean(cls, k);
  return r;
}

void CorrelationMatrix::add_sample(int cls, std::int64_t sample_id, std::span<const double> index) {
  if (cls < 0 || cls >= classes_) throw InputError("class " + std::to_string(cls) + " out of range");
  if (static_cast<int>(index.size()) != kernels_) {
    throw ConfigError("correlation index has " + std::to_string(index.size()) +
                      " kernels, matrix expects " + std::to_string(kernels_));
  }
  if (!exact_) throw UsageError("cannot add samples to a matrix loaded from raw sums");
  auto& bucket = samples_[static_cast<std::size_t>(cls)];
  if (!bucket.emplace(sample_id, std::vector<double>(index.begin(), index.end())).second) {
    throw UsageError("sample " + std::to_string(sample_id) + " aggregated twice");
  }
  resum(cls);
}

void CorrelationMatrix::set_raw(int cls, int kernel, double sum, std::int64_t count) {
  exact_ = false;
  samples_.assign(static_cast<std::size_t>(classes_), {});
  sums_.at(static_cast<std::size_t>(cls * kernels_ + kernel)) = sum;
  counts_.at(static_cast<std::size_t>(cls)) = count;
}

void CorrelationMatrix::merge(const CorrelationMatrix& other) {
  if (other.layer_ != layer_ || other.classes_ != classes_ || other.kernels_ != kernels_) {
    throw ConfigError("cannot merge correlation matrices of different layers or shapes");
  }
  if (exact_ && other.exact_) {
    for (int c = 0; c < classes_; ++c) {
      auto& mine = samples_[static_cast<std::size_t>(c)];
      for (const auto& [id, v] : other.samples_[static_cast<std::size_t>(c)]) {
        if (!mine.emplace(id, v).second) {
          throw UsageError("sample " + std::to_string(id) + " present in both matrices");
        }
      }
      resum(c);
    }
    return;
  }
  exact_ = false;
  samples_.assign(static_cast<std::size_t>(classes_), {});
  for (std::size_t i = 0; i < sums_.size(); ++i) sums_[i] += other.sums_[i];
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

void CorrelationMatrix::resum(int cls) {
  const auto& bucket = samples_[static_cast<std::size_t>(cls)];
  double* row = sums_.data() + static_cast<std::ptrdiff_t>(cls * kernels_);
  std::fill(row, row + kernels_, 0.0);
  for (const auto& [id, v] : bucket) {
    for (int k = 0; k < kernels_; ++k) row[k] += v[static_cast<std::size_t>(k)];
  }
  counts_[static_cast<std::size_t>(cls)] = static_cast<std::int64_t>(bucket.size());
}

// ---- indices ---------------------------------------------------------------------

double resolve_delta(const Tape& tape, LayerId layer, double delta) {
  if (delta >= 0.0) return delta;
  auto it = tape.activations.find(layer);
  if (it == tape.activations.end()) {
    throw UsageError("layer " + std::to_string(layer) + " was not recorded during forward");
  }
  return 0.1 * activation_std(it->second.value());
}

Tensor correlation_index(const Tape& tape, std::span<const int> classes, LayerId layer, int J,
                         double delta, std::uint64_t seed, std::span<const std::int64_t> sample_ids) {
  if (J < 1) throw ConfigError("J must be at least 1");
  (void)tape.tap(layer);
  if (!sample_ids.empty() && static_cast<std::int64_t>(sample_ids.size()) != tape.batch()) {
    throw UsageError("one sample id per batch row required");
  }
  delta = resolve_delta(tape, layer, delta);
  if (delta == 0.0) {
    return reduce_abs_spatial(grad_wrt_activation(tape, classes, layer).value());
  }
  Tensor acc;
  for (int j = 0; j < J; ++j) {
    NoiseSpec noise{delta, seed, {}};
    for (std::size_t b = 0; b < static_cast<std::size_t>(tape.batch()); ++b) {
      noise.row_seeds.push_back(derive_seed(
          seed, "correlation-noise",
          {row_id(sample_ids, b), static_cast<std::uint64_t>(j), static_cast<std::uint64_t>(layer)}));
    }
    const Tape noised = replay_from(tape, layer, noise);
    Tensor a = reduce_abs_spatial(grad_wrt_activation(noised, classes, layer).value());
    if (acc.empty()) {
      acc = std::move(a);
    } else {
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += a[i];
    }
  }
  for (auto& v : acc.data()) v /= J;
  return acc;
}

std::vector<CorrelationMatrix> aggregate_correlation(
    const Model& model, const Dataset& data,
    const std::map<int, std::vector<std::int64_t>>& samples, const AggregateOptions& options) {
  std::size_t total = 0;
  for (const auto& [c, ids] : samples) total += ids.size();
  if (total == 0) throw DiagnosticError("no samples selected for correlation aggregation");
  if (options.layers.empty()) throw ConfigError("no layers requested for aggregation");

  const std::set<LayerId> layer_set(options.layers.begin(), options.layers.end());
  std::vector<CorrelationMatrix> out;
  for (auto r : options.layers) {
    CorrelationMatrix m(r, model.spec().classes, static_cast<int>(model.spec().feature_shape(r)[0]));
    m.J = options.J;
    m.delta = options.delta;
    m.spec_hash = model.spec().hash();
    m.model_hash = model.content_hash();
    out.push_back(std::move(m));
  }
  int T = 0;
  for (const auto& [cls, ids] : samples) {
    T = std::max(T, static_cast<int>(ids.size()));
    for (std::size_t start = 0; start < ids.size(); start += static_cast<std::size_t>(options.batch)) {
      const std::size_t end = std::min(ids.size(), start + static_cast<std::size_t>(options.batch));
      std::span<const std::int64_t> chunk(ids.data() + start, end - start);
      const Tensor x = data.batch(chunk);
      const std::vector<int> classes(chunk.size(), cls);
      auto fwd = forward_with_taps(model, x, layer_set);
      for (auto& m : out) {
        const Tensor idx =
            correlation_index(fwd.tape, classes, m.layer(), options.J, options.delta, options.seed, chunk);
        const auto K = static_cast<std::size_t>(m.kernels());
        for (std::size_t b = 0; b < chunk.size(); ++b) {
          m.add_sample(cls, chunk[b], std::span<const double>(idx.data().data() + b * K, K));
        }
      }
    }
  }
  for (auto& m : out) m.T = T;
  return out;
}

// ---- sparsity -------------------------------------------------------------------

double top_decile_mass(std::span<const double> row) {
  const double total = std::accumulate(row.begin(), row.end(), 0.0);
  if (total <= 0.0) return 0.0;
  std::vector<double> sorted(row.begin(), row.end());
  const std::size_t top = (sorted.size() + 9) / 10;
  std::partial_sort(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(top), sorted.end(),
                    std::greater<>());
  return std::accumulate(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(top), 0.0) / total;
}

double gini(std::span<const double> row) {
  std::vector<double> sorted(row.begin(), row.end());
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());
  double total = 0.0, weighted = 0.0;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    total += sorted[i];
    weighted += static_cast<double>(i + 1) * sorted[i];
  }
  if (total <= 0.0) return 0.0;
  return 2.0 * weighted / (n * total) - (n + 1.0) / n;
}

std::vector<SparsityRow> sparsity_profile(const CorrelationMatrix& matrix) {
  if (matrix.classes() == 0 || matrix.kernels() == 0) throw DiagnosticError("empty correlation matrix");
  std::vector<SparsityRow> rows;
  for (int c = 0; c < matrix.classes(); ++c) {
    const auto r = matrix.row(c);
    SparsityRow s;
    s.zero_row = std::all_of(r.begin(), r.end(), [](double v) { return v == 0.0; });
    s.top10_mass = top_decile_mass(r);
    s.gini = gini(r);
    rows.push_back(s);
  }
  return rows;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw ConfigError("quantile of an empty row");
  q = std::clamp(q, 0.0, 1.0);
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

// ---- spatial maps and per-sample diagnosis ----------------------------------------

namespace {

// Unnormalized channel-summed |gradient| at input resolution (H x W).
Tensor response_at_input(const Model& model, const Tape& tape, int cls, LayerId layer) {
  const int classes[] = {cls};
  const Tensor g = grad_wrt_activation(tape, classes, layer).value();
  const auto& s = g.shape();
  const auto H = model.spec().input[1];
  const auto W = model.spec().input[2];
  Tensor small(Shape{s[2], s[3]});
  for (std::int64_t k = 0; k < s[1]; ++k) {
    for (std::int64_t i = 0; i < s[2] * s[3]; ++i) {
      small[static_cast<std::size_t>(i)] += std::abs(g[static_cast<std::size_t>(k * s[2] * s[3] + i)]);
    }
  }
  Tensor out(Shape{H, W});
  for (std::int64_t y = 0; y < H; ++y) {
    for (std::int64_t x = 0; x < W; ++x) {
      out[static_cast<std::size_t>(y * W + x)] =
          small[static_cast<std::size_t>((y * s[2] / H) * s[3] + x * s[3] / W)];
    }
  }
  return out;
}

}  // namespace

Tensor spatial_response_map(const Model& model, const Tensor& image, LayerId layer, int cls) {
  auto fwd = forward_with_taps(model, image, {layer});
  if (cls < 0) cls = argmax_rows(fwd.logits.value())[0];
  Tensor map = response_at_input(model, fwd.tape, cls, layer);
  const double peak = map.max_abs();
  if (peak > 0.0) {
    for (auto& v : map.data()) v /= peak;
  }
  return map;
}

std::size_t DiagnosisReport::violation_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.violations.size();
  return n;
}

DiagnosisReport diagnose_sample(const Model& model, const Tensor& image, int gt_label,
                                std::span<const CorrelationMatrix> matrices,
                                const DiagnoseOptions& options, const Mask* object_mask,
                                std::int64_t sample_id) {
  if (matrices.empty()) throw ConfigError("diagnosis needs at least one correlation matrix");
  std::set<LayerId> layers;
  for (const auto& m : matrices) layers.insert(m.layer());
  const auto convs = model.spec().conv_layers();
  for (auto r : layers) {
    if (std::find(convs.begin(), convs.end(), r) == convs.end()) {
      throw ConfigError("correlation matrix for layer " + std::to_string(r) +
                        " does not match any conv layer of the model");
    }
  }
  auto fwd = forward_with_taps(model, image, layers);
  DiagnosisReport report;
  report.sample_id = sample_id;
  report.ground_truth = gt_label;
  report.predicted = argmax_rows(fwd.logits.value())[0];
  const int classes[] = {report.predicted};
  const std::int64_t ids[] = {sample_id < 0 ? 0 : sample_id};

  for (const auto& m : matrices) {
    LayerDiagnosis ld;
    ld.layer = m.layer();
    const Tensor idx = correlation_index(fwd.tape, classes, m.layer(), options.J, options.delta,
                                         options.seed, ids);
    ld.index.assign(idx.data().begin(), idx.data().end());
    if (static_cast<int>(ld.index.size()) != m.kernels()) {
      throw ConfigError("correlation matrix for layer " + std::to_string(m.layer()) +
                        " has the wrong kernel count");
    }
    const auto profile = m.row(report.predicted);
    const double v = quantile(profile, options.v_quantile);
    std::vector<int> order(ld.index.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return ld.index[static_cast<std::size_t>(a)] > ld.index[static_cast<std::size_t>(b)];
    });
    const std::size_t top = (order.size() + 9) / 10;
    for (std::size_t i = 0; i < top; ++i) {
      const int k = order[i];
      if (ld.index[static_cast<std::size_t>(k)] > 0.0 && profile[static_cast<std::size_t>(k)] < v) {
        ld.violations.push_back(k);
      }
    }
    std::sort(ld.violations.begin(), ld.violations.end());
    report.layers.push_back(std::move(ld));
  }

  if (object_mask) {
    report.has_mask = true;
    const LayerId deepest = *layers.rbegin();
    const Tensor map = response_at_input(model, fwd.tape, report.predicted, deepest);
    const Mask obj = rescale_mask(*object_mask, map.dim(0), map.dim(1));
    double total = 0.0, bg = 0.0;
    for (std::size_t i = 0; i < map.size(); ++i) {
      total += map[i];
      if (!obj.bits[i]) bg += map[i];
    }
    report.background_fraction = total > 0.0 ? bg / total : 0.0;
  }
  return report;
}

// ---- export ------------------------------------------------------------------------

void export_heatmap(const CorrelationMatrix& matrix, const std::filesystem::path& pgm_path) {
  GrayImage img{matrix.classes(), matrix.kernels(), {}};
  for (int c = 0; c < matrix.classes(); ++c) {
    const auto r = matrix.row(c);
    const double peak = *std::max_element(r.begin(), r.end());
    for (double v : r) {
      img.pixels.push_back(peak > 0.0 ? static_cast<std::uint8_t>(std::lround(255.0 * v / peak)) : 0);
    }
  }
  write_pgm(img, pgm_path);
  auto csv_path = pgm_path;
  csv_path.replace_extension(".csv");
  const CorrelationMatrix one[] = {matrix};
  write_correlation_csv(one, csv_path);
}

void write_correlation_csv(std::span<const CorrelationMatrix> matrices,
                           const std::filesystem::path& path) {
  CsvWriter csv(path, {"layer", "class", "kernel", "sum", "count"});
  for (const auto& m : matrices) {
    for (int c = 0; c < m.classes(); ++c) {
      for (int k = 0; k < m.kernels(); ++k) {
        csv.row(m.layer(), c, k, m.sum(c, k), m.count(c));
      }
    }
  }
}

std::vector<CorrelationMatrix> read_correlation_csv(const std::filesystem::path& path) {
  const auto table = read_csv(path);
  if (table.header != std::vector<std::string>{"layer", "class", "kernel", "sum", "count"}) {
    throw FormatError(path.string() + ": unexpected correlation CSV header");
  }
  struct Entry { int cls, kernel; double sum; std::int64_t count; };
  std::map<LayerId, std::vector<Entry>> by_layer;
  for (const auto& r : table.rows) {
    if (r.size() != 5) throw FormatError(path.string() + ": malformed row");
    try {
      by_layer[std::stoi(r[0])].push_back(
          {std::stoi(r[1]), std::stoi(r[2]), std::stod(r[3]), std::stoll(r[4])});
    } catch (const std::logic_error&) {
      throw FormatError(path.string() + ": non-numeric field");
    }
  }
  std::vector<CorrelationMatrix> out;
  for (const auto& [layer, entries] : by_layer) {
    int classes = 0, kernels = 0;
    for (const auto& e : entries) {
      classes = std::max(classes, e.cls + 1);
      kernels = std::max(kernels, e.kernel + 1);
    }
    CorrelationMatrix m(layer, classes, kernels);
    for (const auto& e : entries) m.set_raw(e.cls, e.kernel, e.sum, e.count);
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace gradcorr
