#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "gradcorr/autodiff.hpp"
#include "gradcorr/data.hpp"
#include "gradcorr/tensor.hpp"

namespace gradcorr {

/// Conv layers are numbered 1, 2, ... from the input side.
using LayerId = int;

enum class LayerKind { Conv, MaxPool, AvgPool, Flatten, Linear, Add };

struct LayerSpec {
  LayerKind kind = LayerKind::Conv;
  int out = 0;        // channels (conv) or features (linear)
  int kernel = 0;     // conv / pool window
  int stride = 1;
  int padding = 0;
  bool relu = false;
  int skip_from = -1; // Add: index of the layer whose output joins; -1 = network input

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct ArchSpec {
  std::string name;
  int classes = 10;
  Shape input;  // C x H x W
  std::vector<LayerSpec> layers;

  /// Shape inference over the layer list. Throws SpecError naming the first
  /// layer that does not compose.
  void validate() const;
  /// Output shape (without batch) of every layer.
  std::vector<Shape> layer_shapes() const;

  std::vector<LayerId> conv_layers() const;
  /// Index into `layers` of conv layer `id`.
  std::size_t layer_index(LayerId id) const;
  /// Channels x H x W of conv layer `id`'s feature maps.
  Shape feature_shape(LayerId id) const;

  std::string to_text() const;
  static ArchSpec from_text(const std::string& text);
  std::uint64_t hash() const;

  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

/// Two conv layers; for MNIST-sized inputs.
ArchSpec lenet5_spec(int in_channels = 1, std::int64_t side = 28, int classes = 10);
/// Six conv layers, two linear; for CIFAR-sized inputs.
ArchSpec mini_vgg_spec(int in_channels = 3, std::int64_t side = 32, int classes = 10);
/// Eight conv layers with three residual joins.
ArchSpec mini_resnet_spec(int in_channels = 3, std::int64_t side = 32, int classes = 10);
/// "lenet5", "mini-vgg" or "mini-resnet".
ArchSpec arch_by_name(const std::string& name, int in_channels, std::int64_t side, int classes);

class Model {
 public:
  Model() = default;
  Model(ArchSpec spec, std::uint64_t seed, std::vector<ad::Var> params);

  const ArchSpec& spec() const noexcept { return spec_; }
  std::uint64_t init_seed() const noexcept { return seed_; }

  std::span<const ad::Var> params() const noexcept { return params_; }
  std::span<ad::Var> params() noexcept { return params_; }
  /// Weight and bias of layer index `i` (conv / linear only).
  const ad::Var& weight(std::size_t layer) const;
  const ad::Var& bias(std::size_t layer) const;

  /// Deep copy with fresh leaf variables.
  Model clone() const;
  /// FNV-1a over spec text and parameter bytes.
  std::uint64_t content_hash() const;

 private:
  ArchSpec spec_;
  std::uint64_t seed_ = 0;
  std::vector<ad::Var> params_;
  std::vector<int> param_slot_;  // layer index -> first param index or -1
};

/// Kaiming-uniform (fan-in) weights, zero biases.
Model build_model(const ArchSpec& spec, std::uint64_t seed);

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

// ---- forward with taps ---------------------------------------------------

/// Elementwise uniform noise on [-delta, delta]. Each batch row draws from
/// its own stream so a sample's noise does not depend on its batch mates.
struct NoiseSpec {
  double delta = 0.0;
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> row_seeds;  // optional; defaults to derive(seed, row)

  Tensor draw(const Shape& shape) const;
};

using NoiseMap = std::map<LayerId, NoiseSpec>;

/// Recorded forward run.
struct Tape {
  const Model* model = nullptr;
  ad::Var input;
  std::vector<ad::Var> outputs;              // per layer index, as fed downstream
  std::map<LayerId, ad::Var> activations;    // post-activation feature maps m^r
  std::map<LayerId, ad::Var> taps;           // m^r + sigma, differentiable entry points
  std::map<LayerId, Tensor> noise;           // sigma actually added
  ad::Var logits;

  std::int64_t batch() const { return input.shape()[0]; }
  const ad::Var& tap(LayerId layer) const;
};

struct ForwardResult {
  ad::Var logits;
  Tape tape;
};

/// Forward pass recording taps on `tap_layers` and adding noise at the
/// layers in `noise` (noised layers are tapped implicitly).
ForwardResult forward_with_taps(const Model& model, const Tensor& batch,
                                const std::set<LayerId>& tap_layers, const NoiseMap& noise = {});

/// Plain forward from an existing graph node, e.g. an input leaf that
/// requires grad.
ForwardResult forward_from(const Model& model, const ad::Var& input);

/// Re-runs everything downstream of conv layer `layer`, reusing the
/// upstream graph of `base`, with fresh noise at that layer only. The
/// returned tape taps `layer`.
Tape replay_from(const Tape& base, LayerId layer, const NoiseSpec& noise);

/// Like replay_from, with a fixed additive offset at `layer`.
Tape replay_with_offset(const Tape& base, LayerId layer, const Tensor& offset);

/// Recomputes the tape from its input and stored noise.
Tensor replay(const Tape& tape);

/// Inference logits without graph recording.
Tensor predict_logits(const Model& model, const Tensor& batch, std::int64_t chunk = 256);
std::vector<int> argmax_rows(const Tensor& logits);

/// d(sum_b logit[b, classes[b]]) / d(tap of `layer`), i.e. per-sample
/// gradients of each sample's chosen logit.
ad::Var grad_wrt_activation(const Tape& tape, std::span<const int> classes, LayerId layer,
                            bool create_graph = false);

/// Standard deviation of a tensor's entries.
double activation_std(const Tensor& t);

// ---- training ------------------------------------------------------------

struct TrainHyper {
  int epochs = 10;
  double lr = 0.05;
  double momentum = 0.9;
  int batch = 32;
  std::uint64_t seed = 1;
};

struct EpochRow {
  int epoch = 0;
  double train_loss = 0.0;
  double test_acc = 0.0;
  std::map<std::string, double> extra;  // named auxiliary loss means
};

struct BatchLoss {
  ad::Var total;
  std::map<std::string, double> parts;
};

/// Loss for one minibatch: images, labels and dataset ids of its rows.
using LossFn = std::function<BatchLoss(const Model&, const Tensor& images,
                                       std::span<const int> labels,
                                       std::span<const std::int64_t> ids)>;

/// Plain mean cross-entropy.
BatchLoss cross_entropy_loss(const Model& model, const Tensor& images, std::span<const int> labels);

/// SGD with momentum over shuffled minibatches; mutates `model`. Throws
/// TrainingError naming the epoch if the loss becomes non-finite.
std::vector<EpochRow> train_with_loss(Model& model, const Dataset& train, const Dataset* test,
                                      const TrainHyper& hyper, const LossFn& loss);

std::vector<EpochRow> train_baseline(Model& model, const Dataset& train, const Dataset* test,
                                     const TrainHyper& hyper);

double accuracy(const Model& model, const Dataset& data);
std::vector<double> per_class_accuracy(const Model& model, const Dataset& data);

}  // namespace gradcorr
