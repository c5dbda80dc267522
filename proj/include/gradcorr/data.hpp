#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gradcorr/tensor.hpp"

namespace gradcorr {

class Model;

enum class Split { Train, Test };

struct Dataset {
  Tensor images;            // M x C x H x W in [0, 1]
  std::vector<int> labels;  // length M, each in [0, num_classes)
  int num_classes = 0;
  Split split = Split::Train;

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  Shape image_shape() const;  // C x H x W
  Tensor image(std::int64_t i) const;  // 1 x C x H x W
  Tensor batch(std::span<const std::int64_t> ids) const;
  std::vector<int> batch_labels(std::span<const std::int64_t> ids) const;
  Dataset subset(std::span<const std::int64_t> ids) const;

  /// Throws InputError when labels fall outside [0, num_classes) or shapes disagree.
  void validate() const;
};

/// Binary H x W mask, 1 = object foreground (or background, for derived
/// background masks; the container does not care).
struct Mask {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(std::int64_t h, std::int64_t w, std::uint8_t fill = 0);

  std::uint8_t at(std::int64_t y, std::int64_t x) const { return bits[static_cast<std::size_t>(y * width + x)]; }
  std::uint8_t& at(std::int64_t y, std::int64_t x) { return bits[static_cast<std::size_t>(y * width + x)]; }
  std::int64_t count() const;
  Mask inverted() const;
  Tensor to_tensor() const;  // H x W of 0/1

  friend bool operator==(const Mask&, const Mask&) = default;
};

/// Per-image object masks of one dataset split, keyed by image index.
struct MaskSet {
  std::map<std::int64_t, Mask> objects;
  int expansion = 0;

  bool has(std::int64_t id) const { return objects.count(id) > 0; }
  std::size_t size() const { return objects.size(); }
};

// ---- file formats --------------------------------------------------------

/// IDX image file (magic 0x00000803), pixels scaled by 1/255.
Tensor load_idx_images(const std::filesystem::path& path);
/// IDX label file (magic 0x00000801).
std::vector<int> load_idx_labels(const std::filesystem::path& path);
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 int num_classes = 10, Split split = Split::Train);

/// CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes.
Dataset load_cifar_bin(const std::filesystem::path& path, int num_classes = 10,
                       Split split = Split::Train);
/// Concatenates several CIFAR batches.
Dataset load_cifar_bin(std::span<const std::filesystem::path> paths, int num_classes = 10,
                       Split split = Split::Train);

void write_idx(const Dataset& data, const std::filesystem::path& images,
               const std::filesystem::path& labels);
void write_cifar_bin(const Dataset& data, const std::filesystem::path& path);

struct GrayImage {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::uint8_t> pixels;
};

GrayImage read_pgm(const std::filesystem::path& path);
void write_pgm(const GrayImage& image, const std::filesystem::path& path);

/// Binary PGM (P5, maxval 255) to mask: pixel >= 128 is object.
Mask load_mask(const std::filesystem::path& path);
void save_mask(const Mask& mask, const std::filesystem::path& path);

/// Loads `mask_<id>.pgm` files from a directory.
MaskSet load_mask_dir(const std::filesystem::path& dir);
void save_mask_dir(const MaskSet& masks, const std::filesystem::path& dir);

// ---- mask geometry -------------------------------------------------------

/// Dilates the object region by `pixels` steps of the 4-connected (plus)
/// structuring element.
Mask expand_object(const Mask& object, int pixels);

/// Nearest-neighbour resampling: target (y, x) reads source
/// (floor(y * H / h), floor(x * W / w)).
Mask rescale_mask(const Mask& mask, std::int64_t height, std::int64_t width);

/// Background mask at a feature-map resolution: 1 - dilate(object, E), then
/// rescaled.
Mask background_mask(const Mask& object, int expansion, std::int64_t height, std::int64_t width);

// ---- sample selection ------------------------------------------------------

struct HighConfidenceSelection {
  std::map<int, std::vector<std::int64_t>> per_class;  // class -> image ids, dataset order
  std::vector<int> short_classes;                      // classes with fewer than T
  double threshold = 0.0;
  int per_class_target = 0;
};

/// Up to `per_class` correctly classified images per class whose softmax
/// confidence exceeds `threshold`, in dataset order.
HighConfidenceSelection select_high_confidence(const Model& model, const Dataset& data,
                                               double threshold, int per_class);

/// The `count` images of each class with the lowest ground-truth-class
/// confidence. Used to pick which training images get annotated.
std::map<int, std::vector<std::int64_t>> select_low_confidence(const Model& model,
                                                               const Dataset& data, int count);

// ---- synthetic spurious-background data -----------------------------------

struct SynthConfig {
  int classes = 4;
  int per_class = 500;       // training images per class
  int test_per_class = 250;
  double leak = 0.95;        // P(background tint matches the label) in train
  std::int64_t size = 32;    // square image side
  int glyph = 10;            // glyph side in pixels
  std::uint64_t seed = 1;
};

struct SynthData {
  Dataset train;
  Dataset test;
  MaskSet train_masks;
  MaskSet test_masks;
};

/// Class-specific glyph at a random position on a tinted background. In
/// train, the tint encodes the label with probability `leak`; in test the
/// tint is uniform over classes.
SynthData synth_spurious_dataset(const SynthConfig& config);

}  // namespace gradcorr
