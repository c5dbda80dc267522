#include "gradcorr/data.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <regex>

#include "gradcorr/error.hpp"
#include "gradcorr/model.hpp"
#include "gradcorr/rng.hpp"

namespace gradcorr {
namespace {

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(is), {});
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off,
                   const std::filesystem::path& path) {
  if (off + 4 > b.size()) {
    throw FormatError(path.string() + ": truncated header at byte offset " + std::to_string(off));
  }
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

void put_be32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                     static_cast<char>(v >> 8), static_cast<char>(v)};
  os.write(b, 4);
}

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

constexpr std::uint32_t kIdxImages = 0x00000803;
constexpr std::uint32_t kIdxLabels = 0x00000801;
constexpr std::size_t kCifarRecord = 1 + 3 * 32 * 32;

// 5x5 glyph stencils, one per class.
constexpr std::array<std::array<const char*, 5>, 8> kGlyphs = {{
    {"..#..", "..#..", "#####", "..#..", "..#.."},  // plus
    {"#...#", ".#.#.", "..#..", ".#.#.", "#...#"},  // cross
    {"#####", "#...#", "#...#", "#...#", "#####"},  // ring
    {"#####", ".....", "#####", ".....", "#####"},  // bars
    {"#....", "#....", "#....", "#....", "#####"},  // ell
    {"#####", "..#..", "..#..", "..#..", "..#.."},  // tee
    {"..#..", ".#.#.", "#...#", ".#.#.", "..#.."},  // diamond
    {"#.#.#", ".#.#.", "#.#.#", ".#.#.", "#.#.#"},  // checks
}};

// Background tints, one per class.
constexpr std::array<std::array<double, 3>, 8> kTints = {{
    {0.80, 0.25, 0.25},
    {0.25, 0.70, 0.30},
    {0.25, 0.35, 0.85},
    {0.80, 0.75, 0.20},
    {0.70, 0.30, 0.75},
    {0.20, 0.70, 0.75},
    {0.85, 0.55, 0.20},
    {0.55, 0.55, 0.55},
}};

}  // namespace

// ---- Dataset -----------------------------------------------------------------

Shape Dataset::image_shape() const {
  if (images.rank() != 4) throw InputError("dataset images must be M x C x H x W");
  return Shape{images.dim(1), images.dim(2), images.dim(3)};
}

Tensor Dataset::image(std::int64_t i) const { return images.slice_rows(i, i + 1); }

Tensor Dataset::batch(std::span<const std::int64_t> ids) const {
  const auto s = image_shape();
  const auto per = static_cast<std::size_t>(shape_numel(s));
  Tensor out(Shape{static_cast<std::int64_t>(ids.size()), s[0], s[1], s[2]});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || ids[r] >= size()) {
      throw InputError("image id " + std::to_string(ids[r]) + " out of range");
    }
    std::copy_n(images.data().begin() + static_cast<std::ptrdiff_t>(ids[r] * static_cast<std::int64_t>(per)), per,
                out.data().begin() + static_cast<std::ptrdiff_t>(r * per));
  }
  return out;
}

std::vector<int> Dataset::batch_labels(std::span<const std::int64_t> ids) const {
  std::vector<int> out;
  out.reserve(ids.size());
  for (auto id : ids) out.push_back(labels.at(static_cast<std::size_t>(id)));
  return out;
}

Dataset Dataset::subset(std::span<const std::int64_t> ids) const {
  return Dataset{batch(ids), batch_labels(ids), num_classes, split};
}

void Dataset::validate() const {
  if (labels.empty()) throw InputError("dataset is empty");
  if (images.rank() != 4 || images.dim(0) != size()) {
    throw InputError("dataset has " + std::to_string(labels.size()) + " labels but images " +
                     shape_str(images.shape()));
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) {
      throw InputError("label " + std::to_string(labels[i]) + " of image " + std::to_string(i) +
                       " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

// ---- Mask --------------------------------------------------------------------

Mask::Mask(std::int64_t h, std::int64_t w, std::uint8_t fill)
    : height(h), width(w), bits(static_cast<std::size_t>(h * w), fill) {}

std::int64_t Mask::count() const {
  return std::count(bits.begin(), bits.end(), std::uint8_t{1});
}

Mask Mask::inverted() const {
  Mask m = *this;
  for (auto& b : m.bits) b = b ? 0 : 1;
  return m;
}

Tensor Mask::to_tensor() const {
  Tensor t(Shape{height, width});
  for (std::size_t i = 0; i < bits.size(); ++i) t[i] = bits[i];
  return t;
}

// ---- IDX / CIFAR -------------------------------------------------------------

Tensor load_idx_images(const std::filesystem::path& path) {
  const auto b = read_bytes(path);
  const auto magic = be32(b, 0, path);
  if (magic != kIdxImages) {
    throw FormatError(path.string() + ": bad IDX image magic at byte offset 0");
  }
  const auto n = be32(b, 4, path);
  const auto rows = be32(b, 8, path);
  const auto cols = be32(b, 12, path);
  const std::size_t need = 16 + std::size_t{n} * rows * cols;
  if (b.size() < need) {
    throw FormatError(path.string() + ": truncated IDX payload at byte offset " +
                      std::to_string(b.size()) + " (expected " + std::to_string(need) + ")");
  }
  Tensor t(Shape{n, 1, rows, cols});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = b[16 + i] / 255.0;
  return t;
}

std::vector<int> load_idx_labels(const std::filesystem::path& path) {
  const auto b = read_bytes(path);
  if (be32(b, 0, path) != kIdxLabels) {
    throw FormatError(path.string() + ": bad IDX label magic at byte offset 0");
  }
  const auto n = be32(b, 4, path);
  if (b.size() < 8 + std::size_t{n}) {
    throw FormatError(path.string() + ": truncated IDX labels at byte offset " +
                      std::to_string(b.size()));
  }
  return std::vector<int>(b.begin() + 8, b.begin() + 8 + n);
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 int num_classes, Split split) {
  Dataset d{load_idx_images(images), load_idx_labels(labels), num_classes, split};
  if (d.images.dim(0) != d.size()) {
    throw FormatError(images.string() + " and " + labels.string() + " disagree on image count");
  }
  d.validate();
  return d;
}

Dataset load_cifar_bin(const std::filesystem::path& path, int num_classes, Split split) {
  const auto b = read_bytes(path);
  if (b.empty() || b.size() % kCifarRecord != 0) {
    throw FormatError(path.string() + ": truncated CIFAR record at byte offset " +
                      std::to_string(b.size() - b.size() % kCifarRecord));
  }
  const auto n = static_cast<std::int64_t>(b.size() / kCifarRecord);
  Dataset d{Tensor(Shape{n, 3, 32, 32}), std::vector<int>(static_cast<std::size_t>(n)), num_classes,
            split};
  for (std::int64_t i = 0; i < n; ++i) {
    const std::size_t off = static_cast<std::size_t>(i) * kCifarRecord;
    d.labels[static_cast<std::size_t>(i)] = b[off];
    for (std::size_t p = 0; p < kCifarRecord - 1; ++p) {
      d.images[static_cast<std::size_t>(i) * (kCifarRecord - 1) + p] = b[off + 1 + p] / 255.0;
    }
  }
  d.validate();
  return d;
}

Dataset load_cifar_bin(std::span<const std::filesystem::path> paths, int num_classes, Split split) {
  std::vector<Tensor> imgs;
  Dataset out{{}, {}, num_classes, split};
  for (const auto& p : paths) {
    auto d = load_cifar_bin(p, num_classes, split);
    imgs.push_back(std::move(d.images));
    out.labels.insert(out.labels.end(), d.labels.begin(), d.labels.end());
  }
  out.images = stack_rows(imgs, true);
  return out;
}

void write_idx(const Dataset& data, const std::filesystem::path& images,
               const std::filesystem::path& labels) {
  const auto s = data.image_shape();
  if (s[0] != 1) throw InputError("IDX images must be single-channel");
  std::ofstream oi(images, std::ios::binary | std::ios::trunc);
  std::ofstream ol(labels, std::ios::binary | std::ios::trunc);
  if (!oi || !ol) throw IoError("cannot write IDX files next to " + images.string());
  put_be32(oi, kIdxImages);
  put_be32(oi, static_cast<std::uint32_t>(data.size()));
  put_be32(oi, static_cast<std::uint32_t>(s[1]));
  put_be32(oi, static_cast<std::uint32_t>(s[2]));
  for (double v : data.images.data()) oi.put(static_cast<char>(to_byte(v)));
  put_be32(ol, kIdxLabels);
  put_be32(ol, static_cast<std::uint32_t>(data.size()));
  for (int y : data.labels) ol.put(static_cast<char>(y));
}

void write_cifar_bin(const Dataset& data, const std::filesystem::path& path) {
  if (data.image_shape() != Shape{3, 32, 32}) {
    throw InputError("CIFAR records need 3x32x32 images, got " + shape_str(data.image_shape()));
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  const std::size_t per = kCifarRecord - 1;
  for (std::int64_t i = 0; i < data.size(); ++i) {
    os.put(static_cast<char>(data.labels[static_cast<std::size_t>(i)]));
    for (std::size_t p = 0; p < per; ++p) {
      os.put(static_cast<char>(to_byte(data.images[static_cast<std::size_t>(i) * per + p])));
    }
  }
}

// ---- PGM ---------------------------------------------------------------------

GrayImage read_pgm(const std::filesystem::path& path) {
  const auto b = read_bytes(path);
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < b.size()) {
      if (b[pos] == '#') {
        while (pos < b.size() && b[pos] != '\n') ++pos;
      } else if (std::isspace(b[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&]() -> std::int64_t {
    skip_space();
    const std::size_t start = pos;
    std::int64_t v = 0;
    while (pos < b.size() && std::isdigit(b[pos])) v = v * 10 + (b[pos++] - '0');
    if (pos == start) {
      throw FormatError(path.string() + ": malformed PGM header at byte offset " +
                        std::to_string(start));
    }
    return v;
  };
  if (b.size() < 2 || b[0] != 'P' || b[1] != '5') {
    throw FormatError(path.string() + ": not a binary PGM (P5) at byte offset 0");
  }
  pos = 2;
  GrayImage img;
  img.width = read_int();
  img.height = read_int();
  const auto maxval = read_int();
  if (maxval != 255) {
    throw FormatError(path.string() + ": PGM maxval " + std::to_string(maxval) +
                      " unsupported (need 255)");
  }
  if (pos >= b.size() || !std::isspace(b[pos])) {
    throw FormatError(path.string() + ": malformed PGM header at byte offset " + std::to_string(pos));
  }
  ++pos;
  const auto need = static_cast<std::size_t>(img.width * img.height);
  if (b.size() - pos < need) {
    throw FormatError(path.string() + ": truncated PGM raster at byte offset " +
                      std::to_string(b.size()));
  }
  img.pixels.assign(b.begin() + static_cast<std::ptrdiff_t>(pos),
                    b.begin() + static_cast<std::ptrdiff_t>(pos + need));
  return img;
}

void write_pgm(const GrayImage& image, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(image.pixels.data()),
           static_cast<std::streamsize>(image.pixels.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

Mask load_mask(const std::filesystem::path& path) {
  const auto img = read_pgm(path);
  Mask m(img.height, img.width);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) m.bits[i] = img.pixels[i] >= 128 ? 1 : 0;
  return m;
}

void save_mask(const Mask& mask, const std::filesystem::path& path) {
  GrayImage img{mask.height, mask.width, {}};
  img.pixels.reserve(mask.bits.size());
  for (auto b : mask.bits) img.pixels.push_back(b ? 255 : 0);
  write_pgm(img, path);
}

MaskSet load_mask_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("mask directory " + dir.string() + " missing");
  static const std::regex name(R"(mask_(\d+)\.pgm)");
  MaskSet set;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    std::smatch m;
    const std::string fname = entry.path().filename().string();
    if (std::regex_match(fname, m, name)) {
      set.objects[std::stoll(m[1].str())] = load_mask(entry.path());
    }
  }
  return set;
}

void save_mask_dir(const MaskSet& masks, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& [id, mask] : masks.objects) {
    save_mask(mask, dir / ("mask_" + std::to_string(id) + ".pgm"));
  }
}

// ---- mask geometry -------------------------------------------------------------

Mask expand_object(const Mask& object, int pixels) {
  if (pixels < 0) throw ConfigError("expansion pixels must be nonnegative");
  Mask cur = object;
  for (int step = 0; step < pixels; ++step) {
    Mask next = cur;
    for (std::int64_t y = 0; y < cur.height; ++y) {
      for (std::int64_t x = 0; x < cur.width; ++x) {
        if (cur.at(y, x)) continue;
        const bool hit = (y > 0 && cur.at(y - 1, x)) || (y + 1 < cur.height && cur.at(y + 1, x)) ||
                         (x > 0 && cur.at(y, x - 1)) || (x + 1 < cur.width && cur.at(y, x + 1));
        if (hit) next.at(y, x) = 1;
      }
    }
    cur = std::move(next);
  }
  return cur;
}

Mask rescale_mask(const Mask& mask, std::int64_t height, std::int64_t width) {
  if (height < 1 || width < 1) throw ConfigError("rescale target must be at least 1x1");
  if (height == mask.height && width == mask.width) return mask;
  Mask out(height, width);
  for (std::int64_t y = 0; y < height; ++y) {
    const std::int64_t sy = y * mask.height / height;
    for (std::int64_t x = 0; x < width; ++x) {
      out.at(y, x) = mask.at(sy, x * mask.width / width);
    }
  }
  return out;
}

Mask background_mask(const Mask& object, int expansion, std::int64_t height, std::int64_t width) {
  return rescale_mask(expand_object(object, expansion).inverted(), height, width);
}

// ---- selection -----------------------------------------------------------------

HighConfidenceSelection select_high_confidence(const Model& model, const Dataset& data,
                                               double threshold, int per_class) {
  HighConfidenceSelection sel;
  sel.threshold = threshold;
  sel.per_class_target = per_class;
  const Tensor p = ad::softmax(predict_logits(model, data.images));
  const auto n = p.dim(1);
  for (int c = 0; c < data.num_classes; ++c) sel.per_class[c];
  for (std::int64_t i = 0; i < data.size(); ++i) {
    const int y = data.labels[static_cast<std::size_t>(i)];
    auto& ids = sel.per_class[y];
    if (static_cast<int>(ids.size()) >= per_class) continue;
    const double* row = p.data().data() + i * n;
    const auto pred = static_cast<int>(std::max_element(row, row + n) - row);
    if (pred == y && row[y] > threshold) ids.push_back(i);
  }
  for (const auto& [c, ids] : sel.per_class) {
    if (static_cast<int>(ids.size()) < per_class) sel.short_classes.push_back(c);
  }
  return sel;
}

std::map<int, std::vector<std::int64_t>> select_low_confidence(const Model& model,
                                                               const Dataset& data, int count) {
  const Tensor p = ad::softmax(predict_logits(model, data.images));
  const auto n = p.dim(1);
  std::map<int, std::vector<std::pair<double, std::int64_t>>> by_class;
  for (std::int64_t i = 0; i < data.size(); ++i) {
    const int y = data.labels[static_cast<std::size_t>(i)];
    by_class[y].emplace_back(p[static_cast<std::size_t>(i * n + y)], i);
  }
  std::map<int, std::vector<std::int64_t>> out;
  for (auto& [c, v] : by_class) {
    std::sort(v.begin(), v.end());
    auto& ids = out[c];
    for (std::size_t k = 0; k < v.size() && static_cast<int>(k) < count; ++k) ids.push_back(v[k].second);
    std::sort(ids.begin(), ids.end());
  }
  return out;
}

// ---- synthetic data --------------------------------------------------------------

SynthData synth_spurious_dataset(const SynthConfig& cfg) {
  if (cfg.leak < 0.0 || cfg.leak > 1.0) throw ConfigError("leak must lie in [0, 1]");
  if (cfg.classes < 2 || cfg.classes > static_cast<int>(kGlyphs.size())) {
    throw ConfigError("synthetic data supports 2.." + std::to_string(kGlyphs.size()) + " classes");
  }
  if (cfg.glyph < 5 || cfg.glyph > cfg.size) throw ConfigError("glyph side must be in [5, size]");

  auto make = [&](int per_class, bool train, MaskSet& masks) {
    const auto n = static_cast<std::int64_t>(per_class) * cfg.classes;
    Dataset d{Tensor(Shape{n, 3, cfg.size, cfg.size}), std::vector<int>(static_cast<std::size_t>(n)),
              cfg.classes, train ? Split::Train : Split::Test};
    Rng rng(derive_seed(cfg.seed, train ? "synth-train" : "synth-test"));
    const std::int64_t plane = cfg.size * cfg.size;
    for (std::int64_t i = 0; i < n; ++i) {
      const int label = static_cast<int>(i % cfg.classes);
      d.labels[static_cast<std::size_t>(i)] = label;
      int tint = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.classes)));
      if (train && rng.bernoulli(cfg.leak)) tint = label;
      const std::int64_t y0 = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(cfg.size - cfg.glyph + 1)));
      const std::int64_t x0 = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(cfg.size - cfg.glyph + 1)));
      double* img = d.images.data().data() + i * 3 * plane;
      Mask obj(cfg.size, cfg.size);
      for (std::int64_t y = 0; y < cfg.size; ++y) {
        for (std::int64_t x = 0; x < cfg.size; ++x) {
          const bool inside = y >= y0 && y < y0 + cfg.glyph && x >= x0 && x < x0 + cfg.glyph;
          double rgb[3];
          if (inside) {
            const auto gy = (y - y0) * 5 / cfg.glyph;
            const auto gx = (x - x0) * 5 / cfg.glyph;
            const bool ink = kGlyphs[static_cast<std::size_t>(label)][static_cast<std::size_t>(gy)]
                                    [static_cast<std::size_t>(gx)] == '#';
            const double v = ink ? 0.9 : 0.1;
            rgb[0] = rgb[1] = rgb[2] = v;
            obj.at(y, x) = 1;
          } else {
            for (int c = 0; c < 3; ++c) rgb[c] = kTints[static_cast<std::size_t>(tint)][static_cast<std::size_t>(c)];
          }
          for (int c = 0; c < 3; ++c) {
            img[c * plane + y * cfg.size + x] = std::clamp(rgb[c] + rng.uniform(-0.1, 0.1), 0.0, 1.0);
          }
        }
      }
      masks.objects[i] = std::move(obj);
    }
    return d;
  };

  SynthData out;
  out.train = make(cfg.per_class, true, out.train_masks);
  out.test = make(cfg.test_per_class, false, out.test_masks);
  return out;
}

}  // namespace gradcorr
