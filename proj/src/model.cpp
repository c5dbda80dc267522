#include "gradcorr/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "gradcorr/error.hpp"
#include "gradcorr/rng.hpp"
#include "kernels.hpp"

namespace gradcorr {
namespace {

const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "conv";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::AvgPool: return "avgpool";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::Linear: return "linear";
    case LayerKind::Add: return "add";
  }
  return "?";
}

LayerKind kind_from_name(const std::string& s) {
  for (auto k : {LayerKind::Conv, LayerKind::MaxPool, LayerKind::AvgPool, LayerKind::Flatten,
                 LayerKind::Linear, LayerKind::Add}) {
    if (s == kind_name(k)) return k;
  }
  throw SpecError("unknown layer kind '" + s + "'");
}

LayerSpec conv(int out, int kernel, int stride, int padding, bool relu = true) {
  return {LayerKind::Conv, out, kernel, stride, padding, relu, -1};
}
LayerSpec maxpool(int k) { return {LayerKind::MaxPool, 0, k, k, 0, false, -1}; }
LayerSpec avgpool(int k) { return {LayerKind::AvgPool, 0, k, k, 0, false, -1}; }
LayerSpec flatten() { return {LayerKind::Flatten, 0, 0, 1, 0, false, -1}; }
LayerSpec linear(int out, bool relu) { return {LayerKind::Linear, out, 0, 1, 0, relu, -1}; }
LayerSpec add_from(int skip_from) { return {LayerKind::Add, 0, 0, 1, 0, true, skip_from}; }

std::string layer_label(std::size_t i, const LayerSpec& l) {
  return "layer " + std::to_string(i) + " (" + kind_name(l.kind) + ")";
}

// Little-endian binary helpers for checkpoints.
template <class T>
void put(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    std::reverse(b, b + sizeof(T));
    os.write(reinterpret_cast<const char*>(b), sizeof(T));
  } else {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
}

template <class T>
T get(std::istream& is, const std::filesystem::path& path) {
  T v;
  const auto offset = static_cast<long long>(is.tellg());
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw FormatError("truncated checkpoint " + path.string() + " at byte " +
                      std::to_string(offset));
  }
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    std::reverse(b, b + sizeof(T));
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

constexpr char kCheckpointMagic[4] = {'G', 'C', 'K', 'P'};
constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<LayerId> conv_ids_by_index(const ArchSpec& spec) {
  std::vector<LayerId> ids(spec.layers.size(), 0);
  LayerId next = 1;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (spec.layers[i].kind == LayerKind::Conv) ids[i] = next++;
  }
  return ids;
}

ad::Var apply_relu(const LayerSpec& l, ad::Var v) { return l.relu ? ad::relu(v) : v; }

// Runs layers [start, end) of the model into `tape`.
// `fixed` supplies recorded sigma tensors that take precedence over `noise`.
void run_layers(const Model& model, Tape& tape, std::size_t start,
                const std::set<LayerId>& tap_layers, const NoiseMap& noise,
                const std::map<LayerId, Tensor>* fixed = nullptr) {
  const auto& spec = model.spec();
  const auto ids = conv_ids_by_index(spec);
  tape.outputs.resize(spec.layers.size());
  for (std::size_t i = start; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    const ad::Var& prev = i == 0 ? tape.input : tape.outputs[i - 1];
    ad::Var out;
    switch (l.kind) {
      case LayerKind::Conv: {
        out = ad::add_channel_bias(ad::conv2d(prev, model.weight(i), l.stride, l.padding),
                                   model.bias(i));
        out = apply_relu(l, out);
        const LayerId id = ids[i];
        tape.activations[id] = out;
        auto n = noise.find(id);
        const bool recorded = fixed && fixed->count(id);
        if (recorded || (n != noise.end() && n->second.delta > 0.0)) {
          Tensor sigma = recorded ? fixed->at(id) : n->second.draw(out.shape());
          out = ad::tap(out, &sigma);
          tape.noise[id] = std::move(sigma);
          tape.taps[id] = out;
        } else if (n != noise.end() || tap_layers.count(id)) {
          out = ad::tap(out);
          tape.taps[id] = out;
        }
        break;
      }
      case LayerKind::MaxPool:
        out = ad::maxpool2d(prev, l.kernel, l.stride);
        break;
      case LayerKind::AvgPool:
        out = ad::avgpool2d(prev, l.kernel, l.stride);
        break;
      case LayerKind::Flatten:
        out = ad::flatten(prev);
        break;
      case LayerKind::Linear:
        out = apply_relu(l, ad::linear(prev, model.weight(i), model.bias(i)));
        break;
      case LayerKind::Add: {
        const ad::Var& skip =
            l.skip_from < 0 ? tape.input : tape.outputs[static_cast<std::size_t>(l.skip_from)];
        out = apply_relu(l, ad::add(prev, skip));
        break;
      }
    }
    tape.outputs[i] = out;
  }
  tape.logits = tape.outputs.back();
}

void check_layers_exist(const ArchSpec& spec, const std::set<LayerId>& layers) {
  const auto convs = spec.conv_layers();
  for (auto id : layers) {
    if (std::find(convs.begin(), convs.end(), id) == convs.end()) {
      throw ConfigError("unknown layer id " + std::to_string(id) + " for model '" + spec.name +
                        "' (" + std::to_string(convs.size()) + " conv layers)");
    }
  }
}

}  // namespace

// ---- ArchSpec --------------------------------------------------------------

std::vector<Shape> ArchSpec::layer_shapes() const {
  if (input.size() != 3 || input[0] < 1 || input[1] < 1 || input[2] < 1) {
    throw SpecError("spec '" + name + "': input must be C x H x W, got " + shape_str(input));
  }
  if (classes < 1) throw SpecError("spec '" + name + "': class count must be positive");
  if (layers.empty()) throw SpecError("spec '" + name + "': no layers");
  std::vector<Shape> shapes;
  Shape cur = input;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const auto bad = [&](const std::string& why) {
      return SpecError("spec '" + name + "': " + layer_label(i, l) + " " + why + " (input " +
                       shape_str(cur) + ")");
    };
    switch (l.kind) {
      case LayerKind::Conv: {
        if (cur.size() != 3) throw bad("needs a C x H x W input");
        if (l.out < 1 || l.kernel < 1 || l.stride < 1 || l.padding < 0) throw bad("has bad geometry");
        if (cur[1] + 2 * l.padding < l.kernel || cur[2] + 2 * l.padding < l.kernel) {
          throw bad("kernel larger than padded input");
        }
        cur = Shape{l.out, (cur[1] + 2 * l.padding - l.kernel) / l.stride + 1,
                    (cur[2] + 2 * l.padding - l.kernel) / l.stride + 1};
        break;
      }
      case LayerKind::MaxPool:
      case LayerKind::AvgPool:
        if (cur.size() != 3) throw bad("needs a C x H x W input");
        if (l.kernel < 1 || l.stride < 1 || cur[1] < l.kernel || cur[2] < l.kernel) {
          throw bad("window larger than input");
        }
        cur = Shape{cur[0], (cur[1] - l.kernel) / l.stride + 1, (cur[2] - l.kernel) / l.stride + 1};
        break;
      case LayerKind::Flatten:
        cur = Shape{static_cast<std::int64_t>(shape_numel(cur))};
        break;
      case LayerKind::Linear:
        if (cur.size() != 1) throw bad("needs a flattened input");
        if (l.out < 1) throw bad("has no outputs");
        cur = Shape{l.out};
        break;
      case LayerKind::Add: {
        if (l.skip_from >= static_cast<int>(i) || l.skip_from < -1) throw bad("skips forward");
        const Shape& other = l.skip_from < 0 ? input : shapes[static_cast<std::size_t>(l.skip_from)];
        if (other != cur) throw bad("joins mismatched shape " + shape_str(other));
        break;
      }
    }
    shapes.push_back(cur);
  }
  if (cur != Shape{classes}) {
    throw SpecError("spec '" + name + "': final layer emits " + shape_str(cur) + ", expected " +
                    std::to_string(classes) + " logits");
  }
  return shapes;
}

void ArchSpec::validate() const { (void)layer_shapes(); }

std::vector<LayerId> ArchSpec::conv_layers() const {
  std::vector<LayerId> ids;
  for (const auto& l : layers) {
    if (l.kind == LayerKind::Conv) ids.push_back(static_cast<LayerId>(ids.size()) + 1);
  }
  return ids;
}

std::size_t ArchSpec::layer_index(LayerId id) const {
  LayerId seen = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].kind == LayerKind::Conv && ++seen == id) return i;
  }
  throw ConfigError("unknown layer id " + std::to_string(id) + " for model '" + name + "'");
}

Shape ArchSpec::feature_shape(LayerId id) const { return layer_shapes()[layer_index(id)]; }

std::string ArchSpec::to_text() const {
  std::ostringstream os;
  os << "arch " << name << '\n' << "classes " << classes << '\n' << "input";
  for (auto d : input) os << ' ' << d;
  os << '\n';
  for (const auto& l : layers) {
    os << "layer " << kind_name(l.kind) << ' ' << l.out << ' ' << l.kernel << ' ' << l.stride
       << ' ' << l.padding << ' ' << (l.relu ? 1 : 0) << ' ' << l.skip_from << '\n';
  }
  return os.str();
}

ArchSpec ArchSpec::from_text(const std::string& text) {
  ArchSpec spec;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "arch") {
      ls >> spec.name;
    } else if (key == "classes") {
      ls >> spec.classes;
    } else if (key == "input") {
      std::int64_t d;
      while (ls >> d) spec.input.push_back(d);
    } else if (key == "layer") {
      std::string kind;
      int relu = 0;
      LayerSpec l;
      ls >> kind >> l.out >> l.kernel >> l.stride >> l.padding >> relu >> l.skip_from;
      if (!ls) throw SpecError("malformed layer line '" + line + "'");
      l.kind = kind_from_name(kind);
      l.relu = relu != 0;
      spec.layers.push_back(l);
    } else {
      throw SpecError("unknown spec line '" + line + "'");
    }
  }
  spec.validate();
  return spec;
}

std::uint64_t ArchSpec::hash() const { return fnv1a(to_text()); }

ArchSpec lenet5_spec(int in_channels, std::int64_t side, int classes) {
  ArchSpec s{"lenet5", classes, Shape{in_channels, side, side}, {}};
  s.layers = {conv(6, 5, 1, 2), maxpool(2),        conv(16, 5, 1, 0),  maxpool(2),
              flatten(),        linear(120, true), linear(84, true),  linear(classes, false)};
  s.validate();
  return s;
}

ArchSpec mini_vgg_spec(int in_channels, std::int64_t side, int classes) {
  ArchSpec s{"mini-vgg", classes, Shape{in_channels, side, side}, {}};
  s.layers = {conv(8, 3, 1, 1),  conv(8, 3, 1, 1),  maxpool(2),       conv(16, 3, 1, 1),
              conv(16, 3, 1, 1), maxpool(2),        conv(32, 3, 1, 1), conv(32, 3, 1, 1),
              maxpool(2),        flatten(),         linear(64, true), linear(classes, false)};
  s.validate();
  return s;
}

ArchSpec mini_resnet_spec(int in_channels, std::int64_t side, int classes) {
  ArchSpec s{"mini-resnet", classes, Shape{in_channels, side, side}, {}};
  s.layers = {
      conv(8, 3, 1, 1),                                // 0: stem (r=1)
      conv(8, 3, 1, 1),  conv(8, 3, 1, 1, false),      // 1, 2: block (r=2,3)
      add_from(0),                                     // 3
      conv(16, 3, 2, 1),                               // 4: downsample (r=4)
      conv(16, 3, 1, 1), conv(16, 3, 1, 1, false),     // 5, 6: block (r=5,6)
      add_from(4),                                     // 7
      conv(32, 3, 2, 1),                               // 8: downsample (r=7)
      conv(32, 3, 1, 1),                               // 9: head (r=8)
      avgpool(static_cast<int>((side + 3) / 4)),       // 10: global average
      flatten(),
      linear(classes, false),
  };
  s.validate();
  return s;
}

ArchSpec arch_by_name(const std::string& name, int in_channels, std::int64_t side, int classes) {
  if (name == "lenet5" || name == "lenet5-ish") return lenet5_spec(in_channels, side, classes);
  if (name == "mini-vgg") return mini_vgg_spec(in_channels, side, classes);
  if (name == "mini-resnet") return mini_resnet_spec(in_channels, side, classes);
  throw ConfigError("unknown model spec '" + name + "' (expected lenet5, mini-vgg, mini-resnet)");
}

// ---- Model -----------------------------------------------------------------

Model::Model(ArchSpec spec, std::uint64_t seed, std::vector<ad::Var> params)
    : spec_(std::move(spec)), seed_(seed), params_(std::move(params)) {
  const auto shapes = spec_.layer_shapes();
  param_slot_.assign(spec_.layers.size(), -1);
  std::size_t next = 0;
  Shape cur = spec_.input;
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const auto& l = spec_.layers[i];
    if (l.kind == LayerKind::Conv || l.kind == LayerKind::Linear) {
      const Shape w = l.kind == LayerKind::Conv ? Shape{l.out, cur[0], l.kernel, l.kernel}
                                                : Shape{l.out, cur[0]};
      if (next + 2 > params_.size() ||
          params_[next].shape() != w || params_[next + 1].shape() != Shape{l.out}) {
        throw SpecError("parameters do not match " + layer_label(i, l) + " of spec '" +
                        spec_.name + "'");
      }
      param_slot_[i] = static_cast<int>(next);
      next += 2;
    }
    cur = shapes[i];
  }
  if (next != params_.size()) throw SpecError("extra parameters for spec '" + spec_.name + "'");
}

const ad::Var& Model::weight(std::size_t layer) const {
  return params_.at(static_cast<std::size_t>(param_slot_.at(layer)));
}

const ad::Var& Model::bias(std::size_t layer) const {
  return params_.at(static_cast<std::size_t>(param_slot_.at(layer)) + 1);
}

Model Model::clone() const {
  std::vector<ad::Var> copy;
  copy.reserve(params_.size());
  for (const auto& p : params_) copy.emplace_back(p.value(), true);
  return Model(spec_, seed_, std::move(copy));
}

std::uint64_t Model::content_hash() const {
  std::uint64_t h = fnv1a(spec_.to_text());
  for (const auto& p : params_) {
    const auto d = p.value().data();
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(d.data()), d.size_bytes()), h);
  }
  return h;
}

Model build_model(const ArchSpec& spec, std::uint64_t seed) {
  const auto shapes = spec.layer_shapes();
  Rng rng(derive_seed(seed, "init"));
  std::vector<ad::Var> params;
  Shape cur = spec.input;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    if (l.kind == LayerKind::Conv || l.kind == LayerKind::Linear) {
      const Shape w = l.kind == LayerKind::Conv ? Shape{l.out, cur[0], l.kernel, l.kernel}
                                                : Shape{l.out, cur[0]};
      const double fan_in = static_cast<double>(shape_numel(w)) / static_cast<double>(l.out);
      // Kaiming-uniform; gain sqrt(2) ahead of a ReLU, 1 otherwise.
      const double bound = std::sqrt((l.relu ? 6.0 : 3.0) / fan_in);
      Tensor wt(w);
      for (auto& v : wt.data()) v = rng.uniform(-bound, bound);
      params.emplace_back(std::move(wt), true);
      params.emplace_back(Tensor(Shape{l.out}), true);
    }
    cur = shapes[i];
  }
  return Model(spec, seed, std::move(params));
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write checkpoint " + path.string());
  os.write(kCheckpointMagic, 4);
  put<std::uint32_t>(os, kCheckpointVersion);
  put<std::uint64_t>(os, model.spec().hash());
  put<std::uint64_t>(os, model.init_seed());
  const std::string text = model.spec().to_text();
  put<std::uint32_t>(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(model.params().size()));
  for (const auto& p : model.params()) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(p.value().rank()));
    for (auto d : p.shape()) put<std::uint64_t>(os, static_cast<std::uint64_t>(d));
    for (double v : p.value().data()) put<double>(os, v);
  }
  if (!os) throw IoError("failed writing checkpoint " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw FormatError("bad checkpoint magic in " + path.string() + " at byte 0");
  }
  const auto version = get<std::uint32_t>(is, path);
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " at byte 4");
  }
  const auto spec_hash = get<std::uint64_t>(is, path);
  const auto seed = get<std::uint64_t>(is, path);
  const auto text_len = get<std::uint32_t>(is, path);
  std::string text(text_len, '\0');
  if (!is.read(text.data(), text_len)) throw FormatError("truncated spec text in " + path.string());
  ArchSpec spec = ArchSpec::from_text(text);
  if (spec.hash() != spec_hash) {
    throw FormatError("checkpoint spec hash mismatch in " + path.string());
  }
  const auto count = get<std::uint32_t>(is, path);
  std::vector<ad::Var> params;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto rank = get<std::uint32_t>(is, path);
    if (rank > 8) throw FormatError("implausible tensor rank in " + path.string());
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) {
      shape.push_back(static_cast<std::int64_t>(get<std::uint64_t>(is, path)));
    }
    Tensor t(shape);
    for (auto& v : t.data()) v = get<double>(is, path);
    params.emplace_back(std::move(t), true);
  }
  return Model(std::move(spec), seed, std::move(params));
}

// ---- forward ---------------------------------------------------------------

Tensor NoiseSpec::draw(const Shape& shape) const {
  Tensor sigma(shape);
  if (delta <= 0.0 || shape.empty()) return sigma;
  const auto rows = shape[0];
  const std::size_t per_row = rows == 0 ? 0 : sigma.size() / static_cast<std::size_t>(rows);
  for (std::int64_t b = 0; b < rows; ++b) {
    const std::uint64_t s = row_seeds.empty()
                                ? derive_seed(seed, "noise-row", {static_cast<std::uint64_t>(b)})
                                : row_seeds.at(static_cast<std::size_t>(b));
    Rng rng(s);
    double* p = sigma.data().data() + static_cast<std::size_t>(b) * per_row;
    for (std::size_t i = 0; i < per_row; ++i) p[i] = rng.uniform(-delta, delta);
  }
  return sigma;
}

const ad::Var& Tape::tap(LayerId layer) const {
  auto it = taps.find(layer);
  if (it == taps.end()) {
    throw UsageError("layer " + std::to_string(layer) + " was not tapped during forward");
  }
  return it->second;
}

ForwardResult forward_with_taps(const Model& model, const Tensor& batch,
                                const std::set<LayerId>& tap_layers, const NoiseMap& noise) {
  const auto& spec = model.spec();
  check_layers_exist(spec, tap_layers);
  std::set<LayerId> noised;
  for (const auto& [id, n] : noise) {
    if (n.delta < 0.0) throw ConfigError("noise delta must be nonnegative");
    noised.insert(id);
  }
  check_layers_exist(spec, noised);
  if (batch.rank() != 4 || !std::equal(spec.input.begin(), spec.input.end(),
                                       batch.shape().begin() + 1)) {
    throw SpecError("input batch " + shape_str(batch.shape()) + " does not match spec '" +
                    spec.name + "' input " + shape_str(spec.input));
  }
  Tape tape;
  tape.model = &model;
  tape.input = ad::Var(batch);
  run_layers(model, tape, 0, tap_layers, noise);
  return {tape.logits, std::move(tape)};
}

ForwardResult forward_from(const Model& model, const ad::Var& input) {
  const auto& spec = model.spec();
  if (input.value().rank() != 4 || !std::equal(spec.input.begin(), spec.input.end(),
                                               input.shape().begin() + 1)) {
    throw SpecError("input batch " + shape_str(input.shape()) + " does not match spec '" +
                    spec.name + "' input " + shape_str(spec.input));
  }
  Tape tape;
  tape.model = &model;
  tape.input = input;
  run_layers(model, tape, 0, {}, {});
  return {tape.logits, std::move(tape)};
}

namespace {

Tape replay_tail(const Tape& base, LayerId layer, const Tensor* sigma) {
  const Model& model = *base.model;
  const std::size_t idx = model.spec().layer_index(layer);
  Tape tape;
  tape.model = base.model;
  tape.input = base.input;
  tape.outputs.assign(base.outputs.begin(), base.outputs.begin() + static_cast<std::ptrdiff_t>(idx));
  for (const auto& [id, v] : base.activations) {
    if (id < layer) tape.activations[id] = v;
  }
  const ad::Var& m = base.activations.at(layer);
  tape.activations[layer] = m;
  if (sigma) {
    if (sigma->shape() != m.shape()) {
      throw DimensionError("replay offset " + shape_str(sigma->shape()) + " does not match layer " +
                           std::to_string(layer) + " activations " + shape_str(m.shape()));
    }
    tape.taps[layer] = ad::tap(m, sigma);
    tape.noise[layer] = *sigma;
  } else {
    tape.taps[layer] = ad::tap(m);
  }
  tape.outputs.push_back(tape.taps[layer]);
  run_layers(model, tape, idx + 1, {}, {});
  return tape;
}

}  // namespace

Tape replay_from(const Tape& base, LayerId layer, const NoiseSpec& noise) {
  if (noise.delta > 0.0) {
    const Tensor sigma = noise.draw(base.activations.at(layer).shape());
    return replay_tail(base, layer, &sigma);
  }
  return replay_tail(base, layer, nullptr);
}

Tape replay_with_offset(const Tape& base, LayerId layer, const Tensor& offset) {
  return replay_tail(base, layer, &offset);
}

Tensor replay(const Tape& tape) {
  ad::NoGradGuard no_grad;
  Tape again;
  again.model = tape.model;
  again.input = ad::Var(tape.input.value());
  run_layers(*tape.model, again, 0, {}, {}, &tape.noise);
  return again.logits.value();
}

Tensor predict_logits(const Model& model, const Tensor& batch, std::int64_t chunk) {
  ad::NoGradGuard no_grad;
  const auto n = batch.dim(0);
  if (n <= chunk) return forward_with_taps(model, batch, {}).logits.value();
  std::vector<Tensor> parts;
  for (std::int64_t b = 0; b < n; b += chunk) {
    parts.push_back(
        forward_with_taps(model, batch.slice_rows(b, std::min(n, b + chunk)), {}).logits.value());
  }
  return stack_rows(parts, true);
}

std::vector<int> argmax_rows(const Tensor& logits) {
  std::vector<int> out;
  const auto rows = logits.dim(0);
  const auto n = logits.dim(1);
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* z = logits.data().data() + r * n;
    out.push_back(static_cast<int>(std::max_element(z, z + n) - z));
  }
  return out;
}

ad::Var grad_wrt_activation(const Tape& tape, std::span<const int> classes, LayerId layer,
                            bool create_graph) {
  const ad::Var& t = tape.tap(layer);
  const auto& z = tape.logits.value();
  if (static_cast<std::int64_t>(classes.size()) != z.dim(0)) {
    throw UsageError("grad_wrt_activation: " + std::to_string(classes.size()) +
                     " classes for batch of " + std::to_string(z.dim(0)));
  }
  Tensor seed(z.shape());
  for (std::size_t b = 0; b < classes.size(); ++b) {
    if (classes[b] < 0 || classes[b] >= z.dim(1)) {
      throw InputError("class index " + std::to_string(classes[b]) + " out of range");
    }
    seed[b * static_cast<std::size_t>(z.dim(1)) + static_cast<std::size_t>(classes[b])] = 1.0;
  }
  const ad::Var outs[] = {tape.logits};
  const Tensor seeds[] = {seed};
  const ad::Var wrt[] = {t};
  return ad::grad(outs, seeds, wrt, create_graph)[0];
}

double activation_std(const Tensor& t) {
  if (t.size() == 0) return 0.0;
  const double mean = t.sum() / static_cast<double>(t.size());
  double acc = 0.0;
  for (double v : t.data()) acc += (v - mean) * (v - mean);
  return std::sqrt(acc / static_cast<double>(t.size()));
}

// ---- training --------------------------------------------------------------

BatchLoss cross_entropy_loss(const Model& model, const Tensor& images, std::span<const int> labels) {
  auto fwd = forward_with_taps(model, images, {});
  auto ce = ad::softmax_cross_entropy(fwd.logits, labels);
  BatchLoss out{ce.loss, {}};
  out.parts["l_orig"] = ce.loss.value().item();
  return out;
}

std::vector<EpochRow> train_with_loss(Model& model, const Dataset& train, const Dataset* test,
                                      const TrainHyper& hyper, const LossFn& loss) {
  train.validate();
  if (train.num_classes > model.spec().classes) {
    throw InputError("dataset has " + std::to_string(train.num_classes) +
                     " classes but model emits " + std::to_string(model.spec().classes));
  }
  if (hyper.batch < 1) throw ConfigError("batch size must be positive");
  if (train.image_shape() != model.spec().input) {
    throw SpecError("training images " + shape_str(train.image_shape()) + " do not match spec '" +
                    model.spec().name + "' input " + shape_str(model.spec().input));
  }
  std::vector<ad::Var> params(model.params().begin(), model.params().end());
  std::vector<Tensor> velocity;
  for (const auto& p : params) velocity.emplace_back(p.shape());

  std::vector<EpochRow> rows;
  const auto m = train.size();
  for (int epoch = 1; epoch <= hyper.epochs; ++epoch) {
    std::vector<std::int64_t> order(static_cast<std::size_t>(m));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(hyper.seed, "shuffle", {static_cast<std::uint64_t>(epoch)}));
    rng.shuffle(order.begin(), order.end());

    EpochRow row;
    row.epoch = epoch;
    double loss_sum = 0.0;
    std::int64_t batches = 0;
    try {
      for (std::int64_t b = 0; b < m; b += hyper.batch) {
        std::span<const std::int64_t> ids(order.data() + b,
                                          static_cast<std::size_t>(std::min<std::int64_t>(hyper.batch, m - b)));
        const Tensor x = train.batch(ids);
        const auto y = train.batch_labels(ids);
        BatchLoss bl = loss(model, x, y, ids);
        const double value = bl.total.value().item();
        if (!std::isfinite(value)) throw NumericError("loss is not finite");
        auto grads = ad::grad(bl.total, params);
        for (std::size_t i = 0; i < params.size(); ++i) {
          auto& v = velocity[i];
          auto& p = params[i].mutable_value();
          const auto& g = grads[i].value();
          for (std::size_t k = 0; k < p.size(); ++k) {
            v[k] = hyper.momentum * v[k] + g[k];
            p[k] -= hyper.lr * v[k];
          }
        }
        loss_sum += value;
        for (const auto& [k, val] : bl.parts) row.extra[k] += val;
        ++batches;
      }
    } catch (const NumericError& e) {
      throw TrainingError("training diverged in epoch " + std::to_string(epoch) + ": " + e.what(),
                          epoch);
    }
    row.train_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    for (auto& [k, val] : row.extra) val /= static_cast<double>(std::max<std::int64_t>(batches, 1));
    row.test_acc = test ? accuracy(model, *test) : 0.0;
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<EpochRow> train_baseline(Model& model, const Dataset& train, const Dataset* test,
                                     const TrainHyper& hyper) {
  return train_with_loss(model, train, test, hyper,
                         [](const Model& m, const Tensor& x, std::span<const int> y,
                            std::span<const std::int64_t>) { return cross_entropy_loss(m, x, y); });
}

double accuracy(const Model& model, const Dataset& data) {
  if (data.size() == 0) return 0.0;
  const auto pred = argmax_rows(predict_logits(model, data.images));
  std::int64_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == data.labels[i];
  return static_cast<double>(ok) / static_cast<double>(data.size());
}

std::vector<double> per_class_accuracy(const Model& model, const Dataset& data) {
  const auto pred = argmax_rows(predict_logits(model, data.images));
  std::vector<double> hit(static_cast<std::size_t>(data.num_classes)), total(hit.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto c = static_cast<std::size_t>(data.labels[i]);
    total[c] += 1.0;
    hit[c] += pred[i] == data.labels[i];
  }
  for (std::size_t c = 0; c < hit.size(); ++c) hit[c] = total[c] > 0 ? hit[c] / total[c] : 0.0;
  return hit;
}

}  // namespace gradcorr
