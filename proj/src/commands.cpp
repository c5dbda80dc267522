#include "gradcorr/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "gradcorr/csv.hpp"
#include "gradcorr/diagnosis.hpp"
#include "gradcorr/error.hpp"
#include "gradcorr/probe.hpp"
#include "gradcorr/rng.hpp"

namespace gradcorr {
namespace fs = std::filesystem;

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string join(const std::vector<int>& v, char sep) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += sep;
    out += std::to_string(v[i]);
  }
  return out;
}

void write_kv(const fs::path& path, const std::map<std::string, std::string>& fields) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& [k, v] : fields) out << k << '=' << v << '\n';
  if (!out) throw IoError("write failed on " + path.string());
}

std::map<std::string, std::string> read_kv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read " + path.string());
  std::map<std::string, std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    out[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return out;
}

Model load_model(const RunConfig& cfg) {
  const auto path = cfg.get("checkpoint");
  if (path.empty()) throw ConfigError("this command needs 'checkpoint'");
  if (!fs::exists(path)) throw InputError("checkpoint not found: " + path);
  return load_checkpoint(path);
}

void check_model_fits(const Model& model, const Dataset& data) {
  if (data.image_shape() != model.spec().input) {
    throw SpecError("dataset images " + shape_str(data.image_shape()) + " do not match model input " +
                    shape_str(model.spec().input));
  }
  if (data.num_classes > model.spec().classes) {
    throw InputError("dataset has more classes than the model emits");
  }
}

Manifest base_manifest(const std::string& command, const RunConfig& cfg) {
  Manifest m;
  m.fields["tool_version"] = GRADCORR_VERSION;
  m.fields["command"] = command;
  m.fields["config_hash"] = std::to_string(cfg.hash());
  m.fields["seed"] = cfg.get("seed");
  return m;
}

void save_config(const RunConfig& cfg, const fs::path& out) {
  std::ofstream f(out / "config.txt");
  if (!f) throw IoError("cannot write " + (out / "config.txt").string());
  f << cfg.canonical_text();
}

void write_epochs(const std::vector<EpochRow>& rows, const fs::path& path) {
  CsvWriter csv(path, {"epoch", "train_loss", "test_acc"});
  for (const auto& r : rows) csv.row(r.epoch, r.train_loss, r.test_acc);
}

MaskSet resolve_masks(const RunConfig& cfg, const LoadedData& data, const Model& model) {
  const auto src = cfg.get("masks");
  MaskSet masks;
  if (src == "synth") {
    if (!data.train_masks) throw ConfigError("masks = synth needs dataset = synth");
    masks = *data.train_masks;
  } else if (!src.empty()) {
    masks = load_mask_dir(src);
  }
  const auto ann = cfg.get("annotations");
  if (ann != "all") {
    const int n = cfg.get_int("annotations");
    if (n < 0) throw ConfigError("annotations must be 'all' or a nonnegative count");
    MaskSet kept;
    kept.expansion = masks.expansion;
    for (const auto& [cls, ids] : select_low_confidence(model, data.train, n)) {
      for (auto id : ids) {
        if (masks.has(id)) kept.objects[id] = masks.objects.at(id);
      }
    }
    masks = std::move(kept);
  }
  for (const auto& [id, m] : masks.objects) {
    if (id < 0 || id >= data.train.size()) {
      throw InputError("mask for sample " + std::to_string(id) + " but the training set has " +
                       std::to_string(data.train.size()) + " images");
    }
    if (m.height != data.train.images.dim(2) || m.width != data.train.images.dim(3)) {
      throw InputError("mask for sample " + std::to_string(id) + " is " + std::to_string(m.height) + "x" +
                       std::to_string(m.width) + ", images are " + std::to_string(data.train.images.dim(2)) +
                       "x" + std::to_string(data.train.images.dim(3)));
    }
  }
  return masks;
}

std::vector<CorrelationMatrix> load_profiles(const RunConfig& cfg, Manifest* source) {
  const auto dir = cfg.get("diagnosis");
  if (dir.empty()) return {};
  const auto manifest = Manifest::read(dir);
  auto matrices = read_correlation_csv(fs::path(dir) / "correlation.csv");
  const auto spec_hash = std::stoull(manifest.at("spec_hash"));
  const auto model_hash = std::stoull(manifest.at("model_hash"));
  for (auto& m : matrices) {
    m.spec_hash = spec_hash;
    m.model_hash = model_hash;
    m.J = std::stoi(manifest.at("corr_trials"));
    m.delta = std::stod(manifest.at("corr_delta"));
  }
  if (source) *source = manifest;
  return matrices;
}

void require_profile_match(const Model& model, const std::vector<CorrelationMatrix>& profiles,
                           const std::string& dir) {
  for (const auto& m : profiles) {
    if (m.spec_hash != model.spec().hash()) {
      throw ConfigError("diagnosis in " + dir + " was computed for a different model spec (spec hash " +
                        std::to_string(m.spec_hash) + ", checkpoint " + std::to_string(model.spec().hash()) +
                        "); rerun diagnose on this checkpoint");
    }
    if (m.model_hash != model.content_hash()) {
      throw ConfigError("diagnosis in " + dir + " was computed for different weights (model hash " +
                        std::to_string(m.model_hash) + ", checkpoint " + std::to_string(model.content_hash()) +
                        "); rerun diagnose on this checkpoint");
    }
  }
}

// ---- commands ---------------------------------------------------------------------

void cmd_train(const RunConfig& cfg, const fs::path& out, std::ostream& log) {
  const auto data = load_data(cfg);
  Model model = cfg.get("checkpoint").empty() ? build_model(spec_for(cfg, data.train), cfg.get_u64("seed"))
                                              : load_model(cfg);
  check_model_fits(model, data.train);
  const auto hyper = hyper_from(cfg);
  log << "training " << model.spec().name << " on " << data.train.size() << " images for " << hyper.epochs
      << " epochs\n";
  const auto rows = train_baseline(model, data.train, &data.test, hyper);
  for (const auto& r : rows) log << "epoch " << r.epoch << " loss " << r.train_loss << " test_acc " << r.test_acc << '\n';
  save_checkpoint(model, out / "model.ckpt");
  write_epochs(rows, out / "metrics.csv");
  auto m = base_manifest("train", cfg);
  m.fields["spec_hash"] = std::to_string(model.spec().hash());
  m.fields["model_hash"] = std::to_string(model.content_hash());
  m.fields["test_acc"] = num(rows.empty() ? accuracy(model, data.test) : rows.back().test_acc);
  m.write(out);
}

void cmd_diagnose(const RunConfig& cfg, const fs::path& out, std::ostream& log) {
  const auto data = load_data(cfg);
  const Model model = load_model(cfg);
  check_model_fits(model, data.train);
  AggregateOptions agg;
  agg.layers = parse_layer_list(cfg.get("layers"), model.spec().conv_layers());
  if (agg.layers.empty()) throw ConfigError("diagnose needs at least one layer");
  agg.J = cfg.get_int("corr_trials");
  agg.delta = cfg.get_double("corr_delta");
  agg.seed = cfg.get_u64("seed");
  const double threshold = cfg.get_double("confidence");
  const int T = cfg.get_int("per_class");
  if (T < 1) throw ConfigError("per_class must be positive");

  const auto sel = select_high_confidence(model, data.train, threshold, T);
  for (int c : sel.short_classes) {
    log << "warning: class " << c << " has only " << sel.per_class.at(c).size() << " samples above confidence "
        << threshold << '\n';
  }
  {
    CsvWriter csv(out / "selection.csv", {"class", "selected", "target"});
    for (const auto& [c, ids] : sel.per_class) csv.row(c, static_cast<int>(ids.size()), T);
  }
  log << "aggregating correlation over layers " << join(agg.layers, ',') << '\n';
  auto matrices = aggregate_correlation(model, data.train, sel.per_class, agg);
  for (auto& m : matrices) m.threshold = threshold;
  write_correlation_csv(matrices, out / "correlation.csv");
  {
    CsvWriter csv(out / "sparsity.csv", {"layer", "class", "top10_mass", "gini", "zero_row"});
    for (const auto& m : matrices) {
      export_heatmap(m, out / ("heatmap_layer" + std::to_string(m.layer()) + ".pgm"));
      const auto rows = sparsity_profile(m);
      for (std::size_t c = 0; c < rows.size(); ++c) {
        csv.row(m.layer(), static_cast<int>(c), rows[c].top10_mass, rows[c].gini, rows[c].zero_row ? 1 : 0);
      }
    }
  }

  const auto pred = argmax_rows(predict_logits(model, data.test.images));
  DiagnoseOptions opt;
  opt.v_quantile = cfg.get_double("v_quantile");
  opt.J = agg.J;
  opt.delta = agg.delta;
  opt.seed = agg.seed;
  std::optional<MaskSet> test_masks;
  if (cfg.get("dataset") == "synth") {
    SynthConfig sc;
    sc.classes = cfg.get_int("synth_classes");
    sc.per_class = cfg.get_int("synth_per_class");
    sc.test_per_class = cfg.get_int("synth_test_per_class");
    sc.leak = cfg.get_double("synth_leak");
    sc.glyph = cfg.get_int("synth_glyph");
    sc.seed = cfg.get_u64("synth_seed");
    test_masks = synth_spurious_dataset(sc).test_masks;
  }
  CsvWriter csv(out / "diagnosis.csv",
                {"sample_id", "predicted", "ground_truth", "layer", "violations", "background_fraction"});
  std::size_t misclassified = 0;
  for (std::int64_t i = 0; i < data.test.size(); ++i) {
    if (pred[static_cast<std::size_t>(i)] == data.test.labels[static_cast<std::size_t>(i)]) continue;
    ++misclassified;
    const Mask* mask = test_masks && test_masks->has(i) ? &test_masks->objects.at(i) : nullptr;
    const auto rep = diagnose_sample(model, data.test.image(i), data.test.labels[static_cast<std::size_t>(i)],
                                     matrices, opt, mask, i);
    for (const auto& l : rep.layers) {
      csv.row(i, rep.predicted, rep.ground_truth, l.layer, join(l.violations, ';'),
              rep.has_mask ? num(rep.background_fraction) : std::string("NA"));
    }
  }
  log << "diagnosed " << misclassified << " misclassified test samples\n";

  auto m = base_manifest("diagnose", cfg);
  m.fields["spec_hash"] = std::to_string(model.spec().hash());
  m.fields["model_hash"] = std::to_string(model.content_hash());
  m.fields["corr_trials"] = std::to_string(agg.J);
  m.fields["corr_delta"] = num(agg.delta);
  m.fields["per_class"] = std::to_string(T);
  m.fields["confidence"] = num(threshold);
  m.write(out);
}

TreatmentOutcome run_treatment(const RunConfig& cfg, const LoadedData& data, const Model& model,
                               const MaskSet& masks, const std::vector<CorrelationMatrix>& profiles,
                               const TreatmentConfig& tc, std::ostream& log) {
  log << "treating: channel layers [" << join(tc.channel_layers, ',') << "] space layers ["
      << join(tc.space_layers, ',') << "] with " << masks.size() << " masks\n";
  (void)cfg;
  auto outcome = treat(model, data.train, data.test, masks, profiles, tc);
  for (const auto& r : outcome.epochs) log << "epoch " << r.epoch << " test_acc " << r.test_acc << '\n';
  if (outcome.missing_masks > 0) {
    log << "note: " << outcome.missing_masks << " space-constrained rows had no mask\n";
  }
  return outcome;
}

void cmd_treat(const RunConfig& cfg, const fs::path& out, std::ostream& log) {
  const auto data = load_data(cfg);
  const Model model = load_model(cfg);
  check_model_fits(model, data.train);
  Manifest source;
  const auto profiles = load_profiles(cfg, &source);
  require_profile_match(model, profiles, cfg.get("diagnosis"));
  const auto tc = treatment_from(cfg, model.spec());
  const auto masks = resolve_masks(cfg, data, model);
  const auto outcome = run_treatment(cfg, data, model, masks, profiles, tc, log);

  save_checkpoint(outcome.model, out / "treated.ckpt");
  write_treatment_metrics(outcome, out / "metrics.csv");
  write_per_class(outcome, out / "per_class.csv");
  write_kv(out / "summary.txt", {{"base_acc", num(outcome.base_acc)},
                                 {"treated_acc", num(outcome.treated_acc)},
                                 {"delta", num(outcome.treated_acc - outcome.base_acc)},
                                 {"masks", std::to_string(masks.size())},
                                 {"missing_mask_rows", std::to_string(outcome.missing_masks)}});
  auto m = base_manifest("treat", cfg);
  m.fields["spec_hash"] = std::to_string(model.spec().hash());
  m.fields["model_hash"] = std::to_string(model.content_hash());
  m.fields["treated_hash"] = std::to_string(outcome.model.content_hash());
  if (!profiles.empty()) m.fields["diagnosis_config_hash"] = source.at("config_hash");
  m.write(out);
}

void cmd_probe(const RunConfig& cfg, const fs::path& out, std::ostream& log) {
  const auto data = load_data(cfg);
  const Model model = load_model(cfg);
  check_model_fits(model, data.test);
  ProbeExperiment exp;
  exp.count = cfg.get_int("probe_count");
  exp.confidence = cfg.get_double("confidence");
  exp.eps = cfg.get("eps") == "auto" ? -1.0 : cfg.get_double("eps");
  exp.eps_step = cfg.get_double("eps_step");
  exp.eps_max = cfg.get_double("eps_max");
  exp.flip_target = cfg.get_double("flip_target");
  exp.options.deltas = cfg.get_doubles("deltas");
  exp.options.trials = cfg.get_int("trials");
  exp.options.policy = LayerPolicy::parse(cfg.get("layer_policy"));
  exp.options.relative = cfg.get_bool("relative_noise");
  exp.options.seed = cfg.get_u64("seed");
  exp.threshold = cfg.get_double("iso_threshold");
  const double moderate = cfg.get_double("moderate_delta");
  if (std::find(exp.options.deltas.begin(), exp.options.deltas.end(), moderate) == exp.options.deltas.end()) {
    throw ConfigError("moderate_delta must be one of the deltas");
  }

  const auto report = run_probe_experiment(model, data.test, exp);
  log << "fgsm eps " << report.eps << " flips " << report.flip_rate << " of correct samples\n";
  write_curves_csv(report, out / "curves.csv");
  {
    CsvWriter csv(out / "report.csv", {"sample_id", "is_adv", "score", "verdict"});
    for (const auto& e : report.entries) {
      csv.row(e.sample_id, e.is_adversarial ? 1 : 0, e.score, std::string(verdict_name(e.verdict)));
    }
  }
  const auto normal = report.mean_retain(false);
  write_kv(out / "summary.txt",
           {{"eps", num(report.eps)},
            {"flip_rate", num(report.flip_rate)},
            {"normal_min_retain", num(*std::min_element(normal.begin(), normal.end()))},
            {"adversarial_persistent_share", num(report.persistent_share(true, moderate))},
            {"moderate_delta", num(moderate)},
            {"balanced_accuracy", num(report.balanced_accuracy())},
            {"mean_score_normal", num(report.mean_score(false))},
            {"mean_score_adversarial", num(report.mean_score(true))}});
  log << "balanced accuracy " << report.balanced_accuracy() << '\n';
  auto m = base_manifest("probe", cfg);
  m.fields["spec_hash"] = std::to_string(model.spec().hash());
  m.fields["model_hash"] = std::to_string(model.content_hash());
  m.write(out);
}

void cmd_ablate(const RunConfig& cfg, const fs::path& out, std::ostream& log) {
  const auto data = load_data(cfg);
  const Model model = load_model(cfg);
  check_model_fits(model, data.train);
  Manifest source;
  const auto profiles = load_profiles(cfg, &source);
  require_profile_match(model, profiles, cfg.get("diagnosis"));
  const auto axis = cfg.get("axis");
  if (axis != "layer-depth" && axis != "annotation-count" && axis != "expansion-pixels") {
    throw ConfigError("axis must be layer-depth, annotation-count or expansion-pixels");
  }
  std::vector<std::string> grid;
  {
    std::stringstream in(cfg.get("grid"));
    std::string item;
    while (std::getline(in, item, ',')) {
      item.erase(std::remove(item.begin(), item.end(), ' '), item.end());
      if (!item.empty()) grid.push_back(item);
    }
  }
  if (grid.empty()) throw ConfigError("ablation grid is empty");

  CsvWriter csv(out / "ablation.csv", {"axis", "value", "base_acc", "treated_acc", "delta"});
  for (const auto& value : grid) {
    RunConfig cell = cfg;
    auto tc = treatment_from(cfg, model.spec());
    if (axis == "expansion-pixels") {
      cell.set("expansion", value);
      tc.expansion = cell.get_int("expansion");
    } else if (axis == "annotation-count") {
      cell.set("annotations", value);
    } else {
      const auto layer = parse_layer_list(value, model.spec().conv_layers());
      if (layer.size() != 1) throw ConfigError("layer-depth grid entries must be single layers");
      if (!tc.space_layers.empty()) tc.space_layers = layer;
      if (!tc.channel_layers.empty()) tc.channel_layers = layer;
    }
    tc.validate(model.spec());
    const auto masks = resolve_masks(cell, data, model);
    log << "cell " << axis << '=' << value << '\n';
    const auto outcome = run_treatment(cell, data, model, masks, profiles, tc, log);
    write_treatment_metrics(outcome, out / ("cell_" + value + "_metrics.csv"));
    csv.row(axis, value, outcome.base_acc, outcome.treated_acc, outcome.treated_acc - outcome.base_acc);
  }
  auto m = base_manifest("ablate", cfg);
  m.fields["spec_hash"] = std::to_string(model.spec().hash());
  m.fields["model_hash"] = std::to_string(model.content_hash());
  if (!profiles.empty()) m.fields["diagnosis_config_hash"] = source.at("config_hash");
  m.write(out);
}

void cmd_synth(const RunConfig& cfg, const fs::path& out, std::ostream& log) {
  if (cfg.get("dataset") != "synth") throw ConfigError("synth needs dataset = synth");
  const auto data = load_data(cfg);
  write_cifar_bin(data.train, out / "train.bin");
  write_cifar_bin(data.test, out / "test.bin");
  save_mask_dir(*data.train_masks, out / "train_masks");
  log << "wrote " << data.train.size() << " training and " << data.test.size() << " test images\n";
  base_manifest("synth", cfg).write(out);
}

}  // namespace

// ---- shared helpers ----------------------------------------------------------------

LoadedData load_data(const RunConfig& cfg) {
  const auto kind = cfg.get("dataset");
  const fs::path dir = cfg.get("data_dir");
  LoadedData out;
  if (kind == "mnist-idx") {
    if (dir.empty()) throw ConfigError("dataset = mnist-idx needs data_dir");
    out.train = load_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte", 10, Split::Train);
    out.test = load_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte", 10, Split::Test);
  } else if (kind == "cifar-bin") {
    if (dir.empty()) throw ConfigError("dataset = cifar-bin needs data_dir");
    std::vector<fs::path> batches;
    for (int i = 1; i <= 5; ++i) {
      const auto p = dir / ("data_batch_" + std::to_string(i) + ".bin");
      if (fs::exists(p)) batches.push_back(p);
    }
    if (batches.empty()) throw InputError("no data_batch_*.bin files in " + dir.string());
    out.train = load_cifar_bin(batches, 10, Split::Train);
    out.test = load_cifar_bin(dir / "test_batch.bin", 10, Split::Test);
  } else if (kind == "synth") {
    SynthConfig sc;
    sc.classes = cfg.get_int("synth_classes");
    sc.per_class = cfg.get_int("synth_per_class");
    sc.test_per_class = cfg.get_int("synth_test_per_class");
    sc.leak = cfg.get_double("synth_leak");
    sc.glyph = cfg.get_int("synth_glyph");
    sc.seed = cfg.get_u64("synth_seed");
    auto s = synth_spurious_dataset(sc);
    out.train = std::move(s.train);
    out.test = std::move(s.test);
    out.train_masks = std::move(s.train_masks);
  } else {
    throw ConfigError("dataset must be mnist-idx, cifar-bin or synth, got '" + kind + "'");
  }
  return out;
}

ArchSpec spec_for(const RunConfig& cfg, const Dataset& train) {
  const auto shape = train.image_shape();
  if (shape[1] != shape[2]) throw SpecError("only square images are supported");
  return arch_by_name(cfg.get("arch"), static_cast<int>(shape[0]), shape[1], train.num_classes);
}

TrainHyper hyper_from(const RunConfig& cfg) {
  TrainHyper h;
  h.epochs = cfg.get_int("epochs");
  h.lr = cfg.get_double("lr");
  h.momentum = cfg.get_double("momentum");
  h.batch = cfg.get_int("batch");
  h.seed = cfg.get_u64("seed");
  if (h.epochs < 0) throw ConfigError("epochs must be nonnegative");
  if (h.lr <= 0.0) throw ConfigError("lr must be positive");
  return h;
}

TreatmentConfig treatment_from(const RunConfig& cfg, const ArchSpec& spec) {
  TreatmentConfig tc;
  const auto convs = spec.conv_layers();
  tc.channel_layers = parse_layer_list(cfg.get("channel_layers"), convs);
  tc.space_layers = parse_layer_list(cfg.get("space_layers"), convs);
  tc.v_quantile = cfg.get_double("v_quantile");
  tc.lambda_ch = cfg.get_double("lambda_ch");
  tc.lambda_sp = cfg.get_double("lambda_sp");
  tc.J = cfg.get_int("treat_trials");
  tc.delta = cfg.get_double("treat_delta");
  tc.expansion = cfg.get_int("expansion");
  tc.double_backward = cfg.get_bool("double_backward");
  tc.hyper = hyper_from(cfg);
  tc.validate(spec);
  return tc;
}

void Manifest::write(const fs::path& dir) const { write_kv(dir / "manifest.txt", fields); }

Manifest Manifest::read(const fs::path& dir) {
  Manifest m;
  m.fields = read_kv(dir / "manifest.txt");
  return m;
}

const std::string& Manifest::at(const std::string& key) const {
  auto it = fields.find(key);
  if (it == fields.end()) throw InputError("manifest lacks '" + key + "'");
  return it->second;
}

void prepare_output(const fs::path& dir, bool overwrite) {
  if (dir.empty()) throw ConfigError("no output directory given");
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw ConfigError(dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir) && !overwrite) {
      throw ConfigError("output directory " + dir.string() +
                        " is not empty; choose a fresh directory or pass --overwrite");
    }
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names = {"train", "diagnose", "treat", "probe", "ablate", "synth"};
  return names;
}

void run_command(const std::string& command, const RunConfig& config, const fs::path& out, bool overwrite,
                 std::ostream& log) {
  const auto& names = command_names();
  if (std::find(names.begin(), names.end(), command) == names.end()) {
    throw UsageError("unknown command '" + command + "'");
  }
  prepare_output(out, overwrite);
  save_config(config, out);
  if (command == "train") cmd_train(config, out, log);
  else if (command == "diagnose") cmd_diagnose(config, out, log);
  else if (command == "treat") cmd_treat(config, out, log);
  else if (command == "probe") cmd_probe(config, out, log);
  else if (command == "ablate") cmd_ablate(config, out, log);
  else cmd_synth(config, out, log);
}

}  // namespace gradcorr
