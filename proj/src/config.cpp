#include "gradcorr/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "gradcorr/error.hpp"
#include "gradcorr/rng.hpp"

namespace gradcorr {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

const std::map<std::string, std::string>& RunConfig::defaults() {
  static const std::map<std::string, std::string> d = {
      // data and model
      {"dataset", "mnist-idx"},
      {"data_dir", ""},
      {"synth_classes", "4"},
      {"synth_per_class", "500"},
      {"synth_test_per_class", "250"},
      {"synth_leak", "0.95"},
      {"synth_glyph", "10"},
      {"synth_seed", "1"},
      {"arch", "lenet5"},
      {"seed", "1"},
      {"checkpoint", ""},
      // optimizer
      {"epochs", "10"},
      {"lr", "0.05"},
      {"momentum", "0.9"},
      {"batch", "32"},
      // diagnosis
      {"layers", "all"},
      {"confidence", "0.9"},
      {"per_class", "100"},
      {"corr_trials", "10"},
      {"corr_delta", "-1"},
      {"v_quantile", "0.5"},
      // treatment
      {"diagnosis", ""},
      {"channel_layers", "last"},
      {"space_layers", "last2"},
      {"lambda_ch", "1"},
      {"lambda_sp", "1"},
      {"treat_trials", "1"},
      {"treat_delta", "0"},
      {"expansion", "3"},
      {"masks", ""},
      {"annotations", "all"},
      {"double_backward", "true"},
      // probe
      {"eps", "auto"},
      {"eps_max", "0.5"},
      {"eps_step", "0.01"},
      {"flip_target", "0.6"},
      {"deltas", "0,0.05,0.1,0.15,0.2,0.25,0.3"},
      {"moderate_delta", "0.15"},
      {"trials", "10"},
      {"layer_policy", "random"},
      {"relative_noise", "false"},
      {"probe_count", "100"},
      {"iso_threshold", "0.5"},
      // ablation
      {"axis", "expansion-pixels"},
      {"grid", "0,1,2,3,5"},
  };
  return d;
}

RunConfig RunConfig::parse(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  bool have_version = false;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const auto where = origin + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!have_version) {
      if (key != "version") throw ConfigError(where + ": first entry must be 'version = " + std::to_string(kVersion) + "'");
      if (value != std::to_string(kVersion)) {
        throw ConfigError(where + ": unsupported config version '" + value + "'");
      }
      have_version = true;
      continue;
    }
    if (key == "version") throw ConfigError(where + ": duplicate version line");
    if (cfg.values_.count(key)) throw ConfigError(where + ": duplicate key '" + key + "'");
    try {
      cfg.set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
  if (!have_version) throw ConfigError(origin + ": missing 'version = " + std::to_string(kVersion) + "' line");
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (!defaults().count(key)) throw ConfigError("unknown config key '" + key + "'");
  values_[key] = value;
}

std::string RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it != values_.end()) return it->second;
  auto d = defaults().find(key);
  if (d == defaults().end()) throw ConfigError("unknown config key '" + key + "'");
  return d->second;
}

int RunConfig::get_int(const std::string& key) const {
  const auto v = get(key);
  try {
    std::size_t used = 0;
    const int out = std::stoi(v, &used);
    if (used == v.size()) return out;
  } catch (const std::logic_error&) {
  }
  throw ConfigError("config key '" + key + "' expects an integer, got '" + v + "'");
}

std::uint64_t RunConfig::get_u64(const std::string& key) const {
  const auto v = get(key);
  try {
    std::size_t used = 0;
    const auto out = std::stoull(v, &used);
    if (used == v.size() && v.find('-') == std::string::npos) return out;
  } catch (const std::logic_error&) {
  }
  throw ConfigError("config key '" + key + "' expects a nonnegative integer, got '" + v + "'");
}

double RunConfig::get_double(const std::string& key) const {
  const auto v = get(key);
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used == v.size()) return out;
  } catch (const std::logic_error&) {
  }
  throw ConfigError("config key '" + key + "' expects a number, got '" + v + "'");
}

bool RunConfig::get_bool(const std::string& key) const {
  const auto v = get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "' expects true or false, got '" + v + "'");
}

std::vector<double> RunConfig::get_doubles(const std::string& key) const {
  std::vector<double> out;
  for (const auto& item : split_list(get(key))) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw ConfigError("config key '" + key + "' expects a list of numbers, got '" + get(key) + "'");
    }
  }
  return out;
}

std::string RunConfig::canonical_text() const {
  std::string out = "version = " + std::to_string(kVersion) + "\n";
  for (const auto& [key, def] : defaults()) out += key + " = " + get(key) + "\n";
  return out;
}

std::uint64_t RunConfig::hash() const { return fnv1a(canonical_text()); }

std::vector<int> parse_layer_list(const std::string& text, const std::vector<int>& conv_layers) {
  if (conv_layers.empty()) throw ConfigError("model has no conv layers");
  if (text == "none" || text.empty()) return {};
  if (text == "all") return conv_layers;
  if (text == "last") return {conv_layers.back()};
  if (text == "last2") {
    if (conv_layers.size() < 2) return conv_layers;
    return {conv_layers[conv_layers.size() - 2], conv_layers.back()};
  }
  std::vector<int> out;
  for (const auto& item : split_list(text)) {
    int r = 0;
    try {
      std::size_t used = 0;
      r = std::stoi(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw ConfigError("bad layer list '" + text + "'");
    }
    if (std::find(conv_layers.begin(), conv_layers.end(), r) == conv_layers.end()) {
      throw ConfigError("layer " + std::to_string(r) + " is not a conv layer (model has " +
                        std::to_string(conv_layers.size()) + ")");
    }
    if (std::find(out.begin(), out.end(), r) == out.end()) out.push_back(r);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace gradcorr
