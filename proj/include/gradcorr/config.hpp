#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace gradcorr {

/// Flat key=value run configuration. The first non-comment line must be
/// `version = 1`; unknown keys are rejected. Every key has a default, and
/// the canonical text (and hence the hash) lists all effective values, so
/// spelling out a default does not change the hash.
class RunConfig {
 public:
  static constexpr int kVersion = 1;

  RunConfig() = default;
  static RunConfig parse(const std::string& text, const std::string& origin = "<config>");
  static RunConfig load(const std::filesystem::path& path);

  /// Throws ConfigError for unknown keys.
  void set(const std::string& key, const std::string& value);
  bool is_set(const std::string& key) const { return values_.count(key) > 0; }

  std::string get(const std::string& key) const;
  int get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<double> get_doubles(const std::string& key) const;

  std::string canonical_text() const;
  std::uint64_t hash() const;

  /// Known keys with their defaults.
  static const std::map<std::string, std::string>& defaults();

 private:
  std::map<std::string, std::string> values_;
};

/// Resolves a layer list: "none", "all", "last", "last2" or "1,3,5".
std::vector<int> parse_layer_list(const std::string& text, const std::vector<int>& conv_layers);

}  // namespace gradcorr
