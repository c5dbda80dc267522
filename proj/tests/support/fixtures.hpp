#pragma once

#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <unistd.h>

#include "gradcorr/data.hpp"

namespace gradcorr::fx {

/// Fresh empty directory under the system temp dir, unique per process.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() /
                   ("gradcorr_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline SynthData small_synth(int per_class = 20, int test_per_class = 10, double leak = 0.95,
                             std::uint64_t seed = 1) {
  SynthConfig c;
  c.per_class = per_class;
  c.test_per_class = test_per_class;
  c.leak = leak;
  c.seed = seed;
  return synth_spurious_dataset(c);
}

inline std::filesystem::path mnist_dir() { return std::filesystem::path(GRADCORR_DATA_DIR) / "mnist-subset"; }

}  // namespace gradcorr::fx
