#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "gradcorr/config.hpp"
#include "gradcorr/data.hpp"
#include "gradcorr/model.hpp"
#include "gradcorr/treatment.hpp"

namespace gradcorr {

struct LoadedData {
  Dataset train;
  Dataset test;
  std::optional<MaskSet> train_masks;  // synthetic data only
};

/// Loads the dataset named by `dataset` (mnist-idx, cifar-bin, synth).
LoadedData load_data(const RunConfig& config);

/// Architecture for `arch`, shaped to the data.
ArchSpec spec_for(const RunConfig& config, const Dataset& train);

TrainHyper hyper_from(const RunConfig& config);

/// Treatment settings from the config, with layer lists resolved against
/// `spec`.
TreatmentConfig treatment_from(const RunConfig& config, const ArchSpec& spec);

/// Key/value provenance written next to every run's outputs.
struct Manifest {
  std::map<std::string, std::string> fields;

  void write(const std::filesystem::path& dir) const;
  static Manifest read(const std::filesystem::path& dir);
  const std::string& at(const std::string& key) const;
};

/// Creates `dir` or refuses (ConfigError) if it already holds files and
/// `overwrite` is false.
void prepare_output(const std::filesystem::path& dir, bool overwrite);

/// Runs one command ("train", "diagnose", "treat", "probe", "ablate",
/// "synth"), writing into `out`. Progress lines go to `log`.
void run_command(const std::string& command, const RunConfig& config,
                 const std::filesystem::path& out, bool overwrite, std::ostream& log);

const std::vector<std::string>& command_names();

}  // namespace gradcorr
