#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gradcorr/commands.hpp"
#include "gradcorr/error.hpp"

int main(int argc, char** argv) {
  CLI::App app{"gradcorr: diagnose and treat spurious kernel usage in small CNNs"};
  app.require_subcommand(1);
  app.set_version_flag("--version", GRADCORR_VERSION);

  std::string config_path;
  std::string out_dir;
  std::string seed;
  std::vector<std::string> overrides;
  bool overwrite = false;

  for (const auto& name : gradcorr::command_names()) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("-c,--config", config_path, "config file (key = value)")->check(CLI::ExistingFile);
    sub->add_option("-o,--out", out_dir, "output directory")->required();
    sub->add_option("--seed", seed, "override the config seed");
    sub->add_option("-s,--set", overrides, "override a key, as key=value");
    sub->add_flag("--overwrite", overwrite, "write into a non-empty output directory");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    auto config = config_path.empty() ? gradcorr::RunConfig::parse("version = 1\n", "<defaults>")
                                      : gradcorr::RunConfig::load(config_path);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw gradcorr::UsageError("--set expects key=value, got '" + kv + "'");
      config.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (!seed.empty()) config.set("seed", seed);
    const auto* sub = app.get_subcommands().front();
    gradcorr::run_command(sub->get_name(), config, out_dir, overwrite, std::cerr);
  } catch (const gradcorr::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
