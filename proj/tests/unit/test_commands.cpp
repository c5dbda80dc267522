#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>
#include <sys/wait.h>

#include "fixtures.hpp"
#include "gradcorr/commands.hpp"
#include "gradcorr/error.hpp"

using namespace gradcorr;
namespace fs = std::filesystem;

namespace {

const char* kTiny =
    "version = 1\n"
    "dataset = synth\n"
    "synth_per_class = 12\n"
    "synth_test_per_class = 6\n"
    "arch = mini-vgg\n"
    "epochs = 1\n"
    "lr = 0.005\n"
    "seed = 3\n"
    "per_class = 3\n"
    "confidence = 0\n"
    "corr_trials = 2\n"
    "layers = 5,6\n";

RunConfig tiny(const std::map<std::string, std::string>& extra = {}) {
  auto c = RunConfig::parse(kTiny);
  for (const auto& [k, v] : extra) c.set(k, v);
  return c;
}

void run(const std::string& cmd, const RunConfig& c, const fs::path& out) {
  std::ostringstream log;
  run_command(cmd, c, out, false, log);
}

int cli(const std::string& args) {
  const int status = std::system((std::string(GRADCORR_CLI) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Output, NonEmptyDirectoryIsRefusedUnlessOverwriting) {
  const auto dir = fx::scratch_dir("prep");
  EXPECT_NO_THROW(prepare_output(dir / "fresh", false));
  EXPECT_TRUE(fs::is_directory(dir / "fresh"));
  std::ofstream(dir / "fresh" / "x.txt") << "x";
  EXPECT_THROW(prepare_output(dir / "fresh", false), ConfigError);
  EXPECT_NO_THROW(prepare_output(dir / "fresh", true));
}

TEST(Output, ManifestRoundTrips) {
  const auto dir = fx::scratch_dir("manifest");
  Manifest m;
  m.fields = {{"a", "1"}, {"path", "/tmp/x y"}, {"hash", "18446744073709551615"}};
  m.write(dir);
  const auto back = Manifest::read(dir);
  EXPECT_EQ(back.fields, m.fields);
  EXPECT_THROW(back.at("missing"), InputError);
}

TEST(Pipeline, SameConfigAndSeedGiveIdenticalFiles) {
  const auto dir = fx::scratch_dir("repro");
  for (const char* run_name : {"a", "b"}) {
    const fs::path root = dir / run_name;
    run("train", tiny(), root / "train");
    run("diagnose", tiny({{"checkpoint", (root / "train" / "model.ckpt").string()}}), root / "diag");
  }
  for (const char* f : {"train/metrics.csv", "train/model.ckpt", "diag/correlation.csv", "diag/sparsity.csv",
                        "diag/diagnosis.csv", "diag/selection.csv", "diag/heatmap_layer6.pgm"}) {
    const auto a = fx::slurp(dir / "a" / f);
    EXPECT_FALSE(a.empty()) << f;
    EXPECT_EQ(a, fx::slurp(dir / "b" / f)) << f;
  }
}

TEST(Pipeline, TreatRefusesADiagnosisOfAnotherCheckpoint) {
  const auto dir = fx::scratch_dir("refuse");
  run("train", tiny(), dir / "t1");
  run("train", tiny({{"seed", "4"}}), dir / "t2");
  run("diagnose", tiny({{"checkpoint", (dir / "t1" / "model.ckpt").string()}}), dir / "d1");
  const auto c = tiny({{"checkpoint", (dir / "t2" / "model.ckpt").string()},
                       {"diagnosis", (dir / "d1").string()},
                       {"masks", "synth"},
                       {"channel_layers", "6"},
                       {"space_layers", "5,6"}});
  try {
    run("treat", c, dir / "treat");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("diagnose"), std::string::npos) << e.what();
  }
  const auto ok = tiny({{"checkpoint", (dir / "t1" / "model.ckpt").string()},
                        {"diagnosis", (dir / "d1").string()},
                        {"masks", "synth"},
                        {"channel_layers", "6"},
                        {"space_layers", "5,6"}});
  EXPECT_NO_THROW(run("treat", ok, dir / "treat_ok"));
  EXPECT_TRUE(fs::exists(dir / "treat_ok" / "treated.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "treat_ok" / "per_class.csv"));
}

TEST(Pipeline, ZeroWeightTreatMatchesContinuedTraining) {
  const auto dir = fx::scratch_dir("zero");
  run("train", tiny(), dir / "base");
  const auto ckpt = (dir / "base" / "model.ckpt").string();
  run("train", tiny({{"checkpoint", ckpt}, {"seed", "5"}}), dir / "cont");
  run("treat", tiny({{"checkpoint", ckpt}, {"seed", "5"}, {"masks", "synth"}, {"lambda_ch", "0"}, {"lambda_sp", "0"}}),
      dir / "treat");
  EXPECT_EQ(load_checkpoint(dir / "cont" / "model.ckpt").content_hash(),
            load_checkpoint(dir / "treat" / "treated.ckpt").content_hash());
}

TEST(Pipeline, SynthAndAblateWriteTheirTables) {
  const auto dir = fx::scratch_dir("ablate");
  run("synth", tiny(), dir / "synth");
  EXPECT_TRUE(fs::exists(dir / "synth" / "train.bin"));
  EXPECT_TRUE(fs::exists(dir / "synth" / "train_masks"));
  run("train", tiny(), dir / "base");
  run("ablate",
      tiny({{"checkpoint", (dir / "base" / "model.ckpt").string()},
            {"masks", "synth"},
            {"channel_layers", "none"},
            {"axis", "expansion-pixels"},
            {"grid", "0,2"}}),
      dir / "abl");
  const auto text = fx::slurp(dir / "abl" / "ablation.csv");
  EXPECT_EQ(text.substr(0, text.find('\n')), "axis,value,base_acc,treated_acc,delta");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);
}

TEST(Cli, ExitCodesFollowTheErrorKind) {
  const auto dir = fx::scratch_dir("cli");
  EXPECT_EQ(cli("--version"), 0);
  EXPECT_EQ(cli("bogus -o " + (dir / "x").string()), 2);
  EXPECT_EQ(cli("train"), 2);
  EXPECT_EQ(cli("train -o " + (dir / "y").string() + " -s nope=1"), 2);
  EXPECT_EQ(cli("train -o " + (dir / "v").string()), 2);  // no data_dir
  EXPECT_EQ(cli("train -o " + (dir / "z").string() + " -s data_dir=/nonexistent/dir"), 3);
  EXPECT_EQ(cli("diagnose -o " + (dir / "w").string() + " -s dataset=synth -s synth_per_class=2 -s synth_test_per_class=1"
                " -s arch=mini-vgg -s checkpoint=/nonexistent/m.ckpt"),
            3);
  fs::create_directories(dir / "full");
  std::ofstream(dir / "full" / "f") << "x";
  EXPECT_EQ(cli("synth -o " + (dir / "full").string() + " -s dataset=synth"), 2);
}
