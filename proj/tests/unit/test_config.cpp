#include <gtest/gtest.h>

#include "gradcorr/config.hpp"
#include "gradcorr/error.hpp"

using namespace gradcorr;

TEST(RunConfigParse, VersionMustComeFirst) {
  EXPECT_THROW(RunConfig::parse("epochs = 3\nversion = 1\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse(""), ConfigError);
  EXPECT_THROW(RunConfig::parse("version = 2\n"), ConfigError);
  EXPECT_NO_THROW(RunConfig::parse("# leading comment\n\nversion = 1\n"));
}

TEST(RunConfigParse, UnknownAndDuplicateKeysAreRejected) {
  try {
    RunConfig::parse("version = 1\nepochz = 3\n", "run.cfg");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("run.cfg:2"), std::string::npos) << what;
    EXPECT_NE(what.find("epochz"), std::string::npos) << what;
  }
  EXPECT_THROW(RunConfig::parse("version = 1\nepochs = 3\nepochs = 4\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("version = 1\nversion = 1\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("version = 1\nepochs\n"), ConfigError);
}

TEST(RunConfigParse, CommentsAndWhitespaceAreIgnored) {
  const auto c = RunConfig::parse("version = 1\n  lr=0.125   # step size\n# epochs = 99\n");
  EXPECT_EQ(c.get_double("lr"), 0.125);
  EXPECT_EQ(c.get_int("epochs"), 10);
}

TEST(RunConfigValues, TypedGettersValidate) {
  RunConfig c;
  c.set("epochs", "3x");
  EXPECT_THROW(c.get_int("epochs"), ConfigError);
  c.set("seed", "-1");
  EXPECT_THROW(c.get_u64("seed"), ConfigError);
  c.set("double_backward", "maybe");
  EXPECT_THROW(c.get_bool("double_backward"), ConfigError);
  c.set("deltas", "0, 0.1,0.2");
  EXPECT_EQ(c.get_doubles("deltas"), (std::vector<double>{0.0, 0.1, 0.2}));
  c.set("deltas", "0,x");
  EXPECT_THROW(c.get_doubles("deltas"), ConfigError);
  EXPECT_THROW(c.set("nope", "1"), ConfigError);
  EXPECT_THROW(c.get("nope"), ConfigError);
}

TEST(RunConfigHash, SpellingOutDefaultsKeepsTheHash) {
  const auto a = RunConfig::parse("version = 1\n");
  const auto b = RunConfig::parse("version = 1\nepochs = 10\nlr = 0.05\n");
  const auto c = RunConfig::parse("version = 1\nepochs = 11\n");
  EXPECT_EQ(a.canonical_text(), b.canonical_text());
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_NE(a.hash(), c.hash());
  EXPECT_EQ(RunConfig::parse(a.canonical_text()).hash(), a.hash());
  EXPECT_EQ(a.canonical_text().rfind("version = 1\n", 0), 0u);
}

TEST(LayerList, KeywordsAndExplicitLists) {
  const std::vector<int> convs{1, 2, 3, 4, 5, 6};
  EXPECT_EQ(parse_layer_list("all", convs), convs);
  EXPECT_EQ(parse_layer_list("none", convs), std::vector<int>{});
  EXPECT_EQ(parse_layer_list("", convs), std::vector<int>{});
  EXPECT_EQ(parse_layer_list("last", convs), std::vector<int>{6});
  EXPECT_EQ(parse_layer_list("last2", convs), (std::vector<int>{5, 6}));
  EXPECT_EQ(parse_layer_list("last2", std::vector<int>{1}), std::vector<int>{1});
  EXPECT_EQ(parse_layer_list("5,1,5", convs), (std::vector<int>{1, 5}));
  EXPECT_THROW(parse_layer_list("7", convs), ConfigError);
  EXPECT_THROW(parse_layer_list("1,a", convs), ConfigError);
  EXPECT_THROW(parse_layer_list("all", std::vector<int>{}), ConfigError);
}
