#include <gtest/gtest.h>

#include <cmath>

#include "fixtures.hpp"
#include "gradcorr/diagnosis.hpp"
#include "gradcorr/error.hpp"
#include "gradcorr/rng.hpp"
#include "gradcorr/treatment.hpp"
#include "oracles.hpp"

using namespace gradcorr;

namespace {

// conv(2 channels, 3x3) -> flatten -> linear(3) on a 1x4x4 input. The head is
// linear in the conv-1 map, so d logit / d map is the head weight itself.
Model toy_model(std::uint64_t seed = 5) {
  ArchSpec s{"toy", 3, Shape{1, 4, 4}, {}};
  s.layers = {LayerSpec{LayerKind::Conv, 2, 3, 1, 1, true, -1}, LayerSpec{LayerKind::Flatten, 0, 0, 1, 0, false, -1},
              LayerSpec{LayerKind::Linear, 3, 0, 1, 0, false, -1}};
  s.validate();
  return build_model(s, seed);
}

CorrelationMatrix profile_matrix(LayerId layer, int classes, const std::vector<double>& row) {
  CorrelationMatrix m(layer, classes, static_cast<int>(row.size()));
  for (int n = 0; n < classes; ++n)
    for (std::size_t k = 0; k < row.size(); ++k) m.set_raw(n, static_cast<int>(k), row[k], 1);
  return m;
}

Tensor random_images(const Shape& s, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(s);
  for (auto& v : t.data()) v = rng.uniform();
  return t;
}

bool same_params(const Model& a, const Model& b) {
  for (std::size_t i = 0; i < a.params().size(); ++i)
    if (a.params()[i].value() != b.params()[i].value()) return false;
  return true;
}

}  // namespace

// ---- gradient oracles ------------------------------------------------------------------------

TEST(ConstraintOracles, ParameterGradientsMatchCentralDifferences) {
  for (const auto& r : oracle::run_constraint_oracles(13, 20)) {
    EXPECT_EQ(r.instances, 20) << r.name;
    EXPECT_LT(r.worst, r.tolerance) << r.name;
  }
}

// ---- channel loss --------------------------------------------------------------------------------

TEST(ChannelLoss, ThresholdBelowEveryEntryZeroesTermOne) {
  const auto model = build_model(mini_vgg_spec(3, 32, 4), 2);
  const auto x = random_images({2, 3, 32, 32}, 1);
  const std::vector<int> y{0, 3};
  const auto fwd = forward_with_taps(model, x, {6});
  const auto m = profile_matrix(6, 4, std::vector<double>(32, 1.0));
  const auto p = make_channel_profile(m, std::vector<double>(4, 0.5));
  const auto loss = channel_loss(fwd.tape, y, 6, p);
  EXPECT_EQ(loss.term1.value().item(), 0.0);
  EXPECT_GT(loss.term2.value().item(), 0.0);
}

TEST(ChannelLoss, ThresholdAboveEveryEntryGivesTheFullSum) {
  const auto model = build_model(mini_vgg_spec(3, 32, 4), 2);
  const auto x = random_images({2, 3, 32, 32}, 1);
  const std::vector<int> y{0, 3};
  const auto fwd = forward_with_taps(model, x, {6});
  const auto p = make_channel_profile(profile_matrix(6, 4, std::vector<double>(32, 1.0)), std::vector<double>(4, 2.0));
  ConstraintNoise noise;
  noise.J = 3;
  const auto loss = channel_loss(fwd.tape, y, 6, p, noise);
  // Trials are summed in the loss and averaged in the index.
  const auto idx = correlation_index(fwd.tape, y, 6, 1, 0.0, 4);
  EXPECT_NEAR(loss.term1.value().item(), 3.0 * idx.sum(), 1e-9 * idx.sum());
}

TEST(ChannelLoss, MatchesFiniteDifferenceInnerGradient) {
  const auto model = toy_model();
  const auto x = random_images({1, 1, 4, 4}, 2);
  const std::vector<int> y{1};
  const auto fwd = forward_with_taps(model, x, {1});
  const std::vector<double> row{1.0, 3.0};
  const auto p = make_channel_profile(profile_matrix(1, 3, row), std::vector<double>(3, 2.0));  // kernel 0 weak
  const auto loss = channel_loss(fwd.tape, y, 1, p);

  // Central differences of each logit w.r.t. every entry of the tapped map.
  const auto shape = fwd.tape.tap(1).shape();
  const auto logits = fwd.logits.value();
  const int second = second_best(logits)[0];
  double term1 = 0.0, term2 = 0.0;
  for (std::size_t i = 0; i < shape_numel(shape); ++i) {
    Tensor off(shape, 0.0);
    off[i] = oracle::kStep;
    const auto up = replay_with_offset(fwd.tape, 1, off).logits.value();
    off[i] = -oracle::kStep;
    const auto down = replay_with_offset(fwd.tape, 1, off).logits.value();
    const double d1 = (up[1] - down[1]) / (2 * oracle::kStep);
    const double ds = (up[static_cast<std::size_t>(second)] - down[static_cast<std::size_t>(second)]) / (2 * oracle::kStep);
    if (i < 16) term1 += std::abs(d1);
    term2 += std::abs(ds);
  }
  EXPECT_NEAR(loss.term1.value().item(), term1, 1e-3 * term1);
  EXPECT_NEAR(loss.term2.value().item(), term2, 1e-3 * term2);
}

TEST(ChannelLoss, KernelCountMismatchIsAConfigError) {
  const auto model = build_model(mini_vgg_spec(3, 32, 4), 2);
  const auto fwd = forward_with_taps(model, random_images({1, 3, 32, 32}, 1), {6});
  const auto p = make_channel_profile(profile_matrix(6, 4, std::vector<double>(16, 1.0)), 0.5);
  const std::vector<int> y{0};
  EXPECT_THROW(channel_loss(fwd.tape, y, 6, p), ConfigError);
}

TEST(ChannelLoss, DeltaZeroTrialsScaleExactly) {
  const auto model = build_model(mini_vgg_spec(3, 32, 4), 2);
  const auto fwd = forward_with_taps(model, random_images({2, 3, 32, 32}, 3), {5});
  const std::vector<int> y{1, 2};
  const auto p = make_channel_profile(profile_matrix(5, 4, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21, 22, 23, 24, 25, 26, 27, 28, 29, 30, 31, 32}), 0.5);
  ConstraintNoise one, ten;
  ten.J = 10;
  const auto a = channel_loss(fwd.tape, y, 5, p, one);
  const auto b = channel_loss(fwd.tape, y, 5, p, ten);
  EXPECT_EQ(b.term1.value().item(), 10.0 * a.term1.value().item());
  EXPECT_EQ(b.term2.value().item(), 10.0 * a.term2.value().item());
}

TEST(ChannelLoss, SecondBestIsTheRunnerUpLogit) {
  const Tensor logits({3, 3}, std::vector<double>{1, 3, 2, 5, 4, -1, 0, 0.5, 0.25});
  EXPECT_EQ(second_best(logits), (std::vector<int>{2, 1, 2}));
}

// ---- space loss ---------------------------------------------------------------------------------

TEST(SpaceLoss, EmptyBackgroundGivesZero) {
  const auto model = build_model(mini_vgg_spec(3, 32, 4), 2);
  const auto fwd = forward_with_taps(model, random_images({2, 3, 32, 32}, 1), {5});
  const std::vector<int> y{0, 1};
  EXPECT_EQ(space_loss(fwd.tape, y, 5, Tensor({8, 8}, 0.0)).value().item(), 0.0);
}

TEST(SpaceLoss, FullBackgroundEqualsUnmaskedSum) {
  const auto model = build_model(mini_vgg_spec(3, 32, 4), 2);
  const auto fwd = forward_with_taps(model, random_images({2, 3, 32, 32}, 1), {5});
  const std::vector<int> y{0, 1};
  const auto idx = correlation_index(fwd.tape, y, 5, 1, 0.0, 1);
  EXPECT_NEAR(space_loss(fwd.tape, y, 5, Tensor({2, 8, 8}, 1.0)).value().item(), idx.sum(), 1e-12 * idx.sum());
}

TEST(SpaceLoss, HalfPlaneOnUniformGradientIsHalf) {
  auto model = toy_model();
  auto w = model.weight(2);
  for (std::int64_t n = 0; n < 3; ++n)
    for (std::int64_t k = 0; k < 2; ++k)
      for (std::int64_t i = 0; i < 16; ++i)
        w.mutable_value()[static_cast<std::size_t>(n * 32 + k * 16 + i)] = 0.3 * static_cast<double>(n + 1) - 0.7 * static_cast<double>(k);
  const auto fwd = forward_with_taps(model, random_images({1, 1, 4, 4}, 2), {1});
  const std::vector<int> y{2};
  Tensor half({4, 4}, 0.0);
  for (std::size_t i = 0; i < 8; ++i) half[i] = 1.0;
  const double full = space_loss(fwd.tape, y, 1, Tensor({4, 4}, 1.0)).value().item();
  EXPECT_NEAR(space_loss(fwd.tape, y, 1, half).value().item(), 0.5 * full, 1e-6);
}

TEST(SpaceLoss, ShapeMismatchNamesBothShapes) {
  const auto model = build_model(mini_vgg_spec(3, 32, 4), 2);
  const auto fwd = forward_with_taps(model, random_images({1, 3, 32, 32}, 1), {5});
  const std::vector<int> y{0};
  try {
    space_loss(fwd.tape, y, 5, Tensor({7, 7}, 1.0));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("7x7"), std::string::npos) << what;
    EXPECT_NE(what.find("8x8"), std::string::npos) << what;
  }
}

TEST(ConstraintLosses, NonnegativeOverRandomInstances) {
  const auto model = build_model(mini_vgg_spec(3, 32, 4), 6);
  Rng rng(2);
  for (int t = 0; t < 5; ++t) {
    const auto fwd = forward_with_taps(model, random_images({2, 3, 32, 32}, 10 + t), {4});
    const std::vector<int> y{static_cast<int>(rng.below(4)), static_cast<int>(rng.below(4))};
    Tensor bg({2, 16, 16});
    for (auto& v : bg.data()) v = rng.bernoulli(0.5);
    ConstraintNoise noise;
    noise.J = 2;
    noise.delta = 0.1;
    EXPECT_GE(space_loss(fwd.tape, y, 4, bg, noise).value().item(), 0.0);
    const auto p = make_channel_profile(profile_matrix(4, 4, std::vector<double>{3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5, 8, 9, 7, 9, 3}), 0.5);
    EXPECT_GE(channel_loss(fwd.tape, y, 4, p, noise).total().value().item(), 0.0);
  }
}

TEST(ConstraintLosses, FirstOrderFallbackIsExactForALinearHead) {
  const auto model = toy_model();
  const auto fwd = forward_with_taps(model, random_images({2, 1, 4, 4}, 2), {1});
  const std::vector<int> y{0, 2};
  Tensor bg({2, 4, 4}, 0.0);
  for (std::size_t i = 0; i < 32; i += 3) bg[i] = 1.0;
  ConstraintNoise exact, approx;
  approx.double_backward = false;
  EXPECT_NEAR(space_loss(fwd.tape, y, 1, bg, approx).value().item(),
              space_loss(fwd.tape, y, 1, bg, exact).value().item(), 1e-6);
}

// ---- combined loss --------------------------------------------------------------------------------

TEST(CombinedLoss, ZeroWeightsAndEmptyLayersAreCrossEntropyBitExact) {
  const auto model = build_model(mini_vgg_spec(3, 32, 4), 2);
  const auto data = fx::small_synth(2, 1);
  const std::vector<std::int64_t> ids{0, 1, 2, 3};
  const auto x = data.train.batch(ids);
  const auto y = data.train.batch_labels(ids);
  const double ce = cross_entropy_loss(model, x, y).total.value().item();
  BackgroundCache bc(data.train_masks, 3);

  TreatmentConfig zero;
  zero.space_layers = {5, 6};
  zero.channel_layers = {6};
  zero.lambda_ch = zero.lambda_sp = 0.0;
  TreatmentContext ctx{&zero, {}, &bc, 0};
  EXPECT_EQ(combined_loss(model, x, y, ids, ctx).total.value().item(), ce);

  TreatmentConfig empty;
  TreatmentContext ctx2{&empty, {}, &bc, 0};
  EXPECT_EQ(combined_loss(model, x, y, ids, ctx2).total.value().item(), ce);
}

TEST(CombinedLoss, UnitWeightsAddTheBatchAveragedParts) {
  const auto model = build_model(mini_vgg_spec(3, 32, 4), 2);
  const auto data = fx::small_synth(2, 1);
  const std::vector<std::int64_t> ids{0, 1, 2, 3};
  const auto x = data.train.batch(ids);
  const auto y = data.train.batch_labels(ids);
  BackgroundCache bc(data.train_masks, 3);
  TreatmentConfig tc;
  tc.space_layers = {5, 6};
  tc.channel_layers = {6};
  TreatmentContext ctx{&tc, {}, &bc, 0};
  ctx.profiles[6] = make_channel_profile(profile_matrix(6, 4, std::vector<double>(32, 1.0)), std::vector<double>(4, 2.0));
  auto out = combined_loss(model, x, y, ids, ctx);
  EXPECT_NEAR(out.total.value().item(), out.parts["l_orig"] + out.parts["l_ch"] + out.parts["l_sp"], 1e-12);
  EXPECT_GT(out.parts["l_ch"], 0.0);
  EXPECT_GT(out.parts["l_sp"], 0.0);
}

TEST(CombinedLoss, RowsWithoutMasksContributeNothing) {
  const auto model = build_model(mini_vgg_spec(3, 32, 4), 2);
  const auto data = fx::small_synth(2, 1);
  const std::vector<std::int64_t> ids{0, 1};
  const auto x = data.train.batch(ids);
  const auto y = data.train.batch_labels(ids);
  MaskSet none;
  BackgroundCache bc(none, 3);
  TreatmentConfig tc;
  tc.space_layers = {6};
  TreatmentContext ctx{&tc, {}, &bc, 0};
  auto out = combined_loss(model, x, y, ids, ctx);
  EXPECT_EQ(out.parts["l_sp"], 0.0);
  EXPECT_EQ(ctx.missing_masks, 2);
}

TEST(CombinedLoss, BackgroundCacheBuildsRescaledMasks) {
  const auto data = fx::small_synth(1, 1);
  BackgroundCache bc(data.train_masks, 2);
  const Mask* m = bc.get(0, 8, 8);
  ASSERT_NE(m, nullptr);
  EXPECT_EQ(*m, background_mask(data.train_masks.objects.at(0), 2, 8, 8));
  EXPECT_EQ(bc.get(999, 8, 8), nullptr);
}

// ---- configuration and the treat driver ----------------------------------------------------------

TEST(TreatmentConfig, ValidationErrors) {
  const auto spec = mini_vgg_spec(3, 32, 4);
  TreatmentConfig c;
  c.lambda_sp = -1.0;
  EXPECT_THROW(c.validate(spec), ConfigError);
  c = {};
  c.space_layers = {7};
  EXPECT_THROW(c.validate(spec), ConfigError);
  c = {};
  c.J = 0;
  EXPECT_THROW(c.validate(spec), ConfigError);
  c = {};
  c.delta = -0.1;
  EXPECT_THROW(c.validate(spec), ConfigError);
  c = {};
  c.space_layers = {5, 6};
  EXPECT_NO_THROW(c.validate(spec));
  EXPECT_TRUE(c.constrained());
  c.lambda_sp = 0.0;
  EXPECT_FALSE(c.constrained());
}

TEST(Treat, ZeroWeightReproducesBaselineFineTune) {
  const auto data = fx::small_synth(10, 5);
  auto model = build_model(mini_vgg_spec(3, 32, 4), 3);
  TreatmentConfig tc;
  tc.space_layers = {5, 6};
  tc.lambda_sp = 0.0;
  tc.hyper.epochs = 2;
  tc.hyper.lr = 0.005;
  tc.hyper.seed = 9;
  const auto out = treat(model, data.train, data.test, data.train_masks, {}, tc);
  auto ref = model.clone();
  const auto rows = train_baseline(ref, data.train, &data.test, tc.hyper);
  EXPECT_TRUE(same_params(out.model, ref));
  EXPECT_EQ(out.treated_acc, rows.back().test_acc);
  EXPECT_EQ(out.base_acc, accuracy(model, data.test));
}

TEST(Treat, ProfilesFromAnotherModelAreRefused) {
  const auto data = fx::small_synth(3, 1);
  const auto model = build_model(mini_vgg_spec(3, 32, 4), 3);
  const auto other = build_model(mini_vgg_spec(3, 32, 4), 4);
  TreatmentConfig tc;
  tc.channel_layers = {6};
  tc.hyper.epochs = 1;
  auto m = profile_matrix(6, 4, std::vector<double>(32, 1.0));
  m.spec_hash = other.spec().hash();
  m.model_hash = other.content_hash();
  const std::vector<CorrelationMatrix> ms{m};
  EXPECT_THROW(treat(model, data.train, data.test, data.train_masks, ms, tc), ConfigError);
  auto bad_spec = m;
  bad_spec.spec_hash = lenet5_spec().hash();
  bad_spec.model_hash = model.content_hash();
  const std::vector<CorrelationMatrix> ms2{bad_spec};
  EXPECT_THROW(treat(model, data.train, data.test, data.train_masks, ms2, tc), ConfigError);
}

TEST(Treat, MetricsFilesHaveTheDocumentedHeaders) {
  const auto data = fx::small_synth(4, 2);
  const auto model = build_model(mini_vgg_spec(3, 32, 4), 3);
  TreatmentConfig tc;
  tc.space_layers = {6};
  tc.hyper.epochs = 1;
  tc.hyper.lr = 0.005;
  const auto out = treat(model, data.train, data.test, data.train_masks, {}, tc);
  const auto dir = fx::scratch_dir("treat_csv");
  write_treatment_metrics(out, dir / "m.csv");
  write_per_class(out, dir / "p.csv");
  EXPECT_EQ(fx::slurp(dir / "m.csv").substr(0, 30), "epoch,l_orig,l_ch,l_sp,test_ac");
  EXPECT_EQ(fx::slurp(dir / "p.csv").substr(0, 31), "class,base_acc,treated_acc,delt");
  EXPECT_EQ(out.treated_per_class.size(), 4u);
}
