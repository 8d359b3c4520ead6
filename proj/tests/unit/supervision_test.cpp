#include <gtest/gtest.h>

#include <cmath>

#include "support/testing.hpp"
#include "twinseg/errors.hpp"
#include "twinseg/supervision.hpp"

namespace twinseg {
namespace {

using testing::random_tensor;

SegMap seg_of(const Tensor& t, MapSource src = MapSource::kSegBranch) {
  return SegMap{Var::constant(t), src};
}

SegMap column(std::vector<double> v) {
  const int64_t c = static_cast<int64_t>(v.size());
  return seg_of(Tensor(Shape{1, c, 1, 1}, std::move(v)));
}

ConfidenceMask full_mask(int64_t h, int64_t w) { return ConfidenceMask{IntMap(h, w, 1), h * w}; }

TEST(SupervisionConfig, DefaultsAndValidation) {
  SupervisionConfig c;
  EXPECT_EQ(c.sigma_c, 0.75);
  EXPECT_EQ(c.sigma_s, 0.5);
  EXPECT_EQ(c.lambda1, 0.7);
  EXPECT_EQ(c.lambda2, 0.1);
  EXPECT_EQ(c.lambda3, 0.1);
  EXPECT_EQ(c.warmup_c2s, 2000);
  EXPECT_EQ(c.warmup_s2c, 4000);
  EXPECT_EQ(c.bsp_start, 4000);
  EXPECT_NO_THROW(c.validate());
  c.sigma_c = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = SupervisionConfig{};
  c.warmup_c2s = 5000;
  EXPECT_THROW(c.validate(), ConfigError);
  c = SupervisionConfig{};
  c.lambda2 = -0.1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(MaskConfidentCls, StrictThreshold) {
  EXPECT_EQ(mask_confident_cls(column({0.8, 0.1, 0.1}), 0.75)[0].count, 1);
  EXPECT_EQ(mask_confident_cls(column({0.5, 0.3, 0.2}), 0.75)[0].count, 0);
  EXPECT_EQ(mask_confident_cls(column({0.75, 0.2, 0.05}), 0.75)[0].count, 0);
}

TEST(MaskConfidentSeg, ExcludesBackgroundAndLowConfidence) {
  const std::vector<PseudoLabelMap> bg{IntMap(1, 1, 0)}, two{IntMap(1, 1, 2)};
  EXPECT_EQ(mask_confident_seg(column({0.99, 0.005, 0.005}), bg, 0.5)[0].count, 0);
  EXPECT_EQ(mask_confident_seg(column({0.05, 0.05, 0.9}), two, 0.5)[0].count, 1);
  EXPECT_EQ(mask_confident_seg(column({0.3, 0.3, 0.4}), two, 0.5)[0].count, 0);
}

TEST(Masks, MatchBruteForceOracles) {
  Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    const int64_t k = rng.uniform_int(1, 4);
    Tensor s = testing::random_simplex(rng, 2, k + 1, 8, 8);
    // Put some maxima exactly on the thresholds.
    s[0] = 0.75;
    s[1] = 0.5;
    const auto mc = mask_confident_cls(seg_of(s, MapSource::kClsBranch), 0.75);
    const auto mc_want = testing::oracle_mask_cls(s, 0.75);
    const auto ys = argmax_labels(s);
    const auto ms = mask_confident_seg(seg_of(s), ys, 0.5);
    const auto ms_want = testing::oracle_mask_seg(s, ys, 0.5);
    for (size_t b = 0; b < 2; ++b) {
      EXPECT_EQ(mc[b].mask, mc_want[b].mask);
      EXPECT_EQ(mc[b].count, mc_want[b].count);
      EXPECT_EQ(ms[b].mask, ms_want[b].mask);
      EXPECT_EQ(ms[b].count, ms_want[b].count);
    }
  }
}

TEST(LossC2s, UniformPredictionGivesLogChannels) {
  const Tensor u(Shape{1, 3, 2, 2}, 1.0 / 3.0);
  Rng rng(2);
  const std::vector<PseudoLabelMap> y{testing::random_labels(rng, 2, 2, 3)};
  EXPECT_NEAR(loss_c2s(seg_of(u), y, {full_mask(2, 2)}).value()[0], std::log(3.0), 1e-12);
}

TEST(LossC2s, EmptyMaskIsZeroAndPerfectIsZero) {
  const Tensor u(Shape{1, 3, 2, 2}, 1.0 / 3.0);
  const std::vector<PseudoLabelMap> y{IntMap(2, 2, 1)};
  EXPECT_EQ(loss_c2s(seg_of(u), y, {ConfidenceMask{IntMap(2, 2, 0), 0}}).value()[0], 0.0);
  Tensor p(Shape{1, 3, 1, 1}, std::vector<double>{0.0, 0.0, 1.0});
  ConfidenceMask one{IntMap(1, 1, 1), 1};
  EXPECT_EQ(loss_c2s(seg_of(p), {IntMap(1, 1, 2)}, {one}).value()[0], 0.0);
}

TEST(LossC2s, InvalidLabelIsContractError) {
  const Tensor u(Shape{1, 3, 1, 1}, 1.0 / 3.0);
  ConfidenceMask one{IntMap(1, 1, 1), 1};
  EXPECT_THROW(loss_c2s(seg_of(u), {IntMap(1, 1, 3)}, {one}), ContractError);
  EXPECT_THROW(loss_c2s(seg_of(u), {IntMap(1, 1, -1)}, {one}), ContractError);
  EXPECT_NO_THROW(loss_c2s(seg_of(u), {IntMap(1, 1, kIgnoreLabel)}, {one}));
}

TEST(LossC2s, CountsMaskedNonIgnorePixelsOverTheBatch) {
  // Pixel A: p = 0.5 on its label (masked); pixel B masked but ignore;
  // pixel C unmasked. Mean over the single counted pixel is ln 2.
  Tensor p(Shape{1, 2, 1, 3}, std::vector<double>{0.5, 0.9, 0.1, 0.5, 0.1, 0.9});
  ConfidenceMask m{IntMap(1, 3), 2};
  m.mask.data = {1, 1, 0};
  PseudoLabelMap y(1, 3);
  y.data = {1, kIgnoreLabel, 0};
  EXPECT_NEAR(loss_c2s(seg_of(p), {y}, {m}).value()[0], std::log(2.0), 1e-12);
}

TEST(LossS2c, UniformEmptyAndPerfectCases) {
  const Tensor u(Shape{1, 3, 1, 1}, 0.4);
  ConfidenceMask one{IntMap(1, 1, 1), 1};
  EXPECT_NEAR(loss_s2c(seg_of(u, MapSource::kClsBranch), {IntMap(1, 1, 2)}, {one}).value()[0],
              std::log(3.0), 1e-12);
  EXPECT_EQ(loss_s2c(seg_of(u, MapSource::kClsBranch), {IntMap(1, 1, 2)},
                     {ConfidenceMask{IntMap(1, 1, 0), 0}})
                .value()[0],
            0.0);
  const Tensor p(Shape{1, 3, 1, 1}, std::vector<double>{0.0, 0.0, 0.8});
  EXPECT_NEAR(loss_s2c(seg_of(p, MapSource::kClsBranch), {IntMap(1, 1, 2)}, {one}).value()[0], 0.0,
              1e-5);
}

TEST(LossCls, ExamplesAndSymmetry) {
  EXPECT_NEAR(loss_cls(Var::constant(Tensor(Shape{1, 2}, 0.0)), Tensor(Shape{1, 2}, std::vector<double>{1, 0}))
                  .value()[0],
              std::log(2.0), 1e-15);
  EXPECT_LT(loss_cls(Var::constant(Tensor(Shape{1, 3}, std::vector<double>{-20, 20, -20})),
                     Tensor(Shape{1, 3}, std::vector<double>{0, 1, 0}))
                .value()[0],
            1e-8);
  Rng rng(3);
  const Tensor c = random_tensor(rng, {1, 3}, -3, 3);
  const Tensor y(Shape{1, 3}, std::vector<double>{1, 0, 1});
  const Tensor cp(Shape{1, 3}, std::vector<double>{c[2], c[0], c[1]});
  const Tensor yp(Shape{1, 3}, std::vector<double>{y[2], y[0], y[1]});
  EXPECT_NEAR(loss_cls(Var::constant(c), y).value()[0], loss_cls(Var::constant(cp), yp).value()[0], 1e-15);
}

TEST(LossAffinity, DegenerateAndUniformCases) {
  const Tensor half(Shape{1, 4, 4}, 0.5);
  EXPECT_EQ(loss_affinity(Var::constant(half), {IntMap(2, 2, kIgnoreLabel)}).value()[0], 0.0);
  PseudoLabelMap y(2, 2);
  y.data = {0, 1, 1, 2};
  EXPECT_NEAR(loss_affinity(Var::constant(half), {y}).value()[0], std::log(2.0), 1e-12);
  Tensor perfect(Shape{1, 4, 4});
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 4; ++j) perfect.at(0, i, j) = y.data[i] == y.data[j] ? 1.0 : 0.0;
  EXPECT_NEAR(loss_affinity(Var::constant(perfect), {y}).value()[0], 0.0, 1e-12);
}

TEST(ReliableLabelsLow, UnmaskedPixelsBecomeIgnore) {
  PseudoLabelMap y(4, 4, 2);
  ConfidenceMask m{IntMap(4, 4, 1), 16};
  m.mask(1, 1) = 0;
  m.count = 15;
  const PseudoLabelMap low = reliable_labels_low(y, m, 2, 2);
  // Pixel-center sampling picks source (1,1), (1,3), (3,1), (3,3).
  EXPECT_EQ(low.data, (std::vector<int32_t>{kIgnoreLabel, 2, 2, 2}));
}

class LossGradients : public ::testing::Test {
 protected:
  Rng rng{7};
};

TEST_F(LossGradients, AllFourLossesOnTwentyInstances) {
  for (int t = 0; t < 20; ++t) {
    const int64_t k = rng.uniform_int(1, 3), h = rng.uniform_int(2, 4), w = rng.uniform_int(2, 4);
    std::vector<PseudoLabelMap> y{testing::random_labels(rng, h, w, int(k) + 1, 0.2),
                                  testing::random_labels(rng, h, w, int(k) + 1, 0.2)};
    std::vector<ConfidenceMask> m{testing::random_mask(rng, h, w), testing::random_mask(rng, h, w)};
    m[0].mask.data[0] = 1;
    m[0].count = 0;
    for (auto& mm : m) {
      mm.count = 0;
      for (int32_t v : mm.mask.data) mm.count += v;
    }
    y[0].data[0] = 1;

    auto c2s = [&](const Var& logits) { return loss_c2s(SegMap{softmax_channels(logits)}, y, m); };
    const auto r1 = testing::check_gradient(c2s, random_tensor(rng, {2, k + 1, h, w}, -2, 2));
    EXPECT_LE(r1.max_rel_error, 1e-4) << "c2s instance " << t;

    auto s2c = [&](const Var& s) { return loss_s2c(SegMap{s, MapSource::kClsBranch}, y, m); };
    const auto r2 = testing::check_gradient(s2c, random_tensor(rng, {2, k + 1, h, w}, 0.05, 1.0));
    EXPECT_LE(r2.max_rel_error, 1e-4) << "s2c instance " << t;

    const Tensor labels = [&] {
      Tensor l(Shape{2, k + 1});
      for (int64_t i = 0; i < l.numel(); ++i) l[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
      return l;
    }();
    auto cls = [&](const Var& c) { return loss_cls(c, labels); };
    const auto r3 = testing::check_gradient(cls, random_tensor(rng, {2, k + 1}, -4, 4));
    EXPECT_LE(r3.max_rel_error, 1e-4) << "cls instance " << t;

    const int64_t tt = h * w;
    std::vector<PseudoLabelMap> low{testing::random_labels(rng, h, w, 3, 0.2),
                                    testing::random_labels(rng, h, w, 3, 0.2)};
    const Tensor wgt = random_tensor(rng, {2});
    const Tensor bias = random_tensor(rng, {1});
    auto aff = [&](const Var& att) {
      return loss_affinity(mlp_affinity(att, Var::constant(wgt), Var::constant(bias)), low);
    };
    const auto r4 = testing::check_gradient(aff, random_tensor(rng, {2, 2, tt, tt}, -2, 2));
    EXPECT_LE(r4.max_rel_error, 1e-4) << "affinity instance " << t;
  }
}

TEST(StopGradient, LabelsAndMasksCarryNoGradient) {
  // The label/mask producers see a parameter; the losses must not send
  // anything back to it.
  Rng rng(8);
  Var producer = Var::parameter(random_tensor(rng, {1, 3, 4, 4}, -1, 1));
  const SegMap produced{softmax_channels(producer)};
  const auto y = argmax_labels(produced.probs.value());
  const auto m = mask_confident_cls(produced, 0.3);
  Var consumer = Var::parameter(random_tensor(rng, {1, 3, 4, 4}, -1, 1));
  backward(loss_c2s(SegMap{softmax_channels(consumer)}, y, m));
  EXPECT_FALSE(producer.has_grad());
  EXPECT_TRUE(consumer.has_grad());
}

TEST(TotalLoss, GatingFollowsWarmups) {
  const SupervisionConfig cfg;
  LossParts p{Var::constant(Tensor(Shape{1}, 1.0)), Var::constant(Tensor(Shape{1}, 0.5)),
              Var::constant(Tensor(Shape{1}, 0.4)), Var::constant(Tensor(Shape{1}, 0.2))};
  const LossReport early = total_loss(p, cfg, 1000);
  EXPECT_NEAR(early.total, 1.0 + 0.1 * 0.2, 1e-12);
  EXPECT_FALSE(early.active.c2s);
  EXPECT_FALSE(early.active.s2c);
  const LossReport mid = total_loss(p, cfg, 3000);
  EXPECT_NEAR(mid.total, 1.0 + 0.7 * 0.5 + 0.1 * 0.2, 1e-12);
  const LossReport late = total_loss(p, cfg, 5000);
  EXPECT_NEAR(late.total, 1.41, 1e-12);
  EXPECT_TRUE(late.active.cls && late.active.c2s && late.active.s2c && late.active.aff);
}

TEST(TotalLoss, EarlyTotalIgnoresCrossTerms) {
  const SupervisionConfig cfg;
  LossParts a{Var::constant(Tensor(Shape{1}, 0.3)), Var::constant(Tensor(Shape{1}, 9.0)),
              Var::constant(Tensor(Shape{1}, 7.0)), Var()};
  LossParts b = a;
  b.l_c2s = Var::constant(Tensor(Shape{1}, 0.01));
  b.l_s2c = Var::constant(Tensor(Shape{1}, 123.0));
  EXPECT_EQ(total_loss(a, cfg, 1999).total, total_loss(b, cfg, 1999).total);
  EXPECT_THROW(total_loss(a, cfg, -1), ContractError);
}

}  // namespace
}  // namespace twinseg
