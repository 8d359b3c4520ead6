#include <gtest/gtest.h>

#include <cmath>

#include "support/testing.hpp"
#include "twinseg/errors.hpp"
#include "twinseg/model_core.hpp"

namespace twinseg {
namespace {

using testing::random_tensor;

ImageBatch batch_of(const Tensor& px, int k) {
  return ImageBatch{px, Tensor(Shape{px.dim(0), k}, 1.0), {}};
}

Head identity_head(int64_t c) {
  Tensor w(Shape{c, c, 1, 1}, 0.0);
  for (int64_t i = 0; i < c; ++i) w.at(i, i, 0, 0) = 1.0;
  return Head{Var::constant(w), Var()};
}

TEST(ExtractFeatures, LevelShapesAt64) {
  Network net(ModelConfig{}, 1);
  Rng rng(1);
  const auto f = extract_features(batch_of(random_tensor(rng, {1, 3, 64, 64}), 3), net.encoder());
  const int64_t sizes[4] = {16, 8, 4, 2};
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(f.levels[i].dim(2), sizes[i]);
    EXPECT_EQ(f.levels[i].dim(3), sizes[i]);
    EXPECT_EQ(f.levels[i].dim(1), net.encoder().channels()[i]);
  }
  EXPECT_EQ(f.attention.shape(), (Shape{1, 4, 4, 4}));
  EXPECT_TRUE(f.attention.value().all_finite());
}

TEST(ExtractFeatures, AttentionSizeAt512) {
  ModelConfig cfg;
  cfg.encoder.widths = {4, 4, 4, 4};
  cfg.encoder.attention_heads = 1;
  Network net(cfg, 1);
  const auto f = extract_features(batch_of(Tensor(Shape{1, 3, 512, 512}, 0.1), 3), net.encoder());
  EXPECT_EQ(f.levels[3].dim(2), 16);
  EXPECT_EQ(f.attention.dim(2), 256);
}

TEST(ExtractFeatures, IndivisibleInputNamesStride) {
  Network net(ModelConfig{}, 1);
  try {
    extract_features(batch_of(Tensor(Shape{1, 3, 50, 64}), 3), net.encoder());
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("stride 32"), std::string::npos) << e.what();
  }
}

TEST(ClassifyImage, IdentityHeadReturnsChannelMaxima) {
  Tensor x(Shape{1, 2, 2, 2}, std::vector<double>{0.5, 2.0, -3.0, 1.0, -1.0, -2.0, -4.0, -1.5});
  const Var c = classify_image(Var::constant(x), identity_head(2));
  EXPECT_EQ(c.value()[0], 2.0);
  EXPECT_EQ(c.value()[1], -1.0);
}

TEST(ClassifyImage, ZeroInputZeroBiasGivesZero) {
  Rng rng(2);
  Head h{Var::constant(random_tensor(rng, {3, 5, 1, 1})), Var::constant(Tensor(Shape{3}, 0.0))};
  const Var c = classify_image(Var::constant(Tensor(Shape{1, 5, 2, 2}, 0.0)), h);
  for (int64_t i = 0; i < 3; ++i) EXPECT_EQ(c.value()[i], 0.0);
}

TEST(ClassifyImage, BatchDuplicationKeepsPerItemScores) {
  Rng rng(3);
  Head h{Var::constant(random_tensor(rng, {3, 4, 1, 1})), Var()};
  const Tensor one = random_tensor(rng, {1, 4, 2, 2});
  Tensor two(Shape{2, 4, 2, 2});
  for (int64_t i = 0; i < one.numel(); ++i) two[i] = two[one.numel() + i] = one[i];
  const Var a = classify_image(Var::constant(one), h);
  const Var b = classify_image(Var::constant(two), h);
  for (int64_t k = 0; k < 3; ++k) {
    EXPECT_EQ(b.value().at(0, k), a.value().at(0, k));
    EXPECT_EQ(b.value().at(1, k), a.value().at(0, k));
  }
}

TEST(LocalizationSeed, OneByOneInputEqualsLogits) {
  Rng rng(4);
  Head h{Var::constant(random_tensor(rng, {3, 6, 1, 1})), Var::constant(random_tensor(rng, {3}))};
  const Var x = Var::constant(random_tensor(rng, {2, 6, 1, 1}));
  const Var seed = localization_seed(x, h);
  const Var logits = classify_image(x, h);
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t k = 0; k < 3; ++k) EXPECT_NEAR(seed.value().at(b, k, 0, 0), logits.value().at(b, k), 1e-12);
}

TEST(LocalizationSeed, IdentityHeadOneHotSpike) {
  Tensor x(Shape{1, 3, 3, 3}, 0.0);
  x.at(0, 1, 2, 0) = 1.0;
  const Var seed = localization_seed(Var::constant(x), identity_head(3));
  for (int64_t k = 0; k < 3; ++k)
    for (int64_t i = 0; i < 9; ++i) {
      const double expect = (k == 1 && i == 6) ? 1.0 : 0.0;
      EXPECT_EQ(seed.value()[k * 9 + i], expect);
    }
}

TEST(LocalizationSeed, SpatialMaxMatchesLogitForChannelwiseHead) {
  // With a head that maps each feature channel to its own class with a
  // positive weight, max over space commutes with the head.
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor w(Shape{3, 3, 1, 1}, 0.0);
    for (int64_t i = 0; i < 3; ++i) w.at(i, i, 0, 0) = rng.uniform(0.1, 2.0);
    Head h{Var::constant(w), Var::constant(random_tensor(rng, {3}))};
    const Var x = Var::constant(random_tensor(rng, {1, 3, 4, 4}));
    const Tensor seed = localization_seed(x, h).value();
    const Tensor logits = classify_image(x, h).value();
    for (int64_t k = 0; k < 3; ++k) {
      double mx = -1e300;
      for (int64_t i = 0; i < 16; ++i) mx = std::max(mx, seed[k * 16 + i]);
      EXPECT_NEAR(mx, logits[k], 1e-6);
    }
  }
}

TEST(ObjectPrior, MaxOverClasses) {
  const Tensor s(Shape{1, 2, 1, 1}, std::vector<double>{0.2, 0.7});
  EXPECT_EQ(object_prior(Var::constant(s)).value()[0], 0.7);
  const Tensor z(Shape{1, 3, 2, 2}, 0.0);
  EXPECT_EQ(object_prior(Var::constant(z)).value().max_value(), 0.0);
  Rng rng(6);
  const Tensor one = random_tensor(rng, {1, 1, 3, 3}, 0.0, 1.0);
  EXPECT_EQ(object_prior(Var::constant(one)).value().storage(), one.storage());
}

TEST(UpsampleBilinear, RejectsDownsampling) {
  EXPECT_THROW(upsample_bilinear(Var::constant(Tensor(Shape{1, 1, 4, 4})), 2, 4), ContractError);
}

TEST(UpsampleBilinear, ValuesStayWithinInputRange) {
  Rng rng(7);
  const Tensor x = random_tensor(rng, {1, 2, 3, 3});
  const Tensor y = upsample_bilinear(Var::constant(x), 10, 7).value();
  EXPECT_GE(y.min_value(), x.min_value());
  EXPECT_LE(y.max_value(), x.max_value());
}

class OfdFixture : public ::testing::Test {
 protected:
  std::array<Var, 4> levels() {
    Rng rng(8);
    std::array<Var, 4> l;
    const int64_t sizes[4] = {16, 8, 4, 2};
    for (int i = 0; i < 4; ++i) l[i] = Var::constant(random_tensor(rng, {1, 3, sizes[i], sizes[i]}));
    return l;
  }
};

TEST_F(OfdFixture, UnitPriorIsBitIdentity) {
  const auto l = levels();
  const auto out = ofd_scale(l, Var::constant(Tensor(Shape{1, 1, 2, 2}, 1.0)));
  for (int i = 0; i < 4; ++i) EXPECT_EQ(out[i].value().storage(), l[i].value().storage());
}

TEST_F(OfdFixture, ZeroPriorAnnihilates) {
  const auto out = ofd_scale(levels(), Var::constant(Tensor(Shape{1, 1, 2, 2}, 0.0)));
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(out[i].value().max_value(), 0.0);
    EXPECT_EQ(out[i].value().min_value(), 0.0);
  }
}

TEST_F(OfdFixture, CornerUsesPriorCorner) {
  const auto l = levels();
  const Tensor prior(Shape{1, 1, 2, 2}, std::vector<double>{0.3, 0.9, 0.1, 0.6});
  const auto out = ofd_scale(l, Var::constant(prior));
  // Level 3 is 4×4: its corner pixel sits on the prior's corner.
  for (int64_t c = 0; c < 3; ++c) {
    EXPECT_DOUBLE_EQ(out[2].value().at(0, c, 0, 0), l[2].value().at(0, c, 0, 0) * 0.3);
    EXPECT_DOUBLE_EQ(out[2].value().at(0, c, 3, 3), l[2].value().at(0, c, 3, 3) * 0.6);
  }
}

TEST_F(OfdFixture, PriorInUnitRangeDampsMagnitudes) {
  Rng rng(9);
  const auto l = levels();
  const auto out = ofd_scale(l, Var::constant(random_tensor(rng, {1, 1, 2, 2}, 0.0, 1.0)));
  for (int i = 0; i < 4; ++i)
    for (int64_t j = 0; j < l[i].value().numel(); ++j)
      EXPECT_LE(std::abs(out[i].value()[j]), std::abs(l[i].value()[j]));
}

TEST(Segment, ColumnsSumToOne) {
  Network net(ModelConfig{}, 3);
  Rng rng(10);
  for (int trial = 0; trial < 3; ++trial) {
    const auto f = extract_features(batch_of(random_tensor(rng, {2, 3, 64, 32}, -3, 3), 3), net.encoder());
    const SegMap s = segment(f.levels, net.decoder(), net.seg_head(), 64, 32);
    EXPECT_EQ(s.source, MapSource::kSegBranch);
    const Tensor& p = s.probs.value();
    const int64_t hw = 64 * 32;
    for (int64_t b = 0; b < 2; ++b)
      for (int64_t i = 0; i < hw; ++i) {
        double sum = 0.0;
        for (int64_t k = 0; k < 4; ++k) {
          const double v = p[(b * 4 + k) * hw + i];
          EXPECT_GE(v, 0.0);
          EXPECT_LE(v, 1.0);
          sum += v;
        }
        ASSERT_NEAR(sum, 1.0, 1e-5);
      }
  }
}

TEST(Segment, SoftmaxOfEqualAndSaturatedLogits) {
  Tensor eq(Shape{1, 4, 2, 2}, 0.3);
  const Tensor u = softmax_channels(Var::constant(eq)).value();
  for (int64_t i = 0; i < u.numel(); ++i) EXPECT_NEAR(u[i], 0.25, 1e-15);
  Tensor sat(Shape{1, 3, 1, 1}, std::vector<double>{0.0, 50.0, 0.0});
  EXPECT_NEAR(softmax_channels(Var::constant(sat)).value()[1], 1.0, 1e-9);
}

TEST(Network, SameSeedSameParameters) {
  Network a(ModelConfig{}, 17), b(ModelConfig{}, 17), c(ModelConfig{}, 18);
  ASSERT_EQ(a.parameters().entries().size(), b.parameters().entries().size());
  bool any_diff = false;
  for (size_t i = 0; i < a.parameters().entries().size(); ++i) {
    EXPECT_EQ(a.parameters().entries()[i].first, b.parameters().entries()[i].first);
    EXPECT_EQ(a.parameters().entries()[i].second.value().storage(),
              b.parameters().entries()[i].second.value().storage());
    any_diff |= a.parameters().entries()[i].second.value().storage() !=
                c.parameters().entries()[i].second.value().storage();
  }
  EXPECT_TRUE(any_diff);
}

TEST(Network, InferShapes) {
  Network net(ModelConfig{}, 1);
  const InferenceOutput o = net.infer(Tensor(Shape{1, 3, 64, 96}, 0.2));
  EXPECT_EQ(o.seed_raw.shape(), (Shape{1, 3, 2, 3}));
  EXPECT_EQ(o.seg_probs.shape(), (Shape{1, 4, 64, 96}));
}

TEST(ValidateBatch, RejectsNonBinaryAndEmptyLabels) {
  ImageBatch b{Tensor(Shape{1, 3, 32, 32}), Tensor(Shape{1, 2}, std::vector<double>{0.5, 1.0}), {}};
  EXPECT_THROW(validate_batch(b, false), ContractError);
  b.labels = Tensor(Shape{1, 2}, 0.0);
  EXPECT_NO_THROW(validate_batch(b, false));
  EXPECT_THROW(validate_batch(b, true), ContractError);
}

}  // namespace
}  // namespace twinseg
