#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "normshift/augment.hpp"
#include "normshift/datagen.hpp"
#include "support.hpp"

using namespace normshift;

namespace {

ModelConfig small_model(NormKind kind) {
  ModelConfig cfg;
  cfg.conv_channels = {4, 8};
  cfg.fc_widths = {16};
  cfg.norm.kind = kind;
  return cfg;
}

std::vector<Tensor<float>> snapshot(Model<float>& m) {
  std::vector<Tensor<float>> out;
  for (auto* p : m.params()) out.push_back(p->value);
  for (auto& b : m.buffers()) out.push_back(*b.tensor);
  return out;
}

double ce_sum(Model<double>& m, const Tensor<double>& x, std::span<const std::int32_t> y) {
  Tape<double> t;
  t.set_track_params(false);
  return softmax_cross_entropy(m.forward(t, t.constant(x), Mode::Eval).logits, y, Reduction::Sum).loss.value()[0];
}

}  // namespace

TEST(SemanticCost, HalfSquaredDistance) {
  const Tensor<double> z(Shape{2}, {0, 0}), zs(Shape{2}, {3, 4});
  EXPECT_DOUBLE_EQ(semantic_cost(z, zs, 1, 1), 12.5);
  EXPECT_DOUBLE_EQ(semantic_cost(z, z, 1, 1), 0.0);
  EXPECT_THROW(semantic_cost(z, zs, 1, 2), ValidationError);
}

TEST(AdaConfigJson, StrictRoundTripAndValidation) {
  AdaConfig c;
  c.eta = 10;
  c.clip_lo = -1;
  const auto j = to_json(c);
  EXPECT_EQ(to_json(ada_config_from_json(j)), j);
  auto bad = j;
  bad["gamma"] = 1;
  EXPECT_THROW(ada_config_from_json(bad), ValidationError);
  AdaConfig neg;
  neg.eta = -1;
  EXPECT_THROW(validate(neg), ValidationError);
  AdaConfig zero_step;
  zero_step.step_size = 0;
  EXPECT_NO_THROW(validate(zero_step));
  zero_step.step_size = -1;
  EXPECT_THROW(validate(zero_step), ValidationError);
}

TEST(AdaMaximize, ZeroStepsOrZeroStepSizeAreIdentity) {
  Model<float> m(small_model(NormKind::ASR));
  const auto ds = gen_source(1, 12, 10);
  AdaConfig c;
  c.inner_steps = 0;
  const auto out = ada_maximize(m, ds.images, ds.labels, c);
  EXPECT_EQ(out.images, ds.images);
  EXPECT_EQ(out.labels, ds.labels);
  AdaConfig still;
  still.step_size = 0;
  still.inner_steps = 5;
  EXPECT_EQ(ada_maximize(m, ds.images, ds.labels, still).images, ds.images);
}

TEST(AdaMaximize, LabelsProvenanceRangeAndFrozenModel) {
  Model<float> m(small_model(NormKind::BN));
  const auto ds = gen_source(2, 10, 10);
  const auto before = snapshot(m);
  AdaConfig c;
  c.inner_steps = 3;
  c.step_size = 5.0;
  std::vector<std::uint32_t> idx(10);
  for (std::uint32_t i = 0; i < 10; ++i) idx[i] = 100 + i;
  const auto out = ada_maximize(m, ds.images, ds.labels, c, 2, idx);
  EXPECT_EQ(snapshot(m), before);
  EXPECT_EQ(out.labels, ds.labels);
  ASSERT_EQ(out.provenance.size(), 10u);
  EXPECT_EQ(out.provenance[3].round, 2u);
  EXPECT_EQ(out.provenance[3].source_index, 103u);
  for (std::size_t i = 0; i < out.images.size(); ++i) {
    ASSERT_GE(out.images[i], 0.f);
    ASSERT_LE(out.images[i], 1.f);
  }
  EXPECT_FALSE(out.images == ds.images);
}

TEST(AdaMaximize, ChunkSizeDoesNotMatter) {
  Model<float> m(small_model(NormKind::ASR));
  const auto ds = gen_source(3, 11, 10);
  AdaConfig a, b;
  a.inner_steps = b.inner_steps = 4;
  a.chunk = 1;
  b.chunk = 4;
  EXPECT_LE(max_abs_diff(ada_maximize(m, ds.images, ds.labels, a).images,
                         ada_maximize(m, ds.images, ds.labels, b).images),
            1e-5);
}

TEST(AdaMaximize, OneStepMatchesFiniteDifferenceGradient) {
  Model<double> m = Model<float>(small_model(NormKind::ASR)).cast<double>();
  // noise images: flat glyph regions put max-pool ties under the difference step
  const auto ds = gen_source(4, 3, 3);
  const auto x0 = normshift::testing::random_tensor<double>(ds.images.shape(), 4, 0.2, 0.8);
  AdaConfig c;
  c.eta = 0;
  c.inner_steps = 1;
  c.step_size = 1e-3;
  c.clip_lo = -1e9;
  c.clip_hi = 1e9;
  const auto x1 = ada_maximize(m, x0, ds.labels, c).images;
  Rng rng(5);
  const double h = 1e-6;
  for (int k = 0; k < 40; ++k) {
    const std::size_t i = rng() % x0.size();
    auto xp = x0, xm = x0;
    xp[i] += h;
    xm[i] -= h;
    const double fd = (ce_sum(m, xp, ds.labels) - ce_sum(m, xm, ds.labels)) / (2 * h);
    const double step = (x1[i] - x0[i]) / c.step_size;
    EXPECT_NEAR(step, fd, 1e-4 * std::max(1.0, std::abs(fd))) << "coordinate " << i;
  }
}

TEST(AdaMaximize, LargerPenaltyKeepsFeaturesCloser) {
  Model<float> m(small_model(NormKind::ASR));
  const auto ds = gen_source(5, 16, 10);
  auto feature_gap = [&](double eta) {
    AdaConfig c;
    c.eta = eta;
    c.inner_steps = 10;
    const auto out = ada_maximize(m, ds.images, ds.labels, c);
    Tape<float> t;
    t.set_track_params(false);
    const auto za = *m.forward(t, t.constant(out.images), Mode::Eval, true).features;
    const auto zs = *m.forward(t, t.constant(ds.images), Mode::Eval, true).features;
    return static_cast<double>(semantic_cost(za.value(), zs.value(), 0, 0));
  };
  EXPECT_GE(feature_gap(0.0) + 1e-9, feature_gap(100.0));
}

TEST(AdaMaximize, RejectsMismatchedInputs) {
  Model<float> m(small_model(NormKind::BN));
  const auto ds = gen_source(1, 4, 4);
  const std::vector<std::int32_t> three{0, 1, 2};
  EXPECT_THROW(ada_maximize(m, ds.images, three, AdaConfig{}), std::invalid_argument);
}
