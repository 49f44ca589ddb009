#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

#include "normshift/datagen.hpp"
#include "normshift/evalkit.hpp"
#include "normshift/trainer.hpp"
#include "support.hpp"

using namespace normshift;
using normshift::testing::TempDir;

namespace {

double mean_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(static_cast<double>(a[i]) - b[i]);
  return s / static_cast<double>(a.size());
}

double ink(const Tensor<float>& x) {
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i];
  return s;
}

}  // namespace

TEST(Source, DeterministicBalancedInRange) {
  const auto a = gen_source(3, 200, 10), b = gen_source(3, 200, 10), c = gen_source(4, 200, 10);
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_FALSE(a.images == c.images);
  EXPECT_EQ(a.images.shape(), (Shape{200, 3, 24, 24}));
  std::vector<int> count(10, 0);
  for (auto y : a.labels) ++count.at(static_cast<std::size_t>(y));
  for (int k : count) EXPECT_EQ(k, 20);
  for (std::size_t i = 0; i < a.images.size(); ++i) {
    ASSERT_GE(a.images[i], 0.f);
    ASSERT_LE(a.images[i], 1.f);
  }
  EXPECT_EQ(a.manifest.at("n"), 200);
}

TEST(Source, PrefixStable) {
  // image i depends only on (seed, i)
  const auto small = gen_source(5, 20, 10), big = gen_source(5, 60, 10);
  EXPECT_EQ(small.images, big.images.slice_rows(0, 20));
}

TEST(Source, RejectsBadArguments) {
  EXPECT_THROW(gen_source(0, 10, 1), ValidationError);
  EXPECT_THROW(gen_source(0, 10, 11), ValidationError);
}

TEST(DomainSpec, ParseAndTag) {
  const auto s = parse_domain_spec("corruption:box_blur:3", 7);
  EXPECT_EQ(s.kind, DomainKind::Corruption);
  EXPECT_EQ(s.level, 3);
  EXPECT_EQ(s.seed, 7u);
  EXPECT_EQ(s.tag(), "corruption:box_blur:3");
  EXPECT_EQ(parse_domain_spec("style:invert").tag(), "style:invert");
  EXPECT_EQ(parse_domain_spec("source").kind, DomainKind::Source);
  for (const char* bad : {"corruption:box_blur:9", "corruption:box_blur:0", "corruption:fog:1", "style:sketch",
                          "corruption:box_blur", "", "source:1", "corruption:box_blur:x"})
    EXPECT_THROW(parse_domain_spec(bad), ValidationError) << bad;
}

TEST(Corruption, LevelZeroIsIdentity) {
  const auto ds = gen_source(1, 10, 10);
  for (auto type : kCorruptionTypes) EXPECT_EQ(apply_corruption(ds.images, type, 0, 1), ds.images) << type;
}

TEST(Corruption, DistortionGrowsWithLevel) {
  const auto ds = gen_source(2, 64, 10);
  for (auto type : kCorruptionTypes) {
    double prev = 0;
    for (int level = 1; level <= 5; ++level) {
      const double d = mean_abs_diff(apply_corruption(ds.images, type, level, 11), ds.images);
      EXPECT_GT(d, prev) << type << " level " << level;
      prev = d;
    }
  }
}

TEST(Corruption, StaysInUnitRangeExceptGaussian) {
  const auto ds = gen_source(2, 16, 10);
  for (auto type : kCorruptionTypes) {
    if (type == "gaussian_noise") continue;
    const auto y = apply_corruption(ds.images, type, 5, 3);
    const auto [lo, hi] = std::minmax_element(y.data().begin(), y.data().end());
    EXPECT_GE(*lo, 0.f) << type;
    EXPECT_LE(*hi, 1.f) << type;
  }
}

TEST(Corruption, GaussianNoiseHasTableStd) {
  const Tensor<float> flat(Shape{64, 3, 24, 24}, 0.5f);
  for (int level = 1; level <= 5; ++level) {
    const auto y = apply_corruption(flat, "gaussian_noise", level, 17);
    double s = 0, q = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      s += y[i] - 0.5;
      q += (y[i] - 0.5) * (y[i] - 0.5);
    }
    const double n = static_cast<double>(y.size());
    const double sd = std::sqrt(q / n - (s / n) * (s / n));
    const double want = corruption_table("gaussian_noise")[static_cast<std::size_t>(level - 1)];
    EXPECT_NEAR(sd, want, 0.05 * want) << level;
    EXPECT_NEAR(s / n, 0.0, 0.05 * want) << level;
  }
}

TEST(Corruption, ImpulseFractionMatchesTable) {
  const Tensor<float> flat(Shape{32, 3, 24, 24}, 0.5f);
  const auto y = apply_corruption(flat, "impulse_noise", 4, 5);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < y.size(); ++i) hit += y[i] != 0.5f;
  const double p = corruption_table("impulse_noise")[3];
  EXPECT_NEAR(static_cast<double>(hit) / static_cast<double>(y.size()), p, 0.1 * p);
}

TEST(Corruption, SeededAndDeterministic) {
  const auto ds = gen_source(2, 10, 10);
  EXPECT_EQ(apply_corruption(ds.images, "impulse_noise", 2, 1), apply_corruption(ds.images, "impulse_noise", 2, 1));
  EXPECT_FALSE(apply_corruption(ds.images, "impulse_noise", 2, 1) == apply_corruption(ds.images, "impulse_noise", 2, 2));
  EXPECT_THROW(apply_corruption(ds.images, "fog", 1, 0), ValidationError);
  EXPECT_THROW(apply_corruption(ds.images, "contrast", 6, 0), ValidationError);
}

TEST(Style, InvertIsAnInvolution) {
  const auto ds = gen_source(6, 10, 10);
  const auto twice = apply_style(apply_style(ds.images, "invert", 0), "invert", 0);
  EXPECT_LE(max_abs_diff(twice, ds.images), 1e-6);
}

TEST(Style, DilateAddsInkAndTextureBrightensBackground) {
  const auto ds = gen_source(6, 10, 10);
  const auto d = apply_style(ds.images, "dilate", 0);
  EXPECT_GT(ink(d), ink(ds.images));
  for (std::size_t i = 0; i < d.size(); ++i) ASSERT_GE(d[i], ds.images[i]);
  const auto t = apply_style(ds.images, "texture_bg", 4);
  for (std::size_t i = 0; i < t.size(); ++i) {
    ASSERT_GE(t[i], ds.images[i]);
    ASSERT_LE(t[i], 1.f);
  }
  EXPECT_THROW(apply_style(ds.images, "sketch", 0), ValidationError);
}

TEST(Domain, LabelsKeptAndManifestNamesDomain) {
  const auto spec = parse_domain_spec("corruption:contrast:2", 3);
  const auto ds = generate_domain(spec, 30, 5);
  EXPECT_EQ(ds.labels, gen_source(3, 30, 5).labels);
  EXPECT_EQ(ds.manifest.at("domain"), "corruption:contrast:2");
}

TEST(DatasetFile, RoundTripIsExact) {
  TempDir dir("ds");
  const auto ds = generate_domain(parse_domain_spec("corruption:gaussian_noise:5", 2), 25, 10);
  write_dataset(ds, dir / "d.nsds");
  const auto back = read_dataset(dir / "d.nsds");
  EXPECT_EQ(back.images, ds.images);
  EXPECT_EQ(back.labels, ds.labels);
  EXPECT_EQ(back.manifest, ds.manifest);
}

TEST(DatasetFile, TruncationAndGarbageAreFormatErrors) {
  TempDir dir("ds-bad");
  write_dataset(gen_source(1, 10, 10), dir / "d.nsds");
  std::ifstream is(dir / "d.nsds", std::ios::binary);
  const std::string bytes{std::istreambuf_iterator<char>(is), {}};
  for (std::size_t cut : {bytes.size() - 1, bytes.size() / 2, std::size_t{6}}) {
    std::ofstream(dir / "cut.nsds", std::ios::binary | std::ios::trunc) << bytes.substr(0, cut);
    EXPECT_THROW(read_dataset(dir / "cut.nsds"), FormatError) << cut;
  }
  std::ofstream(dir / "long.nsds", std::ios::binary | std::ios::trunc) << bytes << "xx";
  EXPECT_THROW(read_dataset(dir / "long.nsds"), FormatError);
  std::ofstream(dir / "junk.nsds", std::ios::binary | std::ios::trunc) << "not a dataset at all";
  EXPECT_THROW(read_dataset(dir / "junk.nsds"), FormatError);
  EXPECT_THROW(read_dataset(dir / "missing.nsds"), IoError);
}

// The benchmark encodes a discrepancy gradient: a linear classifier fits the
// source domain and loses accuracy level by level.
TEST(Benchmark, LinearClassifierDegradesWithLevel) {
  ModelConfig mc;
  mc.conv_channels = {};
  mc.fc_widths = {};
  mc.norm.kind = NormKind::None;
  Model<float> model(mc);
  TrainConfig tc;
  tc.epochs = 8;
  tc.lr = 3e-3;
  train(model, gen_source(0, 2000, 10), tc);
  const auto specs = corruption_grid(1);
  const auto report = evaluate_grid(model, specs, 500);
  EXPECT_GE(report.rows.at(0).accuracy, 0.95);
  ASSERT_EQ(report.level_averages.size(), 5u);
  for (std::size_t l = 1; l < 5; ++l)
    EXPECT_LT(report.level_averages[l].accuracy, report.level_averages[l - 1].accuracy) << "level " << l + 1;
  EXPECT_LT(report.level_averages[0].accuracy, report.rows.at(0).accuracy);
}
