#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "oracles.hpp"
#include "triadpi/errors.hpp"
#include "triadpi/nets.hpp"
#include "triadpi/phantom.hpp"
#include "triadpi/pimethods.hpp"

using namespace triadpi;
using namespace triadpi::pimethods;

namespace {

// 10 mm voxels: one voxel is exactly 1 mL.
const Spacing kMl{10, 10, 10};

// Hard mask over a 1x1xK line with `n` classes; labels per voxel.
Tensor<float> hard_mask(const std::vector<int>& labels, int n) {
  Tensor<float> t(n, Grid3{1, 1, int(labels.size())});
  for (std::size_t i = 0; i < labels.size(); ++i) t.data()[labels[i] * labels.size() + i] = 1.0f;
  return t;
}

// A mask with `k` voxels of class 1 among 10.
Tensor<float> class1_count(int k) {
  std::vector<int> l(10, 0);
  for (int i = 0; i < k; ++i) l[i] = 1;
  return hard_mask(l, 2);
}

nets::SoftMaskSet three_heads(int lo, int mid, int hi) {
  nets::SoftMaskSet s;
  s.probs = {class1_count(lo), class1_count(mid), class1_count(hi)};
  s.head_names = {"lower", "mean", "upper"};
  return s;
}

}  // namespace

TEST(MaskVolumes, TiesGoToBackground) {
  Tensor<float> p(4, Grid3{3, 3, 3}, 0.25f);
  for (double v : mask_volumes(p, Spacing{})) EXPECT_EQ(v, 0.0);
}

TEST(MaskVolumes, ThreeVoxelsAtOneCubicMillimetre) {
  const auto p = hard_mask({1, 1, 1, 0, 2}, 3);
  const auto v = mask_volumes(p, Spacing{1, 1, 1});
  EXPECT_DOUBLE_EQ(v[0], 0.003);
  EXPECT_DOUBLE_EQ(v[1], 0.001);
}

TEST(MaskVolumes, HardMaskEqualsLabelCounting) {
  const auto c = phantom::generate_phantom(phantom::PhantomSpec::standard(), 21);
  const auto oh = phantom::one_hot<float>(c.labels, c.grid, 4);
  const auto v = mask_volumes(oh, c.spacing_mm);
  for (int k = 0; k < 3; ++k) EXPECT_DOUBLE_EQ(v[k], c.true_volumes_mL[k]);
}

TEST(MaskVolumes, AgreesWithNaiveLoop) {
  Rng rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    const auto p = tensor_cast<float>(oracle::random_probs(4, Grid3{5, 6, 7}, rng));
    const Spacing sp{1.5, 0.7, 2.0};
    EXPECT_EQ(mask_volumes(p, sp), oracle::argmax_volumes(p, sp.voxel_mm3()));
  }
}

TEST(TriadIntervals, IdenticalHeadsCollapse) {
  const auto v = triad_intervals(three_heads(4, 4, 4), kMl);
  EXPECT_EQ(v.classes[0].lower, 4.0);
  EXPECT_EQ(v.classes[0].mean, 4.0);
  EXPECT_EQ(v.classes[0].upper, 4.0);
  EXPECT_EQ(v.forward_passes, 1);
}

TEST(TriadIntervals, OrderedHeadsPassThrough) {
  const auto v = triad_intervals(three_heads(2, 3, 4), kMl);
  EXPECT_EQ(v.classes[0], (ClassInterval{2.0, 3.0, 4.0, false, false}));
  EXPECT_FALSE(v.any_order_violation());
}

TEST(TriadIntervals, OutOfOrderHeadsAreSortedAndFlagged) {
  const auto v = triad_intervals(three_heads(3, 2, 4), kMl);
  EXPECT_EQ(v.classes[0].lower, 2.0);
  EXPECT_EQ(v.classes[0].mean, 3.0);
  EXPECT_EQ(v.classes[0].upper, 4.0);
  EXPECT_TRUE(v.classes[0].order_violation);
  EXPECT_TRUE(v.any_order_violation());
}

TEST(TriadIntervals, NeedsThreeHeads) {
  nets::SoftMaskSet s;
  s.probs = {class1_count(2)};
  s.head_names = {"mean"};
  EXPECT_THROW(triad_intervals(s, kMl), ConfigError);
}

TEST(ConfidenceThresholding, HandCountedVolumes) {
  Tensor<float> p(2, Grid3{1, 1, 3});
  const float c1[3] = {0.2f, 0.6f, 0.9f};
  for (int i = 0; i < 3; ++i) {
    p.data()[3 + i] = c1[i];
    p.data()[i] = 1 - c1[i];
  }
  const auto v = threshold_volumes(p, {0.5, 0.8}, kMl);
  EXPECT_EQ(v[0][0], 2.0);
  EXPECT_EQ(v[1][0], 1.0);
}

TEST(ConfidenceThresholding, CertainProbabilitiesHaveNoSpread) {
  const auto s = ct_stats(class1_count(10), uniform_thresholds(20), kMl);
  EXPECT_EQ(s.mu_mL[0], 10.0);
  EXPECT_EQ(s.sigma_mL[0], 0.0);
  EXPECT_EQ(s.n_samples, 20);
  EXPECT_EQ(s.forward_passes, 1);
}

TEST(ConfidenceThresholding, ThresholdValidation) {
  const auto p = class1_count(3);
  EXPECT_THROW(threshold_volumes(p, {0.5}, kMl), ConfigError);
  EXPECT_THROW(threshold_volumes(p, {0.6, 0.5}, kMl), ConfigError);
  EXPECT_THROW(threshold_volumes(p, {0.0, 0.5}, kMl), ConfigError);
  const auto t = uniform_thresholds(20);
  EXPECT_DOUBLE_EQ(t.front(), 0.01);
  EXPECT_DOUBLE_EQ(t.back(), 0.99);
}

TEST(SamplingStats, BesselStandardDeviation) {
  const auto s = stats_from_samples({{1.0}, {2.0}, {3.0}, {4.0}}, "x");
  EXPECT_DOUBLE_EQ(s.mu_mL[0], 2.5);
  EXPECT_DOUBLE_EQ(s.sigma_mL[0], std::sqrt(5.0 / 3.0));
  EXPECT_THROW(stats_from_samples({{1.0}}, "x"), ConfigError);
}

TEST(IntervalFromStats, PaperZAndClamping) {
  EXPECT_EQ(interval_z(0.1), 1.65);
  EXPECT_NEAR(interval_z(0.05), 1.959964, 1e-6);
  SamplingStats s;
  s.method_id = "mc";
  s.mu_mL = {10, 5, 1};
  s.sigma_mL = {2, 0, 1};
  const auto v = interval_from_stats(s, 0.1);
  EXPECT_NEAR(v.classes[0].lower, 6.7, 1e-12);
  EXPECT_NEAR(v.classes[0].upper, 13.3, 1e-12);
  EXPECT_EQ(v.classes[1].lower, 5.0);
  EXPECT_EQ(v.classes[1].upper, 5.0);
  EXPECT_EQ(v.classes[2].lower, 0.0);
  EXPECT_NEAR(v.classes[2].upper, 2.65, 1e-12);
}

TEST(RegCnn, SortThenClamp) {
  auto v = regcnn_from_outputs({-0.5, 2.0, 3.0});
  EXPECT_EQ(v.classes[0], (ClassInterval{0.0, 2.0, 3.0, false, false}));
  v = regcnn_from_outputs({3.0, 2.0, 4.0});
  EXPECT_EQ(v.classes[0].lower, 2.0);
  EXPECT_EQ(v.classes[0].mean, 3.0);
  EXPECT_EQ(v.classes[0].upper, 4.0);
  EXPECT_TRUE(v.classes[0].order_violation);
  EXPECT_THROW(regcnn_from_outputs({1.0, 2.0}), ShapeError);
}

TEST(McDropout, SeededCountedAndSpread) {
  // A few steps of training move the net off its background-only start so
  // the passes disagree on some voxels.
  const auto spec = phantom::PhantomSpec::standard();
  std::vector<phantom::PhantomCase> cases;
  for (int i = 0; i < 4; ++i) cases.push_back(phantom::generate_phantom(spec, 300 + i));
  std::vector<nets::SegExample> ex;
  std::vector<const Tensor<float>*> imgs;
  for (const auto& c : cases) {
    ex.push_back({&c.intensities, &c.labels});
    imgs.push_back(&c.intensities);
  }
  nets::NetSpec ns;
  ns.dropout_rate = 0.2;
  nets::SegNet<float> net(ns, 3);
  net.set_input_norm(nets::fit_input_norm(imgs));
  nets::TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.epochs = 5;
  nets::train(net, ex, cfg);

  const auto& x = cases[0].intensities;
  const auto a = mc_stats(net, x, 20, 7, cases[0].spacing_mm);
  EXPECT_EQ(a, mc_stats(net, x, 20, 7, cases[0].spacing_mm));
  EXPECT_EQ(a.forward_passes, 20);
  EXPECT_EQ(a.n_samples, 20);
  EXPECT_GT(*std::max_element(a.sigma_mL.begin(), a.sigma_mL.end()), 0.0);
  EXPECT_THROW(mc_stats(net, x, 1, 7, cases[0].spacing_mm), ConfigError);

  const nets::SegNet<float> plain(nets::NetSpec{}, 3);
  EXPECT_THROW(mc_stats(plain, x, 20, 7, cases[0].spacing_mm), ConfigError);
}

namespace {

// Image whose first channel is the label map, so a predictor can read the
// (transformed) ground truth straight off its input.
struct LabelOracle {
  phantom::PhantomCase c;
  Tensor<float> image;

  LabelOracle() : c(phantom::generate_phantom(phantom::PhantomSpec::standard(), 31)), image(1, c.grid) {
    for (std::size_t v = 0; v < c.labels.size(); ++v) image.data()[v] = float(c.labels[v]);
  }

  Predictor predictor(int* calls) const {
    return [calls](const Tensor<float>& x) {
      ++*calls;
      std::vector<std::uint8_t> lab(x.voxels());
      for (std::size_t v = 0; v < lab.size(); ++v) lab[v] = std::uint8_t(std::lround(x.data()[v]));
      return phantom::one_hot<float>(lab, x.grid(), 4);
    };
  }
};

}  // namespace

TEST(Tta, IdentityAugmentationsGiveTheSinglePassVolume) {
  const LabelOracle o;
  int calls = 0;
  TtaOptions none{false, false, false, false};
  const auto s = tta_stats(o.predictor(&calls), o.image, 5, 1, o.c.spacing_mm, none);
  EXPECT_EQ(calls, 5);
  EXPECT_EQ(s.forward_passes, 5);
  for (int k = 0; k < 3; ++k) {
    EXPECT_EQ(s.sigma_mL[k], 0.0);
    EXPECT_DOUBLE_EQ(s.mu_mL[k], o.c.true_volumes_mL[k]);
  }
}

TEST(Tta, FlipsAndQuarterTurnsAreInvertedExactly) {
  const LabelOracle o;
  int calls = 0;
  TtaOptions spatial{true, true, false, false};
  const auto s = tta_stats(o.predictor(&calls), o.image, 20, 2, o.c.spacing_mm, spatial);
  for (int k = 0; k < 3; ++k) {
    EXPECT_EQ(s.sigma_mL[k], 0.0);
    EXPECT_DOUBLE_EQ(s.mu_mL[k], o.c.true_volumes_mL[k]);
  }
}

TEST(Tta, InverseUndoesEveryTransformInsideTheView) {
  Rng rng(4);
  const Grid3 g{8, 10, 10};
  const auto p = tensor_cast<float>(oracle::random_probs(3, g, rng));
  TtaOptions all;
  for (int trial = 0; trial < 30; ++trial) {
    auto aug = sample_augmentation(rng, g, all);
    aug.scale = 1.0;  // probabilities, not intensities
    aug.offset = 0.0;
    const auto back = invert_probs(augment_image(p, aug), aug);
    for (int z = 0; z < g.d; ++z)
      for (int y = 0; y < g.h; ++y)
        for (int x = 0; x < g.w; ++x) {
          const bool bg_fill = back.at(0, z, y, x) == 1.0f && back.at(1, z, y, x) == 0.0f;
          if (bg_fill && p.at(0, z, y, x) != 1.0f) continue;  // shifted out of view
          for (int c = 0; c < 3; ++c) ASSERT_EQ(back.at(c, z, y, x), p.at(c, z, y, x));
        }
  }
}

TEST(Tta, SampledAugmentationsStayInRange) {
  Rng rng(6);
  const Grid3 g{32, 32, 32};
  for (int i = 0; i < 200; ++i) {
    const auto a = sample_augmentation(rng, g, TtaOptions{});
    for (int k = 0; k < 3; ++k) EXPECT_LE(std::abs(a.shift[k]), 3);
    EXPECT_GE(a.scale, 0.9);
    EXPECT_LE(a.scale, 1.1);
    EXPECT_LE(std::abs(a.offset), 0.05);
    EXPECT_GE(a.rot90, 0);
    EXPECT_LE(a.rot90, 3);
  }
}

TEST(Tta, SeededAndCounted) {
  const nets::SegNet<float> net(nets::NetSpec{}, 1);
  const auto c = phantom::generate_phantom(phantom::PhantomSpec::standard(), 3);
  const auto a = tta_stats(net, c.intensities, 3, 5, c.spacing_mm);
  EXPECT_EQ(a, tta_stats(net, c.intensities, 3, 5, c.spacing_mm));
  EXPECT_EQ(a.forward_passes, 3);
  EXPECT_THROW(tta_stats(net, c.intensities, 1, 5, c.spacing_mm), ConfigError);
}

TEST(Records, JsonLinesRoundTripKeepsInfinity) {
  PIRecord r;
  r.case_id = "case_0001";
  r.method_id = "mc";
  r.raw = regcnn_from_outputs({1, 2, 3});
  r.raw.method_id = "mc";
  r.interval = r.raw;
  r.interval.classes[0].upper = kUnbounded;
  r.interval.classes[0].unbounded = true;
  r.interval.calibrated = true;
  r.stats = stats_from_samples({{1.0}, {3.0}}, "mc");
  r.truth_mL = {2.5};
  r.dsc = {0.75};
  r.head_volumes_mL = {{1}, {2}, {3}};
  r.wall_time_s = 0.125;
  r.forward_passes = 20;
  const auto path = std::filesystem::temp_directory_path() / "triadpi_test_records.jsonl";
  write_records(path, {r, r});
  const auto back = read_records(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0], r);
  EXPECT_THROW(read_records(path.string() + ".missing"), MissingArtifact);
}
