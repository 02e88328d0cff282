#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "oracles.hpp"
#include "triadpi/calibration.hpp"
#include "triadpi/errors.hpp"

using namespace triadpi;
using namespace triadpi::calibration;

namespace {

std::vector<IntervalSample> random_records(Rng& rng, int n) {
  std::vector<IntervalSample> r(n);
  for (auto& s : r) {
    const double c = 50 + 10 * rng.normal();
    const double h = 2 + 3 * rng.uniform();
    s = {c - h, c + h, c + 6 * rng.normal()};
  }
  return r;
}

// Labels drawn from softmax(z); the sample stores `scale` * z as its logits.
LogitSample tempered_sample(std::size_t n, int k, double scale, std::uint64_t seed) {
  Rng rng(seed);
  LogitSample s;
  s.n_classes = k;
  std::vector<double> z(k), p(k);
  for (std::size_t i = 0; i < n; ++i) {
    double m = -1e300, sum = 0;
    for (auto& v : z) m = std::max(m, v = 2 * rng.normal());
    for (int c = 0; c < k; ++c) sum += p[c] = std::exp(z[c] - m);
    double u = rng.uniform() * sum;
    int label = k - 1;
    for (int c = 0; c < k; ++c)
      if ((u -= p[c]) < 0) {
        label = c;
        break;
      }
    for (double v : z) s.logits.push_back(scale * v);
    s.labels.push_back(std::uint8_t(label));
  }
  return s;
}

}  // namespace

TEST(ConformalRank, FloatingPointGuard) {
  // 20 * 0.9 evaluates to 18.000000000000004.
  EXPECT_EQ(conformal_rank(19, 0.1), 18);
  EXPECT_EQ(conformal_rank(100, 0.1), 91);
  EXPECT_EQ(conformal_rank(200, 0.1), 181);
  EXPECT_EQ(conformal_rank(1, 0.1), 2);
  EXPECT_THROW(conformal_rank(0, 0.1), ConfigError);
  EXPECT_THROW(conformal_rank(10, 1.0), ConfigError);
}

TEST(ConformalQ, CraftedScores) {
  std::vector<double> s;
  for (int i = 1; i <= 19; ++i) s.push_back(0.1 * i);
  const auto f = conformal_q(s, 0.1);
  EXPECT_EQ(f.k, 18);
  EXPECT_DOUBLE_EQ(f.q, 1.8);
  EXPECT_FALSE(f.unbounded);
  EXPECT_EQ(f.scores.histogram.size(), 10u);
}

TEST(ConformalQ, TooFewRecordsIsUnbounded) {
  const auto f = conformal_q({0.3}, 0.1);
  EXPECT_TRUE(f.unbounded);
  EXPECT_TRUE(std::isinf(f.q));
}

TEST(ConformalQ, ZeroScoresGiveZero) {
  EXPECT_EQ(conformal_q(std::vector<double>(30, 0.0), 0.1).q, 0.0);
}

TEST(ConformalQ, NanScoreIsNumericalError) {
  EXPECT_THROW(conformal_q({1.0, NAN, 2.0}, 0.1), NumericalError);
}

TEST(AdditiveFit, MatchesGridSearchOracle) {
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const auto recs = random_records(rng, 19 + trial * 7);
    std::vector<oracle::Rec> o;
    for (auto& r : recs) {
      // Round so the grid holds the exact answer.
      o.push_back({std::round(r.lower * 1000) / 1000, std::round(r.upper * 1000) / 1000,
                   std::round(r.truth * 1000) / 1000});
    }
    std::vector<IntervalSample> rounded;
    for (auto& r : o) rounded.push_back({r.lower, r.upper, r.truth});
    const double q = fit_additive_q(rounded, 0.1).q;
    const double lo = -30;
    const double g = oracle::grid_smallest_q(o, 0.1, lo, 40, 0.001);
    EXPECT_NEAR(q, g, 1.5e-3) << "trial " << trial;
  }
}

TEST(MultiplicativeScore, ZeroSigmaRules) {
  EXPECT_EQ(multiplicative_score({5, 0, 5}), 0.0);
  EXPECT_TRUE(std::isinf(multiplicative_score({5, 0, 6})));
  EXPECT_DOUBLE_EQ(multiplicative_score({10, 2, 13}), 1.5);
  std::vector<StatsSample> bad{{1, -1, 1}};
  EXPECT_THROW(fit_multiplicative_q(bad, 0.1), ConfigError);
}

TEST(Apply, AdditiveHandValues) {
  ClassFactor f;
  f.q = 2;
  const auto out = apply_additive(ClassInterval{3, 5, 8}, f);
  EXPECT_EQ(out.lower, 1.0);
  EXPECT_EQ(out.mean, 5.0);
  EXPECT_EQ(out.upper, 10.0);
  f.q = 0;
  EXPECT_EQ(apply_additive(ClassInterval{3, 5, 8}, f), (ClassInterval{3, 5, 8}));
  f.q = 5;
  EXPECT_EQ(apply_additive(ClassInterval{3, 5, 8}, f).lower, 0.0);
  f.q = -1;  // a negative factor shrinks
  EXPECT_EQ(apply_additive(ClassInterval{3, 5, 8}, f).upper, 7.0);
}

TEST(Apply, MultiplicativeHandValues) {
  ClassFactor f;
  f.q = 1.65;
  const auto out = apply_multiplicative(10, 2, f);
  EXPECT_NEAR(out.lower, 6.7, 1e-12);
  EXPECT_NEAR(out.upper, 13.3, 1e-12);
  EXPECT_EQ(out.mean, 10.0);
}

TEST(Apply, UnboundedFactorGivesHalfLine) {
  ClassFactor f;
  f.q = INFINITY;
  f.unbounded = true;
  const auto out = apply_additive(ClassInterval{3, 5, 8}, f);
  EXPECT_EQ(out.lower, 0.0);
  EXPECT_TRUE(std::isinf(out.upper));
  EXPECT_TRUE(out.unbounded);
  EXPECT_TRUE(apply_multiplicative(10, 0, f).unbounded);
}

TEST(Apply, ModeMismatchIsAConfigError) {
  VolumeInterval v;
  v.classes = {ClassInterval{1, 2, 3}};
  SamplingStats s;
  s.mu_mL = {2};
  s.sigma_mL = {1};
  CalibrationFactor add, mul;
  add.classes = mul.classes = {ClassFactor{}};
  mul.mode = Mode::multiplicative;
  EXPECT_NO_THROW(apply_calibration(v, add));
  EXPECT_NO_THROW(apply_calibration(s, mul));
  EXPECT_THROW(apply_calibration(v, mul), ConfigError);
  EXPECT_THROW(apply_calibration(s, add), ConfigError);
  add.classes.push_back(ClassFactor{});
  EXPECT_THROW(apply_calibration(v, add), ShapeError);
}

TEST(Coverage, HandCounts) {
  std::vector<IntervalSample> r;
  for (int i = 0; i < 20; ++i) r.push_back({0, 1, i < 19 ? 0.5 : 2.0});
  EXPECT_DOUBLE_EQ(empirical_coverage(r), 0.95);
  std::vector<IntervalSample> r2;
  for (int i = 0; i < 10; ++i) r2.push_back({0, 1, i < 7 ? 1.0 : 1.5});  // closed interval
  EXPECT_DOUBLE_EQ(empirical_coverage(r2), 0.7);
  std::vector<IntervalSample> half{{0, INFINITY, 1e9}, {0, INFINITY, 0}};
  EXPECT_EQ(empirical_coverage(half), 1.0);
}

TEST(Coverage, CalibratedFoldMeetsTargetAndGrowsWithQ) {
  Rng rng(3);
  const auto recs = random_records(rng, 200);
  const auto f = fit_additive_q(recs, 0.1);
  auto covered = [&](double q) {
    std::vector<IntervalSample> out;
    ClassFactor g;
    g.q = q;
    for (auto& r : recs) {
      const auto c = apply_additive(ClassInterval{r.lower, 0, r.upper}, g);
      out.push_back({c.lower, c.upper, r.truth});
    }
    return empirical_coverage(out);
  };
  EXPECT_GE(covered(f.q), 0.9);
  double prev = 0;
  for (double q = -5; q <= 20; q += 0.5) {
    const double c = covered(q);
    EXPECT_GE(c, prev);
    prev = c;
  }
}

TEST(Fit, PerClassAndPooled) {
  std::vector<std::vector<IntervalSample>> pc(2);
  for (int i = 1; i <= 19; ++i) {
    pc[0].push_back({0, 0, 0.1 * i});
    pc[1].push_back({0, 0, 1.0 * i});
  }
  const auto per = fit_additive(pc, 0.1, "triad");
  EXPECT_DOUBLE_EQ(per.classes[0].q, 1.8);
  EXPECT_DOUBLE_EQ(per.classes[1].q, 18.0);
  const auto pooled = fit_additive(pc, 0.1, "triad", true);
  EXPECT_EQ(pooled.classes[0].q, pooled.classes[1].q);
  EXPECT_TRUE(pooled.pooled);
}

TEST(FactorIO, RoundTripWithUnbounded) {
  std::vector<std::vector<StatsSample>> pc(2);
  for (int i = 0; i < 30; ++i) pc[0].push_back({10, 1, 10.0 + 0.1 * i});
  pc[1].push_back({1, 1, 2});
  const auto f = fit_multiplicative(pc, 0.1, "mc");
  const auto path = std::filesystem::temp_directory_path() / "triadpi_test_factor.json";
  write_factor(path, f);
  const auto b = read_factor(path);
  EXPECT_EQ(b.method_id, "mc");
  EXPECT_EQ(b.mode, Mode::multiplicative);
  ASSERT_EQ(b.classes.size(), 2u);
  EXPECT_EQ(b.classes[0].q, f.classes[0].q);
  EXPECT_EQ(b.classes[0].k, f.classes[0].k);
  EXPECT_TRUE(b.classes[1].unbounded);
  EXPECT_TRUE(std::isinf(b.classes[1].q));
  EXPECT_THROW(read_factor(path.string() + ".missing"), MissingArtifact);
  EXPECT_EQ(mode_from_name(mode_name(Mode::additive)), Mode::additive);
}

TEST(Temperature, CalibratedLogitsKeepUnitTemperature) {
  const auto s = tempered_sample(20000, 3, 1.0, 1);
  const auto t = fit_temperature(s);
  EXPECT_NEAR(t.tau, 1.0, 0.1);
  EXPECT_LE(t.nll_after, t.nll_before);
  EXPECT_FALSE(t.single_class);
}

TEST(Temperature, OverconfidentLogitsAreSoftened) {
  const auto s = tempered_sample(20000, 3, 2.0, 2);
  const auto t = fit_temperature(s);
  EXPECT_NEAR(t.tau, 2.0, 0.2);
  EXPECT_LT(t.nll_after, t.nll_before);
}

TEST(Temperature, GridAndSingleClassFlag) {
  const auto g = temperature_grid();
  ASSERT_EQ(g.size(), 100u);
  EXPECT_DOUBLE_EQ(g.front(), 0.05);
  EXPECT_DOUBLE_EQ(g.back(), 5.0);
  LogitSample s;
  s.n_classes = 2;
  s.logits = {1, 0, 2, 0, 0.5, 0};
  s.labels = {0, 0, 0};
  EXPECT_TRUE(fit_temperature(s).single_class);
  EXPECT_THROW(fit_temperature(LogitSample{}), ConfigError);
}

TEST(Temperature, NllByHand) {
  LogitSample s;
  s.n_classes = 2;
  s.logits = {0, 0, 2, 0};
  s.labels = {0, 1};
  const double expect = 0.5 * (std::log(2.0) + std::log(1 + std::exp(2.0)));
  EXPECT_NEAR(mean_nll(s, 1.0), expect, 1e-12);
  const double half = 0.5 * (std::log(2.0) + std::log(1 + std::exp(1.0)));
  EXPECT_NEAR(mean_nll(s, 2.0), half, 1e-12);
}

TEST(Temperature, SampleLogitsIsSeededAndCapped) {
  Tensor<float> l(3, Grid3{2, 4, 4});
  Rng r(1);
  for (auto& v : l.vec()) v = float(r.normal());
  const auto lab = oracle::random_labels(3, 32, r);
  const auto a = sample_logits({&l}, {&lab}, 10, 5);
  EXPECT_EQ(a.size(), 10u);
  EXPECT_EQ(a.logits.size(), 30u);
  const auto b = sample_logits({&l}, {&lab}, 10, 5);
  EXPECT_EQ(a.logits, b.logits);
  EXPECT_EQ(sample_logits({&l}, {&lab}, 1000, 5).size(), 32u);
}

TEST(Temperature, ScaledSoftmaxSumsToOne) {
  Tensor<float> l(3, Grid3{1, 1, 2});
  l.vec() = {0, 1, 2, 0, 0, 0};
  const auto p = scaled_softmax(l, 2.0);
  EXPECT_NEAR(p.data()[0] + p.data()[2] + p.data()[4], 1.0, 1e-6);
  EXPECT_NEAR(p.data()[4] / p.data()[0], std::exp(-0.0 / 2), 1e-6);
  EXPECT_NEAR(p.data()[3] / p.data()[1], std::exp(-1.0 / 2), 1e-6);
}
