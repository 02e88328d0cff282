#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <sstream>

#include "triadpi/errors.hpp"
#include "triadpi/metrics.hpp"

using namespace triadpi;
using namespace triadpi::metrics;

#ifndef TRIADPI_TEST_DATA
#error "TRIADPI_TEST_DATA must point at tests/data"
#endif

namespace {

std::vector<PIRecord> fixture() { return pimethods::read_records(std::string(TRIADPI_TEST_DATA) + "/fixture_records.jsonl"); }

const ReportRow& row(const EvalReport& r, const std::string& m, int c) {
  for (const auto& x : r.rows)
    if (x.method_id == m && x.class_index == c) return x;
  throw std::runtime_error("no row " + m);
}

std::vector<std::vector<std::string>> parse_csv(const std::string& s) {
  std::vector<std::vector<std::string>> out;
  std::istringstream in(s);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.push_back("");
    out.push_back(cells);
  }
  return out;
}

}  // namespace

TEST(Dsc, HandExamples) {
  const std::vector<std::uint8_t> a{1, 1, 0, 0}, b{1, 0, 1, 0}, z(4, 0);
  EXPECT_DOUBLE_EQ(dsc(a, b, 1), 0.5);
  EXPECT_DOUBLE_EQ(dsc(a, a, 1), 1.0);
  EXPECT_DOUBLE_EQ(dsc(z, z, 1), 1.0);
  EXPECT_DOUBLE_EQ(dsc(a, z, 1), 0.0);
  EXPECT_THROW(dsc(a, std::vector<std::uint8_t>{1}, 1), ShapeError);
}

TEST(Mae, HandExample) {
  EXPECT_DOUBLE_EQ(mae(std::vector<double>{1, 3}, std::vector<double>{2, 2}), 1.0);
}

TEST(CoverageError, SignedPercentagePoints) {
  std::vector<IntervalSample> r;
  for (int i = 0; i < 100; ++i) r.push_back({0, 1, i < 95 ? 0.5 : 3.0});
  EXPECT_NEAR(coverage_error(r, 0.9), 5.0, 1e-9);
  std::vector<IntervalSample> r2;
  for (int i = 0; i < 1000; ++i) r2.push_back({0, 1, i < 887 ? 0.5 : 3.0});
  EXPECT_NEAR(coverage_error(r2, 0.9), -1.3, 1e-9);
}

TEST(MeanWidth, ExcludesAndTalliesUnbounded) {
  std::vector<ClassInterval> v{{1, 2, 3}, {0, 1, 6.6}, {2, 3, 6.3}};
  EXPECT_NEAR(mean_width(v).mean_mL, 4.3, 1e-12);
  v.push_back({0, 1, INFINITY, false, true});
  const auto w = mean_width(v);
  EXPECT_NEAR(w.mean_mL, 4.3, 1e-12);
  EXPECT_EQ(w.n_bounded, 3);
  EXPECT_EQ(w.n_unbounded, 1);
}

TEST(Cost, MeansOverRecords) {
  std::vector<PIRecord> r(2);
  r[0].forward_passes = 1;
  r[1].forward_passes = 20;
  r[0].wall_time_s = 1;
  r[1].wall_time_s = 2;
  const auto c = cost_summary(r);
  EXPECT_DOUBLE_EQ(c.mean_forward_passes, 10.5);
  EXPECT_DOUBLE_EQ(c.mean_wall_time_s, 1.5);
}

TEST(Fmt, SpellsOutNonFinite) {
  EXPECT_EQ(fmt(INFINITY), "inf");
  EXPECT_EQ(fmt(-INFINITY), "-inf");
  EXPECT_EQ(fmt(NAN), "nan");
  EXPECT_EQ(fmt(-0.0, 2), "0.00");
  EXPECT_EQ(fmt(1.5, 3), "1.500");
}

// The fixture holds five cases for each of two methods, two classes each,
// stored out of order. Every number below was worked out by hand from the
// table in tests/data.
TEST(Fixture, ReportMatchesHandComputation) {
  const auto recs = fixture();
  ASSERT_EQ(recs.size(), 10u);
  const auto rep = build_report(recs, {"triad", "mc"}, {"c1", "c2"}, 0.1);
  ASSERT_EQ(rep.rows.size(), 4u);
  EXPECT_EQ(rep.rows[0].method_id, "triad");
  EXPECT_EQ(rep.reference_method, "triad");

  const auto& t0 = row(rep, "triad", 0);
  EXPECT_NEAR(t0.delta_f_percent, -10.0, 1e-9);
  EXPECT_NEAR(t0.width_mL, 2.4, 1e-12);
  EXPECT_NEAR(t0.mae_mL, 0.9, 1e-12);
  EXPECT_NEAR(t0.dsc, 0.86, 1e-12);
  EXPECT_EQ(t0.n_unbounded, 0);
  EXPECT_FALSE(t0.vs_reference.has_value());

  const auto& t1 = row(rep, "triad", 1);
  EXPECT_NEAR(t1.delta_f_percent, -10.0, 1e-9);
  EXPECT_NEAR(t1.width_mL, 2.4, 1e-12);
  EXPECT_NEAR(t1.mae_mL, 0.6, 1e-12);
  EXPECT_NEAR(t1.dsc, 0.7, 1e-12);

  const auto& m0 = row(rep, "mc", 0);
  EXPECT_NEAR(m0.delta_f_percent, 10.0, 1e-9);
  EXPECT_NEAR(m0.width_mL, 4.0, 1e-12);
  EXPECT_EQ(m0.n_unbounded, 1);
  EXPECT_NEAR(m0.mae_mL, 0.7, 1e-12);
  EXPECT_NEAR(m0.dsc, 0.8, 1e-12);
  EXPECT_EQ(m0.mean_forward_passes, 20.0);
  EXPECT_NEAR(m0.mean_wall_time_s, 4.0, 1e-12);
  EXPECT_EQ(t0.mean_forward_passes, 1.0);

  // Class 1 widths: diffs {2, 0, 0, 4} over the four bounded pairs.
  ASSERT_TRUE(m0.vs_reference.has_value());
  const auto& tt = *m0.vs_reference;
  EXPECT_EQ(tt.n, 4);
  EXPECT_DOUBLE_EQ(tt.mean_diff, 1.5);
  const double t = 1.5 / (std::sqrt(11.0 / 3.0) / 2.0);
  EXPECT_NEAR(tt.t, t, 1e-12);
  // Student-t with 3 degrees of freedom has a closed-form CDF.
  const double x = t / std::sqrt(3.0);
  const double p = 1.0 - (2.0 / M_PI) * (x / (1 + x * x) + std::atan(x));
  EXPECT_NEAR(tt.p_value, p, 1e-10);
  EXPECT_FALSE(tt.normal_approximation);

  const auto& m1 = row(rep, "mc", 1);
  EXPECT_NEAR(m1.width_mL, 4.8, 1e-12);
  EXPECT_NEAR(m1.vs_reference->t, 6.0, 1e-12);
}

TEST(Fixture, CsvRecomputedCellByCell) {
  // Spreadsheet-style: recompute coverage and width from interval_csv rows and
  // compare against the report_csv cells.
  const auto recs = fixture();
  const std::vector<std::string> names{"c1", "c2"};
  const auto rep = build_report(recs, {"triad", "mc"}, names, 0.1);
  const auto report = parse_csv(report_csv(rep));
  ASSERT_EQ(report.size(), 5u);
  EXPECT_EQ(report[0][0], "method");
  EXPECT_EQ(report[0].size(), 16u);

  for (const std::string m : {"triad", "mc"}) {
    std::vector<PIRecord> mine;
    for (const auto& r : recs)
      if (r.method_id == m) mine.push_back(r);
    const auto iv = parse_csv(interval_csv(mine, names));
    ASSERT_EQ(iv.size(), 11u);
    std::map<std::string, std::pair<int, int>> cov;
    std::map<std::string, std::pair<double, int>> width;
    for (std::size_t i = 1; i < iv.size(); ++i) {
      const auto& c = iv[i];
      cov[c[1]].first += c[6] == "1";
      cov[c[1]].second += 1;
      if (c[5] != "inf") {
        width[c[1]].first += std::stod(c[5]) - std::stod(c[3]);
        width[c[1]].second += 1;
      }
    }
    for (std::size_t i = 1; i < report.size(); ++i) {
      const auto& c = report[i];
      if (c[0] != m) continue;
      const auto [hit, n] = cov[c[1]];
      EXPECT_NEAR(std::stod(c[3]), (double(hit) / n - 0.9) * 100, 1e-6) << m << " " << c[1];
      EXPECT_NEAR(std::stod(c[4]), width[c[1]].first / width[c[1]].second, 1e-6) << m << " " << c[1];
      EXPECT_EQ(std::stoi(c[2]), n);
    }
  }
}

TEST(Fixture, ReportIgnoresRecordOrder) {
  auto recs = fixture();
  const auto a = report_csv(build_report(recs, {"triad", "mc"}, {"c1", "c2"}, 0.1));
  std::reverse(recs.begin(), recs.end());
  EXPECT_EQ(report_csv(build_report(recs, {"triad", "mc"}, {"c1", "c2"}, 0.1)), a);
}

TEST(Fixture, HeadOrderSummary) {
  const auto recs = fixture();
  const auto h = head_order_summary(recs);
  EXPECT_EQ(h.n_cases, 5);
  EXPECT_EQ(h.n_violating_cases, 1);
  EXPECT_DOUBLE_EQ(h.violation_rate(), 0.2);
  EXPECT_NEAR(h.mean_lower_mL[0], 2.4, 1e-12);
  EXPECT_NEAR(h.mean_mean_mL[0], (2 + 4 + 1 + 5 + 3) / 5.0, 1e-12);
}

TEST(Fixture, TimingStaysOutOfTheReport) {
  const auto recs = fixture();
  const auto rep = build_report(recs, {"triad", "mc"}, {"c1", "c2"}, 0.1);
  EXPECT_EQ(report_csv(rep).find("wall"), std::string::npos);
  EXPECT_NE(timing_csv(rep).find("mc,20.000,4.0000"), std::string::npos);
}

TEST(PairedTTest, NormalApproximationFromThirtyPairs) {
  std::vector<PIRecord> a(40), b(40);
  for (int i = 0; i < 40; ++i) {
    a[i].case_id = b[i].case_id = "c" + std::to_string(i);
    a[i].interval.classes = {ClassInterval{0, 0, 2.0 + (i % 5)}};
    b[i].interval.classes = {ClassInterval{0, 0, 2.0}};
  }
  const auto t = paired_width_t_test(a, b, 0);
  EXPECT_EQ(t.n, 40);
  EXPECT_TRUE(t.normal_approximation);
  EXPECT_LT(t.p_value, 1e-6);
}

TEST(AggregateRuns, MeanAndSampleSd) {
  const auto recs = fixture();
  auto a = build_report(recs, {"triad"}, {"c1", "c2"}, 0.1);
  auto b = a;
  b.rows[0].width_mL = 4.4;
  const auto agg = aggregate_runs({a, b});
  EXPECT_EQ(agg.rows[0].n_runs, 2);
  EXPECT_NEAR(agg.rows[0].width_mL, 3.4, 1e-12);
  EXPECT_NEAR(agg.rows[0].sd_width_mL, std::sqrt(2.0), 1e-12);
  b.rows.pop_back();
  EXPECT_THROW(aggregate_runs({a, b}), ShapeError);
}
