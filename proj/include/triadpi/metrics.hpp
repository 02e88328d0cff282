#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "triadpi/calibration.hpp"
#include "triadpi/pimethods.hpp"

namespace triadpi::metrics {

using calibration::IntervalSample;
using pimethods::ClassInterval;
using pimethods::PIRecord;

/// 2|A n B| / (|A| + |B|) for one class; 1 when both masks are empty.
double dsc(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, int class_id);

double mae(std::span<const double> predicted_mL, std::span<const double> truth_mL);

/// (empirical coverage - target) x 100.
double coverage_error(std::span<const IntervalSample> records, double target = 0.9);

struct WidthSummary {
  double mean_mL = 0;  // over bounded intervals; 0 when none are bounded
  int n_bounded = 0;
  int n_unbounded = 0;
};

WidthSummary mean_width(std::span<const ClassInterval> intervals);

struct CostSummary {
  double mean_forward_passes = 0;
  double mean_wall_time_s = 0;
};

CostSummary cost_summary(std::span<const PIRecord> records);

struct PairedTTest {
  int n = 0;  // pairs with finite widths in both methods
  double mean_diff = 0;  // a - b
  double t = 0;
  double p_value = 1;  // two-sided
  bool normal_approximation = false;  // n >= 30
};

/// Two-sided paired t-test on per-case widths of one class, pairing records
/// by case_id. Student-t p-value below 30 pairs, normal approximation above.
PairedTTest paired_width_t_test(std::span<const PIRecord> a, std::span<const PIRecord> b, int class_index);

struct ReportRow {
  std::string method_id;
  int class_index = 0;  // foreground class index, 0-based
  std::string class_name;
  int n_cases = 0;
  double delta_f_percent = 0;
  double width_mL = 0;
  int n_unbounded = 0;
  double mae_mL = 0;
  double dsc = 0;
  double mean_forward_passes = 0;
  double mean_wall_time_s = 0;
  std::optional<PairedTTest> vs_reference;  // widths against the reference method

  // Across-run spread, set by aggregate_runs.
  int n_runs = 1;
  double sd_delta_f_percent = 0, sd_width_mL = 0, sd_mae_mL = 0, sd_dsc = 0;
};

struct EvalReport {
  double target = 0.9;
  std::string reference_method;  // empty when no t-tests were run
  std::vector<ReportRow> rows;
};

/// One row per (method, class), methods in `method_order`.
EvalReport build_report(const std::vector<PIRecord>& records, const std::vector<std::string>& method_order,
                        const std::vector<std::string>& class_names, double alpha,
                        const std::string& reference_method = "triad");

/// Mean and sample SD of every metric across runs with identical row layout.
EvalReport aggregate_runs(const std::vector<EvalReport>& runs);

/// Machine-independent columns only; timing goes to timing_csv.
std::string report_csv(const EvalReport& r);
std::string report_table(const EvalReport& r);
std::string timing_csv(const EvalReport& r);

/// Per record and class: case_id, class, truth_mL, lower_mL, mean_mL, upper_mL, covered.
std::string interval_csv(std::span<const PIRecord> records, const std::vector<std::string>& class_names);

/// Head ordering of three-head records before sorting, over records that carry
/// head volumes.
struct HeadOrderSummary {
  int n_cases = 0;
  std::vector<double> mean_lower_mL, mean_mean_mL, mean_upper_mL;  // per class
  int n_violating_cases = 0;  // some class had lower > mean or mean > upper
  double violation_rate() const { return n_cases ? double(n_violating_cases) / n_cases : 0.0; }
};

HeadOrderSummary head_order_summary(std::span<const PIRecord> records);

/// Fixed-notation number with `digits` decimals; "inf" and "nan" spelled out.
std::string fmt(double v, int digits = 6);

}  // namespace triadpi::metrics
