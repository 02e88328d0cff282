#include "triadpi/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "triadpi/errors.hpp"

namespace triadpi::metrics {

double dsc(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, int class_id) {
  if (pred.size() != gt.size()) throw ShapeError("dsc: masks differ in size");
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == class_id, g = gt[i] == class_id;
    a += p;
    b += g;
    both += p && g;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * double(both) / double(a + b);
}

double mae(std::span<const double> predicted_mL, std::span<const double> truth_mL) {
  if (predicted_mL.size() != truth_mL.size()) throw ShapeError("mae: lengths differ");
  if (predicted_mL.empty()) throw ConfigError("mae of an empty list");
  double s = 0;
  for (std::size_t i = 0; i < predicted_mL.size(); ++i) s += std::abs(predicted_mL[i] - truth_mL[i]);
  return s / double(predicted_mL.size());
}

double coverage_error(std::span<const IntervalSample> records, double target) {
  return (calibration::empirical_coverage(records) - target) * 100.0;
}

WidthSummary mean_width(std::span<const ClassInterval> intervals) {
  if (intervals.empty()) throw ConfigError("mean width of an empty list");
  WidthSummary w;
  double s = 0;
  for (const auto& c : intervals) {
    if (c.unbounded || !std::isfinite(c.upper) || !std::isfinite(c.lower)) {
      ++w.n_unbounded;
      continue;
    }
    s += c.upper - c.lower;
    ++w.n_bounded;
  }
  if (w.n_bounded > 0) w.mean_mL = s / w.n_bounded;
  return w;
}

CostSummary cost_summary(std::span<const PIRecord> records) {
  if (records.empty()) throw ConfigError("cost summary of an empty list");
  CostSummary c;
  for (const auto& r : records) {
    c.mean_forward_passes += r.forward_passes;
    c.mean_wall_time_s += r.wall_time_s;
  }
  c.mean_forward_passes /= double(records.size());
  c.mean_wall_time_s /= double(records.size());
  return c;
}

PairedTTest paired_width_t_test(std::span<const PIRecord> a, std::span<const PIRecord> b, int class_index) {
  std::map<std::string, double> wb;
  for (const auto& r : b) wb[r.case_id] = r.interval.classes.at(class_index).width();
  std::vector<double> d;
  // Walk a in case_id order so the sum does not depend on record order.
  std::map<std::string, double> wa;
  for (const auto& r : a) wa[r.case_id] = r.interval.classes.at(class_index).width();
  for (const auto& [id, w] : wa) {
    auto it = wb.find(id);
    if (it == wb.end() || !std::isfinite(w) || !std::isfinite(it->second)) continue;
    d.push_back(w - it->second);
  }
  PairedTTest t;
  t.n = int(d.size());
  if (t.n < 2) return t;
  double mean = 0;
  for (double x : d) mean += x;
  mean /= t.n;
  double ss = 0;
  for (double x : d) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / (t.n - 1));
  t.mean_diff = mean;
  if (sd == 0) {
    t.t = mean == 0 ? 0 : std::copysign(std::numeric_limits<double>::infinity(), mean);
    t.p_value = mean == 0 ? 1 : 0;
    t.normal_approximation = t.n >= 30;
    return t;
  }
  t.t = mean / (sd / std::sqrt(double(t.n)));
  t.normal_approximation = t.n >= 30;
  if (t.normal_approximation) {
    t.p_value = 2 * boost::math::cdf(boost::math::complement(boost::math::normal(), std::abs(t.t)));
  } else {
    t.p_value = 2 * boost::math::cdf(boost::math::complement(boost::math::students_t(t.n - 1), std::abs(t.t)));
  }
  return t;
}

EvalReport build_report(const std::vector<PIRecord>& records, const std::vector<std::string>& method_order,
                        const std::vector<std::string>& class_names, double alpha,
                        const std::string& reference_method) {
  EvalReport rep;
  rep.target = 1.0 - alpha;
  std::map<std::string, std::vector<PIRecord>> by_method;
  for (const auto& r : records) by_method[r.method_id].push_back(r);
  for (auto& [m, v] : by_method)
    std::sort(v.begin(), v.end(), [](const PIRecord& x, const PIRecord& y) { return x.case_id < y.case_id; });
  const bool have_ref = by_method.count(reference_method) > 0;
  if (have_ref) rep.reference_method = reference_method;

  for (const auto& m : method_order) {
    auto it = by_method.find(m);
    if (it == by_method.end()) continue;
    const auto& recs = it->second;
    const CostSummary cost = cost_summary(recs);
    for (std::size_t c = 0; c < class_names.size(); ++c) {
      ReportRow row;
      row.method_id = m;
      row.class_index = int(c);
      row.class_name = class_names[c];
      row.n_cases = int(recs.size());
      std::vector<IntervalSample> cov;
      std::vector<ClassInterval> ivs;
      std::vector<double> mu, truth;
      double dsc_sum = 0;
      int dsc_n = 0;
      for (const auto& r : recs) {
        if (r.interval.classes.size() != class_names.size() || r.truth_mL.size() != class_names.size())
          throw ShapeError("record " + r.case_id + " has the wrong class count");
        const auto& iv = r.interval.classes[c];
        cov.push_back({iv.lower, iv.upper, r.truth_mL[c]});
        ivs.push_back(iv);
        mu.push_back(iv.mean);
        truth.push_back(r.truth_mL[c]);
        if (c < r.dsc.size() && std::isfinite(r.dsc[c])) {
          dsc_sum += r.dsc[c];
          ++dsc_n;
        }
      }
      row.delta_f_percent = coverage_error(cov, rep.target);
      const WidthSummary w = mean_width(ivs);
      row.width_mL = w.mean_mL;
      row.n_unbounded = w.n_unbounded;
      row.mae_mL = mae(mu, truth);
      row.dsc = dsc_n ? dsc_sum / dsc_n : std::numeric_limits<double>::quiet_NaN();
      row.mean_forward_passes = cost.mean_forward_passes;
      row.mean_wall_time_s = cost.mean_wall_time_s;
      if (have_ref && m != reference_method)
        row.vs_reference = paired_width_t_test(recs, by_method.at(reference_method), int(c));
      rep.rows.push_back(std::move(row));
    }
  }
  return rep;
}

EvalReport aggregate_runs(const std::vector<EvalReport>& runs) {
  if (runs.empty()) throw ConfigError("no runs to aggregate");
  EvalReport out = runs.front();
  const int n = int(runs.size());
  for (const auto& r : runs)
    if (r.rows.size() != out.rows.size()) throw ShapeError("runs differ in report layout");
  auto mean_sd = [&](std::size_t i, auto get, double& mean, double& sd) {
    double s = 0;
    for (const auto& r : runs) s += get(r.rows[i]);
    mean = s / n;
    double ss = 0;
    for (const auto& r : runs) ss += (get(r.rows[i]) - mean) * (get(r.rows[i]) - mean);
    sd = n > 1 ? std::sqrt(ss / (n - 1)) : 0.0;
  };
  for (std::size_t i = 0; i < out.rows.size(); ++i) {
    auto& row = out.rows[i];
    for (const auto& r : runs)
      if (r.rows[i].method_id != row.method_id || r.rows[i].class_index != row.class_index)
        throw ShapeError("runs differ in report layout");
    row.n_runs = n;
    mean_sd(i, [](const ReportRow& x) { return x.delta_f_percent; }, row.delta_f_percent, row.sd_delta_f_percent);
    mean_sd(i, [](const ReportRow& x) { return x.width_mL; }, row.width_mL, row.sd_width_mL);
    mean_sd(i, [](const ReportRow& x) { return x.mae_mL; }, row.mae_mL, row.sd_mae_mL);
    mean_sd(i, [](const ReportRow& x) { return x.dsc; }, row.dsc, row.sd_dsc);
    double unused = 0;
    mean_sd(i, [](const ReportRow& x) { return x.mean_forward_passes; }, row.mean_forward_passes, unused);
    mean_sd(i, [](const ReportRow& x) { return x.mean_wall_time_s; }, row.mean_wall_time_s, unused);
    int unb = 0;
    for (const auto& r : runs) unb += r.rows[i].n_unbounded;
    row.n_unbounded = unb;
    // Per-run t-tests do not combine meaningfully.
    row.vs_reference.reset();
  }
  return out;
}

HeadOrderSummary head_order_summary(std::span<const PIRecord> records) {
  HeadOrderSummary h;
  for (const auto& r : records) {
    if (r.head_volumes_mL.empty()) continue;
    if (r.head_volumes_mL.size() != 3) throw ShapeError("head volumes need three heads");
    const auto& lo = r.head_volumes_mL[0];
    const auto& mid = r.head_volumes_mL[1];
    const auto& hi = r.head_volumes_mL[2];
    if (h.n_cases == 0) {
      h.mean_lower_mL.assign(lo.size(), 0.0);
      h.mean_mean_mL.assign(lo.size(), 0.0);
      h.mean_upper_mL.assign(lo.size(), 0.0);
    }
    if (lo.size() != h.mean_lower_mL.size() || mid.size() != lo.size() || hi.size() != lo.size())
      throw ShapeError("head volumes differ in class count");
    bool bad = false;
    for (std::size_t c = 0; c < lo.size(); ++c) {
      h.mean_lower_mL[c] += lo[c];
      h.mean_mean_mL[c] += mid[c];
      h.mean_upper_mL[c] += hi[c];
      bad = bad || lo[c] > mid[c] || mid[c] > hi[c];
    }
    h.n_violating_cases += bad;
    ++h.n_cases;
  }
  for (std::size_t c = 0; c < h.mean_lower_mL.size(); ++c) {
    h.mean_lower_mL[c] /= h.n_cases;
    h.mean_mean_mL[c] /= h.n_cases;
    h.mean_upper_mL[c] /= h.n_cases;
  }
  return h;
}

std::string fmt(double v, int digits) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  std::string s = buf;
  if (s.find_first_not_of("-0.") == std::string::npos) s = digits > 0 ? "0." + std::string(digits, '0') : "0";
  return s;
}

std::string report_csv(const EvalReport& r) {
  std::ostringstream o;
  o << "method,class,n_cases,delta_f_percent,width_mL,n_unbounded,mae_mL,dsc,mean_forward_passes,"
       "t_vs_ref,p_vs_ref,n_runs,sd_delta_f_percent,sd_width_mL,sd_mae_mL,sd_dsc\n";
  for (const auto& row : r.rows) {
    o << row.method_id << ',' << row.class_name << ',' << row.n_cases << ',' << fmt(row.delta_f_percent) << ','
      << fmt(row.width_mL) << ',' << row.n_unbounded << ',' << fmt(row.mae_mL) << ',' << fmt(row.dsc) << ','
      << fmt(row.mean_forward_passes, 3) << ',';
    if (row.vs_reference) o << fmt(row.vs_reference->t) << ',' << fmt(row.vs_reference->p_value);
    else o << ',';
    o << ',' << row.n_runs << ',';
    if (row.n_runs > 1)
      o << fmt(row.sd_delta_f_percent) << ',' << fmt(row.sd_width_mL) << ',' << fmt(row.sd_mae_mL) << ','
        << fmt(row.sd_dsc);
    else o << ",,,";
    o << '\n';
  }
  return o.str();
}

std::string timing_csv(const EvalReport& r) {
  std::ostringstream o;
  o << "method,mean_forward_passes,mean_wall_time_s\n";
  std::string last;
  for (const auto& row : r.rows) {
    if (row.method_id == last) continue;
    last = row.method_id;
    o << row.method_id << ',' << fmt(row.mean_forward_passes, 3) << ',' << fmt(row.mean_wall_time_s, 4) << '\n';
  }
  return o.str();
}

std::string report_table(const EvalReport& r) {
  const bool runs = !r.rows.empty() && r.rows.front().n_runs > 1;
  auto cell = [&](double v, double sd, int digits) {
    return runs ? fmt(v, digits) + " +- " + fmt(sd, digits) : fmt(v, digits);
  };
  std::vector<std::vector<std::string>> t;
  t.push_back({"method", "class", "df(%)", "W(mL)", "MAE(mL)", "DSC", "passes", "unbounded"});
  for (const auto& row : r.rows)
    t.push_back({row.method_id, row.class_name, cell(row.delta_f_percent, row.sd_delta_f_percent, 1),
                 cell(row.width_mL, row.sd_width_mL, 2), cell(row.mae_mL, row.sd_mae_mL, 2),
                 cell(row.dsc, row.sd_dsc, 3), fmt(row.mean_forward_passes, 1), std::to_string(row.n_unbounded)});
  std::vector<std::size_t> width(t.front().size(), 0);
  for (const auto& line : t)
    for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());
  std::ostringstream o;
  o << "target coverage " << fmt(r.target * 100, 1) << "%";
  if (runs) o << ", mean +- SD over " << r.rows.front().n_runs << " training runs";
  o << "\n";
  for (std::size_t k = 0; k < t.size(); ++k) {
    for (std::size_t i = 0; i < t[k].size(); ++i) {
      const auto& s = t[k][i];
      if (i < 2) o << s << std::string(width[i] - s.size(), ' ');
      else o << std::string(width[i] - s.size(), ' ') << s;
      o << (i + 1 < t[k].size() ? "  " : "\n");
    }
    if (k == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w + 2;
      o << std::string(total - 2, '-') << "\n";
    }
  }
  return o.str();
}

std::string interval_csv(std::span<const PIRecord> records, const std::vector<std::string>& class_names) {
  std::vector<const PIRecord*> sorted;
  for (const auto& r : records) sorted.push_back(&r);
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const PIRecord* a, const PIRecord* b) { return a->case_id < b->case_id; });
  std::ostringstream o;
  o << "case_id,class,truth_mL,lower_mL,mean_mL,upper_mL,covered\n";
  for (const PIRecord* r : sorted)
    for (std::size_t c = 0; c < class_names.size(); ++c) {
      const auto& iv = r->interval.classes.at(c);
      const double y = r->truth_mL.at(c);
      o << r->case_id << ',' << class_names[c] << ',' << fmt(y) << ',' << fmt(iv.lower) << ',' << fmt(iv.mean) << ','
        << fmt(iv.upper) << ',' << (iv.covers(y) ? 1 : 0) << '\n';
    }
  return o.str();
}

}  // namespace triadpi::metrics
