#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "triadpi/pimethods.hpp"
#include "triadpi/tensor.hpp"

namespace triadpi::calibration {

using pimethods::ClassInterval;
using pimethods::SamplingStats;
using pimethods::VolumeInterval;

enum class Mode { additive, multiplicative };

std::string mode_name(Mode m);
Mode mode_from_name(const std::string& s);

/// (lower, upper, truth) for the additive score and for coverage counting.
struct IntervalSample {
  double lower = 0;
  double upper = 0;
  double truth = 0;
};

/// (mu, sigma, truth) for the multiplicative score.
struct StatsSample {
  double mu = 0;
  double sigma = 0;
  double truth = 0;
};

struct ScoreSummary {
  double min = 0, q25 = 0, median = 0, q75 = 0, max = 0;
  int n_infinite = 0;
  std::vector<int> histogram;  // 10 equal bins over [min, max] of the finite scores
};

/// Corrective value for one class.
struct ClassFactor {
  double q = 0;
  bool unbounded = false;  // conformal rank k exceeded n_cal; q is +inf
  int n_cal = 0;
  int k = 0;
  ScoreSummary scores;
};

struct CalibrationFactor {
  std::string method_id;
  Mode mode = Mode::additive;
  double alpha = 0.1;
  bool pooled = false;
  std::vector<ClassFactor> classes;
};

/// k = ceil((n + 1)(1 - alpha)), the rank of the split-conformal quantile.
int conformal_rank(int n, double alpha);

/// k-th smallest score (1-based k); unbounded when k > n.
ClassFactor conformal_q(std::vector<double> scores, double alpha);

/// s_i = max(l_i - y_i, y_i - u_i).
double additive_score(const IntervalSample& s);
/// s_i = |y_i - mu_i| / sigma_i, with 0/0 = 0 and x/0 = +inf.
double multiplicative_score(const StatsSample& s);

ClassFactor fit_additive_q(std::span<const IntervalSample> records, double alpha);
ClassFactor fit_multiplicative_q(std::span<const StatsSample> records, double alpha);

/// Per-class fits over records[class][case]; `pooled` fits one q on all scores.
CalibrationFactor fit_additive(const std::vector<std::vector<IntervalSample>>& per_class, double alpha,
                               const std::string& method_id, bool pooled = false);
CalibrationFactor fit_multiplicative(const std::vector<std::vector<StatsSample>>& per_class, double alpha,
                                     const std::string& method_id, bool pooled = false);

/// [l - q, u + q], clamped at 0; unbounded factors give [0, +inf).
ClassInterval apply_additive(const ClassInterval& in, const ClassFactor& f);
/// [mu - q sigma, mu + q sigma], clamped at 0; unbounded factors give [0, +inf).
ClassInterval apply_multiplicative(double mu, double sigma, const ClassFactor& f);

VolumeInterval apply_calibration(const VolumeInterval& interval, const CalibrationFactor& factor);
VolumeInterval apply_calibration(const SamplingStats& stats, const CalibrationFactor& factor);

/// Fraction of truths inside the closed intervals.
double empirical_coverage(std::span<const IntervalSample> records);

// --- temperature scaling --------------------------------------------------------

struct Temperature {
  double tau = 1.0;
  double nll_before = 0;  // at tau = 1
  double nll_after = 0;
  bool single_class = false;  // every sampled label was the same class
};

/// Voxel logits [n][n_classes] (row-major) with their labels.
struct LogitSample {
  int n_classes = 0;
  std::vector<double> logits;
  std::vector<std::uint8_t> labels;

  std::size_t size() const { return labels.size(); }
};

/// Draws up to `max_voxels` voxels uniformly without replacement from the
/// pooled (logits, labels) pairs, seeded.
LogitSample sample_logits(const std::vector<const Tensor<float>*>& logits,
                          const std::vector<const std::vector<std::uint8_t>*>& labels, std::size_t max_voxels,
                          std::uint64_t seed);

/// Mean negative log-likelihood of softmax(logits / tau).
double mean_nll(const LogitSample& s, double tau);

/// The grid tau = 0.05, 0.10, ..., 5.00.
std::vector<double> temperature_grid();

/// Grid search over temperature_grid(); the first minimiser wins.
Temperature fit_temperature(const LogitSample& s);

/// softmax(logits / tau).
Tensor<float> scaled_softmax(const Tensor<float>& logits, double tau);

// --- serialisation ----------------------------------------------------------------

void to_json(nlohmann::json& j, const CalibrationFactor& f);
void from_json(const nlohmann::json& j, CalibrationFactor& f);
void to_json(nlohmann::json& j, const Temperature& t);
void from_json(const nlohmann::json& j, Temperature& t);

void write_factor(const std::filesystem::path& path, const CalibrationFactor& f);
CalibrationFactor read_factor(const std::filesystem::path& path);

}  // namespace triadpi::calibration
