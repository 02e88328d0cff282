#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "triadpi/nets.hpp"
#include "triadpi/phantom.hpp"
#include "triadpi/tensor.hpp"

namespace triadpi::pimethods {

using phantom::Spacing;

inline constexpr double kUnbounded = std::numeric_limits<double>::infinity();

struct ClassInterval {
  double lower = 0;
  double mean = 0;
  double upper = 0;
  bool order_violation = false;  // components arrived out of order and were sorted
  bool unbounded = false;        // upper bound is +inf (calibration rank exceeded n_cal)

  double width() const { return upper - lower; }
  bool covers(double y) const { return lower <= y && y <= upper; }
  bool operator==(const ClassInterval&) const = default;
};

/// Per foreground class (lower, mean, upper) in mL.
struct VolumeInterval {
  std::string method_id;
  bool calibrated = false;
  int forward_passes = 0;
  std::vector<ClassInterval> classes;

  bool any_order_violation() const;
  bool operator==(const VolumeInterval&) const = default;
};

/// Per foreground class sample mean and sample standard deviation (n - 1) of
/// the volumes produced by a sampling-based method.
struct SamplingStats {
  std::string method_id;
  int n_samples = 0;
  int forward_passes = 0;
  std::vector<double> mu_mL, sigma_mL;
  std::vector<std::vector<double>> samples_mL;  // [sample][class]

  bool operator==(const SamplingStats&) const = default;
};

/// One (case, method) evaluation.
struct PIRecord {
  std::string case_id;
  std::string method_id;
  VolumeInterval raw;       // before post-hoc calibration
  VolumeInterval interval;  // reported interval (calibrated once a factor is applied)
  std::optional<SamplingStats> stats;
  std::vector<double> truth_mL;
  std::vector<double> dsc;  // per class, of the method's segmentation
  /// Unsorted (lower, mean, upper) head volumes for three-head nets: [head][class].
  std::vector<std::vector<double>> head_volumes_mL;
  double wall_time_s = 0;
  int forward_passes = 0;
  int segmentation_passes = 0;  // extra passes spent producing an input segmentation

  bool operator==(const PIRecord&) const = default;
};

// --- volumes -------------------------------------------------------------------

/// Per voxel argmax over classes; ties go to the lowest class index.
template <typename T>
std::vector<std::uint8_t> argmax_labels(const Tensor<T>& probs);

/// Argmax class counts times voxel volume, per foreground class, in mL.
template <typename T>
std::vector<double> mask_volumes(const Tensor<T>& probs, const Spacing& spacing_mm);

// --- direct methods -------------------------------------------------------------

/// (lower, mean, upper) = mask volumes of the three heads, sorted per class.
VolumeInterval triad_intervals(const nets::SoftMaskSet& masks, const Spacing& spacing_mm);

/// Sort each (lower, mean, upper), then clamp at zero.
VolumeInterval regcnn_intervals(const nets::RegNet<float>& regressor, const Tensor<float>& intensities,
                                const Tensor<float>& segmentation_one_hot);
VolumeInterval regcnn_from_outputs(const std::vector<double>& outputs);

// --- sampling methods ---------------------------------------------------------

/// n values evenly spaced over [lo, hi].
std::vector<double> uniform_thresholds(int n, double lo = 0.01, double hi = 0.99);

/// volume_tau[c] = count(p_c >= tau) * voxel volume, for each threshold. [tau][class]
std::vector<std::vector<double>> threshold_volumes(const Tensor<float>& probs, const std::vector<double>& thresholds,
                                                   const Spacing& spacing_mm);

/// Mean and sample standard deviation per class of a [sample][class] table.
SamplingStats stats_from_samples(std::vector<std::vector<double>> samples_mL, const std::string& method_id);

SamplingStats ct_stats(const Tensor<float>& probs, const std::vector<double>& thresholds, const Spacing& spacing_mm);

/// T dropout passes; `mean_probs`, when given, receives the pass-averaged probabilities.
SamplingStats mc_stats(const nets::SegNet<float>& net, const Tensor<float>& intensities, int passes,
                       std::uint64_t seed, const Spacing& spacing_mm, Tensor<float>* mean_probs = nullptr);

/// Random spatial and intensity transform of one test-time augmentation.
struct Augmentation {
  bool flip[3] = {false, false, false};  // z, y, x
  int rot90 = 0;                          // quarter turns in the (y, x) plane
  int shift[3] = {0, 0, 0};               // voxels, zero padded
  double scale = 1.0;                     // intensity x -> scale * x + offset * range
  double offset = 0.0;

  bool is_identity() const;
};

struct TtaOptions {
  bool flips = true;
  bool rotations = true;
  bool translations = true;
  bool intensity = true;
  double max_shift_fraction = 0.10;
  double scale_jitter = 0.10;
  double offset_jitter = 0.05;
};

Augmentation sample_augmentation(Rng& rng, const Grid3& grid, const TtaOptions& opts);

/// Image in augmented space; voxels with no source are 0.
Tensor<float> augment_image(const Tensor<float>& image, const Augmentation& aug);

/// Maps augmented-space probabilities back to the original grid. Voxels whose
/// image falls outside the augmented view are assigned to background.
Tensor<float> invert_probs(const Tensor<float>& probs, const Augmentation& aug);

using Predictor = std::function<Tensor<float>(const Tensor<float>&)>;

/// Each augmentation: transform, predict, map back, count volumes.
SamplingStats tta_stats(const Predictor& predict, const Tensor<float>& intensities, int n_aug, std::uint64_t seed,
                        const Spacing& spacing_mm, const TtaOptions& opts = {});
SamplingStats tta_stats(const nets::SegNet<float>& net, const Tensor<float>& intensities, int n_aug,
                        std::uint64_t seed, const Spacing& spacing_mm, const TtaOptions& opts = {});

/// Standard-normal quantile at 1 - alpha/2; exactly 1.65 at alpha = 0.1.
double interval_z(double alpha);

/// [mu - z sigma, mu + z sigma] clamped at 0.
VolumeInterval interval_from_stats(const SamplingStats& stats, double alpha);

// --- serialisation --------------------------------------------------------------

void to_json(nlohmann::json& j, const ClassInterval& c);
void from_json(const nlohmann::json& j, ClassInterval& c);
void to_json(nlohmann::json& j, const VolumeInterval& v);
void from_json(const nlohmann::json& j, VolumeInterval& v);
void to_json(nlohmann::json& j, const SamplingStats& s);
void from_json(const nlohmann::json& j, SamplingStats& s);
void to_json(nlohmann::json& j, const PIRecord& r);
void from_json(const nlohmann::json& j, PIRecord& r);

/// One JSON object per line.
void write_records(const std::filesystem::path& path, const std::vector<PIRecord>& records);
std::vector<PIRecord> read_records(const std::filesystem::path& path);

}  // namespace triadpi::pimethods
