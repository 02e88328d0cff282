#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "triadpi/calibration.hpp"
#include "triadpi/metrics.hpp"
#include "triadpi/nets.hpp"
#include "triadpi/phantom.hpp"
#include "triadpi/pimethods.hpp"

namespace triadpi::experiment {

namespace fs = std::filesystem;

inline const std::vector<std::string> kAllMethods = {"triad", "ct", "mc", "tta", "regcnn"};
inline const std::vector<std::string> kVariants = {"baseline", "dropout", "triad", "regcnn"};

struct ExperimentConfig {
  phantom::PhantomSpec phantom = phantom::PhantomSpec::standard();
  int n_cases = 500;
  std::array<double, 3> splits{0.4, 0.2, 0.4};
  nets::NetSpec net;          // trunk shape; heads, dropout and outputs are set per variant
  nets::TrainConfig train;    // shared by the segmentation variants
  int regressor_epochs = 0;   // 0: same as train.epochs
  double alpha = 0.1;
  double gamma = 0.2;
  std::vector<std::string> methods = kAllMethods;
  int T = 20;
  int n_thresholds = 20;
  int n_aug = 20;
  int n_runs = 1;
  double dropout = 0.2;
  bool pooled_calibration = false;
  std::size_t temperature_voxels = 100000;
  std::vector<double> sweep_gammas{0.1, 0.2, 0.3, 0.4};
  pimethods::TtaOptions tta;
  std::optional<std::uint64_t> seed;
  fs::path out_dir = "out";

  void validate() const;
  std::uint64_t require_seed() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
/// Fields absent from `j` keep their defaults; unknown keys are a ConfigError.
void from_json(const nlohmann::json& j, ExperimentConfig& c);

ExperimentConfig load_config(const fs::path& path);

struct Overrides {
  std::optional<double> alpha, gamma;
  std::optional<std::vector<std::string>> methods;
  std::optional<std::uint64_t> seed;
  std::optional<fs::path> out;
};

void apply_overrides(ExperimentConfig& c, const Overrides& o);

/// Comma-separated method list; "all" selects every method.
std::vector<std::string> parse_methods(const std::string& s);

/// Checkpoint variants a method depends on.
std::vector<std::string> variants_for(const std::vector<std::string>& methods);

/// Additive for direct methods, multiplicative for sampling methods.
calibration::Mode mode_for(const std::string& method);

/// Where a run's artifacts live. `data` is shared by every run and sweep arm.
struct Layout {
  fs::path root;
  fs::path work;

  static Layout of(const ExperimentConfig& c, int run = 0);
  fs::path data() const { return root / "data"; }
  fs::path model(const std::string& variant) const { return work / "models" / variant; }
  fs::path calibration(const std::string& method) const { return work / "calibration" / method; }
  fs::path eval() const { return work / "eval"; }
  fs::path run_json() const { return root / "run.json"; }
};

using Log = std::function<void(const std::string&)>;

struct EvalOutputs {
  metrics::EvalReport report;
  std::vector<pimethods::PIRecord> records;  // last run
  fs::path dir;
};

struct CalibrationOutputs {
  calibration::CalibrationFactor factor;
  std::vector<pimethods::PIRecord> records;  // calibration fold, calibrated
  std::vector<double> coverage;              // per class, bounded intervals only
  std::vector<int> n_unbounded;
};

void cmd_gen(const ExperimentConfig& c, bool force, const Log& log = {});
void cmd_train(const ExperimentConfig& c, const std::string& variant, const Log& log = {});
/// Every variant the configured methods need, in dependency order.
void cmd_train_all(const ExperimentConfig& c, const Log& log = {});
CalibrationOutputs cmd_calibrate(const ExperimentConfig& c, const std::string& method, int run = 0,
                                 const Log& log = {});
void cmd_calibrate_all(const ExperimentConfig& c, const Log& log = {});
EvalOutputs cmd_evaluate(const ExperimentConfig& c, const Log& log = {});

struct SweepArm {
  double gamma = 0;
  metrics::EvalReport report;
  metrics::HeadOrderSummary heads;
};

/// Trains, calibrates and evaluates one three-head net per gamma on the
/// existing dataset; writes a merged table under out_dir/sweep.
std::vector<SweepArm> cmd_sweep_gamma(const ExperimentConfig& c, const Log& log = {});

/// Coverage of calibrated calibration-fold intervals per class, excluding
/// unbounded ones (NaN when every interval is unbounded).
std::vector<double> calibration_fold_coverage(const std::vector<pimethods::PIRecord>& records, int n_classes,
                                              std::vector<int>* n_unbounded = nullptr);

std::string sweep_csv(const std::vector<SweepArm>& arms);

/// Merges one command's provenance into run.json.
void record_provenance(const ExperimentConfig& c, const std::string& command,
                       const std::vector<fs::path>& artifacts, double elapsed_s);

}  // namespace triadpi::experiment
