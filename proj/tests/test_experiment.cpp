#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "triadpi/errors.hpp"
#include "triadpi/experiment.hpp"

using namespace triadpi;
using namespace triadpi::experiment;
using nlohmann::json;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

ExperimentConfig tiny(const fs::path& out) {
  const json j = {
      {"phantom", {{"grid", {16, 16, 16}}, {"spacing_mm", {3.0, 3.0, 3.0}}}},
      {"n_cases", 24},
      {"splits", {0.34, 0.33, 0.33}},
      {"net", {{"base_filters", 4}, {"depth", 2}}},
      {"train", {{"learning_rate", 1e-3}, {"epochs", 1}}},
      {"T", 3},
      {"n_thresholds", 3},
      {"n_aug", 3},
      {"temperature_voxels", 2000},
      {"seed", 11},
      {"out_dir", out.string()},
  };
  return j.get<ExperimentConfig>();
}

}  // namespace

TEST(Config, DefaultsValidate) {
  ExperimentConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.alpha, 0.1);
  EXPECT_EQ(c.gamma, 0.2);
  EXPECT_EQ(c.T, 20);
  EXPECT_EQ(c.methods, kAllMethods);
  EXPECT_THROW(c.require_seed(), ConfigError);
}

TEST(Config, PartialJsonKeepsDefaults) {
  const auto c = json{{"alpha", 0.2}, {"train", {{"epochs", 3}}}}.get<ExperimentConfig>();
  EXPECT_EQ(c.alpha, 0.2);
  EXPECT_EQ(c.train.epochs, 3);
  EXPECT_EQ(c.n_aug, 20);
}

TEST(Config, UnknownKeysRejectedAtAnyDepth) {
  EXPECT_THROW(json({{"alhpa", 0.2}}).get<ExperimentConfig>(), ConfigError);
  EXPECT_THROW(json({{"train", {{"lr", 0.2}}}}).get<ExperimentConfig>(), ConfigError);
  EXPECT_THROW(json({{"alpha", "x"}}).get<ExperimentConfig>(), ConfigError);
}

TEST(Config, JsonRoundTrip) {
  auto c = tiny("/tmp/x");
  const json a = c;
  EXPECT_EQ(json(a.get<ExperimentConfig>()), a);
}

TEST(Config, ShippedConfigsParse) {
  for (const char* name : {"smoke.json", "desk.json"}) {
    const auto c = load_config(fs::path(TRIADPI_CONFIG_DIR) / name);
    EXPECT_NO_THROW(c.validate()) << name;
  }
  EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
}

TEST(Config, ValidationRanges) {
  ExperimentConfig c;
  c.gamma = 0.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c.gamma = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ExperimentConfig{};
  c.T = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ExperimentConfig{};
  c.methods = {"mc", "mc"};
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Overrides, CommandLineWins) {
  ExperimentConfig c;
  Overrides o;
  o.alpha = 0.05;
  o.seed = 9;
  o.methods = std::vector<std::string>{"ct"};
  apply_overrides(c, o);
  EXPECT_EQ(c.alpha, 0.05);
  EXPECT_EQ(c.require_seed(), 9u);
  EXPECT_EQ(c.methods, std::vector<std::string>{"ct"});
  EXPECT_EQ(c.gamma, 0.2);
}

TEST(Methods, ParsingAndDependencies) {
  EXPECT_EQ(parse_methods("all"), kAllMethods);
  EXPECT_EQ(parse_methods("mc,triad"), (std::vector<std::string>{"mc", "triad"}));
  EXPECT_THROW(parse_methods("mc,bogus"), ConfigError);
  EXPECT_THROW(parse_methods(""), ConfigError);
  EXPECT_EQ(variants_for({"regcnn"}), (std::vector<std::string>{"baseline", "regcnn"}));
  EXPECT_EQ(variants_for({"mc", "ct", "tta"}), (std::vector<std::string>{"baseline", "dropout"}));
  EXPECT_EQ(mode_for("triad"), calibration::Mode::additive);
  EXPECT_EQ(mode_for("regcnn"), calibration::Mode::additive);
  EXPECT_EQ(mode_for("ct"), calibration::Mode::multiplicative);
  EXPECT_EQ(mode_for("mc"), calibration::Mode::multiplicative);
  EXPECT_EQ(mode_for("tta"), calibration::Mode::multiplicative);
}

TEST(Layout, RunsGetTheirOwnWorkDirectory) {
  ExperimentConfig c;
  c.out_dir = "/o";
  EXPECT_EQ(Layout::of(c).work, fs::path("/o"));
  c.n_runs = 3;
  EXPECT_EQ(Layout::of(c, 2).work, fs::path("/o/runs/run_2"));
  EXPECT_EQ(Layout::of(c, 2).data(), fs::path("/o/data"));
}

TEST(CalibrationFoldCoverage, UnboundedExcluded) {
  std::vector<pimethods::PIRecord> r(3);
  r[0].interval.classes = {{0, 1, 2}};
  r[0].truth_mL = {1};
  r[1].interval.classes = {{0, 1, 2}};
  r[1].truth_mL = {5};
  r[2].interval.classes = {{0, 1, INFINITY, false, true}};
  r[2].truth_mL = {5};
  std::vector<int> unb;
  const auto cov = calibration_fold_coverage(r, 1, &unb);
  EXPECT_DOUBLE_EQ(cov[0], 0.5);
  EXPECT_EQ(unb[0], 1);
  r.resize(1);
  r[0].interval.classes[0].unbounded = true;
  EXPECT_TRUE(std::isnan(calibration_fold_coverage(r, 1)[0]));
}

// One small end-to-end pass through every stage, run twice.
class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / "triadpi_test_pipeline";
    fs::remove_all(root_);
  }
  static fs::path root_;
};
fs::path Pipeline::root_;

TEST_F(Pipeline, StagesInOrderAndDeterministic) {
  const auto c = tiny(root_ / "a");
  EXPECT_THROW(cmd_evaluate(c), MissingArtifact);
  cmd_gen(c, false);
  EXPECT_THROW(cmd_gen(c, false), ConfigError);  // occupied without force
  EXPECT_THROW(cmd_train(c, "regcnn"), MissingArtifact);  // needs the baseline first
  cmd_train_all(c);
  EXPECT_THROW(cmd_evaluate(c), MissingArtifact);  // not calibrated yet
  cmd_calibrate_all(c);
  const auto out = cmd_evaluate(c);
  EXPECT_EQ(out.report.rows.size(), 5u * 3u);
  for (const char* f : {"report.csv", "report.txt", "timing.csv", "fig2_data.csv", "pi_records.jsonl",
                        "head_order.json"})
    EXPECT_TRUE(fs::exists(out.dir / f)) << f;

  const std::string first = slurp(out.dir / "report.csv");
  cmd_evaluate(c);
  EXPECT_EQ(slurp(out.dir / "report.csv"), first);

  // The same seed in a fresh directory gives the same report.
  const auto c2 = tiny(root_ / "b");
  cmd_gen(c2, false);
  cmd_train_all(c2);
  cmd_calibrate_all(c2);
  cmd_evaluate(c2);
  EXPECT_EQ(slurp(root_ / "b" / "eval" / "report.csv"), first);
  EXPECT_EQ(slurp(root_ / "b" / "models" / "triad" / "model.bin"), slurp(root_ / "a" / "models" / "triad" / "model.bin"));

  // A calibration factor for the wrong mode is refused.
  auto f = calibration::read_factor(root_ / "a" / "calibration" / "mc" / "calibration.json");
  f.mode = calibration::Mode::additive;
  calibration::write_factor(root_ / "a" / "calibration" / "mc" / "calibration.json", f);
  EXPECT_THROW(cmd_evaluate(c), ConfigError);
}
