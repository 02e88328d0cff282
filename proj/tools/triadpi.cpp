#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "triadpi/errors.hpp"
#include "triadpi/experiment.hpp"

namespace ex = triadpi::experiment;

namespace {

struct Common {
  std::string config;
  std::optional<double> alpha, gamma;
  std::string methods;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* app, Common& o, bool seed_required) {
  app->add_option("--config", o.config, "experiment config (JSON)")->check(CLI::ExistingFile);
  app->add_option("--alpha", o.alpha, "target miscoverage");
  app->add_option("--gamma", o.gamma, "TriadLoss gamma");
  app->add_option("--methods", o.methods, "comma-separated subset of triad,ct,mc,tta,regcnn, or all");
  auto* s = app->add_option("--seed", o.seed, "master seed");
  if (seed_required) s->required();
  app->add_option("--out", o.out, "output directory");
}

ex::ExperimentConfig resolve(const Common& o) {
  ex::ExperimentConfig c = o.config.empty() ? ex::ExperimentConfig{} : ex::load_config(o.config);
  ex::Overrides ov;
  ov.alpha = o.alpha;
  ov.gamma = o.gamma;
  if (!o.methods.empty()) ov.methods = ex::parse_methods(o.methods);
  ov.seed = o.seed;
  if (!o.out.empty()) ov.out = o.out;
  ex::apply_overrides(c, ov);
  // Later stages reuse the dataset seed unless told otherwise.
  if (!c.seed) {
    const auto m = c.out_dir / "data" / "manifest.json";
    if (std::filesystem::exists(m)) c.seed = triadpi::phantom::read_manifest(c.out_dir / "data").seed;
  }
  c.validate();
  return c;
}

void log_line(const std::string& s) { std::cerr << s << std::endl; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Calibrated volume predictive intervals on synthetic phantoms"};
  app.require_subcommand(1);

  Common gen_o, train_o, cal_o, eval_o, sweep_o, run_o;
  bool force = false, run_force = false;
  std::string variant, method;

  auto* gen = app.add_subcommand("gen", "generate the phantom dataset");
  add_common(gen, gen_o, true);
  gen->add_flag("--force", force, "overwrite a non-empty output directory");

  auto* train = app.add_subcommand("train", "train model variants");
  add_common(train, train_o, true);
  train->add_option("--variant", variant, "baseline, dropout, triad or regcnn (default: all the methods need)")
      ->check(CLI::IsMember(ex::kVariants));

  auto* cal = app.add_subcommand("calibrate", "fit calibration factors on the calibration fold");
  add_common(cal, cal_o, false);
  cal->add_option("--method", method, "single method (default: every configured method)");

  auto* eval = app.add_subcommand("evaluate", "evaluate calibrated methods on the test fold");
  add_common(eval, eval_o, false);

  auto* sweep = app.add_subcommand("sweep-gamma", "train, calibrate and evaluate the three-head net for each gamma");
  add_common(sweep, sweep_o, false);

  auto* run = app.add_subcommand("run", "gen, train, calibrate and evaluate in one go");
  add_common(run, run_o, true);
  run->add_flag("--force", run_force, "overwrite a non-empty output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      ex::cmd_gen(resolve(gen_o), force, log_line);
    } else if (train->parsed()) {
      const auto c = resolve(train_o);
      if (variant.empty()) ex::cmd_train_all(c, log_line);
      else ex::cmd_train(c, variant, log_line);
    } else if (cal->parsed()) {
      const auto c = resolve(cal_o);
      if (method.empty()) ex::cmd_calibrate_all(c, log_line);
      else
        for (int r = 0; r < c.n_runs; ++r) ex::cmd_calibrate(c, method, r, log_line);
    } else if (eval->parsed()) {
      const auto out = ex::cmd_evaluate(resolve(eval_o), log_line);
      std::cout << (out.dir / "report.csv").string() << "\n";
    } else if (sweep->parsed()) {
      ex::cmd_sweep_gamma(resolve(sweep_o), log_line);
    } else if (run->parsed()) {
      const auto c = resolve(run_o);
      ex::cmd_gen(c, run_force, log_line);
      ex::cmd_train_all(c, log_line);
      ex::cmd_calibrate_all(c, log_line);
      const auto out = ex::cmd_evaluate(c, log_line);
      std::cout << (out.dir / "report.csv").string() << "\n";
    }
  } catch (const triadpi::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const triadpi::ShapeError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const triadpi::MissingArtifact& e) {
    std::cerr << "missing artifact: " << e.what() << "\n";
    return 3;
  } catch (const triadpi::FormatError& e) {
    std::cerr << "unreadable artifact: " << e.what() << "\n";
    return 3;
  } catch (const triadpi::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
