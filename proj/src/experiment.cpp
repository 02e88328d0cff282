#include "triadpi/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "triadpi/errors.hpp"
#include "triadpi/hash.hpp"
#include "triadpi/random.hpp"

#ifndef TRIADPI_VERSION
#define TRIADPI_VERSION "0.0.0"
#endif

namespace triadpi::experiment {

using nlohmann::json;
using pimethods::PIRecord;
using Clock = std::chrono::steady_clock;

namespace {

void say(const Log& log, const std::string& s) {
  if (log) log(s);
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string gamma_tag(double g) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "gamma_%.2f", g);
  return buf;
}

int variant_index(const std::string& v) {
  auto it = std::find(kVariants.begin(), kVariants.end(), v);
  if (it == kVariants.end()) throw ConfigError("unknown model variant '" + v + "'");
  return int(it - kVariants.begin());
}

std::uint64_t method_tag(const std::string& m) {
  auto it = std::find(kAllMethods.begin(), kAllMethods.end(), m);
  if (it == kAllMethods.end()) throw ConfigError("unknown method '" + m + "'");
  return 0x100 + std::uint64_t(it - kAllMethods.begin());
}

std::uint64_t run_seed(const ExperimentConfig& c, int run) { return derive_seed(c.require_seed(), {0x52, std::uint64_t(run)}); }

void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot write " + p.string());
  f << s;
}

json read_json(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw MissingArtifact("missing " + p.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

// Checks every key of `user` against the defaults, recursing into objects.
void check_keys(const json& defaults, const json& user, const std::string& where) {
  if (!user.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [k, v] : user.items()) {
    if (!defaults.contains(k)) throw ConfigError("unknown config key '" + where + k + "'");
    if (defaults.at(k).is_object() && v.is_object()) check_keys(defaults.at(k), v, where + k + ".");
  }
}

}  // namespace

// --- config ------------------------------------------------------------------------

void ExperimentConfig::validate() const {
  phantom.validate();
  if (n_cases < 3) throw ConfigError("n_cases must be at least 3");
  if (!(alpha > 0 && alpha < 1)) throw ConfigError("alpha must lie in (0, 1)");
  if (!(gamma > 0 && gamma < 0.5)) throw ConfigError("gamma must lie in (0, 0.5)");
  if (methods.empty()) throw ConfigError("methods must be nonempty");
  std::set<std::string> seen;
  for (const auto& m : methods) {
    method_tag(m);
    if (!seen.insert(m).second) throw ConfigError("method '" + m + "' listed twice");
  }
  if (T < 2) throw ConfigError("T must be at least 2");
  if (n_thresholds < 2) throw ConfigError("n_thresholds must be at least 2");
  if (n_aug < 2) throw ConfigError("n_aug must be at least 2");
  if (n_runs < 1) throw ConfigError("n_runs must be at least 1");
  if (!(dropout >= 0 && dropout < 1)) throw ConfigError("dropout must lie in [0, 1)");
  if (regressor_epochs < 0) throw ConfigError("regressor_epochs must be nonnegative");
  if (temperature_voxels < 1) throw ConfigError("temperature_voxels must be positive");
  for (double g : sweep_gammas)
    if (!(g > 0 && g < 0.5)) throw ConfigError("sweep gamma " + std::to_string(g) + " outside (0, 0.5)");
  train.validate();
  nets::NetSpec s = net;
  s.in_channels = phantom.n_channels;
  s.n_classes = phantom.n_classes;
  s.validate();
}

std::uint64_t ExperimentConfig::require_seed() const {
  if (!seed) throw ConfigError("a seed is required (--seed or \"seed\" in the config)");
  return *seed;
}

void to_json(json& j, const ExperimentConfig& c) {
  j = json{{"phantom", c.phantom},
           {"n_cases", c.n_cases},
           {"splits", c.splits},
           {"net", c.net},
           {"train", c.train},
           {"regressor_epochs", c.regressor_epochs},
           {"alpha", c.alpha},
           {"gamma", c.gamma},
           {"methods", c.methods},
           {"T", c.T},
           {"n_thresholds", c.n_thresholds},
           {"n_aug", c.n_aug},
           {"n_runs", c.n_runs},
           {"dropout", c.dropout},
           {"pooled_calibration", c.pooled_calibration},
           {"temperature_voxels", c.temperature_voxels},
           {"sweep_gammas", c.sweep_gammas},
           {"tta",
            {{"flips", c.tta.flips},
             {"rotations", c.tta.rotations},
             {"translations", c.tta.translations},
             {"intensity", c.tta.intensity},
             {"max_shift_fraction", c.tta.max_shift_fraction},
             {"scale_jitter", c.tta.scale_jitter},
             {"offset_jitter", c.tta.offset_jitter}}},
           {"seed", c.seed ? json(*c.seed) : json(nullptr)},
           {"out_dir", c.out_dir.string()}};
}

void from_json(const json& user, ExperimentConfig& c) {
  const json defaults = ExperimentConfig{};
  check_keys(defaults, user, "");
  json j = defaults;
  j.merge_patch(user);
  try {
    ExperimentConfig out;
    out.phantom = j.at("phantom").get<phantom::PhantomSpec>();
    out.n_cases = j.at("n_cases").get<int>();
    out.splits = j.at("splits").get<std::array<double, 3>>();
    out.net = j.at("net").get<nets::NetSpec>();
    out.train = j.at("train").get<nets::TrainConfig>();
    out.regressor_epochs = j.at("regressor_epochs").get<int>();
    out.alpha = j.at("alpha").get<double>();
    out.gamma = j.at("gamma").get<double>();
    out.methods = j.at("methods").get<std::vector<std::string>>();
    out.T = j.at("T").get<int>();
    out.n_thresholds = j.at("n_thresholds").get<int>();
    out.n_aug = j.at("n_aug").get<int>();
    out.n_runs = j.at("n_runs").get<int>();
    out.dropout = j.at("dropout").get<double>();
    out.pooled_calibration = j.at("pooled_calibration").get<bool>();
    out.temperature_voxels = j.at("temperature_voxels").get<std::size_t>();
    out.sweep_gammas = j.at("sweep_gammas").get<std::vector<double>>();
    const json& t = j.at("tta");
    out.tta.flips = t.at("flips").get<bool>();
    out.tta.rotations = t.at("rotations").get<bool>();
    out.tta.translations = t.at("translations").get<bool>();
    out.tta.intensity = t.at("intensity").get<bool>();
    out.tta.max_shift_fraction = t.at("max_shift_fraction").get<double>();
    out.tta.scale_jitter = t.at("scale_jitter").get<double>();
    out.tta.offset_jitter = t.at("offset_jitter").get<double>();
    if (!j.at("seed").is_null()) out.seed = j.at("seed").get<std::uint64_t>();
    out.out_dir = j.at("out_dir").get<std::string>();
    c = std::move(out);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config: ") + e.what());
  }
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return j.get<ExperimentConfig>();
}

void apply_overrides(ExperimentConfig& c, const Overrides& o) {
  if (o.alpha) c.alpha = *o.alpha;
  if (o.gamma) c.gamma = *o.gamma;
  if (o.methods) c.methods = *o.methods;
  if (o.seed) c.seed = *o.seed;
  if (o.out) c.out_dir = *o.out;
}

std::vector<std::string> parse_methods(const std::string& s) {
  if (s == "all") return kAllMethods;
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    method_tag(item);
    out.push_back(item);
  }
  if (out.empty()) throw ConfigError("empty method list");
  return out;
}

std::vector<std::string> variants_for(const std::vector<std::string>& methods) {
  std::set<std::string> need;
  for (const auto& m : methods) {
    if (m == "triad") need.insert("triad");
    else if (m == "ct" || m == "tta") need.insert("baseline");
    else if (m == "mc") need.insert("dropout");
    else if (m == "regcnn") need.insert({"baseline", "regcnn"});
    else throw ConfigError("unknown method '" + m + "'");
  }
  std::vector<std::string> out;
  for (const auto& v : kVariants)
    if (need.count(v)) out.push_back(v);
  return out;
}

calibration::Mode mode_for(const std::string& method) {
  method_tag(method);
  return method == "triad" || method == "regcnn" ? calibration::Mode::additive : calibration::Mode::multiplicative;
}

Layout Layout::of(const ExperimentConfig& c, int run) {
  Layout l;
  l.root = c.out_dir;
  l.work = c.n_runs > 1 ? c.out_dir / "runs" / ("run_" + std::to_string(run)) : c.out_dir;
  return l;
}

// --- provenance -----------------------------------------------------------------

void record_provenance(const ExperimentConfig& c, const std::string& command, const std::vector<fs::path>& artifacts,
                       double elapsed_s) {
  const fs::path p = c.out_dir / "run.json";
  json run = fs::exists(p) ? read_json(p) : json::object();
  run["version"] = TRIADPI_VERSION;
  run["compiler"] = __VERSION__;
  run["cxx_standard"] = long(__cplusplus);
  json hashes = json::object();
  for (const auto& a : artifacts)
    if (fs::is_regular_file(a)) hashes[fs::relative(a, c.out_dir).generic_string()] = git_blob_sha1_file(a);
  run["commands"][command] = json{{"config", c}, {"artifacts", hashes}, {"elapsed_s", elapsed_s}};
  write_text(p, run.dump(2) + "\n");
}

// --- data -------------------------------------------------------------------------

namespace {

fs::path case_dir(const Layout& l, const std::string& id) { return l.data() / "cases" / id; }

phantom::Manifest load_manifest(const Layout& l) { return phantom::read_manifest(l.data()); }

std::vector<phantom::PhantomCase> load_cases(const Layout& l, std::vector<std::string> ids) {
  std::sort(ids.begin(), ids.end());
  std::vector<phantom::PhantomCase> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(phantom::read_case(case_dir(l, id)));
  return out;
}

}  // namespace

void cmd_gen(const ExperimentConfig& c, bool force, const Log& log) {
  const auto t0 = Clock::now();
  c.validate();
  const std::uint64_t seed = c.require_seed();
  const Layout l = Layout::of(c);
  if (fs::exists(c.out_dir) && !fs::is_empty(c.out_dir)) {
    if (!force) throw ConfigError("output directory " + c.out_dir.string() + " is not empty (use --force)");
    for (const char* sub : {"data", "models", "calibration", "eval", "runs", "sweep", "run.json"})
      fs::remove_all(c.out_dir / sub);
  }
  std::vector<std::string> ids;
  for (int i = 0; i < c.n_cases; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "case_%04d", i);
    ids.push_back(buf);
  }
  phantom::Manifest m;
  m.spec = c.phantom;
  m.seed = seed;
  m.ids = ids;
  m.fractions = c.splits;
  m.split = phantom::split_dataset(ids, c.splits, derive_seed(seed, {0x5B}));
  for (int i = 0; i < c.n_cases; ++i) {
    const auto pc = phantom::generate_phantom(c.phantom, derive_seed(seed, {0xCA5E, std::uint64_t(i)}), ids[i]);
    phantom::write_case(pc, case_dir(l, ids[i]));
  }
  phantom::write_manifest(m, l.data());
  say(log, "generated " + std::to_string(c.n_cases) + " cases (" + std::to_string(m.split.train_ids.size()) + " train, " +
               std::to_string(m.split.calibration_ids.size()) + " calibration, " +
               std::to_string(m.split.test_ids.size()) + " test)");
  record_provenance(c, "gen", {l.data() / "manifest.json"}, seconds_since(t0));
}

// --- training ---------------------------------------------------------------------

namespace {

nets::NetSpec variant_spec(const ExperimentConfig& c, const std::string& variant) {
  nets::NetSpec s = c.net;
  s.in_channels = c.phantom.n_channels;
  s.n_classes = c.phantom.n_classes;
  s.n_heads = 1;
  s.dropout_rate = 0.0;
  s.head_kind = nets::HeadKind::segmentation;
  s.regression_outputs = 0;
  if (variant == "dropout") s.dropout_rate = c.dropout;
  else if (variant == "triad") s.n_heads = 3;
  else if (variant == "regcnn") {
    s.in_channels = c.phantom.n_channels + c.phantom.n_classes;
    s.head_kind = nets::HeadKind::regression;
    s.regression_outputs = 3 * (c.phantom.n_classes - 1);
  } else variant_index(variant);
  return s;
}

nets::TrainConfig variant_train(const ExperimentConfig& c, const std::string& variant, std::uint64_t rseed) {
  nets::TrainConfig t = c.train;
  t.seed = derive_seed(rseed, {0x7A, std::uint64_t(variant_index(variant))});
  t.loss = nets::LossKind::dice;
  if (variant == "triad") {
    t.loss = nets::LossKind::triad;
    t.gamma = c.gamma;
  } else if (variant == "regcnn") {
    t.loss = nets::LossKind::pinball_compound;
    t.alpha = c.alpha;
    if (c.regressor_epochs > 0) t.epochs = c.regressor_epochs;
  }
  return t;
}

std::uint64_t model_seed(std::uint64_t rseed, const std::string& variant) {
  return derive_seed(rseed, {0x30, std::uint64_t(variant_index(variant))});
}

void require_checkpoint(const fs::path& dir, const std::string& why) {
  if (!fs::exists(dir / "model.json")) throw MissingArtifact(why + ": no checkpoint at " + dir.string());
}

std::vector<Tensor<float>> regressor_inputs(const nets::SegNet<float>& seg, const std::vector<phantom::PhantomCase>& cases,
                                            int n_classes) {
  std::vector<Tensor<float>> out;
  out.reserve(cases.size());
  for (const auto& pc : cases) {
    const auto masks = seg.forward(pc.intensities);
    const auto labels = pimethods::argmax_labels(masks.probs[0]);
    out.push_back(nets::regressor_input(pc.intensities, phantom::one_hot<float>(labels, pc.grid, n_classes)));
  }
  return out;
}

void train_variant(const ExperimentConfig& c, const Layout& l, const std::string& variant, std::uint64_t rseed,
                   const Log& log) {
  const auto m = load_manifest(l);
  if (m.split.train_ids.empty()) throw ConfigError("training fold is empty");
  const auto cases = load_cases(l, m.split.train_ids);
  const nets::TrainConfig tc = variant_train(c, variant, rseed);
  const auto t0 = Clock::now();
  auto on_epoch = [&](int e, double loss) {
    std::ostringstream s;
    s << variant << " epoch " << e + 1 << "/" << tc.epochs << " loss " << metrics::fmt(loss, 5) << " ("
      << metrics::fmt(seconds_since(t0), 1) << " s)";
    say(log, s.str());
  };

  if (variant == "regcnn") {
    require_checkpoint(l.model("baseline"), "the regressor takes a baseline segmentation as input");
    const auto seg = nets::load_segnet(l.model("baseline"));
    auto inputs = regressor_inputs(seg, cases, c.phantom.n_classes);
    std::vector<nets::RegExample> ex;
    for (std::size_t i = 0; i < cases.size(); ++i) ex.push_back({std::move(inputs[i]), cases[i].true_volumes_mL});
    auto net = nets::build_regressor<float>(variant_spec(c, variant), model_seed(rseed, variant));
    std::vector<const Tensor<float>*> imgs;
    for (const auto& e : ex) imgs.push_back(&e.input);
    net.set_input_norm(nets::fit_input_norm(imgs));
    const auto res = nets::train_regressor(net, ex, tc, on_epoch);
    nets::save_checkpoint(l.model(variant), net, tc, res.loss_trace);
    return;
  }

  auto net = nets::build_net<float>(variant_spec(c, variant), model_seed(rseed, variant));
  std::vector<const Tensor<float>*> imgs;
  std::vector<nets::SegExample> ex;
  for (const auto& pc : cases) {
    imgs.push_back(&pc.intensities);
    ex.push_back({&pc.intensities, &pc.labels});
  }
  net.set_input_norm(nets::fit_input_norm(imgs));
  const auto res = nets::train(net, ex, tc, on_epoch);
  nets::save_checkpoint(l.model(variant), net, tc, res.loss_trace);
}

}  // namespace

void cmd_train(const ExperimentConfig& c, const std::string& variant, const Log& log) {
  const auto t0 = Clock::now();
  c.validate();
  variant_index(variant);
  std::vector<fs::path> artifacts;
  for (int r = 0; r < c.n_runs; ++r) {
    const Layout l = Layout::of(c, r);
    train_variant(c, l, variant, run_seed(c, r), log);
    artifacts.push_back(l.model(variant) / "model.bin");
  }
  record_provenance(c, "train/" + variant, artifacts, seconds_since(t0));
}

void cmd_train_all(const ExperimentConfig& c, const Log& log) {
  for (const auto& v : variants_for(c.methods)) cmd_train(c, v, log);
}

// --- prediction ---------------------------------------------------------------------

namespace {

struct Models {
  std::optional<nets::SegNet<float>> baseline, dropout, triad;
  std::optional<nets::RegNet<float>> regcnn;
  std::optional<calibration::Temperature> temperature;
};

void load_models(const Layout& l, const std::vector<std::string>& methods, Models& m) {
  for (const auto& v : variants_for(methods)) {
    require_checkpoint(l.model(v), "method needs the '" + v + "' model");
    if (v == "baseline" && !m.baseline) m.baseline = nets::load_segnet(l.model(v));
    if (v == "dropout" && !m.dropout) m.dropout = nets::load_segnet(l.model(v));
    if (v == "triad" && !m.triad) m.triad = nets::load_segnet(l.model(v));
    if (v == "regcnn" && !m.regcnn) m.regcnn = nets::load_regnet(l.model(v));
  }
}

std::vector<double> class_dsc(const std::vector<std::uint8_t>& pred, const phantom::PhantomCase& pc) {
  std::vector<double> d;
  for (int c = 1; c < pc.n_classes(); ++c) d.push_back(metrics::dsc(pred, pc.labels, c));
  return d;
}

std::vector<double> head_volume_row(const Tensor<float>& probs, const phantom::Spacing& sp) {
  return pimethods::mask_volumes(probs, sp);
}

/// Uncalibrated record of one method on one case.
PIRecord predict(const ExperimentConfig& c, const Models& models, const std::string& method,
                 const phantom::PhantomCase& pc, std::uint64_t rseed) {
  PIRecord r;
  r.case_id = pc.case_id;
  r.method_id = method;
  r.truth_mL = pc.true_volumes_mL;
  const auto& sp = pc.spacing_mm;
  const std::uint64_t case_seed = derive_seed(rseed, {method_tag(method), pc.seed});
  const auto t0 = Clock::now();
  if (method == "triad") {
    const auto out = models.triad->forward(pc.intensities);
    r.raw = pimethods::triad_intervals(out, sp);
    r.wall_time_s = seconds_since(t0);
    for (const auto& p : out.probs) r.head_volumes_mL.push_back(head_volume_row(p, sp));
    r.dsc = class_dsc(pimethods::argmax_labels(out.head("mean")), pc);
  } else if (method == "ct") {
    if (!models.temperature) throw MissingArtifact("confidence thresholding needs a fitted temperature");
    const auto out = models.baseline->forward(pc.intensities);
    const auto probs = calibration::scaled_softmax(out.logits[0], models.temperature->tau);
    auto stats = pimethods::ct_stats(probs, pimethods::uniform_thresholds(c.n_thresholds), sp);
    stats.method_id = "ct";
    r.raw = pimethods::interval_from_stats(stats, c.alpha);
    r.stats = std::move(stats);
    r.wall_time_s = seconds_since(t0);
    r.dsc = class_dsc(pimethods::argmax_labels(out.probs[0]), pc);
  } else if (method == "mc") {
    Tensor<float> mean_probs;
    auto stats = pimethods::mc_stats(*models.dropout, pc.intensities, c.T, case_seed, sp, &mean_probs);
    stats.method_id = "mc";
    r.raw = pimethods::interval_from_stats(stats, c.alpha);
    r.stats = std::move(stats);
    r.wall_time_s = seconds_since(t0);
    r.dsc = class_dsc(pimethods::argmax_labels(mean_probs), pc);
  } else if (method == "tta") {
    auto stats = pimethods::tta_stats(*models.baseline, pc.intensities, c.n_aug, case_seed, sp, c.tta);
    stats.method_id = "tta";
    r.raw = pimethods::interval_from_stats(stats, c.alpha);
    r.stats = std::move(stats);
    r.wall_time_s = seconds_since(t0);
    // Segmentation quality is scored on the plain forward pass, outside the timed PI work.
    r.dsc = class_dsc(pimethods::argmax_labels(models.baseline->forward(pc.intensities).probs[0]), pc);
    r.segmentation_passes = 1;
  } else if (method == "regcnn") {
    const auto out = models.baseline->forward(pc.intensities);
    const auto labels = pimethods::argmax_labels(out.probs[0]);
    r.raw = pimethods::regcnn_intervals(*models.regcnn, pc.intensities,
                                        phantom::one_hot<float>(labels, pc.grid, pc.n_classes()));
    r.raw.forward_passes = 2;  // segmentation, then regression
    r.wall_time_s = seconds_since(t0);
    r.dsc = class_dsc(labels, pc);
    r.segmentation_passes = 1;
  } else {
    throw ConfigError("unknown method '" + method + "'");
  }
  r.raw.method_id = method;
  r.raw.calibrated = false;
  r.forward_passes = r.raw.forward_passes;
  r.interval = r.raw;
  return r;
}

void apply_factor(PIRecord& r, const calibration::CalibrationFactor& f) {
  if (f.mode == calibration::Mode::additive) {
    r.interval = calibration::apply_calibration(r.raw, f);
  } else {
    if (!r.stats) throw ConfigError("method '" + r.method_id + "' has no sampling statistics to calibrate");
    r.interval = calibration::apply_calibration(*r.stats, f);
  }
  r.interval.forward_passes = r.raw.forward_passes;
}

fs::path temperature_path(const Layout& l) { return l.calibration("ct") / "temperature.json"; }

calibration::Temperature fit_ct_temperature(const ExperimentConfig& c, const nets::SegNet<float>& baseline,
                                            const std::vector<phantom::PhantomCase>& cases, std::uint64_t rseed) {
  std::vector<Tensor<float>> logits;
  logits.reserve(cases.size());
  for (const auto& pc : cases) logits.push_back(baseline.forward(pc.intensities).logits[0]);
  std::vector<const Tensor<float>*> lp;
  std::vector<const std::vector<std::uint8_t>*> lab;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    lp.push_back(&logits[i]);
    lab.push_back(&cases[i].labels);
  }
  const auto sample = calibration::sample_logits(lp, lab, c.temperature_voxels, derive_seed(rseed, {0x7E}));
  return calibration::fit_temperature(sample);
}

CalibrationOutputs calibrate_method(const ExperimentConfig& c, const Layout& l, const std::string& method,
                                    std::uint64_t rseed, const Log& log) {
  const auto m = load_manifest(l);
  if (m.split.calibration_ids.empty()) throw ConfigError("calibration fold is empty");
  Models models;
  load_models(l, {method}, models);
  const auto cases = load_cases(l, m.split.calibration_ids);
  const fs::path dir = l.calibration(method);

  if (method == "ct") {
    models.temperature = fit_ct_temperature(c, *models.baseline, cases, rseed);
    if (models.temperature->single_class) say(log, "warning: temperature sample holds a single class");
    write_text(temperature_path(l), json(*models.temperature).dump(2) + "\n");
    say(log, "ct temperature " + metrics::fmt(models.temperature->tau, 2) + " (nll " +
                 metrics::fmt(models.temperature->nll_before, 4) + " -> " +
                 metrics::fmt(models.temperature->nll_after, 4) + ")");
  }

  std::vector<PIRecord> records;
  for (const auto& pc : cases) records.push_back(predict(c, models, method, pc, rseed));

  const int nf = c.phantom.n_classes - 1;
  CalibrationOutputs out;
  if (mode_for(method) == calibration::Mode::additive) {
    std::vector<std::vector<calibration::IntervalSample>> per(nf);
    for (const auto& r : records)
      for (int k = 0; k < nf; ++k) per[k].push_back({r.raw.classes[k].lower, r.raw.classes[k].upper, r.truth_mL[k]});
    out.factor = calibration::fit_additive(per, c.alpha, method, c.pooled_calibration);
  } else {
    std::vector<std::vector<calibration::StatsSample>> per(nf);
    for (const auto& r : records)
      for (int k = 0; k < nf; ++k) per[k].push_back({r.stats->mu_mL[k], r.stats->sigma_mL[k], r.truth_mL[k]});
    out.factor = calibration::fit_multiplicative(per, c.alpha, method, c.pooled_calibration);
  }
  for (auto& r : records) apply_factor(r, out.factor);
  out.coverage = calibration_fold_coverage(records, nf, &out.n_unbounded);
  out.records = std::move(records);

  calibration::write_factor(dir / "calibration.json", out.factor);
  pimethods::write_records(dir / "cal_records.jsonl", out.records);
  json cov = json::array();
  for (int k = 0; k < nf; ++k)
    cov.push_back(json{{"class", c.phantom.class_names()[k + 1]},
                       {"coverage", out.coverage[k]},
                       {"n_unbounded", out.n_unbounded[k]}});
  write_text(dir / "coverage.json", cov.dump(2) + "\n");

  std::ostringstream s;
  s << method << " calibrated (" << calibration::mode_name(out.factor.mode) << "), q =";
  for (const auto& f : out.factor.classes) s << " " << metrics::fmt(f.q, 3);
  s << "; calibration-fold coverage =";
  for (double v : out.coverage) s << " " << metrics::fmt(v, 3);
  say(log, s.str());
  return out;
}

metrics::EvalReport evaluate_run(const ExperimentConfig& c, const Layout& l, std::uint64_t rseed,
                                 std::vector<PIRecord>& records, const Log& log) {
  const auto m = load_manifest(l);
  if (m.split.test_ids.empty()) throw ConfigError("test fold is empty");
  Models models;
  load_models(l, c.methods, models);
  std::map<std::string, calibration::CalibrationFactor> factors;
  for (const auto& method : c.methods) {
    factors[method] = calibration::read_factor(l.calibration(method) / "calibration.json");
    if (factors[method].mode != mode_for(method))
      throw ConfigError("calibration for '" + method + "' has the wrong mode");
    if (int(factors[method].classes.size()) != c.phantom.n_classes - 1)
      throw ConfigError("calibration for '" + method + "' has the wrong class count");
    if (method == "ct") models.temperature = read_json(temperature_path(l)).get<calibration::Temperature>();
  }
  const auto cases = load_cases(l, m.split.test_ids);
  records.clear();
  for (const auto& method : c.methods) {
    const auto t0 = Clock::now();
    for (const auto& pc : cases) {
      PIRecord r = predict(c, models, method, pc, rseed);
      apply_factor(r, factors.at(method));
      records.push_back(std::move(r));
    }
    say(log, method + " evaluated on " + std::to_string(cases.size()) + " cases (" +
                 metrics::fmt(seconds_since(t0), 1) + " s)");
  }
  auto names = c.phantom.class_names();
  names.erase(names.begin());
  const auto rep = metrics::build_report(records, c.methods, names, c.alpha);

  const fs::path e = l.eval();
  pimethods::write_records(e / "pi_records.jsonl", records);
  write_text(e / "report.csv", metrics::report_csv(rep));
  write_text(e / "report.txt", metrics::report_table(rep));
  write_text(e / "timing.csv", metrics::timing_csv(rep));
  const std::string fig_method =
      std::find(c.methods.begin(), c.methods.end(), "triad") != c.methods.end() ? "triad" : c.methods.front();
  std::vector<PIRecord> fig;
  for (const auto& r : records)
    if (r.method_id == fig_method) fig.push_back(r);
  write_text(e / "fig2_data.csv", metrics::interval_csv(fig, names));
  if (!fig.empty() && fig_method == "triad") {
    const auto h = metrics::head_order_summary(records);
    write_text(e / "head_order.json", json{{"n_cases", h.n_cases},
                                           {"violation_rate", h.violation_rate()},
                                           {"mean_lower_mL", h.mean_lower_mL},
                                           {"mean_mean_mL", h.mean_mean_mL},
                                           {"mean_upper_mL", h.mean_upper_mL}}
                                          .dump(2) + "\n");
  }
  return rep;
}

}  // namespace

std::vector<double> calibration_fold_coverage(const std::vector<PIRecord>& records, int n_classes,
                                              std::vector<int>* n_unbounded) {
  std::vector<double> cov(n_classes, 0.0);
  std::vector<int> unb(n_classes, 0), n(n_classes, 0);
  for (const auto& r : records)
    for (int k = 0; k < n_classes; ++k) {
      const auto& iv = r.interval.classes.at(k);
      if (iv.unbounded) {
        ++unb[k];
        continue;
      }
      ++n[k];
      cov[k] += iv.covers(r.truth_mL.at(k));
    }
  for (int k = 0; k < n_classes; ++k) cov[k] = n[k] ? cov[k] / n[k] : std::numeric_limits<double>::quiet_NaN();
  if (n_unbounded) *n_unbounded = unb;
  return cov;
}

CalibrationOutputs cmd_calibrate(const ExperimentConfig& c, const std::string& method, int run, const Log& log) {
  const auto t0 = Clock::now();
  c.validate();
  method_tag(method);
  if (run < 0 || run >= c.n_runs) throw ConfigError("run index out of range");
  const Layout l = Layout::of(c, run);
  auto out = calibrate_method(c, l, method, run_seed(c, run), log);
  record_provenance(c, "calibrate/" + method + (c.n_runs > 1 ? "/run_" + std::to_string(run) : ""),
                    {l.calibration(method) / "calibration.json"}, seconds_since(t0));
  return out;
}

void cmd_calibrate_all(const ExperimentConfig& c, const Log& log) {
  for (int r = 0; r < c.n_runs; ++r)
    for (const auto& m : c.methods) cmd_calibrate(c, m, r, log);
}

EvalOutputs cmd_evaluate(const ExperimentConfig& c, const Log& log) {
  const auto t0 = Clock::now();
  c.validate();
  EvalOutputs out;
  std::vector<metrics::EvalReport> reports;
  std::vector<fs::path> artifacts;
  for (int r = 0; r < c.n_runs; ++r) {
    const Layout l = Layout::of(c, r);
    reports.push_back(evaluate_run(c, l, run_seed(c, r), out.records, log));
    artifacts.push_back(l.eval() / "report.csv");
    out.dir = l.eval();
  }
  if (c.n_runs > 1) {
    out.report = metrics::aggregate_runs(reports);
    out.dir = c.out_dir / "eval";
    write_text(out.dir / "report.csv", metrics::report_csv(out.report));
    write_text(out.dir / "report.txt", metrics::report_table(out.report));
    artifacts.push_back(out.dir / "report.csv");
  } else {
    out.report = reports.front();
  }
  say(log, "\n" + metrics::report_table(out.report));
  record_provenance(c, "evaluate", artifacts, seconds_since(t0));
  return out;
}

// --- gamma sweep ---------------------------------------------------------------------

std::string sweep_csv(const std::vector<SweepArm>& arms) {
  std::ostringstream o;
  o << "gamma,class,delta_f_percent,width_mL,mae_mL,dsc,mean_lower_head_mL,mean_upper_head_mL,"
       "head_order_violation_rate\n";
  for (const auto& a : arms)
    for (const auto& row : a.report.rows) {
      const int k = row.class_index;
      o << metrics::fmt(a.gamma, 2) << ',' << row.class_name << ',' << metrics::fmt(row.delta_f_percent) << ','
        << metrics::fmt(row.width_mL) << ',' << metrics::fmt(row.mae_mL) << ',' << metrics::fmt(row.dsc) << ','
        << metrics::fmt(a.heads.mean_lower_mL.at(k)) << ',' << metrics::fmt(a.heads.mean_upper_mL.at(k)) << ','
        << metrics::fmt(a.heads.violation_rate()) << '\n';
    }
  return o.str();
}

std::vector<SweepArm> cmd_sweep_gamma(const ExperimentConfig& base, const Log& log) {
  const auto t0 = Clock::now();
  base.validate();
  if (base.sweep_gammas.empty()) throw ConfigError("no gamma values to sweep");
  std::vector<SweepArm> arms;
  std::vector<fs::path> artifacts;
  const std::uint64_t rseed = run_seed(base, 0);
  for (double g : base.sweep_gammas) {
    ExperimentConfig c = base;
    c.gamma = g;
    c.methods = {"triad"};
    c.validate();
    Layout l{base.out_dir, base.out_dir / "sweep" / gamma_tag(g)};
    say(log, "sweep: gamma " + metrics::fmt(g, 2));
    train_variant(c, l, "triad", rseed, log);
    calibrate_method(c, l, "triad", rseed, log);
    std::vector<PIRecord> records;
    SweepArm arm;
    arm.gamma = g;
    arm.report = evaluate_run(c, l, rseed, records, log);
    arm.heads = metrics::head_order_summary(records);
    arms.push_back(std::move(arm));
    artifacts.push_back(l.eval() / "report.csv");
  }
  write_text(base.out_dir / "sweep" / "sweep.csv", sweep_csv(arms));
  std::ostringstream t;
  for (const auto& a : arms)
    t << "gamma " << metrics::fmt(a.gamma, 2) << ", head-order violation rate "
      << metrics::fmt(a.heads.violation_rate(), 3) << "\n"
      << metrics::report_table(a.report) << "\n";
  write_text(base.out_dir / "sweep" / "sweep.txt", t.str());
  say(log, "\n" + t.str());
  artifacts.push_back(base.out_dir / "sweep" / "sweep.csv");
  record_provenance(base, "sweep-gamma", artifacts, seconds_since(t0));
  return arms;
}

}  // namespace triadpi::experiment
