#include "triadpi/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "triadpi/errors.hpp"
#include "triadpi/layers.hpp"
#include "triadpi/random.hpp"

namespace triadpi::calibration {

using nlohmann::json;

std::string mode_name(Mode m) { return m == Mode::additive ? "additive_mL" : "multiplicative"; }

Mode mode_from_name(const std::string& s) {
  if (s == "additive_mL" || s == "additive") return Mode::additive;
  if (s == "multiplicative") return Mode::multiplicative;
  throw ConfigError("unknown calibration mode '" + s + "'");
}

int conformal_rank(int n, double alpha) {
  if (n < 1) throw ConfigError("calibration needs at least one record");
  if (!(alpha > 0 && alpha < 1)) throw ConfigError("alpha must lie in (0, 1)");
  // (n + 1)(1 - alpha) is often an integer in exact arithmetic (20 * 0.9) but
  // lands a few ulps above it in floating point.
  return int(std::ceil((n + 1) * (1.0 - alpha) - 1e-9));
}

namespace {

double quantile_sorted(const std::vector<double>& v, double p) {
  if (v.empty()) return 0;
  const double pos = p * double(v.size() - 1);
  const std::size_t i = std::size_t(pos);
  const double frac = pos - double(i);
  return i + 1 < v.size() ? v[i] + frac * (v[i + 1] - v[i]) : v[i];
}

ScoreSummary summarise(const std::vector<double>& sorted) {
  ScoreSummary s;
  std::vector<double> finite;
  for (double v : sorted)
    if (std::isfinite(v)) finite.push_back(v);
    else ++s.n_infinite;
  s.histogram.assign(10, 0);
  if (finite.empty()) return s;
  s.min = finite.front();
  s.max = finite.back();
  s.q25 = quantile_sorted(finite, 0.25);
  s.median = quantile_sorted(finite, 0.5);
  s.q75 = quantile_sorted(finite, 0.75);
  const double span = s.max - s.min;
  for (double v : finite) {
    int b = span > 0 ? int((v - s.min) / span * 10.0) : 0;
    s.histogram[std::min(b, 9)]++;
  }
  return s;
}

}  // namespace

ClassFactor conformal_q(std::vector<double> scores, double alpha) {
  if (scores.empty()) throw ConfigError("calibration needs at least one record");
  for (double s : scores)
    if (std::isnan(s)) throw NumericalError("NaN nonconformity score");
  std::sort(scores.begin(), scores.end());
  ClassFactor f;
  f.n_cal = int(scores.size());
  f.k = conformal_rank(f.n_cal, alpha);
  if (f.k > f.n_cal) {
    f.unbounded = true;
    f.q = std::numeric_limits<double>::infinity();
  } else {
    f.q = scores[f.k - 1];
    f.unbounded = !std::isfinite(f.q);
  }
  f.scores = summarise(scores);
  return f;
}

double additive_score(const IntervalSample& s) { return std::max(s.lower - s.truth, s.truth - s.upper); }

double multiplicative_score(const StatsSample& s) {
  const double r = std::abs(s.truth - s.mu);
  if (s.sigma > 0) return r / s.sigma;
  return r == 0 ? 0.0 : std::numeric_limits<double>::infinity();
}

ClassFactor fit_additive_q(std::span<const IntervalSample> records, double alpha) {
  std::vector<double> scores;
  scores.reserve(records.size());
  for (const auto& r : records) scores.push_back(additive_score(r));
  return conformal_q(std::move(scores), alpha);
}

ClassFactor fit_multiplicative_q(std::span<const StatsSample> records, double alpha) {
  std::vector<double> scores;
  scores.reserve(records.size());
  for (const auto& r : records) {
    if (r.sigma < 0) throw ConfigError("negative sigma in calibration record");
    scores.push_back(multiplicative_score(r));
  }
  ClassFactor f = conformal_q(std::move(scores), alpha);
  return f;
}

namespace {

template <typename Sample, typename Fit>
CalibrationFactor fit_all(const std::vector<std::vector<Sample>>& per_class, double alpha,
                          const std::string& method_id, bool pooled, Mode mode, Fit fit) {
  if (per_class.empty()) throw ConfigError("calibration needs at least one class");
  CalibrationFactor out;
  out.method_id = method_id;
  out.mode = mode;
  out.alpha = alpha;
  out.pooled = pooled;
  if (pooled) {
    std::vector<Sample> all;
    for (const auto& c : per_class) all.insert(all.end(), c.begin(), c.end());
    out.classes.assign(per_class.size(), fit(std::span<const Sample>(all), alpha));
  } else {
    for (const auto& c : per_class) out.classes.push_back(fit(std::span<const Sample>(c), alpha));
  }
  return out;
}

}  // namespace

CalibrationFactor fit_additive(const std::vector<std::vector<IntervalSample>>& per_class, double alpha,
                               const std::string& method_id, bool pooled) {
  return fit_all(per_class, alpha, method_id, pooled, Mode::additive,
                 [](std::span<const IntervalSample> r, double a) { return fit_additive_q(r, a); });
}

CalibrationFactor fit_multiplicative(const std::vector<std::vector<StatsSample>>& per_class, double alpha,
                                     const std::string& method_id, bool pooled) {
  return fit_all(per_class, alpha, method_id, pooled, Mode::multiplicative,
                 [](std::span<const StatsSample> r, double a) { return fit_multiplicative_q(r, a); });
}

namespace {

ClassInterval unbounded_interval(double mean) {
  ClassInterval c;
  c.lower = 0;
  c.mean = mean;
  c.upper = pimethods::kUnbounded;
  c.unbounded = true;
  return c;
}

}  // namespace

ClassInterval apply_additive(const ClassInterval& in, const ClassFactor& f) {
  if (f.unbounded) {
    ClassInterval c = unbounded_interval(in.mean);
    c.order_violation = in.order_violation;
    return c;
  }
  ClassInterval c = in;
  c.lower = std::max(in.lower - f.q, 0.0);
  c.upper = std::max(in.upper + f.q, 0.0);
  return c;
}

ClassInterval apply_multiplicative(double mu, double sigma, const ClassFactor& f) {
  if (f.unbounded) return unbounded_interval(mu);
  ClassInterval c;
  c.mean = mu;
  c.lower = std::max(mu - f.q * sigma, 0.0);
  c.upper = std::max(mu + f.q * sigma, 0.0);
  return c;
}

VolumeInterval apply_calibration(const VolumeInterval& interval, const CalibrationFactor& factor) {
  if (factor.mode != Mode::additive)
    throw ConfigError("a direct interval needs an additive factor, got " + mode_name(factor.mode));
  if (interval.classes.size() != factor.classes.size()) throw ShapeError("factor and interval differ in class count");
  VolumeInterval out = interval;
  for (std::size_t c = 0; c < out.classes.size(); ++c)
    out.classes[c] = apply_additive(interval.classes[c], factor.classes[c]);
  out.calibrated = true;
  return out;
}

VolumeInterval apply_calibration(const SamplingStats& stats, const CalibrationFactor& factor) {
  if (factor.mode != Mode::multiplicative)
    throw ConfigError("sampling statistics need a multiplicative factor, got " + mode_name(factor.mode));
  if (stats.mu_mL.size() != factor.classes.size()) throw ShapeError("factor and statistics differ in class count");
  VolumeInterval out;
  out.method_id = stats.method_id;
  out.forward_passes = stats.forward_passes;
  for (std::size_t c = 0; c < stats.mu_mL.size(); ++c)
    out.classes.push_back(apply_multiplicative(stats.mu_mL[c], stats.sigma_mL[c], factor.classes[c]));
  out.calibrated = true;
  return out;
}

double empirical_coverage(std::span<const IntervalSample> records) {
  if (records.empty()) throw ConfigError("coverage of an empty record list");
  std::size_t hit = 0;
  for (const auto& r : records) hit += (r.lower <= r.truth && r.truth <= r.upper);
  return double(hit) / double(records.size());
}

// --- temperature --------------------------------------------------------------------

LogitSample sample_logits(const std::vector<const Tensor<float>*>& logits,
                          const std::vector<const std::vector<std::uint8_t>*>& labels, std::size_t max_voxels,
                          std::uint64_t seed) {
  if (logits.size() != labels.size()) throw ShapeError("logits and labels differ in case count");
  if (logits.empty()) throw ConfigError("temperature fit needs at least one case");
  const int nc = logits.front()->channels();
  std::vector<std::pair<std::uint32_t, std::uint32_t>> index;  // (case, voxel)
  for (std::size_t k = 0; k < logits.size(); ++k) {
    if (logits[k]->channels() != nc) throw ShapeError("cases differ in class count");
    if (labels[k]->size() != logits[k]->voxels()) throw ShapeError("label grid does not match logits");
    for (std::size_t v = 0; v < logits[k]->voxels(); ++v) index.emplace_back(std::uint32_t(k), std::uint32_t(v));
  }
  Rng rng(derive_seed(seed, {0x7e3}));
  const std::size_t n = std::min(max_voxels, index.size());
  // Partial Fisher-Yates: the first n entries become a uniform sample.
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + std::size_t(rng.bits() % (index.size() - i));
    std::swap(index[i], index[j]);
  }
  LogitSample s;
  s.n_classes = nc;
  s.logits.reserve(n * nc);
  s.labels.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto [k, v] = index[i];
    const std::size_t nv = logits[k]->voxels();
    for (int c = 0; c < nc; ++c) s.logits.push_back(logits[k]->data()[std::size_t(c) * nv + v]);
    const auto lab = (*labels[k])[v];
    if (lab >= nc) throw ConfigError("label out of range in temperature sample");
    s.labels.push_back(lab);
  }
  return s;
}

double mean_nll(const LogitSample& s, double tau) {
  if (s.size() == 0) throw ConfigError("temperature fit needs a nonempty sample");
  if (!(tau > 0)) throw ConfigError("temperature must be positive");
  const int nc = s.n_classes;
  double total = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double* z = s.logits.data() + i * nc;
    double m = z[0] / tau;
    for (int c = 1; c < nc; ++c) m = std::max(m, z[c] / tau);
    double sum = 0;
    for (int c = 0; c < nc; ++c) sum += std::exp(z[c] / tau - m);
    total += m + std::log(sum) - z[s.labels[i]] / tau;
  }
  return total / double(s.size());
}

std::vector<double> temperature_grid() {
  std::vector<double> g;
  for (int k = 1; k <= 100; ++k) g.push_back(0.05 * k);
  return g;
}

Temperature fit_temperature(const LogitSample& s) {
  if (s.size() == 0) throw ConfigError("temperature fit needs a nonempty sample");
  Temperature t;
  t.nll_before = mean_nll(s, 1.0);
  t.tau = 1.0;
  t.nll_after = t.nll_before;
  for (double tau : temperature_grid()) {
    const double v = mean_nll(s, tau);
    if (v < t.nll_after) {
      t.nll_after = v;
      t.tau = tau;
    }
  }
  t.single_class = std::all_of(s.labels.begin(), s.labels.end(), [&](auto l) { return l == s.labels.front(); });
  return t;
}

Tensor<float> scaled_softmax(const Tensor<float>& logits, double tau) {
  if (!(tau > 0)) throw ConfigError("temperature must be positive");
  Tensor<float> z = logits;
  const float inv = float(1.0 / tau);
  for (auto& v : z.vec()) v *= inv;
  return layers::softmax(z);
}

// --- serialisation ----------------------------------------------------------------

namespace {

json summary_json(const ScoreSummary& s) {
  return json{{"min", s.min},       {"q25", s.q25}, {"median", s.median},         {"q75", s.q75},
              {"max", s.max},       {"n_infinite", s.n_infinite}, {"histogram", s.histogram}};
}

ScoreSummary summary_from(const json& j) {
  ScoreSummary s;
  s.min = j.value("min", 0.0);
  s.q25 = j.value("q25", 0.0);
  s.median = j.value("median", 0.0);
  s.q75 = j.value("q75", 0.0);
  s.max = j.value("max", 0.0);
  s.n_infinite = j.value("n_infinite", 0);
  s.histogram = j.value("histogram", std::vector<int>{});
  return s;
}

}  // namespace

void to_json(json& j, const CalibrationFactor& f) {
  json classes = json::array();
  for (const auto& c : f.classes)
    classes.push_back(json{{"q", c.unbounded ? json(nullptr) : json(c.q)},
                           {"mode", mode_name(f.mode)},
                           {"alpha", f.alpha},
                           {"n_cal", c.n_cal},
                           {"k", c.k},
                           {"unbounded", c.unbounded},
                           {"scores", summary_json(c.scores)}});
  j = json{{"method_id", f.method_id},
           {"mode", mode_name(f.mode)},
           {"alpha", f.alpha},
           {"pooled", f.pooled},
           {"classes", classes}};
}

void from_json(const json& j, CalibrationFactor& f) {
  f = CalibrationFactor{};
  f.method_id = j.at("method_id").get<std::string>();
  f.mode = mode_from_name(j.at("mode").get<std::string>());
  f.alpha = j.at("alpha").get<double>();
  f.pooled = j.value("pooled", false);
  for (const auto& c : j.at("classes")) {
    ClassFactor cf;
    cf.unbounded = c.at("unbounded").get<bool>();
    cf.q = c.at("q").is_null() ? std::numeric_limits<double>::infinity() : c.at("q").get<double>();
    cf.n_cal = c.at("n_cal").get<int>();
    cf.k = c.value("k", 0);
    if (c.contains("scores")) cf.scores = summary_from(c.at("scores"));
    f.classes.push_back(cf);
  }
}

void to_json(json& j, const Temperature& t) {
  j = json{{"tau", t.tau}, {"nll_before", t.nll_before}, {"nll_after", t.nll_after}, {"single_class", t.single_class}};
}

void from_json(const json& j, Temperature& t) {
  t.tau = j.at("tau").get<double>();
  t.nll_before = j.value("nll_before", 0.0);
  t.nll_after = j.value("nll_after", 0.0);
  t.single_class = j.value("single_class", false);
}

void write_factor(const std::filesystem::path& path, const CalibrationFactor& f) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << json(f).dump(2) << "\n";
}

CalibrationFactor read_factor(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact("missing calibration " + path.string());
  try {
    return json::parse(in).get<CalibrationFactor>();
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace triadpi::calibration
