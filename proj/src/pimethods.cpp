#include "triadpi/pimethods.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <boost/math/distributions/normal.hpp>

#include "triadpi/errors.hpp"
#include "triadpi/layers.hpp"

namespace triadpi::pimethods {

using nlohmann::json;

bool VolumeInterval::any_order_violation() const {
  return std::any_of(classes.begin(), classes.end(), [](const ClassInterval& c) { return c.order_violation; });
}

template <typename T>
std::vector<std::uint8_t> argmax_labels(const Tensor<T>& probs) {
  const std::size_t nv = probs.voxels();
  const int nc = probs.channels();
  std::vector<std::uint8_t> out(nv, 0);
  const T* p = probs.data();
  for (std::size_t i = 0; i < nv; ++i) {
    T best = p[i];
    int arg = 0;
    for (int c = 1; c < nc; ++c) {
      const T v = p[std::size_t(c) * nv + i];
      if (v > best) {
        best = v;
        arg = c;
      }
    }
    out[i] = std::uint8_t(arg);
  }
  return out;
}

template <typename T>
std::vector<double> mask_volumes(const Tensor<T>& probs, const Spacing& spacing_mm) {
  return phantom::true_volumes(argmax_labels(probs), probs.channels(), spacing_mm);
}

template std::vector<std::uint8_t> argmax_labels<float>(const Tensor<float>&);
template std::vector<std::uint8_t> argmax_labels<double>(const Tensor<double>&);
template std::vector<double> mask_volumes<float>(const Tensor<float>&, const Spacing&);
template std::vector<double> mask_volumes<double>(const Tensor<double>&, const Spacing&);

namespace {

ClassInterval sorted_interval(double a, double b, double c) {
  ClassInterval ci;
  ci.order_violation = !(a <= b && b <= c);
  double v[3] = {a, b, c};
  std::sort(v, v + 3);
  ci.lower = v[0];
  ci.mean = v[1];
  ci.upper = v[2];
  return ci;
}

}  // namespace

VolumeInterval triad_intervals(const nets::SoftMaskSet& masks, const Spacing& spacing_mm) {
  if (masks.n_heads() != 3) throw ConfigError("triad intervals need three heads, got " + std::to_string(masks.n_heads()));
  const auto lo = mask_volumes(masks.head("lower"), spacing_mm);
  const auto mid = mask_volumes(masks.head("mean"), spacing_mm);
  const auto hi = mask_volumes(masks.head("upper"), spacing_mm);
  VolumeInterval out;
  out.method_id = "triad";
  out.forward_passes = 1;
  for (std::size_t c = 0; c < mid.size(); ++c) out.classes.push_back(sorted_interval(lo[c], mid[c], hi[c]));
  return out;
}

VolumeInterval regcnn_from_outputs(const std::vector<double>& outputs) {
  if (outputs.size() % 3 != 0) throw ShapeError("regressor output length must be a multiple of 3");
  VolumeInterval out;
  out.method_id = "regcnn";
  out.forward_passes = 1;
  for (std::size_t c = 0; c < outputs.size() / 3; ++c) {
    ClassInterval ci = sorted_interval(outputs[3 * c], outputs[3 * c + 1], outputs[3 * c + 2]);
    ci.lower = std::max(ci.lower, 0.0);
    ci.mean = std::max(ci.mean, 0.0);
    ci.upper = std::max(ci.upper, 0.0);
    out.classes.push_back(ci);
  }
  return out;
}

VolumeInterval regcnn_intervals(const nets::RegNet<float>& regressor, const Tensor<float>& intensities,
                                const Tensor<float>& segmentation_one_hot) {
  return regcnn_from_outputs(nets::regress(regressor, intensities, segmentation_one_hot));
}

std::vector<double> uniform_thresholds(int n, double lo, double hi) {
  if (n < 2) throw ConfigError("need at least two thresholds");
  if (!(0 < lo && lo < hi && hi < 1)) throw ConfigError("thresholds must lie in (0, 1) and increase");
  std::vector<double> t(n);
  for (int i = 0; i < n; ++i) t[i] = lo + (hi - lo) * double(i) / double(n - 1);
  return t;
}

std::vector<std::vector<double>> threshold_volumes(const Tensor<float>& probs, const std::vector<double>& thresholds,
                                                   const Spacing& spacing_mm) {
  if (thresholds.size() < 2) throw ConfigError("need at least two thresholds");
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    if (!(thresholds[i] > 0 && thresholds[i] < 1)) throw ConfigError("thresholds must lie in (0, 1)");
    if (i > 0 && !(thresholds[i] > thresholds[i - 1])) throw ConfigError("thresholds must be strictly increasing");
  }
  const double vox_mL = spacing_mm.voxel_mm3() / 1000.0;
  const int nfg = probs.channels() - 1;
  // Sorting each class's probabilities turns every threshold into one binary search.
  std::vector<std::vector<double>> out(thresholds.size(), std::vector<double>(nfg, 0.0));
  for (int c = 1; c < probs.channels(); ++c) {
    const auto ch = probs.channel(c);
    std::vector<float> sorted(ch.begin(), ch.end());
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
      const auto it = std::lower_bound(sorted.begin(), sorted.end(), thresholds[t],
                                       [](float v, double tau) { return double(v) < tau; });
      out[t][c - 1] = double(sorted.end() - it) * vox_mL;
    }
  }
  return out;
}

SamplingStats stats_from_samples(std::vector<std::vector<double>> samples_mL, const std::string& method_id) {
  if (samples_mL.size() < 2) throw ConfigError("sampling statistics need at least two samples");
  const std::size_t n = samples_mL.size();
  const std::size_t nc = samples_mL.front().size();
  SamplingStats s;
  s.method_id = method_id;
  s.n_samples = int(n);
  s.mu_mL.assign(nc, 0.0);
  s.sigma_mL.assign(nc, 0.0);
  // Shifted by the first sample so identical samples give exactly zero spread.
  const std::vector<double>& ref = samples_mL.front();
  std::vector<double> shift(nc, 0.0);
  for (const auto& row : samples_mL) {
    if (row.size() != nc) throw ShapeError("samples differ in class count");
    for (std::size_t c = 0; c < nc; ++c) shift[c] += row[c] - ref[c];
  }
  for (std::size_t c = 0; c < nc; ++c) {
    shift[c] /= double(n);
    s.mu_mL[c] = ref[c] + shift[c];
  }
  for (const auto& row : samples_mL)
    for (std::size_t c = 0; c < nc; ++c) {
      const double d = row[c] - ref[c] - shift[c];
      s.sigma_mL[c] += d * d;
    }
  for (auto& v : s.sigma_mL) v = std::sqrt(v / double(n - 1));
  s.samples_mL = std::move(samples_mL);
  return s;
}

SamplingStats ct_stats(const Tensor<float>& probs, const std::vector<double>& thresholds, const Spacing& spacing_mm) {
  SamplingStats s = stats_from_samples(threshold_volumes(probs, thresholds, spacing_mm), "ct");
  s.forward_passes = 1;
  return s;
}

SamplingStats mc_stats(const nets::SegNet<float>& net, const Tensor<float>& intensities, int passes,
                       std::uint64_t seed, const Spacing& spacing_mm, Tensor<float>* mean_probs) {
  if (passes < 2) throw ConfigError("MC dropout needs at least two passes");
  const auto outs = net.forward_mc(intensities, passes, seed);
  std::vector<std::vector<double>> samples;
  samples.reserve(outs.size());
  for (const auto& o : outs) samples.push_back(mask_volumes(o.probs[0], spacing_mm));
  if (mean_probs) {
    *mean_probs = Tensor<float>(outs[0].probs[0].channels(), outs[0].probs[0].grid());
    for (const auto& o : outs)
      for (std::size_t i = 0; i < mean_probs->size(); ++i) mean_probs->data()[i] += o.probs[0].data()[i];
    for (auto& v : mean_probs->vec()) v /= float(passes);
  }
  SamplingStats s = stats_from_samples(std::move(samples), "mc");
  s.forward_passes = passes;
  return s;
}

// --- test-time augmentation ---------------------------------------------------

bool Augmentation::is_identity() const {
  return !flip[0] && !flip[1] && !flip[2] && rot90 == 0 && shift[0] == 0 && shift[1] == 0 && shift[2] == 0 &&
         scale == 1.0 && offset == 0.0;
}

Augmentation sample_augmentation(Rng& rng, const Grid3& grid, const TtaOptions& opts) {
  Augmentation a;
  if (opts.flips)
    for (auto& f : a.flip) f = rng.bernoulli(0.5);
  if (opts.rotations) a.rot90 = grid.h == grid.w ? rng.uniform_int(0, 3) : 2 * rng.uniform_int(0, 1);
  if (opts.translations) {
    const int ext[3] = {grid.d, grid.h, grid.w};
    for (int k = 0; k < 3; ++k) {
      const int m = int(std::floor(opts.max_shift_fraction * ext[k]));
      a.shift[k] = m > 0 ? rng.uniform_int(-m, m) : 0;
    }
  }
  if (opts.intensity) {
    a.scale = rng.uniform(1.0 - opts.scale_jitter, 1.0 + opts.scale_jitter);
    a.offset = rng.uniform(-opts.offset_jitter, opts.offset_jitter);
  }
  return a;
}

namespace {

// Where original voxel (z, y, x) lands in augmented space; false if outside.
bool forward_map(const Augmentation& a, const Grid3& g, int z, int y, int x, int& oz, int& oy, int& ox) {
  if (a.flip[0]) z = g.d - 1 - z;
  if (a.flip[1]) y = g.h - 1 - y;
  if (a.flip[2]) x = g.w - 1 - x;
  for (int k = 0; k < a.rot90; ++k) {
    const int ny = x, nx = g.h - 1 - y;  // one quarter turn; square planes only for odd counts
    y = ny;
    x = nx;
  }
  oz = z + a.shift[0];
  oy = y + a.shift[1];
  ox = x + a.shift[2];
  return oz >= 0 && oz < g.d && oy >= 0 && oy < g.h && ox >= 0 && ox < g.w;
}

void check_rotation(const Augmentation& a, const Grid3& g) {
  if ((a.rot90 & 1) && g.h != g.w) throw ShapeError("odd quarter turns need a square (y, x) plane");
  if (a.rot90 < 0 || a.rot90 > 3) throw ConfigError("rot90 must be in 0..3");
}

}  // namespace

Tensor<float> augment_image(const Tensor<float>& image, const Augmentation& aug) {
  const Grid3& g = image.grid();
  check_rotation(aug, g);
  Tensor<float> out(image.channels(), g);
  std::vector<float> range(image.channels(), 0.0f);
  for (int c = 0; c < image.channels(); ++c) {
    const auto ch = image.channel(c);
    const auto [lo, hi] = std::minmax_element(ch.begin(), ch.end());
    range[c] = *hi - *lo;
  }
  for (int z = 0; z < g.d; ++z)
    for (int y = 0; y < g.h; ++y)
      for (int x = 0; x < g.w; ++x) {
        int oz, oy, ox;
        if (!forward_map(aug, g, z, y, x, oz, oy, ox)) continue;
        for (int c = 0; c < image.channels(); ++c)
          out.at(c, oz, oy, ox) = float(aug.scale * image.at(c, z, y, x) + aug.offset * range[c]);
      }
  return out;
}

Tensor<float> invert_probs(const Tensor<float>& probs, const Augmentation& aug) {
  const Grid3& g = probs.grid();
  check_rotation(aug, g);
  Tensor<float> out(probs.channels(), g);
  for (int z = 0; z < g.d; ++z)
    for (int y = 0; y < g.h; ++y)
      for (int x = 0; x < g.w; ++x) {
        int oz, oy, ox;
        if (!forward_map(aug, g, z, y, x, oz, oy, ox)) {
          out.at(0, z, y, x) = 1.0f;
          continue;
        }
        for (int c = 0; c < probs.channels(); ++c) out.at(c, z, y, x) = probs.at(c, oz, oy, ox);
      }
  return out;
}

SamplingStats tta_stats(const Predictor& predict, const Tensor<float>& intensities, int n_aug, std::uint64_t seed,
                        const Spacing& spacing_mm, const TtaOptions& opts) {
  if (n_aug < 2) throw ConfigError("TTA needs at least two augmentations");
  Rng rng(derive_seed(seed, {0x77a}));
  std::vector<std::vector<double>> samples;
  samples.reserve(n_aug);
  for (int k = 0; k < n_aug; ++k) {
    const Augmentation aug = sample_augmentation(rng, intensities.grid(), opts);
    const Tensor<float> probs = predict(augment_image(intensities, aug));
    samples.push_back(mask_volumes(invert_probs(probs, aug), spacing_mm));
  }
  SamplingStats s = stats_from_samples(std::move(samples), "tta");
  s.forward_passes = n_aug;
  return s;
}

SamplingStats tta_stats(const nets::SegNet<float>& net, const Tensor<float>& intensities, int n_aug,
                        std::uint64_t seed, const Spacing& spacing_mm, const TtaOptions& opts) {
  return tta_stats([&](const Tensor<float>& x) { return net.forward(x).probs[0]; }, intensities, n_aug, seed,
                   spacing_mm, opts);
}

double interval_z(double alpha) {
  if (!(alpha > 0 && alpha < 1)) throw ConfigError("alpha must lie in (0, 1)");
  if (std::abs(alpha - 0.1) < 1e-12) return 1.65;
  return boost::math::quantile(boost::math::normal_distribution<double>(), 1.0 - alpha / 2.0);
}

VolumeInterval interval_from_stats(const SamplingStats& stats, double alpha) {
  const double z = interval_z(alpha);
  VolumeInterval out;
  out.method_id = stats.method_id;
  out.forward_passes = stats.forward_passes;
  for (std::size_t c = 0; c < stats.mu_mL.size(); ++c) {
    ClassInterval ci;
    ci.mean = stats.mu_mL[c];
    ci.lower = std::max(stats.mu_mL[c] - z * stats.sigma_mL[c], 0.0);
    ci.upper = std::max(stats.mu_mL[c] + z * stats.sigma_mL[c], 0.0);
    out.classes.push_back(ci);
  }
  return out;
}

// --- serialisation ----------------------------------------------------------------

namespace {

// JSON has no infinities or NaN; both travel as null.
json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
double num_or(const json& j, double fallback) { return j.is_null() ? fallback : j.get<double>(); }

}  // namespace

void to_json(json& j, const ClassInterval& c) {
  j = json{{"lower_mL", num(c.lower)},
           {"mean_mL", num(c.mean)},
           {"upper_mL", num(c.upper)},
           {"order_violation", c.order_violation},
           {"unbounded", c.unbounded}};
}

void from_json(const json& j, ClassInterval& c) {
  c.lower = num_or(j.at("lower_mL"), 0.0);
  c.mean = num_or(j.at("mean_mL"), 0.0);
  c.upper = num_or(j.at("upper_mL"), kUnbounded);
  c.order_violation = j.value("order_violation", false);
  c.unbounded = j.value("unbounded", false);
}

void to_json(json& j, const VolumeInterval& v) {
  j = json{{"method_id", v.method_id},
           {"calibrated", v.calibrated},
           {"forward_passes", v.forward_passes},
           {"classes", v.classes}};
}

void from_json(const json& j, VolumeInterval& v) {
  v.method_id = j.at("method_id").get<std::string>();
  v.calibrated = j.at("calibrated").get<bool>();
  v.forward_passes = j.value("forward_passes", 0);
  v.classes = j.at("classes").get<std::vector<ClassInterval>>();
}

void to_json(json& j, const SamplingStats& s) {
  j = json{{"method_id", s.method_id}, {"n_samples", s.n_samples}, {"forward_passes", s.forward_passes},
           {"mu_mL", s.mu_mL},         {"sigma_mL", s.sigma_mL},   {"samples_mL", s.samples_mL}};
}

void from_json(const json& j, SamplingStats& s) {
  s.method_id = j.at("method_id").get<std::string>();
  s.n_samples = j.at("n_samples").get<int>();
  s.forward_passes = j.value("forward_passes", 0);
  s.mu_mL = j.at("mu_mL").get<std::vector<double>>();
  s.sigma_mL = j.at("sigma_mL").get<std::vector<double>>();
  s.samples_mL = j.value("samples_mL", std::vector<std::vector<double>>{});
}

void to_json(json& j, const PIRecord& r) {
  json dsc = json::array();
  for (double d : r.dsc) dsc.push_back(num(d));
  j = json{{"case_id", r.case_id},
           {"method_id", r.method_id},
           {"raw", r.raw},
           {"interval", r.interval},
           {"truth_mL", r.truth_mL},
           {"dsc", dsc},
           {"wall_time_s", r.wall_time_s},
           {"forward_passes", r.forward_passes},
           {"segmentation_passes", r.segmentation_passes}};
  if (r.stats) j["stats"] = *r.stats;
  if (!r.head_volumes_mL.empty()) j["head_volumes_mL"] = r.head_volumes_mL;
}

void from_json(const json& j, PIRecord& r) {
  r = PIRecord{};
  r.case_id = j.at("case_id").get<std::string>();
  r.method_id = j.at("method_id").get<std::string>();
  r.raw = j.at("raw").get<VolumeInterval>();
  r.interval = j.at("interval").get<VolumeInterval>();
  r.truth_mL = j.at("truth_mL").get<std::vector<double>>();
  for (const auto& d : j.value("dsc", json::array())) r.dsc.push_back(num_or(d, std::nan("")));
  r.wall_time_s = j.value("wall_time_s", 0.0);
  r.forward_passes = j.at("forward_passes").get<int>();
  r.segmentation_passes = j.value("segmentation_passes", 0);
  if (j.contains("stats")) r.stats = j.at("stats").get<SamplingStats>();
  if (j.contains("head_volumes_mL")) r.head_volumes_mL = j.at("head_volumes_mL").get<std::vector<std::vector<double>>>();
}

void write_records(const std::filesystem::path& path, const std::vector<PIRecord>& records) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw FormatError("cannot write " + path.string());
  for (const auto& r : records) f << json(r).dump() << "\n";
}

std::vector<PIRecord> read_records(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw MissingArtifact("missing record file " + path.string());
  std::vector<PIRecord> out;
  std::string line;
  int n = 0;
  while (std::getline(f, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(json::parse(line).get<PIRecord>());
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace triadpi::pimethods
