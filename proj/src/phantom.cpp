#include "triadpi/phantom.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "triadpi/errors.hpp"
#include "triadpi/random.hpp"

namespace triadpi::phantom {

static_assert(std::endian::native == std::endian::little, "binary case format assumes a little-endian host");

namespace fs = std::filesystem;
using nlohmann::json;

PhantomSpec PhantomSpec::standard() {
  PhantomSpec s;
  // columns: FLAIR, T1, T2, T1ce
  s.intensity_table = {
      {0.30, 0.55, 0.35, 0.45},  // background
      {0.45, 0.30, 0.80, 0.35},  // necrotic core
      {0.75, 0.45, 0.65, 0.45},  // edema
      {0.60, 0.40, 0.55, 0.90},  // enhancing
  };
  return s;
}

void PhantomSpec::validate() const {
  if (grid.d < 8 || grid.h < 8 || grid.w < 8) throw ConfigError("phantom grid must be >= 8 on every axis, got " + grid.str());
  if (n_classes < 2) throw ConfigError("phantom needs at least 2 classes");
  if (n_channels < 1) throw ConfigError("phantom needs at least 1 channel");
  if (!(spacing_mm.z > 0 && spacing_mm.y > 0 && spacing_mm.x > 0)) throw ConfigError("voxel spacing must be positive");
  if (lesion_count_min < 1 || lesion_count_max < lesion_count_min) throw ConfigError("invalid lesion count range");
  if (!(lesion_radius_min_mm > 0 && lesion_radius_max_mm >= lesion_radius_min_mm))
    throw ConfigError("invalid lesion radius range");
  if (noise_sigma < 0 || blur_sigma_vox < 0 || gain_jitter < 0 || gain_jitter >= 1)
    throw ConfigError("noise, blur and gain jitter must be nonnegative (jitter < 1)");
  if (max_attempts < 1) throw ConfigError("max_attempts must be >= 1");
  const double fit[3] = {grid.d / 2.0 - 1.0, grid.h / 2.0 - 1.0, grid.w / 2.0 - 1.0};
  const double sp[3] = {spacing_mm.z, spacing_mm.y, spacing_mm.x};
  for (int a = 0; a < 3; ++a)
    if (lesion_radius_max_mm / sp[a] > fit[a])
      throw ConfigError("lesion radius range does not fit the grid: max radius " +
                        std::to_string(lesion_radius_max_mm) + " mm exceeds " + std::to_string(fit[a] * sp[a]) +
                        " mm on axis " + std::to_string(a));
  if (int(intensity_table.size()) != n_classes)
    throw ConfigError("intensity_table needs one row per class");
  for (const auto& row : intensity_table)
    if (int(row.size()) != n_channels) throw ConfigError("intensity_table rows need one entry per channel");
}

std::vector<std::string> PhantomSpec::class_names() const {
  if (n_classes == 4) return {"background", "necrotic", "edematous", "gde"};
  std::vector<std::string> names{"background"};
  for (int c = 1; c < n_classes; ++c) names.push_back("class" + std::to_string(c));
  return names;
}

namespace {

// Outer-to-inner class order of the nested shells.
std::vector<int> nesting_order(int n_classes) {
  if (n_classes == 2) return {1};
  std::vector<int> order{2, 1};
  for (int c = 3; c < n_classes; ++c) order.push_back(c);
  return order;
}

struct Ellipsoid {
  double center[3];
  double axes[3];  // voxels

  bool contains(double z, double y, double x) const {
    const double a = (z - center[0]) / axes[0], b = (y - center[1]) / axes[1], c = (x - center[2]) / axes[2];
    return a * a + b * b + c * c <= 1.0;
  }
};

std::vector<std::uint8_t> draw_labels(const PhantomSpec& spec, Rng& rng) {
  const Grid3& g = spec.grid;
  const auto order = nesting_order(spec.n_classes);
  const int levels = int(order.size());
  const double sp[3] = {spec.spacing_mm.z, spec.spacing_mm.y, spec.spacing_mm.x};
  const int dims[3] = {g.d, g.h, g.w};

  std::vector<int> depth(g.voxels(), 0);
  const int n_lesions = rng.uniform_int(spec.lesion_count_min, spec.lesion_count_max);
  for (int l = 0; l < n_lesions; ++l) {
    std::vector<Ellipsoid> shells(levels);
    Ellipsoid& outer = shells[0];
    for (int a = 0; a < 3; ++a) {
      outer.axes[a] = rng.uniform(spec.lesion_radius_min_mm, spec.lesion_radius_max_mm) / sp[a];
      const double lo = outer.axes[a], hi = dims[a] - 1 - outer.axes[a];
      outer.center[a] = rng.uniform(lo, hi);
    }
    for (int s = 1; s < levels; ++s) {
      const Ellipsoid& parent = shells[s - 1];
      Ellipsoid& e = shells[s];
      for (int a = 0; a < 3; ++a) {
        e.axes[a] = parent.axes[a] * rng.uniform(0.55, 0.8);
        e.center[a] = parent.center[a] + rng.uniform(-0.3, 0.3) * (parent.axes[a] - e.axes[a]);
      }
    }
    for (int z = 0; z < g.d; ++z)
      for (int y = 0; y < g.h; ++y)
        for (int x = 0; x < g.w; ++x) {
          int deepest = 0;
          for (int s = 0; s < levels; ++s) {
            if (!shells[s].contains(z, y, x)) break;
            deepest = s + 1;
          }
          int& d = depth[(std::size_t(z) * g.h + y) * g.w + x];
          d = std::max(d, deepest);
        }
  }
  std::vector<std::uint8_t> labels(g.voxels(), 0);
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (depth[i] > 0) labels[i] = std::uint8_t(order[depth[i] - 1]);
  return labels;
}

void blur_axis(std::vector<float>& v, const Grid3& g, int axis, const std::vector<double>& kernel) {
  const int r = int(kernel.size() / 2);
  const int n = axis == 0 ? g.d : axis == 1 ? g.h : g.w;
  const std::size_t stride = axis == 0 ? std::size_t(g.h) * g.w : axis == 1 ? std::size_t(g.w) : 1;
  std::vector<float> out(v.size());
  std::vector<double> line(n);
  for (std::size_t base = 0; base < v.size(); ++base) {
    const std::size_t pos = (base / stride) % std::size_t(n);
    if (pos != 0) continue;
    for (int i = 0; i < n; ++i) line[i] = v[base + i * stride];
    for (int i = 0; i < n; ++i) {
      double s = 0;
      for (int k = -r; k <= r; ++k) s += kernel[k + r] * line[std::clamp(i + k, 0, n - 1)];
      out[base + i * stride] = float(s);
    }
  }
  v.swap(out);
}

}  // namespace

std::vector<double> true_volumes(const std::vector<std::uint8_t>& labels, int n_classes, const Spacing& spacing_mm) {
  std::vector<std::size_t> counts(n_classes, 0);
  for (auto l : labels) {
    if (l < n_classes) ++counts[l];
  }
  std::vector<double> vols;
  for (int c = 1; c < n_classes; ++c) vols.push_back(double(counts[c]) * spacing_mm.voxel_mm3() / 1000.0);
  return vols;
}

PhantomCase generate_phantom(const PhantomSpec& spec, std::uint64_t seed, const std::string& case_id) {
  spec.validate();
  const Grid3& g = spec.grid;
  std::vector<std::uint8_t> labels;
  std::vector<double> vols;
  Rng rng(seed);
  bool ok = false;
  for (int attempt = 0; attempt < spec.max_attempts && !ok; ++attempt) {
    rng = Rng(derive_seed(seed, {1, std::uint64_t(attempt)}));
    labels = draw_labels(spec, rng);
    vols = true_volumes(labels, spec.n_classes, spec.spacing_mm);
    ok = std::all_of(vols.begin(), vols.end(), [](double v) { return v > 0.0; });
  }
  if (!ok)
    throw ConfigError("phantom generator could not populate every foreground class in " +
                      std::to_string(spec.max_attempts) + " attempts");

  PhantomCase out;
  out.case_id = case_id.empty() ? "case_" + std::to_string(seed) : case_id;
  out.seed = seed;
  out.grid = g;
  out.labels = std::move(labels);
  out.spacing_mm = spec.spacing_mm;
  out.class_names = spec.class_names();
  out.true_volumes_mL = std::move(vols);
  out.intensities = Tensor<float>(spec.n_channels, g);

  std::vector<double> kernel;
  if (spec.blur_sigma_vox > 0) {
    const int r = int(std::ceil(3.0 * spec.blur_sigma_vox));
    double s = 0;
    for (int k = -r; k <= r; ++k) {
      kernel.push_back(std::exp(-0.5 * k * k / (spec.blur_sigma_vox * spec.blur_sigma_vox)));
      s += kernel.back();
    }
    for (auto& k : kernel) k /= s;
  }
  Rng noise(derive_seed(seed, {2}));
  for (int ch = 0; ch < spec.n_channels; ++ch) {
    const double gain = noise.uniform(1.0 - spec.gain_jitter, 1.0 + spec.gain_jitter);
    std::vector<float> v(g.voxels());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = float(gain * spec.intensity_table[out.labels[i]][ch]);
    if (!kernel.empty())
      for (int axis = 0; axis < 3; ++axis) blur_axis(v, g, axis, kernel);
    auto dst = out.intensities.channel(ch);
    for (std::size_t i = 0; i < v.size(); ++i) dst[i] = float(v[i] + spec.noise_sigma * noise.normal());
  }
  return out;
}

// --- on-disk format ---------------------------------------------------------

namespace {

void write_bytes(const fs::path& p, const void* data, std::size_t n) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open " + p.string() + " for writing");
  f.write(static_cast<const char*>(data), std::streamsize(n));
  if (!f) throw FormatError("write failed: " + p.string());
}

std::vector<char> read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw MissingArtifact("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

template <typename V>
V require(const json& j, const char* key, const fs::path& where) {
  if (!j.contains(key)) throw FormatError(where.string() + ": missing field '" + key + "'");
  try {
    return j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw FormatError(where.string() + ": bad field '" + key + "': " + e.what());
  }
}

}  // namespace

void write_case(const PhantomCase& c, const fs::path& dir) {
  fs::create_directories(dir);
  json meta;
  meta["case_id"] = c.case_id;
  meta["seed"] = c.seed;
  meta["shape"] = {c.intensities.channels(), c.grid.d, c.grid.h, c.grid.w};
  meta["dtype"] = "f32";
  meta["spacing_mm"] = {c.spacing_mm.z, c.spacing_mm.y, c.spacing_mm.x};
  meta["class_names"] = c.class_names;
  meta["true_volumes_mL"] = c.true_volumes_mL;
  std::ofstream(dir / "meta.json") << meta.dump(2) << "\n";
  write_bytes(dir / "intensities.bin", c.intensities.data(), c.intensities.size() * sizeof(float));
  write_bytes(dir / "labels.bin", c.labels.data(), c.labels.size());
}

PhantomCase read_case(const fs::path& dir) {
  const fs::path meta_path = dir / "meta.json";
  std::ifstream mf(meta_path);
  if (!mf) throw MissingArtifact("missing " + meta_path.string());
  json meta;
  try {
    meta = json::parse(mf);
  } catch (const json::exception& e) {
    throw FormatError(meta_path.string() + ": " + e.what());
  }
  PhantomCase c;
  c.case_id = require<std::string>(meta, "case_id", meta_path);
  c.seed = require<std::uint64_t>(meta, "seed", meta_path);
  const auto shape = require<std::vector<int>>(meta, "shape", meta_path);
  if (shape.size() != 4 || std::any_of(shape.begin(), shape.end(), [](int s) { return s <= 0; }))
    throw FormatError(meta_path.string() + ": field 'shape' must be 4 positive integers");
  if (require<std::string>(meta, "dtype", meta_path) != "f32")
    throw FormatError(meta_path.string() + ": field 'dtype' must be \"f32\"");
  const auto sp = require<std::vector<double>>(meta, "spacing_mm", meta_path);
  if (sp.size() != 3) throw FormatError(meta_path.string() + ": field 'spacing_mm' must have 3 entries");
  c.spacing_mm = {sp[0], sp[1], sp[2]};
  c.class_names = require<std::vector<std::string>>(meta, "class_names", meta_path);
  c.true_volumes_mL = require<std::vector<double>>(meta, "true_volumes_mL", meta_path);
  if (c.true_volumes_mL.size() + 1 != c.class_names.size())
    throw FormatError(meta_path.string() + ": field 'true_volumes_mL' must have one entry per foreground class");
  c.grid = {shape[1], shape[2], shape[3]};

  const auto ib = read_bytes(dir / "intensities.bin");
  const std::size_t expect_i = std::size_t(shape[0]) * c.grid.voxels() * sizeof(float);
  if (ib.size() != expect_i)
    throw FormatError("shape mismatch: intensities.bin has " + std::to_string(ib.size()) + " bytes, field 'shape' implies " +
                      std::to_string(expect_i));
  c.intensities = Tensor<float>(shape[0], c.grid);
  std::memcpy(c.intensities.data(), ib.data(), ib.size());

  const auto lb = read_bytes(dir / "labels.bin");
  if (lb.size() != c.grid.voxels())
    throw FormatError("shape mismatch: labels.bin has " + std::to_string(lb.size()) + " bytes, field 'shape' implies " +
                      std::to_string(c.grid.voxels()));
  c.labels.assign(lb.begin(), lb.end());
  for (auto l : c.labels)
    if (l >= c.class_names.size()) throw FormatError("labels.bin: label " + std::to_string(l) + " out of range");
  return c;
}

DatasetSplit split_dataset(const std::vector<std::string>& ids, const std::array<double, 3>& fractions,
                           std::uint64_t seed) {
  const double total = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
  for (double f : fractions)
    if (f < 0) throw ConfigError("split fractions must be nonnegative");
  const std::size_t n = ids.size();
  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> rem{};
  std::size_t assigned = 0;
  for (int k = 0; k < 3; ++k) {
    const double exact = fractions[k] * double(n);
    sizes[k] = std::size_t(std::floor(exact + 1e-9));
    rem[k] = exact - double(sizes[k]);
    assigned += sizes[k];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rem[a] > rem[b]; });
  for (int i = 0; assigned < n; ++i, ++assigned) ++sizes[order[i % 3]];
  static const char* names[3] = {"train", "calibration", "test"};
  for (int k = 0; k < 3; ++k)
    if (sizes[k] == 0) throw ConfigError(std::string("split leaves the ") + names[k] + " fold empty");

  std::vector<std::string> shuffled = ids;
  Rng rng(derive_seed(seed, {0x5eed}));
  shuffle(shuffled, rng);
  DatasetSplit s;
  auto it = shuffled.begin();
  s.train_ids.assign(it, it + std::ptrdiff_t(sizes[0]));
  it += std::ptrdiff_t(sizes[0]);
  s.calibration_ids.assign(it, it + std::ptrdiff_t(sizes[1]));
  it += std::ptrdiff_t(sizes[1]);
  s.test_ids.assign(it, shuffled.end());
  return s;
}

template <typename T>
Tensor<T> one_hot(const std::vector<std::uint8_t>& labels, const Grid3& grid, int n_classes) {
  if (labels.size() != grid.voxels()) throw ShapeError("label grid does not match " + grid.str());
  Tensor<T> out(n_classes, grid);
  const std::size_t nv = grid.voxels();
  for (std::size_t i = 0; i < nv; ++i) out.data()[std::size_t(labels[i]) * nv + i] = T(1);
  return out;
}

template Tensor<float> one_hot<float>(const std::vector<std::uint8_t>&, const Grid3&, int);
template Tensor<double> one_hot<double>(const std::vector<std::uint8_t>&, const Grid3&, int);

// --- json -------------------------------------------------------------------

void to_json(json& j, const PhantomSpec& s) {
  j = json{{"grid", {s.grid.d, s.grid.h, s.grid.w}},
           {"n_channels", s.n_channels},
           {"n_classes", s.n_classes},
           {"spacing_mm", {s.spacing_mm.z, s.spacing_mm.y, s.spacing_mm.x}},
           {"lesion_count_range", {s.lesion_count_min, s.lesion_count_max}},
           {"lesion_radius_range_mm", {s.lesion_radius_min_mm, s.lesion_radius_max_mm}},
           {"noise_sigma", s.noise_sigma},
           {"blur_sigma_vox", s.blur_sigma_vox},
           {"gain_jitter", s.gain_jitter},
           {"max_attempts", s.max_attempts},
           {"intensity_table", s.intensity_table}};
}

void from_json(const json& j, PhantomSpec& s) {
  s = PhantomSpec::standard();
  if (j.contains("grid")) {
    const auto g = j.at("grid").get<std::vector<int>>();
    if (g.size() != 3) throw ConfigError("phantom.grid needs 3 entries");
    s.grid = {g[0], g[1], g[2]};
  }
  s.n_channels = j.value("n_channels", s.n_channels);
  s.n_classes = j.value("n_classes", s.n_classes);
  if (j.contains("spacing_mm")) {
    const auto v = j.at("spacing_mm").get<std::vector<double>>();
    if (v.size() != 3) throw ConfigError("phantom.spacing_mm needs 3 entries");
    s.spacing_mm = {v[0], v[1], v[2]};
  }
  if (j.contains("lesion_count_range")) {
    const auto v = j.at("lesion_count_range").get<std::vector<int>>();
    if (v.size() != 2) throw ConfigError("phantom.lesion_count_range needs 2 entries");
    s.lesion_count_min = v[0];
    s.lesion_count_max = v[1];
  }
  if (j.contains("lesion_radius_range_mm")) {
    const auto v = j.at("lesion_radius_range_mm").get<std::vector<double>>();
    if (v.size() != 2) throw ConfigError("phantom.lesion_radius_range_mm needs 2 entries");
    s.lesion_radius_min_mm = v[0];
    s.lesion_radius_max_mm = v[1];
  }
  s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
  s.blur_sigma_vox = j.value("blur_sigma_vox", s.blur_sigma_vox);
  s.gain_jitter = j.value("gain_jitter", s.gain_jitter);
  s.max_attempts = j.value("max_attempts", s.max_attempts);
  if (j.contains("intensity_table")) s.intensity_table = j.at("intensity_table").get<std::vector<std::vector<double>>>();
}

void to_json(json& j, const DatasetSplit& s) {
  j = json{{"train", s.train_ids}, {"calibration", s.calibration_ids}, {"test", s.test_ids}};
}

void from_json(const json& j, DatasetSplit& s) {
  s.train_ids = j.at("train").get<std::vector<std::string>>();
  s.calibration_ids = j.at("calibration").get<std::vector<std::string>>();
  s.test_ids = j.at("test").get<std::vector<std::string>>();
}

void write_manifest(const Manifest& m, const fs::path& root) {
  fs::create_directories(root);
  json j{{"spec", m.spec}, {"seed", m.seed}, {"ids", m.ids}, {"split", m.split}, {"fractions", m.fractions}};
  std::ofstream(root / "manifest.json") << j.dump(2) << "\n";
}

Manifest read_manifest(const fs::path& root) {
  const fs::path p = root / "manifest.json";
  std::ifstream f(p);
  if (!f) throw MissingArtifact("missing dataset manifest " + p.string());
  try {
    const json j = json::parse(f);
    Manifest m;
    m.spec = j.at("spec").get<PhantomSpec>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.ids = j.at("ids").get<std::vector<std::string>>();
    m.split = j.at("split").get<DatasetSplit>();
    m.fractions = j.at("fractions").get<std::array<double, 3>>();
    return m;
  } catch (const json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

}  // namespace triadpi::phantom
