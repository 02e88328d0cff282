#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "triadpi/tensor.hpp"

namespace triadpi::phantom {

struct Spacing {
  double z = 1.0;
  double y = 1.0;
  double x = 1.0;

  double voxel_mm3() const { return z * y * x; }
  bool operator==(const Spacing&) const = default;
};

/// Parameters of the synthetic lesion phantom family.
///
/// Lesions are nested ellipsoids: for four classes the outer shell is class 2,
/// the middle shell class 1 and the core class 3. Channel intensities come
/// from `intensity_table[class][channel]`, blurred to mimic partial volume and
/// corrupted with Gaussian noise.
struct PhantomSpec {
  Grid3 grid{32, 32, 32};
  int n_channels = 4;
  int n_classes = 4;
  Spacing spacing_mm{1.5, 1.5, 1.5};
  int lesion_count_min = 1;
  int lesion_count_max = 2;
  double lesion_radius_min_mm = 6.0;
  double lesion_radius_max_mm = 12.0;
  double noise_sigma = 0.15;
  double blur_sigma_vox = 0.8;
  /// Per-case, per-channel multiplicative gain drawn from [1 - j, 1 + j].
  double gain_jitter = 0.05;
  int max_attempts = 100;
  std::vector<std::vector<double>> intensity_table;  // [class][channel]

  /// Default spec with the four-class, four-channel intensity table.
  static PhantomSpec standard();

  /// Throws ConfigError when the spec is unusable.
  void validate() const;

  std::vector<std::string> class_names() const;
};

struct PhantomCase {
  std::string case_id;
  std::uint64_t seed = 0;
  Tensor<float> intensities;  // [C, D, H, W]
  std::vector<std::uint8_t> labels;  // [D, H, W]
  Grid3 grid{};
  Spacing spacing_mm{};
  std::vector<std::string> class_names;
  std::vector<double> true_volumes_mL;  // foreground classes 1..N-1

  int n_classes() const { return int(class_names.size()); }
  bool operator==(const PhantomCase&) const = default;
};

struct DatasetSplit {
  std::vector<std::string> train_ids;
  std::vector<std::string> calibration_ids;
  std::vector<std::string> test_ids;

  bool operator==(const DatasetSplit&) const = default;
};

/// Deterministic in (spec, seed). Retries geometry until every foreground
/// class is non-empty; throws ConfigError after spec.max_attempts.
PhantomCase generate_phantom(const PhantomSpec& spec, std::uint64_t seed,
                             const std::string& case_id = "");

/// Per foreground class: count(labels == c) * voxel volume / 1000.
std::vector<double> true_volumes(const std::vector<std::uint8_t>& labels, int n_classes,
                                 const Spacing& spacing_mm);

void write_case(const PhantomCase& c, const std::filesystem::path& dir);
PhantomCase read_case(const std::filesystem::path& dir);

/// Largest-remainder fold sizes, seeded shuffle, consecutive assignment.
DatasetSplit split_dataset(const std::vector<std::string>& ids, const std::array<double, 3>& fractions,
                           std::uint64_t seed);

/// One-hot [N, D, H, W] encoding of a label grid.
template <typename T>
Tensor<T> one_hot(const std::vector<std::uint8_t>& labels, const Grid3& grid, int n_classes);

struct Manifest {
  PhantomSpec spec;
  std::uint64_t seed = 0;
  std::vector<std::string> ids;
  DatasetSplit split;
  std::array<double, 3> fractions{};
};

void write_manifest(const Manifest& m, const std::filesystem::path& root);
Manifest read_manifest(const std::filesystem::path& root);

void to_json(nlohmann::json& j, const PhantomSpec& s);
void from_json(const nlohmann::json& j, PhantomSpec& s);
void to_json(nlohmann::json& j, const DatasetSplit& s);
void from_json(const nlohmann::json& j, DatasetSplit& s);

}  // namespace triadpi::phantom
