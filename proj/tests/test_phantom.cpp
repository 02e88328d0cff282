#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "json.hpp"
#include "oracles.hpp"
#include "triadpi/errors.hpp"
#include "triadpi/phantom.hpp"

using namespace triadpi;
using namespace triadpi::phantom;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("triadpi_test_phantom_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(Phantom, Deterministic) {
  const auto spec = PhantomSpec::standard();
  EXPECT_EQ(generate_phantom(spec, 7), generate_phantom(spec, 7));
  EXPECT_NE(generate_phantom(spec, 7).labels, generate_phantom(spec, 8).labels);
}

TEST(Phantom, EveryForegroundClassPresentAndCounted) {
  const auto spec = PhantomSpec::standard();
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto c = generate_phantom(spec, s);
    const auto naive = oracle::label_volumes(c.labels, c.grid, spec.n_classes, c.spacing_mm.voxel_mm3());
    ASSERT_EQ(c.true_volumes_mL.size(), 3u);
    for (int k = 0; k < 3; ++k) {
      EXPECT_GT(c.true_volumes_mL[k], 0.0);
      EXPECT_DOUBLE_EQ(c.true_volumes_mL[k], naive[k]);
    }
  }
}

TEST(Phantom, VolumeConservation) {
  const auto c = generate_phantom(PhantomSpec::standard(), 3);
  std::size_t bg = 0;
  for (auto l : c.labels) bg += (l == 0);
  double total = double(bg) * c.spacing_mm.voxel_mm3() / 1000.0;
  for (double v : c.true_volumes_mL) total += v;
  EXPECT_NEAR(total, double(c.grid.voxels()) * c.spacing_mm.voxel_mm3() / 1000.0, 1e-9);
}

TEST(Phantom, NestingCoreInsideShells) {
  // The core sits two shells deep, so it never touches background. The middle
  // shell can be thinner than a voxel where the core is off-centre, so it is
  // not checked here.
  const auto spec = PhantomSpec::standard();
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto c = generate_phantom(spec, s);
    const Grid3 g = c.grid;
    auto at = [&](int z, int y, int x) { return c.labels[(std::size_t(z) * g.h + y) * g.w + x]; };
    for (int z = 1; z + 1 < g.d; ++z)
      for (int y = 1; y + 1 < g.h; ++y)
        for (int x = 1; x + 1 < g.w; ++x) {
          const int l = at(z, y, x);
          if (l != 3) continue;
          const int nb[6] = {at(z - 1, y, x), at(z + 1, y, x), at(z, y - 1, x),
                             at(z, y + 1, x), at(z, y, x - 1), at(z, y, x + 1)};
          for (int n : nb) ASSERT_NE(n, 0) << "core voxel touches background, seed " << s;
        }
  }
}

TEST(Phantom, RejectsRadiusLargerThanGrid) {
  auto spec = PhantomSpec::standard();
  spec.lesion_radius_max_mm = 100;
  EXPECT_THROW(generate_phantom(spec, 1), ConfigError);
  spec = PhantomSpec::standard();
  spec.grid = {4, 32, 32};
  EXPECT_THROW(spec.validate(), ConfigError);
}

TEST(TrueVolumes, UnitConversion) {
  std::vector<std::uint8_t> lab(1000, 0);
  for (int i = 0; i < 100; ++i) lab[i] = 1;
  auto v = true_volumes(lab, 3, Spacing{1, 1, 1});
  EXPECT_DOUBLE_EQ(v[0], 0.1);
  EXPECT_DOUBLE_EQ(v[1], 0.0);
  std::vector<std::uint8_t> ten(10, 1);
  EXPECT_DOUBLE_EQ(true_volumes(ten, 2, Spacing{2, 2, 2})[0], 0.08);
}

TEST(CaseIO, RoundTripIsExact) {
  const auto c = generate_phantom(PhantomSpec::standard(), 11, "case_x");
  const auto dir = scratch("rt");
  write_case(c, dir);
  EXPECT_EQ(read_case(dir), c);
}

TEST(CaseIO, TruncatedPayloadIsAShapeMismatch) {
  const auto c = generate_phantom(PhantomSpec::standard(), 12);
  const auto dir = scratch("trunc");
  write_case(c, dir);
  fs::resize_file(dir / "intensities.bin", fs::file_size(dir / "intensities.bin") - 1);
  try {
    read_case(dir);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("shape mismatch"), std::string::npos);
  }
}

TEST(CaseIO, MissingSpacingNamesTheField) {
  const auto c = generate_phantom(PhantomSpec::standard(), 13);
  const auto dir = scratch("nospacing");
  write_case(c, dir);
  nlohmann::json meta = nlohmann::json::parse(std::ifstream(dir / "meta.json"));
  meta.erase("spacing_mm");
  std::ofstream(dir / "meta.json") << meta.dump();
  try {
    read_case(dir);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("spacing_mm"), std::string::npos);
  }
}

TEST(Split, LargestRemainderSizes) {
  std::vector<std::string> ids;
  for (int i = 0; i < 10; ++i) ids.push_back("c" + std::to_string(i));
  const auto s = split_dataset(ids, {0.5, 0.2, 0.3}, 1);
  EXPECT_EQ(s.train_ids.size(), 5u);
  EXPECT_EQ(s.calibration_ids.size(), 2u);
  EXPECT_EQ(s.test_ids.size(), 3u);
  EXPECT_EQ(s, split_dataset(ids, {0.5, 0.2, 0.3}, 1));

  std::set<std::string> all;
  for (const auto* f : {&s.train_ids, &s.calibration_ids, &s.test_ids})
    for (const auto& id : *f) EXPECT_TRUE(all.insert(id).second);
  EXPECT_EQ(all.size(), ids.size());
}

TEST(Split, EmptyFoldIsAnError) {
  std::vector<std::string> ids{"a", "b", "c"};
  EXPECT_THROW(split_dataset(ids, {1.0, 0.0, 0.0}, 1), ConfigError);
  EXPECT_THROW(split_dataset(ids, {0.5, 0.2, 0.2}, 1), ConfigError);
}

TEST(Manifest, RoundTrip) {
  Manifest m;
  m.spec = PhantomSpec::standard();
  m.seed = 3;
  m.ids = {"a", "b", "c", "d"};
  m.fractions = {0.5, 0.25, 0.25};
  m.split = split_dataset(m.ids, m.fractions, 9);
  const auto dir = scratch("manifest");
  write_manifest(m, dir);
  const auto r = read_manifest(dir);
  EXPECT_EQ(r.seed, m.seed);
  EXPECT_EQ(r.ids, m.ids);
  EXPECT_EQ(r.split, m.split);
  EXPECT_EQ(nlohmann::json(r.spec), nlohmann::json(m.spec));
}
