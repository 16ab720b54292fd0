// NIfTI I/O, preprocessing, the synthetic generator, manifests and splits.

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>
#include <set>

#include "doctest.h"
#include "vmamba/dataset.hpp"
#include "vmamba/error.hpp"
#include "vmamba/volume.hpp"

using namespace vmamba;
using namespace vmamba::volume;
namespace fs = std::filesystem;

namespace {

template <typename T>
void put(Bytes& b, std::size_t at, T v, bool big) {
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  if (big) std::reverse(raw, raw + sizeof(T));
  std::memcpy(b.data() + at, raw, sizeof(T));
}

// Minimal single-file header for a 1 x 1 x n int16 volume.
Bytes int16_stream(const std::vector<std::int16_t>& values, float slope, float inter, bool big = false) {
  Bytes b(kNiftiDataOffset + 2 * values.size(), 0);
  put<std::int32_t>(b, 0, 348, big);
  const std::int16_t dim[8] = {3, 1, 1, static_cast<std::int16_t>(values.size()), 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) put<std::int16_t>(b, 40 + 2 * i, dim[i], big);
  put<std::int16_t>(b, 70, 4, big);
  put<std::int16_t>(b, 72, 16, big);
  for (int i = 0; i < 8; ++i) put<float>(b, 76 + 4 * i, 1.0F, big);
  put<float>(b, 108, 352.0F, big);
  put<float>(b, 112, slope, big);
  put<float>(b, 116, inter, big);
  std::memcpy(b.data() + 344, "n+1\0", 4);
  for (std::size_t i = 0; i < values.size(); ++i) put<std::int16_t>(b, 352 + 2 * i, values[i], big);
  return b;
}

double shell_mean(const Volume& v, double radius) {
  const auto d = v.dims();
  const double c0 = (d[0] - 1) / 2.0, c1 = (d[1] - 1) / 2.0, c2 = (d[2] - 1) / 2.0;
  double sum = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < d[0]; ++i)
    for (std::size_t j = 0; j < d[1]; ++j)
      for (std::size_t k = 0; k < d[2]; ++k) {
        const double r = std::sqrt((i - c0) * (i - c0) + (j - c1) * (j - c1) + (k - c2) * (k - c2));
        if (r <= radius) {
          sum += v.voxels[(i * d[1] + j) * d[2] + k];
          ++count;
        }
      }
  return sum / count;
}

dataset::DatasetManifest counted_manifest(std::size_t ad, std::size_t mci, std::size_t cn) {
  dataset::DatasetManifest m;
  const std::size_t counts[3] = {ad, mci, cn};
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < counts[c]; ++i)
      m.entries.push_back({to_string(label_from_index(c)) + "_" + std::to_string(i) + ".nii", label_from_index(c)});
  return m;
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("vmamba_test_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("labels") {
  CHECK(parse_label("MCI") == ClassLabel::MCI);
  CHECK(to_string(ClassLabel::CN) == "CN");
  CHECK_THROWS_AS(parse_label("XX"), ValidationError);
  CHECK_THROWS_AS(label_from_index(3), ValidationError);
}

TEST_CASE("nifti: scl_slope and scl_inter are applied") {
  const Volume v = read_nifti(int16_stream({3}, 2.0F, 1.0F));
  CHECK(v.voxels[0] == 7.0);
  const Volume unscaled = read_nifti(int16_stream({3, -4}, 0.0F, 5.0F));
  CHECK(unscaled.voxels[1] == -4.0);
}

TEST_CASE("nifti: big-endian streams are read") {
  const Volume v = read_nifti(int16_stream({3, 300}, 2.0F, 1.0F, true));
  CHECK(v.voxels[0] == 7.0);
  CHECK(v.voxels[1] == 601.0);
  CHECK(parse_nifti_header(int16_stream({1}, 1, 0, true)).big_endian);
}

TEST_CASE("nifti: malformed streams are rejected") {
  auto b = int16_stream({1, 2}, 1, 0);
  auto bad_magic = b;
  bad_magic[345] = 'x';
  CHECK_THROWS_AS(read_nifti(bad_magic), FormatError);
  auto truncated = b;
  truncated.pop_back();
  CHECK_THROWS_AS(read_nifti(truncated), FormatError);
  CHECK_THROWS_AS(read_nifti(Bytes(100, 0)), FormatError);
  auto bad_type = b;
  put<std::int16_t>(bad_type, 70, 512, false);
  CHECK_THROWS_AS(read_nifti(bad_type), FormatError);
  auto four_d = b;
  put<std::int16_t>(four_d, 40, 4, false);
  CHECK_THROWS_AS(read_nifti(four_d), FormatError);
}

TEST_CASE("nifti: write then read is voxel exact") {
  std::mt19937_64 rng(1);
  Volume v{Tensor::uniform({5, 4, 3}, rng, -10, 10), {1.5, 1.0, 2.0}, "x"};
  for (auto& x : v.voxels.data()) x = static_cast<float>(x);
  const Bytes bytes = write_nifti(v);
  CHECK(bytes.size() == kNiftiDataOffset + 4 * 60);
  const auto h = parse_nifti_header(bytes);
  CHECK(h.datatype == 16);
  CHECK(h.dim[1] == 5);
  const Volume back = read_nifti(bytes);
  CHECK(back.voxels == v.voxels);
  CHECK(back.spacing == v.spacing);
  CHECK(write_nifti(back) == bytes);

  TempDir dir;
  save_nifti(dir.path / "v.nii", v);
  CHECK(load_nifti(dir.path / "v.nii").voxels == v.voxels);
  CHECK_THROWS_AS(load_nifti(dir.path / "missing.nii"), IoError);
}

TEST_CASE("normalize01") {
  Volume v{Tensor({3, 1, 1}, {2, 4, 6})};
  CHECK(normalize01(v).voxels == Tensor({3, 1, 1}, {0, 0.5, 1}));
  Volume flat{Tensor({2, 2, 1}, 5.0)};
  CHECK(normalize01(flat).voxels == Tensor({2, 2, 1}, 0.0));
}

TEST_CASE("resize: linear ramp matches closed-form interpolation") {
  Volume v{Tensor({9, 1, 1})};
  for (std::size_t i = 0; i < 9; ++i) v.voxels[i] = 2.0 * i + 1.0;
  const Volume r = resize_to(v, {4, 1, 1});
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(r.voxels[i] - (2.0 * (i * 8.0 / 3.0) + 1.0)) <= 1e-6);
  CHECK(r.spacing[0] == doctest::Approx(8.0 / 3.0));

  Volume cube{Tensor({3, 3, 3})};
  for (std::size_t i = 0; i < 27; ++i) cube.voxels[i] = double(i / 9) + 10.0 * double(i % 3);
  const Volume up = resize_to(cube, {5, 4, 5});
  // f = x + 10 z is trilinear, so resampling reproduces it exactly.
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t k = 0; k < 5; ++k) CHECK(std::abs(up.voxels[(i * 4 + 2) * 5 + k] - (i * 0.5 + 10.0 * k * 0.5)) <= 1e-9);
  CHECK_THROWS_AS(resize_to(cube, {0, 2, 2}), ValidationError);
}

TEST_CASE("synthetic volumes: mean intensity orders AD < MCI < CN") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const SynthSpec spec = domain_spec(Domain::A, {32, 32, 16}, seed);
    const double radius = spec.base_radius * 8.0;
    const double ad = shell_mean(synth_generate(ClassLabel::AD, spec), radius);
    const double mci = shell_mean(synth_generate(ClassLabel::MCI, spec), radius);
    const double cn = shell_mean(synth_generate(ClassLabel::CN, spec), radius);
    CHECK(ad < mci);
    CHECK(mci < cn);
  }
}

TEST_CASE("synthetic volumes are deterministic and float-representable") {
  SynthSpec spec;
  spec.seed = 4;
  const Volume a = synth_generate(ClassLabel::MCI, spec), b = synth_generate(ClassLabel::MCI, spec);
  CHECK(a.voxels == b.voxels);
  for (double x : a.voxels.data()) {
    CHECK(x == static_cast<double>(static_cast<float>(x)));
    CHECK(x >= 0.0);
    CHECK(x <= 1.0);
  }
  spec.seed = 5;
  CHECK_FALSE(synth_generate(ClassLabel::MCI, spec).voxels == a.voxels);
  SynthSpec tiny;
  tiny.dims = {8, 8, 8};
  CHECK_THROWS_AS(tiny.validate(), ValidationError);
  CHECK_THROWS_AS(parse_domain("D"), ValidationError);
}

TEST_CASE("split of 476 / 1116 / 702 at 0.8") {
  const auto [train, test] = dataset::stratified_split(counted_manifest(476, 1116, 702), 0.8, 42);
  CHECK(train.class_counts() == std::array<std::size_t, 3>{380, 892, 561});
  CHECK(test.class_counts() == std::array<std::size_t, 3>{96, 224, 141});
  CHECK(train.entries.size() == 1833);
  CHECK(test.entries.size() == 461);
  CHECK(dataset::split_count(0.8, 1116) == 892);
  CHECK(train.seed == 42u);
  for (const auto& e : train.entries) CHECK(e.split == "train");
}

TEST_CASE("split is seeded and disjoint") {
  const auto m = counted_manifest(10, 10, 10);
  const auto a = dataset::stratified_split(m, 0.5, 1), b = dataset::stratified_split(m, 0.5, 1);
  const auto c = dataset::stratified_split(m, 0.5, 2);
  CHECK(a.first == b.first);
  CHECK_FALSE(a.first.entries == c.first.entries);
  std::set<std::string> seen;
  for (const auto& e : a.first.entries) seen.insert(e.path);
  for (const auto& e : a.second.entries) CHECK(seen.insert(e.path).second);
  CHECK(seen.size() == 30);
  CHECK_THROWS_AS(dataset::stratified_split(m, 1.5, 0), ValidationError);
}

TEST_CASE("manifest text round trip") {
  auto m = counted_manifest(2, 1, 1);
  m.seed = 7;
  m.entries[0].split = "train";
  const std::string text = dataset::format_manifest(m);
  CHECK(dataset::parse_manifest(text) == m);
  CHECK_THROWS_AS(dataset::parse_manifest("a.nii\tZZ\tall\n"), FormatError);
  CHECK_THROWS_AS(dataset::parse_manifest("a.nii AD\n"), FormatError);
  auto dup = m;
  dup.entries.push_back(dup.entries[0]);
  CHECK_THROWS_AS(dup.validate(), ValidationError);
}

TEST_CASE("load_samples normalises and guards extents") {
  TempDir dir;
  SynthSpec spec;
  save_nifti(dir.path / "a.nii", synth_generate(ClassLabel::AD, spec));
  dataset::DatasetManifest m;
  m.entries.push_back({"a.nii", ClassLabel::AD});
  const auto samples = dataset::load_samples(m, dir.path, {32, 32, 16}, false);
  REQUIRE(samples.size() == 1);
  double lo = 1, hi = 0;
  for (double x : samples[0].voxels.data()) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  CHECK(lo == 0.0);
  CHECK(hi == 1.0);
  CHECK_THROWS_WITH_AS(dataset::load_samples(m, dir.path, {16, 16, 16}, false), doctest::Contains("--resize"),
                       ValidationError);
  CHECK(dataset::load_samples(m, dir.path, {16, 16, 16}, true)[0].voxels.shape() == Shape{16, 16, 16});
}
