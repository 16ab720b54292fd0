#pragma once
// Labelled volume lists: the manifest TSV, stratified splitting and loading
// volumes into model-ready tensors.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vmamba/volume.hpp"

namespace vmamba::dataset {

using volume::ClassLabel;

struct ManifestEntry {
  std::string path;
  ClassLabel label = ClassLabel::AD;
  std::string split = "all";

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::optional<std::uint64_t> seed;

  // Throws ValidationError on duplicate paths or empty split tags.
  void validate() const;
  std::array<std::size_t, volume::kNumClasses> class_counts() const;

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

// `path<TAB>label<TAB>split` per line. A leading `# seed <n>` line records
// the split seed; other `#` lines are ignored.
std::string format_manifest(const DatasetManifest& m);
DatasetManifest parse_manifest(std::string_view text);

DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path, const DatasetManifest& m);

// Per class (AD, MCI, CN in turn): shuffle by `seed`, put the first
// floor(fraction * count) into train and the rest into test.
std::pair<DatasetManifest, DatasetManifest> stratified_split(const DatasetManifest& m, double fraction,
                                                             std::uint64_t seed);

// floor(fraction * count), immune to the representation error in products
// like 0.8 * 1116.
std::size_t split_count(double fraction, std::size_t count);

struct Sample {
  Tensor voxels;  // [D, H, W], normalised to [0, 1]
  ClassLabel label;
  std::string path;
};

// Reads every entry (relative paths resolve against `base_dir`), normalises
// intensities and checks the extents against `dims`. With `resize` set,
// mismatched volumes are resampled; otherwise they are rejected.
std::vector<Sample> load_samples(const DatasetManifest& m, const std::filesystem::path& base_dir, volume::Dims dims,
                                 bool resize);

}  // namespace vmamba::dataset
