#include "vmamba/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "vmamba/error.hpp"

namespace vmamba::dataset {

void DatasetManifest::validate() const {
  std::set<std::string_view> seen;
  for (const auto& e : entries) {
    if (e.path.empty()) throw ValidationError("manifest: empty path");
    if (e.split.empty()) throw ValidationError("manifest: entry '" + e.path + "' has no split tag");
    if (!seen.insert(e.path).second) throw ValidationError("manifest: duplicate path '" + e.path + "'");
  }
}

std::array<std::size_t, volume::kNumClasses> DatasetManifest::class_counts() const {
  std::array<std::size_t, volume::kNumClasses> counts{};
  for (const auto& e : entries) ++counts[volume::index_of(e.label)];
  return counts;
}

std::string format_manifest(const DatasetManifest& m) {
  m.validate();
  std::string out;
  if (m.seed) out += "# seed " + std::to_string(*m.seed) + "\n";
  for (const auto& e : m.entries) {
    if (e.path.find_first_of("\t\n") != std::string::npos)
      throw ValidationError("manifest: path '" + e.path + "' contains a tab or newline");
    out += e.path + '\t' + volume::to_string(e.label) + '\t' + e.split + '\n';
  }
  return out;
}

DatasetManifest parse_manifest(std::string_view text) {
  DatasetManifest m;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.front() == '#') {
      constexpr std::string_view kSeed = "# seed ";
      if (line.starts_with(kSeed)) {
        std::uint64_t seed = 0;
        const char* first = line.data() + kSeed.size();
        const char* last = line.data() + line.size();
        auto [ptr, ec] = std::from_chars(first, last, seed);
        if (ec != std::errc{} || ptr != last)
          throw FormatError("manifest line " + std::to_string(line_no) + ": malformed seed");
        m.seed = seed;
      }
      continue;
    }
    const auto tab1 = line.find('\t');
    const auto tab2 = tab1 == std::string::npos ? tab1 : line.find('\t', tab1 + 1);
    if (tab2 == std::string::npos || line.find('\t', tab2 + 1) != std::string::npos)
      throw FormatError("manifest line " + std::to_string(line_no) + ": expected path<TAB>label<TAB>split");
    ManifestEntry e;
    e.path = line.substr(0, tab1);
    try {
      e.label = volume::parse_label(line.substr(tab1 + 1, tab2 - tab1 - 1));
    } catch (const ValidationError& err) {
      throw FormatError("manifest line " + std::to_string(line_no) + ": " + err.what());
    }
    e.split = line.substr(tab2 + 1);
    m.entries.push_back(std::move(e));
  }
  m.validate();
  return m;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest '" + path.string() + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  try {
    return parse_manifest(buffer.str());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void save_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  const std::string text = format_manifest(m);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

std::size_t split_count(double fraction, std::size_t count) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw ValidationError("split fraction must lie in [0, 1]");
  const auto n = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(count) + 1e-9));
  return std::min(n, count);
}

std::pair<DatasetManifest, DatasetManifest> stratified_split(const DatasetManifest& m, double fraction,
                                                             std::uint64_t seed) {
  m.validate();
  std::mt19937_64 rng(seed);
  DatasetManifest train, test;
  train.seed = test.seed = seed;
  for (auto label : volume::kAllLabels) {
    std::vector<ManifestEntry> members;
    for (const auto& e : m.entries)
      if (e.label == label) members.push_back(e);
    std::shuffle(members.begin(), members.end(), rng);
    const std::size_t cut = split_count(fraction, members.size());
    for (std::size_t i = 0; i < members.size(); ++i) {
      auto& e = members[i];
      e.split = i < cut ? "train" : "test";
      (i < cut ? train : test).entries.push_back(std::move(e));
    }
  }
  return {std::move(train), std::move(test)};
}

std::vector<Sample> load_samples(const DatasetManifest& m, const std::filesystem::path& base_dir, volume::Dims dims,
                                 bool resize) {
  std::vector<Sample> out;
  out.reserve(m.entries.size());
  for (const auto& e : m.entries) {
    std::filesystem::path p(e.path);
    if (p.is_relative()) p = base_dir / p;
    volume::Volume v = volume::load_nifti(p);
    if (v.dims() != dims) {
      if (!resize)
        throw ValidationError("volume '" + e.path + "' has dims " + to_string(v.voxels.shape()) +
                              " but the model expects " + to_string(Shape{dims[0], dims[1], dims[2]}) +
                              "; pass --resize to resample");
      v = volume::resize_to(v, dims);
    }
    v.validate();
    out.push_back({volume::normalize01(v).voxels, e.label, e.path});
  }
  return out;
}

}  // namespace vmamba::dataset
