#pragma once
// Volumes on disk and in memory: a NIfTI-1 subset, intensity normalisation,
// trilinear resizing and a seeded synthetic generator standing in for the
// access-restricted clinical scans.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vmamba/tensor.hpp"

namespace vmamba::volume {

enum class ClassLabel : std::uint8_t { AD = 0, MCI = 1, CN = 2 };
inline constexpr std::size_t kNumClasses = 3;
inline constexpr std::array<ClassLabel, kNumClasses> kAllLabels{ClassLabel::AD, ClassLabel::MCI, ClassLabel::CN};

std::string to_string(ClassLabel label);
ClassLabel parse_label(std::string_view text);
inline std::size_t index_of(ClassLabel label) { return static_cast<std::size_t>(label); }
ClassLabel label_from_index(std::size_t index);

using Dims = std::array<std::size_t, 3>;
using Spacing = std::array<double, 3>;

struct Volume {
  Tensor voxels;  // [D, H, W]
  Spacing spacing{1.0, 1.0, 1.0};
  std::string source_id;

  Dims dims() const { return {voxels.dim(0), voxels.dim(1), voxels.dim(2)}; }
  // Throws ValidationError on non-finite voxels or non-positive spacing.
  void validate() const;
};

// Header fields this reader understands; everything else is written as zero.
struct NiftiHeader {
  std::array<std::int16_t, 8> dim{};
  std::int16_t datatype = 0;
  std::int16_t bitpix = 0;
  std::array<float, 8> pixdim{};
  float vox_offset = 0.0F;
  float scl_slope = 0.0F;
  float scl_inter = 0.0F;
  bool big_endian = false;
};

inline constexpr std::size_t kNiftiHeaderSize = 348;
inline constexpr std::size_t kNiftiDataOffset = 352;

using Bytes = std::vector<std::uint8_t>;

NiftiHeader parse_nifti_header(const Bytes& bytes);

// Tensor axes (D, H, W) map to NIfTI (i, j, k), so i varies fastest on disk.
// Supports uint8, int16, float32 and float64 data. Throws FormatError.
Volume read_nifti(const Bytes& bytes);
// Single-file float32 stream, vox_offset 352, unit slope.
Bytes write_nifti(const Volume& v);

Volume load_nifti(const std::filesystem::path& path);
void save_nifti(const std::filesystem::path& path, const Volume& v);

Bytes read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const Bytes& bytes);

// (v - min) / (max - min); a constant volume maps to zeros.
Volume normalize01(const Volume& v);

// Corner-aligned trilinear resampling: output corners coincide with input
// corners along every axis of extent > 1.
Volume resize_to(const Volume& v, Dims target);

struct SynthSpec {
  Dims dims{32, 32, 16};
  double noise_sigma = 0.05;
  double intensity_bias = 0.0;
  // Sphere radius for CN as a fraction of half the smallest extent.
  double base_radius = 0.8;
  std::array<double, kNumClasses> radius_factor{0.5, 0.75, 1.0};  // AD, MCI, CN
  // Ventricle-proxy semi-axes as fractions of the CN radius, times the class scale.
  std::array<double, 3> ellipsoid_axes{0.35, 0.25, 0.25};
  std::array<double, kNumClasses> ellipsoid_scale{1.6, 1.3, 1.0};
  std::uint64_t seed = 0;

  void validate() const;
};

// Domain analogues: A is clean, B and C add noise and an intensity shift.
enum class Domain { A, B, C };
Domain parse_domain(std::string_view text);
SynthSpec domain_spec(Domain domain, Dims dims, std::uint64_t seed);

// Background noise around 0.2, a bright sphere whose radius shrinks from CN
// to AD, and a dark ellipsoid that grows from CN to AD. Deterministic in
// (label, spec); voxel values are representable in float32.
Volume synth_generate(ClassLabel label, const SynthSpec& spec);

}  // namespace vmamba::volume
