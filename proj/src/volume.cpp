#include "vmamba/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "vmamba/error.hpp"

namespace vmamba::volume {

using vmamba::to_string;

std::string to_string(ClassLabel label) {
  switch (label) {
    case ClassLabel::AD: return "AD";
    case ClassLabel::MCI: return "MCI";
    case ClassLabel::CN: return "CN";
  }
  throw ValidationError("unknown class label");
}

ClassLabel parse_label(std::string_view text) {
  for (auto label : kAllLabels)
    if (text == to_string(label)) return label;
  throw ValidationError("unknown class label '" + std::string(text) + "' (expected AD, MCI or CN)");
}

ClassLabel label_from_index(std::size_t index) {
  if (index >= kNumClasses) throw ValidationError("class index " + std::to_string(index) + " out of range");
  return kAllLabels[index];
}

void Volume::validate() const {
  if (voxels.rank() != 3) throw ShapeError("volume: expected [D, H, W] voxels, got " + to_string(voxels.shape()));
  for (double s : spacing)
    if (!(s > 0.0) || !std::isfinite(s)) throw ValidationError("volume: spacing must be positive");
  if (!voxels.all_finite()) throw ValidationError("volume '" + source_id + "' has non-finite voxels");
}

// ------------------------------------------------------------------ NIfTI --

namespace {

// Header offsets.
constexpr std::size_t kDim = 40;
constexpr std::size_t kDatatype = 70;
constexpr std::size_t kBitpix = 72;
constexpr std::size_t kPixdim = 76;
constexpr std::size_t kVoxOffset = 108;
constexpr std::size_t kSclSlope = 112;
constexpr std::size_t kSclInter = 116;
constexpr std::size_t kXyztUnits = 123;
constexpr std::size_t kMagic = 344;

constexpr std::int16_t kUint8 = 2;
constexpr std::int16_t kInt16 = 4;
constexpr std::int16_t kFloat32 = 16;
constexpr std::int16_t kFloat64 = 64;

template <typename T>
T load(const Bytes& bytes, std::size_t offset, bool swap) {
  std::array<std::uint8_t, sizeof(T)> raw{};
  std::memcpy(raw.data(), bytes.data() + offset, sizeof(T));
  if (swap != (std::endian::native == std::endian::big)) std::reverse(raw.begin(), raw.end());
  return std::bit_cast<T>(raw);
}

// Always little-endian on output.
template <typename T>
void store(Bytes& bytes, std::size_t offset, T value) {
  auto raw = std::bit_cast<std::array<std::uint8_t, sizeof(T)>>(value);
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
  std::memcpy(bytes.data() + offset, raw.data(), sizeof(T));
}

std::int16_t expected_bitpix(std::int16_t datatype) {
  switch (datatype) {
    case kUint8: return 8;
    case kInt16: return 16;
    case kFloat32: return 32;
    case kFloat64: return 64;
    default:
      throw FormatError("nifti: unsupported datatype code " + std::to_string(datatype) +
                        " (supported: 2, 4, 16, 64)");
  }
}

}  // namespace

NiftiHeader parse_nifti_header(const Bytes& bytes) {
  if (bytes.size() < kNiftiDataOffset)
    throw FormatError("nifti: stream of " + std::to_string(bytes.size()) + " bytes is shorter than the 352-byte preamble");
  NiftiHeader h;
  // sizeof_hdr doubles as the byte-order mark.
  if (load<std::int32_t>(bytes, 0, false) == 348) {
    h.big_endian = false;
  } else if (load<std::int32_t>(bytes, 0, true) == 348) {
    h.big_endian = true;
  } else {
    throw FormatError("nifti: sizeof_hdr is not 348 in either byte order");
  }
  const bool swap = h.big_endian;
  if (std::memcmp(bytes.data() + kMagic, "n+1\0", 4) != 0) throw FormatError("nifti: bad magic, expected \"n+1\\0\"");
  for (std::size_t i = 0; i < 8; ++i) {
    h.dim[i] = load<std::int16_t>(bytes, kDim + 2 * i, swap);
    h.pixdim[i] = load<float>(bytes, kPixdim + 4 * i, swap);
  }
  h.datatype = load<std::int16_t>(bytes, kDatatype, swap);
  h.bitpix = load<std::int16_t>(bytes, kBitpix, swap);
  h.vox_offset = load<float>(bytes, kVoxOffset, swap);
  h.scl_slope = load<float>(bytes, kSclSlope, swap);
  h.scl_inter = load<float>(bytes, kSclInter, swap);

  if (h.dim[0] != 3) throw FormatError("nifti: dim[0] = " + std::to_string(h.dim[0]) + ", only 3D volumes are supported");
  for (std::size_t i = 1; i <= 3; ++i)
    if (h.dim[i] <= 0) throw FormatError("nifti: dim[" + std::to_string(i) + "] must be positive");
  if (h.bitpix != expected_bitpix(h.datatype))
    throw FormatError("nifti: bitpix " + std::to_string(h.bitpix) + " does not match datatype " +
                      std::to_string(h.datatype));
  if (!(h.vox_offset >= static_cast<float>(kNiftiDataOffset)))
    throw FormatError("nifti: vox_offset must be at least 352");
  return h;
}

Volume read_nifti(const Bytes& bytes) {
  const NiftiHeader h = parse_nifti_header(bytes);
  const std::size_t nx = static_cast<std::size_t>(h.dim[1]);
  const std::size_t ny = static_cast<std::size_t>(h.dim[2]);
  const std::size_t nz = static_cast<std::size_t>(h.dim[3]);
  const std::size_t width = static_cast<std::size_t>(h.bitpix) / 8;
  const auto offset = static_cast<std::size_t>(h.vox_offset);
  const std::size_t count = nx * ny * nz;
  if (bytes.size() < offset || (bytes.size() - offset) / width < count)
    throw FormatError("nifti: data section truncated, need " + std::to_string(count * width) + " bytes at offset " +
                      std::to_string(offset) + ", stream has " + std::to_string(bytes.size()));

  const bool scaled = h.scl_slope != 0.0F;
  const double slope = h.scl_slope, inter = h.scl_inter;
  Volume v;
  v.voxels = Tensor({nx, ny, nz});
  v.spacing = {h.pixdim[1], h.pixdim[2], h.pixdim[3]};
  for (double& s : v.spacing)
    if (!(s > 0.0)) s = 1.0;

  std::size_t file_index = 0;
  for (std::size_t k = 0; k < nz; ++k) {
    for (std::size_t j = 0; j < ny; ++j) {
      for (std::size_t i = 0; i < nx; ++i, ++file_index) {
        const std::size_t at = offset + file_index * width;
        double raw = 0.0;
        switch (h.datatype) {
          case kUint8: raw = bytes[at]; break;
          case kInt16: raw = load<std::int16_t>(bytes, at, h.big_endian); break;
          case kFloat32: raw = load<float>(bytes, at, h.big_endian); break;
          case kFloat64: raw = load<double>(bytes, at, h.big_endian); break;
        }
        v.voxels[(i * ny + j) * nz + k] = scaled ? slope * raw + inter : raw;
      }
    }
  }
  return v;
}

Bytes write_nifti(const Volume& v) {
  v.validate();
  const auto dims = v.dims();
  for (auto d : dims)
    if (d > 32767) throw ValidationError("nifti: extent " + std::to_string(d) + " exceeds the int16 dim field");
  const std::size_t count = v.voxels.size();
  Bytes out(kNiftiDataOffset + 4 * count, 0);
  store<std::int32_t>(out, 0, 348);
  store<std::int16_t>(out, kDim, 3);
  for (std::size_t i = 0; i < 3; ++i) store<std::int16_t>(out, kDim + 2 * (i + 1), static_cast<std::int16_t>(dims[i]));
  for (std::size_t i = 4; i < 8; ++i) store<std::int16_t>(out, kDim + 2 * i, 1);
  store<std::int16_t>(out, kDatatype, kFloat32);
  store<std::int16_t>(out, kBitpix, 32);
  store<float>(out, kPixdim, 1.0F);
  for (std::size_t i = 0; i < 3; ++i) store<float>(out, kPixdim + 4 * (i + 1), static_cast<float>(v.spacing[i]));
  store<float>(out, kVoxOffset, static_cast<float>(kNiftiDataOffset));
  store<float>(out, kSclSlope, 1.0F);
  store<float>(out, kSclInter, 0.0F);
  out[kXyztUnits] = 2;  // millimetres
  std::memcpy(out.data() + kMagic, "n+1\0", 4);

  const std::size_t nx = dims[0], ny = dims[1], nz = dims[2];
  std::size_t file_index = 0;
  for (std::size_t k = 0; k < nz; ++k)
    for (std::size_t j = 0; j < ny; ++j)
      for (std::size_t i = 0; i < nx; ++i, ++file_index)
        store<float>(out, kNiftiDataOffset + 4 * file_index, static_cast<float>(v.voxels[(i * ny + j) * nz + k]));
  return out;
}

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  Bytes bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("failed reading '" + path.string() + "'");
  return bytes;
}

void write_file(const std::filesystem::path& path, const Bytes& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

Volume load_nifti(const std::filesystem::path& path) {
  Volume v;
  try {
    v = read_nifti(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  v.source_id = path.filename().string();
  return v;
}

void save_nifti(const std::filesystem::path& path, const Volume& v) { write_file(path, write_nifti(v)); }

// ------------------------------------------------------------ preprocessing --

Volume normalize01(const Volume& v) {
  Volume out = v;
  const auto values = v.voxels.data();
  if (values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double min = *lo, range = *hi - *lo;
  if (range == 0.0) {
    out.voxels.fill(0.0);
    return out;
  }
  for (double& x : out.voxels.data()) x = (x - min) / range;
  return out;
}

namespace {

struct AxisSample {
  std::size_t lo;
  std::size_t hi;
  double frac;
};

std::vector<AxisSample> axis_samples(std::size_t source, std::size_t target) {
  std::vector<AxisSample> out(target);
  for (std::size_t i = 0; i < target; ++i) {
    const double pos = target == 1 ? 0.5 * static_cast<double>(source - 1)
                                   : static_cast<double>(i) * static_cast<double>(source - 1) /
                                         static_cast<double>(target - 1);
    const auto lo = std::min(static_cast<std::size_t>(pos), source - 1);
    const std::size_t hi = std::min(lo + 1, source - 1);
    out[i] = {lo, hi, pos - static_cast<double>(lo)};
  }
  return out;
}

}  // namespace

Volume resize_to(const Volume& v, Dims target) {
  for (auto t : target)
    if (t == 0) throw ValidationError("resize: target dims must be positive");
  const Dims src = v.dims();
  if (src == target) return v;
  const auto sd = axis_samples(src[0], target[0]);
  const auto sh = axis_samples(src[1], target[1]);
  const auto sw = axis_samples(src[2], target[2]);
  const double* in = v.voxels.ptr();
  auto at = [&](std::size_t d, std::size_t h, std::size_t w) { return in[(d * src[1] + h) * src[2] + w]; };

  Volume out;
  out.source_id = v.source_id;
  out.voxels = Tensor({target[0], target[1], target[2]});
  double* o = out.voxels.ptr();
  for (std::size_t d = 0; d < target[0]; ++d) {
    for (std::size_t h = 0; h < target[1]; ++h) {
      for (std::size_t w = 0; w < target[2]; ++w) {
        const auto& a = sd[d];
        const auto& b = sh[h];
        const auto& c = sw[w];
        auto lerp_w = [&](std::size_t dd, std::size_t hh) {
          return at(dd, hh, c.lo) + c.frac * (at(dd, hh, c.hi) - at(dd, hh, c.lo));
        };
        auto lerp_hw = [&](std::size_t dd) {
          const double lo = lerp_w(dd, b.lo);
          return lo + b.frac * (lerp_w(dd, b.hi) - lo);
        };
        const double lo = lerp_hw(a.lo);
        *o++ = lo + a.frac * (lerp_hw(a.hi) - lo);
      }
    }
  }
  for (std::size_t i = 0; i < 3; ++i) {
    const bool aligned = src[i] > 1 && target[i] > 1;
    out.spacing[i] = aligned ? v.spacing[i] * static_cast<double>(src[i] - 1) / static_cast<double>(target[i] - 1)
                             : v.spacing[i] * static_cast<double>(src[i]) / static_cast<double>(target[i]);
  }
  return out;
}

// -------------------------------------------------------------- synthetic --

void SynthSpec::validate() const {
  for (auto d : dims)
    if (d < 4) throw ValidationError("synth: every extent must be at least 4");
  if (!(noise_sigma >= 0.0)) throw ValidationError("synth: noise_sigma must be non-negative");
  if (!(base_radius > 0.0)) throw ValidationError("synth: base_radius must be positive");
  const auto& f = radius_factor;
  const std::size_t ad = index_of(ClassLabel::AD), mci = index_of(ClassLabel::MCI), cn = index_of(ClassLabel::CN);
  if (!(f[cn] > f[mci] && f[mci] > f[ad] && f[ad] > 0.0))
    throw ValidationError("synth: radius factors must satisfy CN > MCI > AD > 0");
  if (!(ellipsoid_scale[ad] >= ellipsoid_scale[mci] && ellipsoid_scale[mci] >= ellipsoid_scale[cn] &&
        ellipsoid_scale[cn] > 0.0))
    throw ValidationError("synth: ellipsoid scales must satisfy AD >= MCI >= CN > 0");
  // Largest sphere plus centre jitter must stay inside the volume.
  const double half_min = 0.5 * static_cast<double>(*std::min_element(dims.begin(), dims.end()));
  const double radius = base_radius * half_min * f[cn] * 1.05;
  if (radius + 1.0 > half_min)
    throw ValidationError("synth: structures exceed dims; CN sphere radius " + std::to_string(radius) +
                          " voxels does not fit in half-extent " + std::to_string(half_min));
}

Domain parse_domain(std::string_view text) {
  if (text == "A") return Domain::A;
  if (text == "B") return Domain::B;
  if (text == "C") return Domain::C;
  throw ValidationError("unknown domain '" + std::string(text) + "' (expected A, B or C)");
}

SynthSpec domain_spec(Domain domain, Dims dims, std::uint64_t seed) {
  SynthSpec spec;
  spec.dims = dims;
  spec.seed = seed;
  switch (domain) {
    case Domain::A: break;
    case Domain::B:
      spec.noise_sigma = 0.08;
      spec.intensity_bias = 0.05;
      break;
    case Domain::C:
      spec.noise_sigma = 0.12;
      spec.intensity_bias = -0.05;
      break;
  }
  return spec;
}

Volume synth_generate(ClassLabel label, const SynthSpec& spec) {
  spec.validate();
  // Label folded into the stream so equal seeds still differ across classes.
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                    static_cast<std::uint32_t>(index_of(label)) + 1};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> jitter(-1.0, 1.0);
  std::normal_distribution<double> noise(0.0, spec.noise_sigma);

  const auto [nd, nh, nw] = spec.dims;
  const double half_min = 0.5 * static_cast<double>(std::min({nd, nh, nw}));
  const double cn_radius = spec.base_radius * half_min * spec.radius_factor[index_of(ClassLabel::CN)];
  const double radius = cn_radius / spec.radius_factor[index_of(ClassLabel::CN)] *
                        spec.radius_factor[index_of(label)] * (1.0 + 0.05 * jitter(rng));
  const std::array<double, 3> center{0.5 * static_cast<double>(nd - 1) + 0.5 * jitter(rng),
                                     0.5 * static_cast<double>(nh - 1) + 0.5 * jitter(rng),
                                     0.5 * static_cast<double>(nw - 1) + 0.5 * jitter(rng)};
  std::array<double, 3> axes{};
  for (std::size_t a = 0; a < 3; ++a)
    axes[a] = spec.ellipsoid_axes[a] * cn_radius * spec.ellipsoid_scale[index_of(label)] * (1.0 + 0.05 * jitter(rng));

  constexpr double kBackground = 0.2, kTissue = 0.8, kVentricle = 0.05;
  Volume v;
  v.source_id = "synth-" + to_string(label) + "-" + std::to_string(spec.seed);
  v.voxels = Tensor({nd, nh, nw});
  double* out = v.voxels.ptr();
  for (std::size_t d = 0; d < nd; ++d) {
    for (std::size_t h = 0; h < nh; ++h) {
      for (std::size_t w = 0; w < nw; ++w) {
        const double dx = static_cast<double>(d) - center[0];
        const double dy = static_cast<double>(h) - center[1];
        const double dz = static_cast<double>(w) - center[2];
        double base = kBackground;
        if (dx * dx + dy * dy + dz * dz <= radius * radius) base = kTissue;
        const double e = dx * dx / (axes[0] * axes[0]) + dy * dy / (axes[1] * axes[1]) + dz * dz / (axes[2] * axes[2]);
        if (e <= 1.0) base = kVentricle;
        const double value = std::clamp(base + spec.intensity_bias + noise(rng), 0.0, 1.0);
        *out++ = static_cast<double>(static_cast<float>(value));
      }
    }
  }
  return v;
}

}  // namespace vmamba::volume
