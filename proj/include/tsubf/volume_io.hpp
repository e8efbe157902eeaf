#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>

#include "tsubf/random.hpp"
#include "tsubf/tensor.hpp"

// Volume ingestion: a sidecar-header native container, a minimal NIfTI-1
// reader, HU normalization, patch extraction, and synthetic fixtures.
// Image volumes are [H, W, D] row-major.

namespace tsubf {

enum class Units { hounsfield, normalized };

using Voxel3 = std::array<int, 3>;  // patch origin in voxel coordinates

struct VolumeSample {
  Tensor<float> image;  // [H, W, D]
  std::optional<Tensor<int>> label;
  std::array<double, 3> spacing{1, 1, 1};
  std::string source_id;
  Units units = Units::hounsfield;

  void validate() const {
    if (image.ndim() != 3)
      throw ShapeError("VolumeSample: image must be [H,W,D], got " +
                       shape_str(image.shape()));
    if (label && label->shape() != image.shape())
      throw ShapeError("VolumeSample: label shape " +
                       shape_str(label->shape()) + " != image shape " +
                       shape_str(image.shape()));
    for (double s : spacing)
      if (!(s > 0)) throw ConfigError("VolumeSample: spacing must be > 0");
  }
};

// Clamp to [-1000, 1000] HU, map affinely to [0, 1]. The units tag guards
// against normalizing twice.
inline VolumeSample normalize_hu(const VolumeSample& v) {
  v.validate();
  if (v.units == Units::normalized)
    throw UsageError("normalize_hu: sample '" + v.source_id +
                     "' is already normalized");
  VolumeSample out = v;
  out.image = v.image.clone();
  for (long long i = 0; i < out.image.size(); ++i) {
    float x = std::min(1000.0f, std::max(-1000.0f, out.image.data()[i]));
    out.image.data()[i] = (x + 1000.0f) / 2000.0f;
  }
  out.units = Units::normalized;
  return out;
}

// ---- native container: "<prefix>.hdr" text sidecar + "<prefix>.raw"
// little-endian payload, row-major, last axis fastest ----

struct NativeHeader {
  int version = 1;
  Shape dims;
  std::string dtype;  // "i16" or "f32"
  std::array<double, 3> spacing{1, 1, 1};
  std::string units = "hu";  // "hu", "normalized", or "label"
};

namespace detail {

template <class T>
struct NativeDtype;
template <>
struct NativeDtype<float> {
  static constexpr const char* name = "f32";
};
template <>
struct NativeDtype<std::int16_t> {
  static constexpr const char* name = "i16";
};

}  // namespace detail

template <class T>
void write_native(const std::string& prefix, const Tensor<T>& data,
                  const std::array<double, 3>& spacing,
                  const std::string& units) {
  if (data.ndim() != 3)
    throw ShapeError("write_native: expected [H,W,D], got " +
                     shape_str(data.shape()));
  std::ofstream hdr(prefix + ".hdr");
  if (!hdr) throw IoError("write_native: cannot open " + prefix + ".hdr");
  hdr.precision(17);
  hdr << "format tsubf-volume 1\n"
      << "dims " << data.dim(0) << " " << data.dim(1) << " " << data.dim(2)
      << "\n"
      << "dtype " << detail::NativeDtype<T>::name << "\n"
      << "spacing " << spacing[0] << " " << spacing[1] << " " << spacing[2]
      << "\n"
      << "endianness little\n"
      << "units " << units << "\n";
  if (!hdr) throw IoError("write_native: failed writing " + prefix + ".hdr");
  std::ofstream raw(prefix + ".raw", std::ios::binary);
  if (!raw) throw IoError("write_native: cannot open " + prefix + ".raw");
  raw.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(T)));
  if (!raw) throw IoError("write_native: failed writing " + prefix + ".raw");
}

inline NativeHeader read_native_header(const std::string& prefix) {
  std::ifstream hdr(prefix + ".hdr");
  if (!hdr) throw IoError("read_native: missing header " + prefix + ".hdr");
  NativeHeader h;
  std::string key;
  std::string fmt;
  hdr >> key >> fmt >> h.version;
  if (key != "format" || fmt != "tsubf-volume" || h.version != 1)
    throw IoError("read_native: unsupported header format in " + prefix +
                  ".hdr");
  h.dims.resize(3);
  std::string endianness;
  if (!(hdr >> key >> h.dims[0] >> h.dims[1] >> h.dims[2]) || key != "dims")
    throw IoError("read_native: bad dims line in " + prefix + ".hdr");
  if (!(hdr >> key >> h.dtype) || key != "dtype" ||
      (h.dtype != "i16" && h.dtype != "f32"))
    throw IoError("read_native: bad dtype line in " + prefix + ".hdr");
  if (!(hdr >> key >> h.spacing[0] >> h.spacing[1] >> h.spacing[2]) ||
      key != "spacing")
    throw IoError("read_native: bad spacing line in " + prefix + ".hdr");
  if (!(hdr >> key >> endianness) || key != "endianness" ||
      endianness != "little")
    throw IoError("read_native: bad endianness line in " + prefix + ".hdr");
  if (!(hdr >> key >> h.units) || key != "units")
    throw IoError("read_native: bad units line in " + prefix + ".hdr");
  return h;
}

template <class T>
Tensor<T> read_native(const std::string& prefix, NativeHeader* out = nullptr) {
  NativeHeader h = read_native_header(prefix);
  if (h.dtype != detail::NativeDtype<T>::name)
    throw IoError("read_native: " + prefix + " holds dtype " + h.dtype +
                  ", requested " + detail::NativeDtype<T>::name);
  Tensor<T> data(h.dims);
  std::ifstream raw(prefix + ".raw", std::ios::binary);
  if (!raw) throw IoError("read_native: missing payload " + prefix + ".raw");
  raw.read(reinterpret_cast<char*>(data.data()),
           static_cast<std::streamsize>(data.size() * sizeof(T)));
  if (raw.gcount() != static_cast<std::streamsize>(data.size() * sizeof(T)))
    throw IoError("read_native: truncated payload " + prefix + ".raw");
  char extra;
  if (raw.read(&extra, 1))
    throw IoError("read_native: payload " + prefix +
                  ".raw longer than dims imply");
  if (out) *out = h;
  return data;
}

// Sample-level helpers: "<prefix>_img" (f32 image) and "<prefix>_lbl"
// (i16 labels, when present).
inline void write_sample(const std::string& prefix, const VolumeSample& v) {
  v.validate();
  write_native(prefix + "_img", v.image, v.spacing,
               v.units == Units::normalized ? "normalized" : "hu");
  if (v.label) {
    Tensor<std::int16_t> lbl(v.label->shape());
    for (long long i = 0; i < lbl.size(); ++i)
      lbl.data()[i] = static_cast<std::int16_t>(v.label->data()[i]);
    write_native(prefix + "_lbl", lbl, v.spacing, "label");
  }
}

inline VolumeSample read_sample(const std::string& prefix) {
  VolumeSample v;
  NativeHeader h;
  v.image = read_native<float>(prefix + "_img", &h);
  v.spacing = h.spacing;
  v.units = h.units == "normalized" ? Units::normalized : Units::hounsfield;
  v.source_id = std::filesystem::path(prefix).filename().string();
  if (std::filesystem::exists(prefix + "_lbl.hdr")) {
    auto lbl = read_native<std::int16_t>(prefix + "_lbl");
    Tensor<int> l(lbl.shape());
    for (long long i = 0; i < l.size(); ++i) l.data()[i] = lbl.data()[i];
    v.label = std::move(l);
  }
  v.validate();
  return v;
}

// ---- dataset manifest: one "name split" line per sample ----

struct ManifestEntry {
  std::string name;
  std::string split;  // "train", "val", or "test"
};

inline void write_manifest(const std::string& path,
                           const std::vector<ManifestEntry>& entries) {
  std::ofstream os(path);
  if (!os) throw IoError("write_manifest: cannot open " + path);
  for (const auto& e : entries) os << e.name << " " << e.split << "\n";
  if (!os) throw IoError("write_manifest: failed writing " + path);
}

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("read_manifest: cannot open " + path);
  std::vector<ManifestEntry> entries;
  ManifestEntry e;
  while (is >> e.name >> e.split) {
    if (e.split != "train" && e.split != "val" && e.split != "test")
      throw IoError("read_manifest: unknown split '" + e.split + "' in " +
                    path);
    entries.push_back(e);
  }
  return entries;
}

// Deterministic shuffled visit order for one epoch.
inline std::vector<size_t> epoch_order(size_t n, std::uint64_t seed) {
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

// ---- patch extraction ----

enum class PatchMode { center, random_foreground, grid };

namespace detail {

// Pads with zeros (air after normalization) so every axis reaches at least
// the patch extent.
inline Shape padded_dims(const Shape& dims, const Shape& size) {
  Shape out = dims;
  for (int a = 0; a < 3; ++a) out[a] = std::max(dims[a], size[a]);
  return out;
}

template <class T>
Tensor<T> crop_padded(const Tensor<T>& vol, const Voxel3& origin,
                      const Shape& size) {
  Tensor<T> out(size);
  const int H = vol.dim(0), W = vol.dim(1), D = vol.dim(2);
  for (int x = 0; x < size[0]; ++x)
    for (int y = 0; y < size[1]; ++y)
      for (int z = 0; z < size[2]; ++z) {
        const int sx = origin[0] + x, sy = origin[1] + y, sz = origin[2] + z;
        const bool inside = sx < H && sy < W && sz < D;
        out.data()[(static_cast<long long>(x) * size[1] + y) * size[2] + z] =
            inside
                ? vol.data()[(static_cast<long long>(sx) * W + sy) * D + sz]
                : T(0);
      }
  return out;
}

}  // namespace detail

inline void check_patch_request(const VolumeSample& v, const Voxel3& origin,
                                const Shape& size) {
  v.validate();
  if (size.size() != 3) throw UsageError("extract_patch: size must have 3 axes");
  for (int a = 0; a < 3; ++a) {
    if (size[a] <= 0) throw UsageError("extract_patch: non-positive size");
    const int padded = std::max(v.image.dim(a), size[a]);
    if (origin[a] < 0 || origin[a] + size[a] > padded)
      throw UsageError("extract_patch: origin " + std::to_string(origin[a]) +
                       " out of range along axis " + std::to_string(a));
  }
}

inline VolumeSample extract_patch(const VolumeSample& v, const Voxel3& origin,
                                  const Shape& size) {
  check_patch_request(v, origin, size);
  VolumeSample out;
  out.image = detail::crop_padded(v.image, origin, size);
  if (v.label) out.label = detail::crop_padded(*v.label, origin, size);
  out.spacing = v.spacing;
  out.units = v.units;
  out.source_id = v.source_id + "@" + std::to_string(origin[0]) + "," +
                  std::to_string(origin[1]) + "," + std::to_string(origin[2]);
  return out;
}

inline Voxel3 center_origin(const VolumeSample& v, const Shape& size) {
  Voxel3 o{0, 0, 0};
  for (int a = 0; a < 3; ++a) {
    const int padded = std::max(v.image.dim(a), size[a]);
    o[a] = (padded - size[a]) / 2;
  }
  return o;
}

// With probability 0.5 centers the patch on a uniformly sampled foreground
// voxel (clamped into range); otherwise a uniform random origin.
inline Voxel3 random_foreground_origin(const VolumeSample& v,
                                       const Shape& size, Rng& rng) {
  std::array<int, 3> padded;
  for (int a = 0; a < 3; ++a) padded[a] = std::max(v.image.dim(a), size[a]);
  auto uniform_origin = [&] {
    Voxel3 o;
    for (int a = 0; a < 3; ++a)
      o[a] = static_cast<int>(rng() % static_cast<std::uint64_t>(
                                          padded[a] - size[a] + 1));
    return o;
  };
  if (!v.label || rng() % 2 == 0) return uniform_origin();
  std::vector<long long> fg;
  for (long long i = 0; i < v.label->size(); ++i)
    if (v.label->data()[i] > 0) fg.push_back(i);
  if (fg.empty()) return uniform_origin();
  const long long pick = fg[rng() % fg.size()];
  const int W = v.image.dim(1), D = v.image.dim(2);
  const int fx = static_cast<int>(pick / (static_cast<long long>(W) * D));
  const int fy = static_cast<int>((pick / D) % W);
  const int fz = static_cast<int>(pick % D);
  const int f[3] = {fx, fy, fz};
  Voxel3 o;
  for (int a = 0; a < 3; ++a)
    o[a] = std::min(std::max(f[a] - size[a] / 2, 0), padded[a] - size[a]);
  return o;
}

// Half-patch-stride tiling over the zero-padded volume: each axis is padded
// to the next multiple of the patch extent, giving 2*ceil(E/P) - 1 offsets.
// Every voxel is covered at least once.
inline std::vector<Voxel3> grid_origins(const Shape& dims, const Shape& size) {
  std::array<std::vector<int>, 3> axis;
  for (int a = 0; a < 3; ++a) {
    const int E = std::max(dims[static_cast<size_t>(a)],
                           size[static_cast<size_t>(a)]);
    const int P = size[a];
    const int tiles = (E + P - 1) / P;
    const int n = 2 * tiles - 1;
    for (int i = 0; i < n; ++i) axis[a].push_back(i * (P / 2));
  }
  std::vector<Voxel3> out;
  for (int x : axis[0])
    for (int y : axis[1])
      for (int z : axis[2]) out.push_back({x, y, z});
  return out;
}

inline std::vector<Voxel3> grid_origins(const VolumeSample& v,
                                        const Shape& size) {
  v.validate();
  return grid_origins(v.image.shape(), size);
}

// ---- NIfTI-1 reader (uncompressed single file, "n+1", i16/f32) ----

inline VolumeSample read_nifti1(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("read_nifti1: cannot open " + path);
  std::vector<char> hdr(348);
  is.read(hdr.data(), 348);
  if (is.gcount() != 348)
    throw IoError("read_nifti1: truncated header in " + path);
  auto get_i16 = [&](size_t off) {
    std::int16_t v;
    std::memcpy(&v, hdr.data() + off, 2);
    return v;
  };
  auto get_f32 = [&](size_t off) {
    float v;
    std::memcpy(&v, hdr.data() + off, 4);
    return v;
  };
  const char* magic = hdr.data() + 344;
  if (std::memcmp(magic, "ni1", 4) == 0)
    throw IoError("read_nifti1: detached-header variant \"ni1\" unsupported (" +
                  path + ")");
  if (std::memcmp(magic, "n+1", 4) != 0)
    throw IoError("read_nifti1: bad magic in " + path);
  const int ndim = get_i16(40);
  if (ndim < 3)
    throw IoError("read_nifti1: expected 3-d volume, dim[0]=" +
                  std::to_string(ndim) + " in " + path);
  for (int a = 4; a <= ndim; ++a)
    if (get_i16(40 + 2 * static_cast<size_t>(a)) > 1)
      throw IoError("read_nifti1: non-singleton higher dimension in " + path);
  // NIfTI stores its first axis fastest; our tensors store the last axis
  // fastest, so the axis order (and spacing) is reversed on read and the
  // payload can stream straight into the buffer.
  Shape dims = {get_i16(46), get_i16(44), get_i16(42)};
  for (int d : dims)
    if (d <= 0) throw IoError("read_nifti1: bad dims in " + path);
  const std::int16_t datatype = get_i16(70);
  if (datatype != 4 && datatype != 16)
    throw IoError("read_nifti1: unsupported datatype " +
                  std::to_string(datatype) + " in " + path +
                  " (need 4=i16 or 16=f32)");
  VolumeSample v;
  v.spacing = {get_f32(88), get_f32(84), get_f32(80)};  // pixdim[3,2,1]
  float slope = get_f32(112), inter = get_f32(116);
  if (slope == 0.0f) slope = 1.0f;
  const auto vox_offset = static_cast<std::streamoff>(get_f32(108));
  if (vox_offset < 348)
    throw IoError("read_nifti1: bad vox_offset in " + path);
  is.seekg(vox_offset);
  const long long n = numel(dims);
  v.image = Tensor<float>(dims);
  if (datatype == 4) {
    std::vector<std::int16_t> buf(static_cast<size_t>(n));
    is.read(reinterpret_cast<char*>(buf.data()), n * 2);
    if (is.gcount() != n * 2)
      throw IoError("read_nifti1: truncated payload in " + path);
    for (long long i = 0; i < n; ++i)
      v.image.data()[i] = slope * static_cast<float>(buf[static_cast<size_t>(i)]) + inter;
  } else {
    is.read(reinterpret_cast<char*>(v.image.data()), n * 4);
    if (is.gcount() != n * 4)
      throw IoError("read_nifti1: truncated payload in " + path);
    for (long long i = 0; i < n; ++i)
      v.image.data()[i] = slope * v.image.data()[i] + inter;
  }
  v.source_id = std::filesystem::path(path).filename().string();
  v.units = Units::hounsfield;
  v.validate();
  return v;
}

// ---- synthetic fixtures ----

struct SyntheticSpec {
  Shape dims{32, 32, 32};
  std::array<double, 3> center{-1, -1, -1};  // negative = volume center
  std::array<double, 3> radii{8, 8, 8};      // equal radii = sphere
  double blur_sigma = 0;                     // intensity boundary blur
  double noise_sigma = 0;                    // additive Gaussian HU noise
  float fg_hu = 300.0f;
  float bg_hu = -500.0f;
  std::array<double, 3> spacing{1, 1, 1};
};

namespace detail {

inline void blur_axis(Tensor<float>& img, int axis, double sigma) {
  const int radius = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> w(static_cast<size_t>(2 * radius + 1));
  double total = 0;
  for (int t = -radius; t <= radius; ++t) {
    w[static_cast<size_t>(t + radius)] = std::exp(-0.5 * t * t / (sigma * sigma));
    total += w[static_cast<size_t>(t + radius)];
  }
  for (auto& x : w) x /= total;
  auto src = img.clone();
  const int H = img.dim(0), W = img.dim(1), D = img.dim(2);
  const int ext[3] = {H, W, D};
  auto idx = [&](int x, int y, int z) {
    return (static_cast<long long>(x) * W + y) * D + z;
  };
  for (int x = 0; x < H; ++x)
    for (int y = 0; y < W; ++y)
      for (int z = 0; z < D; ++z) {
        double acc = 0, used = 0;
        for (int t = -radius; t <= radius; ++t) {
          int c[3] = {x, y, z};
          c[axis] += t;
          if (c[axis] < 0 || c[axis] >= ext[axis]) continue;
          acc += w[static_cast<size_t>(t + radius)] *
                 src.data()[idx(c[0], c[1], c[2])];
          used += w[static_cast<size_t>(t + radius)];
        }
        img.data()[idx(x, y, z)] = static_cast<float>(acc / used);
      }
}

}  // namespace detail

// Ellipsoid foreground in a uniform background. The label is the exact
// analytic inside-test; blur and noise touch only the intensity image.
inline VolumeSample make_synthetic(const SyntheticSpec& spec,
                                   std::uint64_t seed) {
  if (spec.dims.size() != 3 || numel(spec.dims) <= 0)
    throw UsageError("make_synthetic: dims must be 3 positive extents");
  for (double r : spec.radii)
    if (!(r > 0)) throw UsageError("make_synthetic: degenerate radii");
  VolumeSample v;
  v.image = Tensor<float>(spec.dims);
  v.label = Tensor<int>(spec.dims);
  v.spacing = spec.spacing;
  v.units = Units::hounsfield;
  v.source_id = "synthetic_" + std::to_string(seed);
  std::array<double, 3> c = spec.center;
  for (int a = 0; a < 3; ++a)
    if (c[a] < 0) c[a] = (spec.dims[a] - 1) / 2.0;
  const int H = spec.dims[0], W = spec.dims[1], D = spec.dims[2];
  long long i = 0;
  for (int x = 0; x < H; ++x)
    for (int y = 0; y < W; ++y)
      for (int z = 0; z < D; ++z, ++i) {
        const double q = std::pow((x - c[0]) / spec.radii[0], 2) +
                         std::pow((y - c[1]) / spec.radii[1], 2) +
                         std::pow((z - c[2]) / spec.radii[2], 2);
        const bool inside = q <= 1.0;
        v.label->data()[i] = inside ? 1 : 0;
        v.image.data()[i] = inside ? spec.fg_hu : spec.bg_hu;
      }
  if (spec.blur_sigma > 0)
    for (int a = 0; a < 3; ++a) detail::blur_axis(v.image, a, spec.blur_sigma);
  if (spec.noise_sigma > 0) {
    Rng rng(seed);
    std::normal_distribution<float> n(0.0f,
                                      static_cast<float>(spec.noise_sigma));
    for (long long k = 0; k < v.image.size(); ++k) v.image.data()[k] += n(rng);
  }
  return v;
}

}  // namespace tsubf
