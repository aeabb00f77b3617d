#pragma once

// Volumes, the SVOL container and the smooth-ROI preprocessing chain.
//
// Volumes store x fastest, then y, then z. Morphology and smoothing work in
// voxel units; spacing is carried as metadata.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "epvsq/bytes.hpp"
#include "epvsq/error.hpp"

namespace epvsq {

struct Dims {
  std::size_t nx = 0, ny = 0, nz = 0;

  constexpr std::size_t size() const { return nx * ny * nz; }
  constexpr std::size_t operator[](int axis) const { return axis == 0 ? nx : axis == 1 ? ny : nz; }
  friend constexpr bool operator==(const Dims&, const Dims&) = default;
};

struct Spacing {
  float x = 1.0f, y = 1.0f, z = 1.0f;

  constexpr float operator[](int axis) const { return axis == 0 ? x : axis == 1 ? y : z; }
  friend constexpr bool operator==(const Spacing&, const Spacing&) = default;
};

// Signed voxel coordinate; crop origins can be negative when padding applies.
struct Index3 {
  std::int64_t x = 0, y = 0, z = 0;

  constexpr std::int64_t operator[](int axis) const { return axis == 0 ? x : axis == 1 ? y : z; }
  friend constexpr bool operator==(const Index3&, const Index3&) = default;
  friend constexpr Index3 operator-(const Index3& a, const Index3& b) {
    return {a.x - b.x, a.y - b.y, a.z - b.z};
  }
  friend constexpr Index3 operator+(const Index3& a, const Index3& b) {
    return {a.x + b.x, a.y + b.y, a.z + b.z};
  }
};

struct IntensityTag {};
struct MaskTag {};

template <class T, class Tag = IntensityTag>
class BasicVolume {
 public:
  using value_type = T;

  BasicVolume() = default;
  BasicVolume(Dims dims, Spacing spacing, T fill = T{})
      : dims_(dims), spacing_(spacing), data_(dims.size(), fill) {
    check_header();
  }
  BasicVolume(Dims dims, Spacing spacing, std::vector<T> data)
      : dims_(dims), spacing_(spacing), data_(std::move(data)) {
    check_header();
    if (data_.size() != dims_.size()) {
      throw ShapeError("volume payload holds " + std::to_string(data_.size()) +
                       " values, dims require " + std::to_string(dims_.size()));
    }
  }

  const Dims& dims() const { return dims_; }
  const Spacing& spacing() const { return spacing_; }
  std::size_t size() const { return data_.size(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
    return x + dims_.nx * (y + dims_.ny * z);
  }
  bool contains(std::int64_t x, std::int64_t y, std::int64_t z) const {
    return x >= 0 && y >= 0 && z >= 0 && static_cast<std::size_t>(x) < dims_.nx &&
           static_cast<std::size_t>(y) < dims_.ny && static_cast<std::size_t>(z) < dims_.nz;
  }
  bool contains(const Index3& p) const { return contains(p.x, p.y, p.z); }

  T& operator()(std::size_t x, std::size_t y, std::size_t z) { return data_[index(x, y, z)]; }
  T operator()(std::size_t x, std::size_t y, std::size_t z) const { return data_[index(x, y, z)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }
  T& at(const Index3& p) { return (*this)(p.x, p.y, p.z); }
  T at(const Index3& p) const { return (*this)(p.x, p.y, p.z); }

  // Zero outside the grid.
  T get_or_zero(std::int64_t x, std::int64_t y, std::int64_t z) const {
    return contains(x, y, z) ? (*this)(x, y, z) : T{};
  }

  friend bool operator==(const BasicVolume&, const BasicVolume&) = default;

 private:
  void check_header() const {
    if (dims_.nx == 0 || dims_.ny == 0 || dims_.nz == 0) {
      throw ShapeError("volume dims must be positive");
    }
    if (!(spacing_.x > 0 && spacing_.y > 0 && spacing_.z > 0)) {
      throw ValidationError("volume spacing must be positive");
    }
  }

  Dims dims_{};
  Spacing spacing_{};
  std::vector<T> data_;
};

using Volume = BasicVolume<float, IntensityTag>;
using MaskVolume = BasicVolume<float, MaskTag>;

template <class Tag2, class T, class Tag>
BasicVolume<T, Tag2> retag(BasicVolume<T, Tag> v) {
  auto dims = v.dims();
  auto spacing = v.spacing();
  return BasicVolume<T, Tag2>(dims, spacing, std::move(v.storage()));
}

template <class To, class T, class Tag>
BasicVolume<To, Tag> convert(const BasicVolume<T, Tag>& v) {
  std::vector<To> out(v.data().begin(), v.data().end());
  return BasicVolume<To, Tag>(v.dims(), v.spacing(), std::move(out));
}

template <class T, class Tag>
bool is_binary(const BasicVolume<T, Tag>& m) {
  return std::all_of(m.data().begin(), m.data().end(), [](T v) { return v == T{0} || v == T{1}; });
}

template <class T, class Tag>
bool all_finite(const BasicVolume<T, Tag>& v) {
  return std::all_of(v.data().begin(), v.data().end(), [](T x) { return std::isfinite(x); });
}

template <class T, class Tag>
std::size_t count_nonzero(const BasicVolume<T, Tag>& v) {
  return static_cast<std::size_t>(
      std::count_if(v.data().begin(), v.data().end(), [](T x) { return x != T{0}; }));
}

// ---------------------------------------------------------------------------
// SVOL container
// ---------------------------------------------------------------------------

namespace svol {

inline constexpr std::uint16_t kVersion = 1;
inline constexpr std::uint16_t kDtypeIntensity = 1;
inline constexpr std::uint16_t kDtypeMask = 2;
inline constexpr std::size_t kHeaderBytes = 4 + 2 + 2 + 12 + 12;

inline Bytes encode(const BasicVolume<float, IntensityTag>& v, std::uint16_t dtype = kDtypeIntensity) {
  Bytes out;
  out.reserve(kHeaderBytes + 4 * v.size());
  bytes::put_raw(out, "SVOL");
  bytes::put<std::uint16_t>(out, kVersion);
  bytes::put<std::uint16_t>(out, dtype);
  bytes::put<std::uint32_t>(out, static_cast<std::uint32_t>(v.dims().nx));
  bytes::put<std::uint32_t>(out, static_cast<std::uint32_t>(v.dims().ny));
  bytes::put<std::uint32_t>(out, static_cast<std::uint32_t>(v.dims().nz));
  bytes::put<float>(out, v.spacing().x);
  bytes::put<float>(out, v.spacing().y);
  bytes::put<float>(out, v.spacing().z);
  for (float x : v.data()) bytes::put<float>(out, x);
  return out;
}

inline Bytes encode(const MaskVolume& m) {
  return encode(retag<IntensityTag>(m), kDtypeMask);
}

struct Decoded {
  std::uint16_t dtype;
  Volume volume;
};

inline Decoded decode(std::span<const std::uint8_t> data, const std::string& name = "SVOL") {
  bytes::Reader r(data, name);
  const std::string magic = r.get_string(4, "magic");
  if (magic != "SVOL") throw FormatError(name + ": bad magic '" + magic + "', expected 'SVOL'");
  const auto version = r.get<std::uint16_t>("version");
  if (version != kVersion) {
    throw FormatError(name + ": unsupported version " + std::to_string(version));
  }
  const auto dtype = r.get<std::uint16_t>("dtype");
  if (dtype != kDtypeIntensity && dtype != kDtypeMask) {
    throw FormatError(name + ": unsupported dtype " + std::to_string(dtype));
  }
  Dims dims;
  const char* dim_names[3] = {"dims.H", "dims.W", "dims.D"};
  std::size_t* dim_slots[3] = {&dims.nx, &dims.ny, &dims.nz};
  for (int a = 0; a < 3; ++a) {
    const auto d = r.get<std::uint32_t>(dim_names[a]);
    if (d == 0) throw FormatError(name + ": " + dim_names[a] + " is zero");
    *dim_slots[a] = d;
  }
  Spacing sp;
  sp.x = r.get<float>("spacing.x");
  sp.y = r.get<float>("spacing.y");
  sp.z = r.get<float>("spacing.z");
  if (!(sp.x > 0 && sp.y > 0 && sp.z > 0) || !std::isfinite(sp.x) || !std::isfinite(sp.y) ||
      !std::isfinite(sp.z)) {
    throw FormatError(name + ": spacing must be positive and finite");
  }
  const std::size_t expected = dims.size() * 4;
  if (r.remaining() != expected) {
    throw FormatError(name + ": payload length mismatch, header dims declare " +
                      std::to_string(dims.size()) + " voxels but " +
                      std::to_string(r.remaining()) + " payload bytes follow");
  }
  std::vector<float> payload(dims.size());
  for (auto& x : payload) {
    x = r.get<float>("payload");
    if (!std::isfinite(x)) throw ValidationError(name + ": non-finite voxel value in payload");
  }
  if (dtype == kDtypeMask) {
    for (float x : payload) {
      if (x < 0.0f || x > 1.0f) throw ValidationError(name + ": mask value outside [0,1]");
    }
  }
  return {dtype, Volume(dims, sp, std::move(payload))};
}

}  // namespace svol

inline void write_volume(const std::filesystem::path& path, const Volume& v) {
  if (!all_finite(v)) throw ValidationError("refusing to write non-finite volume to " + path.string());
  write_file(path, svol::encode(v));
}

inline void write_mask(const std::filesystem::path& path, const MaskVolume& m) {
  for (float x : m.data()) {
    if (!(x >= 0.0f && x <= 1.0f)) throw ValidationError("mask value outside [0,1] in " + path.string());
  }
  write_file(path, svol::encode(m));
}

inline Volume read_volume(const std::filesystem::path& path) {
  return svol::decode(read_file(path), path.string()).volume;
}

inline MaskVolume read_mask(const std::filesystem::path& path) {
  auto dec = svol::decode(read_file(path), path.string());
  if (dec.dtype != svol::kDtypeMask) {
    throw FormatError(path.string() + ": dtype " + std::to_string(dec.dtype) + " is not a mask");
  }
  return retag<MaskTag>(std::move(dec.volume));
}

// ---------------------------------------------------------------------------
// Morphology and smoothing
// ---------------------------------------------------------------------------

// 6-connected binary dilation; voxels outside the grid count as background.
template <class T>
BasicVolume<T, MaskTag> binary_dilate(const BasicVolume<T, MaskTag>& mask, int iterations) {
  if (iterations < 0) throw ValidationError("dilation iterations must be non-negative");
  if (!is_binary(mask)) throw ValidationError("binary_dilate: mask is not binary");
  const Dims d = mask.dims();
  BasicVolume<T, MaskTag> cur = mask;
  for (int it = 0; it < iterations; ++it) {
    BasicVolume<T, MaskTag> next = cur;
    for (std::size_t z = 0; z < d.nz; ++z) {
      for (std::size_t y = 0; y < d.ny; ++y) {
        for (std::size_t x = 0; x < d.nx; ++x) {
          if (cur(x, y, z) == T{0}) continue;
          if (x > 0) next(x - 1, y, z) = T{1};
          if (x + 1 < d.nx) next(x + 1, y, z) = T{1};
          if (y > 0) next(x, y - 1, z) = T{1};
          if (y + 1 < d.ny) next(x, y + 1, z) = T{1};
          if (z > 0) next(x, y, z - 1) = T{1};
          if (z + 1 < d.nz) next(x, y, z + 1) = T{1};
        }
      }
    }
    cur = std::move(next);
  }
  return cur;
}

// Sampled Gaussian truncated at ceil(3 sigma), normalised to unit sum.
inline std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ValidationError("gaussian sigma must be > 0");
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += k[i + radius];
  }
  for (auto& v : k) v /= sum;
  return k;
}

// Separable Gaussian convolution with zero exterior.
template <class T, class Tag>
BasicVolume<T, Tag> gaussian_smooth(const BasicVolume<T, Tag>& v, double sigma) {
  const std::vector<double> k = gaussian_kernel(sigma);
  const auto radius = static_cast<std::int64_t>(k.size() / 2);
  const Dims d = v.dims();
  std::vector<double> a(v.data().begin(), v.data().end());
  std::vector<double> b(a.size());
  const std::array<std::size_t, 3> extent{d.nx, d.ny, d.nz};
  const std::array<std::size_t, 3> stride{1, d.nx, d.nx * d.ny};
  for (int axis = 0; axis < 3; ++axis) {
    const auto n = static_cast<std::int64_t>(extent[axis]);
    const std::size_t s = stride[axis];
    for (std::size_t i = 0; i < a.size(); ++i) {
      const auto pos = static_cast<std::int64_t>((i / s) % extent[axis]);
      const std::size_t base = i - static_cast<std::size_t>(pos) * s;
      const std::int64_t lo = std::max<std::int64_t>(-radius, -pos);
      const std::int64_t hi = std::min<std::int64_t>(radius, n - 1 - pos);
      double acc = 0.0;
      for (std::int64_t o = lo; o <= hi; ++o) {
        acc += k[o + radius] * a[base + static_cast<std::size_t>(pos + o) * s];
      }
      b[i] = acc;
    }
    std::swap(a, b);
  }
  std::vector<T> out(a.size());
  std::transform(a.begin(), a.end(), out.begin(), [](double x) { return static_cast<T>(x); });
  return BasicVolume<T, Tag>(d, v.spacing(), std::move(out));
}

// ---------------------------------------------------------------------------
// Smooth ROI
// ---------------------------------------------------------------------------

struct PreprocessConfig {
  int dilation_iterations = 4;
  double gaussian_sigma = 2.0;
  Dims crop_dims{48, 44, 32};
};

struct SmoothRoi {
  Volume image;             // cropped, masked, divided by its maximum
  MaskVolume smooth_mask;   // cropped smooth mask
  Index3 origin;            // input-grid coordinate of crop voxel (0,0,0)
  float scale = 1.0f;       // maximum of the masked crop; image * scale restores intensities
  bool rescale_skipped = false;
};

// Intensity-weighted centre of mass, floored to a voxel.
template <class T, class Tag>
Index3 center_of_mass(const BasicVolume<T, Tag>& w) {
  const Dims d = w.dims();
  double sx = 0, sy = 0, sz = 0, total = 0;
  for (std::size_t z = 0; z < d.nz; ++z) {
    for (std::size_t y = 0; y < d.ny; ++y) {
      for (std::size_t x = 0; x < d.nx; ++x) {
        const double m = w(x, y, z);
        sx += m * x;
        sy += m * y;
        sz += m * z;
        total += m;
      }
    }
  }
  if (!(total > 0.0)) throw DegenerateError("center of mass undefined for an all-zero weight volume");
  return {static_cast<std::int64_t>(std::floor(sx / total)),
          static_cast<std::int64_t>(std::floor(sy / total)),
          static_cast<std::int64_t>(std::floor(sz / total))};
}

// Crop window origin: centred on `center`, shifted to stay inside the grid;
// larger-than-grid windows are padded symmetrically (origin goes negative).
inline Index3 crop_origin(Dims in, Dims crop, Index3 center) {
  std::array<std::int64_t, 3> o{};
  for (int a = 0; a < 3; ++a) {
    const auto n = static_cast<std::int64_t>(in[a]);
    const auto c = static_cast<std::int64_t>(crop[a]);
    if (c >= n) {
      o[a] = -((c - n) / 2);
    } else {
      o[a] = std::clamp<std::int64_t>(center[a] - c / 2, 0, n - c);
    }
  }
  return {o[0], o[1], o[2]};
}

template <class T, class Tag>
BasicVolume<T, Tag> crop(const BasicVolume<T, Tag>& v, Index3 origin, Dims size) {
  BasicVolume<T, Tag> out(size, v.spacing());
  for (std::size_t z = 0; z < size.nz; ++z) {
    for (std::size_t y = 0; y < size.ny; ++y) {
      for (std::size_t x = 0; x < size.nx; ++x) {
        out(x, y, z) = v.get_or_zero(origin.x + static_cast<std::int64_t>(x),
                                     origin.y + static_cast<std::int64_t>(y),
                                     origin.z + static_cast<std::int64_t>(z));
      }
    }
  }
  return out;
}

// Dilation -> Gaussian smoothing -> masking -> crop about the smooth mask's
// centre of mass -> division by the maximum.
inline SmoothRoi make_smooth_roi(const Volume& v, const MaskVolume& roi, const PreprocessConfig& cfg) {
  if (!(v.dims() == roi.dims())) throw ShapeError("make_smooth_roi: volume and ROI dims differ");
  if (!is_binary(roi)) throw ValidationError("make_smooth_roi: ROI mask is not binary");
  if (count_nonzero(roi) == 0) throw DegenerateError("make_smooth_roi: ROI mask is empty");
  if (cfg.crop_dims.size() == 0) throw ConfigError("make_smooth_roi: crop dims must be positive");

  const MaskVolume dilated = binary_dilate(roi, cfg.dilation_iterations);
  MaskVolume smooth = gaussian_smooth(dilated, cfg.gaussian_sigma);
  for (auto& m : smooth.data()) m = std::clamp(m, 0.0f, 1.0f);

  Volume masked(v.dims(), v.spacing());
  for (std::size_t i = 0; i < v.size(); ++i) masked[i] = v[i] * smooth[i];

  SmoothRoi out;
  out.origin = crop_origin(v.dims(), cfg.crop_dims, center_of_mass(smooth));
  out.image = crop(masked, out.origin, cfg.crop_dims);
  out.smooth_mask = crop(smooth, out.origin, cfg.crop_dims);

  const float peak = *std::max_element(out.image.data().begin(), out.image.data().end());
  if (!(peak > 0.0f)) {
    out.scale = 1.0f;
    out.rescale_skipped = true;
    std::fill(out.image.data().begin(), out.image.data().end(), 0.0f);
    return out;
  }
  out.scale = peak;
  for (auto& x : out.image.data()) x = std::max(0.0f, x / peak);
  return out;
}

// ---------------------------------------------------------------------------
// Rigid resampling
// ---------------------------------------------------------------------------

struct RigidTransform {
  std::array<double, 3> rotation{0, 0, 0};     // radians about x, y, z
  std::array<double, 3> translation{0, 0, 0};  // voxels
  std::array<bool, 3> flip{false, false, false};

  bool is_identity() const {
    return rotation == std::array<double, 3>{0, 0, 0} &&
           translation == std::array<double, 3>{0, 0, 0} && flip == std::array<bool, 3>{false, false, false};
  }
};

using Mat3 = std::array<std::array<double, 3>, 3>;

// R = Rz * Ry * Rx.
inline Mat3 rotation_matrix(const std::array<double, 3>& angles) {
  const double cx = std::cos(angles[0]), sx = std::sin(angles[0]);
  const double cy = std::cos(angles[1]), sy = std::sin(angles[1]);
  const double cz = std::cos(angles[2]), sz = std::sin(angles[2]);
  return {{{cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx},
           {sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx},
           {-sy, cy * sx, cy * cx}}};
}

// Trilinear sample with zero exterior.
template <class T, class Tag>
double sample_trilinear(const BasicVolume<T, Tag>& v, double x, double y, double z) {
  const double fx = std::floor(x), fy = std::floor(y), fz = std::floor(z);
  const auto x0 = static_cast<std::int64_t>(fx), y0 = static_cast<std::int64_t>(fy),
             z0 = static_cast<std::int64_t>(fz);
  const double tx = x - fx, ty = y - fy, tz = z - fz;
  double acc = 0.0;
  for (int dz = 0; dz < 2; ++dz) {
    const double wz = dz ? tz : 1.0 - tz;
    if (wz == 0.0) continue;
    for (int dy = 0; dy < 2; ++dy) {
      const double wy = dy ? ty : 1.0 - ty;
      if (wy == 0.0) continue;
      for (int dx = 0; dx < 2; ++dx) {
        const double wx = dx ? tx : 1.0 - tx;
        if (wx == 0.0) continue;
        acc += wx * wy * wz * static_cast<double>(v.get_or_zero(x0 + dx, y0 + dy, z0 + dz));
      }
    }
  }
  return acc;
}

// Output voxel q samples the input at F * R^T * (q - c - t) + c, i.e. the
// forward map flips, rotates about the centre c, then translates.
template <class T, class Tag>
BasicVolume<T, Tag> rigid_resample(const BasicVolume<T, Tag>& v, const RigidTransform& tf) {
  for (double a : tf.rotation) {
    if (!(std::abs(a) < std::numbers::pi)) throw ValidationError("rotation components must lie in (-pi, pi)");
  }
  if (tf.is_identity()) return v;
  const Dims d = v.dims();
  const std::array<double, 3> c{(d.nx - 1) / 2.0, (d.ny - 1) / 2.0, (d.nz - 1) / 2.0};
  const Mat3 r = rotation_matrix(tf.rotation);
  const bool no_rotation = tf.rotation == std::array<double, 3>{0, 0, 0};
  BasicVolume<T, Tag> out(d, v.spacing());
  for (std::size_t z = 0; z < d.nz; ++z) {
    for (std::size_t y = 0; y < d.ny; ++y) {
      for (std::size_t x = 0; x < d.nx; ++x) {
        const std::array<double, 3> q{x - c[0] - tf.translation[0], y - c[1] - tf.translation[1],
                                      z - c[2] - tf.translation[2]};
        std::array<double, 3> p = q;
        if (!no_rotation) {
          for (int i = 0; i < 3; ++i) p[i] = r[0][i] * q[0] + r[1][i] * q[1] + r[2][i] * q[2];
        }
        for (int i = 0; i < 3; ++i) p[i] = (tf.flip[i] ? -p[i] : p[i]) + c[i];
        out(x, y, z) = static_cast<T>(sample_trilinear(v, p[0], p[1], p[2]));
      }
    }
  }
  return out;
}

}  // namespace epvsq
