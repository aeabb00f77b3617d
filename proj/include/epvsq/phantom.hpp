#pragma once

// Synthetic scans with known lesion counts. A scan is an ellipsoidal ROI in a
// textured tissue background, a bright reference structure on the ROI border,
// `score` thin near-axial capsules (the counted lesions) and a few blob
// distractors, plus white sensor noise.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "epvsq/bytes.hpp"
#include "epvsq/error.hpp"
#include "epvsq/rng.hpp"
#include "epvsq/volgrid.hpp"

namespace epvsq {

inline constexpr std::string_view kPhantomGeneratorVersion = "epvsq-phantom/1";

using Vec3 = std::array<double, 3>;

struct Range {
  double min = 0, max = 0;
  double sample(Rng& rng) const { return min == max ? min : rng.uniform(min, max); }
};

// Zero-inflated negative binomial: 0 with probability zero_inflation, else NB(r, p).
struct CountModel {
  double zero_inflation = 0.2;
  double r = 2.0;
  double p = 0.3;
  std::optional<int> fixed;  // overrides the distribution when set

  double nb_mean() const { return r * (1 - p) / p; }
};

// Optional age covariate; the NB mean scales by rate_ratio_per_decade^((age - reference_age) / 10).
struct AgeModel {
  bool enabled = false;
  double min_age = 45, max_age = 90;
  double reference_age = 67.5;
  double rate_ratio_per_decade = 1.3;
};

struct LesionModel {
  Range radius{1.1, 1.5};        // voxels
  Range length{6.0, 10.0};       // tip to tip, voxels
  double max_tilt = 0.15;        // radians away from the z axis
  Range contrast{0.35, 0.55};
};

struct DistractorModel {
  double mean_count = 1.0;       // Poisson
  Range radius{1.8, 2.6};
  double max_elongation = 1.25;
  Range contrast{0.30, 0.50};
};

struct ReferenceModel {
  bool enabled = true;
  Vec3 semi_axes{3, 5, 7};
  double overlap = 1.0;          // voxels of the structure lying inside the ROI (along -x)
  double intensity = 1.0;
};

struct RescanModel {
  double max_translation = 1.0;  // voxels per axis
  double max_rotation = 0.05;    // radians per axis
};

struct PhantomConfig {
  Dims dims{64, 48, 32};
  Spacing spacing{0.5f, 0.5f, 0.5f};
  Vec3 roi_center{31.5, 23.5, 15.5};
  Vec3 roi_semi_axes{16, 14, 13};
  double roi_intensity = 0.30;
  double tissue_intensity = 0.40;
  CountModel count;
  AgeModel age;
  LesionModel lesion;
  DistractorModel distractor;
  ReferenceModel reference;
  RescanModel rescan;
  double texture_amplitude = 0.03;
  double texture_sigma = 2.0;
  double noise_sd = 0.02;
  double min_gap = 0.5;          // free voxels between soft object edges
  int placement_retries = 2000;  // per object

  void validate() const {
    auto check = [](bool ok, const std::string& what) {
      if (!ok) throw ConfigError("phantom config: " + what);
    };
    auto range = [&](const Range& r, const std::string& name, bool positive) {
      check(std::isfinite(r.min) && std::isfinite(r.max) && r.min <= r.max, name + " needs min <= max");
      if (positive) check(r.min > 0, name + " must be positive");
    };
    check(dims.size() > 0, "dims must be positive");
    check(spacing.x > 0 && spacing.y > 0 && spacing.z > 0, "spacing must be positive");
    check(count.zero_inflation >= 0 && count.zero_inflation < 1, "zero_inflation must lie in [0,1)");
    check(count.r > 0, "count.r must be positive");
    check(count.p > 0 && count.p < 1, "count.p must lie in (0,1)");
    check(!count.fixed || *count.fixed >= 0, "fixed count must be non-negative");
    for (double a : roi_semi_axes) check(a > 0, "ROI semi-axes must be positive");
    range(lesion.radius, "lesion.radius", true);
    range(lesion.length, "lesion.length", true);
    range(lesion.contrast, "lesion.contrast", true);
    check(lesion.length.min >= 2 * lesion.radius.max, "lesion.length must cover both caps");
    check(lesion.max_tilt >= 0 && lesion.max_tilt < std::numbers::pi / 2, "lesion.max_tilt out of range");
    check(distractor.mean_count >= 0, "distractor.mean_count must be non-negative");
    range(distractor.radius, "distractor.radius", true);
    range(distractor.contrast, "distractor.contrast", true);
    check(distractor.max_elongation >= 1, "distractor.max_elongation must be >= 1");
    check(texture_amplitude >= 0 && noise_sd >= 0 && texture_sigma > 0, "noise parameters out of range");
    check(min_gap >= 0 && placement_retries > 0, "placement parameters out of range");
    check(rescan.max_translation >= 0 && rescan.max_rotation >= 0 && rescan.max_rotation < std::numbers::pi,
          "rescan perturbation out of range");
    if (age.enabled) {
      check(age.min_age <= age.max_age && age.rate_ratio_per_decade > 0, "age model out of range");
    }
  }
};

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

namespace detail {

template <class V>
void read_opt(const nlohmann::json& j, const char* key, V& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const Range& r) { j = nlohmann::json::array({r.min, r.max}); }
inline void from_json(const nlohmann::json& j, Range& r) {
  if (!j.is_array() || j.size() != 2) throw ConfigError("range must be a [min, max] pair");
  r.min = j[0].get<double>();
  r.max = j[1].get<double>();
}

inline nlohmann::json to_json(const PhantomConfig& c) {
  nlohmann::json j;
  j["dims"] = {c.dims.nx, c.dims.ny, c.dims.nz};
  j["spacing"] = {c.spacing.x, c.spacing.y, c.spacing.z};
  j["roi_center"] = c.roi_center;
  j["roi_semi_axes"] = c.roi_semi_axes;
  j["roi_intensity"] = c.roi_intensity;
  j["tissue_intensity"] = c.tissue_intensity;
  j["count"] = {{"zero_inflation", c.count.zero_inflation}, {"r", c.count.r}, {"p", c.count.p}};
  if (c.count.fixed) j["count"]["fixed"] = *c.count.fixed;
  j["age"] = {{"enabled", c.age.enabled},
              {"min_age", c.age.min_age},
              {"max_age", c.age.max_age},
              {"reference_age", c.age.reference_age},
              {"rate_ratio_per_decade", c.age.rate_ratio_per_decade}};
  j["lesion"] = {{"radius", c.lesion.radius},
                 {"length", c.lesion.length},
                 {"max_tilt", c.lesion.max_tilt},
                 {"contrast", c.lesion.contrast}};
  j["distractor"] = {{"mean_count", c.distractor.mean_count},
                     {"radius", c.distractor.radius},
                     {"max_elongation", c.distractor.max_elongation},
                     {"contrast", c.distractor.contrast}};
  j["reference"] = {{"enabled", c.reference.enabled},
                    {"semi_axes", c.reference.semi_axes},
                    {"overlap", c.reference.overlap},
                    {"intensity", c.reference.intensity}};
  j["rescan"] = {{"max_translation", c.rescan.max_translation}, {"max_rotation", c.rescan.max_rotation}};
  j["texture_amplitude"] = c.texture_amplitude;
  j["texture_sigma"] = c.texture_sigma;
  j["noise_sd"] = c.noise_sd;
  j["min_gap"] = c.min_gap;
  j["placement_retries"] = c.placement_retries;
  return j;
}

// Missing keys keep their defaults.
inline PhantomConfig phantom_config_from_json(const nlohmann::json& j) {
  using detail::read_opt;
  PhantomConfig c;
  try {
    if (j.contains("dims")) {
      const auto d = j.at("dims").get<std::array<std::size_t, 3>>();
      c.dims = {d[0], d[1], d[2]};
    }
    if (j.contains("spacing")) {
      const auto s = j.at("spacing").get<std::array<float, 3>>();
      c.spacing = {s[0], s[1], s[2]};
    }
    read_opt(j, "roi_center", c.roi_center);
    read_opt(j, "roi_semi_axes", c.roi_semi_axes);
    read_opt(j, "roi_intensity", c.roi_intensity);
    read_opt(j, "tissue_intensity", c.tissue_intensity);
    if (j.contains("count")) {
      const auto& k = j.at("count");
      read_opt(k, "zero_inflation", c.count.zero_inflation);
      read_opt(k, "r", c.count.r);
      read_opt(k, "p", c.count.p);
      if (k.contains("fixed") && !k.at("fixed").is_null()) c.count.fixed = k.at("fixed").get<int>();
    }
    if (j.contains("age")) {
      const auto& a = j.at("age");
      read_opt(a, "enabled", c.age.enabled);
      read_opt(a, "min_age", c.age.min_age);
      read_opt(a, "max_age", c.age.max_age);
      read_opt(a, "reference_age", c.age.reference_age);
      read_opt(a, "rate_ratio_per_decade", c.age.rate_ratio_per_decade);
    }
    if (j.contains("lesion")) {
      const auto& l = j.at("lesion");
      read_opt(l, "radius", c.lesion.radius);
      read_opt(l, "length", c.lesion.length);
      read_opt(l, "max_tilt", c.lesion.max_tilt);
      read_opt(l, "contrast", c.lesion.contrast);
    }
    if (j.contains("distractor")) {
      const auto& d = j.at("distractor");
      read_opt(d, "mean_count", c.distractor.mean_count);
      read_opt(d, "radius", c.distractor.radius);
      read_opt(d, "max_elongation", c.distractor.max_elongation);
      read_opt(d, "contrast", c.distractor.contrast);
    }
    if (j.contains("reference")) {
      const auto& r = j.at("reference");
      read_opt(r, "enabled", c.reference.enabled);
      read_opt(r, "semi_axes", c.reference.semi_axes);
      read_opt(r, "overlap", c.reference.overlap);
      read_opt(r, "intensity", c.reference.intensity);
    }
    if (j.contains("rescan")) {
      read_opt(j.at("rescan"), "max_translation", c.rescan.max_translation);
      read_opt(j.at("rescan"), "max_rotation", c.rescan.max_rotation);
    }
    read_opt(j, "texture_amplitude", c.texture_amplitude);
    read_opt(j, "texture_sigma", c.texture_sigma);
    read_opt(j, "noise_sd", c.noise_sd);
    read_opt(j, "min_gap", c.min_gap);
    read_opt(j, "placement_retries", c.placement_retries);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("phantom config: ") + e.what());
  }
  c.validate();
  return c;
}

inline std::uint64_t config_hash(const PhantomConfig& c) { return fnv1a64(to_json(c).dump()); }

// ---------------------------------------------------------------------------
// Scan model
// ---------------------------------------------------------------------------

struct Lesion {
  Index3 center;   // annotation voxel; the capsule axis passes through it
  Vec3 axis;       // unit vector
  double radius = 0, length = 0, contrast = 0;
};

struct Distractor {
  Vec3 center;
  Vec3 semi_axes;
  double contrast = 0;
};

struct ScoredScan {
  Volume volume;
  MaskVolume roi_mask;
  int score = 0;
  std::vector<Index3> annotations;
  std::uint64_t seed = 0;
  std::optional<double> age;
  std::vector<Lesion> lesions;
  std::vector<Distractor> distractors;
};

namespace phantom_detail {

enum Stream : std::uint64_t { kCount = 1, kAge, kLesions, kDistractors, kTexture, kNoise, kRescanNoise, kRescanPose };

inline Rng stream(std::uint64_t seed, Stream s) { return Rng(derive_seed(seed, s), 0); }

inline double distance_to_segment(const Vec3& p, const Vec3& a, const Vec3& b) {
  Vec3 ab{b[0] - a[0], b[1] - a[1], b[2] - a[2]}, ap{p[0] - a[0], p[1] - a[1], p[2] - a[2]};
  const double len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
  double t = len2 > 0 ? (ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  double d2 = 0;
  for (int i = 0; i < 3; ++i) {
    const double e = ap[i] - t * ab[i];
    d2 += e * e;
  }
  return std::sqrt(d2);
}

// Signed distance estimate from an axis-aligned ellipsoid surface (exact for spheres).
inline double ellipsoid_distance(const Vec3& p, const Vec3& c, const Vec3& semi) {
  double rho2 = 0;
  for (int i = 0; i < 3; ++i) rho2 += (p[i] - c[i]) * (p[i] - c[i]) / (semi[i] * semi[i]);
  return (std::sqrt(rho2) - 1.0) * std::min({semi[0], semi[1], semi[2]});
}

// Soft-edged object: value 1 deep inside, falling linearly to 0 half a voxel outside.
inline double profile(double distance) { return std::clamp(0.5 - distance, 0.0, 1.0); }

struct Box {
  std::int64_t lo[3], hi[3];
};

inline Box clamp_box(Dims d, const Vec3& lo, const Vec3& hi) {
  Box b;
  for (int i = 0; i < 3; ++i) {
    b.lo[i] = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(lo[i])));
    b.hi[i] = std::min<std::int64_t>(static_cast<std::int64_t>(d[i]) - 1, static_cast<std::int64_t>(std::ceil(hi[i])));
  }
  return b;
}

template <class F>
void for_each_voxel(const Box& b, F&& f) {
  for (std::int64_t z = b.lo[2]; z <= b.hi[2]; ++z)
    for (std::int64_t y = b.lo[1]; y <= b.hi[1]; ++y)
      for (std::int64_t x = b.lo[0]; x <= b.hi[0]; ++x) f(x, y, z);
}

// Surface distance of an object, with its bounding box enlarged by `margin`.
struct Footprint {
  std::function<double(const Vec3&)> distance;
  Vec3 lo, hi;
};

inline Footprint lesion_shape(const Lesion& l) {
  const Vec3 c{static_cast<double>(l.center.x), static_cast<double>(l.center.y), static_cast<double>(l.center.z)};
  const double half = l.length / 2 - l.radius;
  const Vec3 a{c[0] - half * l.axis[0], c[1] - half * l.axis[1], c[2] - half * l.axis[2]};
  const Vec3 b{c[0] + half * l.axis[0], c[1] + half * l.axis[1], c[2] + half * l.axis[2]};
  const double r = l.radius;
  Footprint s{[a, b, r](const Vec3& p) { return distance_to_segment(p, a, b) - r; }, {}, {}};
  for (int i = 0; i < 3; ++i) {
    s.lo[i] = std::min(a[i], b[i]) - r;
    s.hi[i] = std::max(a[i], b[i]) + r;
  }
  return s;
}

inline Footprint ellipsoid_shape(const Vec3& c, const Vec3& semi) {
  Footprint s{[c, semi](const Vec3& p) { return ellipsoid_distance(p, c, semi); }, {}, {}};
  for (int i = 0; i < 3; ++i) {
    s.lo[i] = c[i] - semi[i];
    s.hi[i] = c[i] + semi[i];
  }
  return s;
}

// Occupancy bookkeeping for non-overlapping placement. A voxel is part of an
// object's footprint when its distance to the surface is below 0.5 (the soft
// edge); placed objects additionally claim a `gap` collar.
class Occupancy {
 public:
  Occupancy(const MaskVolume& roi, double gap) : roi_(roi), claimed_(roi.size(), 0), gap_(gap) {}

  bool fits(const Footprint& s) const {
    bool ok = true;
    const Box b = clamp_box(roi_.dims(), add(s.lo, -1.0), add(s.hi, 1.0));
    for_each_voxel(b, [&](std::int64_t x, std::int64_t y, std::int64_t z) {
      if (!ok) return;
      if (s.distance({double(x), double(y), double(z)}) >= 0.5) return;
      const std::size_t i = roi_.index(x, y, z);
      if (roi_[i] != 1.0f || claimed_[i]) ok = false;
    });
    // Footprint must not touch the grid border either.
    for (int i = 0; i < 3 && ok; ++i) {
      if (s.lo[i] - 0.5 < 0 || s.hi[i] + 0.5 > static_cast<double>(roi_.dims()[i]) - 1) ok = false;
    }
    return ok;
  }

  void claim(const Footprint& s) {
    const Box b = clamp_box(roi_.dims(), add(s.lo, -1.0 - gap_), add(s.hi, 1.0 + gap_));
    for_each_voxel(b, [&](std::int64_t x, std::int64_t y, std::int64_t z) {
      if (s.distance({double(x), double(y), double(z)}) < 0.5 + gap_) claimed_[roi_.index(x, y, z)] = 1;
    });
  }

 private:
  static Vec3 add(Vec3 v, double d) {
    for (auto& x : v) x += d;
    return v;
  }

  const MaskVolume& roi_;
  std::vector<std::uint8_t> claimed_;
  double gap_;
};

inline MaskVolume ellipsoid_mask(Dims d, Spacing sp, const Vec3& c, const Vec3& semi) {
  MaskVolume m(d, sp);
  for (std::size_t z = 0; z < d.nz; ++z)
    for (std::size_t y = 0; y < d.ny; ++y)
      for (std::size_t x = 0; x < d.nx; ++x) {
        const double u = (x - c[0]) / semi[0], v = (y - c[1]) / semi[1], w = (z - c[2]) / semi[2];
        m(x, y, z) = u * u + v * v + w * w <= 1.0 ? 1.0f : 0.0f;
      }
  return m;
}

inline Vec3 reference_center(const PhantomConfig& cfg) {
  return {cfg.roi_center[0] - cfg.roi_semi_axes[0] - cfg.reference.semi_axes[0] + cfg.reference.overlap,
          cfg.roi_center[1], cfg.roi_center[2]};
}

struct Layout {
  int score = 0;
  std::optional<double> age;
  std::vector<Lesion> lesions;
  std::vector<Distractor> distractors;
};

inline int draw_count(const PhantomConfig& cfg, std::uint64_t seed, std::optional<double>& age) {
  Rng age_rng = stream(seed, kAge);
  double p = cfg.count.p;
  if (cfg.age.enabled) {
    age = age_rng.uniform(cfg.age.min_age, cfg.age.max_age);
    const double mean = cfg.count.nb_mean() *
                        std::pow(cfg.age.rate_ratio_per_decade, (*age - cfg.age.reference_age) / 10.0);
    p = cfg.count.r / (cfg.count.r + mean);
  }
  if (cfg.count.fixed) return *cfg.count.fixed;
  Rng rng = stream(seed, kCount);
  if (rng.bernoulli(cfg.count.zero_inflation)) return 0;
  return static_cast<int>(rng.negative_binomial(cfg.count.r, p));
}

inline Layout place_objects(const PhantomConfig& cfg, const MaskVolume& roi, std::uint64_t seed) {
  Layout lay;
  lay.score = draw_count(cfg, seed, lay.age);
  Occupancy occ(roi, cfg.min_gap);
  if (cfg.reference.enabled) {
    // Claimed without a fit test: it deliberately straddles the ROI border.
    occ.claim(ellipsoid_shape(reference_center(cfg), cfg.reference.semi_axes));
  }

  const auto& c = cfg.roi_center;
  const auto& a = cfg.roi_semi_axes;
  Rng rng = stream(seed, kLesions);
  for (int k = 0; k < lay.score; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < cfg.placement_retries && !placed; ++attempt) {
      Lesion l;
      l.radius = cfg.lesion.radius.sample(rng);
      l.length = cfg.lesion.length.sample(rng);
      l.contrast = cfg.lesion.contrast.sample(rng);
      const double tilt = rng.uniform(0.0, cfg.lesion.max_tilt);
      const double phi = rng.uniform(0.0, 2 * std::numbers::pi);
      l.axis = {std::sin(tilt) * std::cos(phi), std::sin(tilt) * std::sin(phi), std::cos(tilt)};
      for (int i = 0; i < 3; ++i) {
        const auto lo = static_cast<std::int64_t>(std::ceil(c[i] - a[i]));
        const auto hi = static_cast<std::int64_t>(std::floor(c[i] + a[i]));
        const std::int64_t v = lo + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
        (i == 0 ? l.center.x : i == 1 ? l.center.y : l.center.z) = v;
      }
      const Footprint s = lesion_shape(l);
      if (occ.fits(s)) {
        occ.claim(s);
        lay.lesions.push_back(l);
        placed = true;
      }
    }
    if (!placed) {
      throw PlacementError("phantom: could not place lesion " + std::to_string(k + 1) + " of " +
                           std::to_string(lay.score) + " after " + std::to_string(cfg.placement_retries) +
                           " attempts (seed " + std::to_string(seed) + ")");
    }
  }

  Rng drng = stream(seed, kDistractors);
  const auto n_distractors = static_cast<int>(drng.poisson(cfg.distractor.mean_count));
  for (int k = 0; k < n_distractors; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < cfg.placement_retries && !placed; ++attempt) {
      Distractor d;
      const double r = cfg.distractor.radius.sample(drng);
      for (int i = 0; i < 3; ++i) {
        d.semi_axes[i] = r * drng.uniform(1.0, cfg.distractor.max_elongation);
        d.center[i] = drng.uniform(c[i] - a[i], c[i] + a[i]);
      }
      d.contrast = cfg.distractor.contrast.sample(drng);
      const Footprint s = ellipsoid_shape(d.center, d.semi_axes);
      if (occ.fits(s)) {
        occ.claim(s);
        lay.distractors.push_back(d);
        placed = true;
      }
    }
    if (!placed) throw PlacementError("phantom: could not place distractor " + std::to_string(k + 1));
  }
  return lay;
}

template <class F>
void paint(Volume& v, const Footprint& s, F&& value_at) {
  const Box box = clamp_box(v.dims(), {s.lo[0] - 1, s.lo[1] - 1, s.lo[2] - 1}, {s.hi[0] + 1, s.hi[1] + 1, s.hi[2] + 1});
  for_each_voxel(box, [&](std::int64_t x, std::int64_t y, std::int64_t z) {
    const double w = profile(s.distance({double(x), double(y), double(z)}));
    if (w > 0) value_at(v(x, y, z), w);
  });
}

// Pose of a rescan: forward map p -> R (p - c) + c + t about the grid centre.
struct Pose {
  Mat3 r{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  Vec3 c{0, 0, 0}, t{0, 0, 0};

  Vec3 forward(const Vec3& p) const {
    const Vec3 q{p[0] - c[0], p[1] - c[1], p[2] - c[2]};
    Vec3 out;
    for (int i = 0; i < 3; ++i) out[i] = r[i][0] * q[0] + r[i][1] * q[1] + r[i][2] * q[2] + c[i] + t[i];
    return out;
  }
  Vec3 inverse(const Vec3& p) const {
    const Vec3 q{p[0] - c[0] - t[0], p[1] - c[1] - t[1], p[2] - c[2] - t[2]};
    Vec3 out;
    for (int i = 0; i < 3; ++i) out[i] = r[0][i] * q[0] + r[1][i] * q[1] + r[2][i] * q[2] + c[i];
    return out;
  }
};

// The same object seen in the moved frame: distances are evaluated at the
// pre-image, the box is the hull of the moved corners.
inline Footprint moved(const Footprint& s, const Pose& pose) {
  Footprint m{[d = s.distance, pose](const Vec3& p) { return d(pose.inverse(p)); }, {}, {}};
  m.lo = {1e300, 1e300, 1e300};
  m.hi = {-1e300, -1e300, -1e300};
  for (int corner = 0; corner < 8; ++corner) {
    const Vec3 p{corner & 1 ? s.hi[0] : s.lo[0], corner & 2 ? s.hi[1] : s.lo[1], corner & 4 ? s.hi[2] : s.lo[2]};
    const Vec3 q = pose.forward(p);
    for (int i = 0; i < 3; ++i) {
      m.lo[i] = std::min(m.lo[i], q[i]);
      m.hi[i] = std::max(m.hi[i], q[i]);
    }
  }
  return m;
}

// Tissue/ROI blend plus texture: smooth fields only.
inline Volume render_background(const PhantomConfig& cfg, const MaskVolume& roi, std::uint64_t seed) {
  const Dims d = cfg.dims;
  Volume v(d, cfg.spacing);
  const MaskVolume blend = gaussian_smooth(roi, 1.0);
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = static_cast<float>(cfg.tissue_intensity + (cfg.roi_intensity - cfg.tissue_intensity) * blend[i]);
  }
  if (cfg.texture_amplitude > 0) {
    Rng rng = stream(seed, kTexture);
    Volume white(d, cfg.spacing);
    for (auto& x : white.data()) x = static_cast<float>(rng.normal());
    const Volume smooth = gaussian_smooth(white, cfg.texture_sigma);
    double kn = 0;
    for (double k : gaussian_kernel(cfg.texture_sigma)) kn += k * k;
    const double gain = cfg.texture_amplitude / std::pow(kn, 1.5);  // smoothed unit noise has sd (sum k^2)^1.5
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += static_cast<float>(gain * smooth[i]);
  }
  return v;
}

// Reference structure, lesions and distractors, painted analytically so that
// a moved copy keeps sharp edges.
inline void paint_objects(Volume& v, const PhantomConfig& cfg, const Layout& lay, const std::optional<Pose>& pose) {
  auto place = [&](const Footprint& s) { return pose ? moved(s, *pose) : s; };
  if (cfg.reference.enabled) {
    const float level = static_cast<float>(cfg.reference.intensity);
    paint(v, place(ellipsoid_shape(reference_center(cfg), cfg.reference.semi_axes)),
          [level](float& x, double w) { x = static_cast<float>((1 - w) * x + w * level); });
  }
  for (const auto& l : lay.lesions) {
    const double k = l.contrast;
    paint(v, place(lesion_shape(l)), [k](float& x, double w) { x += static_cast<float>(k * w); });
  }
  for (const auto& dd : lay.distractors) {
    const double k = dd.contrast;
    paint(v, place(ellipsoid_shape(dd.center, dd.semi_axes)),
          [k](float& x, double w) { x += static_cast<float>(k * w); });
  }
}

// Everything but the sensor noise.
inline Volume render_clean(const PhantomConfig& cfg, const MaskVolume& roi, const Layout& lay, std::uint64_t seed) {
  Volume v = render_background(cfg, roi, seed);
  paint_objects(v, cfg, lay, std::nullopt);
  return v;
}

inline void add_noise(Volume& v, double sd, Rng rng) {
  if (sd <= 0) return;
  for (auto& x : v.data()) x += static_cast<float>(sd * rng.normal());
}

inline std::vector<Index3> centers(const std::vector<Lesion>& ls) {
  std::vector<Index3> out;
  out.reserve(ls.size());
  for (const auto& l : ls) out.push_back(l.center);
  return out;
}

}  // namespace phantom_detail

inline MaskVolume roi_mask(const PhantomConfig& cfg) {
  return phantom_detail::ellipsoid_mask(cfg.dims, cfg.spacing, cfg.roi_center, cfg.roi_semi_axes);
}

inline ScoredScan generate_scan(const PhantomConfig& cfg, std::uint64_t seed) {
  using namespace phantom_detail;
  cfg.validate();
  ScoredScan s;
  s.seed = seed;
  s.roi_mask = roi_mask(cfg);
  Layout lay = place_objects(cfg, s.roi_mask, seed);
  s.volume = render_clean(cfg, s.roi_mask, lay, seed);
  add_noise(s.volume, cfg.noise_sd, stream(seed, kNoise));
  s.score = lay.score;
  s.age = lay.age;
  s.annotations = centers(lay.lesions);
  s.lesions = std::move(lay.lesions);
  s.distractors = std::move(lay.distractors);
  return s;
}

// Second acquisition: same anatomy under a small random rigid pose, then
// fresh sensor noise. Smooth background fields are resampled; objects are
// re-rendered at their moved positions. The ROI is moved with them.
inline std::pair<ScoredScan, ScoredScan> generate_rescan_pair(const PhantomConfig& cfg, std::uint64_t seed) {
  using namespace phantom_detail;
  ScoredScan first = generate_scan(cfg, seed);
  const Layout lay{first.score, first.age, first.lesions, first.distractors};

  Rng rng = stream(seed, kRescanPose);
  RigidTransform tf;
  for (int i = 0; i < 3; ++i) tf.rotation[i] = rng.uniform(-1.0, 1.0) * cfg.rescan.max_rotation;
  for (int i = 0; i < 3; ++i) tf.translation[i] = rng.uniform(-1.0, 1.0) * cfg.rescan.max_translation;
  const Dims d = cfg.dims;
  Pose pose;
  pose.r = rotation_matrix(tf.rotation);
  pose.c = {(d.nx - 1) / 2.0, (d.ny - 1) / 2.0, (d.nz - 1) / 2.0};
  pose.t = {tf.translation[0], tf.translation[1], tf.translation[2]};

  ScoredScan second = first;
  second.volume = rigid_resample(render_background(cfg, first.roi_mask, seed), tf);
  paint_objects(second.volume, cfg, lay, pose);
  add_noise(second.volume, cfg.noise_sd, stream(seed, kRescanNoise));
  MaskVolume roi = rigid_resample(first.roi_mask, tf);
  for (auto& m : roi.data()) m = m >= 0.5f ? 1.0f : 0.0f;
  second.roi_mask = std::move(roi);

  for (std::size_t k = 0; k < second.annotations.size(); ++k) {
    const Index3 p = first.annotations[k];
    const Vec3 q = pose.forward({double(p.x), double(p.y), double(p.z)});
    std::array<std::int64_t, 3> out{};
    for (int i = 0; i < 3; ++i) {
      out[i] = std::clamp<std::int64_t>(std::llround(q[i]), 0, static_cast<std::int64_t>(d[i]) - 1);
    }
    second.annotations[k] = {out[0], out[1], out[2]};
    auto& l = second.lesions[k];
    l.center = second.annotations[k];
    const Vec3 a = l.axis;
    for (int i = 0; i < 3; ++i) l.axis[i] = pose.r[i][0] * a[0] + pose.r[i][1] * a[1] + pose.r[i][2] * a[2];
  }
  for (auto& dd : second.distractors) dd.center = pose.forward(dd.center);
  return {std::move(first), std::move(second)};
}

struct RaterNoise {
  double keep_probability = 1.0;  // binomial thinning
  double add_rate = 0.0;          // Poisson additions
};

inline std::vector<int> simulate_second_rater(const std::vector<int>& scores, std::uint64_t seed,
                                              const RaterNoise& noise) {
  if (!(noise.keep_probability >= 0 && noise.keep_probability <= 1) || !(noise.add_rate >= 0)) {
    throw ConfigError("rater noise parameters out of range");
  }
  Rng rng(derive_seed(seed, 0x7261746572ULL), 0);
  std::vector<int> out;
  out.reserve(scores.size());
  for (int s : scores) {
    if (s < 0) throw ValidationError("scores must be non-negative");
    const auto kept = rng.binomial(static_cast<std::uint64_t>(s), noise.keep_probability);
    const auto added = noise.add_rate > 0 ? rng.poisson(noise.add_rate) : 0;
    out.push_back(static_cast<int>(kept + added));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence: <stem>.svol, <stem>_roi.svol, <stem>.json
// ---------------------------------------------------------------------------

inline nlohmann::json scan_manifest(const ScoredScan& s, const PhantomConfig& cfg) {
  nlohmann::json ann = nlohmann::json::array();
  for (const auto& a : s.annotations) ann.push_back({a.x, a.y, a.z});
  nlohmann::json j{{"seed", s.seed},
                   {"score", s.score},
                   {"annotations", ann},
                   {"cfg_hash", hex64(config_hash(cfg))},
                   {"generator_version", kPhantomGeneratorVersion},
                   {"rng", kRngAlgorithm}};
  if (s.age) j["age"] = *s.age;
  return j;
}

inline void write_scan(const std::filesystem::path& dir, const std::string& stem, const ScoredScan& s,
                       const PhantomConfig& cfg) {
  write_volume(dir / (stem + ".svol"), s.volume);
  write_mask(dir / (stem + "_roi.svol"), s.roi_mask);
  write_text(dir / (stem + ".json"), scan_manifest(s, cfg).dump(2) + "\n");
}

inline ScoredScan read_scan(const std::filesystem::path& dir, const std::string& stem) {
  ScoredScan s;
  s.volume = read_volume(dir / (stem + ".svol"));
  s.roi_mask = read_mask(dir / (stem + "_roi.svol"));
  const Bytes raw = read_file(dir / (stem + ".json"));
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(raw.begin(), raw.end());
    s.seed = j.at("seed").get<std::uint64_t>();
    s.score = j.at("score").get<int>();
    for (const auto& a : j.at("annotations")) s.annotations.push_back({a[0].get<std::int64_t>(), a[1].get<std::int64_t>(), a[2].get<std::int64_t>()});
    if (j.contains("age")) s.age = j.at("age").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("scan manifest " + stem + ": " + e.what());
  }
  if (s.score < 0) throw ValidationError("scan manifest " + stem + ": negative score");
  if (!s.annotations.empty() && static_cast<int>(s.annotations.size()) != s.score) {
    throw ValidationError("scan manifest " + stem + ": annotation count differs from score");
  }
  if (!(s.volume.dims() == s.roi_mask.dims())) throw ShapeError("scan " + stem + ": volume and ROI dims differ");
  return s;
}

}  // namespace epvsq
