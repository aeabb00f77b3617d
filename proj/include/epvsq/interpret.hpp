#pragma once

// Input-gradient saliency and lesion occlusion experiments. Everything here
// operates on the preprocessed crop the network sees; annotation coordinates
// must first be moved into crop space with to_crop().

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "epvsq/error.hpp"
#include "epvsq/regnet.hpp"
#include "epvsq/rng.hpp"
#include "epvsq/volgrid.hpp"

namespace epvsq::interpret {

inline std::vector<Index3> to_crop(const std::vector<Index3>& centers, const Index3& origin) {
  std::vector<Index3> out;
  out.reserve(centers.size());
  for (const auto& c : centers) out.push_back(c - origin);
  return out;
}

// ---------------------------------------------------------------------------
// Saliency
// ---------------------------------------------------------------------------

// |g| divided by its maximum; all-zero input gives an all-zero map.
inline Volume rescale_saliency(const Volume& gradient) {
  Volume out(gradient.dims(), gradient.spacing());
  float peak = 0;
  for (std::size_t i = 0; i < gradient.size(); ++i) {
    out[i] = std::abs(gradient[i]);
    peak = std::max(peak, out[i]);
  }
  if (peak > 0) {
    for (auto& v : out.data()) v /= peak;
  }
  return out;
}

template <class T>
Volume saliency(const BasicModel<T>& m, const Volume& image) {
  return rescale_saliency(epvsq::input_gradient(m, image));
}

struct SaliencyContrast {
  double lesion_median = 0;     // median saliency at annotation centres
  double background_p90 = 0;    // 90th percentile over ROI voxels away from lesions
  bool passes() const { return lesion_median > background_p90; }
};

// Background = voxels with smooth mask > 0.5 outside an exclusion box of
// `exclusion` half-widths around every annotation.
inline SaliencyContrast saliency_contrast(const Volume& map, const MaskVolume& smooth_mask,
                                          const std::vector<Index3>& centers, Index3 exclusion = {2, 2, 6}) {
  if (!(map.dims() == smooth_mask.dims())) throw ShapeError("saliency_contrast: map and mask dims differ");
  if (centers.empty()) throw UsageError("saliency_contrast: no annotations");
  std::vector<std::uint8_t> near(map.size(), 0);
  std::vector<double> at;
  for (const auto& c : centers) {
    if (!map.contains(c)) throw ValidationError("saliency_contrast: annotation outside the map");
    at.push_back(map.at(c));
    for (std::int64_t z = c.z - exclusion.z; z <= c.z + exclusion.z; ++z) {
      for (std::int64_t y = c.y - exclusion.y; y <= c.y + exclusion.y; ++y) {
        for (std::int64_t x = c.x - exclusion.x; x <= c.x + exclusion.x; ++x) {
          if (map.contains(x, y, z)) near[map.index(x, y, z)] = 1;
        }
      }
    }
  }
  std::vector<double> bg;
  for (std::size_t i = 0; i < map.size(); ++i) {
    if (smooth_mask[i] > 0.5f && !near[i]) bg.push_back(map[i]);
  }
  if (bg.empty()) throw DegenerateError("saliency_contrast: no background voxels");
  auto quantile = [](std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
  };
  return {quantile(at, 0.5), quantile(std::move(bg), 0.9)};
}

// ---------------------------------------------------------------------------
// Occlusion
// ---------------------------------------------------------------------------

enum class OcclusionOrder { Contrast, Annotation, Random };

inline std::string_view to_string(OcclusionOrder o) {
  switch (o) {
    case OcclusionOrder::Contrast: return "contrast";
    case OcclusionOrder::Annotation: return "annotation";
    case OcclusionOrder::Random: return "random";
  }
  return "?";
}

inline OcclusionOrder parse_occlusion_order(std::string_view s) {
  if (s == "contrast") return OcclusionOrder::Contrast;
  if (s == "annotation") return OcclusionOrder::Annotation;
  if (s == "random") return OcclusionOrder::Random;
  throw ConfigError("unknown occlusion order '" + std::string(s) + "'");
}

struct OcclusionConfig {
  std::array<double, 3> block_mm{1.5, 1.5, 4.8};  // x, y, z
  OcclusionOrder order = OcclusionOrder::Contrast;
  int max_lesions = 6;
  int random_min_blocks = 1;
  int random_max_blocks = 5;
  int random_repetitions = 100;
  bool random_avoid_annotations = true;  // random blocks never cover an annotation centre
  std::uint64_t seed = 0;

  void validate() const {
    for (double v : block_mm) {
      if (!(v > 0)) throw ConfigError("occlusion: block size must be positive");
    }
    if (max_lesions < 0) throw ConfigError("occlusion: max_lesions must be >= 0");
    if (random_min_blocks < 1 || random_max_blocks < random_min_blocks) {
      throw ConfigError("occlusion: random block range must satisfy 1 <= min <= max");
    }
    if (random_repetitions < 1) throw ConfigError("occlusion: random_repetitions must be >= 1");
  }
};

// ceil(mm / spacing) per axis, at least one voxel.
inline Index3 block_extent(const OcclusionConfig& cfg, Spacing sp) {
  std::array<std::int64_t, 3> e{};
  for (int a = 0; a < 3; ++a) {
    const double v = cfg.block_mm[static_cast<std::size_t>(a)] / sp[a];
    e[static_cast<std::size_t>(a)] = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(v - 1e-9)));
  }
  return {e[0], e[1], e[2]};
}

// Mean image intensity over the smooth-mask support above 0.5.
inline double roi_mean(const Volume& image, const MaskVolume& smooth_mask) {
  if (!(image.dims() == smooth_mask.dims())) throw ShapeError("roi_mean: image and mask dims differ");
  double acc = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < image.size(); ++i) {
    if (smooth_mask[i] > 0.5f) {
      acc += image[i];
      ++n;
    }
  }
  if (n == 0) throw DegenerateError("roi_mean: mask support is empty");
  return acc / static_cast<double>(n);
}

// Fills an axis-aligned block of `extent` voxels around each centre. For an
// even extent the block reaches one voxel further on the positive side.
inline Volume occlude(const Volume& s, const std::vector<Index3>& centers, Index3 extent, float fill) {
  Volume out = s;
  for (const auto& c : centers) {
    if (!s.contains(c)) throw ValidationError("occlude: centre outside the volume");
    const Index3 lo{c.x - (extent.x - 1) / 2, c.y - (extent.y - 1) / 2, c.z - (extent.z - 1) / 2};
    for (std::int64_t z = lo.z; z < lo.z + extent.z; ++z) {
      for (std::int64_t y = lo.y; y < lo.y + extent.y; ++y) {
        for (std::int64_t x = lo.x; x < lo.x + extent.x; ++x) {
          if (out.contains(x, y, z)) out(static_cast<std::size_t>(x), static_cast<std::size_t>(y), static_cast<std::size_t>(z)) = fill;
        }
      }
    }
  }
  return out;
}

inline Volume occlude(const Volume& s, const MaskVolume& smooth_mask, const std::vector<Index3>& centers,
                      const OcclusionConfig& cfg) {
  cfg.validate();
  return occlude(s, centers, block_extent(cfg, s.spacing()), static_cast<float>(roi_mean(s, smooth_mask)));
}

// Annotation order for the occlusion curve. Contrast order ranks by the
// image value at the centre minus the ROI mean, highest first; ties keep
// annotation order.
inline std::vector<Index3> order_lesions(const Volume& s, const MaskVolume& smooth_mask,
                                         const std::vector<Index3>& centers, const OcclusionConfig& cfg) {
  std::vector<Index3> out = centers;
  switch (cfg.order) {
    case OcclusionOrder::Annotation:
      break;
    case OcclusionOrder::Contrast: {
      const double mean = roi_mean(s, smooth_mask);
      std::stable_sort(out.begin(), out.end(),
                       [&](const Index3& a, const Index3& b) { return s.at(a) - mean > s.at(b) - mean; });
      break;
    }
    case OcclusionOrder::Random: {
      Rng rng(derive_seed(cfg.seed, 0x0cc1), 0);
      for (std::size_t i = out.size(); i > 1; --i) std::swap(out[i - 1], out[rng.below(i)]);
      break;
    }
  }
  return out;
}

struct CurvePoint {
  int k = 0;
  double score = 0;
};

template <class T>
std::vector<CurvePoint> occlusion_curve(const BasicModel<T>& m, const Volume& s, const MaskVolume& smooth_mask,
                                        const std::vector<Index3>& centers, const OcclusionConfig& cfg) {
  cfg.validate();
  if (centers.empty()) throw UsageError("occlusion_curve: scan has no annotations");
  for (const auto& c : centers) {
    if (!s.contains(c)) throw ValidationError("occlusion_curve: annotation outside the crop");
  }
  const auto ordered = order_lesions(s, smooth_mask, centers, cfg);
  const Index3 extent = block_extent(cfg, s.spacing());
  const auto fill = static_cast<float>(roi_mean(s, smooth_mask));
  const int kmax = std::min<int>(cfg.max_lesions, static_cast<int>(ordered.size()));
  std::vector<CurvePoint> curve{{0, epvsq::score(m, s)}};
  for (int k = 1; k <= kmax; ++k) {
    const std::vector<Index3> first(ordered.begin(), ordered.begin() + k);
    curve.push_back({k, epvsq::score(m, occlude(s, first, extent, fill))});
  }
  return curve;
}

// True when every step is at most `tolerance` above its predecessor.
inline bool non_increasing(const std::vector<CurvePoint>& curve, double tolerance = 0.0) {
  for (std::size_t i = 1; i < curve.size(); ++i) {
    if (curve[i].score > curve[i - 1].score + tolerance) return false;
  }
  return true;
}

struct RandomControlPoint {
  int blocks = 0;
  double mean_score = 0, sd_score = 0;
  double mean_abs_delta = 0;
};

// Occludes 1..N random ROI locations, each count repeated cfg.random_repetitions times.
template <class T>
std::vector<RandomControlPoint> random_occlusion(const BasicModel<T>& m, const Volume& s,
                                                 const MaskVolume& smooth_mask, const std::vector<Index3>& centers,
                                                 const OcclusionConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const Index3 extent = block_extent(cfg, s.spacing());
  const auto fill = static_cast<float>(roi_mean(s, smooth_mask));
  auto covers = [&](const Index3& b, const Index3& c) {
    return c.x >= b.x - (extent.x - 1) / 2 && c.x < b.x - (extent.x - 1) / 2 + extent.x &&
           c.y >= b.y - (extent.y - 1) / 2 && c.y < b.y - (extent.y - 1) / 2 + extent.y &&
           c.z >= b.z - (extent.z - 1) / 2 && c.z < b.z - (extent.z - 1) / 2 + extent.z;
  };
  std::vector<Index3> support;
  const Dims d = s.dims();
  for (std::size_t z = 0; z < d.nz; ++z) {
    for (std::size_t y = 0; y < d.ny; ++y) {
      for (std::size_t x = 0; x < d.nx; ++x) {
        if (smooth_mask(x, y, z) <= 0.5f) continue;
        const Index3 p{static_cast<std::int64_t>(x), static_cast<std::int64_t>(y), static_cast<std::int64_t>(z)};
        if (cfg.random_avoid_annotations &&
            std::any_of(centers.begin(), centers.end(), [&](const Index3& c) { return covers(p, c); })) {
          continue;
        }
        support.push_back(p);
      }
    }
  }
  if (support.empty()) throw DegenerateError("random_occlusion: no admissible locations");
  const double base = epvsq::score(m, s);
  std::vector<RandomControlPoint> out;
  for (int nb = cfg.random_min_blocks; nb <= cfg.random_max_blocks; ++nb) {
    RandomControlPoint pt;
    pt.blocks = nb;
    double sum = 0, sq = 0, dev = 0;
    for (int r = 0; r < cfg.random_repetitions; ++r) {
      Rng rng(derive_seed(seed, (static_cast<std::uint64_t>(nb) << 32) | static_cast<std::uint64_t>(r)), 0);
      std::vector<Index3> blocks;
      for (int b = 0; b < nb; ++b) blocks.push_back(support[rng.below(support.size())]);
      const double sc = epvsq::score(m, occlude(s, blocks, extent, fill));
      sum += sc;
      sq += sc * sc;
      dev += std::abs(sc - base);
    }
    const double n = cfg.random_repetitions;
    pt.mean_score = sum / n;
    pt.sd_score = n > 1 ? std::sqrt(std::max(0.0, (sq - sum * sum / n) / (n - 1))) : 0.0;
    pt.mean_abs_delta = dev / n;
    out.push_back(pt);
  }
  return out;
}

inline nlohmann::json to_json(const OcclusionConfig& c) {
  return {{"block_mm", c.block_mm},
          {"order", to_string(c.order)},
          {"max_lesions", c.max_lesions},
          {"random_min_blocks", c.random_min_blocks},
          {"random_max_blocks", c.random_max_blocks},
          {"random_repetitions", c.random_repetitions},
          {"random_avoid_annotations", c.random_avoid_annotations},
          {"seed", c.seed}};
}

inline OcclusionConfig occlusion_config_from_json(const nlohmann::json& j) {
  OcclusionConfig c;
  try {
    if (j.contains("block_mm")) c.block_mm = j.at("block_mm").get<std::array<double, 3>>();
    if (j.contains("order")) c.order = parse_occlusion_order(j.at("order").get<std::string>());
    if (j.contains("max_lesions")) j.at("max_lesions").get_to(c.max_lesions);
    if (j.contains("random_min_blocks")) j.at("random_min_blocks").get_to(c.random_min_blocks);
    if (j.contains("random_max_blocks")) j.at("random_max_blocks").get_to(c.random_max_blocks);
    if (j.contains("random_repetitions")) j.at("random_repetitions").get_to(c.random_repetitions);
    if (j.contains("random_avoid_annotations")) j.at("random_avoid_annotations").get_to(c.random_avoid_annotations);
    if (j.contains("seed")) j.at("seed").get_to(c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("occlusion config: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace epvsq::interpret
