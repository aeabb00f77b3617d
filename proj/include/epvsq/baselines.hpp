#pragma once

// Conventional quantifiers used as comparison points for the network:
// mean intensity, thresholded volume, connected-component count and a
// bag-of-words regression forest, plus the affine ICC calibration applied to
// their outputs.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "epvsq/bytes.hpp"
#include "epvsq/error.hpp"
#include "epvsq/rng.hpp"
#include "epvsq/stats.hpp"
#include "epvsq/volgrid.hpp"

namespace epvsq::baselines {

// ---------------------------------------------------------------------------
// (a) intensity, (b) volume, (c) components
// ---------------------------------------------------------------------------

inline double baseline_intensity(const Volume& s) {
  if (s.size() == 0) return 0.0;
  double acc = 0;
  for (float v : s.data()) acc += v;
  return acc / static_cast<double>(s.size());
}

inline double baseline_volume(const Volume& s, double threshold) {
  std::size_t n = 0;
  for (float v : s.data()) n += v > threshold;
  return static_cast<double>(n);
}

inline double baseline_components(const Volume& s, double threshold) {
  const Dims d = s.dims();
  std::vector<std::uint8_t> fg(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) fg[i] = s[i] > threshold;
  std::vector<std::size_t> stack;
  std::size_t count = 0;
  const std::size_t sx = 1, sy = d.nx, sz = d.nx * d.ny;
  for (std::size_t seed = 0; seed < fg.size(); ++seed) {
    if (!fg[seed]) continue;
    ++count;
    fg[seed] = 0;
    stack.push_back(seed);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      const std::size_t x = i % d.nx, y = (i / d.nx) % d.ny, z = i / sz;
      auto visit = [&](std::size_t j) {
        if (fg[j]) {
          fg[j] = 0;
          stack.push_back(j);
        }
      };
      if (x > 0) visit(i - sx);
      if (x + 1 < d.nx) visit(i + sx);
      if (y > 0) visit(i - sy);
      if (y + 1 < d.ny) visit(i + sy);
      if (z > 0) visit(i - sz);
      if (z + 1 < d.nz) visit(i + sz);
    }
  }
  return static_cast<double>(count);
}

enum class ThresholdMethod { Volume, Components };

struct ThresholdSearch {
  int levels = 120;
  double min_tail = 0.5;     // quantile levels run from 1 - min_tail ...
  double max_tail = 1e-4;    // ... up to 1 - max_tail, log-spaced in the tail mass
  std::size_t voxel_stride = 7;
};

struct ThresholdFit {
  double threshold = 0;
  double spearman = 0;
};

// Grid search over pooled training-intensity quantiles and their midpoints,
// maximizing Spearman correlation of the thresholded measure against the labels.
inline ThresholdFit tune_threshold(const std::vector<Volume>& images, std::span<const double> labels,
                                   ThresholdMethod method, const ThresholdSearch& search = {}) {
  if (images.size() != labels.size() || images.size() < 3) {
    throw ValidationError("tune_threshold: needs at least 3 labelled images");
  }
  if (search.levels < 1 || search.voxel_stride < 1) throw ConfigError("tune_threshold: invalid search grid");
  std::vector<float> pool;
  for (const auto& im : images) {
    for (std::size_t i = 0; i < im.size(); i += search.voxel_stride) pool.push_back(im[i]);
  }
  std::sort(pool.begin(), pool.end());
  std::vector<double> candidates;
  for (int k = 0; k < search.levels; ++k) {
    const double f = search.levels == 1 ? 0.0 : static_cast<double>(k) / (search.levels - 1);
    const double tail = std::exp(std::log(search.min_tail) + f * (std::log(search.max_tail) - std::log(search.min_tail)));
    const auto idx = static_cast<std::size_t>(std::floor((1 - tail) * static_cast<double>(pool.size() - 1)));
    candidates.push_back(pool[idx]);
  }
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
  // Midpoints let the search land inside gaps of the intensity distribution.
  const std::size_t n_levels = candidates.size();
  for (std::size_t k = 0; k + 1 < n_levels; ++k) candidates.push_back(0.5 * (candidates[k] + candidates[k + 1]));
  std::sort(candidates.begin(), candidates.end());

  ThresholdFit best{candidates.front(), -std::numeric_limits<double>::infinity()};
  std::vector<double> pred(images.size());
  for (double t : candidates) {
    for (std::size_t i = 0; i < images.size(); ++i) {
      pred[i] = method == ThresholdMethod::Volume ? baseline_volume(images[i], t) : baseline_components(images[i], t);
    }
    double rho;
    try {
      rho = stats::spearman(pred, labels);
    } catch (const DegenerateError&) {
      continue;
    }
    if (rho > best.spearman) best = {t, rho};
  }
  if (!std::isfinite(best.spearman)) throw DegenerateError("tune_threshold: every candidate threshold is degenerate");
  return best;
}

// ---------------------------------------------------------------------------
// (d) bag of visual words + regression forest
// ---------------------------------------------------------------------------

struct BowConfig {
  int stride = 4;
  int patch = 16;            // square patch side, split into 4 x 4 cells
  int orientation_bins = 8;
  int dictionary_size = 100; // bin 0 is the null word for gradient-free patches
  int slices = 15;
  int kmeans_iterations = 25;
  std::size_t max_training_descriptors = 5000;  // per slice, subsampled deterministically
  std::uint64_t seed = 0;

  void validate() const {
    if (stride < 1 || patch < 4 || patch % 4 != 0) throw ConfigError("bow: patch must be a positive multiple of 4");
    if (orientation_bins < 1) throw ConfigError("bow: orientation_bins must be >= 1");
    if (dictionary_size < 1) throw ConfigError("bow: dictionary_size must be >= 1");
    if (slices < 1) throw ConfigError("bow: slices must be >= 1");
    if (kmeans_iterations < 0) throw ConfigError("bow: kmeans_iterations must be >= 0");
    if (max_training_descriptors < 1) throw ConfigError("bow: max_training_descriptors must be >= 1");
  }
  int descriptor_length() const { return 16 * orientation_bins; }
};

using Descriptor = std::vector<float>;  // empty = null word

namespace bow_detail {

// Axial slice indices centred on the middle slice.
inline std::vector<std::size_t> slice_indices(const Volume& v, int slices) {
  const auto nz = static_cast<std::int64_t>(v.dims().nz);
  if (nz < slices) {
    throw ShapeError("bow: volume has " + std::to_string(nz) + " slices, " + std::to_string(slices) + " required");
  }
  const std::int64_t first = nz / 2 - slices / 2;
  std::vector<std::size_t> out;
  for (int k = 0; k < slices; ++k) out.push_back(static_cast<std::size_t>(first + k));
  return out;
}

}  // namespace bow_detail

// Dense SIFT-style descriptors on one axial slice: 4 x 4 cells of
// orientation histograms weighted by gradient magnitude and a Gaussian
// window, L2 normalized, clipped at 0.2 and renormalized.
inline std::vector<Descriptor> slice_descriptors(const Volume& v, std::size_t z, const BowConfig& cfg) {
  const Dims d = v.dims();
  const auto nx = static_cast<std::int64_t>(d.nx), ny = static_cast<std::int64_t>(d.ny);
  std::vector<float> mag(d.nx * d.ny), ang(d.nx * d.ny);
  for (std::int64_t y = 0; y < ny; ++y) {
    for (std::int64_t x = 0; x < nx; ++x) {
      auto at = [&](std::int64_t xx, std::int64_t yy) {
        return v(static_cast<std::size_t>(std::clamp<std::int64_t>(xx, 0, nx - 1)),
                 static_cast<std::size_t>(std::clamp<std::int64_t>(yy, 0, ny - 1)), z);
      };
      const float gx = (at(x + 1, y) - at(x - 1, y)) / 2, gy = (at(x, y + 1) - at(x, y - 1)) / 2;
      const auto i = static_cast<std::size_t>(y * nx + x);
      mag[i] = std::sqrt(gx * gx + gy * gy);
      float a = std::atan2(gy, gx);
      if (a < 0) a += 2 * std::numbers::pi_v<float>;
      ang[i] = a;
    }
  }
  const int cell = cfg.patch / 4, nb = cfg.orientation_bins;
  const double sigma = cfg.patch / 2.0;
  std::vector<Descriptor> out;
  for (std::int64_t y0 = 0; y0 + cfg.patch <= ny; y0 += cfg.stride) {
    for (std::int64_t x0 = 0; x0 + cfg.patch <= nx; x0 += cfg.stride) {
      Descriptor desc(static_cast<std::size_t>(cfg.descriptor_length()), 0.0f);
      for (int py = 0; py < cfg.patch; ++py) {
        for (int px = 0; px < cfg.patch; ++px) {
          const auto i = static_cast<std::size_t>((y0 + py) * nx + x0 + px);
          if (mag[i] == 0) continue;
          const double dx = px - (cfg.patch - 1) / 2.0, dy = py - (cfg.patch - 1) / 2.0;
          const double w = mag[i] * std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
          const double pos = ang[i] / (2 * std::numbers::pi) * nb;
          const int b0 = static_cast<int>(std::floor(pos)) % nb;
          const double frac = pos - std::floor(pos);
          const int c = (py / cell) * 4 + px / cell;
          desc[static_cast<std::size_t>(c * nb + b0)] += static_cast<float>(w * (1 - frac));
          desc[static_cast<std::size_t>(c * nb + (b0 + 1) % nb)] += static_cast<float>(w * frac);
        }
      }
      double norm = 0;
      for (float x : desc) norm += x * x;
      if (norm < 1e-20) {
        out.emplace_back();
        continue;
      }
      norm = std::sqrt(norm);
      double renorm = 0;
      for (auto& x : desc) {
        x = std::min(static_cast<float>(x / norm), 0.2f);
        renorm += x * x;
      }
      renorm = std::sqrt(renorm);
      for (auto& x : desc) x = static_cast<float>(x / renorm);
      out.push_back(std::move(desc));
    }
  }
  return out;
}

inline double squared_distance(std::span<const float> a, std::span<const float> b) {
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return acc;
}

// k-means++ seeding followed by a fixed number of Lloyd iterations. Empty
// clusters keep their previous centroid.
inline std::vector<Descriptor> kmeans(const std::vector<Descriptor>& points, std::size_t k, int iterations,
                                      std::uint64_t seed) {
  if (points.empty() || k == 0) return {};
  Rng rng(seed, 0);
  std::vector<Descriptor> centres;
  centres.push_back(points[rng.below(points.size())]);
  std::vector<double> d2(points.size(), std::numeric_limits<double>::infinity());
  while (centres.size() < k) {
    double total = 0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      d2[i] = std::min(d2[i], squared_distance(points[i], centres.back()));
      total += d2[i];
    }
    if (!(total > 0)) {
      centres.push_back(points[rng.below(points.size())]);
      continue;
    }
    double u = rng.uniform() * total;
    std::size_t pick = points.size() - 1;
    for (std::size_t i = 0; i < points.size(); ++i) {
      u -= d2[i];
      if (u < 0) {
        pick = i;
        break;
      }
    }
    centres.push_back(points[pick]);
  }
  const std::size_t dim = points[0].size();
  std::vector<std::size_t> assign(points.size());
  for (int it = 0; it < iterations; ++it) {
    for (std::size_t i = 0; i < points.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double dist = squared_distance(points[i], centres[c]);
        if (dist < best) {
          best = dist;
          assign[i] = c;
        }
      }
    }
    std::vector<std::vector<double>> sum(k, std::vector<double>(dim, 0.0));
    std::vector<std::size_t> count(k, 0);
    for (std::size_t i = 0; i < points.size(); ++i) {
      ++count[assign[i]];
      for (std::size_t j = 0; j < dim; ++j) sum[assign[i]][j] += points[i][j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] == 0) continue;
      for (std::size_t j = 0; j < dim; ++j) centres[c][j] = static_cast<float>(sum[c][j] / count[c]);
    }
  }
  return centres;
}

struct BowDictionary {
  BowConfig config;
  std::vector<std::vector<Descriptor>> words;  // per slice, dictionary_size - 1 centroids

  bool fitted() const { return !words.empty(); }
  std::size_t feature_length() const {
    return static_cast<std::size_t>(config.slices) * static_cast<std::size_t>(config.dictionary_size);
  }
};

inline BowDictionary fit_dictionary(const std::vector<Volume>& images, const BowConfig& cfg) {
  cfg.validate();
  if (images.empty()) throw UsageError("fit_dictionary: no training images");
  BowDictionary dict;
  dict.config = cfg;
  const std::size_t k = static_cast<std::size_t>(cfg.dictionary_size - 1);
  for (int s = 0; s < cfg.slices; ++s) {
    std::vector<Descriptor> pool;
    for (const auto& im : images) {
      const std::size_t z = bow_detail::slice_indices(im, cfg.slices)[static_cast<std::size_t>(s)];
      for (auto& d : slice_descriptors(im, z, cfg)) {
        if (!d.empty()) pool.push_back(std::move(d));
      }
    }
    if (pool.size() > cfg.max_training_descriptors) {
      Rng rng(derive_seed(cfg.seed, 0x5000 + static_cast<std::uint64_t>(s)), 1);
      for (std::size_t i = 0; i < cfg.max_training_descriptors; ++i) {
        std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
      }
      pool.resize(cfg.max_training_descriptors);
    }
    dict.words.push_back(kmeans(pool, std::min(k, pool.size()), cfg.kmeans_iterations,
                                derive_seed(cfg.seed, static_cast<std::uint64_t>(s))));
  }
  return dict;
}

// Per-slice L1-normalized word histograms, concatenated.
inline std::vector<float> bow_features(const Volume& v, const BowDictionary& dict) {
  if (!dict.fitted()) throw UsageError("bow_features: dictionary not fitted");
  const auto& cfg = dict.config;
  const auto zs = bow_detail::slice_indices(v, cfg.slices);
  const auto bins = static_cast<std::size_t>(cfg.dictionary_size);
  std::vector<float> out(dict.feature_length(), 0.0f);
  for (std::size_t s = 0; s < zs.size(); ++s) {
    const auto descs = slice_descriptors(v, zs[s], cfg);
    std::span<float> hist(out.data() + s * bins, bins);
    for (const auto& d : descs) {
      std::size_t word = 0;
      if (!d.empty()) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t w = 0; w < dict.words[s].size(); ++w) {
          const double dist = squared_distance(d, dict.words[s][w]);
          if (dist < best) {
            best = dist;
            word = w + 1;
          }
        }
      }
      hist[word] += 1.0f;
    }
    if (descs.empty()) {
      hist[0] = 1.0f;
    } else {
      for (auto& h : hist) h /= static_cast<float>(descs.size());
    }
  }
  return out;
}

struct ForestConfig {
  int trees = 300;
  int max_depth = 50;
  int min_leaf = 5;
  double feature_fraction = 1.0 / 3.0;  // features tried per split
  bool bootstrap = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (trees < 1) throw ConfigError("forest: trees must be >= 1");
    if (max_depth < 0) throw ConfigError("forest: max_depth must be >= 0");
    if (min_leaf < 1) throw ConfigError("forest: min_leaf must be >= 1");
    if (!(feature_fraction > 0 && feature_fraction <= 1)) throw ConfigError("forest: feature_fraction must lie in (0, 1]");
  }
};

struct TreeNode {
  std::int32_t feature = -1;  // -1 marks a leaf
  double threshold = 0;       // go left when x[feature] <= threshold
  std::int32_t left = -1, right = -1;
  double value = 0;
};

using Tree = std::vector<TreeNode>;

struct Forest {
  std::size_t n_features = 0;
  std::vector<Tree> trees;

  double predict(std::span<const float> x) const {
    if (x.size() != n_features) throw ShapeError("forest: feature length mismatch");
    if (trees.empty()) throw UsageError("forest: not fitted");
    double acc = 0;
    for (const auto& t : trees) {
      std::int32_t n = 0;
      while (t[static_cast<std::size_t>(n)].feature >= 0) {
        const auto& node = t[static_cast<std::size_t>(n)];
        n = x[static_cast<std::size_t>(node.feature)] <= node.threshold ? node.left : node.right;
      }
      acc += t[static_cast<std::size_t>(n)].value;
    }
    return acc / static_cast<double>(trees.size());
  }
};

namespace forest_detail {

struct Builder {
  const std::vector<std::vector<float>>& x;
  std::span<const double> y;
  const ForestConfig& cfg;
  std::size_t mtry;
  Rng rng;
  Tree tree;
  std::vector<std::size_t> features;
  std::vector<std::pair<float, double>> column;

  std::int32_t grow(std::vector<std::size_t>& idx, int depth) {
    double sum = 0, sq = 0;
    for (auto i : idx) {
      sum += y[i];
      sq += y[i] * y[i];
    }
    const double n = static_cast<double>(idx.size());
    const auto id = static_cast<std::int32_t>(tree.size());
    tree.push_back({-1, 0, -1, -1, sum / n});
    const double sse = sq - sum * sum / n;
    if (depth >= cfg.max_depth || idx.size() < 2 * static_cast<std::size_t>(cfg.min_leaf) || sse <= 1e-12) return id;

    // Partial Fisher-Yates draw of mtry candidate features.
    for (std::size_t k = 0; k < mtry; ++k) std::swap(features[k], features[k + rng.below(features.size() - k)]);
    double best_gain = 1e-12, best_thr = 0;
    std::int32_t best_f = -1;
    for (std::size_t k = 0; k < mtry; ++k) {
      const std::size_t f = features[k];
      column.clear();
      for (auto i : idx) column.emplace_back(x[i][f], y[i]);
      std::sort(column.begin(), column.end());
      if (column.front().first == column.back().first) continue;
      double ls = 0, lq = 0;
      for (std::size_t j = 0; j + 1 < column.size(); ++j) {
        ls += column[j].second;
        lq += column[j].second * column[j].second;
        const std::size_t nl = j + 1, nr = column.size() - nl;
        if (column[j].first == column[j + 1].first) continue;
        if (nl < static_cast<std::size_t>(cfg.min_leaf) || nr < static_cast<std::size_t>(cfg.min_leaf)) continue;
        const double rs = sum - ls, rq = sq - lq;
        const double child = (lq - ls * ls / nl) + (rq - rs * rs / nr);
        const double gain = sse - child;
        if (gain > best_gain) {
          best_gain = gain;
          best_f = static_cast<std::int32_t>(f);
          best_thr = 0.5 * (static_cast<double>(column[j].first) + column[j + 1].first);
        }
      }
    }
    if (best_f < 0) return id;
    std::vector<std::size_t> l, r;
    for (auto i : idx) (x[i][static_cast<std::size_t>(best_f)] <= best_thr ? l : r).push_back(i);
    idx.clear();
    idx.shrink_to_fit();
    tree[static_cast<std::size_t>(id)].feature = best_f;
    tree[static_cast<std::size_t>(id)].threshold = best_thr;
    const std::int32_t li = grow(l, depth + 1);
    const std::int32_t ri = grow(r, depth + 1);
    tree[static_cast<std::size_t>(id)].left = li;
    tree[static_cast<std::size_t>(id)].right = ri;
    return id;
  }
};

}  // namespace forest_detail

inline Forest forest_fit(const std::vector<std::vector<float>>& x, std::span<const double> y, const ForestConfig& cfg) {
  cfg.validate();
  if (x.size() != y.size()) throw ValidationError("forest_fit: feature rows do not match targets");
  if (x.size() < 2) throw ValidationError("forest_fit: needs at least 2 samples");
  Forest forest;
  forest.n_features = x[0].size();
  if (forest.n_features == 0) throw ValidationError("forest_fit: empty feature vectors");
  for (const auto& row : x) {
    if (row.size() != forest.n_features) throw ShapeError("forest_fit: ragged feature matrix");
  }
  const std::size_t mtry = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::lround(cfg.feature_fraction * static_cast<double>(forest.n_features))));
  for (int t = 0; t < cfg.trees; ++t) {
    forest_detail::Builder b{x, y, cfg, std::min(mtry, forest.n_features),
                             Rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(t)), 0), {}, {}, {}};
    b.features.resize(forest.n_features);
    std::iota(b.features.begin(), b.features.end(), std::size_t{0});
    std::vector<std::size_t> idx(x.size());
    if (cfg.bootstrap) {
      for (auto& i : idx) i = b.rng.below(x.size());
    } else {
      std::iota(idx.begin(), idx.end(), std::size_t{0});
    }
    b.grow(idx, 0);
    forest.trees.push_back(std::move(b.tree));
  }
  return forest;
}

namespace frst {

inline constexpr std::uint16_t kVersion = 1;

inline Bytes encode(const Forest& f) {
  Bytes out;
  bytes::put_raw(out, "FRST");
  bytes::put<std::uint16_t>(out, kVersion);
  bytes::put<std::uint16_t>(out, 0);
  bytes::put<std::uint32_t>(out, static_cast<std::uint32_t>(f.n_features));
  bytes::put<std::uint32_t>(out, static_cast<std::uint32_t>(f.trees.size()));
  for (const auto& t : f.trees) {
    bytes::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.size()));
    for (const auto& n : t) {
      bytes::put<std::int32_t>(out, n.feature);
      bytes::put<double>(out, n.threshold);
      bytes::put<std::int32_t>(out, n.left);
      bytes::put<std::int32_t>(out, n.right);
      bytes::put<double>(out, n.value);
    }
  }
  bytes::put<std::uint64_t>(out, fnv1a64(out));
  return out;
}

inline Forest decode(std::span<const std::uint8_t> data, const std::string& name = "FRST") {
  if (data.size() < 8) throw FormatError(name + ": file too short");
  const auto body = data.first(data.size() - 8);
  bytes::Reader trailer(data.last(8), name);
  if (trailer.get<std::uint64_t>("checksum") != fnv1a64(body)) throw FormatError(name + ": checksum mismatch");
  bytes::Reader r(body, name);
  if (r.get_string(4, "magic") != "FRST") throw FormatError(name + ": bad magic");
  if (r.get<std::uint16_t>("version") != kVersion) throw FormatError(name + ": unsupported version");
  r.get<std::uint16_t>("reserved");
  Forest f;
  f.n_features = r.get<std::uint32_t>("feature count");
  const auto n_trees = r.get<std::uint32_t>("tree count");
  for (std::uint32_t t = 0; t < n_trees; ++t) {
    Tree tree(r.get<std::uint32_t>("node count"));
    for (auto& n : tree) {
      n.feature = r.get<std::int32_t>("feature");
      n.threshold = r.get<double>("threshold");
      n.left = r.get<std::int32_t>("left");
      n.right = r.get<std::int32_t>("right");
      n.value = r.get<double>("value");
    }
    for (const auto& n : tree) {
      const auto sz = static_cast<std::int32_t>(tree.size());
      if (n.feature >= 0 && (n.feature >= static_cast<std::int32_t>(f.n_features) || n.left <= 0 || n.right <= 0 ||
                             n.left >= sz || n.right >= sz)) {
        throw FormatError(name + ": corrupt node in tree " + std::to_string(t));
      }
    }
    if (tree.empty()) throw FormatError(name + ": empty tree");
    f.trees.push_back(std::move(tree));
  }
  if (r.remaining() != 0) throw FormatError(name + ": trailing bytes after last tree");
  return f;
}

}  // namespace frst

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

struct CalibrationParams {
  double a = 1.0;
  double b = 0.0;
  double icc = 0.0;  // achieved on the fitting set

  double apply(double x) const { return a * x + b; }
};

// Maximizes ICC(2,1) of (a*pred + b, labels). For each a, b matches the means;
// a is searched on a log grid around sd(labels)/sd(pred), refined by golden
// section. The identity map is kept when it scores higher.
inline CalibrationParams calibrate_linear(std::span<const double> pred, std::span<const double> labels,
                                          stats::IccKind kind = stats::IccKind::AbsoluteAgreement) {
  if (pred.size() != labels.size() || pred.size() < 3) throw ValidationError("calibrate_linear: needs at least 3 pairs");
  if (std::all_of(pred.begin(), pred.end(), [&](double p) { return p == pred[0]; })) {
    throw DegenerateError("calibrate_linear: predictions are constant");
  }
  const double mp = stats::detail::mean(pred), ml = stats::detail::mean(labels);
  double vp = 0, vl = 0, cov = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    vp += (pred[i] - mp) * (pred[i] - mp);
    vl += (labels[i] - ml) * (labels[i] - ml);
    cov += (pred[i] - mp) * (labels[i] - ml);
  }
  const double sign = cov < 0 ? -1.0 : 1.0;
  const double centre = std::log(vl > 0 ? std::sqrt(vl / vp) : 1.0);
  std::vector<double> mapped(pred.size());
  auto score = [&](double u) {
    const double a = sign * std::exp(u), b = ml - a * mp;
    for (std::size_t i = 0; i < pred.size(); ++i) mapped[i] = a * pred[i] + b;
    try {
      return stats::icc(mapped, labels, kind);
    } catch (const DegenerateError&) {
      return -std::numeric_limits<double>::infinity();
    }
  };
  const int grid = 81;
  const double span_u = 6.0;
  double best_u = centre, best = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < grid; ++k) {
    const double u = centre - span_u + 2 * span_u * k / (grid - 1);
    const double s = score(u);
    if (s > best) {
      best = s;
      best_u = u;
    }
  }
  const double step = 2 * span_u / (grid - 1);
  double lo = best_u - step, hi = best_u + step;
  const double phi = (std::sqrt(5.0) - 1) / 2;
  double c = hi - phi * (hi - lo), d = lo + phi * (hi - lo);
  double fc = score(c), fd = score(d);
  for (int it = 0; it < 100 && hi - lo > 1e-12; ++it) {
    if (fc >= fd) {
      hi = d;
      d = c;
      fd = fc;
      c = hi - phi * (hi - lo);
      fc = score(c);
    } else {
      lo = c;
      c = d;
      fc = fd;
      d = lo + phi * (hi - lo);
      fd = score(d);
    }
  }
  const double u = fc >= fd ? c : d;
  if (score(u) >= best) best_u = u, best = score(u);
  CalibrationParams out{sign * std::exp(best_u), ml - sign * std::exp(best_u) * mp, best};
  double identity = -std::numeric_limits<double>::infinity();
  try {
    identity = stats::icc(pred, labels, kind);
  } catch (const DegenerateError&) {
  }
  if (identity >= out.icc) out = {1.0, 0.0, identity};
  return out;
}

// ---------------------------------------------------------------------------
// Suite
// ---------------------------------------------------------------------------

enum class Method { Intensity, Volume, Components, BowForest };

inline constexpr std::array<Method, 4> kMethods{Method::Intensity, Method::Volume, Method::Components,
                                                Method::BowForest};

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::Intensity: return "intensity";
    case Method::Volume: return "volume";
    case Method::Components: return "components";
    case Method::BowForest: return "bow_forest";
  }
  return "?";
}

struct BaselineConfig {
  BowConfig bow;
  ForestConfig forest;
  ThresholdSearch threshold_search;
  std::optional<double> volume_threshold;      // fixed instead of tuned
  std::optional<double> components_threshold;
};

struct FittedBaselines {
  BaselineConfig config;
  double volume_threshold = 0;
  double components_threshold = 0;
  BowDictionary dictionary;
  Forest forest;
  std::map<Method, CalibrationParams> calibration;

  double raw(Method m, const Volume& s) const {
    switch (m) {
      case Method::Intensity: return baseline_intensity(s);
      case Method::Volume: return baseline_volume(s, volume_threshold);
      case Method::Components: return baseline_components(s, components_threshold);
      case Method::BowForest: return forest.predict(bow_features(s, dictionary));
    }
    return 0;
  }

  double predict(Method m, const Volume& s) const {
    const auto it = calibration.find(m);
    const double r = raw(m, s);
    return it == calibration.end() ? r : it->second.apply(r);
  }
};

// Thresholds, dictionary and forest are fitted on the training set; the
// affine calibration of every method on the validation set.
inline FittedBaselines fit_baselines(const std::vector<Volume>& train, std::span<const double> train_labels,
                                     const std::vector<Volume>& val, std::span<const double> val_labels,
                                     const BaselineConfig& cfg) {
  if (train.size() != train_labels.size() || val.size() != val_labels.size()) {
    throw ValidationError("fit_baselines: images and labels differ in count");
  }
  FittedBaselines fb;
  fb.config = cfg;
  fb.volume_threshold = cfg.volume_threshold
                            ? *cfg.volume_threshold
                            : tune_threshold(train, train_labels, ThresholdMethod::Volume, cfg.threshold_search).threshold;
  fb.components_threshold =
      cfg.components_threshold
          ? *cfg.components_threshold
          : tune_threshold(train, train_labels, ThresholdMethod::Components, cfg.threshold_search).threshold;
  fb.dictionary = fit_dictionary(train, cfg.bow);
  std::vector<std::vector<float>> feats;
  for (const auto& im : train) feats.push_back(bow_features(im, fb.dictionary));
  fb.forest = forest_fit(feats, train_labels, cfg.forest);
  for (Method m : kMethods) {
    std::vector<double> p;
    for (const auto& im : val) p.push_back(fb.raw(m, im));
    try {
      fb.calibration[m] = calibrate_linear(p, val_labels);
    } catch (const DegenerateError&) {
      fb.calibration[m] = CalibrationParams{};
    }
  }
  return fb;
}

inline nlohmann::json to_json(const BowConfig& c) {
  return {{"stride", c.stride},
          {"patch", c.patch},
          {"orientation_bins", c.orientation_bins},
          {"dictionary_size", c.dictionary_size},
          {"slices", c.slices},
          {"kmeans_iterations", c.kmeans_iterations},
          {"max_training_descriptors", c.max_training_descriptors},
          {"seed", c.seed}};
}

inline nlohmann::json to_json(const ForestConfig& c) {
  return {{"trees", c.trees},       {"max_depth", c.max_depth}, {"min_leaf", c.min_leaf},
          {"feature_fraction", c.feature_fraction}, {"bootstrap", c.bootstrap}, {"seed", c.seed}};
}

template <class V>
void read_if(const nlohmann::json& j, const char* key, V& v) {
  if (j.contains(key)) j.at(key).get_to(v);
}

inline BaselineConfig baseline_config_from_json(const nlohmann::json& j) {
  BaselineConfig c;
  try {
    if (j.contains("bow")) {
      const auto& b = j.at("bow");
      read_if(b, "stride", c.bow.stride);
      read_if(b, "patch", c.bow.patch);
      read_if(b, "orientation_bins", c.bow.orientation_bins);
      read_if(b, "dictionary_size", c.bow.dictionary_size);
      read_if(b, "slices", c.bow.slices);
      read_if(b, "kmeans_iterations", c.bow.kmeans_iterations);
      read_if(b, "max_training_descriptors", c.bow.max_training_descriptors);
      read_if(b, "seed", c.bow.seed);
    }
    if (j.contains("forest")) {
      const auto& f = j.at("forest");
      read_if(f, "trees", c.forest.trees);
      read_if(f, "max_depth", c.forest.max_depth);
      read_if(f, "min_leaf", c.forest.min_leaf);
      read_if(f, "feature_fraction", c.forest.feature_fraction);
      read_if(f, "bootstrap", c.forest.bootstrap);
      read_if(f, "seed", c.forest.seed);
    }
    if (j.contains("threshold_levels")) j.at("threshold_levels").get_to(c.threshold_search.levels);
    if (j.contains("volume_threshold")) c.volume_threshold = j.at("volume_threshold").get<double>();
    if (j.contains("components_threshold")) c.components_threshold = j.at("components_threshold").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("baseline config: ") + e.what());
  }
  c.bow.validate();
  c.forest.validate();
  return c;
}

inline nlohmann::json to_json(const BaselineConfig& c) {
  nlohmann::json j{{"bow", to_json(c.bow)}, {"forest", to_json(c.forest)}, {"threshold_levels", c.threshold_search.levels}};
  if (c.volume_threshold) j["volume_threshold"] = *c.volume_threshold;
  if (c.components_threshold) j["components_threshold"] = *c.components_threshold;
  return j;
}

// stem.json (thresholds, calibration, dictionary) + stem.frst (forest).
inline void save_baselines(const std::filesystem::path& stem, const FittedBaselines& fb) {
  nlohmann::json j;
  j["config"] = to_json(fb.config);
  j["volume_threshold"] = fb.volume_threshold;
  j["components_threshold"] = fb.components_threshold;
  for (const auto& [m, c] : fb.calibration) j["calibration"][std::string(to_string(m))] = {{"a", c.a}, {"b", c.b}, {"icc", c.icc}};
  j["dictionary"] = nlohmann::json::array();
  for (const auto& slice : fb.dictionary.words) j["dictionary"].push_back(slice);
  const Bytes forest = frst::encode(fb.forest);
  j["forest_checksum"] = hex64(fnv1a64(forest));
  write_text(std::filesystem::path(stem).concat(".json"), j.dump());
  write_file(std::filesystem::path(stem).concat(".frst"), forest);
}

inline FittedBaselines load_baselines(const std::filesystem::path& stem) {
  const auto jpath = std::filesystem::path(stem).concat(".json");
  const Bytes text = read_file(jpath);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text.begin(), text.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(jpath.string() + ": " + e.what());
  }
  FittedBaselines fb;
  try {
    fb.config = baseline_config_from_json(j.at("config"));
    fb.volume_threshold = j.at("volume_threshold").get<double>();
    fb.components_threshold = j.at("components_threshold").get<double>();
    for (Method m : kMethods) {
      const auto key = std::string(to_string(m));
      if (j.contains("calibration") && j["calibration"].contains(key)) {
        const auto& c = j["calibration"][key];
        fb.calibration[m] = {c.at("a").get<double>(), c.at("b").get<double>(), c.at("icc").get<double>()};
      }
    }
    fb.dictionary.config = fb.config.bow;
    fb.dictionary.words = j.at("dictionary").get<std::vector<std::vector<Descriptor>>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(jpath.string() + ": " + e.what());
  }
  const Bytes forest = read_file(std::filesystem::path(stem).concat(".frst"));
  if (hex64(fnv1a64(forest)) != j.value("forest_checksum", std::string{})) {
    throw FormatError(stem.string() + ": forest file does not match its sidecar");
  }
  fb.forest = frst::decode(forest, stem.string() + ".frst");
  return fb;
}

}  // namespace epvsq::baselines
