#pragma once

// The 3D regression network: blocks of valid 3x3x3 convolutions + ReLU, each
// closed by a 2x2x2 max-pool, a final single-convolution block closed by a
// coarser pool, then fully connected layers and a one-unit linear output.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "epvsq/bytes.hpp"
#include "epvsq/error.hpp"
#include "epvsq/rng.hpp"
#include "epvsq/tensor.hpp"
#include "epvsq/volgrid.hpp"

namespace epvsq {

struct NetworkConfig {
  int blocks = 2;
  int convs_per_block = 4;
  int features_first_layer = 32;   // doubled after every pool
  std::vector<int> fc_layout{2000, 2000};
  Extent3 block_pool{2, 2, 2};
  Extent3 final_pool{4, 4, 4};
  LossSpec loss;
  Dims input_dims{168, 128, 84};   // (x, y, z) voxels
  double init_gain = 2.0;          // weight variance = init_gain / fan_in

  static NetworkConfig paper() { return {}; }

  // Single-core profile on the phantom crop; see the README for the sizing.
  static NetworkConfig desk() {
    NetworkConfig c;
    c.convs_per_block = 1;
    c.features_first_layer = 8;
    c.fc_layout = {64};
    c.final_pool = {2, 2, 2};
    c.input_dims = {48, 44, 32};
    return c;
  }
};

struct AugmentConfig {
  bool enabled = true;
  double rotation_max = 0.2;     // radians, drawn uniformly in [-max, max] per axis
  double translation_max = 2.0;  // voxels, likewise
  std::array<bool, 3> flip{true, true, true};
};

// ---------------------------------------------------------------------------
// Shape plan
// ---------------------------------------------------------------------------

enum class LayerKind { Conv, Relu, Pool, Flatten, Dense };

struct LayerPlan {
  LayerKind kind;
  std::string name;
  Shape in, out;
  Shape weight_shape;  // empty for parameter-free layers
  std::size_t params = 0;
  Extent3 window{};    // pooling only
};

struct NetworkPlan {
  std::vector<LayerPlan> layers;
  std::size_t param_count = 0;
  Shape final_feature_map;
};

inline NetworkPlan plan_network(const NetworkConfig& cfg) {
  if (cfg.blocks < 1 || cfg.convs_per_block < 1 || cfg.features_first_layer < 1) {
    throw ConfigError("network: blocks, convs_per_block and features_first_layer must be >= 1");
  }
  for (int w : cfg.fc_layout) {
    if (w < 1) throw ConfigError("network: fully connected widths must be >= 1");
  }
  NetworkPlan plan;
  Shape cur{1, cfg.input_dims.nz, cfg.input_dims.ny, cfg.input_dims.nx};
  if (shape_size(cur) == 0) throw ConfigError("network: input dims must be positive");

  auto conv = [&](const std::string& name, std::size_t out_ch) {
    Extent3 out;
    if (!conv_valid_extent({cur[1], cur[2], cur[3]}, {3, 3, 3}, out)) {
      throw ConfigError("network: layer " + name + " underflows, input " + shape_string(cur) +
                        " is smaller than a 3x3x3 kernel (input dims " + shape_string({cfg.input_dims.nx, cfg.input_dims.ny, cfg.input_dims.nz}) + ")");
    }
    LayerPlan l{LayerKind::Conv, name, cur, {out_ch, out.a, out.b, out.c}, {out_ch, cur[0], 3, 3, 3}, 0, {}};
    l.params = out_ch * cur[0] * 27 + out_ch;
    plan.layers.push_back(l);
    cur = l.out;
    plan.layers.push_back({LayerKind::Relu, name + ".relu", cur, cur, {}, 0, {}});
  };
  auto pool = [&](const std::string& name, Extent3 w) {
    Extent3 out;
    if (!pool_extent({cur[1], cur[2], cur[3]}, w, out)) {
      throw ConfigError("network: layer " + name + " underflows, input " + shape_string(cur) + " is smaller than the pooling window");
    }
    LayerPlan l{LayerKind::Pool, name, cur, {cur[0], out.a, out.b, out.c}, {}, 0, w};
    plan.layers.push_back(l);
    cur = l.out;
  };

  std::size_t features = static_cast<std::size_t>(cfg.features_first_layer);
  for (int b = 0; b < cfg.blocks; ++b) {
    for (int c = 0; c < cfg.convs_per_block; ++c) conv("conv" + std::to_string(b) + "_" + std::to_string(c), features);
    pool("pool" + std::to_string(b), cfg.block_pool);
    features *= 2;
  }
  conv("conv" + std::to_string(cfg.blocks) + "_0", features);
  pool("pool" + std::to_string(cfg.blocks), cfg.final_pool);
  plan.final_feature_map = cur;

  const Shape flat{shape_size(cur)};
  plan.layers.push_back({LayerKind::Flatten, "flatten", cur, flat, {}, 0, {}});
  cur = flat;
  auto dense = [&](const std::string& name, std::size_t width, bool activation) {
    LayerPlan l{LayerKind::Dense, name, cur, {width}, {width, cur[0]}, width * cur[0] + width, {}};
    plan.layers.push_back(l);
    cur = l.out;
    if (activation) plan.layers.push_back({LayerKind::Relu, name + ".relu", cur, cur, {}, 0, {}});
  };
  for (std::size_t i = 0; i < cfg.fc_layout.size(); ++i) {
    dense("fc" + std::to_string(i), static_cast<std::size_t>(cfg.fc_layout[i]), true);
  }
  dense("out", 1, false);
  for (const auto& l : plan.layers) plan.param_count += l.params;
  return plan;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

template <class T>
struct BasicModel {
  NetworkConfig config;
  NetworkPlan plan;
  std::vector<std::string> param_names;
  std::vector<Tensor<T>> params;        // weights then bias, per parameterised layer

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.size();
    return n;
  }
};

using Model = BasicModel<float>;

// He-style Gaussian weights, zero biases.
template <class T = float>
BasicModel<T> build_network(const NetworkConfig& cfg, std::uint64_t seed) {
  BasicModel<T> m;
  m.config = cfg;
  m.plan = plan_network(cfg);
  Rng rng(derive_seed(seed, 0x696e6974ULL), 0);
  for (const auto& l : m.plan.layers) {
    if (l.weight_shape.empty()) continue;
    Tensor<T> w(l.weight_shape);
    const std::size_t fan_in = shape_size(l.weight_shape) / l.weight_shape[0];
    const double sd = std::sqrt(cfg.init_gain / static_cast<double>(fan_in));
    for (auto& v : w.data()) v = static_cast<T>(rng.normal(0.0, sd));
    m.param_names.push_back(l.name + ".w");
    m.params.push_back(std::move(w));
    m.param_names.push_back(l.name + ".b");
    m.params.emplace_back(Shape{l.weight_shape[0]});
  }
  return m;
}

template <class To, class From>
BasicModel<To> model_cast(const BasicModel<From>& m) {
  BasicModel<To> out;
  out.config = m.config;
  out.plan = m.plan;
  out.param_names = m.param_names;
  for (const auto& p : m.params) out.params.push_back(tensor_cast<To>(p));
  return out;
}

template <class T>
Tensor<T> volume_tensor(const Volume& v) {
  const Dims d = v.dims();
  return Tensor<T>(Shape{1, d.nz, d.ny, d.nx}, std::vector<T>(v.data().begin(), v.data().end()));
}

template <class T>
void check_input(const BasicModel<T>& m, const Volume& v) {
  if (!(v.dims() == m.config.input_dims)) {
    const Dims e = m.config.input_dims, g = v.dims();
    throw ShapeError("model expects input " + shape_string({e.nx, e.ny, e.nz}) + ", got " +
                     shape_string({g.nx, g.ny, g.nz}));
  }
}

struct ForwardVars {
  Var input;
  std::vector<Var> params;
  Var output;
};

// Records the forward pass on `g`. Parameters carry gradients only when
// `param_grads` is set; the input only when `input_grad` is set.
template <class T>
ForwardVars forward(Graph<T>& g, const BasicModel<T>& m, Tensor<T> input, bool param_grads, bool input_grad) {
  ForwardVars fv;
  fv.input = g.input(std::move(input), input_grad);
  for (const auto& p : m.params) fv.params.push_back(g.input(p, param_grads));
  Var h = fv.input;
  std::size_t k = 0;
  for (const auto& l : m.plan.layers) {
    switch (l.kind) {
      case LayerKind::Conv:
        h = conv3d(g, h, fv.params[k], fv.params[k + 1]);
        k += 2;
        break;
      case LayerKind::Dense:
        h = dense(g, h, fv.params[k], fv.params[k + 1]);
        k += 2;
        break;
      case LayerKind::Relu:
        h = relu(g, h);
        break;
      case LayerKind::Pool:
        h = maxpool3d(g, h, l.window);
        break;
      case LayerKind::Flatten:
        h = flatten(g, h);
        break;
    }
  }
  fv.output = h;
  return fv;
}

// Real-valued score; may be negative or fractional.
template <class T>
double score(const BasicModel<T>& m, const Volume& v) {
  check_input(m, v);
  Graph<T> g;
  const ForwardVars fv = forward(g, m, volume_tensor<T>(v), false, false);
  return static_cast<double>(g.value(fv.output)[0]);
}

template <class T>
std::vector<double> score_all(const BasicModel<T>& m, const std::vector<Volume>& vs) {
  std::vector<double> out;
  out.reserve(vs.size());
  for (const auto& v : vs) out.push_back(score(m, v));
  return out;
}

// d(score)/d(input) as a volume on the input grid.
template <class T>
Volume input_gradient(const BasicModel<T>& m, const Volume& v) {
  check_input(m, v);
  Graph<T> g;
  const ForwardVars fv = forward(g, m, volume_tensor<T>(v), false, true);
  g.backward(fv.output);
  const Tensor<T> grad = g.gradient(fv.input);
  Volume out(v.dims(), v.spacing());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(grad[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct Sample {
  std::string id;
  Volume image;   // preprocessed smooth-ROI crop
  double target = 0;
};

struct TrainConfig {
  int max_epochs = 60;
  int patience = 20;
  double rho = 0.95;
  double epsilon = 1e-6;
  double learning_rate = 1.0;
  AugmentConfig augment;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
};

struct TrainState {
  Model best;                 // best-validation snapshot
  Model last;
  AdadeltaState<float> optimizer;
  int epochs_run = 0;
  int best_epoch = 0;
  double best_val_loss = 0;
  std::uint64_t seed = 0;
  std::vector<EpochLog> history;
};

inline RigidTransform draw_augmentation(const AugmentConfig& a, Rng& rng) {
  RigidTransform tf;
  if (!a.enabled) return tf;
  for (int i = 0; i < 3; ++i) tf.rotation[i] = a.rotation_max > 0 ? rng.uniform(-a.rotation_max, a.rotation_max) : 0.0;
  for (int i = 0; i < 3; ++i) {
    tf.translation[i] = a.translation_max > 0 ? rng.uniform(-a.translation_max, a.translation_max) : 0.0;
  }
  for (int i = 0; i < 3; ++i) tf.flip[i] = a.flip[i] && rng.bernoulli(0.5);
  return tf;
}

template <class T>
double mean_loss(const BasicModel<T>& m, const std::vector<Sample>& set) {
  double acc = 0;
  for (const auto& s : set) acc += loss(m.config.loss, score(m, s.image), s.target);
  return acc / static_cast<double>(set.size());
}

// One Adadelta update on a single sample; returns the sample loss.
inline double train_step(Model& m, AdadeltaState<float>& opt, const Volume& image, double target) {
  Graph<float> g;
  const ForwardVars fv = forward(g, m, volume_tensor<float>(image), true, false);
  const Var l = loss(g, fv.output, target, m.config.loss);
  const double value = static_cast<double>(g.value(l)[0]);
  if (!std::isfinite(value)) return value;
  g.backward(l);
  std::vector<Tensor<float>> grads;
  grads.reserve(fv.params.size());
  for (Var p : fv.params) grads.push_back(g.gradient(p));
  adadelta_step<float>(m.params, grads, opt);
  return value;
}

// Per-sample Adadelta over seed-shuffled epochs, a freshly augmented copy of
// each sample per visit, early stopping on epoch-mean validation loss.
inline TrainState train(Model model, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                        const TrainConfig& cfg, std::uint64_t seed) {
  if (train_set.empty() || val_set.empty()) throw UsageError("train: training and validation sets must be non-empty");
  if (cfg.max_epochs < 1 || cfg.patience < 1) throw ConfigError("train: max_epochs and patience must be >= 1");
  for (const auto* set : {&train_set, &val_set}) {
    for (const auto& s : *set) check_input(model, s.image);
  }
  TrainState st;
  st.seed = seed;
  st.optimizer.rho = cfg.rho;
  st.optimizer.epsilon = cfg.epsilon;
  st.optimizer.learning_rate = cfg.learning_rate;
  st.best = model;
  st.best_val_loss = mean_loss(model, val_set);
  st.best_epoch = 0;

  std::vector<std::size_t> order(train_set.size());
  int since_best = 0;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle(derive_seed(seed, 0x10000ULL + static_cast<std::uint64_t>(epoch)), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    double train_loss = 0;
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
      const Sample& s = train_set[order[pos]];
      Rng aug(derive_seed(seed, (static_cast<std::uint64_t>(epoch) << 32) | order[pos]), 1);
      const RigidTransform tf = draw_augmentation(cfg.augment, aug);
      const double l = tf.is_identity() ? train_step(model, st.optimizer, s.image, s.target)
                                        : train_step(model, st.optimizer, rigid_resample(s.image, tf), s.target);
      if (!std::isfinite(l)) {
        throw TrainingError("training aborted: non-finite loss at epoch " + std::to_string(epoch) + ", sample " +
                            s.id);
      }
      train_loss += l;
    }
    const double val = mean_loss(model, val_set);
    if (!std::isfinite(val)) {
      throw TrainingError("training aborted: non-finite validation loss at epoch " + std::to_string(epoch));
    }
    st.history.push_back({epoch, train_loss / static_cast<double>(order.size()), val});
    st.epochs_run = epoch;
    if (val < st.best_val_loss) {
      st.best_val_loss = val;
      st.best_epoch = epoch;
      st.best = model;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  st.last = std::move(model);
  return st;
}

// ---------------------------------------------------------------------------
// Persistence: TNSR weights plus a JSON sidecar
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const NetworkConfig& c) {
  return {{"blocks", c.blocks},
          {"convs_per_block", c.convs_per_block},
          {"features_first_layer", c.features_first_layer},
          {"fc_layout", c.fc_layout},
          {"block_pool", {c.block_pool.a, c.block_pool.b, c.block_pool.c}},
          {"final_pool", {c.final_pool.a, c.final_pool.b, c.final_pool.c}},
          {"loss", to_string(c.loss.kind)},
          {"tukey_c", c.loss.tukey_c},
          {"input_dims", {c.input_dims.nx, c.input_dims.ny, c.input_dims.nz}},
          {"init_gain", c.init_gain}};
}

inline NetworkConfig network_config_from_json(const nlohmann::json& j, NetworkConfig c = NetworkConfig::desk()) {
  try {
    if (j.contains("profile")) {
      const auto p = j.at("profile").get<std::string>();
      if (p == "paper") {
        c = NetworkConfig::paper();
      } else if (p == "desk") {
        c = NetworkConfig::desk();
      } else {
        throw ConfigError("network: unknown profile '" + p + "'");
      }
    }
    auto e3 = [&](const char* key, Extent3& out) {
      if (!j.contains(key)) return;
      const auto v = j.at(key).get<std::array<std::size_t, 3>>();
      out = {v[0], v[1], v[2]};
    };
    if (j.contains("blocks")) c.blocks = j.at("blocks").get<int>();
    if (j.contains("convs_per_block")) c.convs_per_block = j.at("convs_per_block").get<int>();
    if (j.contains("features_first_layer")) c.features_first_layer = j.at("features_first_layer").get<int>();
    if (j.contains("fc_layout")) c.fc_layout = j.at("fc_layout").get<std::vector<int>>();
    e3("block_pool", c.block_pool);
    e3("final_pool", c.final_pool);
    if (j.contains("loss")) c.loss.kind = parse_loss_kind(j.at("loss").get<std::string>());
    if (j.contains("tukey_c")) c.loss.tukey_c = j.at("tukey_c").get<double>();
    if (j.contains("input_dims")) {
      const auto d = j.at("input_dims").get<std::array<std::size_t, 3>>();
      c.input_dims = {d[0], d[1], d[2]};
    }
    if (j.contains("init_gain")) c.init_gain = j.at("init_gain").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("network config: ") + e.what());
  }
  if (!(c.loss.tukey_c > 0)) throw ConfigError("network: tukey_c must be positive");
  return c;
}

inline nlohmann::json to_json(const AugmentConfig& a) {
  return {{"enabled", a.enabled},
          {"rotation_max", a.rotation_max},
          {"translation_max", a.translation_max},
          {"flip", a.flip}};
}

inline AugmentConfig augment_config_from_json(const nlohmann::json& j, AugmentConfig a = {}) {
  try {
    if (j.contains("enabled")) a.enabled = j.at("enabled").get<bool>();
    if (j.contains("rotation_max")) a.rotation_max = j.at("rotation_max").get<double>();
    if (j.contains("translation_max")) a.translation_max = j.at("translation_max").get<double>();
    if (j.contains("flip")) a.flip = j.at("flip").get<std::array<bool, 3>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("augment config: ") + e.what());
  }
  if (a.rotation_max < 0 || a.translation_max < 0) throw ConfigError("augment: ranges must be non-negative");
  return a;
}

struct ModelSidecar {
  NetworkConfig network;
  AugmentConfig augment;
  std::uint64_t seed = 0;
  int stopping_epoch = 0;
  std::string train_manifest_hash;
  std::string val_manifest_hash;
};

inline void save_model(const std::filesystem::path& stem, const Model& m, const ModelSidecar& meta) {
  std::vector<NamedTensor> named;
  for (std::size_t i = 0; i < m.params.size(); ++i) named.push_back({m.param_names[i], m.params[i]});
  write_tensors(stem.string() + ".tnsr", named);
  nlohmann::json j{{"network", to_json(meta.network)},
                   {"augment", to_json(meta.augment)},
                   {"seed", meta.seed},
                   {"stopping_epoch", meta.stopping_epoch},
                   {"train_manifest_hash", meta.train_manifest_hash},
                   {"val_manifest_hash", meta.val_manifest_hash},
                   {"param_count", m.param_count()}};
  write_text(stem.string() + ".json", j.dump(2) + "\n");
}

inline std::pair<Model, ModelSidecar> load_model(const std::filesystem::path& stem) {
  const Bytes raw = read_file(stem.string() + ".json");
  ModelSidecar meta;
  try {
    const auto j = nlohmann::json::parse(raw.begin(), raw.end());
    meta.network = network_config_from_json(j.at("network"));
    meta.augment = augment_config_from_json(j.at("augment"));
    meta.seed = j.at("seed").get<std::uint64_t>();
    meta.stopping_epoch = j.at("stopping_epoch").get<int>();
    meta.train_manifest_hash = j.value("train_manifest_hash", "");
    meta.val_manifest_hash = j.value("val_manifest_hash", "");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("model sidecar: " + std::string(e.what()));
  }
  Model m = build_network<float>(meta.network, 0);
  const auto named = read_tensors(stem.string() + ".tnsr");
  if (named.size() != m.params.size()) throw FormatError("model weights: tensor count does not match the network");
  for (std::size_t i = 0; i < named.size(); ++i) {
    if (named[i].name != m.param_names[i] || named[i].tensor.shape() != m.params[i].shape()) {
      throw FormatError("model weights: tensor '" + named[i].name + "' does not match layer '" + m.param_names[i] + "'");
    }
    m.params[i] = named[i].tensor;
  }
  return {std::move(m), meta};
}

}  // namespace epvsq
