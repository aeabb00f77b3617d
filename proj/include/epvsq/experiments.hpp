#pragma once

// Experiment harness: run specs, phantom datasets whose test labels stay
// sealed until predictions exist, the studies themselves, and run manifests.
// Every run writes manifest.json first and updates it when it ends.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "epvsq/baselines.hpp"
#include "epvsq/bytes.hpp"
#include "epvsq/error.hpp"
#include "epvsq/interpret.hpp"
#include "epvsq/phantom.hpp"
#include "epvsq/regnet.hpp"
#include "epvsq/rng.hpp"
#include "epvsq/stats.hpp"
#include "epvsq/volgrid.hpp"

namespace epvsq::experiments {

inline constexpr std::string_view kToolkitVersion = "epvsq 1.0.0";

// ---------------------------------------------------------------------------
// Spec
// ---------------------------------------------------------------------------

enum class Kind { Generate, Train, Score, Compare, Variants, LearningCurve, Repro, Age, Occlude, Saliency };

inline constexpr std::array<Kind, 10> kKinds{Kind::Generate, Kind::Train,         Kind::Score, Kind::Compare,
                                             Kind::Variants, Kind::LearningCurve, Kind::Repro, Kind::Age,
                                             Kind::Occlude,  Kind::Saliency};

inline std::string_view to_string(Kind k) {
  switch (k) {
    case Kind::Generate: return "generate";
    case Kind::Train: return "train";
    case Kind::Score: return "score";
    case Kind::Compare: return "compare";
    case Kind::Variants: return "variants";
    case Kind::LearningCurve: return "learning-curve";
    case Kind::Repro: return "repro";
    case Kind::Age: return "age";
    case Kind::Occlude: return "occlude";
    case Kind::Saliency: return "saliency";
  }
  return "?";
}

inline Kind parse_kind(std::string_view s) {
  for (Kind k : kKinds) {
    if (to_string(k) == s) return k;
  }
  throw SpecError("unknown experiment '" + std::string(s) + "'");
}

struct Splits {
  int train = 400, val = 100, test = 100;
};

// A network/augmentation/training variant trained on the comparison split.
struct Variant {
  std::string name;
  nlohmann::json network = nlohmann::json::object();  // merged onto the base network
  nlohmann::json augment = nlohmann::json::object();
};

inline std::vector<Variant> default_variants() {
  using J = nlohmann::json;
  return {{"reference", J::object(), J::object()},
          {"no_augmentation", J::object(), {{"enabled", false}}},
          {"flip_y_only", J::object(), {{"rotation_max", 0.0}, {"translation_max", 0.0}, {"flip", {false, true, false}}}},
          {"no_hidden_fc", {{"fc_layout", J::array()}}, J::object()},
          {"shallow", {{"blocks", 1}}, J::object()},
          {"loss_mce", {{"loss", "mce"}}, J::object()},
          {"loss_mqe", {{"loss", "mqe"}}, J::object()},
          {"loss_tukey", {{"loss", "tukey"}}, J::object()},
          {"loss_rmse", {{"loss", "rmse"}}, J::object()}};
}

struct ExperimentSpec {
  Kind kind = Kind::Compare;
  std::uint64_t seed = 1;
  PhantomConfig phantom;
  PreprocessConfig preprocess;
  NetworkConfig network = NetworkConfig::desk();
  TrainConfig train;
  baselines::BaselineConfig baselines;
  interpret::OcclusionConfig occlusion;
  stats::IccKind icc_kind = stats::IccKind::AbsoluteAgreement;
  int dataset_size = 600;
  Splits splits;
  int repetitions = 3;
  std::vector<int> learning_curve_sizes{40, 100, 200, 400};
  std::vector<int> repro_train_sizes{400, 40};
  int repro_models = 1;
  int repro_pairs = 30;
  int age_cohort = 1000;
  int probe_scans = 20;  // scans for occlude / saliency
  int bootstrap_reps = 1000;
  double bootstrap_level = 0.95;
  std::vector<Variant> variants = default_variants();
  std::string model;  // existing model stem; empty means train one

  // Checks the fields the experiment kind uses; the rest keep their defaults.
  void validate() const {
    auto need = [](bool ok, const std::string& what) {
      if (!ok) throw SpecError(what);
    };
    need(dataset_size >= 1, "dataset_size must be >= 1");
    const bool split_kinds = kind == Kind::Train || kind == Kind::Score || kind == Kind::Compare ||
                             kind == Kind::Variants ||
                             (model.empty() && (kind == Kind::Age || kind == Kind::Occlude || kind == Kind::Saliency));
    if (split_kinds) {
      need(splits.train >= 1 && splits.val >= 1 && splits.test >= 3, "splits: train, val >= 1 and test >= 3");
      need(splits.train + splits.val + splits.test <= dataset_size,
           "splits: train + val + test (" + std::to_string(splits.train + splits.val + splits.test) +
               ") exceed dataset_size (" + std::to_string(dataset_size) + ")");
    }
    need(repetitions >= 1, "repetitions must be >= 1");
    if (kind == Kind::LearningCurve) {
      need(splits.test >= 3 && splits.test < dataset_size, "learning curve: 3 <= test < dataset_size");
      need(!learning_curve_sizes.empty(), "learning_curve_sizes must not be empty");
      for (int s : learning_curve_sizes) {
        need(s >= 5, "learning-curve size " + std::to_string(s) + " leaves no validation scan (need >= 5)");
        need(s <= dataset_size - splits.test, "learning-curve size " + std::to_string(s) +
                                                  " exceeds the dataset minus the test set (" +
                                                  std::to_string(dataset_size - splits.test) + ")");
      }
    }
    if (kind == Kind::Repro) {
      need(repro_models >= 1 && repro_pairs >= 3, "repro: models >= 1 and pairs >= 3");
      if (model.empty()) {
        need(!repro_train_sizes.empty(), "repro train sizes must not be empty");
        for (int s : repro_train_sizes) {
          need(s >= 5 && s <= dataset_size, "repro train size " + std::to_string(s) + " outside [5, dataset_size]");
        }
      }
    }
    if (kind == Kind::Age) need(age_cohort >= 40, "age_cohort must be >= 40 (ten observations per ZINB parameter)");
    need(probe_scans >= 1, "probe_scans must be >= 1");
    need(bootstrap_reps == 0 || bootstrap_reps >= 100, "bootstrap reps must be 0 (off) or >= 100");
    need(bootstrap_level > 0 && bootstrap_level < 1, "bootstrap level must lie in (0, 1)");
    for (const auto& v : variants) need(!v.name.empty(), "every variant needs a name");
    phantom.validate();
    occlusion.validate();
  }
};

inline nlohmann::json to_json(const TrainConfig& t) {
  return {{"max_epochs", t.max_epochs}, {"patience", t.patience},           {"rho", t.rho},
          {"epsilon", t.epsilon},       {"learning_rate", t.learning_rate}, {"augment", to_json(t.augment)}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig t = {}) {
  t.max_epochs = j.value("max_epochs", t.max_epochs);
  t.patience = j.value("patience", t.patience);
  t.rho = j.value("rho", t.rho);
  t.epsilon = j.value("epsilon", t.epsilon);
  t.learning_rate = j.value("learning_rate", t.learning_rate);
  if (j.contains("augment")) t.augment = augment_config_from_json(j.at("augment"), t.augment);
  if (t.max_epochs < 1 || t.patience < 1) throw ConfigError("train: max_epochs and patience must be >= 1");
  if (!(t.rho > 0 && t.rho < 1) || !(t.epsilon > 0) || !(t.learning_rate > 0)) {
    throw ConfigError("train: need 0 < rho < 1, epsilon > 0, learning_rate > 0");
  }
  return t;
}

inline nlohmann::json to_json(const PreprocessConfig& p) {
  return {{"dilation_iterations", p.dilation_iterations},
          {"gaussian_sigma", p.gaussian_sigma},
          {"crop_dims", {p.crop_dims.nx, p.crop_dims.ny, p.crop_dims.nz}}};
}

inline PreprocessConfig preprocess_config_from_json(const nlohmann::json& j) {
  PreprocessConfig p;
  p.dilation_iterations = j.value("dilation_iterations", p.dilation_iterations);
  p.gaussian_sigma = j.value("gaussian_sigma", p.gaussian_sigma);
  if (j.contains("crop_dims")) {
    const auto d = j.at("crop_dims").get<std::array<std::size_t, 3>>();
    p.crop_dims = {d[0], d[1], d[2]};
  }
  if (p.dilation_iterations < 0 || !(p.gaussian_sigma > 0)) {
    throw ConfigError("preprocess: dilation_iterations >= 0 and gaussian_sigma > 0 required");
  }
  return p;
}

inline nlohmann::json to_json(const ExperimentSpec& s) {
  nlohmann::json variants = nlohmann::json::array();
  for (const auto& v : s.variants) variants.push_back({{"name", v.name}, {"network", v.network}, {"augment", v.augment}});
  return {{"experiment", to_string(s.kind)},
          {"seed", s.seed},
          {"phantom", to_json(s.phantom)},
          {"preprocess", to_json(s.preprocess)},
          {"network", to_json(s.network)},
          {"train", to_json(s.train)},
          {"baselines", baselines::to_json(s.baselines)},
          {"occlusion", interpret::to_json(s.occlusion)},
          {"icc", stats::to_string(s.icc_kind)},
          {"dataset_size", s.dataset_size},
          {"splits", {{"train", s.splits.train}, {"val", s.splits.val}, {"test", s.splits.test}}},
          {"repetitions", s.repetitions},
          {"learning_curve_sizes", s.learning_curve_sizes},
          {"repro", {{"train_sizes", s.repro_train_sizes}, {"models", s.repro_models}, {"pairs", s.repro_pairs}}},
          {"age_cohort", s.age_cohort},
          {"probe_scans", s.probe_scans},
          {"bootstrap", {{"reps", s.bootstrap_reps}, {"level", s.bootstrap_level}}},
          {"variants", variants},
          {"model", s.model}};
}

// Unknown keys are rejected so that typos do not silently fall back to defaults.
// Cross-field checks are left to validate(), after command-line overrides.
inline ExperimentSpec spec_from_json(const nlohmann::json& j, ExperimentSpec s = {}) {
  static const std::vector<std::string> known{
      "experiment", "seed",         "phantom",         "preprocess", "network",     "train",
      "baselines",  "occlusion",    "icc",             "dataset_size", "splits",    "repetitions",
      "learning_curve_sizes", "repro", "age_cohort",   "probe_scans", "bootstrap",  "variants",
      "model",      "comment"};
  if (!j.is_object()) throw SpecError("spec must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) throw SpecError("unknown spec key '" + key + "'");
  }
  try {
    if (j.contains("experiment")) s.kind = parse_kind(j.at("experiment").get<std::string>());
    s.seed = j.value("seed", s.seed);
    if (j.contains("phantom")) s.phantom = phantom_config_from_json(j.at("phantom"));
    if (j.contains("preprocess")) s.preprocess = preprocess_config_from_json(j.at("preprocess"));
    if (j.contains("network")) s.network = network_config_from_json(j.at("network"), s.network);
    if (j.contains("train")) s.train = train_config_from_json(j.at("train"), s.train);
    if (j.contains("baselines")) s.baselines = baselines::baseline_config_from_json(j.at("baselines"));
    if (j.contains("occlusion")) s.occlusion = interpret::occlusion_config_from_json(j.at("occlusion"));
    if (j.contains("icc")) s.icc_kind = stats::parse_icc_kind(j.at("icc").get<std::string>());
    s.dataset_size = j.value("dataset_size", s.dataset_size);
    if (j.contains("splits")) {
      const auto& sp = j.at("splits");
      s.splits = {sp.value("train", s.splits.train), sp.value("val", s.splits.val), sp.value("test", s.splits.test)};
    }
    s.repetitions = j.value("repetitions", s.repetitions);
    if (j.contains("learning_curve_sizes")) s.learning_curve_sizes = j.at("learning_curve_sizes").get<std::vector<int>>();
    if (j.contains("repro")) {
      const auto& r = j.at("repro");
      if (r.contains("train_sizes")) s.repro_train_sizes = r.at("train_sizes").get<std::vector<int>>();
      s.repro_models = r.value("models", s.repro_models);
      s.repro_pairs = r.value("pairs", s.repro_pairs);
    }
    s.age_cohort = j.value("age_cohort", s.age_cohort);
    s.probe_scans = j.value("probe_scans", s.probe_scans);
    if (j.contains("bootstrap")) {
      s.bootstrap_reps = j.at("bootstrap").value("reps", s.bootstrap_reps);
      s.bootstrap_level = j.at("bootstrap").value("level", s.bootstrap_level);
    }
    if (j.contains("variants")) {
      s.variants.clear();
      for (const auto& v : j.at("variants")) {
        s.variants.push_back({v.at("name").get<std::string>(), v.value("network", nlohmann::json::object()),
                              v.value("augment", nlohmann::json::object())});
      }
    }
    s.model = j.value("model", s.model);
  } catch (const nlohmann::json::exception& e) {
    throw SpecError(std::string("spec: ") + e.what());
  } catch (const ConfigError& e) {
    throw SpecError(e.what());
  }
  return s;
}

// Accepts either a bare spec or a manifest written by a previous run.
inline ExperimentSpec load_spec(const std::filesystem::path& path) {
  const Bytes raw = read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(raw.begin(), raw.end());
  } catch (const nlohmann::json::exception& e) {
    throw SpecError(path.string() + ": " + e.what());
  }
  if (j.is_object() && j.contains("spec") && j.contains("toolkit_version")) j = j.at("spec");
  return spec_from_json(j);
}

inline std::string spec_hash(const ExperimentSpec& s) { return hex64(fnv1a64(to_json(s).dump())); }

// ---------------------------------------------------------------------------
// Parallel helpers
// ---------------------------------------------------------------------------

// Runs f(i) for i in [0, n) on up to `threads` workers. Each index owns its
// output slot, so results do not depend on scheduling. The first exception
// (by index) is rethrown.
template <class F>
void parallel_for(std::size_t n, int threads, F&& f) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            f(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

enum Stream : std::uint64_t {
  kDataset = 0x64617461,
  kSplit,
  kModelInit,
  kModelTrain,
  kProbe,
  kRescanPairs,
  kAgeCohort,
  kCurve,
  kBootstrap,
  kRandomOcclusion,
  kReproSplit,
};

struct Scan {
  std::string id;
  std::uint64_t seed = 0;
  SmoothRoi roi;
  std::vector<Index3> annotations;  // crop coordinates
  std::optional<double> age;
};

class Dataset;
struct LabeledSplit;
struct TestSplit;
LabeledSplit labeled(const Dataset&, const std::vector<std::size_t>&);
TestSplit sealed(const Dataset&, const std::vector<std::size_t>&);

// Phantom scans with labels kept private; labels leave only through a
// LabeledSplit (training/validation) or a sealed TestSplit.
class Dataset {
 public:
  std::vector<Scan> scans;
  std::vector<std::uint64_t> skipped_seeds;  // placement failures

  std::size_t size() const { return scans.size(); }
  void add(Scan s, int label) {
    scans.push_back(std::move(s));
    labels_.push_back(label);
  }

 private:
  std::vector<int> labels_;
  friend LabeledSplit labeled(const Dataset&, const std::vector<std::size_t>&);
  friend TestSplit sealed(const Dataset&, const std::vector<std::size_t>&);
};

// Generates `n` scans from the seed stream derive_seed(stream_seed, c),
// c = 0, 1, ...; seeds whose lesions cannot be placed are skipped and recorded.
// `keep` filters scans (e.g. at least one lesion).
template <class Keep>
Dataset generate_dataset(const PhantomConfig& cfg, const PreprocessConfig& pp, std::uint64_t stream_seed,
                         std::size_t n, int threads, bool keep_mask, Keep&& keep) {
  Dataset ds;
  std::uint64_t counter = 0;
  while (ds.size() < n) {
    const std::size_t batch = std::max<std::size_t>(n - ds.size(), 1);
    std::vector<std::optional<std::pair<Scan, int>>> out(batch);
    std::vector<char> failed(batch, 0);
    parallel_for(batch, threads, [&](std::size_t i) {
      const std::uint64_t c = counter + i;
      const std::uint64_t seed = derive_seed(stream_seed, c);
      try {
        ScoredScan s = generate_scan(cfg, seed);
        if (!keep(s)) return;
        Scan sc;
        char id[32];
        std::snprintf(id, sizeof id, "scan-%06llu", static_cast<unsigned long long>(c));
        sc.id = id;
        sc.seed = seed;
        sc.roi = make_smooth_roi(s.volume, s.roi_mask, pp);
        sc.annotations = interpret::to_crop(s.annotations, sc.roi.origin);
        sc.age = s.age;
        if (!keep_mask) sc.roi.smooth_mask = MaskVolume();
        out[i] = std::make_pair(std::move(sc), s.score);
      } catch (const PlacementError&) {
        failed[i] = 1;
      }
    });
    for (std::size_t i = 0; i < batch && ds.size() < n; ++i) {
      if (failed[i]) ds.skipped_seeds.push_back(derive_seed(stream_seed, counter + i));
      if (out[i]) ds.add(std::move(out[i]->first), out[i]->second);
    }
    counter += batch;
  }
  return ds;
}

inline Dataset generate_dataset(const PhantomConfig& cfg, const PreprocessConfig& pp, std::uint64_t stream_seed,
                                std::size_t n, int threads, bool keep_mask = false) {
  return generate_dataset(cfg, pp, stream_seed, n, threads, keep_mask, [](const ScoredScan&) { return true; });
}

struct LabeledSplit {
  std::vector<const Scan*> scans;
  std::vector<double> labels;

  std::vector<Sample> samples() const {
    std::vector<Sample> out;
    out.reserve(scans.size());
    for (std::size_t i = 0; i < scans.size(); ++i) out.push_back({scans[i]->id, scans[i]->roi.image, labels[i]});
    return out;
  }
  std::vector<Volume> images() const {
    std::vector<Volume> out;
    for (const auto* s : scans) out.push_back(s->roi.image);
    return out;
  }
};

// Test labels are released only against a complete prediction vector.
class SealedLabels {
 public:
  SealedLabels() = default;
  explicit SealedLabels(std::vector<double> y) : y_(std::move(y)) {}
  std::size_t size() const { return y_.size(); }
  const std::vector<double>& reveal(std::span<const double> predictions) const {
    if (predictions.size() != y_.size()) {
      throw UsageError("test labels requested before predictions for all " + std::to_string(y_.size()) +
                       " test scans exist");
    }
    return y_;
  }

 private:
  std::vector<double> y_;
};

struct TestSplit {
  std::vector<const Scan*> scans;
  SealedLabels labels;
};

inline LabeledSplit labeled(const Dataset& ds, const std::vector<std::size_t>& idx) {
  LabeledSplit s;
  for (std::size_t i : idx) {
    s.scans.push_back(&ds.scans.at(i));
    s.labels.push_back(ds.labels_.at(i));
  }
  return s;
}

inline TestSplit sealed(const Dataset& ds, const std::vector<std::size_t>& idx) {
  TestSplit s;
  std::vector<double> y;
  for (std::size_t i : idx) {
    s.scans.push_back(&ds.scans.at(i));
    y.push_back(ds.labels_.at(i));
  }
  s.labels = SealedLabels(std::move(y));
  return s;
}

inline std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  Rng rng(seed, 0);
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
  return p;
}

inline std::vector<std::size_t> slice(const std::vector<std::size_t>& v, std::size_t from, std::size_t count) {
  return {v.begin() + static_cast<std::ptrdiff_t>(from), v.begin() + static_cast<std::ptrdiff_t>(from + count)};
}

inline std::string ids_hash(const std::vector<const Scan*>& scans) {
  std::string all;
  for (const auto* s : scans) all += s->id + "\n";
  return hex64(fnv1a64(all));
}

inline nlohmann::json ids(const std::vector<const Scan*>& scans) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto* s : scans) a.push_back(s->id);
  return a;
}

// ---------------------------------------------------------------------------
// Output
// ---------------------------------------------------------------------------

// Six significant digits: masks reduction-order noise between thread counts.
inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

class Csv {
 public:
  explicit Csv(std::vector<std::string> header) : header_(std::move(header)) {}
  void row(std::vector<std::string> cells) {
    if (cells.size() != header_.size()) throw UsageError("csv: row width differs from header");
    rows_.push_back(std::move(cells));
  }
  std::string str() const {
    std::string out;
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) out += ',';
        out += cells[i];
      }
      out += '\n';
    };
    line(header_);
    for (const auto& r : rows_) line(r);
    return out;
  }
  std::size_t rows() const { return rows_.size(); }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

// Output directory plus manifest. The manifest is on disk before any work
// starts, records partial state on failure and output digests on success.
class RunContext {
 public:
  RunContext(std::filesystem::path out, const ExperimentSpec& spec, int threads)
      : out_(std::move(out)), threads_(std::max(1, threads)), start_(std::chrono::steady_clock::now()) {
    spec.validate();
    std::filesystem::create_directories(out_);
    manifest_ = {{"toolkit_version", kToolkitVersion},
                 {"spec_hash", spec_hash(spec)},
                 {"spec", to_json(spec)},
                 {"rng", kRngAlgorithm},
                 {"phantom_generator", kPhantomGeneratorVersion},
                 {"seeds", {{"master", spec.seed}}},
                 {"threads", threads_},
                 {"status", "running"},
                 {"stages", nlohmann::json::array()}};
    flush();
  }

  const std::filesystem::path& dir() const { return out_; }
  int threads() const { return threads_; }
  nlohmann::json& manifest() { return manifest_; }

  void stage(const std::string& name) {
    manifest_["stages"].push_back(name);
    flush();
  }

  void write(const std::string& rel, const std::string& text) {
    const auto p = out_ / rel;
    std::filesystem::create_directories(p.parent_path());
    write_text(p, text);
    outputs_.push_back(rel);
  }
  void record(const std::string& rel) { outputs_.push_back(rel); }

  void finish(const std::string& status, const std::string& error = {}) {
    manifest_["status"] = status;
    if (!error.empty()) manifest_["error"] = error;
    manifest_["wall_clock_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    nlohmann::json digests = nlohmann::json::object();
    for (const auto& rel : outputs_) {
      if (std::filesystem::exists(out_ / rel)) digests[rel] = hex64(fnv1a64(read_file(out_ / rel)));
    }
    manifest_["outputs"] = digests;
    flush();
  }

 private:
  void flush() { write_text(out_ / "manifest.json", manifest_.dump(2) + "\n"); }

  std::filesystem::path out_;
  int threads_;
  std::chrono::steady_clock::time_point start_;
  nlohmann::json manifest_;
  std::vector<std::string> outputs_;
};

inline std::vector<std::string> metric_cells(const stats::EvalReport& r) {
  return {fmt(r.pearson), fmt(r.spearman), fmt(r.icc), fmt(r.mse)};
}

// ---------------------------------------------------------------------------
// Shared stages
// ---------------------------------------------------------------------------

struct StandardSplit {
  Dataset data;
  LabeledSplit train, val;
  TestSplit test;
};

inline void record_split(RunContext& ctx, const Dataset& ds, const LabeledSplit& tr, const LabeledSplit& va,
                         const TestSplit& te) {
  ctx.manifest()["splits"] = {{"train", ids(tr.scans)}, {"val", ids(va.scans)}, {"test", ids(te.scans)}};
  ctx.manifest()["skipped_seeds"] = ds.skipped_seeds;
}

inline StandardSplit standard_split(const ExperimentSpec& spec, RunContext& ctx) {
  StandardSplit s;
  s.data = generate_dataset(spec.phantom, spec.preprocess, derive_seed(spec.seed, kDataset),
                            static_cast<std::size_t>(spec.dataset_size), ctx.threads());
  const auto p = permutation(s.data.size(), derive_seed(spec.seed, kSplit));
  const auto ntr = static_cast<std::size_t>(spec.splits.train), nva = static_cast<std::size_t>(spec.splits.val),
             nte = static_cast<std::size_t>(spec.splits.test);
  s.train = labeled(s.data, slice(p, 0, ntr));
  s.val = labeled(s.data, slice(p, ntr, nva));
  s.test = sealed(s.data, slice(p, ntr + nva, nte));
  record_split(ctx, s.data, s.train, s.val, s.test);
  ctx.stage("dataset");
  return s;
}

struct TrainedModel {
  Model model;
  ModelSidecar meta;
  std::vector<EpochLog> history;
};

inline TrainedModel train_cnn(const NetworkConfig& net, const TrainConfig& tc, const LabeledSplit& tr,
                              const LabeledSplit& va, std::uint64_t seed) {
  const std::uint64_t init = derive_seed(seed, kModelInit), run = derive_seed(seed, kModelTrain);
  TrainState st = train(build_network(net, init), tr.samples(), va.samples(), tc, run);
  TrainedModel out;
  out.model = std::move(st.best);
  out.meta = {net, tc.augment, seed, st.best_epoch, ids_hash(tr.scans), ids_hash(va.scans)};
  out.history = std::move(st.history);
  return out;
}

inline void save_cnn(RunContext& ctx, const std::string& stem, const TrainedModel& m) {
  std::filesystem::create_directories(ctx.dir() / "models");
  save_model(ctx.dir() / "models" / stem, m.model, m.meta);
  ctx.record("models/" + stem + ".tnsr");
  ctx.record("models/" + stem + ".json");
  Csv log({"epoch", "train_loss", "val_loss"});
  for (const auto& h : m.history) log.row({std::to_string(h.epoch), fmt(h.train_loss), fmt(h.val_loss)});
  ctx.write("models/" + stem + "_history.csv", log.str());
}

inline std::vector<double> score_scans(const Model& m, const std::vector<const Scan*>& scans, int threads) {
  std::vector<double> out(scans.size());
  parallel_for(scans.size(), threads, [&](std::size_t i) { out[i] = score(m, scans[i]->roi.image); });
  return out;
}

// The spec's model if one is given, otherwise a CNN trained on the standard split.
inline Model obtain_model(const ExperimentSpec& spec, RunContext& ctx, const StandardSplit* split) {
  if (!spec.model.empty()) {
    auto [m, meta] = load_model(spec.model);
    ctx.manifest()["model"] = {{"stem", spec.model}, {"seed", meta.seed}, {"stopping_epoch", meta.stopping_epoch}};
    return m;
  }
  std::optional<StandardSplit> own;
  if (!split) {
    own = standard_split(spec, ctx);
    split = &*own;
  }
  TrainedModel t = train_cnn(spec.network, spec.train, split->train, split->val, spec.seed);
  save_cnn(ctx, "cnn", t);
  ctx.stage("train");
  return std::move(t.model);
}

// ---------------------------------------------------------------------------
// generate / train / score
// ---------------------------------------------------------------------------

inline void run_generate(const ExperimentSpec& spec, RunContext& ctx) {
  const auto n = static_cast<std::size_t>(spec.dataset_size);
  std::vector<std::optional<ScoredScan>> scans(n);
  std::uint64_t counter = 0;
  std::vector<std::uint64_t> skipped;
  Csv index({"scan_id", "seed", "score", "age"});
  std::filesystem::create_directories(ctx.dir() / "scans");
  std::size_t have = 0;
  while (have < n) {
    const std::size_t batch = n - have;
    std::vector<std::optional<ScoredScan>> out(batch);
    parallel_for(batch, ctx.threads(), [&](std::size_t i) {
      try {
        out[i] = generate_scan(spec.phantom, derive_seed(derive_seed(spec.seed, kDataset), counter + i));
      } catch (const PlacementError&) {
      }
    });
    for (std::size_t i = 0; i < batch; ++i) {
      const std::uint64_t c = counter + i;
      if (!out[i]) {
        skipped.push_back(derive_seed(derive_seed(spec.seed, kDataset), c));
        continue;
      }
      char id[32];
      std::snprintf(id, sizeof id, "scan-%06llu", static_cast<unsigned long long>(c));
      write_scan(ctx.dir() / "scans", id, *out[i], spec.phantom);
      for (const char* suffix : {".svol", "_roi.svol", ".json"}) ctx.record(std::string("scans/") + id + suffix);
      index.row({id, std::to_string(out[i]->seed), std::to_string(out[i]->score),
                 out[i]->age ? fmt(*out[i]->age) : std::string()});
      ++have;
    }
    counter += batch;
  }
  ctx.manifest()["skipped_seeds"] = skipped;
  ctx.write("scans.csv", index.str());
}

inline void run_train(const ExperimentSpec& spec, RunContext& ctx) {
  const StandardSplit s = standard_split(spec, ctx);
  TrainedModel t = train_cnn(spec.network, spec.train, s.train, s.val, spec.seed);
  save_cnn(ctx, "cnn", t);
  const auto pred = score_scans(t.model, s.val.scans, ctx.threads());
  const auto r = stats::evaluate("cnn", pred, s.val.labels, spec.icc_kind);
  Csv csv({"split", "n", "pearson", "spearman", "icc", "mse", "stopping_epoch"});
  auto cells = metric_cells(r);
  csv.row({"val", std::to_string(r.n), cells[0], cells[1], cells[2], cells[3], std::to_string(t.meta.stopping_epoch)});
  ctx.write("metrics.csv", csv.str());
}

inline void run_score(const ExperimentSpec& spec, RunContext& ctx) {
  const StandardSplit s = standard_split(spec, ctx);
  const Model m = obtain_model(spec, ctx, &s);
  const auto pred = score_scans(m, s.test.scans, ctx.threads());
  const auto& y = s.test.labels.reveal(pred);
  Csv csv({"scan_id", "score", "label"});
  for (std::size_t i = 0; i < pred.size(); ++i) csv.row({s.test.scans[i]->id, fmt(pred[i]), fmt(y[i])});
  ctx.write("scores.csv", csv.str());
}

// ---------------------------------------------------------------------------
// compare (Table 1 analogue)
// ---------------------------------------------------------------------------

struct WilliamsRow {
  std::string baseline;
  double r_cnn = 0, r_baseline = 0, r_between = 0;
  stats::WilliamsResult test;
};

struct CompareResult {
  std::vector<stats::EvalReport> reports;  // cnn first, then the baselines in kMethods order
  std::vector<WilliamsRow> williams;
  TrainedModel cnn;
  baselines::FittedBaselines baselines;
  std::vector<std::string> test_ids;
  std::vector<double> labels;
  std::map<std::string, std::vector<double>> predictions;
};

inline CompareResult run_compare(const ExperimentSpec& spec, RunContext& ctx) {
  CompareResult res;
  const StandardSplit s = standard_split(spec, ctx);
  res.cnn = train_cnn(spec.network, spec.train, s.train, s.val, spec.seed);
  save_cnn(ctx, "cnn", res.cnn);
  ctx.stage("train");

  res.baselines = baselines::fit_baselines(s.train.images(), s.train.labels, s.val.images(), s.val.labels, spec.baselines);
  std::filesystem::create_directories(ctx.dir() / "models");
  baselines::save_baselines(ctx.dir() / "models" / "baselines", res.baselines);
  ctx.record("models/baselines.json");
  ctx.record("models/baselines.frst");
  ctx.stage("baselines");

  for (const auto* sc : s.test.scans) res.test_ids.push_back(sc->id);
  res.predictions["cnn"] = score_scans(res.cnn.model, s.test.scans, ctx.threads());
  for (auto m : baselines::kMethods) {
    std::vector<double> p(s.test.scans.size());
    parallel_for(p.size(), ctx.threads(), [&](std::size_t i) { p[i] = res.baselines.predict(m, s.test.scans[i]->roi.image); });
    res.predictions[std::string(baselines::to_string(m))] = std::move(p);
  }
  res.labels = s.test.labels.reveal(res.predictions["cnn"]);
  ctx.stage("evaluate");

  std::vector<std::string> order{"cnn"};
  for (auto m : baselines::kMethods) order.emplace_back(baselines::to_string(m));
  nlohmann::json reports = nlohmann::json::array();
  Csv metrics({"method", "n", "pearson", "spearman", "icc", "mse"});
  for (std::size_t k = 0; k < order.size(); ++k) {
    const auto& p = res.predictions[order[k]];
    stats::EvalReport r = stats::evaluate(order[k], p, res.labels, spec.icc_kind);
    if (spec.bootstrap_reps > 0) {
      stats::add_bootstrap(r, p, res.labels, spec.bootstrap_reps, spec.bootstrap_level,
                           derive_seed(spec.seed, kBootstrap + k));
    }
    auto c = metric_cells(r);
    metrics.row({order[k], std::to_string(r.n), c[0], c[1], c[2], c[3]});
    reports.push_back(stats::to_json(r));
    res.reports.push_back(std::move(r));
  }
  ctx.write("metrics.csv", metrics.str());
  ctx.write("metrics.json", reports.dump(2) + "\n");

  // Williams: does the CNN correlate with the labels better than each baseline?
  Csv w({"baseline", "r_cnn", "r_baseline", "r_cnn_baseline", "t", "df", "p"});
  const auto& cnn = res.predictions["cnn"];
  const double r13 = stats::nan_if_degenerate([&] { return stats::pearson(cnn, res.labels); });
  for (std::size_t k = 1; k < order.size(); ++k) {
    const auto& b = res.predictions[order[k]];
    WilliamsRow row{order[k], r13, stats::nan_if_degenerate([&] { return stats::pearson(b, res.labels); }),
                    stats::nan_if_degenerate([&] { return stats::pearson(cnn, b); }), {}};
    const double nan = std::numeric_limits<double>::quiet_NaN();
    row.test = {nan, static_cast<double>(res.labels.size()) - 3, nan};
    if (std::abs(row.r_cnn) < 1 && std::abs(row.r_baseline) < 1 && std::abs(row.r_between) < 1) {
      row.test = stats::nan_if_degenerate([&] {
        return std::optional(stats::williams_test(row.r_cnn, row.r_baseline, row.r_between, res.labels.size()));
      }).value_or(row.test);
    }
    w.row({row.baseline, fmt(row.r_cnn), fmt(row.r_baseline), fmt(row.r_between), fmt(row.test.t),
           fmt(row.test.df), fmt(row.test.p)});
    res.williams.push_back(row);
  }
  ctx.write("williams.csv", w.str());

  Csv preds([&] {
    std::vector<std::string> h{"scan_id", "label"};
    h.insert(h.end(), order.begin(), order.end());
    return h;
  }());
  for (std::size_t i = 0; i < res.labels.size(); ++i) {
    std::vector<std::string> row{res.test_ids[i], fmt(res.labels[i])};
    for (const auto& name : order) row.push_back(fmt(res.predictions[name][i]));
    preds.row(std::move(row));
  }
  ctx.write("predictions.csv", preds.str());
  return res;
}

// ---------------------------------------------------------------------------
// variants (Table 3 analogue)
// ---------------------------------------------------------------------------

struct VariantResult {
  std::string name;
  NetworkConfig network;
  AugmentConfig augment;
  std::string status;  // "ok" or "diverged"
  int stopping_epoch = 0;
  std::optional<stats::EvalReport> report;
};

inline std::vector<VariantResult> run_variants(const ExperimentSpec& spec, RunContext& ctx) {
  const StandardSplit s = standard_split(spec, ctx);
  std::vector<VariantResult> res(spec.variants.size());
  for (std::size_t k = 0; k < spec.variants.size(); ++k) {
    const Variant& v = spec.variants[k];
    res[k].name = v.name;
    res[k].network = network_config_from_json(v.network, spec.network);
    res[k].augment = augment_config_from_json(v.augment, spec.train.augment);
  }
  // Variants share the split and the training seed, so differences come from the variant alone.
  parallel_for(res.size(), ctx.threads(), [&](std::size_t k) {
    TrainConfig tc = spec.train;
    tc.augment = res[k].augment;
    try {
      TrainedModel t = train_cnn(res[k].network, tc, s.train, s.val, spec.seed);
      const auto pred = score_scans(t.model, s.test.scans, 1);
      const bool finite = std::all_of(pred.begin(), pred.end(), [](double x) { return std::isfinite(x); });
      const auto& y = s.test.labels.reveal(pred);
      res[k].stopping_epoch = t.meta.stopping_epoch;
      if (!finite) {
        res[k].status = "diverged";
        return;
      }
      try {
        res[k].report = stats::evaluate(res[k].name, pred, y, spec.icc_kind);
        res[k].status = "ok";
      } catch (const DegenerateError&) {
        res[k].status = "constant_output";
      }
    } catch (const TrainingError&) {
      res[k].status = "diverged";
    }
  });
  Csv csv({"variant", "blocks", "convs_per_block", "features_first_layer", "fc_layout", "loss", "augment", "flip",
           "status", "stopping_epoch", "pearson", "spearman", "icc", "mse"});
  for (const auto& r : res) {
    std::string fc;
    for (std::size_t i = 0; i < r.network.fc_layout.size(); ++i) fc += (i ? "x" : "") + std::to_string(r.network.fc_layout[i]);
    std::string flip;
    for (int a = 0; a < 3; ++a) flip += r.augment.enabled && r.augment.flip[a] ? "1" : "0";
    std::vector<std::string> m(4);
    if (r.report) m = metric_cells(*r.report);
    csv.row({r.name, std::to_string(r.network.blocks), std::to_string(r.network.convs_per_block),
             std::to_string(r.network.features_first_layer), fc.empty() ? "none" : fc,
             std::string(to_string(r.network.loss.kind)), r.augment.enabled ? "1" : "0", flip, r.status,
             std::to_string(r.stopping_epoch), m[0], m[1], m[2], m[3]});
  }
  ctx.write("variants.csv", csv.str());
  return res;
}

// ---------------------------------------------------------------------------
// learning-curve (Fig. 7 analogue)
// ---------------------------------------------------------------------------

struct CurvePoint {
  int size = 0, repetition = 0, n_train = 0, n_val = 0;
  stats::EvalReport report;
  std::vector<double> predictions;
};

struct CurveSummary {
  int size = 0, repetitions = 0;
  double pearson = 0, spearman = 0, icc = 0, mse = 0, icc_sd = 0;
  std::optional<stats::Interval> icc_ci;
};

struct CurveResult {
  std::vector<CurvePoint> points;
  std::vector<CurveSummary> summary;
};

// Mean ICC over repetitions, bootstrapped over test scans (every repetition
// is scored on the same test set, so one resample applies to all of them).
inline stats::Interval mean_icc_ci(const std::vector<std::vector<double>>& preds, const std::vector<double>& y,
                                   stats::IccKind kind, int reps, double level, std::uint64_t seed) {
  const std::size_t n = y.size();
  auto mean_icc = [&](const std::vector<std::size_t>& idx) {
    double acc = 0;
    std::vector<double> a(idx.size()), b(idx.size());
    for (const auto& p : preds) {
      for (std::size_t i = 0; i < idx.size(); ++i) {
        a[i] = p[idx[i]];
        b[i] = y[idx[i]];
      }
      acc += stats::icc(a, b, kind);
    }
    return acc / static_cast<double>(preds.size());
  };
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  stats::Interval ci;
  ci.estimate = mean_icc(all);
  ci.level = level;
  ci.seed = seed;
  std::vector<double> stat;
  for (int r = 0; r < reps; ++r) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(r)), 0);
    std::vector<std::size_t> idx(n);
    for (auto& i : idx) i = rng.below(n);
    try {
      stat.push_back(mean_icc(idx));
    } catch (const DegenerateError&) {
    }
  }
  if (stat.empty()) throw DegenerateError("learning-curve bootstrap: every resample was degenerate");
  std::sort(stat.begin(), stat.end());
  auto q = [&](double p) {
    const double pos = p * static_cast<double>(stat.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, stat.size() - 1);
    return stat[lo] + (pos - static_cast<double>(lo)) * (stat[hi] - stat[lo]);
  };
  ci.lower = q((1 - level) / 2);
  ci.upper = q(1 - (1 - level) / 2);
  ci.reps = static_cast<int>(stat.size());
  return ci;
}

inline CurveResult run_learning_curve(const ExperimentSpec& spec, RunContext& ctx) {
  Dataset ds = generate_dataset(spec.phantom, spec.preprocess, derive_seed(spec.seed, kDataset),
                                static_cast<std::size_t>(spec.dataset_size), ctx.threads());
  const auto master = permutation(ds.size(), derive_seed(spec.seed, kSplit));
  const auto nte = static_cast<std::size_t>(spec.splits.test);
  const TestSplit test = sealed(ds, slice(master, ds.size() - nte, nte));
  const std::vector<std::size_t> pool = slice(master, 0, ds.size() - nte);
  ctx.manifest()["splits"] = {{"test", ids(test.scans)}, {"pool_size", pool.size()}};
  ctx.manifest()["skipped_seeds"] = ds.skipped_seeds;
  ctx.stage("dataset");

  CurveResult res;
  for (int size : spec.learning_curve_sizes) {
    for (int r = 0; r < spec.repetitions; ++r) res.points.push_back({size, r, 0, 0, {}, {}});
  }
  nlohmann::json split_ids = nlohmann::json::array();
  std::vector<nlohmann::json> per_point(res.points.size());
  parallel_for(res.points.size(), ctx.threads(), [&](std::size_t k) {
    CurvePoint& pt = res.points[k];
    const std::uint64_t seed =
        derive_seed(derive_seed(spec.seed, kCurve), (static_cast<std::uint64_t>(pt.size) << 16) | static_cast<std::uint64_t>(pt.repetition));
    const auto draw = permutation(pool.size(), seed);
    std::vector<std::size_t> chosen;
    for (int i = 0; i < pt.size; ++i) chosen.push_back(pool[draw[static_cast<std::size_t>(i)]]);
    pt.n_train = static_cast<int>(std::lround(0.8 * pt.size));
    pt.n_val = pt.size - pt.n_train;
    const LabeledSplit tr = labeled(ds, slice(chosen, 0, static_cast<std::size_t>(pt.n_train)));
    const LabeledSplit va = labeled(ds, slice(chosen, static_cast<std::size_t>(pt.n_train), static_cast<std::size_t>(pt.n_val)));
    const TrainedModel t = train_cnn(spec.network, spec.train, tr, va, seed);
    pt.predictions = score_scans(t.model, test.scans, 1);
    pt.report = stats::evaluate("cnn", pt.predictions, test.labels.reveal(pt.predictions), spec.icc_kind);
    per_point[k] = {{"size", pt.size}, {"repetition", pt.repetition}, {"train", ids(tr.scans)}, {"val", ids(va.scans)}};
  });
  for (auto& j : per_point) split_ids.push_back(std::move(j));
  ctx.manifest()["curve_splits"] = split_ids;
  ctx.stage("train");

  Csv points({"train_size", "repetition", "n_train", "n_val", "pearson", "spearman", "icc", "mse"});
  for (const auto& pt : res.points) {
    auto c = metric_cells(pt.report);
    points.row({std::to_string(pt.size), std::to_string(pt.repetition), std::to_string(pt.n_train),
                std::to_string(pt.n_val), c[0], c[1], c[2], c[3]});
  }
  ctx.write("learning_curve.csv", points.str());

  std::vector<double> y;
  for (const auto& pt : res.points) {
    y = test.labels.reveal(pt.predictions);
    break;
  }
  for (int size : spec.learning_curve_sizes) {
    CurveSummary sm;
    sm.size = size;
    std::vector<std::vector<double>> preds;
    std::vector<double> iccs;
    for (const auto& pt : res.points) {
      if (pt.size != size) continue;
      sm.pearson += pt.report.pearson;
      sm.spearman += pt.report.spearman;
      sm.icc += pt.report.icc;
      sm.mse += pt.report.mse;
      iccs.push_back(pt.report.icc);
      preds.push_back(pt.predictions);
    }
    const double n = static_cast<double>(preds.size());
    sm.repetitions = static_cast<int>(preds.size());
    sm.pearson /= n;
    sm.spearman /= n;
    sm.icc /= n;
    sm.mse /= n;
    if (preds.size() > 1) {
      double ss = 0;
      for (double v : iccs) ss += (v - sm.icc) * (v - sm.icc);
      sm.icc_sd = std::sqrt(ss / (n - 1));
      if (spec.bootstrap_reps > 0) {
        sm.icc_ci = stats::nan_if_degenerate([&] {
          return std::optional(mean_icc_ci(preds, y, spec.icc_kind, spec.bootstrap_reps, spec.bootstrap_level,
                                           derive_seed(derive_seed(spec.seed, kBootstrap), static_cast<std::uint64_t>(size))));
        });
      }
    }
    res.summary.push_back(sm);
  }
  if (spec.repetitions > 1) {
    Csv summary({"train_size", "repetitions", "pearson", "spearman", "icc", "mse", "icc_sd", "icc_lower", "icc_upper"});
    for (const auto& sm : res.summary) {
      summary.row({std::to_string(sm.size), std::to_string(sm.repetitions), fmt(sm.pearson), fmt(sm.spearman),
                   fmt(sm.icc), fmt(sm.mse), fmt(sm.icc_sd), sm.icc_ci ? fmt(sm.icc_ci->lower) : "",
                   sm.icc_ci ? fmt(sm.icc_ci->upper) : ""});
    }
    ctx.write("learning_curve_summary.csv", summary.str());
  }
  return res;
}

// Non-decreasing mean ICC allowing one inversion whose confidence intervals
// overlap, and a rise of at least `min_rise` from the first to the last size.
inline bool learning_curve_ok(const std::vector<CurveSummary>& s, double min_rise) {
  if (s.size() < 2) return false;
  int inversions = 0;
  for (std::size_t i = 1; i < s.size(); ++i) {
    if (s[i].icc >= s[i - 1].icc) continue;
    ++inversions;
    const bool overlap = s[i].icc_ci && s[i - 1].icc_ci && s[i].icc_ci->upper >= s[i - 1].icc_ci->lower;
    if (!overlap) return false;
  }
  return inversions <= 1 && s.front().icc <= s.back().icc - min_rise;
}

// ---------------------------------------------------------------------------
// repro (scan-rescan analogue)
// ---------------------------------------------------------------------------

struct RescanPair {
  std::string id;
  int score = 0;
  Volume first, second;  // preprocessed crops
};

inline std::vector<RescanPair> rescan_pairs(const PhantomConfig& cfg, const PreprocessConfig& pp, std::uint64_t stream,
                                            std::size_t n, int threads, std::vector<std::uint64_t>* skipped = nullptr) {
  std::vector<RescanPair> out;
  std::uint64_t counter = 0;
  while (out.size() < n) {
    const std::size_t batch = n - out.size();
    std::vector<std::optional<RescanPair>> got(batch);
    parallel_for(batch, threads, [&](std::size_t i) {
      try {
        const auto [a, b] = generate_rescan_pair(cfg, derive_seed(stream, counter + i));
        char id[32];
        std::snprintf(id, sizeof id, "pair-%06llu", static_cast<unsigned long long>(counter + i));
        got[i] = RescanPair{id, a.score, make_smooth_roi(a.volume, a.roi_mask, pp).image,
                            make_smooth_roi(b.volume, b.roi_mask, pp).image};
      } catch (const PlacementError&) {
      }
    });
    for (std::size_t i = 0; i < batch && out.size() < n; ++i) {
      if (got[i]) {
        out.push_back(std::move(*got[i]));
      } else if (skipped) {
        skipped->push_back(derive_seed(stream, counter + i));
      }
    }
    counter += batch;
  }
  return out;
}

struct ReproRow {
  int train_size = 0;  // 0 for a supplied model
  int model = 0;
  double icc = 0;
  std::vector<double> first, second;
};

struct ReproSummary {
  int train_size = 0, models = 0;
  double mean_icc = 0, sd_icc = 0;
};

struct ReproResult {
  std::vector<ReproRow> rows;
  std::vector<ReproSummary> summary;
};

inline ReproRow repro_scores(const Model& m, const std::vector<RescanPair>& pairs, stats::IccKind kind) {
  ReproRow r;
  for (const auto& p : pairs) {
    r.first.push_back(score(m, p.first));
    r.second.push_back(score(m, p.second));
  }
  r.icc = stats::nan_if_degenerate([&] { return stats::icc(r.first, r.second, kind); });
  return r;
}

inline ReproResult run_repro(const ExperimentSpec& spec, RunContext& ctx) {
  std::vector<std::uint64_t> skipped;
  const auto pairs = rescan_pairs(spec.phantom, spec.preprocess, derive_seed(spec.seed, kRescanPairs),
                                  static_cast<std::size_t>(spec.repro_pairs), ctx.threads(), &skipped);
  ctx.manifest()["skipped_pair_seeds"] = skipped;
  ReproResult res;
  if (!spec.model.empty()) {
    const auto [m, meta] = load_model(spec.model);
    ctx.manifest()["model"] = {{"stem", spec.model}, {"seed", meta.seed}};
    res.rows.push_back(repro_scores(m, pairs, spec.icc_kind));
  } else {
    Dataset ds = generate_dataset(spec.phantom, spec.preprocess, derive_seed(spec.seed, kDataset),
                                  static_cast<std::size_t>(spec.dataset_size), ctx.threads());
    ctx.manifest()["skipped_seeds"] = ds.skipped_seeds;
    for (int size : spec.repro_train_sizes) {
      for (int k = 0; k < spec.repro_models; ++k) res.rows.push_back({size, k, 0, {}, {}});
    }
    nlohmann::json splits = nlohmann::json::array();
    std::vector<nlohmann::json> per(res.rows.size());
    parallel_for(res.rows.size(), ctx.threads(), [&](std::size_t i) {
      ReproRow& row = res.rows[i];
      const std::uint64_t seed = derive_seed(derive_seed(spec.seed, kReproSplit),
                                             (static_cast<std::uint64_t>(row.train_size) << 16) | static_cast<std::uint64_t>(row.model));
      const auto p = permutation(ds.size(), seed);
      const auto ntr = static_cast<std::size_t>(std::lround(0.8 * row.train_size));
      const auto nva = static_cast<std::size_t>(row.train_size) - ntr;
      const LabeledSplit tr = labeled(ds, slice(p, 0, ntr)), va = labeled(ds, slice(p, ntr, nva));
      const TrainedModel t = train_cnn(spec.network, spec.train, tr, va, seed);
      ReproRow scored = repro_scores(t.model, pairs, spec.icc_kind);
      scored.train_size = row.train_size;
      scored.model = row.model;
      row = std::move(scored);
      per[i] = {{"train_size", row.train_size}, {"model", row.model}, {"train", ids(tr.scans)}, {"val", ids(va.scans)}};
    });
    for (auto& j : per) splits.push_back(std::move(j));
    ctx.manifest()["repro_splits"] = splits;
  }
  ctx.stage("score");

  Csv rows({"train_size", "model", "pairs", "icc"});
  for (const auto& r : res.rows) {
    rows.row({std::to_string(r.train_size), std::to_string(r.model), std::to_string(pairs.size()), fmt(r.icc)});
  }
  ctx.write("repro.csv", rows.str());
  Csv scores({"pair_id", "score", "train_size", "model", "first", "second"});
  for (const auto& r : res.rows) {
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      scores.row({pairs[i].id, std::to_string(pairs[i].score), std::to_string(r.train_size), std::to_string(r.model),
                  fmt(r.first[i]), fmt(r.second[i])});
    }
  }
  ctx.write("repro_scores.csv", scores.str());

  Csv summary({"train_size", "models", "mean_icc", "sd_icc"});
  std::vector<int> sizes;
  for (const auto& r : res.rows) {
    if (std::find(sizes.begin(), sizes.end(), r.train_size) == sizes.end()) sizes.push_back(r.train_size);
  }
  for (int size : sizes) {
    ReproSummary sm{size, 0, 0, 0};
    std::vector<double> v;
    for (const auto& r : res.rows) {
      if (r.train_size == size) v.push_back(r.icc);
    }
    sm.models = static_cast<int>(v.size());
    sm.mean_icc = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    if (v.size() > 1) {
      double ss = 0;
      for (double x : v) ss += (x - sm.mean_icc) * (x - sm.mean_icc);
      sm.sd_icc = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    summary.row({std::to_string(size), std::to_string(sm.models), fmt(sm.mean_icc), fmt(sm.sd_icc)});
    res.summary.push_back(sm);
  }
  ctx.write("repro_summary.csv", summary.str());
  return res;
}

// ---------------------------------------------------------------------------
// age (ZINB age-regression analogue)
// ---------------------------------------------------------------------------

struct AgeBin {
  double from = 0, to = 0;
  int n = 0;
  double visual_mean = 0, visual_half_width = 0;
  double automated_mean = 0, automated_half_width = 0;
};

struct AgeResult {
  stats::ZinbFit visual, automated;
  std::vector<AgeBin> bins;
  std::vector<double> ages, visual_counts, automated_counts;
};

// Continuous scores enter the count model rounded to the nearest non-negative integer.
inline double round_score(double s) { return std::max(0.0, std::round(s)); }

inline AgeResult age_regression(const Model& m, const Dataset& cohort, const std::vector<double>& labels,
                                const AgeModel& age, int threads) {
  AgeResult res;
  std::vector<const Scan*> scans;
  for (const auto& s : cohort.scans) scans.push_back(&s);
  const auto pred = score_scans(m, scans, threads);
  std::vector<std::vector<double>> cov;
  for (std::size_t i = 0; i < scans.size(); ++i) {
    if (!scans[i]->age) throw SpecError("age: cohort scans carry no age (phantom.age.enabled must be true)");
    res.ages.push_back(*scans[i]->age);
    cov.push_back({*scans[i]->age});
    res.visual_counts.push_back(labels[i]);
    res.automated_counts.push_back(round_score(pred[i]));
  }
  stats::ZinbOptions opt;
  res.visual = stats::zinb_fit(res.visual_counts, cov, opt);
  res.automated = stats::zinb_fit(res.automated_counts, cov, opt);
  for (double from = age.min_age; from < age.max_age - 1e-9; from += 5) {
    AgeBin b;
    b.from = from;
    b.to = std::min(from + 5, age.max_age);
    std::vector<double> v, a;
    for (std::size_t i = 0; i < res.ages.size(); ++i) {
      const bool last = b.to >= age.max_age;
      if (res.ages[i] >= b.from && (res.ages[i] < b.to || (last && res.ages[i] <= b.to))) {
        v.push_back(res.visual_counts[i]);
        a.push_back(res.automated_counts[i]);
      }
    }
    b.n = static_cast<int>(v.size());
    auto mean_hw = [](const std::vector<double>& x, double& mean, double& hw) {
      mean = x.empty() ? 0 : std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
      double ss = 0;
      for (double e : x) ss += (e - mean) * (e - mean);
      hw = x.size() > 1 ? 1.959963984540054 * std::sqrt(ss / static_cast<double>(x.size() - 1) / static_cast<double>(x.size())) : 0;
    };
    mean_hw(v, b.visual_mean, b.visual_half_width);
    mean_hw(a, b.automated_mean, b.automated_half_width);
    res.bins.push_back(b);
  }
  return res;
}

// The cohort must be drawn with ages; labels are the true counts (the
// "visual" scores). Test labels are not involved: the cohort is its own set.
inline std::pair<Dataset, std::vector<double>> age_cohort(const ExperimentSpec& spec, int threads) {
  PhantomConfig cfg = spec.phantom;
  cfg.age.enabled = true;
  Dataset ds = generate_dataset(cfg, spec.preprocess, derive_seed(spec.seed, kAgeCohort),
                                static_cast<std::size_t>(spec.age_cohort), threads);
  const LabeledSplit all = labeled(ds, [&] {
    std::vector<std::size_t> idx(ds.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return idx;
  }());
  return {std::move(ds), all.labels};
}

inline AgeResult run_age(const ExperimentSpec& spec, RunContext& ctx) {
  const Model m = obtain_model(spec, ctx, nullptr);
  auto [cohort, labels] = age_cohort(spec, ctx.threads());
  ctx.manifest()["age_cohort"] = {{"n", cohort.size()}, {"skipped_seeds", cohort.skipped_seeds}};
  ctx.stage("cohort");
  PhantomConfig cfg = spec.phantom;
  cfg.age.enabled = true;
  AgeResult res = age_regression(m, cohort, labels, cfg.age, ctx.threads());
  Csv fits({"scores", "n", "rate_ratio", "rate_ratio_lower", "rate_ratio_upper", "slope", "slope_se", "dispersion",
            "inflation_logit", "log_likelihood", "iterations", "converged"});
  auto row = [&](const char* name, const stats::ZinbFit& f) {
    fits.row({name, std::to_string(res.ages.size()), fmt(f.rate_ratio), fmt(f.rate_ratio_lower),
              fmt(f.rate_ratio_upper), fmt(f.count_coef.at(1)), fmt(f.count_se.at(1)), fmt(f.dispersion),
              fmt(f.inflation_coef.at(0)), fmt(f.log_likelihood), std::to_string(f.iterations),
              f.converged ? "1" : "0"});
  };
  row("visual", res.visual);
  row("automated", res.automated);
  ctx.write("age.csv", fits.str());
  Csv bins({"age_from", "age_to", "n", "visual_mean", "visual_ci_half_width", "automated_mean",
            "automated_ci_half_width"});
  for (const auto& b : res.bins) {
    bins.row({fmt(b.from), fmt(b.to), std::to_string(b.n), fmt(b.visual_mean), fmt(b.visual_half_width),
              fmt(b.automated_mean), fmt(b.automated_half_width)});
  }
  ctx.write("age_bins.csv", bins.str());
  ctx.write("age.json", nlohmann::json{{"visual", stats::to_json(res.visual)}, {"automated", stats::to_json(res.automated)}}.dump(2) + "\n");
  return res;
}

// ---------------------------------------------------------------------------
// occlude / saliency
// ---------------------------------------------------------------------------

// Annotated probe scans (at least one lesion), with smooth masks kept.
inline Dataset probe_scans(const ExperimentSpec& spec, int threads) {
  return generate_dataset(spec.phantom, spec.preprocess, derive_seed(spec.seed, kProbe),
                          static_cast<std::size_t>(spec.probe_scans), threads, true,
                          [](const ScoredScan& s) { return s.score >= 1; });
}

struct OcclusionScan {
  std::string id;
  std::vector<interpret::CurvePoint> curve;
  std::vector<interpret::RandomControlPoint> random;
  bool monotone = false;
};

struct OcclusionResult {
  std::vector<OcclusionScan> scans;
  double monotone_fraction = 0;
  double mean_lesion_delta = 0;  // |score(k=1) - score(k=0)|
  double mean_random_delta = 0;  // single random block
  double ratio() const { return mean_random_delta > 0 ? mean_lesion_delta / mean_random_delta : INFINITY; }
};

inline OcclusionResult occlusion_study(const Model& m, const Dataset& probes, const interpret::OcclusionConfig& cfg,
                                       std::uint64_t seed, int threads) {
  OcclusionResult res;
  res.scans.resize(probes.size());
  parallel_for(probes.size(), threads, [&](std::size_t i) {
    const Scan& s = probes.scans[i];
    OcclusionScan& o = res.scans[i];
    o.id = s.id;
    o.curve = interpret::occlusion_curve(m, s.roi.image, s.roi.smooth_mask, s.annotations, cfg);
    o.random = interpret::random_occlusion(m, s.roi.image, s.roi.smooth_mask, s.annotations, cfg,
                                           derive_seed(seed, static_cast<std::uint64_t>(i)));
    o.monotone = interpret::non_increasing(o.curve);
  });
  int mono = 0, with_single = 0;
  for (const auto& o : res.scans) {
    mono += o.monotone;
    res.mean_lesion_delta += std::abs(o.curve.at(1).score - o.curve.at(0).score);
    for (const auto& r : o.random) {
      if (r.blocks == 1) {
        res.mean_random_delta += r.mean_abs_delta;
        ++with_single;
      }
    }
  }
  const double n = static_cast<double>(res.scans.size());
  res.monotone_fraction = mono / n;
  res.mean_lesion_delta /= n;
  res.mean_random_delta = with_single ? res.mean_random_delta / with_single : NAN;
  return res;
}

inline OcclusionResult run_occlude(const ExperimentSpec& spec, RunContext& ctx) {
  const Model m = obtain_model(spec, ctx, nullptr);
  const Dataset probes = probe_scans(spec, ctx.threads());
  ctx.manifest()["probes"] = {{"n", probes.size()}, {"skipped_seeds", probes.skipped_seeds}};
  ctx.stage("probes");
  const OcclusionResult res = occlusion_study(m, probes, spec.occlusion, derive_seed(spec.seed, kRandomOcclusion), ctx.threads());
  Csv curves({"scan_id", "k", "score"});
  Csv random({"scan_id", "blocks", "mean_score", "sd_score", "mean_abs_delta"});
  for (const auto& o : res.scans) {
    for (const auto& c : o.curve) curves.row({o.id, std::to_string(c.k), fmt(c.score)});
    for (const auto& r : o.random) {
      random.row({o.id, std::to_string(r.blocks), fmt(r.mean_score), fmt(r.sd_score), fmt(r.mean_abs_delta)});
    }
  }
  ctx.write("occlusion_curves.csv", curves.str());
  ctx.write("random_occlusion.csv", random.str());
  Csv summary({"scans", "monotone_fraction", "mean_lesion_delta", "mean_random_delta", "ratio"});
  summary.row({std::to_string(res.scans.size()), fmt(res.monotone_fraction), fmt(res.mean_lesion_delta),
               fmt(res.mean_random_delta), fmt(res.ratio())});
  ctx.write("occlusion_summary.csv", summary.str());
  return res;
}

struct SaliencyRow {
  std::string id;
  interpret::SaliencyContrast contrast;
};

struct SaliencyResult {
  std::vector<SaliencyRow> rows;
  std::vector<Volume> maps;
  double pass_fraction = 0;
};

inline SaliencyResult saliency_study(const Model& m, const Dataset& probes, int threads) {
  SaliencyResult res;
  res.rows.resize(probes.size());
  res.maps.resize(probes.size());
  parallel_for(probes.size(), threads, [&](std::size_t i) {
    const Scan& s = probes.scans[i];
    res.maps[i] = interpret::saliency(m, s.roi.image);
    res.rows[i] = {s.id, interpret::saliency_contrast(res.maps[i], s.roi.smooth_mask, s.annotations)};
  });
  int pass = 0;
  for (const auto& r : res.rows) pass += r.contrast.passes();
  res.pass_fraction = static_cast<double>(pass) / static_cast<double>(res.rows.size());
  return res;
}

inline SaliencyResult run_saliency(const ExperimentSpec& spec, RunContext& ctx) {
  const Model m = obtain_model(spec, ctx, nullptr);
  const Dataset probes = probe_scans(spec, ctx.threads());
  ctx.manifest()["probes"] = {{"n", probes.size()}, {"skipped_seeds", probes.skipped_seeds}};
  ctx.stage("probes");
  SaliencyResult res = saliency_study(m, probes, ctx.threads());
  std::filesystem::create_directories(ctx.dir() / "maps");
  Csv csv({"scan_id", "lesion_median", "background_p90", "pass"});
  for (std::size_t i = 0; i < res.rows.size(); ++i) {
    const auto& r = res.rows[i];
    write_volume(ctx.dir() / "maps" / (r.id + ".svol"), res.maps[i]);
    ctx.record("maps/" + r.id + ".svol");
    csv.row({r.id, fmt(r.contrast.lesion_median), fmt(r.contrast.background_p90), r.contrast.passes() ? "1" : "0"});
  }
  ctx.write("saliency.csv", csv.str());
  return res;
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

inline void run(const ExperimentSpec& spec, RunContext& ctx) {
  switch (spec.kind) {
    case Kind::Generate: run_generate(spec, ctx); break;
    case Kind::Train: run_train(spec, ctx); break;
    case Kind::Score: run_score(spec, ctx); break;
    case Kind::Compare: run_compare(spec, ctx); break;
    case Kind::Variants: run_variants(spec, ctx); break;
    case Kind::LearningCurve: run_learning_curve(spec, ctx); break;
    case Kind::Repro: run_repro(spec, ctx); break;
    case Kind::Age: run_age(spec, ctx); break;
    case Kind::Occlude: run_occlude(spec, ctx); break;
    case Kind::Saliency: run_saliency(spec, ctx); break;
  }
}

}  // namespace epvsq::experiments
