// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
//
//   acceptance [work_dir] [--oracles-only]
//
// Criteria 4 and 6-9 share the CNN trained by the comparison run (400 train /
// 100 validation phantoms); criterion 10 repeats that run in a second directory.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>

#include "epvsq/experiments.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace epvsq;
namespace ex = epvsq::experiments;
namespace t = epvsq::testing;
using TensorD = t::TensorD;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, double limit_s, const std::function<Outcome()>& body) {
  const auto start = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const bool in_time = limit_s <= 0 || secs <= limit_s;
  if (!in_time) o.detail += "; over the time limit";
  const bool pass = o.pass && in_time;
  failures += !pass;
  char head[96];
  if (id > 0) {
    std::snprintf(head, sizeof head, "C%-2d %s", id, pass ? "PASS" : "FAIL");
  } else {
    std::snprintf(head, sizeof head, "    %s", pass ? "PASS" : "FAIL");
  }
  std::printf("%s  %-26s %s  [%.1f s]\n", head, name.c_str(), o.detail.c_str(), secs);
  std::fflush(stdout);
}

std::string num(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

// ---------------------------------------------------------------------------
// 1. Autodiff
// ---------------------------------------------------------------------------

// FD check of one graph op: L = sum(r * op(leaves)).
double op_error(const std::vector<TensorD>& inputs, const std::function<Var(Graph<double>&, const std::vector<Var>&)>& op,
                Rng& rng) {
  std::vector<TensorD> values = inputs;
  TensorD r;
  auto forward = [&](Graph<double>& g, std::vector<Var>& leaves) {
    leaves.clear();
    for (const auto& v : values) leaves.push_back(g.input(v, true));
    const Var y = op(g, leaves);
    if (r.size() == 0) r = t::random_tensor(rng, g.value(y).shape());
    const Var l = sum(g, mul(g, y, g.input(r, false)));
    g.backward(l);
    return g.value(l)[0];
  };
  Graph<double> g;
  std::vector<Var> leaves;
  forward(g, leaves);
  double worst = 0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const TensorD grad = g.gradient(leaves[i]);
    auto f = [&](const TensorD& v) {
      const TensorD keep = values[i];
      values[i] = v;
      Graph<double> g2;
      std::vector<Var> l2;
      const double out = forward(g2, l2);
      values[i] = keep;
      return out;
    };
    worst = std::max(worst, t::check_gradient(f, values[i], grad).max_relative_error);
  }
  return worst;
}

// Values kept away from the ReLU kink so that central differences are smooth.
TensorD away_from_zero(Rng& rng, Shape s) {
  TensorD x = t::random_tensor(rng, s);
  for (auto& v : x.data()) v += v < 0 ? -0.1 : 0.1;
  return x;
}

Outcome criterion_autodiff() {
  Rng rng(1001);
  std::vector<std::pair<std::string, double>> errs;
  errs.emplace_back("conv3d", op_error({t::random_tensor(rng, {2, 5, 6, 5}), t::random_tensor(rng, {3, 2, 3, 3, 3}),
                                        t::random_tensor(rng, {3})},
                                       [](auto& g, const auto& l) { return conv3d(g, l[0], l[1], l[2]); }, rng));
  errs.emplace_back("maxpool3d", op_error({t::random_tensor(rng, {2, 6, 4, 8})},
                                          [](auto& g, const auto& l) { return maxpool3d(g, l[0], {2, 2, 2}); }, rng));
  errs.emplace_back("dense", op_error({t::random_tensor(rng, {7}), t::random_tensor(rng, {4, 7}), t::random_tensor(rng, {4})},
                                      [](auto& g, const auto& l) { return dense(g, l[0], l[1], l[2]); }, rng));
  errs.emplace_back("relu", op_error({away_from_zero(rng, {3, 4, 5})}, [](auto& g, const auto& l) { return relu(g, l[0]); }, rng));
  errs.emplace_back("flatten", op_error({t::random_tensor(rng, {2, 3, 4})}, [](auto& g, const auto& l) { return flatten(g, l[0]); }, rng));
  errs.emplace_back("add", op_error({t::random_tensor(rng, {5}), t::random_tensor(rng, {5})},
                                    [](auto& g, const auto& l) { return add(g, l[0], l[1]); }, rng));
  errs.emplace_back("mul", op_error({t::random_tensor(rng, {5}), t::random_tensor(rng, {5})},
                                    [](auto& g, const auto& l) { return mul(g, l[0], l[1]); }, rng));
  for (auto kind : {LossKind::MSE, LossKind::MCE, LossKind::MQE, LossKind::Tukey, LossKind::RMSE}) {
    errs.emplace_back("loss:" + std::string(to_string(kind)),
                      op_error({t::random_tensor(rng, {1})},
                               [kind](auto& g, const auto& l) { return loss(g, l[0], 1.7, {kind, 4.685}); }, rng));
  }
  double worst_layer = 0;
  std::string worst_name;
  for (const auto& [name, e] : errs) {
    if (e >= worst_layer) {
      worst_layer = e;
      worst_name = name;
    }
  }
  double worst_composite = 0;
  for (int trial = 0; trial < 5; ++trial) {
    worst_composite = std::max(worst_composite, t::composite_gradient_error(t::random_composite(rng)));
  }
  // Naive-loop oracles.
  const TensorD in = t::random_tensor(rng, {3, 7, 6, 9}), k = t::random_tensor(rng, {4, 3, 3, 3, 3}),
                b = t::random_tensor(rng, {4});
  const double conv = t::max_relative_difference(kernels::conv3d_forward(in, k, b), t::naive_conv3d(in, k, b));
  const TensorD pin = t::random_tensor(rng, {2, 8, 6, 4});
  const double pool = t::max_relative_difference(kernels::maxpool3d_forward(pin, {2, 2, 2}), t::naive_maxpool(pin, 2));
  const TensorD x = t::random_tensor(rng, {2, 3, 4}), w = t::random_tensor(rng, {5, 24}), c = t::random_tensor(rng, {5});
  const double dns = t::max_relative_difference(kernels::dense_forward(x, w, c), t::naive_matvec(w, x, c));
  const bool pass = worst_layer < 1e-4 && worst_composite < 1e-4 && conv < 1e-6 && pool < 1e-6 && dns < 1e-6;
  return {pass, "worst layer FD " + num(worst_layer, 2) + " (" + worst_name + "), composites " + num(worst_composite, 2) +
                    ", oracles conv " + num(conv, 2) + " pool " + num(pool, 2) + " dense " + num(dns, 2)};
}

// ---------------------------------------------------------------------------
// 2. Morphology, smoothing, SVOL
// ---------------------------------------------------------------------------

Outcome criterion_volgrid() {
  Rng rng(2002);
  int dil_ok = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const Dims d{3 + rng.below(10), 3 + rng.below(10), 3 + rng.below(10)};
    const auto m = t::random_mask(rng, d, rng.uniform(0.0, 0.08));
    const int it = static_cast<int>(rng.below(5));
    dil_ok += binary_dilate(m, it) == t::flood_dilation_oracle(m, it);
  }
  double gauss = 0;
  for (double sigma : {1.0, 2.0}) {
    Volume v(Dims{21, 19, 17}, Spacing{});
    v(10, 9, 8) = 1.0f;
    v(2, 3, 1) = 0.5f;  // near the border, where truncation matters
    const auto s = gaussian_smooth(v, sigma);
    const auto o = t::dense_gaussian_oracle(v, sigma);
    for (std::size_t i = 0; i < v.size(); ++i) gauss = std::max(gauss, std::abs(s[i] - o[i]));
  }
  int svol_ok = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Dims d{1 + rng.below(9), 1 + rng.below(9), 1 + rng.below(9)};
    const Volume v = t::random_volume(rng, d);
    svol_ok += t::bit_equal(svol::decode(svol::encode(v)).volume, v);
  }
  return {dil_ok == 50 && gauss < 1e-6 && svol_ok == 100,
          "dilation " + std::to_string(dil_ok) + "/50, gaussian max diff " + num(gauss, 2) + ", svol " +
              std::to_string(svol_ok) + "/100 bit-exact"};
}

// ---------------------------------------------------------------------------
// 3. Statistics
// ---------------------------------------------------------------------------

Outcome criterion_stats() {
  double icc_diff = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto [a, b] = t::random_icc_table(seed);
    icc_diff = std::max(icc_diff, std::abs(stats::icc(a, b) - t::icc_oracle(a, b, true)));
  }
  const std::vector<double> a{1, 2, 3, 4}, b{3, 4, 5, 6};
  const double offset = stats::icc(a, b);
  const bool offset_ok = std::abs(offset - t::icc_oracle(a, b, true)) < 1e-10 && std::abs(offset - 0.4545) < 5e-5;
  const double r = stats::pearson(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2, 4});
  const double rho = stats::spearman(std::vector<double>{1, 2, 3}, std::vector<double>{3, 1, 2});
  const bool corr_ok = std::abs(r - 0.98198) < 1e-5 && std::abs(rho + 0.5) < 1e-5;
  const auto w0 = stats::williams_test(0.6, 0.6, 0.5, 100);
  const auto w1 = stats::williams_test(0.75, 0.63, 0.7, 100), w2 = stats::williams_test(0.63, 0.75, 0.7, 100);
  const bool sym = w0.t == 0 && std::abs(w0.p - 1) < 1e-12 && std::abs(w1.t + w2.t) < 1e-12;
  const auto obs = stats::williams_test(0.75, 0.63, 0.7, 40);
  const auto mc = t::williams_monte_carlo(0.75, 0.63, 0.7, 40, 20000, 77);
  const bool mc_ok = std::abs(obs.p - mc.p) <= 3 * mc.se;
  const double b1 = std::log(1.3) / 10;
  const auto d = t::simulate_zinb(1000, std::log(3.0) - b1 * 67.5, b1, 0.3, 2.0, 2024);
  const auto fit = stats::zinb_fit(d.y, d.x);
  const bool zinb_ok = fit.converged && fit.rate_ratio >= 1.2 && fit.rate_ratio <= 1.4;
  return {icc_diff < 1e-10 && offset_ok && corr_ok && sym && mc_ok && zinb_ok,
          "icc max diff " + num(icc_diff, 2) + ", offset " + num(offset) + ", r " + num(r, 6) + ", rho " + num(rho) +
              ", williams p " + num(obs.p) + " vs mc " + num(mc.p) + "+-" + num(mc.se, 2) + ", zinb rr " +
              num(fit.rate_ratio)};
}

// ---------------------------------------------------------------------------
// Shared comparison run
// ---------------------------------------------------------------------------

struct Shared {
  ex::ExperimentSpec spec;
  fs::path run1, run2;
  std::optional<ex::CompareResult> compare;
  std::optional<ex::Dataset> data;  // same scans the comparison run used
};

ex::CompareResult compare_in(const ex::ExperimentSpec& spec, const fs::path& dir) {
  fs::remove_all(dir);
  ex::RunContext ctx(dir, spec, 1);
  auto r = ex::run_compare(spec, ctx);
  ctx.finish("ok");
  return r;
}

const stats::EvalReport& row(const ex::CompareResult& r, std::string_view method) {
  for (const auto& rep : r.reports) {
    if (rep.method == method) return rep;
  }
  throw UsageError("no row for " + std::string(method));
}

Outcome criterion_compare(Shared& sh) {
  sh.compare = compare_in(sh.spec, sh.run1);
  const auto& c = *sh.compare;
  const auto& cnn = row(c, "cnn");
  const auto& a = row(c, "intensity");
  const auto& comp = row(c, "components");
  const auto& bow = row(c, "bow_forest");
  const bool beats_a = cnn.pearson > a.pearson && cnn.spearman > a.spearman && cnn.icc > a.icc && cnn.mse < a.mse;
  const bool pass = cnn.pearson >= 0.85 && cnn.icc >= 0.80 && beats_a && cnn.icc > bow.icc && comp.spearman >= 0.9;
  return {pass, "cnn r " + num(cnn.pearson) + " icc " + num(cnn.icc) + " mse " + num(cnn.mse) + "; intensity r " +
                    num(a.pearson) + " icc " + num(a.icc) + " mse " + num(a.mse) + "; bow icc " + num(bow.icc) +
                    "; components rho " + num(comp.spearman)};
}

// ---------------------------------------------------------------------------
// 5. Learning curve
// ---------------------------------------------------------------------------

Outcome criterion_learning_curve(const Shared& sh, const fs::path& dir) {
  ex::ExperimentSpec spec = sh.spec;
  spec.kind = ex::Kind::LearningCurve;
  fs::remove_all(dir);
  ex::RunContext ctx(dir, spec, 1);
  const auto res = ex::run_learning_curve(spec, ctx);
  ctx.finish("ok");
  const bool pass = ex::learning_curve_ok(res.summary, 0.15);
  std::string d = "mean icc";
  for (const auto& s : res.summary) {
    d += " " + std::to_string(s.size) + ":" + num(s.icc, 3);
    if (s.icc_ci) d += "[" + num(s.icc_ci->lower, 3) + "," + num(s.icc_ci->upper, 3) + "]";
  }
  return {pass, d};
}

// ---------------------------------------------------------------------------
// 6-9 and flip-y, on the comparison model
// ---------------------------------------------------------------------------

Outcome criterion_occlusion(const Shared& sh) {
  const Model& m = sh.compare->cnn.model;
  const ex::Dataset probes = ex::probe_scans(sh.spec, 1);
  interpret::OcclusionConfig cfg = sh.spec.occlusion;
  cfg.random_max_blocks = 1;
  const auto res = ex::occlusion_study(m, probes, cfg, derive_seed(sh.spec.seed, ex::kRandomOcclusion), 1);
  bool zero_exact = true;
  for (std::size_t i = 0; i < probes.size(); ++i) {
    const auto& s = probes.scans[i];
    const Volume same = interpret::occlude(s.roi.image, s.roi.smooth_mask, {}, cfg);
    zero_exact = zero_exact && std::ranges::equal(same.data(), s.roi.image.data()) &&
                 res.scans[i].curve.at(0).score == score(m, s.roi.image);
  }
  const bool pass = probes.size() == 20 && res.monotone_fraction >= 0.9 && res.ratio() >= 4 && zero_exact;
  return {pass, "monotone " + num(res.monotone_fraction * 100, 3) + "% of " + std::to_string(probes.size()) +
                    ", lesion |d| " + num(res.mean_lesion_delta) + " vs random |d| " + num(res.mean_random_delta) +
                    " (x" + num(res.ratio(), 3) + "), k=0 exact " + (zero_exact ? "yes" : "no")};
}

Outcome criterion_saliency(const Shared& sh) {
  const ex::Dataset probes = ex::probe_scans(sh.spec, 1);
  const auto res = ex::saliency_study(sh.compare->cnn.model, probes, 1);
  return {probes.size() == 20 && res.pass_fraction >= 0.8,
          "lesion median > background p90 on " + num(res.pass_fraction * 100, 3) + "% of " +
              std::to_string(probes.size())};
}

Outcome criterion_repro(Shared& sh) {
  const auto& spec = sh.spec;
  const auto pairs = ex::rescan_pairs(spec.phantom, spec.preprocess, derive_seed(spec.seed, ex::kRescanPairs), 30, 1);
  const auto big = ex::repro_scores(sh.compare->cnn.model, pairs, stats::IccKind::AbsoluteAgreement);
  // Model on 40 scans (32 train / 8 validation), drawn as the repro experiment does.
  const std::uint64_t seed = derive_seed(derive_seed(spec.seed, ex::kReproSplit), std::uint64_t{40} << 16);
  const auto p = ex::permutation(sh.data->size(), seed);
  const auto tr = ex::labeled(*sh.data, ex::slice(p, 0, 32)), va = ex::labeled(*sh.data, ex::slice(p, 32, 8));
  const auto small_model = ex::train_cnn(spec.network, spec.train, tr, va, seed);
  const auto small = ex::repro_scores(small_model.model, pairs, stats::IccKind::AbsoluteAgreement);
  return {big.icc >= 0.9 && big.icc > small.icc,
          "30 pairs: icc(400) " + num(big.icc) + ", icc(40) " + num(small.icc)};
}

Outcome criterion_age(const Shared& sh) {
  auto [cohort, labels] = ex::age_cohort(sh.spec, 1);
  PhantomConfig cfg = sh.spec.phantom;
  cfg.age.enabled = true;
  const auto res = ex::age_regression(sh.compare->cnn.model, cohort, labels, cfg.age, 1);
  const double gap = std::abs(res.automated.rate_ratio - res.visual.rate_ratio);
  return {gap <= 0.1 && res.visual.converged && res.automated.converged,
          std::to_string(cohort.size()) + " scans: visual rr " + num(res.visual.rate_ratio) + " [" +
              num(res.visual.rate_ratio_lower) + "," + num(res.visual.rate_ratio_upper) + "], automated rr " +
              num(res.automated.rate_ratio) + ", gap " + num(gap, 3)};
}

Outcome criterion_flip_y(const Shared& sh) {
  const auto p = ex::permutation(sh.data->size(), derive_seed(sh.spec.seed, ex::kSplit));
  const auto tr = static_cast<std::size_t>(sh.spec.splits.train + sh.spec.splits.val);
  const auto test = ex::sealed(*sh.data, ex::slice(p, tr, static_cast<std::size_t>(sh.spec.splits.test)));
  RigidTransform flip;
  flip.flip = {false, true, false};
  std::vector<double> a, b;
  for (const auto* s : test.scans) {
    a.push_back(score(sh.compare->cnn.model, s->roi.image));
    b.push_back(score(sh.compare->cnn.model, rigid_resample(s->roi.image, flip)));
  }
  const double r = stats::pearson(a, b);
  return {r >= 0.95, "pearson(score(s), score(flip_y(s))) over " + std::to_string(a.size()) + " test scans " + num(r)};
}

// ---------------------------------------------------------------------------
// 10. Determinism
// ---------------------------------------------------------------------------

Outcome criterion_determinism(const Shared& sh) {
  compare_in(sh.spec, sh.run2);
  std::vector<std::string> files{"metrics.csv", "williams.csv", "predictions.csv", "metrics.json"};
  for (const auto& e : fs::directory_iterator(sh.run1 / "models")) files.push_back("models/" + e.path().filename().string());
  std::sort(files.begin(), files.end());
  int same = 0;
  std::string differing;
  for (const auto& f : files) {
    const bool eq = fs::exists(sh.run2 / f) && read_file(sh.run1 / f) == read_file(sh.run2 / f);
    same += eq;
    if (!eq) differing += " " + f;
  }
  return {same == static_cast<int>(files.size()),
          std::to_string(same) + "/" + std::to_string(files.size()) + " files byte-identical" +
              (differing.empty() ? "" : "; differ:" + differing)};
}

}  // namespace

int main(int argc, char** argv) {
  fs::path work = fs::temp_directory_path() / "epvsq_acceptance";
  bool oracles_only = false;
  for (int i = 1; i < argc; ++i) {
    if (std::string(argv[i]) == "--oracles-only") {
      oracles_only = true;
    } else {
      work = argv[i];
    }
  }
  fs::create_directories(work);
  std::printf("acceptance: work dir %s\n", work.string().c_str());

  report(1, "autodiff", 60, criterion_autodiff);
  report(2, "morphology/smoothing/svol", 60, criterion_volgrid);
  report(3, "statistics", 300, criterion_stats);
  if (oracles_only) return failures ? 1 : 0;

  Shared sh;
  sh.spec.kind = ex::Kind::Compare;
  sh.run1 = work / "compare_1";
  sh.run2 = work / "compare_2";
  report(4, "quantification", 1800, [&] { return criterion_compare(sh); });
  if (!sh.compare) {
    std::printf("comparison run failed; criteria 6-10 cannot run\n");
    return 1;
  }
  sh.data = ex::generate_dataset(sh.spec.phantom, sh.spec.preprocess, derive_seed(sh.spec.seed, ex::kDataset),
                                 static_cast<std::size_t>(sh.spec.dataset_size), 1);
  report(5, "learning curve", 5400, [&] { return criterion_learning_curve(sh, work / "learning_curve"); });
  report(6, "occlusion", 600, [&] { return criterion_occlusion(sh); });
  report(7, "saliency", 300, [&] { return criterion_saliency(sh); });
  report(8, "reproducibility", 900, [&] { return criterion_repro(sh); });
  report(9, "age regression", 300, [&] { return criterion_age(sh); });
  report(10, "determinism", 0, [&] { return criterion_determinism(sh); });
  report(0, "flip-y consistency", 0, [&] { return criterion_flip_y(sh); });

  std::printf("acceptance: %s (%d failing)\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
