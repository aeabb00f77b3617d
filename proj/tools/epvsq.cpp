// epvsq: command-line front end for the experiment harness.
//
//   epvsq compare --config configs/compare.json --out runs/compare
//
// Exit codes: 0 success, 2 spec/usage error, 3 runtime failure.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>

#include "epvsq/experiments.hpp"

namespace ex = epvsq::experiments;

namespace {

constexpr int kExitSpec = 2;
constexpr int kExitRuntime = 3;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  int threads = 1;
  std::string out;
  std::string model;
  bool print_spec = false;
};

ex::ExperimentSpec resolve(ex::Kind kind, const Options& o) {
  ex::ExperimentSpec spec;
  if (!o.config.empty()) spec = ex::load_spec(o.config);
  spec.kind = kind;
  if (o.seed) spec.seed = *o.seed;
  if (!o.model.empty()) spec.model = o.model;
  spec.validate();
  return spec;
}

int execute(ex::Kind kind, const Options& o) {
  ex::ExperimentSpec spec;
  try {
    spec = resolve(kind, o);
  } catch (const epvsq::SpecError& e) {
    std::cerr << "epvsq: spec error: " << e.what() << "\n";
    return kExitSpec;
  } catch (const epvsq::ConfigError& e) {
    std::cerr << "epvsq: spec error: " << e.what() << "\n";
    return kExitSpec;
  } catch (const epvsq::Error& e) {
    std::cerr << "epvsq: cannot read config: " << e.what() << "\n";
    return kExitSpec;
  }
  if (o.print_spec) {
    std::cout << ex::to_json(spec).dump(2) << "\n";
    return 0;
  }
  const std::string out = o.out.empty() ? "runs/" + std::string(ex::to_string(kind)) : o.out;
  std::optional<ex::RunContext> ctx;
  try {
    ctx.emplace(out, spec, o.threads);
    ex::run(spec, *ctx);
    ctx->finish("ok");
    std::cerr << "epvsq: " << ex::to_string(kind) << " done, outputs in " << out << "\n";
    return 0;
  } catch (const std::exception& e) {
    const bool spec_problem = dynamic_cast<const epvsq::SpecError*>(&e) || dynamic_cast<const epvsq::ConfigError*>(&e);
    if (ctx) {
      try {
        ctx->finish("failed", e.what());
      } catch (...) {
      }
    }
    std::cerr << "epvsq: " << (spec_problem ? "spec error: " : "failed: ") << e.what() << "\n";
    return spec_problem ? kExitSpec : kExitRuntime;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EPVS quantification toolkit: phantoms, regression CNN, baselines and studies"};
  app.set_version_flag("--version", std::string(ex::kToolkitVersion));
  app.require_subcommand(1, 1);

  Options opt;
  app.add_option("--config", opt.config, "experiment spec (JSON) or a previous run's manifest.json")
      ->check(CLI::ExistingFile);
  app.add_option("--seed", opt.seed, "master seed (overrides the config)");
  app.add_option("--threads", opt.threads, "worker threads; 1 gives byte-identical reruns")
      ->check(CLI::Range(1, 1024));
  app.add_option("--out", opt.out, "output directory (default runs/<subcommand>)");
  app.add_option("--model", opt.model, "existing model stem (path without .tnsr/.json)");
  app.add_flag("--print-spec", opt.print_spec, "print the resolved spec and exit");

  const std::vector<std::pair<ex::Kind, std::string>> help{
      {ex::Kind::Generate, "write phantom scans with their scores"},
      {ex::Kind::Train, "train the CNN on the train/validation split"},
      {ex::Kind::Score, "score the test split"},
      {ex::Kind::Compare, "CNN against the four baselines, with Williams tests"},
      {ex::Kind::Variants, "architecture, loss and augmentation sweep"},
      {ex::Kind::LearningCurve, "test metrics against training-set size"},
      {ex::Kind::Repro, "score agreement on scan-rescan pairs"},
      {ex::Kind::Age, "ZINB age regression of true and automated counts"},
      {ex::Kind::Occlude, "lesion occlusion curves with a random-block control"},
      {ex::Kind::Saliency, "gradient saliency maps and their lesion contrast"}};
  std::optional<ex::Kind> chosen;
  // Global options may appear after the subcommand too (inherited by subcommands).
  app.fallthrough();
  for (const auto& [kind, text] : help) {
    auto* sub = app.add_subcommand(std::string(ex::to_string(kind)), text);
    sub->callback([&chosen, kind = kind] { chosen = kind; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitSpec;
  }
  return execute(*chosen, opt);
}
