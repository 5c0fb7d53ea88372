// Command-line driver for the sensitive-directions pipeline.
#include <chrono>
#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "sdir/pipeline.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sensitive-direction experiments on a toy transformer"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::size_t workers = 1;
  std::string out_dir;
  app.add_option("--config", config_path, "Experiment config file")->required();
  app.add_option("--seed", seed, "Override meta.seed");
  app.add_option("--workers", workers, "Worker threads; results do not depend on this")
      ->check(CLI::PositiveNumber);
  app.add_option("--out", out_dir, "Output directory for artifacts")->required();

  app.add_subcommand("train-model", "Train the toy language model");
  app.add_subcommand("capture", "Capture residual-stream activations at the hook");
  app.add_subcommand("fit-gaussian", "Fit the covariance-matched Gaussian and the pairwise distance");
  auto* train_sae = app.add_subcommand("train-sae", "Train the configured SAEs");
  std::string variant;
  train_sae->add_option("--variant", variant, "Only this variant (local, e2e, e2e_ds)");
  app.add_subcommand("sweep", "Perturbation-length sweeps for sweep.kinds");
  app.add_subcommand("substitute", "Fixed-distance substitutions for every SAE");
  app.add_subcommand("report", "Merge experiment CSVs into report.csv");
  auto* repro = app.add_subcommand("repro-figure", "Run the pipeline slice behind one figure");
  int figure = 0;
  repro->add_option("figure", figure, "Figure number")->required()->check(CLI::Range(1, 5));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  const auto start = std::chrono::steady_clock::now();
  auto log = [start](const std::string& line) {
    const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::fprintf(stderr, "[%7.1fs] %s\n", t, line.c_str());
  };

  try {
    sdir::ExperimentConfig config = sdir::load_config(config_path);
    if (seed) config.seed = *seed;
    sdir::Pipeline pipeline(config, {out_dir, workers, log});
    log("config hash " + sdir::hex64(config.hash()) + ", seed " + std::to_string(config.seed));

    std::filesystem::path result;
    const std::string cmd = app.get_subcommands().front()->get_name();
    if (cmd == "train-model") result = pipeline.train_model();
    else if (cmd == "capture") result = pipeline.capture_store();
    else if (cmd == "fit-gaussian") result = pipeline.fit_gaussian_model();
    else if (cmd == "train-sae") {
      std::optional<sdir::SaeVariant> only;
      if (!variant.empty()) {
        try {
          only = sdir::parse_sae_variant(variant);
        } catch (const sdir::InputError& e) {
          throw sdir::ConfigError(e.what());
        }
      }
      const auto paths = pipeline.train_saes(only);
      if (paths.empty()) throw sdir::ConfigError("config: no SAEs configured (sae.*_lambdas are empty)");
      result = paths.back();
    } else if (cmd == "sweep") {
      const auto kinds = pipeline.config().sweep_kinds;
      if (kinds.empty()) throw sdir::ConfigError("config: sweep.kinds is empty");
      result = pipeline.run_sweep("sweep", kinds);
    } else if (cmd == "substitute") result = pipeline.run_substitute("substitute");
    else if (cmd == "report") result = pipeline.run_report();
    else if (cmd == "repro-figure") result = pipeline.run_figure(figure);

    for (const auto& w : pipeline.warnings()) log("warning: " + w);
    std::cout << result.string() << '\n';
    return kExitOk;
  } catch (const sdir::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
}
