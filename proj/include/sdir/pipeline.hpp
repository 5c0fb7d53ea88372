#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "sdir/perturb.hpp"
#include "sdir/train_lm.hpp"

namespace sdir {

// Malformed or inconsistent configuration. The CLI maps this to exit code 2.
class ConfigError : public InputError {
 public:
  using InputError::InputError;
};

inline constexpr int kConfigSchemaVersion = 1;

struct SaeSetup {
  SaeVariant variant = SaeVariant::local;
  std::vector<double> lambdas;
  std::size_t steps = 0;
};

// Every setting that influences an artifact. Sectioned key = value text:
//
//   [meta]      schema_version, seed
//   [corpus]    path (empty: synthetic), synthetic_bytes
//   [model]     n_layers, d_model, n_heads, d_head, d_ff, seq_len
//   [train]     steps, batch_size, learning_rate, warmup_steps, weight_decay
//   [capture]   hook_layer, token_budget, stride, exclude_position_zero
//   [gaussian]  distance_pairs
//   [sae]       n_features, learning_rate, batch_rows, batch_sequences, beta,
//               dead_steps, alive_rate, local_steps, e2e_steps, e2e_ds_steps,
//               local_lambdas, e2e_lambdas, e2e_ds_lambdas, figure2_local_index
//   [sweep]     kinds, alpha_points, alpha_curvature, alpha_max_ratio, stride,
//               max_tokens, downstream_layer, patch_all_positions
//   [substitute] stride, max_tokens
struct ExperimentConfig {
  int schema_version = kConfigSchemaVersion;
  std::uint64_t seed = 0;

  std::filesystem::path corpus_path;
  std::size_t synthetic_bytes = 1'000'000;

  ModelConfig model;  // vocab_size comes from the corpus
  LmTrainOptions train;

  std::size_t hook_layer = 4;
  std::size_t capture_budget = 200'000;
  std::size_t capture_stride = 1;
  bool capture_exclude_position_zero = false;

  std::size_t distance_pairs = 20'000;

  SaeTrainOptions sae;
  std::vector<SaeSetup> saes;  // local, e2e, e2e_ds in that order
  std::size_t figure2_local_index = 0;

  std::vector<DirectionKind> sweep_kinds;
  std::size_t alpha_points = 64;
  double alpha_curvature = 3.0;
  double alpha_max_ratio = kAlphaMaxOverPairwiseDistance;
  std::size_t sweep_stride = 8;
  std::size_t sweep_max_tokens = 12'000;
  std::optional<std::size_t> downstream_layer;  // default: last resid_pre
  bool sweep_patch_all_positions = false;

  std::size_t substitute_stride = 8;
  std::size_t substitute_max_tokens = 12'000;

  std::size_t downstream() const;

  // Canonical text of every field; the config hash is its FNV-1a.
  std::string canonical() const;
  std::uint64_t hash() const;

  void validate() const;
};

ExperimentConfig default_config();
// Throws ConfigError naming the section.key at fault.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

struct RunOptions {
  std::filesystem::path out_dir;
  std::size_t workers = 1;
  std::function<void(const std::string&)> log;  // progress lines; may be empty
};

struct DistanceSummary {
  double mean = 0.0;
  double standard_error = 0.0;
  std::size_t n_pairs = 0;
};

// Runs pipeline stages against an output directory. Each stage reuses an
// artifact already on disk when its sidecar records the same config hash and
// recomputes it otherwise; every stage loads its inputs from disk so that a
// resumed run sees exactly the bytes a fresh run would.
class Pipeline {
 public:
  Pipeline(ExperimentConfig config, RunOptions options);

  const ExperimentConfig& config() const { return config_; }
  const std::filesystem::path& out_dir() const { return opt_.out_dir; }

  // Stage artifacts (paths relative to out_dir):
  //   model.bin model.json, store.act store.json, gaussian.bin gaussian.json,
  //   sae_<variant>_<i>.bin/.json, <name>.csv + <name>.manifest.json
  std::filesystem::path train_model();
  std::filesystem::path capture_store();
  std::filesystem::path fit_gaussian_model();
  std::vector<std::filesystem::path> train_saes(std::optional<SaeVariant> only = std::nullopt);

  std::filesystem::path run_sweep(const std::string& name, std::span<const DirectionKind> kinds);
  std::filesystem::path run_substitute(const std::string& name);
  std::filesystem::path run_figure(int figure);
  // Merges every <name>.csv with a manifest into report.csv; refuses
  // manifests that disagree on the model fingerprint.
  std::filesystem::path run_report();

  // Loaded artifacts, for callers that inspect results directly.
  TransformerModel load_model() const;
  ActivationStore load_store() const;
  GaussianModel load_gaussian() const;
  DistanceSummary load_distance() const;
  std::vector<TokenSequence> windows() const;
  AlphaGrid alpha_grid() const;
  std::vector<std::uint32_t> evaluation_sequences() const;

  std::vector<std::string> warnings() const { return warnings_; }

 private:
  bool up_to_date(const std::filesystem::path& sidecar) const;
  void log(const std::string& line) const;
  const std::string& corpus_text() const;

  ExperimentConfig config_;
  RunOptions opt_;
  mutable std::optional<std::string> text_;
  mutable std::optional<Tokenizer> tokenizer_;
  std::vector<std::string> warnings_;
};

}  // namespace sdir
