#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sdir/directions.hpp"

namespace sdir {

// KL(P || Q) in nats from two logit vectors, via stable log-softmax; clamped at 0.
double kl_divergence(std::span<const double> p_logits, std::span<const double> q_logits);

struct AlphaGrid {
  std::vector<double> values;  // values[0] == 0, strictly increasing

  // n points, alpha_i = max * (exp(k i/(n-1)) - 1) / (exp(k) - 1): dense near 0.
  // n == 1 gives {0}.
  static AlphaGrid geometric(std::size_t n, double max_alpha, double curvature = 3.0);
  static AlphaGrid from_values(std::vector<double> values);
  void validate() const;
};

// Ratio of the largest perturbation length to the mean pairwise activation distance.
inline constexpr double kAlphaMaxOverPairwiseDistance = 101.0 / 81.59;

struct SkipCounters {
  std::map<std::string, std::size_t> by_reason;

  void add(const std::string& reason, std::size_t n = 1) { by_reason[reason] += n; }
  std::size_t total() const;
};

struct CurvePoint {
  double alpha = 0.0;
  double mean_kl = 0.0;
  double se_kl = 0.0;
  std::optional<double> mean_downstream_l2;
  std::size_t n_tokens = 0;
};

struct SweepResult {
  DirectionKind kind = DirectionKind::isotropic_random;
  HookPoint hook;
  std::optional<std::size_t> downstream_layer;
  std::string sae_variant;        // empty unless the direction comes from an SAE
  std::optional<double> sae_l0;
  std::vector<CurvePoint> points;
  SkipCounters skips;
  std::size_t tokens_visited = 0;
  std::vector<std::string> warnings;
};

struct SweepOptions {
  HookPoint hook;
  std::optional<std::size_t> downstream_layer;
  std::size_t stride = 8;       // positions t with t % stride == 0
  std::size_t max_tokens = 0;   // 0 = every selected position
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  // Off: one patched position per forward, KL read there. On: every selected
  // position of a sequence is patched together, KL read at each of them.
  bool patch_all_positions = false;
};

// Seed of the random stream for one token of one sweep.
std::uint64_t token_seed(std::uint64_t seed, std::uint32_t sequence_id, std::size_t position,
                         std::string_view label);

// Visits sequences in the given order. For each selected token a single
// direction is drawn and x + alpha * d is patched at (hook, t) for every alpha;
// KL is read at position t against the clean prediction. When spec.store is
// set, each base token's row is looked up by (sequence, position) so that
// real_* kinds can exclude it.
SweepResult sweep(const TransformerModel& model, std::span<const TokenSequence> corpus,
                  std::span<const std::uint32_t> sequence_ids, const DirectionSpec& spec,
                  const AlphaGrid& grid, const SweepOptions& options);

inline const std::vector<std::string>& substitution_types() {
  static const std::vector<std::string> types{"sae_reconstruction", "isotropic_random_at_eps",
                                              "cov_random_mixture_at_eps", "real_mixture_at_eps"};
  return types;
}

struct SubstitutionStat {
  std::string type;
  double mean_kl = 0.0;
  double se_kl = 0.0;
  std::size_t n_tokens = 0;
};

struct SubstitutionResult {
  HookPoint hook;
  std::string sae_variant;
  double sae_l0 = 0.0;
  std::vector<SubstitutionStat> stats;  // in substitution_types() order
  double mean_epsilon = 0.0;
  double max_distance_error = 0.0;  // max | ||point - x|| - eps | over baseline points
  SkipCounters skips;
  std::size_t tokens_visited = 0;
};

// Per token: eps = ||SAE(x) - x||, then patch SAE(x) and x + eps * d for an
// isotropic, a cov-random mixture and a real mixture direction.
SubstitutionResult substitute(const TransformerModel& model, std::span<const TokenSequence> corpus,
                              std::span<const std::uint32_t> sequence_ids, const Sae& sae,
                              const GaussianModel& gm, const ActivationStore& store,
                              const SweepOptions& options);

// ---------------------------------------------------------------------------
// CSV artifacts.

struct CsvRow {
  std::string experiment_id;
  std::string direction_kind;
  std::string sae_variant;
  std::optional<double> sae_l0;
  std::string alpha_or_subst_type;
  double mean_kl = 0.0;
  double se_kl = 0.0;
  std::optional<double> mean_downstream_l2;
  std::size_t n_tokens = 0;

  bool operator==(const CsvRow&) const = default;
};

const std::vector<std::string>& csv_columns();

std::vector<CsvRow> csv_rows(const SweepResult& r, const std::string& experiment_id);
std::vector<CsvRow> csv_rows(const SubstitutionResult& r, const std::string& experiment_id);

// Shortest round-trip decimal; empty for absent values.
std::string format_number(double v);

void write_csv(const std::filesystem::path& path, std::span<const CsvRow> rows);
std::vector<CsvRow> read_csv(const std::filesystem::path& path);

}  // namespace sdir
