#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "sdir/rng.hpp"
#include "sdir/sae.hpp"
#include "sdir/store.hpp"

namespace sdir {

// Multivariate normal matched to the mean and covariance of real activations.
struct GaussianModel {
  Vec mean;
  Mat covariance;
  Mat cholesky;  // lower triangular, L L^T = covariance + jitter * I
  double jitter = 0.0;
  std::size_t n_samples = 0;
  HookPoint hook;
  std::uint64_t model_fingerprint = 0;

  std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }

  // Shared tensor container, magic "SDIRGAU1". The factor is recomputed on load.
  void save(const std::filesystem::path& path) const;
  static GaussianModel load(const std::filesystem::path& path);
};

// Sample mean and covariance (denominator N-1), both rounded to f32 so that a
// saved model reloads bit-identically. The Cholesky factor uses the smallest
// jitter in {0, 1e-8, 1e-6, 1e-4} * trace / d that succeeds. A zero covariance
// gets a zero factor, so sampling returns the mean.
GaussianModel fit_gaussian(const Mat& rows, std::string* warning = nullptr);
GaussianModel fit_gaussian(const ActivationStore& store, std::string* warning = nullptr);

Vec sample_cov_random(const GaussianModel& gm, Rng& rng);
Vec sample_cov_random(const GaussianModel& gm, const Vec& z);

enum class DirectionKind {
  isotropic_random,
  cov_random_difference,
  cov_random_mixture,
  real_difference,
  real_mixture,
  sae_error,
  sae_feature,
};

std::string to_string(DirectionKind kind);
DirectionKind parse_direction_kind(std::string_view s);
bool uses_base(DirectionKind kind);

struct DirectionSpec {
  DirectionKind kind = DirectionKind::isotropic_random;
  const GaussianModel* gaussian = nullptr;
  const ActivationStore* store = nullptr;
  const Sae* sae = nullptr;

  // Throws InputError when a source required by `kind` is missing.
  void validate() const;
};

// The activation being perturbed. `store_index` identifies its row in the
// store, if present, so that real_* kinds can exclude it.
struct BaseActivation {
  Vec activation;
  std::optional<std::size_t> store_index;
  // sae_feature: per-feature flag, 1 if the feature fires anywhere in the sequence.
  std::vector<std::uint8_t> active_in_sequence;
};

struct Direction {
  Vec vector;  // unit norm
  DirectionKind kind = DirectionKind::isotropic_random;
  double raw_length = 0.0;  // norm before normalization
  std::optional<std::size_t> feature_id;
  bool uses_base = false;
  std::vector<std::size_t> source_rows;  // store rows used by real_* kinds
};

// Realizes one direction. Returns nullopt when the token must be skipped:
// sae_error with an exact reconstruction, or sae_feature with no candidate.
// A zero-length difference is redrawn up to 8 times before NumericError.
std::optional<Direction> make_direction(const DirectionSpec& spec, const BaseActivation* base,
                                        Rng& rng);

inline constexpr double kExactReconstructionEpsilon = 1e-10;

// (SAE(x) - x) / eps with eps = ||SAE(x) - x||; nullopt when eps < 1e-10.
std::optional<Direction> sae_error_direction(const Sae& sae, std::span<const double> base);

// Uniform over features that are alive but not active in the sequence; nullopt
// when there is none.
std::optional<Direction> sae_feature_direction(const Sae& sae,
                                               std::span<const std::uint8_t> active_in_sequence,
                                               Rng& rng);

// Per-feature flag: fires (> threshold) on any row of `sequence_activations`.
std::vector<std::uint8_t> sequence_feature_activity(const Sae& sae, const Mat& sequence_activations);

// Synthetic data obeying the linear representation hypothesis:
// x = bias + sum_i f_i d_i with unit feature rows d_i.
struct LrhDictionary {
  Vec bias;
  Mat features;  // F x d, unit rows

  static LrhDictionary random(std::size_t d, std::size_t n_features, Rng& rng);
  // Sparse non-negative coefficients.
  Vec sample_coefficients(Rng& rng, double density = 0.3) const;
  Vec activation(const Vec& coefficients) const;
};

// Norm of the part of x1 - x2 outside the row space of the dictionary.
double lrh_span_check(const LrhDictionary& dict, std::span<const double> x1,
                      std::span<const double> x2);

}  // namespace sdir
