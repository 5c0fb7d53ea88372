#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sdir/model.hpp"
#include "sdir/store.hpp"

namespace sdir {

enum class SaeVariant { local, e2e, e2e_ds };

std::string to_string(SaeVariant v);
SaeVariant parse_sae_variant(std::string_view s);

// A feature counts as firing when its activation exceeds this.
inline constexpr double kFeatureActiveThreshold = 1e-8;

// f = relu((x - b_dec) W_enc + b_enc),  x_hat = f W_dec + b_dec.
// Rows of W_dec are the feature directions.
struct Sae {
  Mat w_enc;  // d_model x n_features
  Vec b_enc;  // n_features
  Mat w_dec;  // n_features x d_model
  Vec b_dec;  // d_model
  SaeVariant variant = SaeVariant::local;
  double sparsity_coeff = 0.0;
  HookPoint hook;
  std::vector<std::uint8_t> alive_mask;  // n_features, 1 = alive
  std::uint64_t model_fingerprint = 0;
  double mean_l0 = 0.0;  // held-out L0 recorded at training time

  static Sae zeros(std::size_t d_model, std::size_t n_features);

  std::size_t d_model() const { return static_cast<std::size_t>(w_enc.rows()); }
  std::size_t n_features() const { return static_cast<std::size_t>(w_enc.cols()); }

  std::uint64_t fingerprint() const;
  void round_to_f32();

  // Shared tensor container, magic "SDIRSAE1".
  void save(const std::filesystem::path& path) const;
  static Sae load(const std::filesystem::path& path);
};

Vec encode(const Sae& sae, std::span<const double> x);
Mat encode_batch(const Sae& sae, const Mat& x);
Vec decode(const Sae& sae, std::span<const double> f);
Mat decode_batch(const Sae& sae, const Mat& f);
Vec reconstruct(const Sae& sae, std::span<const double> x);

struct SaeGrads {
  Mat w_enc;
  Vec b_enc;
  Mat w_dec;
  Vec b_dec;

  static SaeGrads zeros_like(const Sae& sae);
  void add(const SaeGrads& other);
};

struct SaeLoss {
  double total = 0.0;
  double reconstruction = 0.0;  // mean ||x - x_hat||^2 (local)
  double kl = 0.0;              // mean KL(P_orig || P_patched) (e2e, e2e_ds)
  double downstream = 0.0;      // beta-weighted downstream term (e2e_ds)
  double sparsity = 0.0;        // lambda * mean ||f||_1
};

// mean ||x - x_hat||^2 + lambda * mean ||f||_1 over the rows of `x`.
SaeLoss local_loss(const Sae& sae, const Mat& x, SaeGrads* grads);

// Reconstructions substitute the hook activation at every position of every
// sequence. KL is averaged over all positions. With `downstream`, adds
// beta/|D| * sum over D of mean ||a_orig - a_patched||^2, where D is every
// resid_pre after the hook including the final residual.
SaeLoss e2e_loss(const Sae& sae, const TransformerModel& model,
                 std::span<const TokenSequence> batch, bool downstream, double beta,
                 SaeGrads* grads, std::size_t workers = 1);

struct SaeTrainOptions {
  std::size_t n_features = 256;
  std::size_t steps = 3000;
  std::size_t batch_rows = 256;       // local
  std::size_t batch_sequences = 4;    // e2e / e2e_ds
  double learning_rate = 1e-3;
  std::size_t warmup_steps = 100;
  double beta = 1.0;
  std::size_t dead_steps = 10000;
  double held_out_fraction = 0.1;
  double alive_rate = 1e-6;  // alive = fired on >= 1 token per 1e6
  std::size_t workers = 1;
};

struct SaeTrainReport {
  SaeVariant variant = SaeVariant::local;
  double sparsity_coeff = 0.0;
  SaeLoss final_loss;  // averaged over the last 10% of steps
  double mean_l0 = 0.0;
  double fvu = 0.0;
  std::size_t alive_count = 0;
  std::size_t n_features = 0;
  std::size_t steps = 0;
  std::size_t resampled = 0;
  std::uint64_t seed = 0;
  std::size_t held_out_rows = 0;
};

// Trains on the rows (local) or sequences (e2e variants) preceding the store's
// held-out tail; L0 and FVU are measured on the held-out tail. Decoder rows are
// kept at unit norm every step. `corpus[k]` must be the sequence with id k.
std::pair<Sae, SaeTrainReport> train_sae(const TransformerModel& model, const ActivationStore& store,
                                         std::span<const TokenSequence> corpus, SaeVariant variant,
                                         double sparsity_coeff, const SaeTrainOptions& options,
                                         std::uint64_t seed);

// Streams the store in chunks.
double mean_l0(const Sae& sae, const ActivationStore& store, std::size_t begin = 0,
               std::size_t end = static_cast<std::size_t>(-1));

// Alive = fired on at least max(1, ceil(rate * N)) rows of the store.
std::vector<std::uint8_t> compute_alive_mask(const Sae& sae, const ActivationStore& store,
                                             double rate);

double fraction_of_variance_unexplained(const Sae& sae, const Mat& x);

}  // namespace sdir
