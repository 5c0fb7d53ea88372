#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "sdir/model.hpp"
#include "sdir/rng.hpp"

namespace sdir {

struct RowMeta {
  std::uint32_t sequence_id = 0;
  std::uint32_t position = 0;

  bool operator==(const RowMeta&) const = default;
};

// N x d_model residual-stream activations (f32) captured at one hook, with the
// (sequence, position) each row came from.
class ActivationStore {
 public:
  ActivationStore(HookPoint hook, std::size_t d_model, std::uint64_t model_fingerprint);

  void append(std::span<const double> row, RowMeta meta);

  std::size_t size() const { return meta_.size(); }
  bool empty() const { return meta_.empty(); }
  std::size_t d_model() const { return d_model_; }
  HookPoint hook() const { return hook_; }
  std::uint64_t model_fingerprint() const { return model_fingerprint_; }

  std::span<const float> row(std::size_t i) const;
  Vec row_vec(std::size_t i) const;
  const RowMeta& meta(std::size_t i) const { return meta_.at(i); }
  std::optional<std::size_t> find(RowMeta where) const;

  // Rows [begin, end) as a dense double matrix.
  Mat slice(std::size_t begin, std::size_t end) const;
  Mat gather(std::span<const std::size_t> indices) const;

  // Hash of header fields, data and metadata.
  std::uint64_t content_hash() const;

  // Distinct sequence ids in first-appearance order.
  std::vector<std::uint32_t> sequence_ids() const;

  // Format: "SDIRACT1", u32 version, u32 hook layer, u64 rows, u64 d_model,
  // u64 model fingerprint, zero padding to 64 bytes, f32 row-major data,
  // then rows x (u32 sequence_id, u32 position).
  void save(const std::filesystem::path& path) const;
  static ActivationStore load(const std::filesystem::path& path);

 private:
  HookPoint hook_;
  std::size_t d_model_;
  std::uint64_t model_fingerprint_;
  std::vector<float> data_;
  std::vector<RowMeta> meta_;
  std::unordered_map<std::uint64_t, std::size_t> index_;
};

struct CaptureOptions {
  HookPoint hook;
  std::size_t token_budget = 200000;
  std::size_t stride = 1;
  bool exclude_position_zero = false;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

struct CaptureOutcome {
  bool partial = false;
  std::size_t sequences_used = 0;
  std::string warning;
};

// Visits sequences in a seed-determined order and stores the hook activation of
// every position p with p % stride == 0 until `token_budget` rows are stored.
// `sequences[k]` has sequence id k.
ActivationStore capture(const TransformerModel& model, std::span<const TokenSequence> sequences,
                        const CaptureOptions& options, CaptureOutcome* outcome = nullptr);

struct SampledRow {
  std::size_t index = 0;
  Vec activation;
  RowMeta meta;
};

SampledRow sample_row(const ActivationStore& store, Rng& rng);

// Uniform over ordered pairs of distinct row indices.
std::pair<SampledRow, SampledRow> sample_pair_distinct(const ActivationStore& store, Rng& rng);

struct DistanceEstimate {
  double mean = 0.0;
  double standard_error = 0.0;
  std::size_t n_pairs = 0;
};

// Monte-Carlo estimate of E||x1 - x2|| over distinct row pairs.
DistanceEstimate estimate_pairwise_distance(const ActivationStore& store, std::size_t n_pairs,
                                            Rng& rng);
double mean_pairwise_distance(const ActivationStore& store, std::size_t n_pairs, Rng& rng);

// Held-out split convention shared by every trainer: the last
// ceil(fraction * N) rows are held out.
std::size_t held_out_begin(const ActivationStore& store, double fraction);

}  // namespace sdir
