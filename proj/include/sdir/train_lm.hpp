#pragma once

#include <utility>
#include <vector>

#include "sdir/model.hpp"

namespace sdir {

struct LmTrainOptions {
  std::size_t steps = 600;
  std::size_t batch_size = 8;
  double learning_rate = 3e-3;
  std::size_t warmup_steps = 50;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double grad_clip = 1.0;
  double held_out_fraction = 0.1;
  std::size_t eval_windows = 64;
  std::size_t log_every = 50;
  double init_std = 0.02;
  std::size_t workers = 1;
};

struct LmTrainReport {
  std::vector<std::pair<std::size_t, double>> loss_curve;  // (step, train loss)
  double final_train_loss = 0.0;
  double held_out_loss = 0.0;
  double uniform_loss = 0.0;  // ln(vocab_size)
  std::size_t steps = 0;
  std::uint64_t seed = 0;
  std::size_t parameter_count = 0;
};

// Next-token cross-entropy training on a flat token stream. The tail
// `held_out_fraction` of the stream is never trained on. Deterministic given
// the seed, independent of `workers`.
TransformerModel train_toy_lm(std::span<const TokenId> corpus, const ModelConfig& config,
                              const Tokenizer& tokenizer, const LmTrainOptions& options,
                              std::uint64_t seed, LmTrainReport* report = nullptr);

// Mean next-token cross-entropy (nats) over up to `max_windows` windows of the stream.
double mean_cross_entropy(const TransformerModel& model, std::span<const TokenId> tokens,
                          std::size_t max_windows);

// Cross-entropy of one window and, when `grads` is non-null, its gradient
// scaled by `grad_scale`.
double sequence_cross_entropy(const TransformerModel& model, std::span<const TokenId> window,
                              ModelWeights* grads, double grad_scale);

}  // namespace sdir
