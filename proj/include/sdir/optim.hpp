#pragma once

#include <span>
#include <vector>

#include "sdir/common.hpp"

namespace sdir {

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
};

struct ParamSlot {
  std::span<double> value;
  std::span<const double> grad;
  bool decay = false;
};

// Adam with decoupled weight decay over a fixed, ordered list of parameter slots.
class AdamW {
 public:
  AdamW(std::size_t n_params, AdamWOptions options);

  void step(std::span<const ParamSlot> slots, double learning_rate);

  // Zeroes both moment estimates for a flat parameter range.
  void reset_moments(std::size_t offset, std::size_t count);

  std::size_t steps_taken() const { return t_; }

 private:
  AdamWOptions opt_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

// Linear warmup to `base`, then cosine decay to `base * floor_ratio` at `total`.
double warmup_cosine(std::size_t step, std::size_t warmup, std::size_t total, double base,
                     double floor_ratio = 0.1);

// Scales the gradients in place so that their global L2 norm is at most `max_norm`;
// returns the norm before clipping.
double clip_global_norm(std::span<const std::span<double>> grads, double max_norm);

}  // namespace sdir
