#include "sdir/optim.hpp"

#include <cmath>
#include <numbers>

namespace sdir {

AdamW::AdamW(std::size_t n_params, AdamWOptions options)
    : opt_(options), m_(n_params, 0.0), v_(n_params, 0.0) {}

void AdamW::step(std::span<const ParamSlot> slots, double learning_rate) {
  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  std::size_t k = 0;
  for (const auto& slot : slots) {
    if (slot.value.size() != slot.grad.size()) throw std::logic_error("AdamW slot size mismatch");
    if (k + slot.value.size() > m_.size()) throw std::logic_error("AdamW slots exceed state size");
    for (std::size_t i = 0; i < slot.value.size(); ++i, ++k) {
      const double g = slot.grad[i];
      m_[k] = opt_.beta1 * m_[k] + (1.0 - opt_.beta1) * g;
      v_[k] = opt_.beta2 * v_[k] + (1.0 - opt_.beta2) * g * g;
      const double update = (m_[k] / bc1) / (std::sqrt(v_[k] / bc2) + opt_.epsilon);
      double& p = slot.value[i];
      if (slot.decay) p -= learning_rate * opt_.weight_decay * p;
      p -= learning_rate * update;
    }
  }
}

void AdamW::reset_moments(std::size_t offset, std::size_t count) {
  for (std::size_t i = offset; i < offset + count && i < m_.size(); ++i) {
    m_[i] = 0.0;
    v_[i] = 0.0;
  }
}

double warmup_cosine(std::size_t step, std::size_t warmup, std::size_t total, double base,
                     double floor_ratio) {
  if (warmup > 0 && step < warmup) {
    return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
  }
  if (total <= warmup) return base;
  const double progress =
      std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(total - warmup));
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return base * (floor_ratio + (1.0 - floor_ratio) * cosine);
}

double clip_global_norm(std::span<const std::span<double>> grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) {
    for (double x : g) sq += x * x;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (const auto& g : grads) {
      for (double& x : g) x *= s;
    }
  }
  return norm;
}

}  // namespace sdir
