#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "sdir/common.hpp"

namespace sdir {

std::uint64_t splitmix64(std::uint64_t x);

// Named seed derivation: every random stream in a run is a pure function of
// the global seed and a (component, a, b, c) label.
std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view component,
                          std::uint64_t a = 0, std::uint64_t b = 0, std::uint64_t c = 0);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }

  // Uniform over [0, n).
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }

  Vec normal_vector(std::size_t n) {
    Vec z(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = normal();
    return z;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace sdir
