#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace sdir {

// Row-major so that a row is one token's activation vector.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;

using TokenId = std::uint32_t;
using TokenSequence = std::vector<TokenId>;

// Caller supplied something that violates a precondition.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A computation produced NaN/Inf or otherwise failed numerically.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;

// FNV-1a over raw bytes; chainable through `state`.
inline std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t state = kFnvOffset) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    state ^= p[i];
    state *= 0x100000001b3ULL;
  }
  return state;
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t state = kFnvOffset) {
  return fnv1a(s.data(), s.size(), state);
}

std::string hex64(std::uint64_t value);

bool all_finite(std::span<const double> values);

inline std::span<const double> row_span(const Mat& m, Eigen::Index r) {
  return {m.data() + r * m.cols(), static_cast<std::size_t>(m.cols())};
}

inline Eigen::Map<const Vec> as_vec(std::span<const double> s) {
  return {s.data(), static_cast<Eigen::Index>(s.size())};
}

}  // namespace sdir
