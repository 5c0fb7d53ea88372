#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "sdir/common.hpp"

namespace sdir {

// Byte-level tokenizer over the set of bytes that occur in a training text.
class Tokenizer {
 public:
  Tokenizer() { byte_to_id_.fill(-1); }

  static Tokenizer fit(std::string_view text);
  static Tokenizer from_alphabet(std::vector<std::uint8_t> alphabet);

  TokenSequence encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> tokens) const;

  std::size_t vocab_size() const { return id_to_byte_.size(); }
  const std::vector<std::uint8_t>& alphabet() const { return id_to_byte_; }

  bool operator==(const Tokenizer& other) const { return id_to_byte_ == other.id_to_byte_; }

 private:
  std::vector<std::uint8_t> id_to_byte_;
  std::array<int, 256> byte_to_id_{};
};

// Deterministic English-like text with nested structure (agreement, quoting,
// arithmetic, lists) so that a small LM has something non-trivial to learn.
std::string synthetic_corpus(std::size_t n_bytes, std::uint64_t seed);

std::string read_text_file(const std::filesystem::path& path);

// Non-overlapping windows of `seq_len` tokens; window k is sequence id k.
std::vector<TokenSequence> split_windows(std::span<const TokenId> tokens, std::size_t seq_len);

}  // namespace sdir
