#include "sdir/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "sdir/rng.hpp"

namespace sdir {

Tokenizer Tokenizer::fit(std::string_view text) {
  std::array<bool, 256> seen{};
  for (unsigned char c : text) seen[c] = true;
  std::vector<std::uint8_t> alphabet;
  for (int b = 0; b < 256; ++b) {
    if (seen[static_cast<std::size_t>(b)]) alphabet.push_back(static_cast<std::uint8_t>(b));
  }
  return from_alphabet(std::move(alphabet));
}

Tokenizer Tokenizer::from_alphabet(std::vector<std::uint8_t> alphabet) {
  Tokenizer t;
  for (std::size_t i = 0; i < alphabet.size(); ++i) {
    if (t.byte_to_id_[alphabet[i]] >= 0) throw InputError("duplicate byte in tokenizer alphabet");
    t.byte_to_id_[alphabet[i]] = static_cast<int>(i);
  }
  t.id_to_byte_ = std::move(alphabet);
  return t;
}

TokenSequence Tokenizer::encode(std::string_view text) const {
  TokenSequence out;
  out.reserve(text.size());
  for (unsigned char c : text) {
    const int id = byte_to_id_[c];
    if (id < 0) throw InputError("byte " + std::to_string(c) + " is not in the tokenizer alphabet");
    out.push_back(static_cast<TokenId>(id));
  }
  return out;
}

std::string Tokenizer::decode(std::span<const TokenId> tokens) const {
  std::string out;
  out.reserve(tokens.size());
  for (TokenId t : tokens) {
    if (t >= id_to_byte_.size()) throw InputError("token id out of range");
    out.push_back(static_cast<char>(id_to_byte_[t]));
  }
  return out;
}

namespace {

struct Lexicon {
  std::vector<std::string_view> names{"ada", "bo", "cyra", "dov", "elin", "farid", "gwen", "hugo",
                                      "ines", "jonas", "kira", "lev"};
  std::vector<std::string_view> nouns{"cat", "river", "engine", "garden", "teacher", "lamp",
                                      "ship", "market", "window", "letter", "forest", "clock",
                                      "baker", "bridge", "song", "stone"};
  std::vector<std::string_view> plural{"cats", "rivers", "engines", "gardens", "teachers",
                                       "lamps", "ships", "markets", "windows", "letters",
                                       "forests", "clocks", "bakers", "bridges", "songs",
                                       "stones"};
  std::vector<std::string_view> adjectives{"old", "quiet", "red", "bright", "small", "heavy",
                                           "green", "slow", "strange", "warm", "empty", "tall"};
  std::vector<std::string_view> verbs_s{"sees", "finds", "follows", "builds", "carries",
                                        "watches", "opens", "moves", "paints", "hears"};
  std::vector<std::string_view> verbs_p{"see", "find", "follow", "build", "carry",
                                        "watch", "open", "move", "paint", "hear"};
  std::vector<std::string_view> places{"in the morning", "near the sea", "after the rain",
                                       "at night", "by the gate", "under the hill"};
};

class TextGen {
 public:
  TextGen(std::uint64_t seed) : rng_(seed) {}

  std::string_view pick(const std::vector<std::string_view>& v) { return v[rng_.index(v.size())]; }
  std::size_t idx(std::size_t n) { return rng_.index(n); }
  bool coin(double p) { return rng_.uniform() < p; }

  // Subject-verb agreement carries across the adjective phrase.
  void noun_clause(std::string& out) {
    const bool many = coin(0.4);
    out += many ? "the " : (coin(0.5) ? "the " : "a ");
    if (coin(0.5)) {
      out += pick(lex_.adjectives);
      out += ' ';
    }
    const std::size_t n = idx(lex_.nouns.size());
    out += many ? lex_.plural[n] : lex_.nouns[n];
    out += ' ';
    const std::size_t v = idx(lex_.verbs_s.size());
    out += many ? lex_.verbs_p[v] : lex_.verbs_s[v];
    out += " the ";
    out += pick(lex_.nouns);
    if (coin(0.3)) {
      out += ' ';
      out += pick(lex_.places);
    }
  }

  void sentence(std::string& out) {
    switch (idx(6)) {
      case 0:
      case 1:
        noun_clause(out);
        out += ". ";
        break;
      case 2: {
        out += pick(lex_.names);
        out += " said, \"";
        noun_clause(out);
        out += ".\" ";
        break;
      }
      case 3: {
        const std::size_t a = idx(50), b = idx(50);
        out += std::to_string(a) + " plus " + std::to_string(b) + " is " + std::to_string(a + b) + ". ";
        break;
      }
      case 4: {
        out += pick(lex_.names);
        out += " has ";
        const std::size_t n = 2 + idx(3);
        for (std::size_t i = 0; i < n; ++i) {
          if (i > 0) out += (i + 1 == n) ? " and " : ", ";
          out += std::to_string(1 + idx(9)) + " " + std::string(pick(lex_.plural));
        }
        out += ". ";
        break;
      }
      default: {
        out += "does the ";
        const std::size_t n = idx(lex_.nouns.size());
        out += lex_.nouns[n];
        out += ' ';
        out += pick(lex_.verbs_p);
        out += " the ";
        out += pick(lex_.nouns);
        out += coin(0.5) ? "? yes, it does. " : "? no, it does not. ";
        break;
      }
    }
  }

 private:
  Rng rng_;
  Lexicon lex_;
};

}  // namespace

std::string synthetic_corpus(std::size_t n_bytes, std::uint64_t seed) {
  TextGen gen(derive_seed(seed, "corpus"));
  std::string out;
  out.reserve(n_bytes + 256);
  while (out.size() < n_bytes) {
    const std::size_t n = 3 + gen.idx(5);
    for (std::size_t i = 0; i < n && out.size() < n_bytes; ++i) gen.sentence(out);
    if (!out.empty() && out.back() == ' ') out.back() = '\n';
  }
  out.resize(n_bytes);
  return out;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open corpus: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<TokenSequence> split_windows(std::span<const TokenId> tokens, std::size_t seq_len) {
  if (seq_len == 0) throw InputError("window length must be positive");
  std::vector<TokenSequence> out;
  for (std::size_t start = 0; start + seq_len <= tokens.size(); start += seq_len) {
    out.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(start),
                     tokens.begin() + static_cast<std::ptrdiff_t>(start + seq_len));
  }
  return out;
}

}  // namespace sdir
