#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sdir/common.hpp"
#include "sdir/corpus.hpp"

namespace sdir {

struct ModelConfig {
  std::size_t n_layers = 8;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_head = 16;
  std::size_t d_ff = 256;
  std::size_t vocab_size = 0;
  std::size_t max_seq_len = 128;
  double layernorm_epsilon = 1e-5;

  // Throws InputError naming the offending field.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

// The residual stream entering block `layer`. layer == n_layers is the
// final residual, just before the last layer norm and the unembedding.
struct HookPoint {
  std::size_t layer = 0;

  std::string name() const;
  auto operator<=>(const HookPoint&) const = default;
};

struct BlockWeights {
  Vec ln1_gain, ln1_bias;
  Mat w_qkv;  // d_model x 3*d_model, columns [q | k | v], heads contiguous inside each
  Vec b_qkv;
  Mat w_attn_out;  // d_model x d_model
  Vec b_attn_out;
  Vec ln2_gain, ln2_bias;
  Mat w_fc;  // d_model x d_ff
  Vec b_fc;
  Mat w_proj;  // d_ff x d_model
  Vec b_proj;
};

struct ModelWeights {
  Mat token_embedding;     // vocab x d_model
  Mat position_embedding;  // max_seq_len x d_model
  std::vector<BlockWeights> blocks;
  Vec lnf_gain, lnf_bias;
  Mat w_unembed;  // d_model x vocab
  Vec b_unembed;

  static ModelWeights zeros(const ModelConfig& config);

  // f(name, tensor) for every parameter tensor in a fixed order; tensor is Mat& or Vec&.
  template <class F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <class F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

  std::size_t parameter_count() const;
  void set_zero();
  void add(const ModelWeights& other);

 private:
  template <class Self, class F>
  static void visit(Self& w, F& f) {
    f(std::string("token_embedding"), w.token_embedding);
    f(std::string("position_embedding"), w.position_embedding);
    for (std::size_t l = 0; l < w.blocks.size(); ++l) {
      auto& b = w.blocks[l];
      const std::string p = "blocks." + std::to_string(l) + ".";
      f(p + "ln1.gain", b.ln1_gain);
      f(p + "ln1.bias", b.ln1_bias);
      f(p + "attn.w_qkv", b.w_qkv);
      f(p + "attn.b_qkv", b.b_qkv);
      f(p + "attn.w_out", b.w_attn_out);
      f(p + "attn.b_out", b.b_attn_out);
      f(p + "ln2.gain", b.ln2_gain);
      f(p + "ln2.bias", b.ln2_bias);
      f(p + "mlp.w_fc", b.w_fc);
      f(p + "mlp.b_fc", b.b_fc);
      f(p + "mlp.w_proj", b.w_proj);
      f(p + "mlp.b_proj", b.b_proj);
    }
    f(std::string("lnf.gain"), w.lnf_gain);
    f(std::string("lnf.bias"), w.lnf_bias);
    f(std::string("w_unembed"), w.w_unembed);
    f(std::string("b_unembed"), w.b_unembed);
  }
};

// Pre-layernorm GPT-2 style decoder: attention then MLP inside each block,
// learned absolute positions, GELU MLP, separate unembedding.
class TransformerModel {
 public:
  TransformerModel(ModelConfig config, Tokenizer tokenizer);

  static TransformerModel initialized(ModelConfig config, Tokenizer tokenizer, std::uint64_t seed,
                                      double init_std = 0.02);

  const ModelConfig& config() const { return config_; }
  const Tokenizer& tokenizer() const { return tokenizer_; }
  const ModelWeights& weights() const { return weights_; }
  ModelWeights& mutable_weights() {
    fingerprint_.reset();
    return weights_;
  }

  // Hash of config, tokenizer and f32-rounded parameters.
  std::uint64_t fingerprint() const;

  // Rounds every parameter to the nearest float so that save/load is lossless.
  void round_to_f32();

  void save(const std::filesystem::path& path) const;
  static TransformerModel load(const std::filesystem::path& path);

 private:
  ModelConfig config_;
  Tokenizer tokenizer_;
  ModelWeights weights_;
  mutable std::optional<std::uint64_t> fingerprint_;
};

struct ForwardTrace {
  std::size_t first_position = 0;  // row 0 of logits/captured is this position
  Mat logits;                      // rows x vocab
  std::map<std::size_t, Mat> captured;

  const Mat& at(HookPoint hook) const;
};

struct ResidPatch {
  HookPoint hook;
  std::size_t position = 0;
  Vec replacement;
};

void validate_tokens(const TransformerModel& model, std::span<const TokenId> tokens);

// Full pass from the embedding. Patches replace the residual at (hook, position)
// before it enters the block; captured values are what flowed after patching.
ForwardTrace forward_full(const TransformerModel& model, std::span<const TokenId> tokens,
                          std::span<const HookPoint> capture = {},
                          std::span<const ResidPatch> patches = {});

// Unpatched per-sequence state for resuming at `hook`: attention keys/values of
// every layer at or above the hook, the residual stream from the hook upward,
// and the clean logits.
struct PrefixCache {
  HookPoint hook;
  std::uint64_t model_fingerprint = 0;
  TokenSequence tokens;
  std::vector<Mat> keys;    // [layer - hook.layer], T x d_model
  std::vector<Mat> values;  // [layer - hook.layer], T x d_model
  std::vector<Mat> resid;   // resid_pre at layers hook.layer ..= n_layers
  Mat logits;

  static PrefixCache build(const TransformerModel& model, std::span<const TokenId> tokens,
                           HookPoint hook);

  const Mat& resid_at(std::size_t layer) const;
  std::size_t length() const { return tokens.size(); }
};

// Replace resid_pre at (hook, position) and recompute positions >= position from
// the hook upward. Computation below the hook and keys/values of earlier
// positions come from the cache. Returned trace covers positions >= position and
// captures every resid_pre from the hook to the final residual.
ForwardTrace forward_resume_with_patch(const TransformerModel& model,
                                       std::span<const TokenId> tokens, HookPoint hook,
                                       std::size_t position, std::span<const double> replacement,
                                       const PrefixCache* cache = nullptr);

struct AlternativesResult {
  Mat logits;      // m x vocab, logits at `position` for each alternative
  Mat downstream;  // m x d_model, resid_pre at the downstream layer (empty if not requested)
};

// Evaluates m independent replacements for the same position in one batch.
// Only the patched position is recomputed; later positions are not needed to
// read the prediction at `position`.
AlternativesResult resume_alternatives(const TransformerModel& model, const PrefixCache& cache,
                                       std::size_t position, const Mat& replacements,
                                       std::optional<std::size_t> downstream_layer = std::nullopt);

// ---------------------------------------------------------------------------
// Differentiable path used by training code (LM and end-to-end SAEs).

struct LayerNormState {
  Mat normalized;  // (x - mean) * rstd
  Vec rstd;
};

struct BlockActivations {
  Mat resid_in;
  LayerNormState ln1;
  Mat ln1_out;
  Mat qkv;
  std::vector<Mat> probs;  // per head, T x T
  Mat heads;
  Mat resid_mid;
  LayerNormState ln2;
  Mat ln2_out;
  Mat fc_pre;
  Mat fc_act;
};

struct Activations {
  std::size_t start_layer = 0;
  std::vector<BlockActivations> blocks;  // layers start_layer .. n_layers-1
  Mat resid_final;
  LayerNormState lnf;
  Mat lnf_out;

  // resid_pre at `layer` (start_layer ..= n_layers) as recorded.
  const Mat& resid_at(std::size_t layer) const;
};

Mat embed(const TransformerModel& model, std::span<const TokenId> tokens);

// Runs blocks [start_layer, n_layers) on `resid` (T rows, positions 0..T-1) and
// returns logits. Records everything backward_from needs when `acts` is non-null.
Mat forward_from(const TransformerModel& model, std::size_t start_layer, Mat resid,
                 Activations* acts);

// Extra gradient added to dLoss/d resid_pre[layer] (start_layer < layer <= n_layers).
struct ResidInjection {
  std::size_t layer = 0;
  Mat grad;
};

// Backpropagates d_logits (and any injections) through the recorded pass.
// Parameter gradients are accumulated into `grads` when non-null; the gradient
// with respect to the starting residual is written to `d_resid` when non-null.
void backward_from(const TransformerModel& model, const Activations& acts, const Mat& d_logits,
                   std::span<const ResidInjection> injections, ModelWeights* grads, Mat* d_resid);

void accumulate_embedding_grad(std::span<const TokenId> tokens, const Mat& d_resid0,
                               ModelWeights& grads);

// Row-wise log-softmax in double.
Mat log_softmax_rows(const Mat& logits);

}  // namespace sdir

namespace sdir {

// resid_pre at `layer` for every position, computing only the blocks below it.
Mat residual_at(const TransformerModel& model, std::span<const TokenId> tokens, std::size_t layer);

}  // namespace sdir
