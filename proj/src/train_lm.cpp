#include "sdir/train_lm.hpp"

#include <cmath>
#include <sstream>

#include "sdir/optim.hpp"
#include "sdir/parallel.hpp"
#include "sdir/rng.hpp"

namespace sdir {

namespace {

bool decays(const std::string& name) {
  return name.find(".w_") != std::string::npos || name == "w_unembed";
}

}  // namespace

double sequence_cross_entropy(const TransformerModel& model, std::span<const TokenId> window,
                              ModelWeights* grads, double grad_scale) {
  if (window.size() < 2) throw InputError("window needs at least two tokens");
  const auto inputs = window.first(window.size() - 1);
  const auto n = static_cast<Eigen::Index>(inputs.size());
  Activations acts;
  const Mat logits = forward_from(model, 0, embed(model, inputs), grads ? &acts : nullptr);
  const Mat logp = log_softmax_rows(logits);
  double loss = 0.0;
  for (Eigen::Index t = 0; t < n; ++t) loss -= logp(t, window[static_cast<std::size_t>(t) + 1]);
  loss /= static_cast<double>(n);
  if (grads != nullptr) {
    Mat d_logits = logp.array().exp().matrix();
    for (Eigen::Index t = 0; t < n; ++t) d_logits(t, window[static_cast<std::size_t>(t) + 1]) -= 1.0;
    d_logits *= grad_scale / static_cast<double>(n);
    Mat d_resid;
    backward_from(model, acts, d_logits, {}, grads, &d_resid);
    accumulate_embedding_grad(inputs, d_resid, *grads);
  }
  return loss;
}

double mean_cross_entropy(const TransformerModel& model, std::span<const TokenId> tokens,
                          std::size_t max_windows) {
  const std::size_t win = std::min(model.config().max_seq_len + 1, tokens.size());
  if (win < 2) throw InputError("held-out stream is too short to evaluate");
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start + win <= tokens.size() && count < max_windows; start += win - 1) {
    total += sequence_cross_entropy(model, tokens.subspan(start, win), nullptr, 0.0);
    ++count;
  }
  return total / static_cast<double>(count);
}

TransformerModel train_toy_lm(std::span<const TokenId> corpus, const ModelConfig& config,
                              const Tokenizer& tokenizer, const LmTrainOptions& options,
                              std::uint64_t seed, LmTrainReport* report) {
  if (corpus.empty()) throw InputError("empty corpus");
  config.validate();
  for (TokenId t : corpus) {
    if (t >= config.vocab_size) throw InputError("corpus token id >= vocab_size");
  }
  if (options.batch_size == 0) throw InputError("train.batch_size must be >= 1");
  const auto split = static_cast<std::size_t>(
      std::floor(static_cast<double>(corpus.size()) * (1.0 - options.held_out_fraction)));
  if (split < 3 || corpus.size() - split < 2) {
    throw InputError("corpus too short for a train/held-out split");
  }
  const auto train = corpus.first(split);
  const auto held_out = corpus.subspan(split);
  const std::size_t win = std::min(config.max_seq_len + 1, train.size());

  TransformerModel model = TransformerModel::initialized(config, tokenizer, seed, options.init_std);
  const std::size_t n_params = model.weights().parameter_count();
  AdamW adam(n_params, {options.beta1, options.beta2, 1e-8, options.weight_decay});

  std::vector<ModelWeights> slot_grads(options.batch_size, ModelWeights::zeros(config));
  ModelWeights total_grad = ModelWeights::zeros(config);
  std::vector<double> slot_loss(options.batch_size);
  std::vector<std::size_t> starts(options.batch_size);
  Rng rng(derive_seed(seed, "lm.batches"));

  LmTrainReport rep;
  rep.seed = seed;
  rep.uniform_loss = std::log(static_cast<double>(config.vocab_size));
  rep.parameter_count = n_params;

  for (std::size_t step = 0; step < options.steps; ++step) {
    for (auto& s : starts) s = rng.index(train.size() - win + 1);
    parallel_for(options.batch_size, options.workers, [&](std::size_t b) {
      slot_grads[b].set_zero();
      slot_loss[b] = sequence_cross_entropy(model, train.subspan(starts[b], win), &slot_grads[b],
                                            1.0 / static_cast<double>(options.batch_size));
    });
    total_grad.set_zero();
    double loss = 0.0;
    for (std::size_t b = 0; b < options.batch_size; ++b) {
      total_grad.add(slot_grads[b]);
      loss += slot_loss[b];
    }
    loss /= static_cast<double>(options.batch_size);
    if (!std::isfinite(loss)) {
      std::ostringstream msg;
      msg << "non-finite training loss at step " << step
          << "; the learning rate (" << options.learning_rate << ") is probably too high";
      throw NumericError(msg.str());
    }

    std::vector<std::span<double>> grad_spans;
    total_grad.for_each([&](const std::string&, auto& t) {
      grad_spans.emplace_back(t.data(), static_cast<std::size_t>(t.size()));
    });
    clip_global_norm(grad_spans, options.grad_clip);

    std::vector<ParamSlot> slots;
    std::size_t k = 0;
    model.mutable_weights().for_each([&](const std::string& name, auto& t) {
      slots.push_back({std::span<double>(t.data(), static_cast<std::size_t>(t.size())),
                       grad_spans[k++], decays(name)});
    });
    adam.step(slots, warmup_cosine(step, options.warmup_steps, options.steps, options.learning_rate));

    if (options.log_every > 0 && (step % options.log_every == 0 || step + 1 == options.steps)) {
      rep.loss_curve.emplace_back(step, loss);
    }
    rep.final_train_loss = loss;
  }

  model.round_to_f32();
  rep.steps = options.steps;
  rep.held_out_loss = mean_cross_entropy(model, held_out, options.eval_windows);
  if (report != nullptr) *report = rep;
  return model;
}

}  // namespace sdir
