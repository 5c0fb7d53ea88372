#include <cmath>
#include <fstream>

#include "doctest.h"
#include "oracles/reference_transformer.hpp"
#include "sdir/model.hpp"
#include "sdir/train_lm.hpp"
#include "test_helpers.hpp"

using namespace sdir;
using testing::max_abs_diff;

namespace {

double max_diff_vs_oracle(const Mat& logits, const oracle::Rows& ref, std::size_t first_row = 0) {
  double worst = 0.0;
  for (long r = 0; r < logits.rows(); ++r) {
    for (long v = 0; v < logits.cols(); ++v) {
      worst = std::max(worst, std::abs(logits(r, v) - ref[first_row + static_cast<std::size_t>(r)][static_cast<std::size_t>(v)]));
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("config validation names the offending field") {
  ModelConfig c = testing::tiny_config();
  c.n_heads = 3;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("n_heads"), InputError);
  c = testing::tiny_config();
  c.max_seq_len = 1;
  CHECK_THROWS_AS(c.validate(), InputError);
  c = testing::tiny_config();
  c.d_ff = 0;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("d_ff"), InputError);
}

TEST_CASE("forward_full matches the scalar reference per position") {
  const auto c = testing::tiny_config();
  const auto model = testing::random_model(c, 7);
  const auto tokens = testing::random_tokens(c.max_seq_len, c.vocab_size, 1);
  const auto trace = forward_full(model, tokens);
  CHECK(trace.captured.empty());
  REQUIRE(trace.logits.rows() == static_cast<long>(tokens.size()));
  CHECK(max_diff_vs_oracle(trace.logits, oracle::forward(model, tokens)) < 1e-6);
}

TEST_CASE("forward_full rejects bad input") {
  const auto c = testing::tiny_config();
  const auto model = testing::random_model(c, 7);
  CHECK_THROWS_AS(forward_full(model, testing::random_tokens(c.max_seq_len + 1, c.vocab_size, 1)),
                  InputError);
  CHECK_THROWS_AS(forward_full(model, std::vector<TokenId>{}), InputError);
  CHECK_THROWS_AS(forward_full(model, std::vector<TokenId>{0, 99}), InputError);
}

TEST_CASE("captured activations are the flowing residual stream") {
  const auto c = testing::tiny_config();
  const auto model = testing::random_model(c, 3);
  const auto tokens = testing::random_tokens(9, c.vocab_size, 2);
  std::vector<HookPoint> hooks{{0}, {2}, {c.n_layers}};
  const auto trace = forward_full(model, tokens, hooks);
  std::vector<oracle::Rows> resid;
  oracle::forward(model, tokens, std::nullopt, &resid);
  for (const auto& h : hooks) {
    const Mat& got = trace.at(h);
    for (long t = 0; t < got.rows(); ++t) {
      for (long i = 0; i < got.cols(); ++i) {
        CHECK(got(t, i) == doctest::Approx(resid[h.layer][static_cast<std::size_t>(t)][static_cast<std::size_t>(i)]).epsilon(1e-9));
      }
    }
  }
}

TEST_CASE("identity patch leaves logits unchanged") {
  const auto c = testing::tiny_config();
  const auto model = testing::random_model(c, 11);
  const auto tokens = testing::random_tokens(c.max_seq_len, c.vocab_size, 5);
  const HookPoint hook{1};
  const auto full = forward_full(model, tokens, std::vector<HookPoint>{hook});
  const auto cache = PrefixCache::build(model, tokens, hook);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto resumed = forward_resume_with_patch(model, tokens, hook, t,
                                                   row_span(full.at(hook), static_cast<long>(t)), &cache);
    CHECK(resumed.first_position == t);
    CHECK(max_abs_diff(resumed.logits, full.logits.bottomRows(resumed.logits.rows())) < 1e-6);
  }
}

TEST_CASE("cached resume equals naive full recompute for random patches") {
  const auto c = testing::tiny_config();
  const auto model = testing::random_model(c, 21);
  Rng rng(99);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto tokens = testing::random_tokens(2 + rng.index(c.max_seq_len - 1), c.vocab_size, 100 + trial);
    const HookPoint hook{rng.index(c.n_layers + 1)};
    const std::size_t pos = rng.index(tokens.size());
    const auto cache = PrefixCache::build(model, tokens, hook);
    Vec dir = rng.normal_vector(c.d_model);
    dir.normalize();
    const Vec replacement = cache.resid_at(hook.layer).row(static_cast<long>(pos)).transpose() + 3.0 * rng.uniform() * dir;
    const auto fast = forward_resume_with_patch(model, tokens, hook, pos,
                                                {replacement.data(), c.d_model}, &cache);
    oracle::Vector value(replacement.data(), replacement.data() + replacement.size());
    const auto naive = oracle::forward(model, tokens, oracle::Edit{hook.layer, pos, value});
    worst = std::max(worst, max_diff_vs_oracle(fast.logits, naive, pos));

    // the library's own full recompute with an edit agrees too
    const ResidPatch patch{hook, pos, replacement};
    const auto full = forward_full(model, tokens, {}, std::span<const ResidPatch>(&patch, 1));
    worst = std::max(worst, max_abs_diff(fast.logits, full.logits.bottomRows(fast.logits.rows())));
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("alternatives batch matches single patched resumes") {
  const auto c = testing::tiny_config();
  const auto model = testing::random_model(c, 5);
  const auto tokens = testing::random_tokens(10, c.vocab_size, 8);
  const HookPoint hook{1};
  const auto cache = PrefixCache::build(model, tokens, hook);
  Rng rng(3);
  const std::size_t pos = 6;
  Mat reps(4, static_cast<long>(c.d_model));
  for (long r = 0; r < reps.rows(); ++r) {
    reps.row(r) = cache.resid_at(1).row(pos) + (0.5 * r) * rng.normal_vector(c.d_model).transpose();
  }
  const auto batch = resume_alternatives(model, cache, pos, reps, c.n_layers - 1);
  for (long r = 0; r < reps.rows(); ++r) {
    const auto one = forward_resume_with_patch(model, tokens, hook, pos, row_span(reps, r), &cache);
    CHECK(max_abs_diff(batch.logits.row(r), one.logits.row(0)) < 1e-9);
    CHECK(max_abs_diff(batch.downstream.row(r), one.at({c.n_layers - 1}).row(0)) < 1e-9);
  }
  CHECK_THROWS_AS(resume_alternatives(model, cache, tokens.size(), reps), InputError);
  CHECK_THROWS_AS(resume_alternatives(model, cache, pos, reps, std::size_t{0}), InputError);
}

TEST_CASE("patches never change earlier positions") {
  const auto c = testing::tiny_config();
  const auto model = testing::random_model(c, 8);
  const auto tokens = testing::random_tokens(c.max_seq_len, c.vocab_size, 4);
  const auto clean = forward_full(model, tokens);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    ResidPatch patch{{1}, t, Vec::Constant(static_cast<long>(c.d_model), 2.5)};
    const auto patched = forward_full(model, tokens, {}, std::span<const ResidPatch>(&patch, 1));
    if (t > 0) CHECK(max_abs_diff(patched.logits.topRows(static_cast<long>(t)), clean.logits.topRows(static_cast<long>(t))) == 0.0);
    CHECK(max_abs_diff(patched.logits.row(static_cast<long>(t)), clean.logits.row(static_cast<long>(t))) > 0.0);
  }
}

TEST_CASE("resume validates cache and inputs") {
  const auto c = testing::tiny_config();
  const auto model = testing::random_model(c, 8);
  const auto other = testing::random_model(c, 9);
  const auto tokens = testing::random_tokens(6, c.vocab_size, 4);
  const auto cache = PrefixCache::build(model, tokens, {1});
  const Vec x = cache.resid_at(1).row(2).transpose();
  const std::span<const double> xs(x.data(), c.d_model);
  CHECK_THROWS_AS(forward_resume_with_patch(other, tokens, {1}, 2, xs, &cache), InputError);
  CHECK_THROWS_AS(forward_resume_with_patch(model, tokens, {2}, 2, xs, &cache), InputError);
  CHECK_THROWS_AS(forward_resume_with_patch(model, tokens, {1}, 6, xs, &cache), InputError);
  auto altered = tokens;
  altered[0] = (altered[0] + 1) % c.vocab_size;
  CHECK_THROWS_AS(forward_resume_with_patch(model, altered, {1}, 2, xs, &cache), InputError);
  Vec bad = x;
  bad[0] = std::nan("");
  CHECK_THROWS_AS(forward_resume_with_patch(model, tokens, {1}, 2, {bad.data(), c.d_model}, &cache), InputError);
}

TEST_CASE("backward_from matches central finite differences") {
  const auto c = testing::tiny_config();
  auto model = testing::random_model(c, 31, 0.2);
  const auto window = testing::random_tokens(9, c.vocab_size, 2);
  ModelWeights grads = ModelWeights::zeros(c);
  sequence_cross_entropy(model, window, &grads, 1.0);

  std::vector<std::span<double>> params, g;
  model.mutable_weights().for_each([&](const std::string&, auto& t) { params.emplace_back(t.data(), t.size()); });
  grads.for_each([&](const std::string&, auto& t) { g.emplace_back(t.data(), t.size()); });
  Rng rng(4);
  const double h = 1e-5;
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (int probe = 0; probe < 4; ++probe) {
      const std::size_t i = rng.index(params[k].size());
      const double saved = params[k][i];
      params[k][i] = saved + h;
      const double up = sequence_cross_entropy(model, window, nullptr, 0.0);
      params[k][i] = saved - h;
      const double down = sequence_cross_entropy(model, window, nullptr, 0.0);
      params[k][i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double rel = std::abs(numeric - g[k][i]) / std::max({std::abs(numeric), std::abs(g[k][i]), 1e-6});
      worst = std::max(worst, rel);
    }
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("checkpoint round trip is bit exact") {
  const auto c = testing::tiny_config();
  const auto model = testing::random_model(c, 12);
  const auto dir = testing::temp_dir("ckpt");
  model.save(dir / "m.bin");
  const auto loaded = TransformerModel::load(dir / "m.bin");
  CHECK(loaded.config() == c);
  CHECK(loaded.tokenizer() == model.tokenizer());
  CHECK(loaded.fingerprint() == model.fingerprint());
  const auto tokens = testing::random_tokens(8, c.vocab_size, 1);
  CHECK(max_abs_diff(forward_full(loaded, tokens).logits, forward_full(model, tokens).logits) == 0.0);

  std::ofstream(dir / "junk.bin") << "NOTAMODEL";
  CHECK_THROWS_AS(TransformerModel::load(dir / "junk.bin"), InputError);
}

TEST_CASE("train_toy_lm beats the uniform baseline and is deterministic") {
  const std::string text = synthetic_corpus(30000, 5);
  const auto tok = Tokenizer::fit(text);
  const auto tokens = tok.encode(text);
  ModelConfig c = testing::tiny_config(tok.vocab_size());
  c.d_model = 16;
  c.d_head = 8;
  c.d_ff = 32;
  c.max_seq_len = 32;
  LmTrainOptions opts;
  opts.steps = 150;
  opts.batch_size = 4;
  opts.warmup_steps = 10;
  opts.learning_rate = 1e-2;
  LmTrainReport rep;
  const auto a = train_toy_lm(tokens, c, tok, opts, 42, &rep);
  CHECK(rep.held_out_loss < rep.uniform_loss);
  CHECK(rep.uniform_loss == doctest::Approx(std::log(static_cast<double>(tok.vocab_size()))));
  opts.workers = 3;
  const auto b = train_toy_lm(tokens, c, tok, opts, 42);
  CHECK(a.fingerprint() == b.fingerprint());
  bool identical = true;
  std::vector<const double*> pa;
  a.weights().for_each([&](const std::string&, const auto& t) { pa.push_back(t.data()); });
  std::size_t k = 0;
  b.weights().for_each([&](const std::string&, const auto& t) {
    identical = identical && std::equal(t.data(), t.data() + t.size(), pa[k++]);
  });
  CHECK(identical);
}

TEST_CASE("degenerate single-token corpus is learned to near zero loss") {
  ModelConfig c = testing::tiny_config(16);
  const TokenSequence tokens(2000, 3);
  LmTrainOptions opts;
  opts.steps = 120;
  opts.batch_size = 2;
  opts.warmup_steps = 5;
  opts.learning_rate = 1e-2;
  LmTrainReport rep;
  train_toy_lm(tokens, c, testing::alphabet_tokenizer(16), opts, 1, &rep);
  CHECK(rep.held_out_loss < 0.05);
}

TEST_CASE("train_toy_lm error paths") {
  const auto c = testing::tiny_config(16);
  CHECK_THROWS_AS(train_toy_lm({}, c, testing::alphabet_tokenizer(16), {}, 1), InputError);
  const TokenSequence bad(100, 40);
  CHECK_THROWS_AS(train_toy_lm(bad, c, testing::alphabet_tokenizer(16), {}, 1), InputError);
  LmTrainOptions wild;
  wild.steps = 20;
  wild.learning_rate = 1e200;
  wild.grad_clip = 0.0;
  wild.warmup_steps = 0;
  const auto tokens = testing::random_tokens(500, 16, 3);
  CHECK_THROWS_AS(train_toy_lm(tokens, c, testing::alphabet_tokenizer(16), wild, 1), NumericError);
}
