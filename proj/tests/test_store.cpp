#include <cmath>
#include <fstream>

#include "doctest.h"
#include "sdir/store.hpp"
#include "test_helpers.hpp"

using namespace sdir;

namespace {

std::vector<TokenSequence> random_windows(std::size_t n, std::size_t len, std::size_t vocab) {
  std::vector<TokenSequence> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(testing::random_tokens(len, vocab, 500 + i));
  return out;
}

ActivationStore store_of(std::vector<std::vector<double>> rows) {
  ActivationStore s({0}, rows.front().size(), 0);
  for (std::size_t i = 0; i < rows.size(); ++i) s.append(rows[i], {0, static_cast<std::uint32_t>(i)});
  return s;
}

}  // namespace

TEST_CASE("capture shape, stride and exact rows") {
  const auto c = testing::tiny_config();
  const auto model = testing::random_model(c, 3);
  const auto windows = random_windows(400, c.max_seq_len, c.vocab_size);

  CaptureOptions opt{.hook = {2}, .token_budget = 1000, .stride = 1, .seed = 9};
  const auto store = capture(model, windows, opt);
  CHECK(store.size() == 1000);
  CHECK(store.d_model() == c.d_model);
  CHECK(store.model_fingerprint() == model.fingerprint());

  opt.stride = 4;
  CaptureOutcome outcome;
  const auto strided = capture(model, windows, opt, &outcome);
  CHECK(strided.size() == 1000);
  CHECK_FALSE(outcome.partial);
  for (std::size_t i = 0; i < strided.size(); ++i) CHECK(strided.meta(i).position % 4 == 0);

  // spot-check rows against a fresh forward pass
  for (std::size_t i : {0ul, 17ul, 999ul}) {
    const auto m = store.meta(i);
    const auto trace = forward_full(model, windows[m.sequence_id], std::vector<HookPoint>{{2}});
    const auto row = store.row(i);
    for (std::size_t k = 0; k < c.d_model; ++k) {
      CHECK(row[k] == static_cast<float>(trace.at({2})(m.position, static_cast<long>(k))));
    }
  }

  opt.stride = 1;
  opt.exclude_position_zero = true;
  const auto no_zero = capture(model, windows, opt);
  for (std::size_t i = 0; i < no_zero.size(); ++i) CHECK(no_zero.meta(i).position != 0);
}

TEST_CASE("capture is deterministic and warns when the corpus runs out") {
  const auto c = testing::tiny_config();
  const auto model = testing::random_model(c, 3);
  const auto windows = random_windows(10, c.max_seq_len, c.vocab_size);
  CaptureOptions opt{.hook = {1}, .token_budget = 50, .seed = 4};
  CHECK(capture(model, windows, opt).content_hash() == capture(model, windows, opt).content_hash());
  opt.workers = 3;
  CHECK(capture(model, windows, opt).content_hash() == capture(model, windows, {.hook = {1}, .token_budget = 50, .seed = 4}).content_hash());

  opt.token_budget = 1000;
  CaptureOutcome outcome;
  const auto partial = capture(model, windows, opt, &outcome);
  CHECK(outcome.partial);
  CHECK(partial.size() == 10 * c.max_seq_len);
  CHECK_FALSE(outcome.warning.empty());

  opt.token_budget = 1;
  CHECK_THROWS_AS(capture(model, windows, opt), InputError);
  opt.token_budget = 10;
  opt.stride = 0;
  CHECK_THROWS_AS(capture(model, windows, opt), InputError);
}

TEST_CASE("store save/load is bit exact") {
  const auto c = testing::tiny_config();
  const auto model = testing::random_model(c, 3);
  const auto store = capture(model, random_windows(20, c.max_seq_len, c.vocab_size), {.hook = {1}, .token_budget = 100, .seed = 1});
  const auto dir = testing::temp_dir("store");
  store.save(dir / "a.act");
  const auto loaded = ActivationStore::load(dir / "a.act");
  CHECK(loaded.content_hash() == store.content_hash());
  CHECK(loaded.hook() == store.hook());
  for (std::size_t i = 0; i < store.size(); ++i) {
    CHECK(loaded.meta(i) == store.meta(i));
    CHECK(std::equal(loaded.row(i).begin(), loaded.row(i).end(), store.row(i).begin()));
  }
  CHECK(loaded.find(store.meta(42)) == 42u);
  std::ofstream(dir / "bad.act") << "SDIRMDL1xxxxxxxxxxxxxxxxxxxxxxxx";
  CHECK_THROWS_AS(ActivationStore::load(dir / "bad.act"), InputError);
}

TEST_CASE("sample_row is uniform") {
  const auto single = store_of({{1.0, 2.0}});
  Rng rng(1);
  for (int i = 0; i < 20; ++i) CHECK(sample_row(single, rng).index == 0);

  std::vector<std::vector<double>> rows;
  for (int i = 0; i < 10; ++i) rows.push_back({double(i), 0.0});
  const auto ten = store_of(rows);
  std::vector<int> counts(10, 0);
  const int n = 100000;
  for (int i = 0; i < n; ++i) counts[sample_row(ten, rng).index]++;
  const double sigma = std::sqrt(n * 0.1 * 0.9);
  for (int k : counts) CHECK(std::abs(k - n * 0.1) < 5 * sigma);

  ActivationStore empty({0}, 2, 0);
  CHECK_THROWS_AS(sample_row(empty, rng), InputError);
}

TEST_CASE("sample_pair_distinct never repeats an index and is uniform over ordered pairs") {
  Rng rng(2);
  const auto two = store_of({{0.0, 0.0}, {1.0, 1.0}});
  int first_zero = 0;
  for (int i = 0; i < 2000; ++i) {
    const auto [a, b] = sample_pair_distinct(two, rng);
    CHECK(a.index != b.index);
    first_zero += a.index == 0;
  }
  CHECK(std::abs(first_zero - 1000) < 5 * std::sqrt(2000 * 0.25));

  std::vector<std::vector<double>> rows;
  for (int i = 0; i < 4; ++i) rows.push_back({double(i)});
  const auto four = store_of(rows);
  std::vector<int> counts(16, 0);
  const int n = 60000;
  for (int i = 0; i < n; ++i) {
    const auto [a, b] = sample_pair_distinct(four, rng);
    REQUIRE(a.index != b.index);
    counts[a.index * 4 + b.index]++;
  }
  const double p = 1.0 / 12.0, sigma = std::sqrt(n * p * (1 - p));
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) {
      if (i == j) CHECK(counts[i * 4 + j] == 0);
      else CHECK(std::abs(counts[i * 4 + j] - n * p) < 5 * sigma);
    }
  }
  CHECK_THROWS_AS(sample_pair_distinct(store_of({{1.0}}), rng), InputError);
}

TEST_CASE("mean pairwise distance") {
  Rng rng(3);
  CHECK(mean_pairwise_distance(store_of({{0.0, 0.0}, {3.0, 4.0}}), 100, rng) == doctest::Approx(5.0).epsilon(1e-12));

  std::vector<std::vector<double>> rows;
  Rng gen(11);
  for (int i = 0; i < 100; ++i) rows.push_back({gen.normal() * 3, gen.normal(), gen.normal() + 2});
  const auto store = store_of(rows);
  double exhaustive = 0.0;
  int pairs = 0;
  for (std::size_t i = 0; i < store.size(); ++i) {
    for (std::size_t j = 0; j < store.size(); ++j) {
      if (i == j) continue;
      exhaustive += (store.row_vec(i) - store.row_vec(j)).norm();
      ++pairs;
    }
  }
  exhaustive /= pairs;
  const auto est = estimate_pairwise_distance(store, 20000, rng);
  CHECK(std::abs(est.mean - exhaustive) < 3 * est.standard_error);
}
