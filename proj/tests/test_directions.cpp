#include <cmath>
#include <map>

#include "doctest.h"
#include "sdir/directions.hpp"
#include "test_helpers.hpp"

using namespace sdir;

namespace {

// Ground-truth Gaussian sampled as mu + A z, independent of any Cholesky code.
struct KnownGaussian {
  Vec mu;
  Mat a;
  Mat sigma;

  KnownGaussian(std::size_t d, std::uint64_t seed) {
    Rng rng(seed);
    mu = rng.normal_vector(d);
    a = Mat(d, d);
    for (long i = 0; i < a.size(); ++i) a.data()[i] = rng.normal() / std::sqrt(double(d));
    a.diagonal().array() += 0.5;
    sigma = a * a.transpose();
  }

  Mat draw(std::size_t n, std::uint64_t seed) const {
    Rng rng(seed);
    Mat x(n, mu.size());
    for (std::size_t r = 0; r < n; ++r) x.row(r) = (mu + a * rng.normal_vector(mu.size())).transpose();
    return x;
  }
};

double rel_frobenius(const Mat& est, const Mat& truth) { return (est - truth).norm() / truth.norm(); }

Mat empirical_covariance(const std::vector<Vec>& v) {
  const long d = v.front().size();
  Vec m = Vec::Zero(d);
  for (const auto& x : v) m += x;
  m /= double(v.size());
  Mat c = Mat::Zero(d, d);
  for (const auto& x : v) c += (x - m) * (x - m).transpose();
  return c / double(v.size() - 1);
}

ActivationStore store_of(const Mat& rows) {
  ActivationStore s({1}, rows.cols(), 0);
  for (long r = 0; r < rows.rows(); ++r) s.append(row_span(rows, r), {static_cast<std::uint32_t>(r), 0});
  return s;
}

}  // namespace

TEST_CASE("fit_gaussian on a hand-computable store") {
  Mat rows(2, 2);
  rows << 1, 0, 3, 0;
  const auto gm = fit_gaussian(rows);
  CHECK(gm.mean[0] == 2.0);
  CHECK(gm.mean[1] == 0.0);
  CHECK(gm.covariance(0, 0) == 2.0);
  CHECK(gm.covariance(0, 1) == 0.0);
  CHECK(gm.covariance(1, 1) == 0.0);
  CHECK(gm.jitter > 0.0);  // singular covariance needs the ladder
  CHECK(gm.jitter <= 1e-4 * gm.covariance.trace() / 2);
}

TEST_CASE("fit_gaussian recovers a known covariance from 50k samples") {
  const KnownGaussian truth(64, 3);
  const Mat x = truth.draw(50000, 4);
  const auto gm = fit_gaussian(x);
  const double err = rel_frobenius(gm.covariance, truth.sigma);
  MESSAGE("relative Frobenius error " << err);
  CHECK(err < 0.05);
  CHECK((gm.covariance - gm.covariance.transpose()).cwiseAbs().maxCoeff() < 1e-8);
  CHECK(gm.jitter == 0.0);
  const Mat llt = gm.cholesky * gm.cholesky.transpose();
  CHECK(testing::max_abs_diff(llt, gm.covariance) < 1e-9);
}

TEST_CASE("identical rows give a zero covariance and exact mean samples") {
  Mat rows = Mat::Constant(5, 4, 0.0);
  rows.rowwise() = RowVec::LinSpaced(4, 1.0, 4.0);
  const auto gm = fit_gaussian(rows);
  CHECK(gm.covariance.norm() == 0.0);
  Rng rng(1);
  for (int i = 0; i < 10; ++i) CHECK((sample_cov_random(gm, rng) - gm.mean).norm() == 0.0);
}

TEST_CASE("fit_gaussian errors and warnings") {
  Mat bad = Mat::Zero(3, 2);
  bad(1, 1) = std::nan("");
  CHECK_THROWS_AS(fit_gaussian(bad), InputError);
  CHECK_THROWS_AS(fit_gaussian(Mat::Zero(1, 2)), InputError);
  Rng rng(5);
  Mat few(4, 10);
  for (long i = 0; i < few.size(); ++i) few.data()[i] = rng.normal();
  std::string warning;
  const auto gm = fit_gaussian(few, &warning);
  CHECK_FALSE(warning.empty());
  CHECK(gm.jitter > 0.0);
}

TEST_CASE("cov-random samples match the fitted moments") {
  const KnownGaussian truth(16, 7);
  const auto gm = fit_gaussian(truth.draw(20000, 8));
  CHECK(sample_cov_random(gm, Vec::Zero(16)) == gm.mean);

  Rng rng(9);
  const std::size_t n = 100000;
  std::vector<Vec> draws;
  draws.reserve(n);
  for (std::size_t i = 0; i < n; ++i) draws.push_back(sample_cov_random(gm, rng));
  Vec m = Vec::Zero(16);
  for (const auto& v : draws) m += v;
  m /= double(n);
  for (long i = 0; i < 16; ++i) {
    const double sd = std::sqrt(gm.covariance(i, i) / double(n));
    CHECK(std::abs(m[i] - gm.mean[i]) < 5 * sd);
  }
  CHECK(rel_frobenius(empirical_covariance(draws), gm.covariance) < 0.05);
}

TEST_CASE("cov-random mixture vectors have covariance 2 sigma") {
  const KnownGaussian truth(64, 11);
  const auto gm = fit_gaussian(truth.draw(50000, 12));
  DirectionSpec spec{.kind = DirectionKind::cov_random_mixture, .gaussian = &gm};
  Rng rng(13);
  std::vector<Vec> raw;
  for (int i = 0; i < 100000; ++i) {
    const auto d = make_direction(spec, nullptr, rng);
    REQUIRE(d);
    CHECK(std::abs(d->vector.norm() - 1.0) < 1e-6);
    raw.push_back(d->raw_length * d->vector);
  }
  Vec m = Vec::Zero(64);
  for (const auto& v : raw) m += v;
  m /= double(raw.size());
  const double err = rel_frobenius(empirical_covariance(raw), 2.0 * gm.covariance);
  MESSAGE("mixture covariance error " << err << " mean norm " << m.norm());
  CHECK(err < 0.05);
  CHECK(m.norm() < 5.0 * std::sqrt(2.0 * gm.covariance.trace() / double(raw.size())));
}

TEST_CASE("every kind yields a unit vector with consistent provenance") {
  const KnownGaussian truth(8, 21);
  const Mat rows = truth.draw(50, 22);
  const auto store = store_of(rows);
  const auto gm = fit_gaussian(store);
  Sae sae = Sae::zeros(8, 16);
  Rng init(3);
  for (long i = 0; i < sae.w_enc.size(); ++i) sae.w_enc.data()[i] = init.normal();
  for (long i = 0; i < sae.w_dec.size(); ++i) sae.w_dec.data()[i] = init.normal();

  Rng rng(23);
  for (int trial = 0; trial < 200; ++trial) {
    BaseActivation base;
    base.store_index = rng.index(store.size());
    base.activation = store.row_vec(*base.store_index);
    base.active_in_sequence.assign(16, 0);
    base.active_in_sequence[trial % 16] = 1;
    for (auto kind : {DirectionKind::isotropic_random, DirectionKind::cov_random_difference,
                      DirectionKind::cov_random_mixture, DirectionKind::real_difference,
                      DirectionKind::real_mixture, DirectionKind::sae_error, DirectionKind::sae_feature}) {
      DirectionSpec spec{kind, &gm, &store, &sae};
      const auto d = make_direction(spec, &base, rng);
      REQUIRE(d);
      CHECK(d->kind == kind);
      CHECK(std::abs(d->vector.norm() - 1.0) < 1e-6);
      CHECK(d->raw_length >= 0.0);
      CHECK(d->uses_base == (kind == DirectionKind::cov_random_difference ||
                             kind == DirectionKind::real_difference || kind == DirectionKind::sae_error));
      for (auto r : d->source_rows) CHECK(r != *base.store_index);
      if (kind == DirectionKind::real_mixture) {
        REQUIRE(d->source_rows.size() == 2);
        CHECK(d->source_rows[0] != d->source_rows[1]);
        const Vec expect = store.row_vec(d->source_rows[0]) - store.row_vec(d->source_rows[1]);
        CHECK((d->raw_length * d->vector - expect).norm() < 1e-9);
      }
      if (kind == DirectionKind::real_difference) {
        const Vec expect = store.row_vec(d->source_rows[0]) - base.activation;
        CHECK((d->raw_length * d->vector - expect).norm() < 1e-9);
      }
      if (kind == DirectionKind::sae_feature) {
        REQUIRE(d->feature_id);
        CHECK(*d->feature_id != static_cast<std::size_t>(trial % 16));
      }
    }
  }
}

TEST_CASE("real_mixture samples distinct non-base pairs uniformly") {
  Mat rows(4, 2);
  rows << 0, 0, 1, 0, 0, 1, 1, 1;
  const auto store = store_of(rows);
  DirectionSpec spec{.kind = DirectionKind::real_mixture, .store = &store};
  BaseActivation base{rows.row(1).transpose(), 1, {}};
  Rng rng(31);
  std::map<std::pair<std::size_t, std::size_t>, int> counts;
  const int n = 60000;
  for (int i = 0; i < n; ++i) {
    const auto d = make_direction(spec, &base, rng);
    ++counts[{d->source_rows[0], d->source_rows[1]}];
  }
  CHECK(counts.size() == 6);
  const double p = 1.0 / 6.0, sd = std::sqrt(n * p * (1 - p));
  for (const auto& [pair, c] : counts) {
    CHECK(pair.first != 1);
    CHECK(pair.second != 1);
    CHECK(std::abs(c - n * p) < 5 * sd);
  }
}

TEST_CASE("degenerate direction requests fail loudly") {
  Mat two(2, 2);
  two << 0, 0, 1, 1;
  const auto store = store_of(two);
  Rng rng(1);
  BaseActivation base{two.row(0).transpose(), 0, {}};
  DirectionSpec mix{.kind = DirectionKind::real_mixture, .store = &store};
  CHECK_THROWS_AS(make_direction(mix, &base, rng), InputError);

  DirectionSpec diff{.kind = DirectionKind::cov_random_difference};
  CHECK_THROWS_AS(make_direction(diff, &base, rng), InputError);

  Mat same = Mat::Ones(3, 2);
  const auto gm = fit_gaussian(same);
  DirectionSpec zero{.kind = DirectionKind::cov_random_difference, .gaussian = &gm};
  BaseActivation at_mean{gm.mean, std::nullopt, {}};
  CHECK_THROWS_AS(make_direction(zero, &at_mean, rng), NumericError);
  CHECK_THROWS_AS(parse_direction_kind("sideways"), InputError);
  CHECK(parse_direction_kind("real_mixture") == DirectionKind::real_mixture);
}

TEST_CASE("sae_error direction") {
  Sae zero = Sae::zeros(2, 2);
  const std::vector<double> base{1.0, 0.0};
  const auto d = sae_error_direction(zero, base);
  REQUIRE(d);
  CHECK(d->raw_length == 1.0);
  CHECK(d->vector[0] == -1.0);
  CHECK(d->vector[1] == 0.0);

  // relu(x) - relu(-x) = x: exact reconstruction.
  Sae identity = Sae::zeros(2, 4);
  identity.w_enc << 1, 0, -1, 0, 0, 1, 0, -1;
  identity.w_dec << 1, 0, 0, 1, -1, 0, 0, -1;
  const std::vector<double> x{0.3, -2.0};
  CHECK_FALSE(sae_error_direction(identity, x).has_value());
}

TEST_CASE("sae_feature picks uniformly among alive features inactive in the sequence") {
  Sae sae = Sae::zeros(3, 5);
  for (long j = 0; j < 5; ++j) sae.w_dec.row(j) = RowVec::Constant(3, double(j + 1));
  sae.alive_mask = {0, 1, 1, 1, 0};
  const std::vector<std::uint8_t> active{0, 0, 1, 0, 0};
  Rng rng(41);
  int ones = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const auto d = sae_feature_direction(sae, active, rng);
    REQUIRE(d);
    REQUIRE((*d->feature_id == 1 || *d->feature_id == 3));
    ones += *d->feature_id == 1;
    CHECK(std::abs(d->vector.norm() - 1.0) < 1e-12);
    CHECK(d->vector[0] * d->raw_length == doctest::Approx(double(*d->feature_id + 1)));
  }
  CHECK(std::abs(ones - n / 2.0) < 5 * std::sqrt(n * 0.25));
  const std::vector<std::uint8_t> all_active{1, 1, 1, 1, 1};
  CHECK_FALSE(sae_feature_direction(sae, all_active, rng).has_value());
}

TEST_CASE("sequence feature activity") {
  Sae sae = Sae::zeros(2, 3);
  sae.w_enc << 1, 0, -1, 0, 1, 0;
  Mat x(2, 2);
  x << 1, -1, 0.5, -2;
  CHECK(sequence_feature_activity(sae, x) == std::vector<std::uint8_t>{1, 0, 0});
}

TEST_CASE("differences of LRH activations lie in the feature span") {
  Rng rng(51);
  const auto dict = LrhDictionary::random(32, 10, rng);
  for (long i = 0; i < dict.features.rows(); ++i) CHECK(std::abs(dict.features.row(i).norm() - 1) < 1e-12);
  for (int trial = 0; trial < 100; ++trial) {
    const Vec f1 = dict.sample_coefficients(rng), f2 = dict.sample_coefficients(rng);
    const Vec x1 = dict.activation(f1), x2 = dict.activation(f2);
    const Vec diff = x1 - x2;
    const double residual = lrh_span_check(dict, {x1.data(), 32}, {x2.data(), 32});
    CHECK(residual <= 1e-6 * diff.norm());
    // x1 - x2 = sum_i (f_i(x1) - f_i(x2)) d_i; the bias cancels.
    Vec explicit_sum = Vec::Zero(32);
    for (long i = 0; i < 10; ++i) explicit_sum += (f1[i] - f2[i]) * dict.features.row(i).transpose();
    CHECK((diff - explicit_sum).cwiseAbs().maxCoeff() < 1e-9);
  }
  const Vec x = dict.activation(dict.sample_coefficients(rng));
  CHECK(lrh_span_check(dict, {x.data(), 32}, {x.data(), 32}) == 0.0);
  // A difference that includes the bias does not lie in the span.
  const Vec off = x + dict.bias;
  CHECK(lrh_span_check(dict, {off.data(), 32}, {x.data(), 32}) > 0.1 * dict.bias.norm());
}

TEST_CASE("Gaussian model save and load") {
  const KnownGaussian truth(6, 61);
  auto gm = fit_gaussian(truth.draw(100, 62));
  gm.hook = {3};
  gm.model_fingerprint = 0x1234abcd;
  const auto dir = testing::temp_dir("gaussian");
  gm.save(dir / "g.bin");
  const auto back = GaussianModel::load(dir / "g.bin");
  CHECK(back.mean == gm.mean);
  CHECK(back.covariance == gm.covariance);
  CHECK(back.cholesky == gm.cholesky);
  CHECK(back.jitter == gm.jitter);
  CHECK(back.hook == gm.hook);
  CHECK(back.model_fingerprint == gm.model_fingerprint);
  CHECK(back.n_samples == 100);
}
