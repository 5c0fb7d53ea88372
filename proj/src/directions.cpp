#include "sdir/directions.hpp"

#include <charconv>
#include <cmath>

#include <Eigen/Cholesky>
#include <Eigen/QR>

#include "sdir/tensor_file.hpp"

namespace sdir {

namespace {

using Index = Eigen::Index;

constexpr const char* kGaussianMagic = "SDIRGAU1";
constexpr int kMaxRedraws = 8;

double round_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

// Cholesky with the jitter ladder; returns false if every rung fails.
bool factorize(const Mat& cov, Mat& l, double& jitter) {
  const auto d = cov.rows();
  const double scale = cov.trace() / static_cast<double>(d);
  if (scale == 0.0 && cov.cwiseAbs().maxCoeff() == 0.0) {
    l = Mat::Zero(d, d);
    jitter = 0.0;
    return true;
  }
  for (double rung : {0.0, 1e-8, 1e-6, 1e-4}) {
    const double j = rung * scale;
    Mat a = cov;
    a.diagonal().array() += j;
    Eigen::LLT<Mat> llt(a);
    if (llt.info() != Eigen::Success) continue;
    Mat lower = llt.matrixL();
    if (!all_finite({lower.data(), static_cast<std::size_t>(lower.size())})) continue;
    l = std::move(lower);
    jitter = j;
    return true;
  }
  return false;
}

std::string format_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::uint64_t parse_u64(const std::string& s, int base = 10) {
  std::uint64_t v = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v, base);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw InputError("malformed Gaussian attribute '" + s + "'");
  }
  return v;
}

double parse_double(const std::string& s) {
  double v = 0.0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw InputError("malformed Gaussian attribute '" + s + "'");
  }
  return v;
}

// Uniform index in [0, n) skipping `excluded` when set.
std::size_t index_excluding(Rng& rng, std::size_t n, std::optional<std::size_t> excluded) {
  if (!excluded || *excluded >= n) return rng.index(n);
  const std::size_t k = rng.index(n - 1);
  return k >= *excluded ? k + 1 : k;
}

}  // namespace

GaussianModel fit_gaussian(const Mat& rows, std::string* warning) {
  const auto n = rows.rows();
  const auto d = rows.cols();
  if (n < 2 || d == 0) throw InputError("fit_gaussian needs at least two rows");
  if (!all_finite({rows.data(), static_cast<std::size_t>(rows.size())})) {
    throw InputError("fit_gaussian: activations contain NaN or Inf");
  }
  if (warning != nullptr) {
    warning->clear();
    if (n < d + 1) {
      *warning = "only " + std::to_string(n) + " rows for a " + std::to_string(d) +
                 "-dimensional covariance; the estimate is rank deficient";
    }
  }
  GaussianModel gm;
  gm.n_samples = static_cast<std::size_t>(n);
  gm.mean = rows.colwise().mean().transpose();
  const Mat centered = rows.rowwise() - gm.mean.transpose();
  Mat cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  cov = 0.5 * (cov + cov.transpose());
  gm.mean = gm.mean.unaryExpr(&round_f32);
  gm.covariance = cov.unaryExpr(&round_f32);
  if (!factorize(gm.covariance, gm.cholesky, gm.jitter)) {
    throw NumericError("covariance Cholesky failed at every jitter level");
  }
  return gm;
}

GaussianModel fit_gaussian(const ActivationStore& store, std::string* warning) {
  GaussianModel gm = fit_gaussian(store.slice(0, store.size()), warning);
  gm.hook = store.hook();
  gm.model_fingerprint = store.model_fingerprint();
  return gm;
}

Vec sample_cov_random(const GaussianModel& gm, const Vec& z) {
  if (static_cast<std::size_t>(z.size()) != gm.dim()) throw InputError("z has wrong dimension");
  return gm.mean + gm.cholesky.triangularView<Eigen::Lower>() * z;
}

Vec sample_cov_random(const GaussianModel& gm, Rng& rng) {
  return sample_cov_random(gm, rng.normal_vector(gm.dim()));
}

void GaussianModel::save(const std::filesystem::path& path) const {
  io::TensorFile file;
  file.magic = kGaussianMagic;
  file.attributes["jitter"] = format_double(jitter);
  file.attributes["n_samples"] = std::to_string(n_samples);
  file.attributes["hook_layer"] = std::to_string(hook.layer);
  file.attributes["model_fingerprint"] = hex64(model_fingerprint);
  file.tensors.push_back(io::from_vec("mean", mean));
  file.tensors.push_back(io::from_mat("covariance", covariance));
  io::write_tensor_file(path, file);
}

GaussianModel GaussianModel::load(const std::filesystem::path& path) {
  const io::TensorFile file = io::read_tensor_file(path, kGaussianMagic);
  GaussianModel gm;
  gm.n_samples = parse_u64(file.attribute("n_samples"));
  gm.hook.layer = parse_u64(file.attribute("hook_layer"));
  gm.model_fingerprint = parse_u64(file.attribute("model_fingerprint"), 16);
  gm.mean = io::to_vec(file.tensor("mean"));
  gm.covariance = io::to_mat(file.tensor("covariance"));
  if (gm.covariance.rows() != gm.mean.size() || gm.covariance.cols() != gm.mean.size()) {
    throw InputError("inconsistent Gaussian tensor shapes in " + path.string());
  }
  if (!factorize(gm.covariance, gm.cholesky, gm.jitter)) {
    throw NumericError("stored covariance in " + path.string() + " is not factorizable");
  }
  if (gm.jitter != parse_double(file.attribute("jitter"))) {
    throw InputError("Gaussian jitter in " + path.string() + " does not match its covariance");
  }
  return gm;
}

std::string to_string(DirectionKind kind) {
  switch (kind) {
    case DirectionKind::isotropic_random: return "isotropic_random";
    case DirectionKind::cov_random_difference: return "cov_random_difference";
    case DirectionKind::cov_random_mixture: return "cov_random_mixture";
    case DirectionKind::real_difference: return "real_difference";
    case DirectionKind::real_mixture: return "real_mixture";
    case DirectionKind::sae_error: return "sae_error";
    case DirectionKind::sae_feature: return "sae_feature";
  }
  return "unknown";
}

DirectionKind parse_direction_kind(std::string_view s) {
  for (auto k : {DirectionKind::isotropic_random, DirectionKind::cov_random_difference,
                 DirectionKind::cov_random_mixture, DirectionKind::real_difference,
                 DirectionKind::real_mixture, DirectionKind::sae_error, DirectionKind::sae_feature}) {
    if (s == to_string(k)) return k;
  }
  throw InputError("unknown direction kind '" + std::string(s) + "'");
}

bool uses_base(DirectionKind kind) {
  return kind == DirectionKind::cov_random_difference || kind == DirectionKind::real_difference ||
         kind == DirectionKind::sae_error;
}

void DirectionSpec::validate() const {
  const std::string k = to_string(kind);
  switch (kind) {
    case DirectionKind::isotropic_random: break;
    case DirectionKind::cov_random_difference:
    case DirectionKind::cov_random_mixture:
      if (gaussian == nullptr) throw InputError(k + " needs a Gaussian model");
      break;
    case DirectionKind::real_difference:
    case DirectionKind::real_mixture:
      if (store == nullptr) throw InputError(k + " needs an activation store");
      if (store->size() < 2) throw InputError(k + " needs a store with at least two rows");
      break;
    case DirectionKind::sae_error:
    case DirectionKind::sae_feature:
      if (sae == nullptr) throw InputError(k + " needs an SAE");
      break;
  }
}

std::optional<Direction> sae_error_direction(const Sae& sae, std::span<const double> base) {
  if (base.size() != sae.d_model()) throw InputError("base activation has wrong dimension");
  const Vec diff = reconstruct(sae, base) - as_vec(base);
  const double eps = diff.norm();
  if (!std::isfinite(eps)) throw NumericError("SAE reconstruction is not finite");
  if (eps < kExactReconstructionEpsilon) return std::nullopt;
  Direction d;
  d.vector = diff / eps;
  d.kind = DirectionKind::sae_error;
  d.raw_length = eps;
  d.uses_base = true;
  return d;
}

std::optional<Direction> sae_feature_direction(const Sae& sae,
                                               std::span<const std::uint8_t> active_in_sequence,
                                               Rng& rng) {
  if (active_in_sequence.size() != sae.n_features()) {
    throw InputError("feature activity mask has wrong length");
  }
  if (sae.alive_mask.size() != sae.n_features()) throw InputError("SAE alive mask has wrong length");
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < sae.n_features(); ++i) {
    if (sae.alive_mask[i] && !active_in_sequence[i]) candidates.push_back(i);
  }
  if (candidates.empty()) return std::nullopt;
  const std::size_t id = candidates[rng.index(candidates.size())];
  const Vec row = sae.w_dec.row(static_cast<Index>(id)).transpose();
  const double norm = row.norm();
  if (!(norm > 0.0)) throw NumericError("SAE decoder row " + std::to_string(id) + " has zero norm");
  Direction d;
  d.vector = row / norm;
  d.kind = DirectionKind::sae_feature;
  d.raw_length = norm;
  d.feature_id = id;
  return d;
}

std::vector<std::uint8_t> sequence_feature_activity(const Sae& sae, const Mat& sequence_activations) {
  const Mat f = encode_batch(sae, sequence_activations);
  std::vector<std::uint8_t> active(sae.n_features(), 0);
  for (Index j = 0; j < f.cols(); ++j) {
    active[static_cast<std::size_t>(j)] = (f.col(j).array() > kFeatureActiveThreshold).any();
  }
  return active;
}

std::optional<Direction> make_direction(const DirectionSpec& spec, const BaseActivation* base,
                                        Rng& rng) {
  spec.validate();
  if (uses_base(spec.kind) && base == nullptr) {
    throw InputError(to_string(spec.kind) + " needs a base activation");
  }
  switch (spec.kind) {
    case DirectionKind::sae_error:
      return sae_error_direction(*spec.sae,
                                 {base->activation.data(), static_cast<std::size_t>(base->activation.size())});
    case DirectionKind::sae_feature:
      if (base == nullptr || base->active_in_sequence.empty()) {
        throw InputError("sae_feature needs the sequence's feature activity");
      }
      return sae_feature_direction(*spec.sae, base->active_in_sequence, rng);
    default: break;
  }

  std::size_t dim = 0;
  if (spec.gaussian != nullptr) dim = spec.gaussian->dim();
  else if (spec.store != nullptr) dim = spec.store->d_model();
  else if (base != nullptr) dim = static_cast<std::size_t>(base->activation.size());
  else throw InputError("isotropic_random needs a base activation or a source to fix the dimension");
  if (base != nullptr && static_cast<std::size_t>(base->activation.size()) != dim) {
    throw InputError("base activation has wrong dimension");
  }
  const std::optional<std::size_t> excluded = base ? base->store_index : std::nullopt;
  const bool skip_base = spec.store != nullptr && excluded && *excluded < spec.store->size();
  if (spec.kind == DirectionKind::real_mixture && skip_base && spec.store->size() < 3) {
    throw InputError("real_mixture: fewer than two store rows remain after excluding the base row");
  }

  for (int attempt = 0; attempt < kMaxRedraws; ++attempt) {
    Direction d;
    d.kind = spec.kind;
    d.uses_base = uses_base(spec.kind);
    Vec v;
    switch (spec.kind) {
      case DirectionKind::isotropic_random:
        v = rng.normal_vector(dim);
        break;
      case DirectionKind::cov_random_difference:
        v = sample_cov_random(*spec.gaussian, rng) - base->activation;
        break;
      case DirectionKind::cov_random_mixture: {
        const Vec a = sample_cov_random(*spec.gaussian, rng);
        v = a - sample_cov_random(*spec.gaussian, rng);
        break;
      }
      case DirectionKind::real_difference: {
        const std::size_t i = index_excluding(rng, spec.store->size(), excluded);
        d.source_rows = {i};
        v = spec.store->row_vec(i) - base->activation;
        break;
      }
      case DirectionKind::real_mixture: {
        // Distinct ordered pair among the rows other than the base.
        const std::size_t m = spec.store->size() - (skip_base ? 1 : 0);
        const std::size_t a = rng.index(m);
        std::size_t b = rng.index(m - 1);
        if (b >= a) ++b;
        const std::size_t i = skip_base && a >= *excluded ? a + 1 : a;
        const std::size_t j = skip_base && b >= *excluded ? b + 1 : b;
        d.source_rows = {i, j};
        v = spec.store->row_vec(i) - spec.store->row_vec(j);
        break;
      }
      default: break;
    }
    const double norm = v.norm();
    if (!std::isfinite(norm)) throw NumericError(to_string(spec.kind) + ": direction is not finite");
    if (norm > 0.0) {
      d.vector = v / norm;
      d.raw_length = norm;
      return d;
    }
  }
  throw NumericError(to_string(spec.kind) + ": zero-length direction after " +
                     std::to_string(kMaxRedraws) + " draws");
}

LrhDictionary LrhDictionary::random(std::size_t d, std::size_t n_features, Rng& rng) {
  LrhDictionary dict;
  dict.bias = rng.normal_vector(d);
  dict.features.resize(static_cast<Index>(n_features), static_cast<Index>(d));
  for (std::size_t i = 0; i < n_features; ++i) {
    const Vec r = rng.normal_vector(d);
    dict.features.row(static_cast<Index>(i)) = r.transpose() / r.norm();
  }
  return dict;
}

Vec LrhDictionary::sample_coefficients(Rng& rng, double density) const {
  Vec f = Vec::Zero(features.rows());
  for (Index i = 0; i < f.size(); ++i) {
    if (rng.uniform() < density) f[i] = 3.0 * rng.uniform();
  }
  return f;
}

Vec LrhDictionary::activation(const Vec& coefficients) const {
  return bias + features.transpose() * coefficients;
}

double lrh_span_check(const LrhDictionary& dict, std::span<const double> x1,
                      std::span<const double> x2) {
  if (x1.size() != x2.size() || x1.size() != static_cast<std::size_t>(dict.features.cols())) {
    throw InputError("activations do not match the dictionary dimension");
  }
  const Vec v = as_vec(x1) - as_vec(x2);
  if (v.norm() == 0.0) return 0.0;
  const Mat basis = dict.features.transpose();  // d x F
  const Vec c = basis.colPivHouseholderQr().solve(v);
  return (v - basis * c).norm();
}

}  // namespace sdir
