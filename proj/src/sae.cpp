#include "sdir/sae.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>

#include "sdir/optim.hpp"
#include "sdir/parallel.hpp"
#include "sdir/rng.hpp"
#include "sdir/tensor_file.hpp"

namespace sdir {

namespace {

using Index = Eigen::Index;

constexpr const char* kSaeMagic = "SDIRSAE1";

std::string format_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

double parse_double(const std::string& s, std::string_view what) {
  double v = 0.0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw InputError("malformed SAE attribute " + std::string(what) + ": '" + s + "'");
  }
  return v;
}

std::uint64_t parse_u64(const std::string& s, std::string_view what, int base = 10) {
  std::uint64_t v = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v, base);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw InputError("malformed SAE attribute " + std::string(what) + ": '" + s + "'");
  }
  return v;
}

struct Encoded {
  Mat pre;    // N x F
  Mat f;      // N x F
  Mat x_hat;  // N x d
};

Encoded run_sae(const Sae& sae, const Mat& x) {
  Encoded e;
  e.pre = (x.rowwise() - sae.b_dec.transpose()) * sae.w_enc;
  e.pre.rowwise() += sae.b_enc.transpose();
  e.f = e.pre.cwiseMax(0.0);
  e.x_hat = e.f * sae.w_dec;
  e.x_hat.rowwise() += sae.b_dec.transpose();
  return e;
}

// Backprop of dL/dx_hat plus the L1 term (lambda / n_total per row) into SAE grads.
void sae_backward(const Sae& sae, const Mat& x, const Encoded& e, const Mat& d_xhat,
                  double l1_scale, SaeGrads& g) {
  Mat d_f = d_xhat * sae.w_dec.transpose();
  d_f.array() += l1_scale * (e.f.array() > 0.0).cast<double>();
  const Mat d_pre = (e.pre.array() > 0.0).cast<double>() * d_f.array();
  g.w_dec.noalias() += e.f.transpose() * d_xhat;
  g.b_dec += d_xhat.colwise().sum().transpose();
  g.w_enc.noalias() += (x.rowwise() - sae.b_dec.transpose()).transpose() * d_pre;
  const RowVec pre_sum = d_pre.colwise().sum();
  g.b_enc += pre_sum.transpose();
  g.b_dec -= sae.w_enc * pre_sum.transpose();
}

double l1_sum(const Mat& f) { return f.array().abs().sum(); }

}  // namespace

std::string to_string(SaeVariant v) {
  switch (v) {
    case SaeVariant::local: return "local";
    case SaeVariant::e2e: return "e2e";
    case SaeVariant::e2e_ds: return "e2e_ds";
  }
  return "unknown";
}

SaeVariant parse_sae_variant(std::string_view s) {
  if (s == "local") return SaeVariant::local;
  if (s == "e2e") return SaeVariant::e2e;
  if (s == "e2e_ds" || s == "e2e+ds") return SaeVariant::e2e_ds;
  throw InputError("unknown SAE variant '" + std::string(s) + "' (expected local, e2e or e2e_ds)");
}

Sae Sae::zeros(std::size_t d_model, std::size_t n_features) {
  Sae s;
  const auto d = static_cast<Index>(d_model);
  const auto f = static_cast<Index>(n_features);
  s.w_enc = Mat::Zero(d, f);
  s.b_enc = Vec::Zero(f);
  s.w_dec = Mat::Zero(f, d);
  s.b_dec = Vec::Zero(d);
  s.alive_mask.assign(n_features, 1);
  return s;
}

std::uint64_t Sae::fingerprint() const {
  std::uint64_t h = fnv1a(to_string(variant));
  const std::uint64_t dims[] = {d_model(), n_features(), hook.layer, model_fingerprint};
  h = fnv1a(dims, sizeof dims, h);
  h = fnv1a(&sparsity_coeff, sizeof sparsity_coeff, h);
  for (const auto* t : {&w_enc, &w_dec}) {
    for (Index i = 0; i < t->size(); ++i) {
      const float v = static_cast<float>(t->data()[i]);
      h = fnv1a(&v, sizeof v, h);
    }
  }
  for (const auto* t : {&b_enc, &b_dec}) {
    for (Index i = 0; i < t->size(); ++i) {
      const float v = static_cast<float>((*t)[i]);
      h = fnv1a(&v, sizeof v, h);
    }
  }
  return h;
}

void Sae::round_to_f32() {
  auto round = [](double* p, Index n) {
    for (Index i = 0; i < n; ++i) p[i] = static_cast<double>(static_cast<float>(p[i]));
  };
  round(w_enc.data(), w_enc.size());
  round(b_enc.data(), b_enc.size());
  round(w_dec.data(), w_dec.size());
  round(b_dec.data(), b_dec.size());
}

void Sae::save(const std::filesystem::path& path) const {
  io::TensorFile file;
  file.magic = kSaeMagic;
  file.attributes["variant"] = to_string(variant);
  file.attributes["sparsity_coeff"] = format_double(sparsity_coeff);
  file.attributes["hook_layer"] = std::to_string(hook.layer);
  file.attributes["model_fingerprint"] = hex64(model_fingerprint);
  file.attributes["mean_l0"] = format_double(mean_l0);
  file.tensors.push_back(io::from_mat("w_enc", w_enc));
  file.tensors.push_back(io::from_vec("b_enc", b_enc));
  file.tensors.push_back(io::from_mat("w_dec", w_dec));
  file.tensors.push_back(io::from_vec("b_dec", b_dec));
  Vec alive(static_cast<Index>(alive_mask.size()));
  for (std::size_t i = 0; i < alive_mask.size(); ++i) alive[static_cast<Index>(i)] = alive_mask[i];
  file.tensors.push_back(io::from_vec("alive_mask", alive));
  io::write_tensor_file(path, file);
}

Sae Sae::load(const std::filesystem::path& path) {
  const io::TensorFile file = io::read_tensor_file(path, kSaeMagic);
  Sae s;
  s.variant = parse_sae_variant(file.attribute("variant"));
  s.sparsity_coeff = parse_double(file.attribute("sparsity_coeff"), "sparsity_coeff");
  s.hook.layer = parse_u64(file.attribute("hook_layer"), "hook_layer");
  s.model_fingerprint = parse_u64(file.attribute("model_fingerprint"), "model_fingerprint", 16);
  s.mean_l0 = parse_double(file.attribute("mean_l0"), "mean_l0");
  s.w_enc = io::to_mat(file.tensor("w_enc"));
  s.b_enc = io::to_vec(file.tensor("b_enc"));
  s.w_dec = io::to_mat(file.tensor("w_dec"));
  s.b_dec = io::to_vec(file.tensor("b_dec"));
  const Vec alive = io::to_vec(file.tensor("alive_mask"));
  const Index d = s.w_enc.rows();
  const Index f = s.w_enc.cols();
  if (s.b_enc.size() != f || s.w_dec.rows() != f || s.w_dec.cols() != d || s.b_dec.size() != d ||
      alive.size() != f) {
    throw InputError("inconsistent SAE tensor shapes in " + path.string());
  }
  s.alive_mask.resize(static_cast<std::size_t>(f));
  for (Index i = 0; i < f; ++i) s.alive_mask[static_cast<std::size_t>(i)] = alive[i] != 0.0;
  return s;
}

Vec encode(const Sae& sae, std::span<const double> x) {
  if (x.size() != sae.d_model()) throw InputError("SAE input has wrong dimension");
  Vec pre = sae.w_enc.transpose() * (as_vec(x) - sae.b_dec) + sae.b_enc;
  return pre.cwiseMax(0.0);
}

Mat encode_batch(const Sae& sae, const Mat& x) {
  if (static_cast<std::size_t>(x.cols()) != sae.d_model()) {
    throw InputError("SAE input has wrong dimension");
  }
  Mat pre = (x.rowwise() - sae.b_dec.transpose()) * sae.w_enc;
  pre.rowwise() += sae.b_enc.transpose();
  return pre.cwiseMax(0.0);
}

Vec decode(const Sae& sae, std::span<const double> f) {
  if (f.size() != sae.n_features()) throw InputError("SAE code has wrong dimension");
  return sae.w_dec.transpose() * as_vec(f) + sae.b_dec;
}

Mat decode_batch(const Sae& sae, const Mat& f) {
  Mat x = f * sae.w_dec;
  x.rowwise() += sae.b_dec.transpose();
  return x;
}

Vec reconstruct(const Sae& sae, std::span<const double> x) {
  const Vec f = encode(sae, x);
  return decode(sae, {f.data(), static_cast<std::size_t>(f.size())});
}

SaeGrads SaeGrads::zeros_like(const Sae& sae) {
  return {Mat::Zero(sae.w_enc.rows(), sae.w_enc.cols()), Vec::Zero(sae.b_enc.size()),
          Mat::Zero(sae.w_dec.rows(), sae.w_dec.cols()), Vec::Zero(sae.b_dec.size())};
}

void SaeGrads::add(const SaeGrads& o) {
  w_enc += o.w_enc;
  b_enc += o.b_enc;
  w_dec += o.w_dec;
  b_dec += o.b_dec;
}

SaeLoss local_loss(const Sae& sae, const Mat& x, SaeGrads* grads) {
  if (x.rows() == 0) throw InputError("local SAE loss needs at least one row");
  const Encoded e = run_sae(sae, x);
  const double n = static_cast<double>(x.rows());
  const Mat diff = e.x_hat - x;
  SaeLoss loss;
  loss.reconstruction = diff.squaredNorm() / n;
  loss.sparsity = sae.sparsity_coeff * l1_sum(e.f) / n;
  loss.total = loss.reconstruction + loss.sparsity;
  if (grads != nullptr) sae_backward(sae, x, e, (2.0 / n) * diff, sae.sparsity_coeff / n, *grads);
  return loss;
}

SaeLoss e2e_loss(const Sae& sae, const TransformerModel& model,
                 std::span<const TokenSequence> batch, bool downstream, double beta,
                 SaeGrads* grads, std::size_t workers) {
  if (batch.empty()) throw InputError("end-to-end SAE loss needs at least one sequence");
  const ModelConfig& c = model.config();
  const std::size_t hook = sae.hook.layer;
  if (hook > c.n_layers) throw InputError("SAE hook layer is beyond the model");
  if (sae.d_model() != c.d_model) throw InputError("SAE width does not match the model");

  std::size_t n_total = 0;
  for (const auto& s : batch) n_total += s.size();
  const double n = static_cast<double>(n_total);
  const std::size_t n_downstream = c.n_layers - hook;  // layers hook+1 ..= n_layers
  const bool use_ds = downstream && n_downstream > 0;

  struct Slot {
    SaeLoss loss;
    SaeGrads grads;
  };
  std::vector<Slot> slots(batch.size());

  parallel_for(batch.size(), workers, [&](std::size_t b) {
    const TokenSequence& tokens = batch[b];
    validate_tokens(model, tokens);
    const PrefixCache clean = PrefixCache::build(model, tokens, sae.hook);
    const Mat& x = clean.resid_at(hook);
    const Encoded e = run_sae(sae, x);

    Activations acts;
    const Mat logits = forward_from(model, hook, e.x_hat, (grads || downstream) ? &acts : nullptr);
    const Mat logp = log_softmax_rows(clean.logits);
    const Mat logq = log_softmax_rows(logits);
    const Mat p = logp.array().exp().matrix();

    Slot& s = slots[b];
    s.loss.kl = (p.array() * (logp - logq).array()).sum() / n;
    s.loss.sparsity = sae.sparsity_coeff * l1_sum(e.f) / n;

    std::vector<ResidInjection> injections;
    if (use_ds) {
      const double w = beta / static_cast<double>(n_downstream);
      for (std::size_t l = hook + 1; l <= c.n_layers; ++l) {
        const Mat diff = acts.resid_at(l) - clean.resid_at(l);
        s.loss.downstream += w * diff.squaredNorm() / n;
        if (grads != nullptr) injections.push_back({l, (2.0 * w / n) * diff});
      }
    }
    if (grads != nullptr) {
      s.grads = SaeGrads::zeros_like(sae);
      const Mat d_logits = (logq.array().exp().matrix() - p) / n;
      Mat d_xhat;
      backward_from(model, acts, d_logits, injections, nullptr, &d_xhat);
      sae_backward(sae, x, e, d_xhat, sae.sparsity_coeff / n, s.grads);
    }
  });

  SaeLoss total;
  if (grads != nullptr) *grads = SaeGrads::zeros_like(sae);
  for (const Slot& s : slots) {
    total.kl += s.loss.kl;
    total.downstream += s.loss.downstream;
    total.sparsity += s.loss.sparsity;
    if (grads != nullptr) grads->add(s.grads);
  }
  total.total = total.kl + total.downstream + total.sparsity;
  return total;
}

double mean_l0(const Sae& sae, const ActivationStore& store, std::size_t begin, std::size_t end) {
  end = std::min(end, store.size());
  if (begin >= end) throw InputError("mean_l0 needs a non-empty row range");
  constexpr std::size_t kChunk = 4096;
  std::size_t active = 0;
  for (std::size_t r = begin; r < end; r += kChunk) {
    const Mat f = encode_batch(sae, store.slice(r, std::min(end, r + kChunk)));
    active += static_cast<std::size_t>((f.array() > kFeatureActiveThreshold).count());
  }
  return static_cast<double>(active) / static_cast<double>(end - begin);
}

std::vector<std::uint8_t> compute_alive_mask(const Sae& sae, const ActivationStore& store,
                                             double rate) {
  if (store.empty()) throw InputError("cannot measure feature liveness on an empty store");
  const auto needed = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::ceil(rate * static_cast<double>(store.size()))));
  std::vector<std::size_t> fired(sae.n_features(), 0);
  constexpr std::size_t kChunk = 4096;
  for (std::size_t r = 0; r < store.size(); r += kChunk) {
    const Mat f = encode_batch(sae, store.slice(r, std::min(store.size(), r + kChunk)));
    for (Index j = 0; j < f.cols(); ++j) {
      fired[static_cast<std::size_t>(j)] +=
          static_cast<std::size_t>((f.col(j).array() > kFeatureActiveThreshold).count());
    }
  }
  std::vector<std::uint8_t> mask(sae.n_features());
  for (std::size_t j = 0; j < mask.size(); ++j) mask[j] = fired[j] >= needed;
  return mask;
}

double fraction_of_variance_unexplained(const Sae& sae, const Mat& x) {
  if (x.rows() < 2) throw InputError("FVU needs at least two rows");
  const Encoded e = run_sae(sae, x);
  const RowVec mean = x.colwise().mean();
  const double total = (x.rowwise() - mean).squaredNorm();
  if (total <= 0.0) throw NumericError("FVU undefined: rows have zero variance");
  return (x - e.x_hat).squaredNorm() / total;
}

namespace {

void normalize_decoder_rows(Sae& sae) {
  for (Index j = 0; j < sae.w_dec.rows(); ++j) {
    const double norm = sae.w_dec.row(j).norm();
    if (norm > 0.0) sae.w_dec.row(j) /= norm;
  }
}

// Drop the component of each decoder-row gradient along the row itself.
void project_decoder_grad(const Sae& sae, Mat& g) {
  for (Index j = 0; j < g.rows(); ++j) {
    g.row(j) -= g.row(j).dot(sae.w_dec.row(j)) * sae.w_dec.row(j);
  }
}

std::vector<ParamSlot> sae_slots(Sae& sae, const SaeGrads& g) {
  auto slot = [](auto& value, const auto& grad) {
    return ParamSlot{{value.data(), static_cast<std::size_t>(value.size())},
                     {grad.data(), static_cast<std::size_t>(grad.size())},
                     false};
  };
  return {slot(sae.w_enc, g.w_enc), slot(sae.b_enc, g.b_enc), slot(sae.w_dec, g.w_dec),
          slot(sae.b_dec, g.b_dec)};
}

// Re-initialises dead features from rows the SAE reconstructs badly: each dead
// feature takes a row sampled with probability proportional to its squared
// error, pointing the decoder at the residual and the encoder at a small copy.
std::size_t resample_dead(Sae& sae, AdamW& adam, const Mat& rows, std::vector<std::size_t>& idle,
                          std::size_t dead_steps, Rng& rng) {
  std::vector<std::size_t> dead;
  for (std::size_t j = 0; j < idle.size(); ++j) {
    if (idle[j] >= dead_steps) dead.push_back(j);
  }
  if (dead.empty()) return 0;
  const Encoded e = run_sae(sae, rows);
  const Mat residual = rows - e.x_hat;
  std::vector<double> weights(static_cast<std::size_t>(rows.rows()));
  for (Index r = 0; r < rows.rows(); ++r) weights[static_cast<std::size_t>(r)] = residual.row(r).squaredNorm();
  if (std::accumulate(weights.begin(), weights.end(), 0.0) <= 0.0) return 0;
  std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());

  double alive_norm = 0.0;
  std::size_t n_alive = 0;
  for (std::size_t j = 0; j < idle.size(); ++j) {
    if (idle[j] < dead_steps) {
      alive_norm += sae.w_enc.col(static_cast<Index>(j)).norm();
      ++n_alive;
    }
  }
  const double enc_scale = 0.2 * (n_alive > 0 ? alive_norm / static_cast<double>(n_alive) : 1.0);

  const std::size_t d = sae.d_model();
  const std::size_t f = sae.n_features();
  for (std::size_t j : dead) {
    const RowVec r = residual.row(static_cast<Index>(pick(rng.engine())));
    const RowVec dir = r / r.norm();
    const auto jj = static_cast<Index>(j);
    sae.w_dec.row(jj) = dir;
    sae.w_enc.col(jj) = enc_scale * dir.transpose();
    sae.b_enc[jj] = 0.0;
    for (std::size_t i = 0; i < d; ++i) adam.reset_moments(i * f + j, 1);
    adam.reset_moments(d * f + j, 1);
    adam.reset_moments(d * f + f + j * d, d);
    idle[j] = 0;
  }
  return dead.size();
}

}  // namespace

std::pair<Sae, SaeTrainReport> train_sae(const TransformerModel& model, const ActivationStore& store,
                                         std::span<const TokenSequence> corpus, SaeVariant variant,
                                         double sparsity_coeff, const SaeTrainOptions& options,
                                         std::uint64_t seed) {
  if (store.model_fingerprint() != model.fingerprint()) {
    throw InputError("activation store was captured from a different model");
  }
  if (options.n_features == 0) throw InputError("sae.n_features must be >= 1");
  if (!(sparsity_coeff >= 0.0) || !std::isfinite(sparsity_coeff)) {
    throw InputError("sae.lambda must be a finite non-negative number");
  }
  const std::size_t held = held_out_begin(store, options.held_out_fraction);
  if (held < 2 || store.size() - held < 2) {
    throw InputError("activation store too small for an SAE train/held-out split");
  }
  const std::size_t d = store.d_model();
  const std::size_t n_feat = options.n_features;

  Rng rng(derive_seed(seed, "sae.init"));
  Sae sae = Sae::zeros(d, n_feat);
  sae.variant = variant;
  sae.sparsity_coeff = sparsity_coeff;
  sae.hook = store.hook();
  sae.model_fingerprint = model.fingerprint();
  for (std::size_t j = 0; j < n_feat; ++j) {
    const Vec v = rng.normal_vector(d);
    sae.w_dec.row(static_cast<Index>(j)) = v.transpose() / v.norm();
  }
  sae.w_enc = sae.w_dec.transpose();
  {
    Vec mean = Vec::Zero(static_cast<Index>(d));
    for (std::size_t r = 0; r < held; ++r) mean += store.row_vec(r);
    sae.b_dec = mean / static_cast<double>(held);
  }

  // Sequences whose every stored row lies before the held-out tail.
  std::vector<std::uint32_t> train_seqs;
  if (variant != SaeVariant::local) {
    std::vector<std::uint8_t> in_held;
    for (std::size_t r = held; r < store.size(); ++r) {
      const auto s = store.meta(r).sequence_id;
      if (s >= in_held.size()) in_held.resize(s + 1, 0);
      in_held[s] = 1;
    }
    for (std::uint32_t s : store.sequence_ids()) {
      if (s >= corpus.size()) throw InputError("store references a sequence missing from the corpus");
      if (s >= in_held.size() || !in_held[s]) train_seqs.push_back(s);
    }
    if (train_seqs.empty()) throw InputError("no training sequences available for the e2e SAE");
  }

  const std::size_t n_params = 2 * d * n_feat + n_feat + d;
  AdamW adam(n_params, {0.9, 0.999, 1e-8, 0.0});
  Rng batch_rng(derive_seed(seed, "sae.batch"));
  Rng resample_rng(derive_seed(seed, "sae.resample"));
  std::vector<std::size_t> idle(n_feat, 0);

  SaeTrainReport report;
  report.variant = variant;
  report.sparsity_coeff = sparsity_coeff;
  report.n_features = n_feat;
  report.steps = options.steps;
  report.seed = seed;
  report.held_out_rows = store.size() - held;
  const std::size_t tail = std::max<std::size_t>(1, options.steps / 10);

  std::vector<std::size_t> idx(options.batch_rows);
  std::vector<TokenSequence> seqs(options.batch_sequences);
  for (std::size_t step = 0; step < options.steps; ++step) {
    SaeGrads g = SaeGrads::zeros_like(sae);
    SaeLoss loss;
    Mat fired_rows;
    if (variant == SaeVariant::local) {
      for (auto& i : idx) i = batch_rng.index(held);
      const Mat x = store.gather(idx);
      loss = local_loss(sae, x, &g);
      fired_rows = x;
    } else {
      for (auto& s : seqs) s = corpus[train_seqs[batch_rng.index(train_seqs.size())]];
      loss = e2e_loss(sae, model, seqs, variant == SaeVariant::e2e_ds, options.beta, &g,
                      options.workers);
      fired_rows = residual_at(model, seqs.front(), sae.hook.layer);
    }
    if (!std::isfinite(loss.total)) {
      throw NumericError("SAE loss became non-finite at step " + std::to_string(step) +
                         "; lower sae.learning_rate");
    }
    if (step + tail >= options.steps) {
      report.final_loss.total += loss.total / static_cast<double>(tail);
      report.final_loss.reconstruction += loss.reconstruction / static_cast<double>(tail);
      report.final_loss.kl += loss.kl / static_cast<double>(tail);
      report.final_loss.downstream += loss.downstream / static_cast<double>(tail);
      report.final_loss.sparsity += loss.sparsity / static_cast<double>(tail);
    }

    project_decoder_grad(sae, g.w_dec);
    const double lr = warmup_cosine(step, options.warmup_steps, options.steps,
                                    options.learning_rate, 0.1);
    adam.step(sae_slots(sae, g), lr);
    normalize_decoder_rows(sae);

    const Mat f = encode_batch(sae, fired_rows);
    for (std::size_t j = 0; j < n_feat; ++j) {
      const bool fired = (f.col(static_cast<Index>(j)).array() > kFeatureActiveThreshold).any();
      idle[j] = fired ? 0 : idle[j] + 1;
    }
    if (step + 1 < options.steps && options.dead_steps > 0) {
      const bool any_dead = std::any_of(idle.begin(), idle.end(),
                                        [&](std::size_t v) { return v >= options.dead_steps; });
      if (any_dead) {
        std::vector<std::size_t> pool(std::min<std::size_t>(4096, held));
        for (auto& i : pool) i = resample_rng.index(held);
        report.resampled +=
            resample_dead(sae, adam, store.gather(pool), idle, options.dead_steps, resample_rng);
      }
    }
  }

  sae.round_to_f32();
  normalize_decoder_rows(sae);
  sae.round_to_f32();
  sae.alive_mask = compute_alive_mask(sae, store, options.alive_rate);
  report.alive_count = static_cast<std::size_t>(
      std::count(sae.alive_mask.begin(), sae.alive_mask.end(), std::uint8_t{1}));
  if (report.alive_count == 0) {
    throw NumericError("every SAE feature is dead after training; lower sae.lambda");
  }
  report.mean_l0 = mean_l0(sae, store, held, store.size());
  report.fvu = fraction_of_variance_unexplained(sae, store.slice(held, store.size()));
  sae.mean_l0 = report.mean_l0;
  return {std::move(sae), report};
}

}  // namespace sdir
