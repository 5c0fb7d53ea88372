#include "sdir/model.hpp"

#include <cmath>
#include <limits>

#include "sdir/rng.hpp"
#include "sdir/tensor_file.hpp"

namespace sdir {

namespace {

using Index = Eigen::Index;

constexpr char kModelMagic[] = "SDIRMDL1";
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); }

double gelu_grad(double x) {
  const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

Mat layer_norm(const Mat& x, const Vec& gain, const Vec& bias, double eps, LayerNormState* state) {
  const Index n = x.rows();
  Mat normalized(n, x.cols());
  Vec rstd(n);
  for (Index r = 0; r < n; ++r) {
    const double mean = x.row(r).mean();
    const auto centered = (x.row(r).array() - mean).matrix();
    const double var = centered.squaredNorm() / static_cast<double>(x.cols());
    rstd[r] = 1.0 / std::sqrt(var + eps);
    normalized.row(r) = centered * rstd[r];
  }
  Mat out = (normalized.array().rowwise() * gain.transpose().array()).matrix();
  out.rowwise() += bias.transpose();
  if (state != nullptr) {
    state->normalized = std::move(normalized);
    state->rstd = std::move(rstd);
  }
  return out;
}

Mat layer_norm_backward(const LayerNormState& st, const Mat& dy, const Vec& gain, Vec* d_gain,
                        Vec* d_bias) {
  if (d_gain != nullptr) {
    *d_gain += (dy.array() * st.normalized.array()).colwise().sum().transpose().matrix();
  }
  if (d_bias != nullptr) *d_bias += dy.colwise().sum().transpose();
  const Mat dxhat = (dy.array().rowwise() * gain.transpose().array()).matrix();
  const double inv_d = 1.0 / static_cast<double>(dy.cols());
  Mat dx(dy.rows(), dy.cols());
  for (Index r = 0; r < dy.rows(); ++r) {
    const double mean_d = dxhat.row(r).sum() * inv_d;
    const double mean_dx = dxhat.row(r).dot(st.normalized.row(r)) * inv_d;
    dx.row(r) = st.rstd[r] *
                (dxhat.row(r).array() - mean_d - st.normalized.row(r).array() * mean_dx).matrix();
  }
  return dx;
}

Mat linear(const Mat& x, const Mat& w, const Vec& b) {
  Mat y = x * w;
  y.rowwise() += b.transpose();
  return y;
}

Mat causal_attention(const Mat& qkv, std::size_t n_heads, std::size_t d_head,
                     std::vector<Mat>* probs) {
  const Index T = qkv.rows();
  const Index dh = static_cast<Index>(d_head);
  const Index d = static_cast<Index>(n_heads) * dh;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_head));
  Mat heads(T, d);
  if (probs != nullptr) probs->resize(n_heads);
  for (Index h = 0; h < static_cast<Index>(n_heads); ++h) {
    const auto q = qkv.middleCols(h * dh, dh);
    const auto k = qkv.middleCols(d + h * dh, dh);
    const auto v = qkv.middleCols(2 * d + h * dh, dh);
    Mat p = (q * k.transpose()) * scale;
    for (Index i = 0; i < T; ++i) {
      const double mx = p.row(i).head(i + 1).maxCoeff();
      double sum = 0.0;
      for (Index j = 0; j <= i; ++j) {
        p(i, j) = std::exp(p(i, j) - mx);
        sum += p(i, j);
      }
      p.row(i).head(i + 1) /= sum;
      p.row(i).tail(T - i - 1).setZero();
    }
    heads.middleCols(h * dh, dh).noalias() = p * v;
    if (probs != nullptr) (*probs)[static_cast<std::size_t>(h)] = std::move(p);
  }
  return heads;
}

Mat block_forward(const BlockWeights& w, const ModelConfig& c, const Mat& x, BlockActivations& a) {
  a.resid_in = x;
  a.ln1_out = layer_norm(x, w.ln1_gain, w.ln1_bias, c.layernorm_epsilon, &a.ln1);
  a.qkv = linear(a.ln1_out, w.w_qkv, w.b_qkv);
  a.heads = causal_attention(a.qkv, c.n_heads, c.d_head, &a.probs);
  a.resid_mid = x + linear(a.heads, w.w_attn_out, w.b_attn_out);
  a.ln2_out = layer_norm(a.resid_mid, w.ln2_gain, w.ln2_bias, c.layernorm_epsilon, &a.ln2);
  a.fc_pre = linear(a.ln2_out, w.w_fc, w.b_fc);
  a.fc_act = a.fc_pre.unaryExpr(&gelu);
  return a.resid_mid + linear(a.fc_act, w.w_proj, w.b_proj);
}

Mat block_backward(const BlockWeights& w, const ModelConfig& c, const BlockActivations& a,
                   const Mat& d_out, BlockWeights* g) {
  const Index T = d_out.rows();
  const Index dh = static_cast<Index>(c.d_head);
  const Index d = static_cast<Index>(c.d_model);
  const double scale = 1.0 / std::sqrt(static_cast<double>(c.d_head));

  if (g != nullptr) {
    g->w_proj.noalias() += a.fc_act.transpose() * d_out;
    g->b_proj += d_out.colwise().sum().transpose();
  }
  const Mat d_act = d_out * w.w_proj.transpose();
  const Mat d_pre = (d_act.array() * a.fc_pre.unaryExpr(&gelu_grad).array()).matrix();
  if (g != nullptr) {
    g->w_fc.noalias() += a.ln2_out.transpose() * d_pre;
    g->b_fc += d_pre.colwise().sum().transpose();
  }
  const Mat d_ln2 = d_pre * w.w_fc.transpose();
  Mat d_mid = d_out + layer_norm_backward(a.ln2, d_ln2, w.ln2_gain, g ? &g->ln2_gain : nullptr,
                                          g ? &g->ln2_bias : nullptr);

  if (g != nullptr) {
    g->w_attn_out.noalias() += a.heads.transpose() * d_mid;
    g->b_attn_out += d_mid.colwise().sum().transpose();
  }
  const Mat d_heads = d_mid * w.w_attn_out.transpose();
  Mat d_qkv(T, 3 * d);
  for (Index h = 0; h < static_cast<Index>(c.n_heads); ++h) {
    const auto q = a.qkv.middleCols(h * dh, dh);
    const auto k = a.qkv.middleCols(d + h * dh, dh);
    const auto v = a.qkv.middleCols(2 * d + h * dh, dh);
    const Mat& p = a.probs[static_cast<std::size_t>(h)];
    const auto d_o = d_heads.middleCols(h * dh, dh);
    const Mat d_p = d_o * v.transpose();
    const Vec row_dot = (p.array() * d_p.array()).rowwise().sum();
    const Mat d_s = (p.array() * (d_p.array().colwise() - row_dot.array())).matrix();
    d_qkv.middleCols(h * dh, dh).noalias() = (d_s * k) * scale;
    d_qkv.middleCols(d + h * dh, dh).noalias() = (d_s.transpose() * q) * scale;
    d_qkv.middleCols(2 * d + h * dh, dh).noalias() = p.transpose() * d_o;
  }
  if (g != nullptr) {
    g->w_qkv.noalias() += a.ln1_out.transpose() * d_qkv;
    g->b_qkv += d_qkv.colwise().sum().transpose();
  }
  const Mat d_ln1 = d_qkv * w.w_qkv.transpose();
  return d_mid + layer_norm_backward(a.ln1, d_ln1, w.ln1_gain, g ? &g->ln1_gain : nullptr,
                                     g ? &g->ln1_bias : nullptr);
}

Mat final_logits(const TransformerModel& model, const Mat& resid, LayerNormState* st, Mat* ln_out) {
  const auto& w = model.weights();
  Mat out = layer_norm(resid, w.lnf_gain, w.lnf_bias, model.config().layernorm_epsilon, st);
  Mat logits = linear(out, w.w_unembed, w.b_unembed);
  if (ln_out != nullptr) *ln_out = std::move(out);
  return logits;
}

void check_replacement(const TransformerModel& model, std::span<const double> replacement) {
  if (replacement.size() != model.config().d_model) {
    throw InputError("replacement has length " + std::to_string(replacement.size()) +
                     ", expected d_model=" + std::to_string(model.config().d_model));
  }
  if (!all_finite(replacement)) throw InputError("replacement activation is not finite");
}

// Recomputes the rows of `x` (resid_pre at cache.hook) from the hook upward.
// consecutive: row i is position `position + i` and attends to rows 0..i.
// otherwise:   every row is an alternative for `position` and attends only to itself.
template <class OnResid>
Mat resume_rows(const TransformerModel& model, const PrefixCache& cache, std::size_t position,
                Mat x, bool consecutive, OnResid&& on_resid) {
  const auto& c = model.config();
  const auto& W = model.weights();
  const Index m = x.rows();
  const Index t = static_cast<Index>(position);
  const Index dh = static_cast<Index>(c.d_head);
  const Index d = static_cast<Index>(c.d_model);
  const double scale = 1.0 / std::sqrt(static_cast<double>(c.d_head));

  for (std::size_t l = cache.hook.layer; l < c.n_layers; ++l) {
    on_resid(l, x);
    const auto& w = W.blocks[l];
    const Mat& keys = cache.keys[l - cache.hook.layer];
    const Mat& values = cache.values[l - cache.hook.layer];
    const Mat ln1 = layer_norm(x, w.ln1_gain, w.ln1_bias, c.layernorm_epsilon, nullptr);
    const Mat qkv = linear(ln1, w.w_qkv, w.b_qkv);
    Mat heads(m, d);
    for (Index h = 0; h < static_cast<Index>(c.n_heads); ++h) {
      const auto q = qkv.middleCols(h * dh, dh);
      const auto k_new = qkv.middleCols(d + h * dh, dh);
      const auto v_new = qkv.middleCols(2 * d + h * dh, dh);
      const auto k_old = keys.block(0, h * dh, t, dh);
      const auto v_old = values.block(0, h * dh, t, dh);
      Mat p_old = (q * k_old.transpose()) * scale;
      Mat p_new = Mat::Zero(m, m);
      for (Index i = 0; i < m; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        if (t > 0) mx = p_old.row(i).maxCoeff();
        const Index j_begin = consecutive ? 0 : i;
        for (Index j = j_begin; j <= i; ++j) {
          p_new(i, j) = q.row(i).dot(k_new.row(j)) * scale;
          mx = std::max(mx, p_new(i, j));
        }
        double sum = 0.0;
        for (Index j = 0; j < t; ++j) {
          p_old(i, j) = std::exp(p_old(i, j) - mx);
          sum += p_old(i, j);
        }
        for (Index j = j_begin; j <= i; ++j) {
          p_new(i, j) = std::exp(p_new(i, j) - mx);
          sum += p_new(i, j);
        }
        p_old.row(i) /= sum;
        p_new.row(i) /= sum;
      }
      heads.middleCols(h * dh, dh).noalias() = p_old * v_old + p_new * v_new;
    }
    x += linear(heads, w.w_attn_out, w.b_attn_out);
    const Mat ln2 = layer_norm(x, w.ln2_gain, w.ln2_bias, c.layernorm_epsilon, nullptr);
    const Mat act = linear(ln2, w.w_fc, w.b_fc).unaryExpr(&gelu);
    x += linear(act, w.w_proj, w.b_proj);
  }
  on_resid(c.n_layers, x);
  return final_logits(model, x, nullptr, nullptr);
}

}  // namespace

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v < 1) throw InputError(std::string("model.") + name + " must be >= 1");
  };
  positive(n_layers, "n_layers");
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(d_head, "d_head");
  positive(d_ff, "d_ff");
  positive(vocab_size, "vocab_size");
  if (max_seq_len < 2) throw InputError("model.max_seq_len must be >= 2");
  if (n_heads * d_head != d_model) {
    throw InputError("model.n_heads * model.d_head must equal model.d_model");
  }
  if (!(layernorm_epsilon > 0.0) || !std::isfinite(layernorm_epsilon)) {
    throw InputError("model.layernorm_epsilon must be a positive finite number");
  }
}

std::string HookPoint::name() const { return "blocks." + std::to_string(layer) + ".resid_pre"; }

ModelWeights ModelWeights::zeros(const ModelConfig& c) {
  const auto d = static_cast<Index>(c.d_model);
  const auto ff = static_cast<Index>(c.d_ff);
  const auto V = static_cast<Index>(c.vocab_size);
  ModelWeights w;
  w.token_embedding = Mat::Zero(V, d);
  w.position_embedding = Mat::Zero(static_cast<Index>(c.max_seq_len), d);
  w.blocks.resize(c.n_layers);
  for (auto& b : w.blocks) {
    b.ln1_gain = Vec::Zero(d);
    b.ln1_bias = Vec::Zero(d);
    b.w_qkv = Mat::Zero(d, 3 * d);
    b.b_qkv = Vec::Zero(3 * d);
    b.w_attn_out = Mat::Zero(d, d);
    b.b_attn_out = Vec::Zero(d);
    b.ln2_gain = Vec::Zero(d);
    b.ln2_bias = Vec::Zero(d);
    b.w_fc = Mat::Zero(d, ff);
    b.b_fc = Vec::Zero(ff);
    b.w_proj = Mat::Zero(ff, d);
    b.b_proj = Vec::Zero(d);
  }
  w.lnf_gain = Vec::Zero(d);
  w.lnf_bias = Vec::Zero(d);
  w.w_unembed = Mat::Zero(d, V);
  w.b_unembed = Vec::Zero(V);
  return w;
}

std::size_t ModelWeights::parameter_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const auto& t) { n += static_cast<std::size_t>(t.size()); });
  return n;
}

void ModelWeights::set_zero() {
  for_each([](const std::string&, auto& t) { t.setZero(); });
}

void ModelWeights::add(const ModelWeights& other) {
  std::vector<std::span<const double>> src;
  other.for_each([&](const std::string&, const auto& t) {
    src.emplace_back(t.data(), static_cast<std::size_t>(t.size()));
  });
  std::size_t i = 0;
  for_each([&](const std::string&, auto& t) {
    const auto& s = src[i++];
    for (Index k = 0; k < t.size(); ++k) t.data()[k] += s[static_cast<std::size_t>(k)];
  });
}

TransformerModel::TransformerModel(ModelConfig config, Tokenizer tokenizer)
    : config_(config), tokenizer_(std::move(tokenizer)) {
  config_.validate();
  if (tokenizer_.vocab_size() > config_.vocab_size) {
    throw InputError("tokenizer alphabet is larger than model.vocab_size");
  }
  weights_ = ModelWeights::zeros(config_);
}

TransformerModel TransformerModel::initialized(ModelConfig config, Tokenizer tokenizer,
                                               std::uint64_t seed, double init_std) {
  TransformerModel model(config, std::move(tokenizer));
  Rng rng(derive_seed(seed, "model.init"));
  const double proj_std = init_std / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  auto fill = [&](auto& t, double std) {
    for (Index i = 0; i < t.size(); ++i) t.data()[i] = std * rng.normal();
  };
  auto& w = model.weights_;
  fill(w.token_embedding, init_std);
  fill(w.position_embedding, init_std * 0.5);
  for (auto& b : w.blocks) {
    b.ln1_gain.setOnes();
    b.ln2_gain.setOnes();
    fill(b.w_qkv, init_std);
    fill(b.w_attn_out, proj_std);
    fill(b.w_fc, init_std);
    fill(b.w_proj, proj_std);
  }
  w.lnf_gain.setOnes();
  fill(w.w_unembed, init_std);
  model.round_to_f32();
  return model;
}

std::uint64_t TransformerModel::fingerprint() const {
  if (fingerprint_) return *fingerprint_;
  const std::uint32_t dims[] = {
      static_cast<std::uint32_t>(config_.n_layers),   static_cast<std::uint32_t>(config_.d_model),
      static_cast<std::uint32_t>(config_.n_heads),    static_cast<std::uint32_t>(config_.d_head),
      static_cast<std::uint32_t>(config_.d_ff),       static_cast<std::uint32_t>(config_.vocab_size),
      static_cast<std::uint32_t>(config_.max_seq_len)};
  std::uint64_t h = fnv1a(dims, sizeof dims);
  h = fnv1a(&config_.layernorm_epsilon, sizeof(double), h);
  h = fnv1a(tokenizer_.alphabet().data(), tokenizer_.alphabet().size(), h);
  weights_.for_each([&](const std::string& name, const auto& t) {
    h = fnv1a(name, h);
    for (Index i = 0; i < t.size(); ++i) {
      const float f = static_cast<float>(t.data()[i]);
      h = fnv1a(&f, sizeof f, h);
    }
  });
  fingerprint_ = h;
  return h;
}

void TransformerModel::round_to_f32() {
  fingerprint_.reset();
  weights_.for_each([](const std::string&, auto& t) {
    for (Index i = 0; i < t.size(); ++i) {
      t.data()[i] = static_cast<double>(static_cast<float>(t.data()[i]));
    }
  });
}

void TransformerModel::save(const std::filesystem::path& path) const {
  io::BinaryWriter out(path);
  out.bytes(kModelMagic, 8);
  for (std::size_t v : {config_.n_layers, config_.d_model, config_.n_heads, config_.d_head,
                        config_.d_ff, config_.vocab_size, config_.max_seq_len}) {
    out.u32(static_cast<std::uint32_t>(v));
  }
  out.f64(config_.layernorm_epsilon);
  const auto& alphabet = tokenizer_.alphabet();
  out.u32(static_cast<std::uint32_t>(alphabet.size()));
  out.bytes(alphabet.data(), alphabet.size());
  std::uint32_t count = 0;
  weights_.for_each([&](const std::string&, const auto&) { ++count; });
  out.u32(count);
  weights_.for_each([&](const std::string& name, const auto& t) {
    using T = std::decay_t<decltype(t)>;
    const std::uint64_t shape[] = {static_cast<std::uint64_t>(t.rows()),
                                   static_cast<std::uint64_t>(t.cols())};
    const std::size_t rank = T::IsVectorAtCompileTime ? 1 : 2;
    io::write_tensor(out, name, std::span<const std::uint64_t>(shape, rank),
                     std::span<const double>(t.data(), static_cast<std::size_t>(t.size())));
  });
  out.close();
}

TransformerModel TransformerModel::load(const std::filesystem::path& path) {
  io::BinaryReader r(path);
  r.expect_magic(kModelMagic);
  ModelConfig c;
  c.n_layers = r.u32();
  c.d_model = r.u32();
  c.n_heads = r.u32();
  c.d_head = r.u32();
  c.d_ff = r.u32();
  c.vocab_size = r.u32();
  c.max_seq_len = r.u32();
  c.layernorm_epsilon = r.f64();
  const std::uint32_t n_alpha = r.u32();
  if (n_alpha > 256) throw InputError(path.string() + ": corrupt tokenizer block");
  std::vector<std::uint8_t> alphabet(n_alpha);
  r.bytes(alphabet.data(), n_alpha);
  TransformerModel model(c, Tokenizer::from_alphabet(std::move(alphabet)));
  const std::uint32_t count = r.u32();
  std::map<std::string, io::NamedTensor> tensors;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto t = io::read_tensor(r);
    tensors.emplace(t.name, std::move(t));
  }
  model.weights_.for_each([&](const std::string& name, auto& t) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw InputError(path.string() + ": missing tensor " + name);
    if (it->second.data.size() != static_cast<std::size_t>(t.size()) ||
        it->second.rows() != static_cast<std::size_t>(t.rows())) {
      throw InputError(path.string() + ": shape mismatch for " + name);
    }
    for (Index i = 0; i < t.size(); ++i) t.data()[i] = it->second.data[static_cast<std::size_t>(i)];
  });
  if (tensors.size() != count) throw InputError(path.string() + ": duplicate tensor names");
  return model;
}

const Mat& ForwardTrace::at(HookPoint hook) const {
  auto it = captured.find(hook.layer);
  if (it == captured.end()) throw InputError("hook not captured: " + hook.name());
  return it->second;
}

void validate_tokens(const TransformerModel& model, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw InputError("empty token sequence");
  if (tokens.size() > model.config().max_seq_len) {
    throw InputError("sequence of length " + std::to_string(tokens.size()) +
                     " exceeds max_seq_len=" + std::to_string(model.config().max_seq_len));
  }
  for (TokenId t : tokens) {
    if (t >= model.config().vocab_size) throw InputError("token id out of range");
  }
}

Mat embed(const TransformerModel& model, std::span<const TokenId> tokens) {
  const auto& w = model.weights();
  Mat x(static_cast<Index>(tokens.size()), static_cast<Index>(model.config().d_model));
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    x.row(static_cast<Index>(t)) = w.token_embedding.row(static_cast<Index>(tokens[t])) +
                                   w.position_embedding.row(static_cast<Index>(t));
  }
  return x;
}

Mat forward_from(const TransformerModel& model, std::size_t start_layer, Mat resid,
                 Activations* acts) {
  const auto& c = model.config();
  if (start_layer > c.n_layers) throw InputError("start layer beyond final residual");
  if (resid.cols() != static_cast<Index>(c.d_model)) throw InputError("residual width mismatch");
  BlockActivations scratch;
  if (acts != nullptr) {
    acts->start_layer = start_layer;
    acts->blocks.resize(c.n_layers - start_layer);
  }
  for (std::size_t l = start_layer; l < c.n_layers; ++l) {
    BlockActivations& a = acts != nullptr ? acts->blocks[l - start_layer] : scratch;
    resid = block_forward(model.weights().blocks[l], c, resid, a);
  }
  if (acts != nullptr) {
    Mat logits = final_logits(model, resid, &acts->lnf, &acts->lnf_out);
    acts->resid_final = std::move(resid);
    return logits;
  }
  return final_logits(model, resid, nullptr, nullptr);
}

const Mat& Activations::resid_at(std::size_t layer) const {
  if (layer < start_layer || layer > start_layer + blocks.size()) {
    throw InputError("layer not recorded in activations");
  }
  if (layer == start_layer + blocks.size()) return resid_final;
  return blocks[layer - start_layer].resid_in;
}

void backward_from(const TransformerModel& model, const Activations& acts, const Mat& d_logits,
                   std::span<const ResidInjection> injections, ModelWeights* grads, Mat* d_resid) {
  const auto& c = model.config();
  const auto& W = model.weights();
  const std::size_t L = c.n_layers;
  for (const auto& inj : injections) {
    if (inj.layer <= acts.start_layer || inj.layer > L) {
      throw InputError("gradient injection must target a layer after the start layer");
    }
  }
  auto inject = [&](std::size_t layer, Mat& d) {
    for (const auto& inj : injections) {
      if (inj.layer == layer) d += inj.grad;
    }
  };

  if (grads != nullptr) {
    grads->w_unembed.noalias() += acts.lnf_out.transpose() * d_logits;
    grads->b_unembed += d_logits.colwise().sum().transpose();
  }
  const Mat d_lnf = d_logits * W.w_unembed.transpose();
  Mat d = layer_norm_backward(acts.lnf, d_lnf, W.lnf_gain, grads ? &grads->lnf_gain : nullptr,
                              grads ? &grads->lnf_bias : nullptr);
  inject(L, d);
  for (std::size_t l = L; l-- > acts.start_layer;) {
    d = block_backward(W.blocks[l], c, acts.blocks[l - acts.start_layer], d,
                       grads ? &grads->blocks[l] : nullptr);
    if (l > acts.start_layer) inject(l, d);
  }
  if (d_resid != nullptr) *d_resid = std::move(d);
}

void accumulate_embedding_grad(std::span<const TokenId> tokens, const Mat& d_resid0,
                               ModelWeights& grads) {
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto r = static_cast<Index>(t);
    grads.token_embedding.row(static_cast<Index>(tokens[t])) += d_resid0.row(r);
    grads.position_embedding.row(r) += d_resid0.row(r);
  }
}

Mat log_softmax_rows(const Mat& logits) {
  Mat out(logits.rows(), logits.cols());
  for (Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    const double lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
    out.row(r) = logits.row(r).array() - lse;
  }
  return out;
}

ForwardTrace forward_full(const TransformerModel& model, std::span<const TokenId> tokens,
                          std::span<const HookPoint> capture, std::span<const ResidPatch> patches) {
  validate_tokens(model, tokens);
  const auto& c = model.config();
  for (const auto& h : capture) {
    if (h.layer > c.n_layers) throw InputError("hook layer out of range: " + h.name());
  }
  for (const auto& p : patches) {
    if (p.hook.layer > c.n_layers) throw InputError("patch hook out of range");
    if (p.position >= tokens.size()) throw InputError("patch position out of range");
    check_replacement(model, std::span<const double>(p.replacement.data(),
                                                     static_cast<std::size_t>(p.replacement.size())));
  }
  auto apply = [&](std::size_t layer, Mat& x, ForwardTrace& trace) {
    for (const auto& p : patches) {
      if (p.hook.layer == layer) x.row(static_cast<Index>(p.position)) = p.replacement.transpose();
    }
    for (const auto& h : capture) {
      if (h.layer == layer) trace.captured[layer] = x;
    }
  };

  ForwardTrace trace;
  Mat x = embed(model, tokens);
  BlockActivations scratch;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    apply(l, x, trace);
    x = block_forward(model.weights().blocks[l], c, x, scratch);
  }
  apply(c.n_layers, x, trace);
  trace.logits = final_logits(model, x, nullptr, nullptr);
  return trace;
}

PrefixCache PrefixCache::build(const TransformerModel& model, std::span<const TokenId> tokens,
                               HookPoint hook) {
  validate_tokens(model, tokens);
  const auto& c = model.config();
  if (hook.layer > c.n_layers) throw InputError("hook layer out of range: " + hook.name());
  const Index d = static_cast<Index>(c.d_model);

  PrefixCache cache;
  cache.hook = hook;
  cache.model_fingerprint = model.fingerprint();
  cache.tokens.assign(tokens.begin(), tokens.end());

  Mat x = embed(model, tokens);
  BlockActivations a;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    Mat next = block_forward(model.weights().blocks[l], c, x, a);
    if (l >= hook.layer) {
      cache.resid.push_back(std::move(x));
      cache.keys.emplace_back(a.qkv.middleCols(d, d));
      cache.values.emplace_back(a.qkv.middleCols(2 * d, d));
    }
    x = std::move(next);
  }
  cache.logits = final_logits(model, x, nullptr, nullptr);
  cache.resid.push_back(std::move(x));
  return cache;
}

const Mat& PrefixCache::resid_at(std::size_t layer) const {
  if (layer < hook.layer || layer - hook.layer >= resid.size()) {
    throw InputError("layer " + std::to_string(layer) + " is not cached");
  }
  return resid[layer - hook.layer];
}

ForwardTrace forward_resume_with_patch(const TransformerModel& model,
                                       std::span<const TokenId> tokens, HookPoint hook,
                                       std::size_t position, std::span<const double> replacement,
                                       const PrefixCache* cache) {
  validate_tokens(model, tokens);
  if (position >= tokens.size()) {
    throw InputError("patch position " + std::to_string(position) + " out of range");
  }
  check_replacement(model, replacement);
  std::optional<PrefixCache> owned;
  if (cache == nullptr) {
    owned = PrefixCache::build(model, tokens, hook);
    cache = &*owned;
  }
  if (cache->model_fingerprint != model.fingerprint()) {
    throw InputError("prefix cache was built for a different model");
  }
  if (cache->hook != hook) throw InputError("prefix cache was built for a different hook");
  if (!std::equal(tokens.begin(), tokens.end(), cache->tokens.begin(), cache->tokens.end())) {
    throw InputError("prefix cache was built for a different token sequence");
  }

  const Index T = static_cast<Index>(tokens.size());
  const Index t = static_cast<Index>(position);
  Mat rows = cache->resid_at(hook.layer).bottomRows(T - t);
  rows.row(0) = as_vec(replacement).transpose();

  ForwardTrace trace;
  trace.first_position = position;
  trace.logits = resume_rows(model, *cache, position, std::move(rows), true,
                             [&](std::size_t layer, const Mat& x) { trace.captured[layer] = x; });
  return trace;
}

AlternativesResult resume_alternatives(const TransformerModel& model, const PrefixCache& cache,
                                       std::size_t position, const Mat& replacements,
                                       std::optional<std::size_t> downstream_layer) {
  if (cache.model_fingerprint != model.fingerprint()) {
    throw InputError("prefix cache was built for a different model");
  }
  if (position >= cache.length()) throw InputError("patch position out of range");
  if (replacements.cols() != static_cast<Index>(model.config().d_model)) {
    throw InputError("replacement width mismatch");
  }
  if (!all_finite(std::span<const double>(replacements.data(),
                                          static_cast<std::size_t>(replacements.size())))) {
    throw InputError("replacement activation is not finite");
  }
  if (downstream_layer &&
      (*downstream_layer < cache.hook.layer || *downstream_layer > model.config().n_layers)) {
    throw InputError("downstream layer must lie between the hook and the final residual");
  }
  AlternativesResult out;
  out.logits = resume_rows(model, cache, position, replacements, false,
                           [&](std::size_t layer, const Mat& x) {
                             if (downstream_layer && layer == *downstream_layer) out.downstream = x;
                           });
  return out;
}

}  // namespace sdir

namespace sdir {

Mat residual_at(const TransformerModel& model, std::span<const TokenId> tokens, std::size_t layer) {
  validate_tokens(model, tokens);
  const auto& c = model.config();
  if (layer > c.n_layers) throw InputError("layer out of range");
  Mat x = embed(model, tokens);
  BlockActivations scratch;
  for (std::size_t l = 0; l < layer; ++l) x = block_forward(model.weights().blocks[l], c, x, scratch);
  return x;
}

}  // namespace sdir
