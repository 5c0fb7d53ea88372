#pragma once

// Scalar-loop re-implementation of the decoder used only as a test oracle.
// It shares parameter storage with the library model but none of its code.

#include <cmath>
#include <optional>
#include <vector>

#include "sdir/model.hpp"

namespace oracle {

using Vector = std::vector<double>;
using Rows = std::vector<Vector>;

struct Edit {
  std::size_t layer;
  std::size_t position;
  Vector value;
};

inline Vector layer_norm(const Vector& x, const sdir::Vec& g, const sdir::Vec& b, double eps) {
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  Vector out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = (x[i] - mean) / std::sqrt(var + eps) * g[static_cast<long>(i)] + b[static_cast<long>(i)];
  }
  return out;
}

// y = x W + b with W stored (in x out).
inline Vector affine(const Vector& x, const sdir::Mat& w, const sdir::Vec& b) {
  Vector y(static_cast<std::size_t>(w.cols()));
  for (long j = 0; j < w.cols(); ++j) {
    double s = b[j];
    for (long i = 0; i < w.rows(); ++i) s += x[static_cast<std::size_t>(i)] * w(i, j);
    y[static_cast<std::size_t>(j)] = s;
  }
  return y;
}

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
}

// Logits for every position; resid_out (if given) receives resid_pre at every layer.
inline Rows forward(const sdir::TransformerModel& model, const std::vector<sdir::TokenId>& tokens,
                    std::optional<Edit> edit = std::nullopt, std::vector<Rows>* resid_out = nullptr) {
  const auto& c = model.config();
  const auto& w = model.weights();
  const std::size_t T = tokens.size(), d = c.d_model, dh = c.d_head;
  Rows x(T, Vector(d));
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < d; ++i) {
      x[t][i] = w.token_embedding(tokens[t], static_cast<long>(i)) +
                w.position_embedding(static_cast<long>(t), static_cast<long>(i));
    }
  }
  auto apply_edit = [&](std::size_t layer) {
    if (edit && edit->layer == layer) x[edit->position] = edit->value;
    if (resid_out) resid_out->push_back(x);
  };
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    apply_edit(l);
    const auto& b = w.blocks[l];
    Rows qkv(T);
    for (std::size_t t = 0; t < T; ++t) {
      qkv[t] = affine(layer_norm(x[t], b.ln1_gain, b.ln1_bias, c.layernorm_epsilon), b.w_qkv, b.b_qkv);
    }
    Rows mid = x;
    for (std::size_t t = 0; t < T; ++t) {
      Vector heads(d, 0.0);
      for (std::size_t h = 0; h < c.n_heads; ++h) {
        std::vector<double> score(t + 1);
        double mx = -1e300;
        for (std::size_t s = 0; s <= t; ++s) {
          double dot = 0.0;
          for (std::size_t k = 0; k < dh; ++k) dot += qkv[t][h * dh + k] * qkv[s][d + h * dh + k];
          score[s] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, score[s]);
        }
        double z = 0.0;
        for (auto& v : score) z += (v = std::exp(v - mx));
        for (std::size_t s = 0; s <= t; ++s) {
          for (std::size_t k = 0; k < dh; ++k) heads[h * dh + k] += score[s] / z * qkv[s][2 * d + h * dh + k];
        }
      }
      const Vector o = affine(heads, b.w_attn_out, b.b_attn_out);
      for (std::size_t i = 0; i < d; ++i) mid[t][i] += o[i];
    }
    for (std::size_t t = 0; t < T; ++t) {
      Vector hidden = affine(layer_norm(mid[t], b.ln2_gain, b.ln2_bias, c.layernorm_epsilon), b.w_fc, b.b_fc);
      for (auto& v : hidden) v = gelu(v);
      const Vector o = affine(hidden, b.w_proj, b.b_proj);
      for (std::size_t i = 0; i < d; ++i) x[t][i] = mid[t][i] + o[i];
    }
  }
  apply_edit(c.n_layers);
  Rows logits(T);
  for (std::size_t t = 0; t < T; ++t) {
    logits[t] = affine(layer_norm(x[t], w.lnf_gain, w.lnf_bias, c.layernorm_epsilon), w.w_unembed, w.b_unembed);
  }
  return logits;
}

}  // namespace oracle
