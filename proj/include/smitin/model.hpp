#pragma once

// Toy causal decoder-only transformer.
//
// Pre-norm residual blocks: x += Attn(LN1(x)); x += FFN(LN2(x)); logits from
// LNf(x). Every attention head output z_{l,h}(t) is tapped before the output
// projection, and a hook may add a per-head offset there:
//
//   y_l(t) = sum_h W^O_{l,h} (z_{l,h}(t) + delta_{l,h}(t))
//
// All weights live in one flat parameter vector. The order of tensors in that
// vector is the checkpoint order (see ParamLayout).

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "smitin/mathkernel.hpp"

namespace smitin {

using Token = std::uint32_t;

struct ModelConfig {
  std::size_t num_layers = 4;
  std::size_t num_heads = 4;
  std::size_t head_dim = 16;
  std::size_t vocab_size = 64;
  std::size_t max_context = 256;

  std::size_t model_dim() const { return head_dim * num_heads; }
  std::size_t ffn_dim() const { return 4 * model_dim(); }
  std::size_t num_cells() const { return num_layers * num_heads; }

  void validate() const {
    if (num_layers < 1 || num_heads < 1 || head_dim < 1 || vocab_size < 1 || max_context < 1)
      throw Error("invalid_config", "model config dimensions must all be >= 1");
  }
  bool operator==(const ModelConfig&) const = default;
};

/// Offsets of each tensor inside the flat parameter vector. Matrices are
/// stored row-major as (in x out), so a projection is y = x * W.
///
/// Fixed order (also the checkpoint order):
///   tok_emb [V x M], pos_emb [T_max x M],
///   per layer: ln1_g [M], ln1_b [M], wq [M x M], wk [M x M], wv [M x M],
///              wo [M x M], ln2_g [M], ln2_b [M], w1 [M x F], b1 [F],
///              w2 [F x M], b2 [M]
///   lnf_g [M], lnf_b [M], w_out [M x V]
/// Head h of wq/wk/wv owns output columns [h*D, (h+1)*D); head h of wo owns
/// input rows [h*D, (h+1)*D).
struct ParamLayout {
  struct Layer {
    std::size_t ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
  };
  std::size_t tok_emb = 0, pos_emb = 0, lnf_g = 0, lnf_b = 0, w_out = 0, total = 0;
  std::vector<Layer> layers;

  explicit ParamLayout(const ModelConfig& c) {
    const std::size_t M = c.model_dim(), F = c.ffn_dim();
    std::size_t off = 0;
    auto take = [&off](std::size_t n) {
      const std::size_t o = off;
      off += n;
      return o;
    };
    tok_emb = take(c.vocab_size * M);
    pos_emb = take(c.max_context * M);
    for (std::size_t l = 0; l < c.num_layers; ++l) {
      Layer L{};
      L.ln1_g = take(M);
      L.ln1_b = take(M);
      L.wq = take(M * M);
      L.wk = take(M * M);
      L.wv = take(M * M);
      L.wo = take(M * M);
      L.ln2_g = take(M);
      L.ln2_b = take(M);
      L.w1 = take(M * F);
      L.b1 = take(F);
      L.w2 = take(F * M);
      L.b2 = take(M);
      layers.push_back(L);
    }
    lnf_g = take(M);
    lnf_b = take(M);
    w_out = take(M * c.vocab_size);
    total = off;
  }
};

struct TransformerModel {
  ModelConfig config;
  ParamLayout layout;
  std::vector<double> params;

  explicit TransformerModel(const ModelConfig& c)
      : config((c.validate(), c)), layout(c), params(layout.total, 0.0) {}

  const double* p(std::size_t offset) const { return params.data() + offset; }
  double* p(std::size_t offset) { return params.data() + offset; }

  /// Standard small-model initialisation: N(0, 0.02) embeddings, fan-in
  /// scaled projections, residual outputs shrunk by 1/sqrt(2L), unit gains.
  static TransformerModel random_init(const ModelConfig& c, std::uint64_t seed) {
    TransformerModel m(c);
    Rng rng(seed);
    const std::size_t M = c.model_dim(), F = c.ffn_dim();
    auto fill = [&](std::size_t off, std::size_t n, double sd) {
      for (std::size_t i = 0; i < n; ++i) m.params[off + i] = sd * rng.normal();
    };
    auto ones = [&](std::size_t off, std::size_t n) {
      for (std::size_t i = 0; i < n; ++i) m.params[off + i] = 1.0;
    };
    const double res_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(c.num_layers));
    fill(m.layout.tok_emb, c.vocab_size * M, 0.02);
    fill(m.layout.pos_emb, c.max_context * M, 0.01);
    for (const auto& L : m.layout.layers) {
      ones(L.ln1_g, M);
      fill(L.wq, M * M, 1.0 / std::sqrt(double(M)));
      fill(L.wk, M * M, 1.0 / std::sqrt(double(M)));
      fill(L.wv, M * M, 1.0 / std::sqrt(double(M)));
      fill(L.wo, M * M, res_scale / std::sqrt(double(M)));
      ones(L.ln2_g, M);
      fill(L.w1, M * F, 1.0 / std::sqrt(double(M)));
      fill(L.w2, F * M, res_scale / std::sqrt(double(F)));
    }
    ones(m.layout.lnf_g, M);
    fill(m.layout.w_out, M * c.vocab_size, 1.0 / std::sqrt(double(M)));
    return m;
  }
};

/// Keys and values for steps 1..t of one generation, per layer, heads
/// interleaved along the model dimension.
class KvCache {
 public:
  explicit KvCache(const ModelConfig& c)
      : model_dim_(c.model_dim()), keys_(c.num_layers), values_(c.num_layers) {}

  std::size_t length() const { return length_; }
  const std::vector<double>& keys(std::size_t l) const { return keys_[l]; }
  const std::vector<double>& values(std::size_t l) const { return values_[l]; }

  void append(std::size_t l, std::span<const double> k, std::span<const double> v) {
    keys_[l].insert(keys_[l].end(), k.begin(), k.end());
    values_[l].insert(values_[l].end(), v.begin(), v.end());
  }
  void advance() { ++length_; }

 private:
  std::size_t model_dim_;
  std::size_t length_ = 0;
  std::vector<std::vector<double>> keys_, values_;
};

/// Pre-intervention head outputs at one step: L*H vectors of dim D,
/// flattened as z[(l*H + h)*D + d].
struct ActivationRecord {
  std::size_t step = 0;
  std::size_t num_layers = 0, num_heads = 0, head_dim = 0;
  std::vector<double> z;

  std::span<const double> head(std::size_t l, std::size_t h) const {
    return {z.data() + (l * num_heads + h) * head_dim, head_dim};
  }
};

/// Fills `delta` (H*D, zero-initialised) for layer `layer`.
using HeadHook = std::function<void(std::size_t layer, std::span<double> delta)>;

inline HeadHook compose_hooks(HeadHook a, HeadHook b) {
  return [a = std::move(a), b = std::move(b)](std::size_t layer, std::span<double> delta) {
    std::vector<double> tmp(delta.size(), 0.0);
    if (a) a(layer, delta);
    if (b) b(layer, tmp);
    for (std::size_t i = 0; i < delta.size(); ++i) delta[i] += tmp[i];
  };
}

namespace detail {

constexpr double kLnEps = 1e-5;

inline void layer_norm(const double* x, const double* g, const double* b, double* out,
                       std::size_t n, double* mean_out = nullptr, double* rstd_out = nullptr) {
  double mu = 0.0;
  for (std::size_t i = 0; i < n; ++i) mu += x[i];
  mu /= double(n);
  double var = 0.0;
  for (std::size_t i = 0; i < n; ++i) var += (x[i] - mu) * (x[i] - mu);
  var /= double(n);
  const double rstd = 1.0 / std::sqrt(var + kLnEps);
  for (std::size_t i = 0; i < n; ++i) out[i] = (x[i] - mu) * rstd * g[i] + b[i];
  if (mean_out) *mean_out = mu;
  if (rstd_out) *rstd_out = rstd;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440)); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * 0.70710678118654752440));
  const double pdf = 0.39894228040143267794 * std::exp(-0.5 * x * x);
  return cdf + x * pdf;
}

}  // namespace detail

/// Single head of causal scaled dot-product attention over already
/// normalised layer inputs x(1..t) (each of dim D*H):
/// z = Att(W^Q x(t), W^K x(1:t), W^V x(1:t)).
inline Vector attention_head(std::span<const Vector> x_hist, std::size_t l, std::size_t h,
                             const TransformerModel& model) {
  const auto& c = model.config;
  const std::size_t M = c.model_dim(), D = c.head_dim;
  if (x_hist.empty()) throw Error("empty_input", "attention_head: empty history");
  if (l >= c.num_layers || h >= c.num_heads) throw Error("out_of_range", "attention_head: bad (l,h)");
  for (const auto& x : x_hist)
    if (x.size() != M) throw Error("dimension_mismatch", "attention_head: input dim != D*H");
  const auto& L = model.layout.layers[l];
  auto project = [&](const Vector& x, std::size_t off) {
    Vector out(D, 0.0);
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t d = 0; d < D; ++d) out[d] += x[i] * model.params[off + i * M + h * D + d];
    return out;
  };
  const Vector q = project(x_hist.back(), L.wq);
  const double scale = 1.0 / std::sqrt(double(D));
  Vector scores(x_hist.size());
  std::vector<Vector> vals;
  for (std::size_t j = 0; j < x_hist.size(); ++j) {
    scores[j] = dot(q, project(x_hist[j], L.wk)) * scale;
    vals.push_back(project(x_hist[j], L.wv));
  }
  softmax_inplace(scores);
  Vector z(D, 0.0);
  for (std::size_t j = 0; j < vals.size(); ++j)
    for (std::size_t d = 0; d < D; ++d) z[d] += scores[j] * vals[j][d];
  return z;
}

/// y = sum_h W^O_{l,h} (z_h + delta_h): the attention-block output of layer
/// `l` before the residual connection. `z` and `delta` are H*D long.
inline Vector project_heads(const TransformerModel& model, std::size_t l, std::span<const double> z,
                            std::span<const double> delta = {}) {
  const std::size_t M = model.config.model_dim();
  if (z.size() != M || (!delta.empty() && delta.size() != M))
    throw Error("dimension_mismatch", "project_heads: z/delta length != D*H");
  Vector zin(z.begin(), z.end());
  if (!delta.empty())
    for (std::size_t i = 0; i < M; ++i) zin[i] += delta[i];
  Vector y(M, 0.0);
  kernel::gemv_acc(zin.data(), model.p(model.layout.layers[l].wo), y.data(), M, M);
  return y;
}

struct StepOutput {
  Vector logits;
  ActivationRecord activations;
  Vector hidden;  // final-layer-norm output (pre-logits)
};

/// Runs one layer for the newest position. `x` is updated in place (residual
/// stream). Keys/values for this position are written to `k_out`/`v_out` and
/// the pre-intervention head outputs to `z_out`.
inline void layer_forward(const TransformerModel& model, const KvCache& cache, std::size_t l,
                          std::span<double> x, const HeadHook* hook, std::span<double> z_out,
                          std::span<double> k_out, std::span<double> v_out) {
  const auto& c = model.config;
  const std::size_t M = c.model_dim(), D = c.head_dim, H = c.num_heads, F = c.ffn_dim();
  const auto& L = model.layout.layers[l];
  const std::size_t t = cache.length();

  Vector h(M);
  detail::layer_norm(x.data(), model.p(L.ln1_g), model.p(L.ln1_b), h.data(), M);
  Vector q(M, 0.0);
  std::fill(k_out.begin(), k_out.end(), 0.0);
  std::fill(v_out.begin(), v_out.end(), 0.0);
  kernel::gemv_acc(h.data(), model.p(L.wq), q.data(), M, M);
  kernel::gemv_acc(h.data(), model.p(L.wk), k_out.data(), M, M);
  kernel::gemv_acc(h.data(), model.p(L.wv), v_out.data(), M, M);

  const double scale = 1.0 / std::sqrt(double(D));
  const auto& K = cache.keys(l);
  const auto& V = cache.values(l);
  Vector scores(t + 1);
  for (std::size_t hd = 0; hd < H; ++hd) {
    const std::size_t o = hd * D;
    for (std::size_t j = 0; j <= t; ++j) {
      const double* kj = j < t ? K.data() + j * M + o : k_out.data() + o;
      double s = 0.0;
      for (std::size_t d = 0; d < D; ++d) s += q[o + d] * kj[d];
      scores[j] = s * scale;
    }
    softmax_inplace(scores);
    double* z = z_out.data() + o;
    std::fill(z, z + D, 0.0);
    for (std::size_t j = 0; j <= t; ++j) {
      const double* vj = j < t ? V.data() + j * M + o : v_out.data() + o;
      for (std::size_t d = 0; d < D; ++d) z[d] += scores[j] * vj[d];
    }
  }

  Vector y;
  if (hook && *hook) {
    Vector delta(M, 0.0);
    (*hook)(l, delta);
    if (!all_finite(delta))
      throw Error("non_finite", "intervention hook returned non-finite delta at layer " +
                                    std::to_string(l));
    y = project_heads(model, l, z_out, delta);
  } else {
    y = project_heads(model, l, z_out);
  }
  for (std::size_t i = 0; i < M; ++i) x[i] += y[i];

  Vector u(M), pre(F, 0.0), f(M, 0.0);
  detail::layer_norm(x.data(), model.p(L.ln2_g), model.p(L.ln2_b), u.data(), M);
  std::copy(model.p(L.b1), model.p(L.b1) + F, pre.begin());
  kernel::gemv_acc(u.data(), model.p(L.w1), pre.data(), M, F);
  for (double& v : pre) v = detail::gelu(v);
  std::copy(model.p(L.b2), model.p(L.b2) + M, f.begin());
  kernel::gemv_acc(pre.data(), model.p(L.w2), f.data(), F, M);
  for (std::size_t i = 0; i < M; ++i) x[i] += f[i];
}

/// Processes `token` at position cache.length(). With `commit` the cache is
/// extended by one step; without it the cache is left untouched (a "peek"
/// pass used by self-monitoring).
inline StepOutput forward_step(const TransformerModel& model, KvCache& cache, Token token,
                               const HeadHook* hook = nullptr, bool commit = true) {
  const auto& c = model.config;
  const std::size_t M = c.model_dim(), H = c.num_heads, D = c.head_dim;
  const std::size_t t = cache.length();
  if (t >= c.max_context)
    throw Error("context_overflow", "forward_step: context length " + std::to_string(t) +
                                        " reached max_context");
  if (token >= c.vocab_size) throw Error("out_of_range", "forward_step: token id out of range");

  StepOutput out;
  out.activations = {t, c.num_layers, H, D, std::vector<double>(c.num_layers * M)};
  Vector x(M);
  for (std::size_t i = 0; i < M; ++i)
    x[i] = model.params[model.layout.tok_emb + token * M + i] +
           model.params[model.layout.pos_emb + t * M + i];

  std::vector<double> ks(c.num_layers * M), vs(c.num_layers * M);
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    layer_forward(model, cache, l, x, hook, {out.activations.z.data() + l * M, M},
                  {ks.data() + l * M, M}, {vs.data() + l * M, M});
  }
  if (commit) {
    for (std::size_t l = 0; l < c.num_layers; ++l)
      cache.append(l, {ks.data() + l * M, M}, {vs.data() + l * M, M});
    cache.advance();
  }

  out.hidden.resize(M);
  detail::layer_norm(x.data(), model.p(model.layout.lnf_g), model.p(model.layout.lnf_b),
                     out.hidden.data(), M);
  out.logits.assign(c.vocab_size, 0.0);
  kernel::gemv_acc(out.hidden.data(), model.p(model.layout.w_out), out.logits.data(), M,
                   c.vocab_size);
  if (!all_finite(out.logits)) throw Error("non_finite", "forward_step produced non-finite logits");
  return out;
}

/// Categorical sample from softmax(logits / temperature); temperature <= 0
/// means argmax (lowest index wins ties).
inline Token sample_token(std::span<const double> logits, double temperature, Rng& rng) {
  if (logits.empty()) throw Error("empty_input", "sample_token: empty logits");
  if (!all_finite(logits)) throw Error("non_finite", "sample_token: non-finite logits");
  if (temperature <= 0.0) {
    return static_cast<Token>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  Vector p(logits.begin(), logits.end());
  for (double& v : p) v /= temperature;
  softmax_inplace(p);
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) return static_cast<Token>(i);
  }
  return static_cast<Token>(p.size() - 1);
}

// ---------------------------------------------------------------------------
// Whole-sequence (cache-free) forward pass with stored intermediates, used by
// the trainer, by activation extraction and as the oracle for cached decoding.

struct SequenceForward {
  struct LayerCache {
    std::vector<double> x_in, h, mu1, rstd1, q, k, v, probs, z, x_mid, u, mu2, rstd2, pre, act;
  };
  std::size_t T = 0;
  std::vector<LayerCache> layers;
  std::vector<double> x_final, hf, muf, rstdf, logits;

  /// Head output z_{l,h} at position t.
  std::span<const double> z(std::size_t l, std::size_t h, std::size_t t, std::size_t M,
                            std::size_t D) const {
    return {layers[l].z.data() + t * M + h * D, D};
  }
};

inline SequenceForward forward_sequence(const TransformerModel& model, std::span<const Token> tokens,
                                        bool keep_intermediates = true) {
  const auto& c = model.config;
  const std::size_t T = tokens.size(), M = c.model_dim(), D = c.head_dim, H = c.num_heads,
                    F = c.ffn_dim(), V = c.vocab_size;
  if (T == 0) throw Error("empty_input", "forward_sequence: empty token sequence");
  if (T > c.max_context) throw Error("context_overflow", "forward_sequence: sequence exceeds max_context");

  SequenceForward fw;
  fw.T = T;
  fw.layers.resize(c.num_layers);
  std::vector<double> x(T * M);
  for (std::size_t t = 0; t < T; ++t) {
    if (tokens[t] >= V) throw Error("out_of_range", "forward_sequence: token id out of range");
    for (std::size_t i = 0; i < M; ++i)
      x[t * M + i] = model.params[model.layout.tok_emb + tokens[t] * M + i] +
                     model.params[model.layout.pos_emb + t * M + i];
  }
  const double scale = 1.0 / std::sqrt(double(D));
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    const auto& L = model.layout.layers[l];
    auto& lc = fw.layers[l];
    lc.x_in = x;
    lc.h.assign(T * M, 0.0);
    lc.mu1.resize(T);
    lc.rstd1.resize(T);
    for (std::size_t t = 0; t < T; ++t)
      detail::layer_norm(x.data() + t * M, model.p(L.ln1_g), model.p(L.ln1_b), lc.h.data() + t * M,
                         M, &lc.mu1[t], &lc.rstd1[t]);
    lc.q.assign(T * M, 0.0);
    lc.k.assign(T * M, 0.0);
    lc.v.assign(T * M, 0.0);
    kernel::gemm_acc(lc.h.data(), model.p(L.wq), lc.q.data(), T, M, M);
    kernel::gemm_acc(lc.h.data(), model.p(L.wk), lc.k.data(), T, M, M);
    kernel::gemm_acc(lc.h.data(), model.p(L.wv), lc.v.data(), T, M, M);
    lc.probs.assign(H * T * T, 0.0);
    lc.z.assign(T * M, 0.0);
    for (std::size_t hd = 0; hd < H; ++hd) {
      const std::size_t o = hd * D;
      for (std::size_t t = 0; t < T; ++t) {
        double* pr = lc.probs.data() + (hd * T + t) * T;
        for (std::size_t j = 0; j <= t; ++j) {
          double s = 0.0;
          for (std::size_t d = 0; d < D; ++d) s += lc.q[t * M + o + d] * lc.k[j * M + o + d];
          pr[j] = s * scale;
        }
        softmax_inplace({pr, t + 1});
        double* z = lc.z.data() + t * M + o;
        for (std::size_t j = 0; j <= t; ++j)
          for (std::size_t d = 0; d < D; ++d) z[d] += pr[j] * lc.v[j * M + o + d];
      }
    }
    kernel::gemm_acc(lc.z.data(), model.p(L.wo), x.data(), T, M, M);
    lc.x_mid = x;
    lc.u.assign(T * M, 0.0);
    lc.mu2.resize(T);
    lc.rstd2.resize(T);
    for (std::size_t t = 0; t < T; ++t)
      detail::layer_norm(x.data() + t * M, model.p(L.ln2_g), model.p(L.ln2_b), lc.u.data() + t * M,
                         M, &lc.mu2[t], &lc.rstd2[t]);
    lc.pre.resize(T * F);
    for (std::size_t t = 0; t < T; ++t) std::copy(model.p(L.b1), model.p(L.b1) + F, lc.pre.data() + t * F);
    kernel::gemm_acc(lc.u.data(), model.p(L.w1), lc.pre.data(), T, M, F);
    lc.act.resize(T * F);
    for (std::size_t i = 0; i < T * F; ++i) lc.act[i] = detail::gelu(lc.pre[i]);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t i = 0; i < M; ++i) x[t * M + i] += model.params[L.b2 + i];
    kernel::gemm_acc(lc.act.data(), model.p(L.w2), x.data(), T, F, M);
    if (!keep_intermediates) {
      lc.x_in.clear(); lc.h.clear(); lc.q.clear(); lc.k.clear(); lc.v.clear(); lc.probs.clear();
      lc.x_mid.clear(); lc.u.clear(); lc.pre.clear(); lc.act.clear();
    }
  }
  fw.x_final = x;
  fw.hf.assign(T * M, 0.0);
  fw.muf.resize(T);
  fw.rstdf.resize(T);
  for (std::size_t t = 0; t < T; ++t)
    detail::layer_norm(x.data() + t * M, model.p(model.layout.lnf_g), model.p(model.layout.lnf_b),
                       fw.hf.data() + t * M, M, &fw.muf[t], &fw.rstdf[t]);
  fw.logits.assign(T * V, 0.0);
  kernel::gemm_acc(fw.hf.data(), model.p(model.layout.w_out), fw.logits.data(), T, M, V);
  return fw;
}

/// Mean next-token cross-entropy over positions 0..T-2 of one sequence.
inline double sequence_loss(const SequenceForward& fw, std::span<const Token> tokens,
                            std::size_t vocab) {
  if (fw.T < 2) return 0.0;
  double loss = 0.0;
  Vector row(vocab);
  for (std::size_t t = 0; t + 1 < fw.T; ++t) {
    std::copy(fw.logits.begin() + t * vocab, fw.logits.begin() + (t + 1) * vocab, row.begin());
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (double v : row) s += std::exp(v - mx);
    loss += -(row[tokens[t + 1]] - mx - std::log(s));
  }
  return loss / double(fw.T - 1);
}

namespace detail {

inline void layer_norm_backward(const double* dy, const double* x, double mu, double rstd,
                                const double* g, double* dx, double* dg, double* db,
                                std::size_t n) {
  double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double xhat = (x[i] - mu) * rstd;
    const double dxhat = dy[i] * g[i];
    dg[i] += dy[i] * xhat;
    db[i] += dy[i];
    sum_dxhat += dxhat;
    sum_dxhat_xhat += dxhat * xhat;
  }
  const double inv_n = 1.0 / double(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double xhat = (x[i] - mu) * rstd;
    const double dxhat = dy[i] * g[i];
    dx[i] += rstd * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
  }
}

}  // namespace detail

/// Transposed copies of the projection matrices, shared across a batch.
struct TransposedWeights {
  std::vector<std::vector<double>> wq, wk, wv, wo, w1, w2;
  std::vector<double> w_out;

  explicit TransposedWeights(const TransformerModel& m) {
    const auto& c = m.config;
    const std::size_t M = c.model_dim(), F = c.ffn_dim();
    auto tr = [&](std::size_t off, std::size_t rows, std::size_t cols) {
      std::vector<double> t(rows * cols);
      kernel::transpose(m.p(off), t.data(), rows, cols);
      return t;
    };
    for (const auto& L : m.layout.layers) {
      wq.push_back(tr(L.wq, M, M));
      wk.push_back(tr(L.wk, M, M));
      wv.push_back(tr(L.wv, M, M));
      wo.push_back(tr(L.wo, M, M));
      w1.push_back(tr(L.w1, M, F));
      w2.push_back(tr(L.w2, F, M));
    }
    w_out = tr(m.layout.w_out, M, c.vocab_size);
  }
};

/// Accumulates d(loss * weight)/d(params) into `grad`, where loss is
/// sequence_loss(). Returns the (unweighted) loss.
inline double backward_sequence(const TransformerModel& model, const TransposedWeights& wt,
                                std::span<const Token> tokens, std::span<double> grad,
                                double weight = 1.0) {
  const auto& c = model.config;
  const std::size_t T = tokens.size(), M = c.model_dim(), D = c.head_dim, H = c.num_heads,
                    F = c.ffn_dim(), V = c.vocab_size;
  const SequenceForward fw = forward_sequence(model, tokens, true);
  const double loss = sequence_loss(fw, tokens, V);
  if (T < 2) return loss;

  // dlogits
  std::vector<double> dlogits(T * V, 0.0);
  const double inv = weight / double(T - 1);
  for (std::size_t t = 0; t + 1 < T; ++t) {
    std::span<double> row(dlogits.data() + t * V, V);
    std::copy(fw.logits.begin() + t * V, fw.logits.begin() + (t + 1) * V, row.begin());
    softmax_inplace(row);
    row[tokens[t + 1]] -= 1.0;
    for (double& v : row) v *= inv;
  }
  const auto& lay = model.layout;
  kernel::gemm_tn_acc(fw.hf.data(), dlogits.data(), grad.data() + lay.w_out, T, M, V);
  std::vector<double> dhf(T * M, 0.0);
  kernel::gemm_acc(dlogits.data(), wt.w_out.data(), dhf.data(), T, V, M);
  std::vector<double> dx(T * M, 0.0);
  for (std::size_t t = 0; t < T; ++t)
    detail::layer_norm_backward(dhf.data() + t * M, fw.x_final.data() + t * M, fw.muf[t],
                                fw.rstdf[t], model.p(lay.lnf_g), dx.data() + t * M,
                                grad.data() + lay.lnf_g, grad.data() + lay.lnf_b, M);

  const double scale = 1.0 / std::sqrt(double(D));
  for (std::size_t li = c.num_layers; li-- > 0;) {
    const auto& L = lay.layers[li];
    const auto& lc = fw.layers[li];
    // Feed-forward branch; dx is the gradient w.r.t. the layer output.
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t i = 0; i < M; ++i) grad[L.b2 + i] += dx[t * M + i];
    kernel::gemm_tn_acc(lc.act.data(), dx.data(), grad.data() + L.w2, T, F, M);
    std::vector<double> dpre(T * F, 0.0);
    kernel::gemm_acc(dx.data(), wt.w2[li].data(), dpre.data(), T, M, F);
    for (std::size_t i = 0; i < T * F; ++i) dpre[i] *= detail::gelu_grad(lc.pre[i]);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t i = 0; i < F; ++i) grad[L.b1 + i] += dpre[t * F + i];
    kernel::gemm_tn_acc(lc.u.data(), dpre.data(), grad.data() + L.w1, T, M, F);
    std::vector<double> du(T * M, 0.0);
    kernel::gemm_acc(dpre.data(), wt.w1[li].data(), du.data(), T, F, M);
    for (std::size_t t = 0; t < T; ++t)
      detail::layer_norm_backward(du.data() + t * M, lc.x_mid.data() + t * M, lc.mu2[t],
                                  lc.rstd2[t], model.p(L.ln2_g), dx.data() + t * M,
                                  grad.data() + L.ln2_g, grad.data() + L.ln2_b, M);
    // Attention branch; dx now holds the gradient w.r.t. x_mid.
    kernel::gemm_tn_acc(lc.z.data(), dx.data(), grad.data() + L.wo, T, M, M);
    std::vector<double> dz(T * M, 0.0);
    kernel::gemm_acc(dx.data(), wt.wo[li].data(), dz.data(), T, M, M);
    std::vector<double> dq(T * M, 0.0), dk(T * M, 0.0), dv(T * M, 0.0);
    std::vector<double> dp(T);
    for (std::size_t hd = 0; hd < H; ++hd) {
      const std::size_t o = hd * D;
      for (std::size_t t = 0; t < T; ++t) {
        const double* pr = lc.probs.data() + (hd * T + t) * T;
        const double* dzt = dz.data() + t * M + o;
        double sum = 0.0;
        for (std::size_t j = 0; j <= t; ++j) {
          double s = 0.0;
          for (std::size_t d = 0; d < D; ++d) {
            s += dzt[d] * lc.v[j * M + o + d];
            dv[j * M + o + d] += pr[j] * dzt[d];
          }
          dp[j] = s;
          sum += pr[j] * s;
        }
        for (std::size_t j = 0; j <= t; ++j) {
          const double ds = pr[j] * (dp[j] - sum) * scale;
          for (std::size_t d = 0; d < D; ++d) {
            dq[t * M + o + d] += ds * lc.k[j * M + o + d];
            dk[j * M + o + d] += ds * lc.q[t * M + o + d];
          }
        }
      }
    }
    kernel::gemm_tn_acc(lc.h.data(), dq.data(), grad.data() + L.wq, T, M, M);
    kernel::gemm_tn_acc(lc.h.data(), dk.data(), grad.data() + L.wk, T, M, M);
    kernel::gemm_tn_acc(lc.h.data(), dv.data(), grad.data() + L.wv, T, M, M);
    std::vector<double> dh(T * M, 0.0);
    kernel::gemm_acc(dq.data(), wt.wq[li].data(), dh.data(), T, M, M);
    kernel::gemm_acc(dk.data(), wt.wk[li].data(), dh.data(), T, M, M);
    kernel::gemm_acc(dv.data(), wt.wv[li].data(), dh.data(), T, M, M);
    for (std::size_t t = 0; t < T; ++t)
      detail::layer_norm_backward(dh.data() + t * M, lc.x_in.data() + t * M, lc.mu1[t],
                                  lc.rstd1[t], model.p(L.ln1_g), dx.data() + t * M,
                                  grad.data() + L.ln1_g, grad.data() + L.ln1_b, M);
  }
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < M; ++i) {
      grad[lay.tok_emb + tokens[t] * M + i] += dx[t * M + i];
      grad[lay.pos_emb + t * M + i] += dx[t * M + i];
    }
  return loss;
}

// ---------------------------------------------------------------------------
// Trainer

struct TrainHyper {
  double lr = 3e-3;
  std::size_t steps = 1500;
  std::size_t batch = 16;
  std::uint64_t seed = 1;
  std::size_t warmup = 50;
  double grad_clip = 1.0;
  std::size_t log_every = 50;
};

struct LossPoint {
  std::size_t step;
  double loss;
};

struct TrainResult {
  TransformerModel model;
  std::vector<LossPoint> curve;  // one entry per logging step
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

/// Mean next-token loss of `model` over `sequences`.
inline double evaluate_loss(const TransformerModel& model,
                            const std::vector<std::vector<Token>>& sequences) {
  if (sequences.empty()) throw Error("empty_input", "evaluate_loss: no sequences");
  double s = 0.0;
  for (const auto& seq : sequences) s += sequence_loss(forward_sequence(model, seq, false), seq,
                                                       model.config.vocab_size);
  return s / double(sequences.size());
}

/// Next-token cross-entropy training with Adam (linear warmup, cosine decay,
/// global-norm clipping). Single-threaded and deterministic for a fixed seed.
inline TrainResult train_model(const std::vector<std::vector<Token>>& corpus,
                               const ModelConfig& config, const TrainHyper& hyper) {
  if (corpus.empty()) throw Error("empty_input", "train_model: empty corpus");
  for (const auto& s : corpus) {
    if (s.size() > config.max_context)
      throw Error("context_overflow", "train_model: corpus sequence longer than max_context");
    for (Token tk : s)
      if (tk >= config.vocab_size) throw Error("out_of_range", "train_model: token out of range");
  }
  Rng rng(hyper.seed);
  TrainResult res{TransformerModel::random_init(config, rng.substream(1).next_u64()), {}, 0.0, 0.0};
  auto& model = res.model;
  const std::size_t P = model.params.size();
  std::vector<double> grad(P), m1(P, 0.0), m2(P, 0.0);
  constexpr double beta1 = 0.9, beta2 = 0.99, eps = 1e-8;
  Rng batch_rng = rng.substream(2);

  for (std::size_t step = 1; step <= hyper.steps; ++step) {
    std::fill(grad.begin(), grad.end(), 0.0);
    const TransposedWeights wt(model);
    double loss = 0.0;
    for (std::size_t b = 0; b < hyper.batch; ++b) {
      const auto& seq = corpus[batch_rng.uniform_int(corpus.size())];
      loss += backward_sequence(model, wt, seq, grad, 1.0 / double(hyper.batch));
    }
    loss /= double(hyper.batch);
    if (!std::isfinite(loss))
      throw Error("divergence", "train_model: loss became non-finite at step " + std::to_string(step));
    if (step == 1) res.initial_loss = loss;
    res.final_loss = loss;
    if (hyper.log_every > 0 && (step % hyper.log_every == 0 || step == 1))
      res.curve.push_back({step, loss});

    double gn = 0.0;
    for (double g : grad) gn += g * g;
    gn = std::sqrt(gn);
    const double clip = (hyper.grad_clip > 0.0 && gn > hyper.grad_clip) ? hyper.grad_clip / gn : 1.0;

    double lr = hyper.lr;
    if (step <= hyper.warmup) {
      lr *= double(step) / double(std::max<std::size_t>(1, hyper.warmup));
    } else {
      const double prog = double(step - hyper.warmup) /
                          double(std::max<std::size_t>(1, hyper.steps - hyper.warmup));
      lr *= 0.1 + 0.9 * 0.5 * (1.0 + std::cos(3.14159265358979323846 * prog));
    }
    const double bc1 = 1.0 - std::pow(beta1, double(step));
    const double bc2 = 1.0 - std::pow(beta2, double(step));
    for (std::size_t i = 0; i < P; ++i) {
      const double g = grad[i] * clip;
      m1[i] = beta1 * m1[i] + (1.0 - beta1) * g;
      m2[i] = beta2 * m2[i] + (1.0 - beta2) * g * g;
      model.params[i] -= lr * (m1[i] / bc1) / (std::sqrt(m2[i] / bc2) + eps);
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O: "STFM", u32 version=1, u32 L, H, D, V, T_max, then every
// parameter in ParamLayout order as little-endian IEEE-754 binary32.

namespace io {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>(v >> 8));
}
inline void put_f32(std::string& out, double v) {
  put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

class Reader {
 public:
  Reader(std::string bytes, std::string what) : bytes_(std::move(bytes)), what_(std::move(what)) {}
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw Error("truncated", what_ + ": truncated file");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint16_t u16() {
    need(2);
    const auto v = static_cast<std::uint16_t>(static_cast<unsigned char>(bytes_[pos_]) |
                                              (static_cast<unsigned char>(bytes_[pos_ + 1]) << 8));
    pos_ += 2;
    return v;
  }
  double f32() { return static_cast<double>(std::bit_cast<float>(u32())); }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  std::string bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io_error", "cannot open " + path + " for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("io_error", "cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("io_error", "write failed for " + path);
}

}  // namespace io

constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string serialize_checkpoint(const TransformerModel& model) {
  std::string out = "STFM";
  io::put_u32(out, kCheckpointVersion);
  const auto& c = model.config;
  for (std::size_t v : {c.num_layers, c.num_heads, c.head_dim, c.vocab_size, c.max_context})
    io::put_u32(out, static_cast<std::uint32_t>(v));
  for (double w : model.params) io::put_f32(out, w);
  return out;
}

inline TransformerModel deserialize_checkpoint(std::string bytes) {
  io::Reader r(std::move(bytes), "checkpoint");
  if (r.raw(4) != "STFM") throw Error("bad_magic", "checkpoint: bad magic (expected STFM)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw Error("version_mismatch", "checkpoint: unsupported version " + std::to_string(version));
  ModelConfig c;
  c.num_layers = r.u32();
  c.num_heads = r.u32();
  c.head_dim = r.u32();
  c.vocab_size = r.u32();
  c.max_context = r.u32();
  c.validate();
  TransformerModel m(c);
  r.need(m.params.size() * 4);
  for (double& w : m.params) w = r.f32();
  if (!r.at_end()) throw Error("trailing_bytes", "checkpoint: unexpected trailing bytes");
  if (!all_finite(m.params)) throw Error("non_finite", "checkpoint: non-finite weight");
  return m;
}

inline void save_checkpoint(const TransformerModel& model, const std::string& path) {
  io::write_file(path, serialize_checkpoint(model));
}

inline TransformerModel load_checkpoint(const std::string& path) {
  return deserialize_checkpoint(io::read_file(path));
}

/// Rounds every weight to binary32 so the in-memory model equals what a
/// checkpoint round-trip yields.
inline void quantize_to_f32(TransformerModel& model) {
  for (double& w : model.params) w = static_cast<double>(static_cast<float>(w));
}

}  // namespace smitin
