// The small frozen decoder-only transformer: pre-norm blocks, RMS norm,
// rotary position embeddings, GELU MLP, untied output head.
//
// One kernel drives both decoding routes. A prefix of trained KV slots enters
// attention exactly like cached positions 0..p-1 (stored post-rotary, no
// computation of their own); query tokens are position-offset by p. With the
// prefix set to the captured cache of a corpus, the two routes perform the
// same arithmetic in the same order, which is the correctness anchor for
// first-k initialization.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clab/core.hpp"
#include "clab/numerics.hpp"
#include "clab/optim.hpp"
#include "clab/rng.hpp"

namespace clab::model {

struct ModelConfig {
  int num_layers = 4;
  int num_heads = 4;
  int head_dim = 16;
  int model_dim = 64;
  int vocab_size = 256;
  int max_positions = 2048;
  int mlp_hidden = 256;
  double rope_base = 10000.0;

  void validate() const {
    require(num_layers >= 1 && num_heads >= 1 && head_dim >= 1 && model_dim >= 1 &&
                max_positions >= 1 && mlp_hidden >= 1,
            "ModelConfig: all counts must be >= 1");
    require(vocab_size >= 2, "ModelConfig: vocab_size must be >= 2");
    require(model_dim == num_heads * head_dim, "ModelConfig: model_dim must equal heads*head_dim");
    require(rope_base > 1.0, "ModelConfig: rope_base must exceed 1");
  }

  bool operator==(const ModelConfig&) const = default;
};

template <typename Real>
struct LayerWeights {
  std::vector<Real> attn_norm_gain;  // [d]
  std::vector<Real> wq, wk, wv, wo;  // [d, d]
  std::vector<Real> mlp_norm_gain;   // [d]
  std::vector<Real> w_up;            // [F, d]
  std::vector<Real> w_down;          // [d, F]
};

template <typename Real>
struct FrozenModel {
  ModelConfig cfg;
  std::vector<Real> tok_embed;  // [V, d]
  std::vector<LayerWeights<Real>> layers;
  std::vector<Real> final_norm_gain;  // [d]
  std::vector<Real> out_proj;         // [V, d]
  std::uint64_t init_seed = 0;
};

// Post-rotary keys and values for one layer, [h, n, head_dim].
template <typename Real>
struct LayerKVCache {
  int num_heads = 0;
  int head_dim = 0;
  int n = 0;
  std::vector<Real> keys, values;
};

// Read-only view of trained prefix slots, [L, h, p, head_dim] planes.
template <typename Real>
struct PrefixKV {
  int num_layers = 0;
  int num_heads = 0;
  int p = 0;
  int head_dim = 0;
  const Real* keys = nullptr;
  const Real* values = nullptr;
};

template <typename Real>
struct ForwardResult {
  int n = 0;
  int vocab = 0;
  std::vector<Real> logits;                // [n, V]
  std::vector<LayerKVCache<Real>> caches;  // per layer when requested
};

template <typename Real>
struct CartridgeGrads {
  int num_layers = 0, num_heads = 0, p = 0, head_dim = 0;
  std::vector<Real> keys, values;  // [L, h, p, head_dim]

  void init(int L, int h, int p_, int dh) {
    num_layers = L;
    num_heads = h;
    p = p_;
    head_dim = dh;
    keys.assign(static_cast<std::size_t>(L) * h * p_ * dh, Real(0));
    values.assign(static_cast<std::size_t>(L) * h * p_ * dh, Real(0));
  }
};

template <typename Real>
struct WeightGrads {
  std::vector<Real> tok_embed;
  std::vector<LayerWeights<Real>> layers;
  std::vector<Real> final_norm_gain, out_proj;

  void init(const ModelConfig& cfg) {
    const auto d = static_cast<std::size_t>(cfg.model_dim);
    const auto f = static_cast<std::size_t>(cfg.mlp_hidden);
    const auto v = static_cast<std::size_t>(cfg.vocab_size);
    tok_embed.assign(v * d, Real(0));
    layers.assign(static_cast<std::size_t>(cfg.num_layers), {});
    for (auto& l : layers) {
      l.attn_norm_gain.assign(d, Real(0));
      l.wq.assign(d * d, Real(0));
      l.wk.assign(d * d, Real(0));
      l.wv.assign(d * d, Real(0));
      l.wo.assign(d * d, Real(0));
      l.mlp_norm_gain.assign(d, Real(0));
      l.w_up.assign(f * d, Real(0));
      l.w_down.assign(d * f, Real(0));
    }
    final_norm_gain.assign(d, Real(0));
    out_proj.assign(v * d, Real(0));
  }
};

namespace detail {

constexpr double kRmsEps = 1e-5;

template <typename Real>
void matvec(const Real* w, const Real* x, Real* y, int out, int in) {
  for (int o = 0; o < out; ++o) {
    const Real* row = w + static_cast<std::size_t>(o) * in;
    double acc = 0.0;
    for (int i = 0; i < in; ++i) {
      acc += static_cast<double>(row[i]) * static_cast<double>(x[i]);
    }
    y[o] = static_cast<Real>(acc);
  }
}

// y += W^T x, i.e. y_i += sum_o W[o][i] x_o.
template <typename Real>
void matvec_transpose_add(const Real* w, const Real* x, Real* y, int out, int in) {
  for (int o = 0; o < out; ++o) {
    const double xo = static_cast<double>(x[o]);
    if (xo == 0.0) {
      continue;
    }
    const Real* row = w + static_cast<std::size_t>(o) * in;
    for (int i = 0; i < in; ++i) {
      y[i] = static_cast<Real>(static_cast<double>(y[i]) + static_cast<double>(row[i]) * xo);
    }
  }
}

// dW[o][i] += dy_o x_i.
template <typename Real>
void outer_add(Real* dw, const Real* dy, const Real* x, int out, int in) {
  for (int o = 0; o < out; ++o) {
    const double g = static_cast<double>(dy[o]);
    if (g == 0.0) {
      continue;
    }
    Real* row = dw + static_cast<std::size_t>(o) * in;
    for (int i = 0; i < in; ++i) {
      row[i] = static_cast<Real>(static_cast<double>(row[i]) + g * static_cast<double>(x[i]));
    }
  }
}

template <typename Real>
void rmsnorm_row(const Real* x, const Real* gain, Real* y, Real* inv_out, int d) {
  double ss = 0.0;
  for (int i = 0; i < d; ++i) {
    ss += static_cast<double>(x[i]) * static_cast<double>(x[i]);
  }
  const double inv = 1.0 / std::sqrt(ss / d + kRmsEps);
  for (int i = 0; i < d; ++i) {
    y[i] = static_cast<Real>(static_cast<double>(x[i]) * static_cast<double>(gain[i]) * inv);
  }
  *inv_out = static_cast<Real>(inv);
}

// dx += backward of rmsnorm; dgain accumulated when non-null.
template <typename Real>
void rmsnorm_backward_row(const Real* x, const Real* gain, Real inv_rms, const Real* dy, Real* dx,
                          Real* dgain, int d) {
  const double inv = static_cast<double>(inv_rms);
  double s = 0.0;
  for (int i = 0; i < d; ++i) {
    s += static_cast<double>(dy[i]) * static_cast<double>(gain[i]) * static_cast<double>(x[i]);
  }
  const double coef = inv * inv * inv * s / d;
  for (int i = 0; i < d; ++i) {
    const double d_i = static_cast<double>(dy[i]) * static_cast<double>(gain[i]) * inv -
                       static_cast<double>(x[i]) * coef;
    dx[i] = static_cast<Real>(static_cast<double>(dx[i]) + d_i);
    if (dgain != nullptr) {
      dgain[i] = static_cast<Real>(static_cast<double>(dgain[i]) +
                                   static_cast<double>(dy[i]) * static_cast<double>(x[i]) * inv);
    }
  }
}

struct RopeTable {
  int head_dim = 0;
  std::vector<double> inv_freq;  // head_dim / 2

  RopeTable() = default;
  RopeTable(int dh, double base) : head_dim(dh), inv_freq(static_cast<std::size_t>(dh / 2)) {
    for (int t = 0; t < dh / 2; ++t) {
      inv_freq[static_cast<std::size_t>(t)] = std::pow(base, -2.0 * t / dh);
    }
  }

  template <typename Real>
  void rotate(Real* v, int pos) const {
    for (int t = 0; t < head_dim / 2; ++t) {
      const double angle = pos * inv_freq[static_cast<std::size_t>(t)];
      const double c = std::cos(angle), s = std::sin(angle);
      const double a = static_cast<double>(v[2 * t]);
      const double b = static_cast<double>(v[2 * t + 1]);
      v[2 * t] = static_cast<Real>(a * c - b * s);
      v[2 * t + 1] = static_cast<Real>(a * s + b * c);
    }
  }

  // Transpose rotation, used to carry gradients through the rotary map.
  template <typename Real>
  void rotate_inverse(Real* v, int pos) const {
    for (int t = 0; t < head_dim / 2; ++t) {
      const double angle = pos * inv_freq[static_cast<std::size_t>(t)];
      const double c = std::cos(angle), s = std::sin(angle);
      const double a = static_cast<double>(v[2 * t]);
      const double b = static_cast<double>(v[2 * t + 1]);
      v[2 * t] = static_cast<Real>(a * c + b * s);
      v[2 * t + 1] = static_cast<Real>(-a * s + b * c);
    }
  }
};

template <typename Real>
double gelu(Real x) {
  const double v = static_cast<double>(x);
  return 0.5 * v * (1.0 + std::erf(v * 0.7071067811865475244));
}

template <typename Real>
double gelu_grad(Real x) {
  const double v = static_cast<double>(x);
  const double cdf = 0.5 * (1.0 + std::erf(v * 0.7071067811865475244));
  const double pdf = 0.3989422804014326779 * std::exp(-0.5 * v * v);
  return cdf + v * pdf;
}

}  // namespace detail

// Captured intermediates of one forward pass, consumed by the reverse pass.
template <typename Real>
struct Tape {
  int n = 0, p0 = 0, d = 0, heads = 0, dh = 0, hidden = 0;
  std::vector<Real> x0;
  struct LayerTape {
    std::vector<Real> x_in, normed1;       // [n, d]
    std::vector<Real> inv_rms1, inv_rms2;  // [n]
    std::vector<Real> q, k_tok, v_tok;     // [h, n, dh]
    std::vector<Real> probs;               // [h, n, p0 + n]
    std::vector<Real> att_cat, x_mid, normed2;  // [n, d]
    std::vector<Real> mlp_pre, mlp_act;         // [n, F]
  };
  std::vector<LayerTape> layers;
  std::vector<Real> x_final;        // [n, d] input to the final norm
  std::vector<Real> inv_rms_final;  // [n]
  std::vector<Real> final_normed;   // [n, d]
};

template <typename Real>
FrozenModel<Real> random_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  FrozenModel<Real> m;
  m.cfg = cfg;
  m.init_seed = seed;
  Rng rng(seed);
  auto gaussian_fill = [&](std::vector<Real>& v, std::size_t size) {
    v.resize(size);
    for (auto& x : v) {
      x = static_cast<Real>(0.02 * rng.gaussian());
    }
  };
  const auto d = static_cast<std::size_t>(cfg.model_dim);
  const auto f = static_cast<std::size_t>(cfg.mlp_hidden);
  const auto v = static_cast<std::size_t>(cfg.vocab_size);
  gaussian_fill(m.tok_embed, v * d);
  m.layers.resize(static_cast<std::size_t>(cfg.num_layers));
  for (auto& l : m.layers) {
    l.attn_norm_gain.assign(d, Real(1));
    gaussian_fill(l.wq, d * d);
    gaussian_fill(l.wk, d * d);
    gaussian_fill(l.wv, d * d);
    gaussian_fill(l.wo, d * d);
    l.mlp_norm_gain.assign(d, Real(1));
    gaussian_fill(l.w_up, f * d);
    gaussian_fill(l.w_down, d * f);
  }
  m.final_norm_gain.assign(d, Real(1));
  gaussian_fill(m.out_proj, v * d);
  return m;
}

template <typename Real>
void validate_prefix(const ModelConfig& cfg, const PrefixKV<Real>& prefix) {
  require(prefix.num_layers == cfg.num_layers && prefix.num_heads == cfg.num_heads &&
              prefix.head_dim == cfg.head_dim,
          "prefix dimensions do not match the model config");
  require(prefix.p >= 0, "prefix length must be nonnegative");
}

// Unified decoding kernel. `prefix` may be null (plain full-context forward).
template <typename Real>
ForwardResult<Real> forward_tokens(const FrozenModel<Real>& m, std::span<const TokenId> tokens,
                                   const PrefixKV<Real>* prefix, bool want_caches,
                                   Tape<Real>* tape = nullptr) {
  const ModelConfig& cfg = m.cfg;
  const int n = static_cast<int>(tokens.size());
  require(n >= 1, "forward: need at least one token");
  for (TokenId t : tokens) {
    require(t >= 0 && t < cfg.vocab_size, "forward: token id out of range");
  }
  const int p0 = prefix != nullptr ? prefix->p : 0;
  if (prefix != nullptr) {
    validate_prefix(cfg, *prefix);
  }
  if (p0 + n > cfg.max_positions) {
    throw CapacityError("forward: sequence too long for max_positions");
  }
  require(cfg.head_dim <= 256, "forward: head_dim above the supported 256");

  const int d = cfg.model_dim;
  const int heads = cfg.num_heads;
  const int dh = cfg.head_dim;
  const int hidden = cfg.mlp_hidden;
  const int vocab = cfg.vocab_size;
  const int m_kv = p0 + n;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const detail::RopeTable rope(dh, cfg.rope_base);

  ForwardResult<Real> out;
  out.n = n;
  out.vocab = vocab;
  out.logits.assign(static_cast<std::size_t>(n) * vocab, Real(0));
  if (want_caches) {
    out.caches.resize(static_cast<std::size_t>(cfg.num_layers));
  }
  if (tape != nullptr) {
    tape->n = n;
    tape->p0 = p0;
    tape->d = d;
    tape->heads = heads;
    tape->dh = dh;
    tape->hidden = hidden;
    tape->layers.assign(static_cast<std::size_t>(cfg.num_layers), {});
  }

  std::vector<Real> x(static_cast<std::size_t>(n) * d);
  for (int i = 0; i < n; ++i) {
    const Real* row = m.tok_embed.data() + static_cast<std::size_t>(tokens[static_cast<std::size_t>(i)]) * d;
    std::copy(row, row + d, x.data() + static_cast<std::size_t>(i) * d);
  }
  if (tape != nullptr) {
    tape->x0 = x;
  }

  std::vector<Real> normed(static_cast<std::size_t>(n) * d);
  std::vector<Real> inv_rms(static_cast<std::size_t>(n));
  std::vector<Real> q(static_cast<std::size_t>(heads) * n * dh);
  std::vector<Real> k(static_cast<std::size_t>(heads) * n * dh);
  std::vector<Real> v(static_cast<std::size_t>(heads) * n * dh);
  std::vector<Real> att_cat(static_cast<std::size_t>(n) * d);
  std::vector<Real> probs_row(static_cast<std::size_t>(m_kv));
  std::vector<Real> proj_row(static_cast<std::size_t>(d));
  std::vector<Real> mlp_pre(static_cast<std::size_t>(n) * hidden);
  std::vector<Real> mlp_act(static_cast<std::size_t>(n) * hidden);

  for (int layer = 0; layer < cfg.num_layers; ++layer) {
    const LayerWeights<Real>& lw = m.layers[static_cast<std::size_t>(layer)];
    auto* lt = tape != nullptr ? &tape->layers[static_cast<std::size_t>(layer)] : nullptr;
    if (lt != nullptr) {
      lt->x_in = x;
      lt->probs.assign(static_cast<std::size_t>(heads) * n * m_kv, Real(0));
    }

    for (int i = 0; i < n; ++i) {
      detail::rmsnorm_row(x.data() + static_cast<std::size_t>(i) * d, lw.attn_norm_gain.data(),
                          normed.data() + static_cast<std::size_t>(i) * d,
                          &inv_rms[static_cast<std::size_t>(i)], d);
    }
    if (lt != nullptr) {
      lt->normed1 = normed;
      lt->inv_rms1 = inv_rms;
    }

    // Projections; q and token keys are rotated at their absolute positions.
    for (int i = 0; i < n; ++i) {
      const Real* nrow = normed.data() + static_cast<std::size_t>(i) * d;
      const int pos = p0 + i;
      detail::matvec(lw.wq.data(), nrow, proj_row.data(), d, d);
      for (int hh = 0; hh < heads; ++hh) {
        Real* dst = q.data() + (static_cast<std::size_t>(hh) * n + i) * dh;
        std::copy(proj_row.data() + static_cast<std::size_t>(hh) * dh,
                  proj_row.data() + static_cast<std::size_t>(hh) * dh + dh, dst);
        rope.rotate(dst, pos);
      }
      detail::matvec(lw.wk.data(), nrow, proj_row.data(), d, d);
      for (int hh = 0; hh < heads; ++hh) {
        Real* dst = k.data() + (static_cast<std::size_t>(hh) * n + i) * dh;
        std::copy(proj_row.data() + static_cast<std::size_t>(hh) * dh,
                  proj_row.data() + static_cast<std::size_t>(hh) * dh + dh, dst);
        rope.rotate(dst, pos);
      }
      detail::matvec(lw.wv.data(), nrow, proj_row.data(), d, d);
      for (int hh = 0; hh < heads; ++hh) {
        Real* dst = v.data() + (static_cast<std::size_t>(hh) * n + i) * dh;
        std::copy(proj_row.data() + static_cast<std::size_t>(hh) * dh,
                  proj_row.data() + static_cast<std::size_t>(hh) * dh + dh, dst);
      }
    }
    if (lt != nullptr) {
      lt->q = q;
      lt->k_tok = k;
      lt->v_tok = v;
    }
    if (want_caches) {
      auto& cache = out.caches[static_cast<std::size_t>(layer)];
      cache.num_heads = heads;
      cache.head_dim = dh;
      cache.n = n;
      cache.keys = k;
      cache.values = v;
    }

    const Real* pk = prefix != nullptr ? prefix->keys + static_cast<std::size_t>(layer) * heads * p0 * dh
                                       : nullptr;
    const Real* pv = prefix != nullptr ? prefix->values + static_cast<std::size_t>(layer) * heads * p0 * dh
                                       : nullptr;

    for (int hh = 0; hh < heads; ++hh) {
      for (int i = 0; i < n; ++i) {
        const Real* qi = q.data() + (static_cast<std::size_t>(hh) * n + i) * dh;
        const int allowed = p0 + i + 1;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < allowed; ++j) {
          const Real* kj = j < p0 ? pk + (static_cast<std::size_t>(hh) * p0 + j) * dh
                                  : k.data() + (static_cast<std::size_t>(hh) * n + (j - p0)) * dh;
          double dot = 0.0;
          for (int t = 0; t < dh; ++t) {
            dot += static_cast<double>(qi[t]) * static_cast<double>(kj[t]);
          }
          const double s = dot * scale;
          probs_row[static_cast<std::size_t>(j)] = static_cast<Real>(s);
          mx = std::max(mx, s);
        }
        double denom = 0.0;
        for (int j = 0; j < allowed; ++j) {
          const double e = std::exp(static_cast<double>(probs_row[static_cast<std::size_t>(j)]) - mx);
          probs_row[static_cast<std::size_t>(j)] = static_cast<Real>(e);
          denom += e;
        }
        Real* orow = att_cat.data() + static_cast<std::size_t>(i) * d + static_cast<std::size_t>(hh) * dh;
        std::array<double, 256> acc{};
        for (int j = 0; j < allowed; ++j) {
          const double a = static_cast<double>(probs_row[static_cast<std::size_t>(j)]) / denom;
          probs_row[static_cast<std::size_t>(j)] = static_cast<Real>(a);
          const Real* vj = j < p0 ? pv + (static_cast<std::size_t>(hh) * p0 + j) * dh
                                  : v.data() + (static_cast<std::size_t>(hh) * n + (j - p0)) * dh;
          for (int t = 0; t < dh; ++t) {
            acc[static_cast<std::size_t>(t)] += a * static_cast<double>(vj[t]);
          }
        }
        for (int t = 0; t < dh; ++t) {
          orow[t] = static_cast<Real>(acc[static_cast<std::size_t>(t)]);
        }
        if (lt != nullptr) {
          Real* prow = lt->probs.data() + (static_cast<std::size_t>(hh) * n + i) * m_kv;
          std::copy(probs_row.data(), probs_row.data() + allowed, prow);
        }
      }
    }
    if (lt != nullptr) {
      lt->att_cat = att_cat;
    }

    for (int i = 0; i < n; ++i) {
      detail::matvec(lw.wo.data(), att_cat.data() + static_cast<std::size_t>(i) * d, proj_row.data(), d,
                     d);
      Real* xrow = x.data() + static_cast<std::size_t>(i) * d;
      for (int t = 0; t < d; ++t) {
        xrow[t] = static_cast<Real>(static_cast<double>(xrow[t]) + static_cast<double>(proj_row[t]));
      }
    }
    if (lt != nullptr) {
      lt->x_mid = x;
    }

    for (int i = 0; i < n; ++i) {
      detail::rmsnorm_row(x.data() + static_cast<std::size_t>(i) * d, lw.mlp_norm_gain.data(),
                          normed.data() + static_cast<std::size_t>(i) * d,
                          &inv_rms[static_cast<std::size_t>(i)], d);
    }
    if (lt != nullptr) {
      lt->normed2 = normed;
      lt->inv_rms2 = inv_rms;
    }

    for (int i = 0; i < n; ++i) {
      Real* pre = mlp_pre.data() + static_cast<std::size_t>(i) * hidden;
      Real* act = mlp_act.data() + static_cast<std::size_t>(i) * hidden;
      detail::matvec(lw.w_up.data(), normed.data() + static_cast<std::size_t>(i) * d, pre, hidden, d);
      for (int f = 0; f < hidden; ++f) {
        act[f] = static_cast<Real>(detail::gelu(pre[f]));
      }
      detail::matvec(lw.w_down.data(), act, proj_row.data(), d, hidden);
      Real* xrow = x.data() + static_cast<std::size_t>(i) * d;
      for (int t = 0; t < d; ++t) {
        xrow[t] = static_cast<Real>(static_cast<double>(xrow[t]) + static_cast<double>(proj_row[t]));
      }
    }
    if (lt != nullptr) {
      lt->mlp_pre = mlp_pre;
      lt->mlp_act = mlp_act;
    }
  }

  if (tape != nullptr) {
    tape->x_final = x;
  }
  for (int i = 0; i < n; ++i) {
    detail::rmsnorm_row(x.data() + static_cast<std::size_t>(i) * d, m.final_norm_gain.data(),
                        normed.data() + static_cast<std::size_t>(i) * d,
                        &inv_rms[static_cast<std::size_t>(i)], d);
    detail::matvec(m.out_proj.data(), normed.data() + static_cast<std::size_t>(i) * d,
                   out.logits.data() + static_cast<std::size_t>(i) * vocab, vocab, d);
  }
  if (tape != nullptr) {
    tape->final_normed = normed;
    tape->inv_rms_final = inv_rms;
  }
  return out;
}

template <typename Real>
ForwardResult<Real> forward_full(const FrozenModel<Real>& m, std::span<const TokenId> tokens) {
  return forward_tokens(m, tokens, static_cast<const PrefixKV<Real>*>(nullptr), true);
}

template <typename Real>
std::vector<Real> forward_with_prefix(const FrozenModel<Real>& m, const PrefixKV<Real>& prefix,
                                      std::span<const TokenId> tokens) {
  auto res = forward_tokens(m, tokens, &prefix, false);
  return std::move(res.logits);
}

// Reverse pass over a taped forward. Prefix gradients accumulate into
// `cart_grads` (when non-null), weight gradients into `weight_grads`
// (pre-training mode only).
template <typename Real>
void backward_tokens(const FrozenModel<Real>& m, std::span<const TokenId> tokens,
                     const PrefixKV<Real>* prefix, const Tape<Real>& tape,
                     std::span<const Real> dlogits, CartridgeGrads<Real>* cart_grads,
                     WeightGrads<Real>* weight_grads) {
  const ModelConfig& cfg = m.cfg;
  const int n = tape.n;
  const int p0 = tape.p0;
  const int d = cfg.model_dim;
  const int heads = cfg.num_heads;
  const int dh = cfg.head_dim;
  const int hidden = cfg.mlp_hidden;
  const int vocab = cfg.vocab_size;
  const int m_kv = p0 + n;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const detail::RopeTable rope(dh, cfg.rope_base);
  require(static_cast<int>(tokens.size()) == n, "backward: token/tape length mismatch");
  require(dlogits.size() == static_cast<std::size_t>(n) * vocab, "backward: dlogits shape mismatch");
  if (cart_grads != nullptr) {
    require(cart_grads->p == p0 && cart_grads->num_layers == cfg.num_layers &&
                cart_grads->num_heads == heads && cart_grads->head_dim == dh,
            "backward: cartridge gradient shape mismatch");
  }

  std::vector<Real> dx(static_cast<std::size_t>(n) * d, Real(0));

  // Output head and final norm.
  {
    std::vector<Real> dfn(static_cast<std::size_t>(n) * d, Real(0));
    for (int i = 0; i < n; ++i) {
      const Real* dl = dlogits.data() + static_cast<std::size_t>(i) * vocab;
      Real* dfn_row = dfn.data() + static_cast<std::size_t>(i) * d;
      detail::matvec_transpose_add(m.out_proj.data(), dl, dfn_row, vocab, d);
      if (weight_grads != nullptr) {
        detail::outer_add(weight_grads->out_proj.data(), dl,
                          tape.final_normed.data() + static_cast<std::size_t>(i) * d, vocab, d);
      }
    }
    for (int i = 0; i < n; ++i) {
      detail::rmsnorm_backward_row(tape.x_final.data() + static_cast<std::size_t>(i) * d,
                                   m.final_norm_gain.data(), tape.inv_rms_final[static_cast<std::size_t>(i)],
                                   dfn.data() + static_cast<std::size_t>(i) * d,
                                   dx.data() + static_cast<std::size_t>(i) * d,
                                   weight_grads != nullptr ? weight_grads->final_norm_gain.data() : nullptr,
                                   d);
    }
  }

  std::vector<Real> dnormed(static_cast<std::size_t>(n) * d);
  std::vector<Real> dpre(static_cast<std::size_t>(hidden));
  std::vector<Real> dact(static_cast<std::size_t>(hidden));
  std::vector<Real> datt(static_cast<std::size_t>(n) * d);
  std::vector<Real> dq(static_cast<std::size_t>(heads) * n * dh);
  std::vector<Real> dk_tok(static_cast<std::size_t>(heads) * n * dh);
  std::vector<Real> dv_tok(static_cast<std::size_t>(heads) * n * dh);
  std::vector<Real> da(static_cast<std::size_t>(m_kv));
  std::vector<Real> ds(static_cast<std::size_t>(m_kv));
  std::vector<Real> drow(static_cast<std::size_t>(d));

  for (int layer = cfg.num_layers - 1; layer >= 0; --layer) {
    const LayerWeights<Real>& lw = m.layers[static_cast<std::size_t>(layer)];
    const auto& lt = tape.layers[static_cast<std::size_t>(layer)];
    auto* wg = weight_grads != nullptr ? &weight_grads->layers[static_cast<std::size_t>(layer)] : nullptr;

    // MLP half: x_out = x_mid + w_down gelu(w_up rms2(x_mid)).
    std::fill(dnormed.begin(), dnormed.end(), Real(0));
    for (int i = 0; i < n; ++i) {
      const Real* dout = dx.data() + static_cast<std::size_t>(i) * d;
      std::fill(dact.begin(), dact.end(), Real(0));
      detail::matvec_transpose_add(lw.w_down.data(), dout, dact.data(), d, hidden);
      if (wg != nullptr) {
        detail::outer_add(wg->w_down.data(), dout, lt.mlp_act.data() + static_cast<std::size_t>(i) * hidden,
                          d, hidden);
      }
      const Real* pre = lt.mlp_pre.data() + static_cast<std::size_t>(i) * hidden;
      for (int f = 0; f < hidden; ++f) {
        dpre[static_cast<std::size_t>(f)] =
            static_cast<Real>(static_cast<double>(dact[static_cast<std::size_t>(f)]) * detail::gelu_grad(pre[f]));
      }
      detail::matvec_transpose_add(lw.w_up.data(), dpre.data(),
                                   dnormed.data() + static_cast<std::size_t>(i) * d, hidden, d);
      if (wg != nullptr) {
        detail::outer_add(wg->w_up.data(), dpre.data(), lt.normed2.data() + static_cast<std::size_t>(i) * d,
                          hidden, d);
      }
    }
    // dx currently holds d(x_out); the residual passes it straight through to
    // x_mid, plus the norm path below adds into it.
    for (int i = 0; i < n; ++i) {
      detail::rmsnorm_backward_row(lt.x_mid.data() + static_cast<std::size_t>(i) * d, lw.mlp_norm_gain.data(),
                                   lt.inv_rms2[static_cast<std::size_t>(i)],
                                   dnormed.data() + static_cast<std::size_t>(i) * d,
                                   dx.data() + static_cast<std::size_t>(i) * d,
                                   wg != nullptr ? wg->mlp_norm_gain.data() : nullptr, d);
    }

    // Attention half: x_mid = x_in + wo att_cat.
    std::fill(datt.begin(), datt.end(), Real(0));
    for (int i = 0; i < n; ++i) {
      const Real* dmid = dx.data() + static_cast<std::size_t>(i) * d;
      detail::matvec_transpose_add(lw.wo.data(), dmid, datt.data() + static_cast<std::size_t>(i) * d, d, d);
      if (wg != nullptr) {
        detail::outer_add(wg->wo.data(), dmid, lt.att_cat.data() + static_cast<std::size_t>(i) * d, d, d);
      }
    }

    std::fill(dq.begin(), dq.end(), Real(0));
    std::fill(dk_tok.begin(), dk_tok.end(), Real(0));
    std::fill(dv_tok.begin(), dv_tok.end(), Real(0));
    Real* gk = cart_grads != nullptr && p0 > 0
                   ? cart_grads->keys.data() + static_cast<std::size_t>(layer) * heads * p0 * dh
                   : nullptr;
    Real* gv = cart_grads != nullptr && p0 > 0
                   ? cart_grads->values.data() + static_cast<std::size_t>(layer) * heads * p0 * dh
                   : nullptr;
    const Real* pk = prefix != nullptr && p0 > 0
                         ? prefix->keys + static_cast<std::size_t>(layer) * heads * p0 * dh
                         : nullptr;
    const Real* pv = prefix != nullptr && p0 > 0
                         ? prefix->values + static_cast<std::size_t>(layer) * heads * p0 * dh
                         : nullptr;

    for (int hh = 0; hh < heads; ++hh) {
      for (int i = 0; i < n; ++i) {
        const int allowed = p0 + i + 1;
        const Real* dout = datt.data() + static_cast<std::size_t>(i) * d + static_cast<std::size_t>(hh) * dh;
        const Real* arow = lt.probs.data() + (static_cast<std::size_t>(hh) * n + i) * m_kv;
        const Real* qi = lt.q.data() + (static_cast<std::size_t>(hh) * n + i) * dh;
        double row_dot = 0.0;
        for (int j = 0; j < allowed; ++j) {
          const Real* vj = j < p0 ? pv + (static_cast<std::size_t>(hh) * p0 + j) * dh
                                  : lt.v_tok.data() + (static_cast<std::size_t>(hh) * n + (j - p0)) * dh;
          double s = 0.0;
          for (int t = 0; t < dh; ++t) {
            s += static_cast<double>(dout[t]) * static_cast<double>(vj[t]);
          }
          da[static_cast<std::size_t>(j)] = static_cast<Real>(s);
          row_dot += static_cast<double>(arow[j]) * s;
        }
        for (int j = 0; j < allowed; ++j) {
          const double a = static_cast<double>(arow[j]);
          ds[static_cast<std::size_t>(j)] =
              static_cast<Real>(a * (static_cast<double>(da[static_cast<std::size_t>(j)]) - row_dot));
          // dv accumulation
          Real* dvj = j < p0 ? (gv != nullptr ? gv + (static_cast<std::size_t>(hh) * p0 + j) * dh : nullptr)
                             : dv_tok.data() + (static_cast<std::size_t>(hh) * n + (j - p0)) * dh;
          if (dvj != nullptr) {
            for (int t = 0; t < dh; ++t) {
              dvj[t] = static_cast<Real>(static_cast<double>(dvj[t]) +
                                         a * static_cast<double>(dout[t]));
            }
          }
        }
        Real* dqi = dq.data() + (static_cast<std::size_t>(hh) * n + i) * dh;
        for (int j = 0; j < allowed; ++j) {
          const double dsj = static_cast<double>(ds[static_cast<std::size_t>(j)]) * scale;
          if (dsj == 0.0) {
            continue;
          }
          const Real* kj = j < p0 ? pk + (static_cast<std::size_t>(hh) * p0 + j) * dh
                                  : lt.k_tok.data() + (static_cast<std::size_t>(hh) * n + (j - p0)) * dh;
          for (int t = 0; t < dh; ++t) {
            dqi[t] = static_cast<Real>(static_cast<double>(dqi[t]) + dsj * static_cast<double>(kj[t]));
          }
          Real* dkj = j < p0 ? (gk != nullptr ? gk + (static_cast<std::size_t>(hh) * p0 + j) * dh : nullptr)
                             : dk_tok.data() + (static_cast<std::size_t>(hh) * n + (j - p0)) * dh;
          if (dkj != nullptr) {
            for (int t = 0; t < dh; ++t) {
              dkj[t] = static_cast<Real>(static_cast<double>(dkj[t]) + dsj * static_cast<double>(qi[t]));
            }
          }
        }
      }
    }

    // Through the rotary map, then the projections, into the pre-norm input.
    std::fill(dnormed.begin(), dnormed.end(), Real(0));
    for (int i = 0; i < n; ++i) {
      const int pos = p0 + i;
      const Real* n1 = lt.normed1.data() + static_cast<std::size_t>(i) * d;
      // q path
      for (int hh = 0; hh < heads; ++hh) {
        Real* slice = dq.data() + (static_cast<std::size_t>(hh) * n + i) * dh;
        rope.rotate_inverse(slice, pos);
        std::copy(slice, slice + dh, drow.data() + static_cast<std::size_t>(hh) * dh);
      }
      detail::matvec_transpose_add(lw.wq.data(), drow.data(),
                                   dnormed.data() + static_cast<std::size_t>(i) * d, d, d);
      if (wg != nullptr) {
        detail::outer_add(wg->wq.data(), drow.data(), n1, d, d);
      }
      // k path
      for (int hh = 0; hh < heads; ++hh) {
        Real* slice = dk_tok.data() + (static_cast<std::size_t>(hh) * n + i) * dh;
        rope.rotate_inverse(slice, pos);
        std::copy(slice, slice + dh, drow.data() + static_cast<std::size_t>(hh) * dh);
      }
      detail::matvec_transpose_add(lw.wk.data(), drow.data(),
                                   dnormed.data() + static_cast<std::size_t>(i) * d, d, d);
      if (wg != nullptr) {
        detail::outer_add(wg->wk.data(), drow.data(), n1, d, d);
      }
      // v path
      for (int hh = 0; hh < heads; ++hh) {
        const Real* slice = dv_tok.data() + (static_cast<std::size_t>(hh) * n + i) * dh;
        std::copy(slice, slice + dh, drow.data() + static_cast<std::size_t>(hh) * dh);
      }
      detail::matvec_transpose_add(lw.wv.data(), drow.data(),
                                   dnormed.data() + static_cast<std::size_t>(i) * d, d, d);
      if (wg != nullptr) {
        detail::outer_add(wg->wv.data(), drow.data(), n1, d, d);
      }
    }
    for (int i = 0; i < n; ++i) {
      detail::rmsnorm_backward_row(lt.x_in.data() + static_cast<std::size_t>(i) * d, lw.attn_norm_gain.data(),
                                   lt.inv_rms1[static_cast<std::size_t>(i)],
                                   dnormed.data() + static_cast<std::size_t>(i) * d,
                                   dx.data() + static_cast<std::size_t>(i) * d,
                                   wg != nullptr ? wg->attn_norm_gain.data() : nullptr, d);
    }
  }

  if (weight_grads != nullptr) {
    for (int i = 0; i < n; ++i) {
      Real* row = weight_grads->tok_embed.data() +
                  static_cast<std::size_t>(tokens[static_cast<std::size_t>(i)]) * d;
      const Real* dxi = dx.data() + static_cast<std::size_t>(i) * d;
      for (int t = 0; t < d; ++t) {
        row[t] = static_cast<Real>(static_cast<double>(row[t]) + static_cast<double>(dxi[t]));
      }
    }
  }
}

// One distillation example: the student sees `tokens` behind the prefix;
// teacher logits are supplied at the masked predictor positions.
template <typename Real>
struct DistillItem {
  std::vector<TokenId> tokens;
  std::vector<int> masked_positions;
  std::vector<Real> teacher_logits;  // [masked, V]
};

template <typename Real>
struct DistillBackwardResult {
  double loss = 0.0;
  CartridgeGrads<Real> grads;
  std::optional<WeightGrads<Real>> weight_grads;
};

// Masked-KL loss and exact gradients w.r.t. every prefix key/value entry.
template <typename Real>
DistillBackwardResult<Real> distill_backward(const FrozenModel<Real>& m, const PrefixKV<Real>& prefix,
                                             std::span<const DistillItem<Real>> batch,
                                             bool want_weight_grads = false) {
  const int vocab = m.cfg.vocab_size;
  std::size_t total_masked = 0;
  for (const auto& item : batch) {
    require(item.masked_positions.size() >= 1, "distill_backward: loss mask selects no positions");
    require(item.teacher_logits.size() == item.masked_positions.size() * static_cast<std::size_t>(vocab),
            "distill_backward: teacher logits shape mismatch");
    total_masked += item.masked_positions.size();
  }
  require(total_masked >= 1, "distill_backward: empty batch");

  DistillBackwardResult<Real> res;
  res.grads.init(m.cfg.num_layers, m.cfg.num_heads, prefix.p, m.cfg.head_dim);
  if (want_weight_grads) {
    res.weight_grads.emplace();
    res.weight_grads->init(m.cfg);
  }

  Tape<Real> tape;
  double loss_sum = 0.0;
  const double inv_count = 1.0 / static_cast<double>(total_masked);
  std::vector<double> pt(static_cast<std::size_t>(vocab));
  std::vector<double> ps(static_cast<std::size_t>(vocab));
  for (const auto& item : batch) {
    auto fwd = forward_tokens(m, item.tokens, &prefix, false, &tape);
    if (!all_finite(std::span<const Real>(fwd.logits))) {
      // Divergence during training, not caller error: surface as a NaN loss so
      // the training loop can snapshot diagnostics and abort.
      res.loss = std::numeric_limits<double>::quiet_NaN();
      return res;
    }
    std::vector<Real> dlogits(static_cast<std::size_t>(tape.n) * vocab, Real(0));
    for (std::size_t mi = 0; mi < item.masked_positions.size(); ++mi) {
      const int pos = item.masked_positions[mi];
      require(pos >= 0 && pos < tape.n, "distill_backward: masked position out of range");
      std::span<const Real> teacher(item.teacher_logits.data() + mi * static_cast<std::size_t>(vocab),
                                    static_cast<std::size_t>(vocab));
      std::span<const Real> student(fwd.logits.data() + static_cast<std::size_t>(pos) * vocab,
                                    static_cast<std::size_t>(vocab));
      loss_sum += numerics::kl_divergence(teacher, student);
      numerics::log_softmax(teacher, std::span<double>(pt));
      numerics::log_softmax(student, std::span<double>(ps));
      Real* drow = dlogits.data() + static_cast<std::size_t>(pos) * vocab;
      for (int v = 0; v < vocab; ++v) {
        const double g = (std::exp(ps[static_cast<std::size_t>(v)]) -
                          std::exp(pt[static_cast<std::size_t>(v)])) *
                         inv_count;
        drow[static_cast<std::size_t>(v)] =
            static_cast<Real>(static_cast<double>(drow[static_cast<std::size_t>(v)]) + g);
      }
    }
    backward_tokens(m, item.tokens, &prefix, tape, std::span<const Real>(dlogits), &res.grads,
                    want_weight_grads ? &*res.weight_grads : nullptr);
  }
  res.loss = loss_sum * inv_count;
  return res;
}

namespace detail {

template <typename Real>
void for_each_tensor(FrozenModel<Real>& m, WeightGrads<Real>& g,
                     const std::function<void(std::span<Real>, std::span<const Real>)>& fn) {
  fn(std::span<Real>(m.tok_embed), std::span<const Real>(g.tok_embed));
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    auto& lw = m.layers[l];
    auto& lg = g.layers[l];
    fn(std::span<Real>(lw.attn_norm_gain), std::span<const Real>(lg.attn_norm_gain));
    fn(std::span<Real>(lw.wq), std::span<const Real>(lg.wq));
    fn(std::span<Real>(lw.wk), std::span<const Real>(lg.wk));
    fn(std::span<Real>(lw.wv), std::span<const Real>(lg.wv));
    fn(std::span<Real>(lw.wo), std::span<const Real>(lg.wo));
    fn(std::span<Real>(lw.mlp_norm_gain), std::span<const Real>(lg.mlp_norm_gain));
    fn(std::span<Real>(lw.w_up), std::span<const Real>(lg.w_up));
    fn(std::span<Real>(lw.w_down), std::span<const Real>(lg.w_down));
  }
  fn(std::span<Real>(m.final_norm_gain), std::span<const Real>(g.final_norm_gain));
  fn(std::span<Real>(m.out_proj), std::span<const Real>(g.out_proj));
}

}  // namespace detail

template <typename Real>
std::size_t total_weight_count(const ModelConfig& cfg) {
  const auto d = static_cast<std::size_t>(cfg.model_dim);
  const auto f = static_cast<std::size_t>(cfg.mlp_hidden);
  const auto v = static_cast<std::size_t>(cfg.vocab_size);
  const auto per_layer = 2 * d + 4 * d * d + 2 * f * d;
  return v * d + static_cast<std::size_t>(cfg.num_layers) * per_layer + d + v * d;
}

template <typename Real>
std::string weights_digest(const FrozenModel<Real>& m) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](std::span<const Real> xs) {
    const auto* bytes = reinterpret_cast<const std::uint8_t*>(xs.data());
    for (std::size_t i = 0; i < xs.size() * sizeof(Real); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  mix(std::span<const Real>(m.tok_embed));
  for (const auto& l : m.layers) {
    mix(std::span<const Real>(l.attn_norm_gain));
    mix(std::span<const Real>(l.wq));
    mix(std::span<const Real>(l.wk));
    mix(std::span<const Real>(l.wv));
    mix(std::span<const Real>(l.wo));
    mix(std::span<const Real>(l.mlp_norm_gain));
    mix(std::span<const Real>(l.w_up));
    mix(std::span<const Real>(l.w_down));
  }
  mix(std::span<const Real>(m.final_norm_gain));
  mix(std::span<const Real>(m.out_proj));
  return hex64(h);
}

// Cross-entropy next-token loss over a batch of windows with full weight
// gradients; the pre-training path that gives the frozen model its prior.
template <typename Real>
double cross_entropy_backward(const FrozenModel<Real>& m,
                              std::span<const std::vector<TokenId>> batch, WeightGrads<Real>& wg) {
  const int vocab = m.cfg.vocab_size;
  std::size_t count = 0;
  for (const auto& seq : batch) {
    require(seq.size() >= 2, "cross_entropy_backward: sequences need >= 2 tokens");
    count += seq.size() - 1;
  }
  require(count >= 1, "cross_entropy_backward: empty batch");
  const double inv_count = 1.0 / static_cast<double>(count);

  Tape<Real> tape;
  double loss = 0.0;
  std::vector<double> lp(static_cast<std::size_t>(vocab));
  for (const auto& seq : batch) {
    auto fwd = forward_tokens(m, std::span<const TokenId>(seq),
                              static_cast<const PrefixKV<Real>*>(nullptr), false, &tape);
    const int n = tape.n;
    std::vector<Real> dlogits(static_cast<std::size_t>(n) * vocab, Real(0));
    for (int i = 0; i + 1 < n; ++i) {
      std::span<const Real> row(fwd.logits.data() + static_cast<std::size_t>(i) * vocab,
                                static_cast<std::size_t>(vocab));
      numerics::log_softmax(row, std::span<double>(lp));
      const auto target = static_cast<std::size_t>(seq[static_cast<std::size_t>(i) + 1]);
      loss -= lp[target] * inv_count;
      Real* drow = dlogits.data() + static_cast<std::size_t>(i) * vocab;
      for (int v = 0; v < vocab; ++v) {
        double g = std::exp(lp[static_cast<std::size_t>(v)]);
        if (static_cast<std::size_t>(v) == target) {
          g -= 1.0;
        }
        drow[static_cast<std::size_t>(v)] = static_cast<Real>(g * inv_count);
      }
    }
    backward_tokens(m, std::span<const TokenId>(seq), static_cast<const PrefixKV<Real>*>(nullptr),
                    tape, std::span<const Real>(dlogits), static_cast<CartridgeGrads<Real>*>(nullptr),
                    &wg);
  }
  return loss;
}

// Owns the only mutable phase of a FrozenModel's life; weights are immutable
// once pre-training ends.
template <typename Real>
class Pretrainer {
 public:
  Pretrainer(FrozenModel<Real>& m, optim::AdamConfig cfg)
      : model_(m), cfg_(cfg), adam_(total_weight_count<Real>(m.cfg)) {}

  optim::AdamConfig& config() { return cfg_; }

  double step(std::span<const std::vector<TokenId>> batch) {
    WeightGrads<Real> wg;
    wg.init(model_.cfg);
    const double loss = cross_entropy_backward(model_, batch, wg);
    adam_.begin_step();
    std::size_t offset = 0;
    detail::for_each_tensor<Real>(model_, wg, [&](std::span<Real> p, std::span<const Real> g) {
      adam_.update(offset, p, g, cfg_);
      offset += p.size();
    });
    return loss;
  }

 private:
  FrozenModel<Real>& model_;
  optim::AdamConfig cfg_;
  optim::AdamState adam_;
};

// Incremental decoding against a fixed base cache (shared, read-only).
template <typename Real>
class DecodeSession {
 public:
  DecodeSession(const FrozenModel<Real>& m, const std::vector<LayerKVCache<Real>>* base)
      : model_(m), base_(base), rope_(m.cfg.head_dim, m.cfg.rope_base) {
    base_n_ = 0;
    if (base_ != nullptr && !base_->empty()) {
      require(static_cast<int>(base_->size()) == m.cfg.num_layers,
              "DecodeSession: base cache layer count mismatch");
      base_n_ = (*base_)[0].n;
    }
    local_k_.assign(static_cast<std::size_t>(m.cfg.num_layers), {});
    local_v_.assign(static_cast<std::size_t>(m.cfg.num_layers), {});
  }

  int position() const { return base_n_ + local_n_; }

  // Appends one token and returns the logits predicting its successor.
  std::vector<Real> step(TokenId tok) {
    const ModelConfig& cfg = model_.cfg;
    require(tok >= 0 && tok < cfg.vocab_size, "DecodeSession: token id out of range");
    if (position() + 1 > cfg.max_positions) {
      throw CapacityError("DecodeSession: context is full");
    }
    const int d = cfg.model_dim;
    const int heads = cfg.num_heads;
    const int dh = cfg.head_dim;
    const int hidden = cfg.mlp_hidden;
    const int pos = position();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    std::vector<Real> x(static_cast<std::size_t>(d));
    const Real* emb = model_.tok_embed.data() + static_cast<std::size_t>(tok) * d;
    std::copy(emb, emb + d, x.data());

    std::vector<Real> normed(static_cast<std::size_t>(d));
    std::vector<Real> proj(static_cast<std::size_t>(d));
    std::vector<Real> qh(static_cast<std::size_t>(heads) * dh);
    std::vector<Real> pre(static_cast<std::size_t>(hidden));
    Real inv_rms = Real(0);

    for (int layer = 0; layer < cfg.num_layers; ++layer) {
      const LayerWeights<Real>& lw = model_.layers[static_cast<std::size_t>(layer)];
      auto& lk = local_k_[static_cast<std::size_t>(layer)];
      auto& lv = local_v_[static_cast<std::size_t>(layer)];

      detail::rmsnorm_row(x.data(), lw.attn_norm_gain.data(), normed.data(), &inv_rms, d);

      detail::matvec(lw.wq.data(), normed.data(), proj.data(), d, d);
      for (int hh = 0; hh < heads; ++hh) {
        Real* dst = qh.data() + static_cast<std::size_t>(hh) * dh;
        std::copy(proj.data() + static_cast<std::size_t>(hh) * dh,
                  proj.data() + static_cast<std::size_t>(hh) * dh + dh, dst);
        rope_.rotate(dst, pos);
      }
      detail::matvec(lw.wk.data(), normed.data(), proj.data(), d, d);
      const std::size_t slot = lk.size();
      lk.resize(slot + static_cast<std::size_t>(heads) * dh);
      lv.resize(slot + static_cast<std::size_t>(heads) * dh);
      for (int hh = 0; hh < heads; ++hh) {
        Real* dst = lk.data() + slot + static_cast<std::size_t>(hh) * dh;
        std::copy(proj.data() + static_cast<std::size_t>(hh) * dh,
                  proj.data() + static_cast<std::size_t>(hh) * dh + dh, dst);
        rope_.rotate(dst, pos);
      }
      detail::matvec(lw.wv.data(), normed.data(), proj.data(), d, d);
      std::copy(proj.data(), proj.data() + static_cast<std::size_t>(heads) * dh, lv.data() + slot);

      const LayerKVCache<Real>* bc = base_ != nullptr && !base_->empty()
                                         ? &(*base_)[static_cast<std::size_t>(layer)]
                                         : nullptr;
      const int n_local = static_cast<int>(lk.size() / (static_cast<std::size_t>(heads) * dh));
      const int m_kv = base_n_ + n_local;
      std::vector<double> scores(static_cast<std::size_t>(m_kv));
      for (int hh = 0; hh < heads; ++hh) {
        const Real* qv = qh.data() + static_cast<std::size_t>(hh) * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < m_kv; ++j) {
          const Real* kj = j < base_n_
                               ? bc->keys.data() + (static_cast<std::size_t>(hh) * base_n_ + j) * dh
                               : lk.data() + (static_cast<std::size_t>(j - base_n_) * heads + hh) * dh;
          double dot = 0.0;
          for (int t = 0; t < dh; ++t) {
            dot += static_cast<double>(qv[t]) * static_cast<double>(kj[t]);
          }
          scores[static_cast<std::size_t>(j)] = dot * scale;
          mx = std::max(mx, scores[static_cast<std::size_t>(j)]);
        }
        double denom = 0.0;
        for (int j = 0; j < m_kv; ++j) {
          scores[static_cast<std::size_t>(j)] = std::exp(scores[static_cast<std::size_t>(j)] - mx);
          denom += scores[static_cast<std::size_t>(j)];
        }
        std::array<double, 256> acc{};
        for (int j = 0; j < m_kv; ++j) {
          const double a = scores[static_cast<std::size_t>(j)] / denom;
          const Real* vj = j < base_n_
                               ? bc->values.data() + (static_cast<std::size_t>(hh) * base_n_ + j) * dh
                               : lv.data() + (static_cast<std::size_t>(j - base_n_) * heads + hh) * dh;
          for (int t = 0; t < dh; ++t) {
            acc[static_cast<std::size_t>(t)] += a * static_cast<double>(vj[t]);
          }
        }
        for (int t = 0; t < dh; ++t) {
          proj[static_cast<std::size_t>(hh) * dh + t] = static_cast<Real>(acc[static_cast<std::size_t>(t)]);
        }
      }
      std::vector<Real> attn_out(static_cast<std::size_t>(d));
      detail::matvec(lw.wo.data(), proj.data(), attn_out.data(), d, d);
      for (int t = 0; t < d; ++t) {
        x[static_cast<std::size_t>(t)] = static_cast<Real>(static_cast<double>(x[static_cast<std::size_t>(t)]) +
                                                           static_cast<double>(attn_out[static_cast<std::size_t>(t)]));
      }

      detail::rmsnorm_row(x.data(), lw.mlp_norm_gain.data(), normed.data(), &inv_rms, d);
      detail::matvec(lw.w_up.data(), normed.data(), pre.data(), hidden, d);
      for (int f = 0; f < hidden; ++f) {
        pre[static_cast<std::size_t>(f)] = static_cast<Real>(detail::gelu(pre[static_cast<std::size_t>(f)]));
      }
      detail::matvec(lw.w_down.data(), pre.data(), attn_out.data(), d, hidden);
      for (int t = 0; t < d; ++t) {
        x[static_cast<std::size_t>(t)] = static_cast<Real>(static_cast<double>(x[static_cast<std::size_t>(t)]) +
                                                           static_cast<double>(attn_out[static_cast<std::size_t>(t)]));
      }
    }

    detail::rmsnorm_row(x.data(), model_.final_norm_gain.data(), normed.data(), &inv_rms, d);
    std::vector<Real> logits(static_cast<std::size_t>(cfg.vocab_size));
    detail::matvec(model_.out_proj.data(), normed.data(), logits.data(), cfg.vocab_size, d);
    ++local_n_;
    return logits;
  }

 private:
  const FrozenModel<Real>& model_;
  const std::vector<LayerKVCache<Real>>* base_;
  detail::RopeTable rope_;
  int base_n_ = 0;
  int local_n_ = 0;
  std::vector<std::vector<Real>> local_k_, local_v_;  // per layer, [n_local, h, dh]
};

}  // namespace clab::model
