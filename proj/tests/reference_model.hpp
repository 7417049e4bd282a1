// Straight-line reference interpreter for the decoder architecture.
//
// Re-derives every operation from the architecture definition (pre-norm RMS
// blocks, rotary q/k, erf-GELU MLP, causal attention, untied head) using plain
// nested vectors and per-position loops. Shares only the weight container with
// the library; none of its computation code.
#pragma once

#include <cmath>
#include <vector>

#include "clab/model.hpp"

namespace refmodel {

using Mat = std::vector<std::vector<double>>;

inline std::vector<double> ref_rmsnorm(const std::vector<double>& x, const std::vector<double>& g) {
  double ms = 0.0;
  for (double v : x) ms += v * v;
  ms /= static_cast<double>(x.size());
  const double inv = 1.0 / std::sqrt(ms + 1e-5);
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * g[i] * inv;
  return y;
}

inline std::vector<double> ref_matvec(const std::vector<double>& w, const std::vector<double>& x,
                                      std::size_t out) {
  const std::size_t in = x.size();
  std::vector<double> y(out, 0.0);
  for (std::size_t o = 0; o < out; ++o) {
    for (std::size_t i = 0; i < in; ++i) {
      y[o] += w[o * in + i] * x[i];
    }
  }
  return y;
}

inline void ref_rope(std::vector<double>& v, std::size_t head_offset, int dh, int pos, double base) {
  for (int t = 0; t < dh / 2; ++t) {
    const double angle = pos * std::pow(base, -2.0 * t / dh);
    const double a = v[head_offset + 2 * t];
    const double b = v[head_offset + 2 * t + 1];
    v[head_offset + 2 * t] = a * std::cos(angle) - b * std::sin(angle);
    v[head_offset + 2 * t + 1] = a * std::sin(angle) + b * std::cos(angle);
  }
}

inline double ref_gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

// Full-context logits, [n][V].
inline Mat interpret(const clab::model::FrozenModel<double>& m,
                     const std::vector<clab::TokenId>& tokens) {
  const auto& cfg = m.cfg;
  const std::size_t n = tokens.size();
  const auto d = static_cast<std::size_t>(cfg.model_dim);
  const auto dh = cfg.head_dim;
  const auto heads = cfg.num_heads;

  Mat x(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i].assign(m.tok_embed.begin() + static_cast<std::ptrdiff_t>(tokens[i] * cfg.model_dim),
                m.tok_embed.begin() + static_cast<std::ptrdiff_t>((tokens[i] + 1) * cfg.model_dim));
  }

  for (int layer = 0; layer < cfg.num_layers; ++layer) {
    const auto& lw = m.layers[static_cast<std::size_t>(layer)];
    Mat q(n), k(n), v(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto normed = ref_rmsnorm(x[i], std::vector<double>(lw.attn_norm_gain.begin(),
                                                                lw.attn_norm_gain.end()));
      q[i] = ref_matvec(lw.wq, normed, d);
      k[i] = ref_matvec(lw.wk, normed, d);
      v[i] = ref_matvec(lw.wv, normed, d);
      for (int hh = 0; hh < heads; ++hh) {
        ref_rope(q[i], static_cast<std::size_t>(hh * dh), dh, static_cast<int>(i), cfg.rope_base);
        ref_rope(k[i], static_cast<std::size_t>(hh * dh), dh, static_cast<int>(i), cfg.rope_base);
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> merged(d, 0.0);
      for (int hh = 0; hh < heads; ++hh) {
        const std::size_t off = static_cast<std::size_t>(hh * dh);
        std::vector<double> scores(i + 1);
        double mx = -1e300;
        for (std::size_t j = 0; j <= i; ++j) {
          double dot = 0.0;
          for (int t = 0; t < dh; ++t) dot += q[i][off + static_cast<std::size_t>(t)] * k[j][off + static_cast<std::size_t>(t)];
          scores[j] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, scores[j]);
        }
        double denom = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          denom += scores[j];
        }
        for (std::size_t j = 0; j <= i; ++j) {
          const double a = scores[j] / denom;
          for (int t = 0; t < dh; ++t) merged[off + static_cast<std::size_t>(t)] += a * v[j][off + static_cast<std::size_t>(t)];
        }
      }
      const auto attn = ref_matvec(lw.wo, merged, d);
      for (std::size_t t = 0; t < d; ++t) x[i][t] += attn[t];
    }
    for (std::size_t i = 0; i < n; ++i) {
      const auto normed = ref_rmsnorm(x[i], std::vector<double>(lw.mlp_norm_gain.begin(),
                                                                lw.mlp_norm_gain.end()));
      auto hid = ref_matvec(lw.w_up, normed, static_cast<std::size_t>(cfg.mlp_hidden));
      for (double& u : hid) u = ref_gelu(u);
      const auto down = ref_matvec(lw.w_down, hid, d);
      for (std::size_t t = 0; t < d; ++t) x[i][t] += down[t];
    }
  }

  Mat logits(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto fn = ref_rmsnorm(x[i], std::vector<double>(m.final_norm_gain.begin(),
                                                          m.final_norm_gain.end()));
    logits[i] = ref_matvec(m.out_proj, fn, static_cast<std::size_t>(cfg.vocab_size));
  }
  return logits;
}

}  // namespace refmodel
