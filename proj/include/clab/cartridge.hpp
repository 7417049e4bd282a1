// Trainable KV prefixes: the Cartridge type, its initialization schemes, and
// the key-swap construction used by the transfer ablation.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "clab/core.hpp"
#include "clab/model.hpp"
#include "clab/rng.hpp"

namespace clab::cartridge {

enum class InitScheme { rvi, first_k, sci };

inline std::string to_string(InitScheme s) {
  switch (s) {
    case InitScheme::rvi: return "rvi";
    case InitScheme::first_k: return "first_k";
    case InitScheme::sci: return "sci";
  }
  return "?";
}

inline InitScheme init_scheme_from_string(const std::string& s) {
  if (s == "rvi") return InitScheme::rvi;
  if (s == "first_k") return InitScheme::first_k;
  if (s == "sci") return InitScheme::sci;
  throw InvalidInputError("unknown init scheme: " + s);
}

struct CartridgeMeta {
  int p = 0;
  InitScheme scheme = InitScheme::rvi;
  int chunk_size = 0;  // SCI only
  std::uint64_t seed = 0;
  std::string corpus_digest;
  std::int64_t training_steps = 0;
  bool sorted_offsets = false;
  std::vector<std::string> parents;  // set by swap_keys
};

template <typename Real>
struct Cartridge {
  int num_layers = 0, num_heads = 0, p = 0, head_dim = 0;
  std::vector<Real> keys, values;  // [L, h, p, head_dim]
  CartridgeMeta meta;

  std::size_t plane_size() const {
    return static_cast<std::size_t>(num_layers) * num_heads * p * head_dim;
  }

  model::PrefixKV<Real> view() const {
    return model::PrefixKV<Real>{num_layers, num_heads, p, head_dim, keys.data(), values.data()};
  }

  std::size_t index(int layer, int head, int slot, int t) const {
    return ((static_cast<std::size_t>(layer) * num_heads + head) * p + slot) * head_dim + t;
  }

  void validate() const {
    require(num_layers >= 1 && num_heads >= 1 && p >= 1 && head_dim >= 1,
            "Cartridge: dims must be >= 1");
    require(keys.size() == plane_size() && values.size() == plane_size(),
            "Cartridge: tensor sizes do not match dims");
    require(all_finite(std::span<const Real>(keys)) && all_finite(std::span<const Real>(values)),
            "Cartridge: non-finite entries");
  }

  bool same_shape(const Cartridge& other) const {
    return num_layers == other.num_layers && num_heads == other.num_heads && p == other.p &&
           head_dim == other.head_dim;
  }
};

template <typename To, typename From>
Cartridge<To> convert(const Cartridge<From>& c) {
  Cartridge<To> out;
  out.num_layers = c.num_layers;
  out.num_heads = c.num_heads;
  out.p = c.p;
  out.head_dim = c.head_dim;
  out.keys.assign(c.keys.begin(), c.keys.end());
  out.values.assign(c.values.begin(), c.values.end());
  out.meta = c.meta;
  return out;
}

// I.i.d. Gaussian slots at attention scale (std 1/sqrt(head_dim)).
template <typename Real>
Cartridge<Real> init_rvi(const model::ModelConfig& cfg, int p, std::uint64_t seed) {
  cfg.validate();
  require(p >= 1, "init_rvi: p must be >= 1");
  Cartridge<Real> c;
  c.num_layers = cfg.num_layers;
  c.num_heads = cfg.num_heads;
  c.p = p;
  c.head_dim = cfg.head_dim;
  const double std = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim));
  Rng rng(seed);
  c.keys.resize(c.plane_size());
  c.values.resize(c.plane_size());
  for (auto& v : c.keys) {
    v = static_cast<Real>(std * rng.gaussian());
  }
  for (auto& v : c.values) {
    v = static_cast<Real>(std * rng.gaussian());
  }
  c.meta.p = p;
  c.meta.scheme = InitScheme::rvi;
  c.meta.seed = seed;
  return c;
}

namespace detail {

template <typename Real>
Cartridge<Real> from_caches(const std::vector<model::LayerKVCache<Real>>& caches) {
  Cartridge<Real> c;
  c.num_layers = static_cast<int>(caches.size());
  c.num_heads = caches[0].num_heads;
  c.p = caches[0].n;
  c.head_dim = caches[0].head_dim;
  for (const auto& layer : caches) {
    c.keys.insert(c.keys.end(), layer.keys.begin(), layer.keys.end());
    c.values.insert(c.values.end(), layer.values.begin(), layer.values.end());
  }
  return c;
}

}  // namespace detail

// Prefix = the model's own KV cache over the first p corpus tokens. With
// p = corpus length this reproduces full-context decoding exactly.
template <typename Real>
Cartridge<Real> init_first_k(const model::FrozenModel<Real>& m, std::span<const TokenId> corpus,
                             int p) {
  require(p >= 1, "init_first_k: p must be >= 1");
  require(static_cast<int>(corpus.size()) >= p, "init_first_k: corpus shorter than p");
  auto res = model::forward_full(m, corpus.subspan(0, static_cast<std::size_t>(p)));
  Cartridge<Real> c = detail::from_caches(res.caches);
  c.meta.p = p;
  c.meta.scheme = InitScheme::first_k;
  c.meta.corpus_digest = digest_tokens(corpus);
  return c;
}

// The initializer token sequence of Sampled Chunk Initialization: ceil(p/c)
// uniformly drawn chunk offsets (with replacement, draw order), concatenated
// and truncated to exactly p tokens.
inline TokenSeq sci_initializer_tokens(std::span<const TokenId> corpus, int p, int chunk_size,
                                       std::uint64_t seed, bool sorted_offsets = false,
                                       std::vector<int>* offsets_out = nullptr) {
  require(p >= 1, "sci: p must be >= 1");
  require(chunk_size >= 1, "sci: chunk size must be >= 1");
  if (static_cast<int>(corpus.size()) < chunk_size) {
    throw InvalidInputError("sci: corpus shorter than the chunk size");
  }
  const int n_chunks = (p + chunk_size - 1) / chunk_size;
  Rng rng(seed);
  std::vector<int> offsets(static_cast<std::size_t>(n_chunks));
  const auto span_max = static_cast<std::uint64_t>(corpus.size() - static_cast<std::size_t>(chunk_size) + 1);
  for (auto& o : offsets) {
    o = static_cast<int>(rng.below(span_max));
  }
  if (sorted_offsets) {
    std::sort(offsets.begin(), offsets.end());
  }
  TokenSeq init;
  init.reserve(static_cast<std::size_t>(n_chunks) * chunk_size);
  for (int o : offsets) {
    init.insert(init.end(), corpus.begin() + o, corpus.begin() + o + chunk_size);
  }
  init.resize(static_cast<std::size_t>(p));
  if (offsets_out != nullptr) {
    *offsets_out = std::move(offsets);
  }
  return init;
}

template <typename Real>
Cartridge<Real> init_sci(const model::FrozenModel<Real>& m, std::span<const TokenId> corpus, int p,
                         int chunk_size, std::uint64_t seed, bool sorted_offsets = false) {
  const TokenSeq init = sci_initializer_tokens(corpus, p, chunk_size, seed, sorted_offsets);
  auto res = model::forward_full(m, init);
  Cartridge<Real> c = detail::from_caches(res.caches);
  c.meta.p = p;
  c.meta.scheme = InitScheme::sci;
  c.meta.chunk_size = chunk_size;
  c.meta.seed = seed;
  c.meta.sorted_offsets = sorted_offsets;
  c.meta.corpus_digest = digest_tokens(corpus);
  return c;
}

// AblationCartridge: keys of B, values of A, bitwise.
template <typename Real>
Cartridge<Real> swap_keys(const Cartridge<Real>& value_source, const Cartridge<Real>& key_source) {
  require(value_source.same_shape(key_source), "swap_keys: shape mismatch");
  Cartridge<Real> out = value_source;
  out.keys = key_source.keys;
  out.meta.parents = {"values:" + to_string(value_source.meta.scheme) + ":" +
                          value_source.meta.corpus_digest,
                      "keys:" + to_string(key_source.meta.scheme) + ":" +
                          key_source.meta.corpus_digest};
  return out;
}

}  // namespace clab::cartridge
