// On-disk formats: "CLAB" model weights and "CRTG" cartridges, both
// little-endian with 32-bit float tensors, plus JSON sidecars/metadata.
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "clab/cartridge.hpp"
#include "clab/core.hpp"
#include "clab/io.hpp"
#include "clab/model.hpp"
#include "json.hpp"

namespace clab::serialize {

constexpr std::uint32_t kModelVersion = 1;
constexpr std::uint32_t kCartridgeVersion = 1;
constexpr std::uint32_t kDtypeF32 = 0;

inline nlohmann::json config_json(const model::ModelConfig& cfg) {
  return nlohmann::json{{"num_layers", cfg.num_layers},     {"num_heads", cfg.num_heads},
                        {"head_dim", cfg.head_dim},         {"model_dim", cfg.model_dim},
                        {"vocab_size", cfg.vocab_size},     {"max_positions", cfg.max_positions},
                        {"mlp_hidden", cfg.mlp_hidden},     {"rope_base", cfg.rope_base}};
}

inline model::ModelConfig config_from_json(const nlohmann::json& j) {
  model::ModelConfig cfg;
  cfg.num_layers = j.at("num_layers").get<int>();
  cfg.num_heads = j.at("num_heads").get<int>();
  cfg.head_dim = j.at("head_dim").get<int>();
  cfg.model_dim = j.at("model_dim").get<int>();
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.max_positions = j.at("max_positions").get<int>();
  cfg.mlp_hidden = j.at("mlp_hidden").get<int>();
  cfg.rope_base = j.at("rope_base").get<double>();
  cfg.validate();
  return cfg;
}

inline void save_model(const model::FrozenModel<float>& m, const std::filesystem::path& path) {
  io::ByteWriter w;
  w.raw(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>("CLAB"), 4));
  w.u32(kModelVersion);
  w.u32(static_cast<std::uint32_t>(m.cfg.num_layers));
  w.u32(static_cast<std::uint32_t>(m.cfg.num_heads));
  w.u32(static_cast<std::uint32_t>(m.cfg.head_dim));
  w.u32(static_cast<std::uint32_t>(m.cfg.model_dim));
  w.u32(static_cast<std::uint32_t>(m.cfg.vocab_size));
  w.u32(static_cast<std::uint32_t>(m.cfg.max_positions));
  w.u32(static_cast<std::uint32_t>(m.cfg.mlp_hidden));
  w.f64(m.cfg.rope_base);
  w.u64(m.init_seed);
  w.f32_span(m.tok_embed);
  for (const auto& l : m.layers) {
    w.f32_span(l.attn_norm_gain);
    w.f32_span(l.wq);
    w.f32_span(l.wk);
    w.f32_span(l.wv);
    w.f32_span(l.wo);
    w.f32_span(l.mlp_norm_gain);
    w.f32_span(l.w_up);
    w.f32_span(l.w_down);
  }
  w.f32_span(m.final_norm_gain);
  w.f32_span(m.out_proj);
  io::write_file(path, w.bytes());

  nlohmann::json sidecar{{"format", "CLAB"},
                         {"format_version", kModelVersion},
                         {"config", config_json(m.cfg)},
                         {"seed", m.init_seed}};
  io::write_text(path.string() + ".json", sidecar.dump(2) + "\n");
}

inline model::FrozenModel<float> load_model(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::ByteReader r(bytes);
  const auto magic = r.raw(4);
  if (std::string(magic.begin(), magic.end()) != "CLAB") {
    throw FormatError("not a model file (bad magic): " + path.string());
  }
  const auto version = r.u32();
  if (version != kModelVersion) {
    throw UnsupportedVersionError("unsupported model format version " + std::to_string(version));
  }
  model::FrozenModel<float> m;
  m.cfg.num_layers = static_cast<int>(r.u32());
  m.cfg.num_heads = static_cast<int>(r.u32());
  m.cfg.head_dim = static_cast<int>(r.u32());
  m.cfg.model_dim = static_cast<int>(r.u32());
  m.cfg.vocab_size = static_cast<int>(r.u32());
  m.cfg.max_positions = static_cast<int>(r.u32());
  m.cfg.mlp_hidden = static_cast<int>(r.u32());
  m.cfg.rope_base = r.f64();
  m.init_seed = r.u64();
  m.cfg.validate();
  const auto d = static_cast<std::size_t>(m.cfg.model_dim);
  const auto f = static_cast<std::size_t>(m.cfg.mlp_hidden);
  const auto v = static_cast<std::size_t>(m.cfg.vocab_size);
  auto read_tensor = [&](std::vector<float>& t, std::size_t size) {
    t.resize(size);
    r.f32_into(t);
  };
  read_tensor(m.tok_embed, v * d);
  m.layers.resize(static_cast<std::size_t>(m.cfg.num_layers));
  for (auto& l : m.layers) {
    read_tensor(l.attn_norm_gain, d);
    read_tensor(l.wq, d * d);
    read_tensor(l.wk, d * d);
    read_tensor(l.wv, d * d);
    read_tensor(l.wo, d * d);
    read_tensor(l.mlp_norm_gain, d);
    read_tensor(l.w_up, f * d);
    read_tensor(l.w_down, d * f);
  }
  read_tensor(m.final_norm_gain, d);
  read_tensor(m.out_proj, v * d);
  if (r.remaining() != 0) {
    throw FormatError("trailing bytes in model file: " + path.string());
  }
  return m;
}

inline nlohmann::json meta_json(const cartridge::CartridgeMeta& meta) {
  nlohmann::json j{{"p", meta.p},
                   {"init_scheme", cartridge::to_string(meta.scheme)},
                   {"seed", meta.seed},
                   {"corpus_digest", meta.corpus_digest},
                   {"training_steps", meta.training_steps},
                   {"sorted_offsets", meta.sorted_offsets},
                   {"parents", meta.parents}};
  if (meta.scheme == cartridge::InitScheme::sci) {
    j["chunk_size"] = meta.chunk_size;
  }
  return j;
}

inline cartridge::CartridgeMeta meta_from_json(const nlohmann::json& j) {
  cartridge::CartridgeMeta meta;
  meta.p = j.at("p").get<int>();
  meta.scheme = cartridge::init_scheme_from_string(j.at("init_scheme").get<std::string>());
  meta.chunk_size = j.value("chunk_size", 0);
  meta.seed = j.at("seed").get<std::uint64_t>();
  meta.corpus_digest = j.at("corpus_digest").get<std::string>();
  meta.training_steps = j.at("training_steps").get<std::int64_t>();
  meta.sorted_offsets = j.value("sorted_offsets", false);
  meta.parents = j.value("parents", std::vector<std::string>{});
  return meta;
}

inline void save_cartridge(const cartridge::Cartridge<float>& c, const std::filesystem::path& path) {
  c.validate();
  io::ByteWriter w;
  w.raw(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>("CRTG"), 4));
  w.u32(kCartridgeVersion);
  w.u32(static_cast<std::uint32_t>(c.num_layers));
  w.u32(static_cast<std::uint32_t>(c.num_heads));
  w.u32(static_cast<std::uint32_t>(c.p));
  w.u32(static_cast<std::uint32_t>(c.head_dim));
  w.u32(kDtypeF32);
  w.f32_span(c.keys);
  w.f32_span(c.values);
  const std::string meta = meta_json(c.meta).dump();
  w.u32(static_cast<std::uint32_t>(meta.size()));
  w.raw(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(meta.data()), meta.size()));
  io::write_file(path, w.bytes());
}

inline cartridge::Cartridge<float> load_cartridge(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::ByteReader r(bytes);
  const auto magic = r.raw(4);
  if (std::string(magic.begin(), magic.end()) != "CRTG") {
    throw FormatError("not a cartridge file (bad magic): " + path.string());
  }
  const auto version = r.u32();
  if (version != kCartridgeVersion) {
    throw UnsupportedVersionError("unsupported cartridge format version " + std::to_string(version));
  }
  cartridge::Cartridge<float> c;
  c.num_layers = static_cast<int>(r.u32());
  c.num_heads = static_cast<int>(r.u32());
  c.p = static_cast<int>(r.u32());
  c.head_dim = static_cast<int>(r.u32());
  const auto dtype = r.u32();
  if (dtype != kDtypeF32) {
    throw FormatError("unsupported cartridge dtype tag " + std::to_string(dtype));
  }
  c.keys.resize(c.plane_size());
  c.values.resize(c.plane_size());
  r.f32_into(c.keys);
  r.f32_into(c.values);
  const auto meta_len = r.u32();
  const auto meta_bytes = r.raw(meta_len);
  if (r.remaining() != 0) {
    throw FormatError("trailing bytes in cartridge file: " + path.string());
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(meta_bytes.begin(), meta_bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("cartridge meta block is not valid JSON: ") + e.what());
  }
  c.meta = meta_from_json(j);
  c.validate();
  return c;
}

}  // namespace clab::serialize
