#pragma once

// Checkpoint file (little-endian):
//   "TSVM" | u32 version=1 | config: 8 x u32 (L, C, L_p, m, h, B, d_MLP, N_c),
//   2 x f32 (d_e, d_p), 2 x u32 flags (position embedding, post-embedding
//   dropout) | u8 length + RNG algorithm name | u64 seed |
//   every learnable array in ModelParams order as raw float32.

#include <filesystem>
#include <optional>
#include <string>

#include "tsvit/binary_io.hpp"
#include "tsvit/counting.hpp"
#include "tsvit/model.hpp"
#include "tsvit/rng.hpp"

namespace tsvit {

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void write_config(io::Writer& w, const TsvitConfig& c) {
  for (std::uint32_t v : {c.signal_length, c.channels, c.patch_length, c.embed_dim, c.heads, c.blocks, c.mlp_dim,
                          c.num_classes}) {
    w.u32(v);
  }
  w.f32(c.encoder_dropout);
  w.f32(c.embedding_dropout);
  w.u32(c.use_position_embedding ? 1 : 0);
  w.u32(c.use_post_embedding_dropout ? 1 : 0);
}

inline TsvitConfig read_config(io::Reader& r) {
  TsvitConfig c;
  for (std::uint32_t* f : {&c.signal_length, &c.channels, &c.patch_length, &c.embed_dim, &c.heads, &c.blocks,
                           &c.mlp_dim, &c.num_classes}) {
    *f = r.u32();
  }
  c.encoder_dropout = r.f32();
  c.embedding_dropout = r.f32();
  c.use_position_embedding = r.u32() != 0;
  c.use_post_embedding_dropout = r.u32() != 0;
  return c;
}

}  // namespace detail

inline std::string encode_checkpoint(const TsvitModel<float>& model) {
  io::Writer w;
  w.bytes("TSVM");
  w.u32(kCheckpointVersion);
  detail::write_config(w, model.config);
  w.u8(static_cast<std::uint8_t>(Rng::algorithm.size()));
  w.bytes(Rng::algorithm);
  w.u64(model.seed);
  model.params.for_each([&](const std::string&, const Tensor& t) { w.f32s(t.data()); });
  return w.buffer();
}

inline void save_checkpoint(const TsvitModel<float>& model, const std::filesystem::path& path) {
  io::Writer w;
  w.bytes(encode_checkpoint(model));
  w.save(path);
}

/// Loads a checkpoint. With `expected`, any difference between the stored
/// configuration and the expected one is a shape_mismatch error.
inline TsvitModel<float> load_checkpoint(const std::filesystem::path& path,
                                         const std::optional<TsvitConfig>& expected = std::nullopt) {
  auto r = io::Reader::open(path);
  r.expect_magic("TSVM");
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError(FormatError::Kind::bad_version,
                      r.source() + ": unsupported checkpoint version " + std::to_string(version));
  }
  TsvitConfig cfg = detail::read_config(r);
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw FormatError(FormatError::Kind::invalid_value, r.source() + ": " + e.what());
  }
  if (expected && !(*expected == cfg)) {
    std::string what = r.source() + ": checkpoint configuration does not match the requested one";
    if (expected->num_classes != cfg.num_classes) {
      what += " (N_c " + std::to_string(cfg.num_classes) + " vs " + std::to_string(expected->num_classes) + ")";
    }
    throw FormatError(FormatError::Kind::shape_mismatch, what);
  }
  const std::string algo = r.bytes(r.u8());
  if (algo != Rng::algorithm) {
    throw FormatError(FormatError::Kind::invalid_value, r.source() + ": unknown RNG algorithm '" + algo + "'");
  }
  const std::uint64_t seed = r.u64();
  if (r.remaining() < count_params(cfg) * sizeof(float)) {
    throw FormatError(FormatError::Kind::truncated, r.source() + ": weight payload is shorter than the configuration requires");
  }
  TsvitModel<float> model{cfg, ModelParams<float>::zeros(cfg), ModelParams<float>::zeros(cfg), seed};
  model.params.for_each([&](const std::string&, Tensor& t) { r.f32s(t.data()); });
  r.expect_end();
  return model;
}

}  // namespace tsvit
