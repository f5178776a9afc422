#pragma once

// Closed-form parameter and FLOP counts for a TSViT configuration.
//
// FLOP convention: one multiply-add = 2 FLOPs for matrix products; layer
// norm 5 ops/element, GELU 1 op/element, softmax 5 ops/element, bias adds
// 1 op/element. Counts are per forward pass of a single sample.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tsvit/model.hpp"

namespace tsvit {

inline std::uint64_t count_params(const TsvitConfig& cfg) {
  cfg.validate();
  const std::uint64_t m = cfg.embed_dim, d = cfg.mlp_dim, nc = cfg.num_classes;
  const std::uint64_t n = cfg.num_patches();
  const std::uint64_t patch = std::uint64_t{cfg.patch_length} * cfg.channels * m + m;
  const std::uint64_t block = 4 * (m * m + m) + 4 * m + (m * d + d) + (d * m + m);
  return patch + m + (n + 1) * m + cfg.blocks * block + 2 * m + (m * nc + nc);
}

/// Parameters of the MLPs, the embedding layer (patch convolution, class
/// token, position table) and the linear classifier only: attention
/// projections and layer norms are left out. This is the subset that tracks
/// the published per-configuration parameter column.
inline std::uint64_t count_params_paper_compatible(const TsvitConfig& cfg) {
  cfg.validate();
  const std::uint64_t m = cfg.embed_dim, d = cfg.mlp_dim, nc = cfg.num_classes;
  const std::uint64_t n = cfg.num_patches();
  const std::uint64_t embedding = std::uint64_t{cfg.patch_length} * cfg.channels * m + m + m + (n + 1) * m;
  const std::uint64_t mlp = cfg.blocks * ((m * d + d) + (d * m + m));
  return embedding + mlp + (m * nc + nc);
}

struct FlopBreakdown {
  // matrix products
  std::uint64_t patch_conv = 0;
  std::uint64_t qkv = 0;
  std::uint64_t scores = 0;
  std::uint64_t attn_values = 0;
  std::uint64_t out_proj = 0;
  std::uint64_t mlp = 0;
  std::uint64_t classifier = 0;
  // elementwise
  std::uint64_t layer_norm = 0;
  std::uint64_t gelu = 0;
  std::uint64_t softmax = 0;
  std::uint64_t bias = 0;

  std::uint64_t matmul_total() const { return patch_conv + qkv + scores + attn_values + out_proj + mlp + classifier; }
  std::uint64_t elementwise_total() const { return layer_norm + gelu + softmax + bias; }
  std::uint64_t total() const { return matmul_total() + elementwise_total(); }
  /// MLP and patch-convolution products only.
  std::uint64_t paper_compatible() const { return mlp + patch_conv; }

  std::vector<std::pair<std::string, std::uint64_t>> items() const {
    return {{"patch_conv", patch_conv}, {"qkv", qkv},         {"scores", scores},
            {"attn_values", attn_values}, {"out_proj", out_proj}, {"mlp", mlp},
            {"classifier", classifier}, {"layer_norm", layer_norm}, {"gelu", gelu},
            {"softmax", softmax},       {"bias", bias}};
  }
};

inline FlopBreakdown count_flops(const TsvitConfig& cfg) {
  cfg.validate();
  const std::uint64_t m = cfg.embed_dim, d = cfg.mlp_dim, nc = cfg.num_classes, h = cfg.heads, blocks = cfg.blocks;
  const std::uint64_t n = cfg.num_patches(), s = n + 1, lp = cfg.patch_length, c = cfg.channels;
  FlopBreakdown f;
  f.patch_conv = 2 * n * lp * c * m;
  f.qkv = blocks * 3 * 2 * s * m * m;
  f.scores = blocks * 2 * s * s * m;
  f.attn_values = blocks * 2 * s * s * m;
  f.out_proj = blocks * 2 * s * m * m;
  f.mlp = blocks * 2 * 2 * s * m * d;
  f.classifier = 2 * m * nc;
  f.layer_norm = 5 * (blocks * 2 * s * m + m);
  f.gelu = blocks * s * d;
  f.softmax = 5 * blocks * h * s * s;
  f.bias = n * m + blocks * (3 * s * m + s * m + s * d + s * m) + nc;
  return f;
}

}  // namespace tsvit
