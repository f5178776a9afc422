#pragma once

// The TSViT network: patch embedding, class token, position table, a stack
// of encoder blocks and the classification head, with the reverse pass.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tsvit/attention.hpp"
#include "tsvit/ops.hpp"
#include "tsvit/rng.hpp"
#include "tsvit/tensor.hpp"

namespace tsvit {

/// Structural hyperparameters. Field order is the checkpoint order.
struct TsvitConfig {
  std::uint32_t signal_length = 2048;  // L
  std::uint32_t channels = 1;          // C
  std::uint32_t patch_length = 32;     // L_p, also the convolution stride
  std::uint32_t embed_dim = 192;       // m
  std::uint32_t heads = 8;             // h
  std::uint32_t blocks = 8;            // B
  std::uint32_t mlp_dim = 768;         // d_MLP
  std::uint32_t num_classes = 10;      // N_c
  float encoder_dropout = 0.1f;        // d_e: after MSA, inside the MLP, before the classifier
  float embedding_dropout = 0.1f;      // d_p: after the position embedding
  bool use_position_embedding = true;
  bool use_post_embedding_dropout = true;

  std::size_t num_patches() const { return signal_length / patch_length; }
  std::size_t seq_len() const { return num_patches() + 1; }

  void validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("invalid model config: " + msg); };
    if (signal_length == 0 || channels == 0 || patch_length == 0 || embed_dim == 0 || heads == 0 || blocks == 0 ||
        mlp_dim == 0 || num_classes == 0) {
      fail("every extent (L, C, L_p, m, h, B, d_MLP, N_c) must be >= 1");
    }
    if (signal_length % patch_length != 0) {
      fail("L = " + std::to_string(signal_length) + " is not divisible by L_p = " + std::to_string(patch_length));
    }
    if (embed_dim % heads != 0) {
      fail("m = " + std::to_string(embed_dim) + " is not divisible by h = " + std::to_string(heads));
    }
    for (float p : {encoder_dropout, embedding_dropout}) {
      if (!(p >= 0.0f && p < 1.0f)) fail("dropout probabilities must be in [0, 1)");
    }
  }

  friend bool operator==(const TsvitConfig&, const TsvitConfig&) = default;
};

template <typename T>
struct BlockWeights {
  MsaWeights<T> msa;
  BasicTensor<T> ln_attn_gamma, ln_attn_beta;
  BasicTensor<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  BasicTensor<T> ln_out_gamma, ln_out_beta;

  static BlockWeights zeros(const TsvitConfig& cfg) {
    const std::size_t m = cfg.embed_dim, d = cfg.mlp_dim;
    BlockWeights b;
    b.msa = MsaWeights<T>::zeros(m, cfg.heads);
    b.ln_attn_gamma = b.ln_attn_beta = b.ln_out_gamma = b.ln_out_beta = BasicTensor<T>({m});
    b.mlp_w1 = BasicTensor<T>({m, d});
    b.mlp_b1 = BasicTensor<T>({d});
    b.mlp_w2 = BasicTensor<T>({d, m});
    b.mlp_b2 = BasicTensor<T>({m});
    return b;
  }

  template <typename Self, typename F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    self.msa.for_each([&](const char* name, auto& t) { f(prefix + "msa." + name, t); });
    f(prefix + "ln_attn.gamma", self.ln_attn_gamma);
    f(prefix + "ln_attn.beta", self.ln_attn_beta);
    f(prefix + "mlp.w1", self.mlp_w1);
    f(prefix + "mlp.b1", self.mlp_b1);
    f(prefix + "mlp.w2", self.mlp_w2);
    f(prefix + "mlp.b2", self.mlp_b2);
    f(prefix + "ln_out.gamma", self.ln_out_gamma);
    f(prefix + "ln_out.beta", self.ln_out_beta);
  }
};

/// Every learnable array of the network. Also used for gradient and
/// optimizer-moment buffers, which mirror the parameter shapes.
template <typename T>
struct ModelParams {
  BasicTensor<T> patch_kernel;  // [(L_p*C) x m], row index = i*C + j within a patch
  BasicTensor<T> patch_bias;    // [m]
  BasicTensor<T> class_token;   // [1 x m]
  BasicTensor<T> pos;           // [(n+1) x m]
  std::vector<BlockWeights<T>> blocks;
  BasicTensor<T> ln_cls_gamma, ln_cls_beta;
  BasicTensor<T> w_class;  // [m x N_c]
  BasicTensor<T> b_class;  // [N_c]

  static ModelParams zeros(const TsvitConfig& cfg) {
    cfg.validate();
    const std::size_t m = cfg.embed_dim;
    ModelParams p;
    p.patch_kernel = BasicTensor<T>({std::size_t{cfg.patch_length} * cfg.channels, m});
    p.patch_bias = BasicTensor<T>({m});
    p.class_token = BasicTensor<T>({1, m});
    p.pos = BasicTensor<T>({cfg.seq_len(), m});
    for (std::uint32_t b = 0; b < cfg.blocks; ++b) p.blocks.push_back(BlockWeights<T>::zeros(cfg));
    p.ln_cls_gamma = p.ln_cls_beta = BasicTensor<T>({m});
    p.w_class = BasicTensor<T>({m, std::size_t{cfg.num_classes}});
    p.b_class = BasicTensor<T>({std::size_t{cfg.num_classes}});
    return p;
  }

  /// Visits (name, array) pairs in checkpoint order.
  template <typename F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

  std::size_t element_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const BasicTensor<T>& t) { n += t.size(); });
    return n;
  }

  std::uint64_t fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for_each([&](const std::string&, const BasicTensor<T>& t) { h = tsvit::fingerprint(h, t); });
    return h;
  }

  void fill(T value) {
    for_each([&](const std::string&, BasicTensor<T>& t) { t.fill(value); });
  }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    out.patch_kernel = patch_kernel.template cast<U>();
    out.patch_bias = patch_bias.template cast<U>();
    out.class_token = class_token.template cast<U>();
    out.pos = pos.template cast<U>();
    for (const auto& b : blocks) {
      BlockWeights<U> nb;
      nb.msa.heads = b.msa.heads;
      nb.msa.wq = b.msa.wq.template cast<U>();
      nb.msa.wk = b.msa.wk.template cast<U>();
      nb.msa.wv = b.msa.wv.template cast<U>();
      nb.msa.bq = b.msa.bq.template cast<U>();
      nb.msa.bk = b.msa.bk.template cast<U>();
      nb.msa.bv = b.msa.bv.template cast<U>();
      nb.msa.wo = b.msa.wo.template cast<U>();
      nb.msa.bo = b.msa.bo.template cast<U>();
      nb.ln_attn_gamma = b.ln_attn_gamma.template cast<U>();
      nb.ln_attn_beta = b.ln_attn_beta.template cast<U>();
      nb.mlp_w1 = b.mlp_w1.template cast<U>();
      nb.mlp_b1 = b.mlp_b1.template cast<U>();
      nb.mlp_w2 = b.mlp_w2.template cast<U>();
      nb.mlp_b2 = b.mlp_b2.template cast<U>();
      nb.ln_out_gamma = b.ln_out_gamma.template cast<U>();
      nb.ln_out_beta = b.ln_out_beta.template cast<U>();
      out.blocks.push_back(std::move(nb));
    }
    out.ln_cls_gamma = ln_cls_gamma.template cast<U>();
    out.ln_cls_beta = ln_cls_beta.template cast<U>();
    out.w_class = w_class.template cast<U>();
    out.b_class = b_class.template cast<U>();
    return out;
  }

 private:
  template <typename Self, typename F>
  static void visit(Self& self, F& f) {
    f(std::string("patch.kernel"), self.patch_kernel);
    f(std::string("patch.bias"), self.patch_bias);
    f(std::string("class_token"), self.class_token);
    f(std::string("pos"), self.pos);
    for (std::size_t b = 0; b < self.blocks.size(); ++b) {
      BlockWeights<T>::visit(self.blocks[b], "blocks." + std::to_string(b) + ".", f);
    }
    f(std::string("ln_cls.gamma"), self.ln_cls_gamma);
    f(std::string("ln_cls.beta"), self.ln_cls_beta);
    f(std::string("classifier.w"), self.w_class);
    f(std::string("classifier.b"), self.b_class);
  }
};

template <typename T>
struct TsvitModel {
  TsvitConfig config;
  ModelParams<T> params;
  ModelParams<T> grads;
  std::uint64_t seed = 0;  // seed the weights were initialized from

  void zero_grad() { grads.fill(T(0)); }

  template <typename U>
  TsvitModel<U> cast() const {
    return TsvitModel<U>{config, params.template cast<U>(), grads.template cast<U>(), seed};
  }
};

inline constexpr double kInitStddev = 0.02;

/// Weights and the position table ~ N(0, 0.02) truncated at +-2 sigma; biases,
/// LN betas and the class token zero; LN gammas one.
template <typename T = float>
TsvitModel<T> init_model(const TsvitConfig& cfg, Rng& rng) {
  cfg.validate();
  TsvitModel<T> model{cfg, ModelParams<T>::zeros(cfg), ModelParams<T>::zeros(cfg), rng.seed()};
  auto trunc = [&](BasicTensor<T>& t) {
    for (auto& v : t.data()) v = static_cast<T>(rng.truncated_normal(kInitStddev));
  };
  auto& p = model.params;
  trunc(p.patch_kernel);
  trunc(p.pos);
  for (auto& b : p.blocks) {
    for (auto* w : {&b.msa.wq, &b.msa.wk, &b.msa.wv, &b.msa.wo, &b.mlp_w1, &b.mlp_w2}) trunc(*w);
    b.ln_attn_gamma.fill(T(1));
    b.ln_out_gamma.fill(T(1));
  }
  p.ln_cls_gamma.fill(T(1));
  trunc(p.w_class);
  return model;
}

// ---------------------------------------------------------------------------
// Embedding layer

/// Stride-L_p convolution of each sample with m kernels of size L_p x C.
///
/// `signals` is [batch x L x C] (or [L x C] for one sample). Because samples
/// are channel-minor, patch p of sample b is the contiguous run of L_p*C
/// values starting at row (b*n + p) of the [batch*n x L_p*C] reshape, so the
/// convolution is one matrix product. Returns [batch*n x m].
template <typename T>
BasicTensor<T> patch_embed(const BasicTensor<T>& signals, const BasicTensor<T>& kernel, const BasicTensor<T>& bias,
                           const TsvitConfig& cfg) {
  const Shape& sh = signals.shape();
  const bool batched = sh.size() == 3;
  if (!(sh.size() == 2 || batched)) throw DimensionError("patch_embed: expected [L x C] or [batch x L x C]");
  const std::size_t length = sh[batched ? 1 : 0];
  const std::size_t channels = sh[batched ? 2 : 1];
  if (channels != cfg.channels) {
    throw DimensionError("patch_embed: signal has " + std::to_string(channels) + " channels, model expects " +
                         std::to_string(cfg.channels));
  }
  if (length % cfg.patch_length != 0) {
    throw DimensionError("patch_embed: length " + std::to_string(length) + " is not divisible by L_p = " +
                         std::to_string(cfg.patch_length));
  }
  if (length != cfg.signal_length) {
    throw DimensionError("patch_embed: signal length " + std::to_string(length) + " does not match L = " +
                         std::to_string(cfg.signal_length));
  }
  const std::size_t batch = batched ? sh[0] : 1;
  const std::size_t width = std::size_t{cfg.patch_length} * cfg.channels;
  expect_shape(kernel, {width, std::size_t{cfg.embed_dim}}, "patch kernel");
  BasicTensor<T> out({batch * cfg.num_patches(), std::size_t{cfg.embed_dim}});
  detail::gemm(false, false, out.rows(), out.cols(), width, signals.raw(), width, kernel.raw(), kernel.cols(), out.raw(),
               out.cols(), false);
  detail::add_row_bias(out, bias);
  return out;
}

template <typename T>
struct EmbedCache {
  BasicTensor<T> signals;  // [batch x L x C]
  BasicTensor<T> dropout_mask;
};

template <typename T>
struct EmbedResult {
  BasicTensor<T> tokens;  // [batch*(n+1) x m]
  EmbedCache<T> cache;
};

/// Patch embedding, class token prepended at row 0 of every sequence,
/// position table added, then dropout d_p (each step gated by its flag).
template <typename T>
EmbedResult<T> embed(const BasicTensor<T>& signals, const TsvitModel<T>& model, Rng& rng, bool training) {
  const auto& cfg = model.config;
  const auto& p = model.params;
  BasicTensor<T> pe = patch_embed(signals, p.patch_kernel, p.patch_bias, cfg);
  const std::size_t n = cfg.num_patches(), s = cfg.seq_len(), m = cfg.embed_dim;
  const std::size_t batch = pe.rows() / n;
  BasicTensor<T> tokens({batch * s, m});
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy_n(p.class_token.raw(), m, tokens.raw() + b * s * m);
    std::copy_n(pe.raw() + b * n * m, n * m, tokens.raw() + (b * s + 1) * m);
    if (cfg.use_position_embedding) {
      T* dst = tokens.raw() + b * s * m;
      for (std::size_t i = 0; i < s * m; ++i) dst[i] += p.pos[i];
    }
  }
  const double dp = cfg.use_post_embedding_dropout ? cfg.embedding_dropout : 0.0;
  auto drop = dropout(tokens, dp, rng, training);
  BasicTensor<T> sig = signals.rank() == 3 ? signals : signals.reshaped({1, signals.extent(0), signals.extent(1)});
  return {std::move(drop.output), {std::move(sig), std::move(drop.mask)}};
}

// ---------------------------------------------------------------------------
// Encoder block

template <typename T>
struct BlockCache {
  MsaCache<T> msa;
  BasicTensor<T> attn_mask;
  LayerNormCache<T> ln_attn;
  BasicTensor<T> z_mlr;   // input of the MLP
  BasicTensor<T> hidden;  // z_mlr W1 + b1, before GELU
  BasicTensor<T> gelu_mask;
  BasicTensor<T> gelu_dropped;  // input of W2
  BasicTensor<T> mlp_mask;
  LayerNormCache<T> ln_out;
};

template <typename T>
struct BlockResult {
  BasicTensor<T> output;
  BlockCache<T> cache;
};

/// One encoder block, in this operator order:
///   z_mlr = LN_attn(dropout(MSA(z))) + z
///   mlp   = dropout(dropout(GELU(z_mlr W1 + b1)) W2 + b2)
///   out   = LN_out(mlp + z_mlr)
template <typename T>
BlockResult<T> block_forward(const BasicTensor<T>& z, const BlockWeights<T>& w, Rng& rng, double drop_p, bool training,
                             std::size_t seq_len = 0) {
  BlockResult<T> res;
  auto& c = res.cache;
  auto attn = msa_forward(z, w.msa, seq_len);
  c.msa = std::move(attn.cache);
  auto d1 = dropout(attn.output, drop_p, rng, training);
  c.attn_mask = std::move(d1.mask);
  auto ln1 = layer_norm_forward(d1.output, w.ln_attn_gamma, w.ln_attn_beta);
  c.ln_attn = std::move(ln1.cache);
  c.z_mlr = std::move(ln1.output);
  detail::add_inplace(c.z_mlr, z);

  c.hidden = detail::matmul_t(c.z_mlr, false, w.mlp_w1, false);
  detail::add_row_bias(c.hidden, w.mlp_b1);
  auto d2 = dropout(gelu(c.hidden), drop_p, rng, training);
  c.gelu_mask = std::move(d2.mask);
  c.gelu_dropped = std::move(d2.output);
  BasicTensor<T> out = detail::matmul_t(c.gelu_dropped, false, w.mlp_w2, false);
  detail::add_row_bias(out, w.mlp_b2);
  auto d3 = dropout(out, drop_p, rng, training);
  c.mlp_mask = std::move(d3.mask);
  detail::add_inplace(d3.output, c.z_mlr);
  auto ln2 = layer_norm_forward(d3.output, w.ln_out_gamma, w.ln_out_beta);
  c.ln_out = std::move(ln2.cache);
  res.output = std::move(ln2.output);
  return res;
}

/// Accumulates into `grads`, returns d(z).
template <typename T>
BasicTensor<T> block_backward(const BlockCache<T>& c, const BlockWeights<T>& w, const BasicTensor<T>& d_out,
                              BlockWeights<T>& grads) {
  BasicTensor<T> d_sum = layer_norm_backward_into(c.ln_out, d_out, grads.ln_out_gamma, grads.ln_out_beta);
  BasicTensor<T> d_z_mlr = d_sum;
  BasicTensor<T> d_mlp = dropout_backward(DropoutCache<T>{c.mlp_mask}, d_sum);
  detail::matmul_accumulate(grads.mlp_w2, c.gelu_dropped, true, d_mlp, false);
  detail::accumulate_column_sums(grads.mlp_b2, d_mlp);
  BasicTensor<T> d_gelu = detail::matmul_t(d_mlp, false, w.mlp_w2, true);
  d_gelu = dropout_backward(DropoutCache<T>{c.gelu_mask}, d_gelu);
  BasicTensor<T> d_hidden = gelu_backward(GeluCache<T>{c.hidden}, d_gelu);
  detail::matmul_accumulate(grads.mlp_w1, c.z_mlr, true, d_hidden, false);
  detail::accumulate_column_sums(grads.mlp_b1, d_hidden);
  detail::matmul_accumulate(d_z_mlr, d_hidden, false, w.mlp_w1, true);

  BasicTensor<T> d_z = d_z_mlr;
  BasicTensor<T> d_attn = layer_norm_backward_into(c.ln_attn, d_z_mlr, grads.ln_attn_gamma, grads.ln_attn_beta);
  d_attn = dropout_backward(DropoutCache<T>{c.attn_mask}, d_attn);
  detail::add_inplace(d_z, detail::msa_backward_unchecked(c.msa, w.msa, d_attn, grads.msa));
  return d_z;
}

template <typename T>
struct EncoderResult {
  BasicTensor<T> output;
  std::vector<BasicTensor<T>> block_outputs;  // one per block, in order
  std::vector<BlockCache<T>> caches;
};

template <typename T>
EncoderResult<T> encoder_forward(const BasicTensor<T>& z0, const TsvitModel<T>& model, Rng& rng, bool training) {
  EncoderResult<T> res;
  const BasicTensor<T>* z = &z0;
  for (const auto& w : model.params.blocks) {
    auto out = block_forward(*z, w, rng, model.config.encoder_dropout, training, model.config.seq_len());
    res.block_outputs.push_back(std::move(out.output));
    res.caches.push_back(std::move(out.cache));
    z = &res.block_outputs.back();
  }
  res.output = res.block_outputs.back();
  return res;
}

// ---------------------------------------------------------------------------
// Classification head and loss

template <typename T>
struct ClassifyCache {
  LayerNormCache<T> ln;
  BasicTensor<T> dropout_mask;
  BasicTensor<T> features;  // LN + dropout output, input of W_class
};

template <typename T>
struct ClassifyResult {
  BasicTensor<T> logits;
  ClassifyCache<T> cache;
};

/// logits = dropout(LN(class-token rows)) W_class + b_class. Softmax is left
/// to cross_entropy_loss (training) and predict_proba (inference).
template <typename T>
ClassifyResult<T> classify_forward(const BasicTensor<T>& class_rows, const TsvitModel<T>& model, Rng& rng,
                                   bool training) {
  const auto& p = model.params;
  auto ln = layer_norm_forward(class_rows, p.ln_cls_gamma, p.ln_cls_beta);
  auto drop = dropout(ln.output, model.config.encoder_dropout, rng, training);
  ClassifyResult<T> res;
  res.logits = detail::matmul_t(drop.output, false, p.w_class, false);
  detail::add_row_bias(res.logits, p.b_class);
  res.cache = {std::move(ln.cache), std::move(drop.mask), std::move(drop.output)};
  return res;
}

template <typename T>
BasicTensor<T> predict_proba(const BasicTensor<T>& logits) {
  return softmax_rows(logits);
}

template <typename T>
struct LossResult {
  double loss = 0;
  BasicTensor<T> d_logits;
};

/// Mean over rows of logsumexp(logits_i) - logits_i[y_i]; gradient
/// (softmax - onehot) / batch.
template <typename T>
LossResult<T> cross_entropy_loss(const BasicTensor<T>& logits, std::span<const std::uint32_t> labels) {
  expect_matrix(logits, "cross_entropy_loss");
  const std::size_t batch = logits.rows(), classes = logits.cols();
  if (labels.size() != batch) {
    throw DimensionError("cross_entropy_loss: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(batch) + " rows");
  }
  LossResult<T> res{0.0, BasicTensor<T>(logits.shape())};
  for (std::size_t i = 0; i < batch; ++i) {
    if (labels[i] >= classes) {
      throw DataError("label " + std::to_string(labels[i]) + " out of range for " + std::to_string(classes) +
                      " classes");
    }
    auto row = logits.row(i);
    double mx = row[0];
    for (T v : row) mx = std::max(mx, static_cast<double>(v));
    double sum = 0;
    for (T v : row) sum += std::exp(static_cast<double>(v) - mx);
    const double lse = mx + std::log(sum);
    res.loss += lse - static_cast<double>(row[labels[i]]);
    auto grad = res.d_logits.row(i);
    for (std::size_t c = 0; c < classes; ++c) {
      const double prob = std::exp(static_cast<double>(row[c]) - lse);
      grad[c] = static_cast<T>((prob - (c == labels[i] ? 1.0 : 0.0)) / static_cast<double>(batch));
    }
  }
  res.loss /= static_cast<double>(batch);
  return res;
}

// ---------------------------------------------------------------------------
// Full network

template <typename T>
struct ModelCache {
  EmbedCache<T> embed;
  BasicTensor<T> tokens;  // embedding layer output, input of block 1
  EncoderResult<T> encoder;
  ClassifyCache<T> classify;
  std::size_t batch = 0;
  std::uint64_t params_fingerprint = 0;
};

template <typename T>
struct ForwardResult {
  BasicTensor<T> logits;  // [batch x N_c]
  ModelCache<T> cache;
};

/// Rows b*(n+1) of a stacked [batch*(n+1) x m] token matrix.
template <typename T>
BasicTensor<T> class_token_rows(const BasicTensor<T>& tokens, std::size_t seq_len) {
  const std::size_t batch = tokens.rows() / seq_len, m = tokens.cols();
  BasicTensor<T> out({batch, m});
  for (std::size_t b = 0; b < batch; ++b) std::copy_n(tokens.raw() + b * seq_len * m, m, out.raw() + b * m);
  return out;
}

/// `batch` is [batch x L x C]; a single [L x C] signal is treated as batch 1.
template <typename T>
ForwardResult<T> model_forward(const BasicTensor<T>& batch, const TsvitModel<T>& model, Rng& rng, bool training) {
  const std::size_t s = model.config.seq_len();
  ForwardResult<T> res;
  auto& c = res.cache;
  c.params_fingerprint = model.params.fingerprint();
  auto emb = embed(batch, model, rng, training);
  c.embed = std::move(emb.cache);
  c.tokens = std::move(emb.tokens);
  c.batch = c.tokens.rows() / s;
  c.encoder = encoder_forward(c.tokens, model, rng, training);
  auto cls = classify_forward(class_token_rows(c.encoder.output, s), model, rng, training);
  c.classify = std::move(cls.cache);
  res.logits = std::move(cls.logits);
  return res;
}

/// Accumulates d(loss)/d(parameter) into model.grads. Throws ContractError
/// if the parameters changed since the forward pass that produced `cache`.
template <typename T>
void model_backward(TsvitModel<T>& model, const ModelCache<T>& cache, const BasicTensor<T>& d_logits) {
  if (cache.params_fingerprint != model.params.fingerprint()) {
    throw ContractError("model_backward: parameters were modified after the forward pass (stale cache)");
  }
  const auto& cfg = model.config;
  const auto& p = model.params;
  auto& g = model.grads;
  const std::size_t s = cfg.seq_len(), n = cfg.num_patches(), m = cfg.embed_dim;
  expect_shape(d_logits, {cache.batch, std::size_t{cfg.num_classes}}, "model_backward d_logits");

  detail::matmul_accumulate(g.w_class, cache.classify.features, true, d_logits, false);
  detail::accumulate_column_sums(g.b_class, d_logits);
  BasicTensor<T> d_feat = detail::matmul_t(d_logits, false, p.w_class, true);
  d_feat = dropout_backward(DropoutCache<T>{cache.classify.dropout_mask}, d_feat);
  BasicTensor<T> d_cls = layer_norm_backward_into(cache.classify.ln, d_feat, g.ln_cls_gamma, g.ln_cls_beta);

  BasicTensor<T> d_z({cache.batch * s, m});
  for (std::size_t b = 0; b < cache.batch; ++b) std::copy_n(d_cls.raw() + b * m, m, d_z.raw() + b * s * m);
  for (std::size_t l = p.blocks.size(); l-- > 0;) {
    d_z = block_backward(cache.encoder.caches[l], p.blocks[l], d_z, g.blocks[l]);
  }

  d_z = dropout_backward(DropoutCache<T>{cache.embed.dropout_mask}, d_z);
  BasicTensor<T> d_pe({cache.batch * n, m});
  for (std::size_t b = 0; b < cache.batch; ++b) {
    const T* src = d_z.raw() + b * s * m;
    for (std::size_t i = 0; i < m; ++i) g.class_token[i] += src[i];
    if (cfg.use_position_embedding) {
      for (std::size_t i = 0; i < s * m; ++i) g.pos[i] += src[i];
    }
    std::copy_n(src + m, n * m, d_pe.raw() + b * n * m);
  }
  const std::size_t width = std::size_t{cfg.patch_length} * cfg.channels;
  detail::gemm(true, false, width, m, cache.batch * n, cache.embed.signals.raw(), width, d_pe.raw(), m,
               g.patch_kernel.raw(), m, true);
  detail::accumulate_column_sums(g.patch_bias, d_pe);
}

}  // namespace tsvit
