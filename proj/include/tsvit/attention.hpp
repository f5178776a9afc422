#pragma once

// Multi-head scaled dot-product self-attention and its reverse pass.

#include <cmath>
#include <cstdint>
#include <string>

#include "tsvit/ops.hpp"
#include "tsvit/tensor.hpp"

namespace tsvit {

/// Projection weights of one multi-head self-attention layer.
///
/// The h per-head query/key/value matrices are stored side by side along the
/// columns of wq/wk/wv: head i owns columns [i*d_k, (i+1)*d_k). With
/// d_k = d_v = m/h the output projection wo is m x m.
template <typename T>
struct MsaWeights {
  BasicTensor<T> wq, wk, wv;
  BasicTensor<T> bq, bk, bv;
  BasicTensor<T> wo;
  BasicTensor<T> bo;
  std::size_t heads = 1;

  static MsaWeights zeros(std::size_t dim, std::size_t heads) {
    MsaWeights w;
    w.wq = w.wk = w.wv = w.wo = BasicTensor<T>({dim, dim});
    w.bq = w.bk = w.bv = w.bo = BasicTensor<T>({dim});
    w.heads = heads;
    w.validate();
    return w;
  }

  std::size_t dim() const { return wq.rows(); }
  std::size_t head_dim() const { return dim() / heads; }

  void validate() const {
    const std::size_t m = dim();
    if (heads == 0 || m == 0 || m % heads != 0) {
      throw ConfigError("attention: embedding dim " + std::to_string(m) + " is not divisible by " +
                        std::to_string(heads) + " heads");
    }
    for (const auto* t : {&wq, &wk, &wv, &wo}) expect_shape(*t, {m, m}, "attention weight");
    for (const auto* t : {&bq, &bk, &bv, &bo}) expect_shape(*t, {m}, "attention bias");
  }

  /// Visits the eight arrays in storage order: wq, wk, wv, bq, bk, bv, wo, bo.
  template <typename F>
  void for_each(F&& f) {
    f("wq", wq), f("wk", wk), f("wv", wv), f("bq", bq), f("bk", bk), f("bv", bv), f("wo", wo), f("bo", bo);
  }
  template <typename F>
  void for_each(F&& f) const {
    f("wq", wq), f("wk", wk), f("wv", wv), f("bq", bq), f("bk", bk), f("bv", bv), f("wo", wo), f("bo", bo);
  }

  std::uint64_t fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ULL ^ heads;
    for_each([&](const char*, const BasicTensor<T>& t) { h = tsvit::fingerprint(h, t); });
    return h;
  }
};

/// Activations saved by msa_forward for msa_backward.
template <typename T>
struct MsaCache {
  BasicTensor<T> input;   // [rows x m]
  BasicTensor<T> q, k, v; // projections including biases
  BasicTensor<T> probs;   // [(sequences*h*s) x s], one softmax matrix per (sequence, head)
  BasicTensor<T> concat;  // heads side by side, before the output projection
  std::size_t seq_len = 0;
  std::uint64_t weights_fingerprint = 0;

  std::size_t sequences() const { return input.rows() / seq_len; }

  /// Attention matrix of `head` for sequence `seq`, row r.
  std::span<const T> attention_row(std::size_t seq, std::size_t head, std::size_t r, std::size_t heads) const {
    return probs.row((seq * heads + head) * seq_len + r);
  }
};

template <typename T>
struct MsaResult {
  BasicTensor<T> output;
  MsaCache<T> cache;
};

namespace detail {

template <typename T>
BasicTensor<T> project(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b) {
  BasicTensor<T> out = matmul_t(x, false, w, false);
  add_row_bias(out, b);
  return out;
}

/// Reverse pass without the stale-weights check; the caller guarantees
/// `w` is the array set the cache was computed with.
template <typename T>
BasicTensor<T> msa_backward_unchecked(const MsaCache<T>& cache, const MsaWeights<T>& w, const BasicTensor<T>& d_out,
                                      MsaWeights<T>& grads) {
  const std::size_t m = w.dim();
  const std::size_t h = w.heads;
  const std::size_t dk = w.head_dim();
  const std::size_t s = cache.seq_len;
  const std::size_t rows = cache.input.rows();
  expect_shape(d_out, {rows, m}, "msa_backward d_out");
  const T scale = T(1) / std::sqrt(static_cast<T>(dk));

  matmul_accumulate(grads.wo, cache.concat, true, d_out, false);
  accumulate_column_sums(grads.bo, d_out);
  BasicTensor<T> d_concat = matmul_t(d_out, false, w.wo, true);

  BasicTensor<T> dq({rows, m}), dk_({rows, m}), dv({rows, m});
  BasicTensor<T> d_probs({s, s});
  for (std::size_t seq = 0; seq < cache.sequences(); ++seq) {
    const std::size_t r0 = seq * s;
    for (std::size_t head = 0; head < h; ++head) {
      const std::size_t c0 = head * dk;
      const T* p = cache.probs.raw() + (seq * h + head) * s * s;
      // dP = dA_i V_i^T ; dV_i = P^T dA_i
      gemm(false, true, s, s, dk, d_concat.raw() + r0 * m + c0, m, cache.v.raw() + r0 * m + c0, m, d_probs.raw(), s,
           false);
      gemm(true, false, s, dk, s, p, s, d_concat.raw() + r0 * m + c0, m, dv.raw() + r0 * m + c0, m, false);
      for (std::size_t r = 0; r < s; ++r) {
        auto drow = d_probs.row(r);
        softmax_row_backward<T>(std::span<const T>(p + r * s, s), drow, drow);
        for (auto& x : drow) x *= scale;
      }
      // scores = scale * Q_i K_i^T
      gemm(false, false, s, dk, s, d_probs.raw(), s, cache.k.raw() + r0 * m + c0, m, dq.raw() + r0 * m + c0, m, false);
      gemm(true, false, s, dk, s, d_probs.raw(), s, cache.q.raw() + r0 * m + c0, m, dk_.raw() + r0 * m + c0, m, false);
    }
  }

  matmul_accumulate(grads.wq, cache.input, true, dq, false);
  matmul_accumulate(grads.wk, cache.input, true, dk_, false);
  matmul_accumulate(grads.wv, cache.input, true, dv, false);
  accumulate_column_sums(grads.bq, dq);
  accumulate_column_sums(grads.bk, dk_);
  accumulate_column_sums(grads.bv, dv);

  BasicTensor<T> d_input = matmul_t(dq, false, w.wq, true);
  matmul_accumulate(d_input, dk_, false, w.wk, true);
  matmul_accumulate(d_input, dv, false, w.wv, true);
  return d_input;
}

}  // namespace detail

/// Multi-head self-attention over one or more stacked sequences.
///
/// `y` holds sequences of `seq_len` rows each, stacked vertically; attention
/// never crosses a sequence boundary. seq_len = 0 treats all rows as a
/// single sequence. Computes Q = YWq + bq (likewise K, V), per head
/// softmax(Q_i K_i^T / sqrt(d_k)) V_i, concatenates the heads and applies
/// the output projection.
template <typename T>
MsaResult<T> msa_forward(const BasicTensor<T>& y, const MsaWeights<T>& w, std::size_t seq_len = 0) {
  w.validate();
  expect_matrix(y, "msa_forward input");
  const std::size_t m = w.dim();
  if (y.cols() != m) {
    throw DimensionError("msa_forward: input " + shape_string(y.shape()) + " does not match embedding dim " +
                         std::to_string(m));
  }
  const std::size_t rows = y.rows();
  const std::size_t s = seq_len == 0 ? rows : seq_len;
  if (rows % s != 0) throw DimensionError("msa_forward: " + std::to_string(rows) + " rows is not a multiple of seq_len");
  const std::size_t h = w.heads;
  const std::size_t dk = w.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dk));

  MsaResult<T> res;
  auto& c = res.cache;
  c.input = y;
  c.seq_len = s;
  c.weights_fingerprint = w.fingerprint();
  c.q = detail::project(y, w.wq, w.bq);
  c.k = detail::project(y, w.wk, w.bk);
  c.v = detail::project(y, w.wv, w.bv);
  c.probs = BasicTensor<T>({rows / s * h * s, s});
  c.concat = BasicTensor<T>({rows, m});

  for (std::size_t seq = 0; seq < rows / s; ++seq) {
    const std::size_t r0 = seq * s;
    for (std::size_t head = 0; head < h; ++head) {
      const std::size_t c0 = head * dk;
      T* p = c.probs.raw() + (seq * h + head) * s * s;
      detail::gemm(false, true, s, s, dk, c.q.raw() + r0 * m + c0, m, c.k.raw() + r0 * m + c0, m, p, s, false);
      for (std::size_t r = 0; r < s; ++r) {
        std::span<T> row(p + r * s, s);
        for (auto& x : row) x *= scale;
        softmax_row_inplace(row);
      }
      detail::gemm(false, false, s, dk, s, p, s, c.v.raw() + r0 * m + c0, m, c.concat.raw() + r0 * m + c0, m, false);
    }
  }

  res.output = detail::project(c.concat, w.wo, w.bo);
  return res;
}

/// Accumulates parameter gradients into `grads` and returns d(input).
/// Throws ContractError if `w` changed since the forward pass.
template <typename T>
BasicTensor<T> msa_backward(const MsaCache<T>& cache, const MsaWeights<T>& w, const BasicTensor<T>& d_out,
                            MsaWeights<T>& grads) {
  if (cache.weights_fingerprint != w.fingerprint()) {
    throw ContractError("msa_backward: attention weights were modified after the forward pass");
  }
  grads.validate();
  if (grads.dim() != w.dim()) throw DimensionError("msa_backward: gradient buffers do not match weights");
  return detail::msa_backward_unchecked(cache, w, d_out, grads);
}

template <typename T>
struct MsaGrads {
  BasicTensor<T> d_input;
  MsaWeights<T> weights;
};

template <typename T>
MsaGrads<T> msa_backward(const MsaCache<T>& cache, const MsaWeights<T>& w, const BasicTensor<T>& d_out) {
  MsaGrads<T> g{{}, MsaWeights<T>::zeros(w.dim(), w.heads)};
  g.d_input = msa_backward(cache, w, d_out, g.weights);
  return g;
}

}  // namespace tsvit
