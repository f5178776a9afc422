#pragma once

// Dense kernels used by every layer of the network, with their
// vector-Jacobian products. All kernels operate on rank-2 tensors.

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <variant>
#include <vector>

#include "tsvit/errors.hpp"
#include "tsvit/rng.hpp"
#include "tsvit/tensor.hpp"

namespace tsvit {

/// Counts matrix-multiply FLOPs (2 per multiply-add) executed on the current
/// thread while an instance is alive. Instances nest; the innermost counts.
class FlopCounter {
 public:
  FlopCounter() : previous_(active_) { active_ = this; }
  ~FlopCounter() { active_ = previous_; }
  FlopCounter(const FlopCounter&) = delete;
  FlopCounter& operator=(const FlopCounter&) = delete;

  std::uint64_t matmul_flops() const noexcept { return flops_; }

  static void record(std::uint64_t flops) noexcept {
    if (active_) active_->flops_ += flops;
  }

 private:
  std::uint64_t flops_ = 0;
  FlopCounter* previous_;
  static inline thread_local FlopCounter* active_ = nullptr;
};

namespace detail {

template <typename T>
auto as_array(BasicTensor<T>& t) {
  return Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>(t.raw(), static_cast<Eigen::Index>(t.size()));
}
template <typename T>
auto as_array(const BasicTensor<T>& t) {
  return Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(t.raw(), static_cast<Eigen::Index>(t.size()));
}

/// C = op(A) * op(B) (or C += ...), row-major with leading dimensions.
/// op(A) is m x k, op(B) is k x n, C is m x n.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda,
          const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using ConstMap = Eigen::Map<const Mat, 0, Eigen::OuterStride<>>;
  using MutMap = Eigen::Map<Mat, 0, Eigen::OuterStride<>>;
  const auto ai = static_cast<Eigen::Index>(trans_a ? k : m);
  const auto aj = static_cast<Eigen::Index>(trans_a ? m : k);
  const auto bi = static_cast<Eigen::Index>(trans_b ? n : k);
  const auto bj = static_cast<Eigen::Index>(trans_b ? k : n);
  ConstMap A(a, ai, aj, Eigen::OuterStride<>(static_cast<Eigen::Index>(lda)));
  ConstMap B(b, bi, bj, Eigen::OuterStride<>(static_cast<Eigen::Index>(ldb)));
  MutMap C(c, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n), Eigen::OuterStride<>(static_cast<Eigen::Index>(ldc)));
  FlopCounter::record(2ULL * m * n * k);

  auto run = [&](const auto& lhs, const auto& rhs) {
    if (accumulate)
      C.noalias() += lhs * rhs;
    else
      C.noalias() = lhs * rhs;
  };
  if (!trans_a && !trans_b) run(A, B);
  else if (trans_a && !trans_b) run(A.transpose(), B);
  else if (!trans_a && trans_b) run(A, B.transpose());
  else run(A.transpose(), B.transpose());
}

/// out = op(A) * op(B) for whole matrices.
template <typename T>
BasicTensor<T> matmul_t(const BasicTensor<T>& a, bool trans_a, const BasicTensor<T>& b, bool trans_b) {
  const std::size_t m = trans_a ? a.cols() : a.rows();
  const std::size_t k = trans_a ? a.rows() : a.cols();
  const std::size_t kb = trans_b ? b.cols() : b.rows();
  const std::size_t n = trans_b ? b.rows() : b.cols();
  if (k != kb) {
    throw DimensionError("matmul inner extents differ: " + shape_string(a.shape()) + (trans_a ? "^T" : "") + " * " +
                         shape_string(b.shape()) + (trans_b ? "^T" : ""));
  }
  BasicTensor<T> out({m, n});
  gemm(trans_a, trans_b, m, n, k, a.raw(), a.cols(), b.raw(), b.cols(), out.raw(), n, false);
  return out;
}

/// acc += op(A) * op(B); shapes must already agree.
template <typename T>
void matmul_accumulate(BasicTensor<T>& acc, const BasicTensor<T>& a, bool trans_a, const BasicTensor<T>& b,
                       bool trans_b) {
  const std::size_t m = trans_a ? a.cols() : a.rows();
  const std::size_t k = trans_a ? a.rows() : a.cols();
  const std::size_t n = trans_b ? b.rows() : b.cols();
  if (acc.rows() != m || acc.cols() != n || (trans_b ? b.cols() : b.rows()) != k) {
    throw DimensionError("matmul_accumulate: incompatible " + shape_string(acc.shape()) + " += " +
                         shape_string(a.shape()) + " * " + shape_string(b.shape()));
  }
  gemm(trans_a, trans_b, m, n, k, a.raw(), a.cols(), b.raw(), b.cols(), acc.raw(), n, true);
}

template <typename T>
void add_row_bias(BasicTensor<T>& x, const BasicTensor<T>& bias) {
  if (bias.size() != x.cols()) {
    throw DimensionError("bias of " + shape_string(bias.shape()) + " cannot be added to rows of " +
                         shape_string(x.shape()));
  }
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bias[c];
  }
}

/// acc[c] += sum_r x(r, c)
template <typename T>
void accumulate_column_sums(BasicTensor<T>& acc, const BasicTensor<T>& x) {
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) acc[c] += row[c];
  }
}

template <typename T>
void add_inplace(BasicTensor<T>& acc, const BasicTensor<T>& x) {
  if (acc.size() != x.size()) {
    throw DimensionError("add: shapes " + shape_string(acc.shape()) + " and " + shape_string(x.shape()) + " differ");
  }
  as_array(acc) += as_array(x);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward kernels

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  expect_matrix(a, "matmul lhs");
  expect_matrix(b, "matmul rhs");
  return detail::matmul_t(a, false, b, false);
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) + " differ");
  }
  BasicTensor<T> out = a;
  detail::add_inplace(out, b);
  return out;
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  expect_matrix(a, "transpose");
  BasicTensor<T> out({a.cols(), a.rows()});
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) out(c, r) = a(r, c);
  return out;
}

/// Row-wise softmax with max subtraction. NaN inputs propagate to their row.
template <typename T>
void softmax_row_inplace(std::span<T> row) {
  Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> a(row.data(), static_cast<Eigen::Index>(row.size()));
  a = (a - a.maxCoeff()).exp();
  a *= T(1) / a.sum();
}

template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x) {
  expect_matrix(x, "softmax_rows");
  BasicTensor<T> out = x;
  for (std::size_t r = 0; r < out.rows(); ++r) softmax_row_inplace(out.row(r));
  return out;
}

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
struct LayerNormCache {
  BasicTensor<T> normalized;  // (x - mean) * inv_std, before the affine map
  std::vector<T> inv_std;     // per row
  BasicTensor<T> gamma;
};

template <typename T>
struct LayerNormResult {
  BasicTensor<T> output;
  LayerNormCache<T> cache;
};

/// Per-row normalization with population variance, then gamma * x + beta.
template <typename T>
LayerNormResult<T> layer_norm_forward(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                                      double eps = kLayerNormEps) {
  expect_matrix(x, "layer_norm");
  const std::size_t width = x.cols();
  if (gamma.size() != width || beta.size() != width) {
    throw DimensionError("layer_norm: gamma/beta of " + shape_string(gamma.shape()) + "/" + shape_string(beta.shape()) +
                         " do not match rows of " + shape_string(x.shape()));
  }
  if (!(eps > 0)) throw ConfigError("layer_norm: eps must be positive");
  LayerNormResult<T> res{BasicTensor<T>(x.shape()), {BasicTensor<T>(x.shape()), std::vector<T>(x.rows()), gamma}};
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    T mean = 0;
    for (T v : in) mean += v;
    mean /= static_cast<T>(width);
    T var = 0;
    for (T v : in) var += (v - mean) * (v - mean);
    var /= static_cast<T>(width);
    const T inv_std = T(1) / std::sqrt(var + static_cast<T>(eps));
    res.cache.inv_std[r] = inv_std;
    auto xhat = res.cache.normalized.row(r);
    auto out = res.output.row(r);
    for (std::size_t c = 0; c < width; ++c) {
      xhat[c] = (in[c] - mean) * inv_std;
      out[c] = gamma[c] * xhat[c] + beta[c];
    }
  }
  return res;
}

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                          double eps = kLayerNormEps) {
  return layer_norm_forward(x, gamma, beta, eps).output;
}

/// Exact GELU: x * Phi(x) with Phi the standard normal CDF.
template <typename T>
T gelu_scalar(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * static_cast<T>(1.0 / std::numbers::sqrt2)));
}

template <typename T>
T gelu_derivative(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * static_cast<T>(1.0 / std::numbers::sqrt2)));
  const T pdf = static_cast<T>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2) * std::exp(T(-0.5) * x * x);
  return cdf + x * pdf;
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  BasicTensor<T> out(x.shape());
  auto in = detail::as_array(x);
  detail::as_array(out) = T(0.5) * in * (T(1) + (in * static_cast<T>(1.0 / std::numbers::sqrt2)).erf());
  return out;
}

template <typename T>
struct DropoutResult {
  BasicTensor<T> output;
  BasicTensor<T> mask;  // 0 for dropped elements, 1/(1-p) for survivors, 1 at inference
};

/// Inverted dropout. While training, one engine draw keys the call and
/// element i keeps its value unless the 53-bit uniform taken from
/// mix64(key + i) is below p. The mask depends only on (rng state, element
/// count, p), never on T.
template <typename T>
DropoutResult<T> dropout(const BasicTensor<T>& x, double p, Rng& rng, bool training) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must be in [0, 1), got " + std::to_string(p));
  DropoutResult<T> res{x, BasicTensor<T>(x.shape(), T(1))};
  if (!training || p == 0.0) return res;
  const T scale = static_cast<T>(1.0 / (1.0 - p));
  // u < p on 53-bit integers, u = k * 2^-53
  const auto cut = static_cast<std::uint64_t>(std::ceil(std::ldexp(p, 53)));
  T* mask = res.mask.raw();
  const std::uint64_t key = rng.next_u64();
  for (std::size_t i = 0; i < x.size(); ++i) mask[i] = (mix64(key + i) >> 11) < cut ? T(0) : scale;
  detail::as_array(res.output) *= detail::as_array(res.mask);
  return res;
}

// ---------------------------------------------------------------------------
// Backward kernels

template <typename T>
struct MatmulCache {
  BasicTensor<T> lhs, rhs;
};
template <typename T>
struct SoftmaxCache {
  BasicTensor<T> output;
};
template <typename T>
struct GeluCache {
  BasicTensor<T> input;
};
template <typename T>
struct DropoutCache {
  BasicTensor<T> mask;
};
struct AddCache {
  Shape shape;
};
struct TransposeCache {
  Shape input_shape;
};

template <typename T>
struct MatmulGrads {
  BasicTensor<T> d_lhs, d_rhs;
};

template <typename T>
MatmulGrads<T> matmul_backward(const MatmulCache<T>& cache, const BasicTensor<T>& d_out) {
  return {detail::matmul_t(d_out, false, cache.rhs, true), detail::matmul_t(cache.lhs, true, d_out, false)};
}

/// dX = Y * (dY - rowsum(dY * Y))
template <typename T>
void softmax_row_backward(std::span<const T> y, std::span<const T> dy, std::span<T> dx) {
  T dot = 0;
  for (std::size_t c = 0; c < y.size(); ++c) dot += dy[c] * y[c];
  for (std::size_t c = 0; c < y.size(); ++c) dx[c] = y[c] * (dy[c] - dot);
}

template <typename T>
BasicTensor<T> softmax_rows_backward(const SoftmaxCache<T>& cache, const BasicTensor<T>& d_out) {
  expect_shape(d_out, cache.output.shape(), "softmax_rows_backward");
  BasicTensor<T> dx(d_out.shape());
  for (std::size_t r = 0; r < dx.rows(); ++r) softmax_row_backward<T>(cache.output.row(r), d_out.row(r), dx.row(r));
  return dx;
}

template <typename T>
struct LayerNormGrads {
  BasicTensor<T> d_input, d_gamma, d_beta;
};

/// d_gamma/d_beta are accumulated into the given buffers; d_input is returned.
template <typename T>
BasicTensor<T> layer_norm_backward_into(const LayerNormCache<T>& cache, const BasicTensor<T>& d_out,
                                        BasicTensor<T>& d_gamma, BasicTensor<T>& d_beta) {
  expect_shape(d_out, cache.normalized.shape(), "layer_norm_backward");
  const std::size_t width = d_out.cols();
  BasicTensor<T> dx(d_out.shape());
  std::vector<T> dxhat(width);
  for (std::size_t r = 0; r < d_out.rows(); ++r) {
    auto dy = d_out.row(r);
    auto xhat = cache.normalized.row(r);
    T mean_dxhat = 0, mean_dxhat_xhat = 0;
    for (std::size_t c = 0; c < width; ++c) {
      d_gamma[c] += dy[c] * xhat[c];
      d_beta[c] += dy[c];
      dxhat[c] = dy[c] * cache.gamma[c];
      mean_dxhat += dxhat[c];
      mean_dxhat_xhat += dxhat[c] * xhat[c];
    }
    mean_dxhat /= static_cast<T>(width);
    mean_dxhat_xhat /= static_cast<T>(width);
    auto out = dx.row(r);
    const T inv_std = cache.inv_std[r];
    for (std::size_t c = 0; c < width; ++c) out[c] = inv_std * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
  }
  return dx;
}

template <typename T>
LayerNormGrads<T> layer_norm_backward(const LayerNormCache<T>& cache, const BasicTensor<T>& d_out) {
  LayerNormGrads<T> g{{}, BasicTensor<T>(cache.gamma.shape()), BasicTensor<T>(cache.gamma.shape())};
  g.d_input = layer_norm_backward_into(cache, d_out, g.d_gamma, g.d_beta);
  return g;
}

template <typename T>
BasicTensor<T> gelu_backward(const GeluCache<T>& cache, const BasicTensor<T>& d_out) {
  expect_shape(d_out, cache.input.shape(), "gelu_backward");
  BasicTensor<T> dx(d_out.shape());
  auto x = detail::as_array(cache.input);
  const T pdf_scale = static_cast<T>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  detail::as_array(dx) = detail::as_array(d_out) *
                         (T(0.5) * (T(1) + (x * static_cast<T>(1.0 / std::numbers::sqrt2)).erf()) +
                          x * pdf_scale * (T(-0.5) * x.square()).exp());
  return dx;
}

template <typename T>
BasicTensor<T> dropout_backward(const DropoutCache<T>& cache, const BasicTensor<T>& d_out) {
  expect_shape(d_out, cache.mask.shape(), "dropout_backward");
  BasicTensor<T> dx = d_out;
  detail::as_array(dx) *= detail::as_array(cache.mask);
  return dx;
}

// ---------------------------------------------------------------------------
// Uniform dispatch over the differentiable primitives.

enum class Op { matmul, softmax_rows, layer_norm, gelu, dropout, add, transpose };

inline const char* op_name(Op op) {
  switch (op) {
    case Op::matmul: return "matmul";
    case Op::softmax_rows: return "softmax_rows";
    case Op::layer_norm: return "layer_norm";
    case Op::gelu: return "gelu";
    case Op::dropout: return "dropout";
    case Op::add: return "add";
    case Op::transpose: return "transpose";
  }
  return "?";
}

template <typename T>
using OpCache = std::variant<MatmulCache<T>, SoftmaxCache<T>, LayerNormCache<T>, GeluCache<T>, DropoutCache<T>,
                             AddCache, TransposeCache>;

/// Vector-Jacobian products for every differentiable input of `op`, in
/// argument order (layer_norm: input, gamma, beta).
template <typename T>
std::vector<BasicTensor<T>> backward_of(Op op, const OpCache<T>& cache, const BasicTensor<T>& d_out) {
  auto mismatch = [&]() -> std::vector<BasicTensor<T>> {
    throw ContractError(std::string("backward_of(") + op_name(op) + "): cache was produced by a different op");
  };
  switch (op) {
    case Op::matmul:
      if (auto* c = std::get_if<MatmulCache<T>>(&cache)) {
        auto g = matmul_backward(*c, d_out);
        return {std::move(g.d_lhs), std::move(g.d_rhs)};
      }
      return mismatch();
    case Op::softmax_rows:
      if (auto* c = std::get_if<SoftmaxCache<T>>(&cache)) return {softmax_rows_backward(*c, d_out)};
      return mismatch();
    case Op::layer_norm:
      if (auto* c = std::get_if<LayerNormCache<T>>(&cache)) {
        auto g = layer_norm_backward(*c, d_out);
        return {std::move(g.d_input), std::move(g.d_gamma), std::move(g.d_beta)};
      }
      return mismatch();
    case Op::gelu:
      if (auto* c = std::get_if<GeluCache<T>>(&cache)) return {gelu_backward(*c, d_out)};
      return mismatch();
    case Op::dropout:
      if (auto* c = std::get_if<DropoutCache<T>>(&cache)) return {dropout_backward(*c, d_out)};
      return mismatch();
    case Op::add:
      if (auto* c = std::get_if<AddCache>(&cache)) {
        expect_shape(d_out, c->shape, "add_backward");
        return {d_out, d_out};
      }
      return mismatch();
    case Op::transpose:
      if (auto* c = std::get_if<TransposeCache>(&cache)) {
        BasicTensor<T> dx = transpose(d_out);
        expect_shape(dx, c->input_shape, "transpose_backward");
        return {std::move(dx)};
      }
      return mismatch();
  }
  return mismatch();
}

}  // namespace tsvit
