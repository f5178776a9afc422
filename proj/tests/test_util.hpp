#pragma once

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <numeric>
#include <string>

#include "tsvit/tsvit.hpp"

namespace tsvit::support {

inline Tensor64 random64(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor64 t(std::move(shape));
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

inline Tensor random32(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<float>(scale * rng.normal());
  return t;
}

// |a - b| / max(|a|, |b|, floor). The floor keeps entries whose true
// gradient is ~0 from turning round-off into huge ratios.
inline double rel_error(double a, double b, double floor = 1e-4) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double dot(const Tensor64& a, const Tensor64& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Central differences of the scalar f() with respect to every element of x,
// compared with `analytic`. Returns the worst relative error.
inline double fd_check(Tensor64& x, const Tensor64& analytic, const std::function<double()>& f, double step = 1e-5) {
  EXPECT_EQ(x.shape(), analytic.shape());
  double worst = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + step;
    const double up = f();
    x[i] = saved - step;
    const double down = f();
    x[i] = saved;
    worst = std::max(worst, rel_error(analytic[i], (up - down) / (2 * step)));
  }
  return worst;
}

inline double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(double(a[i]) - double(b[i])));
  return d;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("tsvit_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// L=8, L_p=4, C=1, m=4, h=2, B=2, d_MLP=8, N_c=3 with dropout off.
inline TsvitConfig tiny_config() {
  TsvitConfig c;
  c.signal_length = 8;
  c.channels = 1;
  c.patch_length = 4;
  c.embed_dim = 4;
  c.heads = 2;
  c.blocks = 2;
  c.mlp_dim = 8;
  c.num_classes = 3;
  c.encoder_dropout = 0;
  c.embedding_dropout = 0;
  return c;
}

// Fill every parameter with N(0, scale) so that no gradient is trivially zero.
template <typename T>
void randomize(TsvitModel<T>& model, Rng& rng, double scale = 0.5) {
  model.params.for_each([&](const std::string& name, BasicTensor<T>& t) {
    const bool gamma = name.ends_with("gamma");
    for (auto& v : t.data()) v = static_cast<T>((gamma ? 1.0 : 0.0) + scale * rng.normal());
  });
}

// Straight evaluation of the attention equations for one sequence, with
// explicit loops and no shared code with the library kernels.
inline Tensor64 brute_force_msa(const Tensor64& y, const MsaWeights<double>& w) {
  const std::size_t s = y.rows(), m = y.cols(), h = w.heads, dk = m / h;
  auto proj = [&](const Tensor64& x, const Tensor64& wt, const Tensor64& b) {
    Tensor64 out({x.rows(), m});
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (std::size_t c = 0; c < m; ++c) {
        double acc = b[c];
        for (std::size_t k = 0; k < m; ++k) acc += x(r, k) * wt(k, c);
        out(r, c) = acc;
      }
    return out;
  };
  Tensor64 q = proj(y, w.wq, w.bq), k = proj(y, w.wk, w.bk), v = proj(y, w.wv, w.bv);
  Tensor64 concat({s, m});
  for (std::size_t head = 0; head < h; ++head) {
    for (std::size_t i = 0; i < s; ++i) {
      std::vector<double> e(s);
      double total = 0;
      for (std::size_t j = 0; j < s; ++j) {
        double score = 0;
        for (std::size_t d = 0; d < dk; ++d) score += q(i, head * dk + d) * k(j, head * dk + d);
        e[j] = std::exp(score / std::sqrt(double(dk)));
        total += e[j];
      }
      for (std::size_t d = 0; d < dk; ++d) {
        double acc = 0;
        for (std::size_t j = 0; j < s; ++j) acc += e[j] / total * v(j, head * dk + d);
        concat(i, head * dk + d) = acc;
      }
    }
  }
  return proj(concat, w.wo, w.bo);
}

}  // namespace tsvit::support
