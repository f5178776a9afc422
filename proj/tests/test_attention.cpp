#include <gtest/gtest.h>

#include <numeric>

#include "test_util.hpp"

using namespace tsvit;
using tsvit::support::fd_check;
using tsvit::support::brute_force_msa;
using tsvit::support::random64;

namespace {

MsaWeights<double> random_weights(std::size_t m, std::size_t h, Rng& rng, double scale = 0.5) {
  auto w = MsaWeights<double>::zeros(m, h);
  w.for_each([&](const char*, Tensor64& t) {
    for (auto& v : t.data()) v = scale * rng.normal();
  });
  return w;
}

}  // namespace

TEST(Msa, SingleTokenReturnsValueRow) {
  Rng rng(1);
  auto w = random_weights(4, 1, rng);
  w.wo = Tensor64::identity(4);
  w.bo.fill(0);
  auto y = random64({1, 4}, rng);
  auto out = msa_forward(y, w).output;
  auto v = matmul(y, w.wv);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(out[c], v[c] + w.bv[c], 1e-12);
}

TEST(Msa, ZeroProjectionsGiveZeroOutput) {
  auto w = MsaWeights<double>::zeros(6, 3);
  w.wo = Tensor64::identity(6);
  Rng rng(2);
  auto out = msa_forward(random64({5, 6}, rng), w).output;
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(Msa, TwoByTwoIdentityExample) {
  auto w = MsaWeights<double>::zeros(2, 1);
  w.wq = w.wk = w.wv = w.wo = Tensor64::identity(2);
  auto y = Tensor64::matrix({{1, 0}, {0, 1}});
  auto res = msa_forward(y, w);
  // pre-softmax scores Y Y^T / sqrt(2) = [[0.7071, 0], [0, 0.7071]]
  const double a = std::exp(1 / std::sqrt(2.0)) / (std::exp(1 / std::sqrt(2.0)) + 1);
  EXPECT_NEAR(res.cache.attention_row(0, 0, 0, 1)[0], a, 1e-12);
  EXPECT_NEAR(res.cache.attention_row(0, 0, 0, 1)[1], 1 - a, 1e-12);
  EXPECT_NEAR(res.cache.attention_row(0, 0, 1, 1)[1], a, 1e-12);
  auto oracle = brute_force_msa(y, w);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(res.output[i], oracle[i], 1e-12);
  EXPECT_NEAR(res.output(0, 0), a, 1e-12);
  EXPECT_NEAR(res.output(0, 1), 1 - a, 1e-12);
}

TEST(Msa, MatchesBruteForceOracle) {
  Rng rng(3);
  for (std::size_t h : {1u, 2u, 4u}) {
    auto w = random_weights(8, h, rng);
    auto y = random64({6, 8}, rng);
    auto out = msa_forward(y, w).output;
    auto oracle = brute_force_msa(y, w);
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], oracle[i], 1e-10);
  }
}

TEST(Msa, StackedSequencesAreIndependent) {
  Rng rng(4);
  auto w = random_weights(4, 2, rng);
  auto a = random64({3, 4}, rng), b = random64({3, 4}, rng);
  Tensor64 both({6, 4});
  std::copy(a.data().begin(), a.data().end(), both.data().begin());
  std::copy(b.data().begin(), b.data().end(), both.data().begin() + 12);
  auto stacked = msa_forward(both, w, 3).output;
  auto oa = msa_forward(a, w).output, ob = msa_forward(b, w).output;
  for (std::size_t i = 0; i < 12; ++i) {
    EXPECT_NEAR(stacked[i], oa[i], 1e-12);
    EXPECT_NEAR(stacked[12 + i], ob[i], 1e-12);
  }
  EXPECT_THROW(msa_forward(both, w, 4), DimensionError);
}

TEST(Msa, DimensionMismatchThrows) {
  auto w = MsaWeights<double>::zeros(4, 2);
  EXPECT_THROW(msa_forward(Tensor64({3, 5}), w), DimensionError);
  EXPECT_THROW(MsaWeights<double>::zeros(6, 4), ConfigError);
}

TEST(MsaBackward, ZeroUpstreamGivesZeroGradients) {
  Rng rng(5);
  auto w = random_weights(4, 2, rng);
  auto y = random64({3, 4}, rng);
  auto g = msa_backward(msa_forward(y, w).cache, w, Tensor64({3, 4}));
  for (double v : g.d_input.data()) EXPECT_EQ(v, 0.0);
  g.weights.for_each([](const char* name, const Tensor64& t) {
    for (double v : t.data()) EXPECT_EQ(v, 0.0) << name;
  });
}

TEST(MsaBackward, FiniteDifferences) {
  Rng rng(6);
  for (int trial = 0; trial < 3; ++trial) {
    auto w = random_weights(4, 2, rng);
    auto y = random64({3, 4}, rng);
    auto probe = random64({3, 4}, rng);
    auto g = msa_backward(msa_forward(y, w).cache, w, probe);
    auto f = [&] { return support::dot(msa_forward(y, w).output, probe); };
    EXPECT_LT(fd_check(y, g.d_input, f), 1e-6) << "input";
    std::vector<std::pair<std::string, Tensor64*>> params;
    w.for_each([&](const char* name, Tensor64& t) { params.emplace_back(name, &t); });
    std::vector<const Tensor64*> grads;
    g.weights.for_each([&](const char*, const Tensor64& t) { grads.push_back(&t); });
    for (std::size_t i = 0; i < params.size(); ++i) {
      EXPECT_LT(fd_check(*params[i].second, *grads[i], f), 1e-6) << params[i].first;
    }
  }
}

TEST(MsaBackward, OutputBiasGradientCountsRows) {
  Rng rng(7);
  auto w = random_weights(4, 2, rng);
  const std::size_t s = 5;
  auto g = msa_backward(msa_forward(random64({s, 4}, rng), w).cache, w, Tensor64({s, 4}, 1.0));
  for (double v : g.weights.bo.data()) EXPECT_DOUBLE_EQ(v, double(s));
}

TEST(MsaBackward, MutatedWeightsAreDetected) {
  Rng rng(8);
  auto w = random_weights(4, 2, rng);
  auto res = msa_forward(random64({3, 4}, rng), w);
  w.wk[0] += 1.0;
  EXPECT_THROW(msa_backward(res.cache, w, Tensor64({3, 4})), ContractError);
}

TEST(MsaProperties, AttentionRowsAreStochastic) {
  Rng rng(9);
  auto w = random_weights(8, 4, rng, 2.0);
  auto res = msa_forward(random64({14, 8}, rng, 3.0), w, 7);
  for (std::size_t seq = 0; seq < 2; ++seq)
    for (std::size_t head = 0; head < 4; ++head)
      for (std::size_t r = 0; r < 7; ++r) {
        auto row = res.cache.attention_row(seq, head, r, 4);
        EXPECT_NEAR(std::accumulate(row.begin(), row.end(), 0.0), 1.0, 1e-6);
      }
}

TEST(MsaProperties, PermutationEquivariance) {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t s = 1 + rng.index(8);
    auto w = random_weights(4, 2, rng);
    auto y = random64({s, 4}, rng);
    std::vector<std::size_t> perm(s);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = s; i > 1; --i) std::swap(perm[i - 1], perm[rng.index(i)]);
    Tensor64 py({s, 4});
    for (std::size_t r = 0; r < s; ++r)
      for (std::size_t c = 0; c < 4; ++c) py(r, c) = y(perm[r], c);
    auto out = msa_forward(y, w).output, pout = msa_forward(py, w).output;
    for (std::size_t r = 0; r < s; ++r)
      for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(pout(r, c), out(perm[r], c), 1e-5);
  }
}

TEST(MsaProperties, HeadCountIrrelevantUnderUniformAttention) {
  Rng rng(11);
  auto one = random_weights(4, 1, rng);
  one.wq.fill(0);
  one.bq.fill(0);
  one.wo = Tensor64::identity(4);
  auto two = one;
  two.heads = 2;
  auto y = random64({5, 4}, rng);
  auto a = msa_forward(y, one).output, b = msa_forward(y, two).output;
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);

  // with non-zero queries the two head counts disagree
  auto one_q = random_weights(4, 1, rng, 1.0);
  auto two_q = one_q;
  two_q.heads = 2;
  auto c = msa_forward(y, one_q).output, d = msa_forward(y, two_q).output;
  double diff = 0;
  for (std::size_t i = 0; i < c.size(); ++i) diff = std::max(diff, std::abs(c[i] - d[i]));
  EXPECT_GT(diff, 1e-6);
}
