#include <gtest/gtest.h>

#include <cmath>

#include "lesionfuse/gradcheck.hpp"
#include "lesionfuse/nn.hpp"
#include "oracles.hpp"

using namespace lesionfuse;

namespace {

Tensor probe(const Tensor& y, std::uint64_t seed) { return sum(mul(y, oracle::random(y.shape(), seed))); }

std::vector<Tensor> with_params(const Module& m, std::vector<Tensor> in) {
  for (auto& p : m.parameters()) in.push_back(p);
  return in;
}

void expect_all_parameters_have_grad(const Module& m) {
  for (const auto& [name, p] : m.named_parameters()) EXPECT_TRUE(p.has_grad()) << name;
}

// Per-head attention with explicit loops; W* are [d x d] row-major, x*W^T + b convention.
std::vector<double> attention_oracle(MultiHeadAttention& mha, const Tensor& q, const Tensor& kv) {
  const std::size_t tq = q.dim(0), tk = kv.dim(0), d = mha.model_dim(), h = mha.heads(), dh = d / h;
  auto proj = [&](Linear& L, const Tensor& x, std::size_t rows) {
    std::vector<double> out(rows * d);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < d; ++j) {
        double s = L.bias()[j];
        for (std::size_t i = 0; i < d; ++i) s += L.weight()[j * d + i] * x[r * d + i];
        out[r * d + j] = s;
      }
    return out;
  };
  auto Q = proj(mha.query(), q, tq), K = proj(mha.key(), kv, tk), V = proj(mha.value(), kv, tk);
  std::vector<double> ctx(tq * d, 0.0);
  for (std::size_t head = 0; head < h; ++head)
    for (std::size_t i = 0; i < tq; ++i) {
      std::vector<double> logits(tk);
      for (std::size_t j = 0; j < tk; ++j) {
        double s = 0;
        for (std::size_t c = 0; c < dh; ++c) s += Q[i * d + head * dh + c] * K[j * d + head * dh + c];
        logits[j] = s / std::sqrt(static_cast<double>(dh));
      }
      auto w = oracle::softmax_rows(logits, tk);
      for (std::size_t j = 0; j < tk; ++j)
        for (std::size_t c = 0; c < dh; ++c) ctx[i * d + head * dh + c] += w[j] * V[j * d + head * dh + c];
    }
  Tensor ctx_t({tq, d}, ctx);
  return proj(mha.output(), ctx_t, tq);
}

}  // namespace

TEST(Linear, ForwardIsAffine) {
  Linear L(3, 2);
  init_params(L, {InitScheme::uniform_fan, 1});
  Rng rng(2);
  fill_uniform(L.bias(), 0.5, rng);
  Tensor x = oracle::random({4, 3}, 3);
  Tensor y = L.forward(x);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t j = 0; j < 2; ++j) {
      double s = L.bias()[j];
      for (std::size_t i = 0; i < 3; ++i) s += L.weight()[j * 3 + i] * x[r * 3 + i];
      EXPECT_NEAR(y[r * 2 + j], s, 1e-15);
    }
}

TEST(Init, UniformFanBoundAndZeroBias) {
  Linear L(4, 4);
  init_params(L, {InitScheme::uniform_fan, 5});
  const double a = std::sqrt(6.0 / 8.0);
  EXPECT_NEAR(a, 0.866, 1e-3);
  for (double w : L.weight().data()) EXPECT_LE(std::abs(w), a);
  for (double b : L.bias().data()) EXPECT_EQ(b, 0.0);
}

TEST(Init, SameSeedIsBitIdentical) {
  TransformerBlock a(8, 2, 16), b(8, 2, 16), c(8, 2, 16);
  init_params(a, {InitScheme::uniform_fan, 42});
  init_params(b, {InitScheme::uniform_fan, 42});
  init_params(c, {InitScheme::uniform_fan, 43});
  auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  bool any_difference = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_TRUE(std::equal(pa[i].data().begin(), pa[i].data().end(), pb[i].data().begin()));
    any_difference |= !std::equal(pa[i].data().begin(), pa[i].data().end(), pc[i].data().begin());
  }
  EXPECT_TRUE(any_difference);
}

TEST(Init, VarianceMatchesUniformMoment) {
  Linear L(200, 500);  // 1e5 weights
  init_params(L, {InitScheme::uniform_fan, 7});
  const double a = fan_bound(200, 500);
  double mean = 0, sq = 0;
  for (double w : L.weight().data()) mean += w;
  mean /= 1e5;
  for (double w : L.weight().data()) sq += (w - mean) * (w - mean);
  const double var = sq / (1e5 - 1);
  EXPECT_NEAR(var / (a * a / 3.0), 1.0, 0.05);
}

TEST(Init, ZerosScheme) {
  Mlp m(3, 4, 2);
  init_params(m, {InitScheme::zeros, 1});
  for (const auto& p : m.parameters())
    for (double v : p.data()) EXPECT_EQ(v, 0.0);
}

TEST(Attention, IndivisibleDimensionIsConfigError) {
  EXPECT_THROW(MultiHeadAttention(10, 4), ConfigError);
  EXPECT_NO_THROW(MultiHeadAttention(8, 4));
}

TEST(Attention, MatchesLoopOracle) {
  MultiHeadAttention mha(8, 2);
  init_params(mha, {InitScheme::uniform_fan, 9});
  Rng rng(90);
  for (auto* L : {&mha.query(), &mha.key(), &mha.value(), &mha.output()}) fill_uniform(L->bias(), 0.3, rng);
  Tensor q = oracle::random({3, 8}, 10), kv = oracle::random({4, 8}, 11);
  auto out = mha.forward_with_weights(q, kv);
  EXPECT_EQ(out.output.shape(), q.shape());
  auto ref = attention_oracle(mha, q, kv);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out.output[i], ref[i], 1e-13);
  // Each query's weights form a probability distribution.
  for (std::size_t row = 0; row < 2 * 3; ++row) {
    double s = 0;
    for (std::size_t j = 0; j < 4; ++j) {
      EXPECT_GE(out.weights[row * 4 + j], 0.0);
      s += out.weights[row * 4 + j];
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Attention, SingleKeyIgnoresQuery) {
  MultiHeadAttention mha(8, 2);
  init_params(mha, {InitScheme::uniform_fan, 12});
  Tensor kv = oracle::random({1, 8}, 13);
  auto a = mha.forward_with_weights(oracle::random({2, 8}, 14), kv);
  auto b = mha.forward_with_weights(oracle::random({2, 8}, 15), kv);
  for (double w : a.weights.data()) EXPECT_EQ(w, 1.0);
  // output = W_O(W_V kv) for every query row
  Tensor expected = mha.output().forward(mha.value().forward(kv));
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t j = 0; j < 8; ++j) {
      EXPECT_NEAR(a.output[r * 8 + j], expected[j], 1e-14);
      EXPECT_NEAR(b.output[r * 8 + j], expected[j], 1e-14);
    }
}

TEST(Attention, IdenticalKeysGiveUniformWeights) {
  MultiHeadAttention mha(8, 4);
  init_params(mha, {InitScheme::uniform_fan, 16});
  Tensor row = oracle::random({1, 8}, 17);
  Tensor kv = concat({row, row, row, row, row}, 0);
  auto out = mha.forward_with_weights(oracle::random({3, 8}, 18), kv);
  for (double w : out.weights.data()) EXPECT_NEAR(w, 0.2, 1e-15);
}

TEST(Attention, GradientMatchesFiniteDifferences) {
  MultiHeadAttention mha(8, 2);
  init_params(mha, {InitScheme::uniform_fan, 19});
  Tensor q = oracle::random({3, 8}, 20), kv = oracle::random({4, 8}, 21);
  auto r = check_gradients([&] { return probe(mha.forward(q, kv), 22); }, with_params(mha, {q, kv}));
  EXPECT_LE(r.max_rel_error, 1e-5);
}

TEST(Attention, BatchedEqualsPerSample) {
  MultiHeadAttention mha(8, 2);
  init_params(mha, {InitScheme::uniform_fan, 23});
  Tensor q = oracle::random({2, 3, 8}, 24), kv = oracle::random({2, 4, 8}, 25);
  Tensor batched = mha.forward(q, kv);
  for (std::size_t b = 0; b < 2; ++b) {
    Tensor single = mha.forward(reshape(slice(q, 0, b, 1), {3, 8}), reshape(slice(kv, 0, b, 1), {4, 8}));
    for (std::size_t i = 0; i < 24; ++i) EXPECT_NEAR(batched[b * 24 + i], single[i], 1e-14);
  }
}

TEST(LayerNorm, ConstantVectorNormalizesToZero) {
  LayerNorm ln(5);
  Tensor y = ln.forward(Tensor({2, 5}, 3.7));
  for (double v : y.data()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(LayerNorm, UnitMomentsWithUnitGain) {
  LayerNorm ln(64);
  // Large input variance so eps / var is negligible against the 1e-6 tolerance.
  Tensor x = oracle::random({4, 64}, 26, -100, 100);
  Tensor y = ln.forward(x);
  for (std::size_t r = 0; r < 4; ++r) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < 64; ++j) m += y[r * 64 + j];
    m /= 64;
    for (std::size_t j = 0; j < 64; ++j) v += (y[r * 64 + j] - m) * (y[r * 64 + j] - m);
    v /= 64;
    EXPECT_NEAR(m, 0.0, 1e-9);
    EXPECT_NEAR(v, 1.0, 1e-6);
  }
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  LayerNorm ln(6);
  Rng rng(27);
  fill_uniform(ln.gain(), 1.0, rng);
  fill_uniform(ln.shift(), 1.0, rng);
  Tensor x = oracle::random({3, 6}, 28);
  auto r = check_gradients([&] { return probe(ln.forward(x), 29); }, with_params(ln, {x}));
  EXPECT_LE(r.max_rel_error, 1e-5);
}

TEST(TransformerBlock, EveryParameterReceivesGradient) {
  TransformerBlock block(8, 2, 16);
  init_params(block, {InitScheme::uniform_fan, 30});
  Tensor x = oracle::random({2, 5, 8}, 31);
  backward(probe(block.forward(x), 32));
  expect_all_parameters_have_grad(block);
  EXPECT_EQ(block.named_parameters().size(), 4u + 8u + 4u);
}

TEST(TransformerBlock, ForwardIsPure) {
  TransformerBlock block(8, 2, 16);
  init_params(block, {InitScheme::uniform_fan, 33});
  Tensor x = oracle::random({2, 5, 8}, 34);
  Tensor a = block.forward(x), b = block.forward(x);
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST(TransformerBlock, GradientMatchesFiniteDifferences) {
  TransformerBlock block(8, 2, 12);
  init_params(block, {InitScheme::uniform_fan, 35});
  Tensor x = oracle::random({2, 3, 8}, 36);
  auto r = check_gradients([&] { return probe(block.forward(x), 37); }, with_params(block, {x}));
  EXPECT_LE(r.max_rel_error, 1e-5);
}
