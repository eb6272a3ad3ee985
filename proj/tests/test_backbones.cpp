#include <gtest/gtest.h>

#include <numeric>

#include "lesionfuse/backbones.hpp"
#include "lesionfuse/fusion.hpp"
#include "oracles.hpp"

using namespace lesionfuse;

namespace {

Tensor probe(const Tensor& y, std::uint64_t seed) { return sum(mul(y, oracle::random(y.shape(), seed))); }

Tensor images(std::size_t B, std::uint64_t seed, std::size_t hw = 32) { return oracle::random({B, 3, hw, hw}, seed); }

void expect_nonzero_grads(const Module& m) {
  for (const auto& [name, p] : m.named_parameters()) {
    ASSERT_TRUE(p.has_grad()) << name;
    double norm = 0;
    for (double g : p.grad()) norm += std::abs(g);
    EXPECT_GT(norm, 0.0) << name;
  }
}

}  // namespace

TEST(TinyCnn, DefaultOutputShape) {
  TinyCnn cnn({}, 1);
  auto map = std::get<SpatialMap>(cnn.forward(images(2, 2))).map;
  EXPECT_EQ(map.shape(), (Shape{2, 32, 4, 4}));
  EXPECT_EQ(cnn.feature_dim(), 32u);
}

TEST(TinyCnn, RejectsSmallInput) {
  TinyCnnConfig cfg;
  cfg.input = {3, 6, 32};
  EXPECT_THROW(TinyCnn(cfg, 1), ConfigError);
  cfg.input = {3, 8, 8};
  EXPECT_NO_THROW(TinyCnn(cfg, 1));
  cfg.channels = {4, 4, 4, 4};
  EXPECT_THROW(TinyCnn(cfg, 1), ConfigError);  // 8 >> 4 == 0
}

TEST(TinyCnn, ZeroInputGivesZeroMap) {
  TinyCnn cnn({}, 3);
  auto map = std::get<SpatialMap>(cnn.forward(Tensor({1, 3, 32, 32}))).map;
  for (double v : map.data()) EXPECT_EQ(v, 0.0);
}

TEST(TinyCnn, EveryParameterGetsNonzeroGradient) {
  TinyCnn cnn({}, 4);
  backward(probe(adapt(cnn.forward(images(3, 5))).v, 6));
  expect_nonzero_grads(cnn);
}

TEST(TinyCnn, SameSeedSameOutput) {
  TinyCnn a({}, 7), b({}, 7);
  Tensor x = images(2, 8);
  Tensor ya = std::get<SpatialMap>(a.forward(x)).map, yb = std::get<SpatialMap>(b.forward(x)).map;
  EXPECT_TRUE(std::equal(ya.data().begin(), ya.data().end(), yb.data().begin()));
}

TEST(TinyVit, TokenCounts) {
  TinyVit vit({}, 1);
  auto seq = std::get<TokenSeq>(vit.forward(images(2, 2))).tokens;
  EXPECT_EQ(seq.shape(), (Shape{2, 17, 32}));
  TinyVitConfig big_patch;
  big_patch.patch_size = 16;
  EXPECT_EQ(TinyVit(big_patch, 1).token_count(), 5u);
}

TEST(TinyVit, IndivisibleImageNamesDimensions) {
  TinyVitConfig cfg;
  cfg.input = {3, 32, 30};
  try {
    TinyVit vit(cfg, 1);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("32x30"), std::string::npos) << msg;
    EXPECT_NE(msg.find("patch size 8"), std::string::npos) << msg;
  }
}

TEST(TinyVit, PatchPermutationLeavesClassTokenUnchanged) {
  TinyVit vit({}, 9);
  Tensor patches = vit.patchify(images(2, 10));  // [2 x 16 x 192]
  Tensor base = vit.encode_patches(patches);

  std::vector<std::size_t> perm(16);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(11);
  std::shuffle(perm.begin(), perm.end(), rng);

  const std::size_t D = 32, F = patches.dim(2);
  Tensor shuffled({2, 16, F});
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 16; ++i)
      std::copy_n(patches.data().data() + (b * 16 + perm[i]) * F, F, shuffled.data().data() + (b * 16 + i) * F);
  Tensor& pos = vit.position_embeddings();
  const std::vector<double> original(pos.data().begin(), pos.data().end());
  for (std::size_t i = 0; i < 16; ++i)
    std::copy_n(original.data() + (1 + perm[i]) * D, D, pos.data().data() + (1 + i) * D);

  Tensor out = vit.encode_patches(shuffled);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t j = 0; j < D; ++j) EXPECT_NEAR(out[b * 17 * D + j], base[b * 17 * D + j], 1e-12);
    // Patch tokens are permuted the same way.
    for (std::size_t i = 0; i < 16; ++i)
      for (std::size_t j = 0; j < D; ++j)
        EXPECT_NEAR(out[(b * 17 + 1 + i) * D + j], base[(b * 17 + 1 + perm[i]) * D + j], 1e-12);
  }
}

TEST(TinyVit, EveryParameterGetsNonzeroGradient) {
  TinyVit vit({}, 12);
  backward(probe(adapt(vit.forward(images(2, 13))).v, 14));
  expect_nonzero_grads(vit);
}

TEST(TinyDualVit, DefaultTokenDims) {
  TinyDualVit dual({}, 1);
  auto tokens = std::get<MultiToken>(dual.forward(images(2, 2))).tokens;
  ASSERT_EQ(tokens.size(), 2u);
  EXPECT_EQ(tokens[0].shape(), (Shape{2, 32}));
  EXPECT_EQ(tokens[1].shape(), (Shape{2, 16}));
  EXPECT_EQ(dual.feature_dim(), 48u);
}

TEST(TinyDualVit, IdenticalBranchesGiveIdenticalTokens) {
  TinyDualVitConfig cfg;
  cfg.small = cfg.big;
  TinyDualVit dual(cfg, 5, 5);
  auto tokens = std::get<MultiToken>(dual.forward(images(2, 3))).tokens;
  EXPECT_TRUE(std::equal(tokens[0].data().begin(), tokens[0].data().end(), tokens[1].data().begin()));
}

TEST(TinyDualVit, GradientReachesBothBranches) {
  TinyDualVit dual({}, 4);
  backward(probe(adapt(dual.forward(images(2, 5))).v, 6));
  expect_nonzero_grads(dual);
}

TEST(FeatureBundle, Validation) {
  EXPECT_THROW(validate(FeatureBundle{TokenSeq{Tensor({2, 1, 4})}}), ShapeError);
  EXPECT_THROW(validate(FeatureBundle{MultiToken{{Tensor({2, 4})}}}), ShapeError);
  EXPECT_NO_THROW(validate(FeatureBundle{TokenSeq{Tensor({2, 2, 4})}}));
}
