// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "gradcheck.hpp"
#include "iavit/model/iavit.hpp"

namespace iavit {
namespace {

Tensor random_image(const ModelConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Tensor img(Shape{cfg.channels, cfg.image_size, cfg.image_size});
  for (auto& v : img.data) v = u(rng);
  return img;
}

std::vector<Tensor> random_images(const ModelConfig& cfg, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_image(cfg, rng));
  return out;
}

ModelConfig small_config() {
  ModelConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.embed_dim = 16;
  c.heads = 2;
  c.depth = 2;
  c.classes = 3;
  return c;
}

// Larger init so attention is visibly non-uniform in the property checks.
ModelConfig sharp_config() {
  auto c = small_config();
  c.init_std = 0.5;
  return c;
}

TEST(ModelConfig, RejectsIndivisiblePatchSize) {
  ModelConfig c;
  c.patch_size = 5;
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "model.image_size");
  }
}

TEST(ModelConfig, RejectsHeadsNotDividingWidth) {
  ModelConfig c;
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModelConfig, RejectsSingleClass) {
  ModelConfig c;
  c.classes = 1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModelConfig, DefaultsAreDeskScale) {
  ModelConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.num_patches(), 16u);
  EXPECT_EQ(c.embed_dim, 64u);
  EXPECT_EQ(c.depth, 2u);
  EXPECT_EQ(c.heads, 4u);
  EXPECT_EQ(c.interpreter_hidden, 0u);
}

TEST(Patchify, WholeImageIsOnePatch) {
  ModelConfig c;
  c.image_size = 4;
  c.patch_size = 4;
  Tensor img(Shape{1, 4, 4});
  std::iota(img.data.begin(), img.data.end(), 0.0f);
  auto p = patchify(img, c);
  EXPECT_EQ(p.shape, (Shape{1, 16}));
  EXPECT_EQ(p.data, img.data);
}

TEST(Patchify, FirstPatchIsTopLeftBlock) {
  ModelConfig c;
  c.image_size = 4;
  c.patch_size = 2;
  Tensor img(Shape{1, 4, 4});
  std::iota(img.data.begin(), img.data.end(), 0.0f);
  auto p = patchify(img, c);
  ASSERT_EQ(p.shape, (Shape{4, 4}));
  EXPECT_EQ(std::vector<float>(p.data.begin(), p.data.begin() + 4), (std::vector<float>{0, 1, 4, 5}));
  EXPECT_EQ(std::vector<float>(p.data.begin() + 4, p.data.begin() + 8), (std::vector<float>{2, 3, 6, 7}));
  EXPECT_EQ(std::vector<float>(p.data.begin() + 12, p.data.end()), (std::vector<float>{10, 11, 14, 15}));
}

TEST(Patchify, RoundTripIsIdentity) {
  ModelConfig c;
  c.image_size = 12;
  c.patch_size = 4;
  c.channels = 3;
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto img = random_image(c, rng);
    EXPECT_EQ(unpatchify(patchify(img, c), c).data, img.data);
  }
}

TEST(Patchify, RejectsWrongImageShape) {
  ModelConfig c;
  EXPECT_THROW(patchify(Tensor(Shape{1, 16, 16}), c), DimensionError);
}

TEST(ExtractFeatures, ShapeIsTokensByWidth) {
  for (std::size_t depth : {0u, 1u, 3u}) {
    auto c = small_config();
    c.depth = depth;
    IAViT m(c, 1);
    auto imgs = random_images(c, 2, 4);
    Tape tape(false);
    auto f = extract_features(tape, m, constant(make_batch<float>(std::span<const Tensor>(imgs), c)));
    EXPECT_EQ(f.z->shape, (Shape{2, c.tokens(), c.embed_dim}));
    EXPECT_EQ(f.trace.msa.size(), depth);
  }
}

TEST(ExtractFeatures, ZeroDepthIsPositionedPatchProjection) {
  auto c = small_config();
  c.depth = 0;
  BasicIAViT<double> m(c, 9);
  for (auto& v : m.cls->data) v = 0.3;
  std::mt19937_64 rng(5);
  auto img = random_image(c, rng);
  BasicTensor<double> dimg(img.shape);
  dimg.data.assign(img.data.begin(), img.data.end());
  auto patches = patchify(dimg, c);
  BasicTape<double> tape(false);
  BasicTensor<double> batch = patches;
  batch.shape.insert(batch.shape.begin(), 1);
  auto f = extract_features(tape, m, constant(batch));
  const std::size_t d = c.embed_dim;
  for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(f.z->data[j], 0.3 + m.pos->data[j], 1e-12);
  for (std::size_t n = 0; n < c.num_patches(); ++n)
    for (std::size_t j = 0; j < d; ++j) {
      double e = m.patch_b->data[j] + m.pos->data[(n + 1) * d + j];
      for (std::size_t k = 0; k < c.patch_dim(); ++k) e += patches.data[n * c.patch_dim() + k] * m.patch_w->data[k * d + j];
      EXPECT_NEAR(f.z->data[(n + 1) * d + j], e, 1e-12);
    }
}

TEST(ExtractFeatures, AttentionRowsAreStochastic) {
  const auto c = sharp_config();
  IAViT m(c, 11);
  auto imgs = random_images(c, 100, 12);
  Tape tape(false);
  auto fwd = forward_images(tape, m, std::span<const Tensor>(imgs));
  for (const auto& a : fwd.trace.msa) {
    const std::size_t t = c.tokens(), rows = a->size() / t;
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t k = 0; k < t; ++k) s += a->data[r * t + k];
      ASSERT_NEAR(s, 1.0, 1e-5);
    }
  }
}

TEST(ExtractFeatures, Deterministic) {
  const auto c = small_config();
  IAViT a(c, 2), b(c, 2);
  auto imgs = random_images(c, 3, 8);
  Tape t1(false), t2(false);
  auto fa = forward_images(t1, a, std::span<const Tensor>(imgs));
  auto fb = forward_images(t2, b, std::span<const Tensor>(imgs));
  EXPECT_EQ(fa.z->data, fb.z->data);
  EXPECT_EQ(fa.pred_logits->data, fb.pred_logits->data);
}

TEST(Predict, ZeroWeightsGiveZeroLogits) {
  const auto c = small_config();
  IAViT m(c, 1);
  std::fill(m.pred_w->data.begin(), m.pred_w->data.end(), 0.0f);
  Tape tape(false);
  auto out = predict(tape, m, constant(Tensor(Shape{c.embed_dim}, 0.7f)));
  for (float v : out->data) EXPECT_EQ(v, 0.0f);
}

TEST(Predict, DependsOnClsEmbedding) {
  const auto c = sharp_config();
  IAViT m(c, 1);
  Tape tape(false);
  auto a = predict(tape, m, constant(Tensor(Shape{c.embed_dim}, 0.5f)));
  auto b = predict(tape, m, constant(Tensor(Shape{c.embed_dim}, -0.5f)));
  EXPECT_NE(a->data, b->data);
}

TEST(Predict, MatchesHandComputedAffineMap) {
  ModelConfig c;
  c.image_size = 2;
  c.patch_size = 1;
  c.embed_dim = 2;
  c.heads = 1;
  c.classes = 2;
  IAViT m(c, 0);
  m.pred_w->data = {1, 2, 3, 4};  // rows index the embedding
  m.pred_b->data = {0.5f, -0.5f};
  Tape tape(false);
  auto out = predict(tape, m, constant(Tensor(Shape{2}, std::vector<float>{1, -1})));
  // [1, -1] * [[1, 2], [3, 4]] + [0.5, -0.5] = [-1.5, -2.5]
  EXPECT_EQ(out->data, (std::vector<float>{-1.5f, -2.5f}));
}

TEST(Interpret, SinglePatchAttendsToItself) {
  ModelConfig c;
  c.image_size = 8;
  c.patch_size = 8;
  c.embed_dim = 8;
  c.heads = 2;
  c.init_std = 0.5;
  IAViT m(c, 3);
  std::mt19937_64 rng(1);
  auto z = testing::random_tensor(Shape{1, 1, c.embed_dim}, rng);
  Tensor zf(z.shape);
  zf.data.assign(z.data.begin(), z.data.end());
  Tape tape(false);
  auto out = interpret(tape, m, constant(zf));
  ASSERT_EQ(out.attention->shape, (Shape{1, 1, 1}));
  EXPECT_EQ(out.attention->data[0], 1.0f);
  EXPECT_EQ(out.features->data, out.values->data);
}

TEST(Interpret, OutputIsConvexCombinationOfValues) {
  const auto c = sharp_config();
  IAViT m(c, 21);
  std::mt19937_64 rng(22);
  const std::size_t n = c.num_patches(), d = c.embed_dim;
  for (int trial = 0; trial < 100; ++trial) {
    Tensor z(Shape{1, n, d});
    std::normal_distribution<float> g(0.0f, 2.0f);
    for (auto& v : z.data) v = g(rng);
    Tape tape(false);
    auto out = interpret(tape, m, constant(z));
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += out.attention->data[i * n + j];
      ASSERT_NEAR(s, 1.0, 1e-6);
    }
    auto max_row_norm = [&](const Tensor& t) {
      double best = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) s += double(t.data[i * d + k]) * t.data[i * d + k];
        best = std::max(best, std::sqrt(s));
      }
      return best;
    };
    ASSERT_LE(max_row_norm(*out.features), max_row_norm(*out.values) * (1.0 + 1e-6));
  }
}

TEST(Interpret, LogitsAreMeanOfPatchLogits) {
  const auto c = sharp_config();
  IAViT m(c, 5);
  auto imgs = random_images(c, 2, 6);
  Tape tape(false);
  auto feats = extract_features(tape, m, constant(make_batch<float>(std::span<const Tensor>(imgs), c)));
  auto out = interpret(tape, m, slice(tape, feats.z, 1, 1, c.tokens()));
  const std::size_t n = c.num_patches(), k = c.classes;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t j = 0; j < k; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += out.patch_logits->data[(b * n + i) * k + j];
      EXPECT_NEAR(out.logits->data[b * k + j], s / n, 1e-5);
    }
}

TEST(Interpret, TwoLayerHeadWhenHiddenWidthSet) {
  auto c = small_config();
  c.interpreter_hidden = 8;
  IAViT m(c, 5);
  ASSERT_TRUE(m.int_w2);
  EXPECT_EQ(m.int_w1->shape, (Shape{c.embed_dim, 8}));
  auto imgs = random_images(c, 1, 2);
  Tape tape(false);
  auto fwd = forward_images(tape, m, std::span<const Tensor>(imgs));
  EXPECT_EQ(fwd.int_logits->shape, (Shape{1, c.classes}));
}

TEST(ForwardFull, ShapesAndCompleteTrace) {
  const auto c = small_config();
  IAViT m(c, 5);
  auto imgs = random_images(c, 4, 2);
  Tape tape(false);
  auto fwd = forward_images(tape, m, std::span<const Tensor>(imgs));
  EXPECT_EQ(fwd.pred_logits->shape, (Shape{4, c.classes}));
  EXPECT_EQ(fwd.int_logits->shape, (Shape{4, c.classes}));
  ASSERT_EQ(fwd.trace.msa.size(), c.depth);
  for (const auto& a : fwd.trace.msa) EXPECT_EQ(a->shape, (Shape{4, c.heads, c.tokens(), c.tokens()}));
  EXPECT_EQ(fwd.trace.ssa->shape, (Shape{4, c.num_patches(), c.num_patches()}));
  auto one = sample_trace(fwd.trace, 3);
  EXPECT_EQ(one.msa.front().shape, (Shape{c.heads, c.tokens(), c.tokens()}));
  EXPECT_EQ(one.ssa.shape, (Shape{c.num_patches(), c.num_patches()}));
}

TEST(ForwardFull, UntrainedHeadsAreNearUniform) {
  ModelConfig c;  // default desk-scale config, default init
  IAViT m(c, 17);
  auto imgs = random_images(c, 16, 18);
  Tape tape(false);
  auto fwd = forward_images(tape, m, std::span<const Tensor>(imgs));
  auto check = [&](const Var& logits) {
    for (std::size_t b = 0; b < 16; ++b) {
      double mx = -1e30, z = 0.0, h = 0.0;
      for (std::size_t k = 0; k < c.classes; ++k) mx = std::max(mx, double(logits->data[b * c.classes + k]));
      std::vector<double> p(c.classes);
      for (std::size_t k = 0; k < c.classes; ++k) z += p[k] = std::exp(logits->data[b * c.classes + k] - mx);
      for (double& v : p) h -= (v / z) * std::log(v / z);
      EXPECT_GE(h, 0.9 * std::log(double(c.classes)));
    }
  };
  check(fwd.pred_logits);
  check(fwd.int_logits);
}

TEST(ForwardFull, PermutingPatchesWithPositionsLeavesPredictionUnchanged) {
  const auto c = sharp_config();
  BasicIAViT<double> m(c, 31);
  std::mt19937_64 rng(32);
  const std::size_t n = c.num_patches(), pd = c.patch_dim(), d = c.embed_dim;
  auto patches = testing::random_tensor(Shape{1, n, pd}, rng, 0.0, 1.0);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);

  BasicTape<double> t1(false);
  auto base = forward_full(t1, m, constant(patches));

  auto permuted = patches;
  BasicIAViT<double> mp = m;
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(patches.data.begin() + perm[i] * pd, pd, permuted.data.begin() + i * pd);
    std::copy_n(m.pos->data.begin() + (perm[i] + 1) * d, d, mp.pos->data.begin() + (i + 1) * d);
  }
  BasicTape<double> t2(false);
  auto moved = forward_full(t2, mp, constant(permuted));
  for (std::size_t k = 0; k < c.classes; ++k) EXPECT_NEAR(moved.pred_logits->data[k], base.pred_logits->data[k], 1e-5);
}

TEST(ForwardFull, HeadsDoNotLeakIntoEachOther) {
  const auto c = sharp_config();
  IAViT m(c, 41);
  auto imgs = random_images(c, 3, 42);
  auto grads_of = [&](bool pred_side) {
    m.set_trainable(true);
    Tape tape;
    auto fwd = forward_images(tape, m, std::span<const Tensor>(imgs));
    tape.backward(sum(tape, pred_side ? fwd.pred_logits : fwd.int_logits));
    return m.named_parameters();
  };
  for (const auto& [name, v] : grads_of(true)) {
    if (name.rfind("interpreter.", 0) != 0) continue;
    for (float g : v->grad) ASSERT_EQ(g, 0.0f) << name;
  }
  m.zero_grad();
  for (const auto& [name, v] : grads_of(false)) {
    if (name.rfind("predictor.", 0) != 0) continue;
    for (float g : v->grad) ASSERT_EQ(g, 0.0f) << name;
  }
}

TEST(Model, CopyIsDeepAndCastPreservesValues) {
  const auto c = small_config();
  IAViT a(c, 3);
  IAViT b = a;
  b.pred_w->data[0] += 1.0f;
  EXPECT_NE(a.pred_w->data[0], b.pred_w->data[0]);
  auto d = a.cast<double>();
  EXPECT_EQ(d.parameter_count(), a.parameter_count());
  EXPECT_EQ(d.pos->data[5], static_cast<double>(a.pos->data[5]));
}

TEST(Model, InitializationFollowsConvention) {
  ModelConfig c;
  IAViT m(c, 1);
  for (float v : m.cls->data) EXPECT_EQ(v, 0.0f);
  for (float v : m.blocks[0].bq->data) EXPECT_EQ(v, 0.0f);
  for (float v : m.blocks[0].norm1_g->data) EXPECT_EQ(v, 1.0f);
  double sq = 0.0, mx = 0.0;
  for (float v : m.blocks[0].fc1_w->data) {
    sq += double(v) * v;
    mx = std::max(mx, double(std::abs(v)));
  }
  EXPECT_LE(mx, 2.0 * c.init_std + 1e-7);
  const double sd = std::sqrt(sq / m.blocks[0].fc1_w->size());
  EXPECT_NEAR(sd, 0.88 * c.init_std, 0.1 * c.init_std);  // sd of a normal truncated at 2 sigma is about 0.88 sigma
}

}  // namespace
}  // namespace iavit
