// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "iavit/numerics/ops.hpp"

namespace iavit {
namespace {

using testing::check_gradients;
using testing::DTape;
using testing::DTensor;
using testing::DVar;
using testing::project;
using testing::random_tensor;

Var leaf(Shape shape, std::vector<float> values) { return constant(Tensor(std::move(shape), std::move(values))); }

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tape tape(false);
  auto out = matmul(tape, leaf({2, 2}, {1, 0, 0, 1}), leaf({2, 2}, {1, 2, 3, 4}));
  EXPECT_EQ(out->shape, (Shape{2, 2}));
  EXPECT_EQ(out->data, (std::vector<float>{1, 2, 3, 4}));
}

TEST(Matmul, RowTimesColumn) {
  Tape tape(false);
  auto out = matmul(tape, leaf({1, 2}, {1, 2}), leaf({2, 1}, {3, 4}));
  EXPECT_EQ(out->shape, (Shape{1, 1}));
  EXPECT_EQ(out->data[0], 11.0f);
}

TEST(Matmul, MatchesTripleLoopExactly) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<float> dist(-2.0f, 2.0f);
  Tensor a({5, 7}), b({7, 3});
  for (auto& v : a.data) v = dist(rng);
  for (auto& v : b.data) v = dist(rng);
  Tape tape(false);
  auto out = matmul(tape, constant(a), constant(b));
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      float acc = 0.0f;
      for (std::size_t k = 0; k < 7; ++k) acc += a.at(i, k) * b.at(k, j);
      EXPECT_EQ(out->at(i, j), acc) << i << "," << j;
    }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape tape(false);
  try {
    matmul(tape, leaf({2, 3}, std::vector<float>(6)), leaf({2, 2}, std::vector<float>(4)));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[2x2]"), std::string::npos);
  }
}

TEST(Softmax, SymmetricRowIsUniform) {
  Tape tape(false);
  auto out = softmax_rows(tape, leaf({1, 2}, {0, 0}));
  EXPECT_FLOAT_EQ(out->data[0], 0.5f);
  EXPECT_FLOAT_EQ(out->data[1], 0.5f);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  Tape tape(false);
  auto out = softmax_rows(tape, leaf({1, 3}, {1000, 1000, 1000}));
  for (float v : out->data) EXPECT_NEAR(v, 1.0 / 3.0, 1e-6);
}

TEST(Softmax, MatchesDirectFormula) {
  Tape tape(false);
  auto out = softmax_rows(tape, leaf({1, 3}, {1, 2, 3}));
  const long double denom = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(out->data[j], static_cast<double>(std::exp(j + 1.0L) / denom), 1e-6);
}

TEST(Softmax, RowsAreDistributions) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<float> dist(-30.0f, 30.0f);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor x({4, 9});
    for (auto& v : x.data) v = dist(rng);
    Tape tape(false);
    auto y = softmax_rows(tape, constant(x));
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0;
      for (std::size_t j = 0; j < 9; ++j) {
        const float p = y->at(r, j);
        EXPECT_GE(p, 0.0f);
        EXPECT_LE(p, 1.0f);
        total += p;
      }
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  }
}

TEST(Softmax, RejectsNonFiniteInput) {
  Tape tape(false);
  EXPECT_THROW(softmax_rows(tape, leaf({1, 2}, {0, std::nanf("")})), NumericError);
}

TEST(Backward, SumGivesOnes) {
  auto w = parameter(Tensor({3}, {1, -2, 5}));
  Tape tape;
  tape.backward(sum(tape, w));
  EXPECT_EQ(w->grad, (std::vector<float>{1, 1, 1}));
}

TEST(Backward, SquareGivesTwiceInput) {
  auto w = parameter(Tensor({2}, {1, 2}));
  Tape tape;
  tape.backward(sum(tape, mul(tape, w, w)));
  EXPECT_EQ(w->grad, (std::vector<float>{2, 4}));
}

TEST(Backward, RejectsNonScalarLoss) {
  auto w = parameter(Tensor({2}, {1, 2}));
  Tape tape;
  auto y = scale(tape, w, 2.0f);
  EXPECT_THROW(tape.backward(y), DimensionError);
}

TEST(Backward, SecondCallWithoutResetFails) {
  auto w = parameter(Tensor({2}, {1, 2}));
  Tape tape;
  auto loss = sum(tape, w);
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), std::logic_error);
  tape.reset();
  auto again = sum(tape, w);
  EXPECT_NO_THROW(tape.backward(again));
  EXPECT_EQ(w->grad, (std::vector<float>{2, 2}));  // leaf gradients accumulate
}

TEST(Backward, EmptyTapeFails) {
  auto w = parameter(Tensor({1}, {1}));
  Tape tape;
  EXPECT_THROW(tape.backward(w), std::logic_error);
}

TEST(Backward, TapeVisitsInReverseOrder) {
  // y = exp(2w) touches each recorded op once; a wrong order would read an
  // unpopulated gradient and yield zero.
  auto w = parameter(Tensor({1}, {0.3f}));
  Tape tape;
  auto y = sum(tape, exp(tape, scale(tape, w, 2.0f)));
  EXPECT_EQ(tape.size(), 3u);
  tape.backward(y);
  EXPECT_NEAR(w->grad[0], 2.0 * std::exp(0.6), 1e-5);
}

TEST(Forward, DeterministicReplay) {
  std::mt19937_64 rng(3);
  std::normal_distribution<float> dist;
  Tensor x({6, 8}), w({8, 8}), g({8}, 1.0f), b({8}, 0.0f);
  for (auto& v : x.data) v = dist(rng);
  for (auto& v : w.data) v = dist(rng);
  auto run = [&] {
    Tape tape(false);
    auto h = layer_norm(tape, matmul(tape, constant(x), constant(w)), constant(g), constant(b));
    return softmax(tape, gelu(tape, h))->data;
  };
  EXPECT_EQ(run(), run());
}

// Finite-difference property checks: 100 random small instances per op.
class GradientFidelity : public ::testing::Test {
 protected:
  std::mt19937_64 rng{2024};
  std::uniform_int_distribution<std::size_t> extent{1, 4};

  void expect_fidelity(const testing::ScalarGraph& graph, std::vector<DVar> leaves) {
    auto report = check_gradients(std::move(leaves), graph);
    EXPECT_LE(report.max_rel_error, 1e-3);
  }
};

TEST_F(GradientFidelity, Matmul) {
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = extent(rng), k = extent(rng), n = extent(rng);
    expect_fidelity([&](DTape& t, const auto& v) { return project(t, matmul(t, v[0], v[1]), trial); },
                    {constant(random_tensor({m, k}, rng)), constant(random_tensor({k, n}, rng))});
  }
}

TEST_F(GradientFidelity, BatchedMatmulBothLayouts) {
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t b = extent(rng), m = extent(rng), k = extent(rng), n = extent(rng);
    const bool transposed = trial % 2 == 1;
    Shape rhs = transposed ? Shape{b, n, k} : Shape{b, k, n};
    expect_fidelity([&](DTape& t, const auto& v) { return project(t, bmm(t, v[0], v[1], transposed), trial); },
                    {constant(random_tensor({b, m, k}, rng)), constant(random_tensor(rhs, rng))});
  }
}

TEST_F(GradientFidelity, ElementwiseArithmetic) {
  for (int trial = 0; trial < 100; ++trial) {
    const Shape s{extent(rng), extent(rng)};
    expect_fidelity(
        [&](DTape& t, const auto& v) {
          auto y = add(t, mul(t, v[0], v[1]), sub(t, scale(t, v[0], 0.7), add_scalar(t, v[1], 0.2)));
          return project(t, add_broadcast(t, y, v[2]), trial);
        },
        {constant(random_tensor(s, rng)), constant(random_tensor(s, rng)), constant(random_tensor({s[1]}, rng))});
  }
}

TEST_F(GradientFidelity, SoftmaxAndLayerNorm) {
  for (int trial = 0; trial < 100; ++trial) {
    // Rows of width >= 3: a 1-wide row has zero variance and a flat normalized output.
    const Shape s{extent(rng), extent(rng) + 2};
    expect_fidelity(
        [&](DTape& t, const auto& v) {
          return project(t, softmax(t, layer_norm(t, v[0], v[1], v[2])), trial);
        },
        {constant(random_tensor(s, rng, -2, 2)), constant(random_tensor({s[1]}, rng)),
         constant(random_tensor({s[1]}, rng))});
  }
}

TEST_F(GradientFidelity, GeluExpLogSqrt) {
  for (int trial = 0; trial < 100; ++trial) {
    const Shape s{extent(rng), extent(rng)};
    expect_fidelity(
        [&](DTape& t, const auto& v) {
          auto a = gelu(t, v[0]);
          auto b = log_clamped(t, v[1], 1e-12, 10.0);
          auto c = sqrt_clamped(t, exp(t, v[0]));
          return project(t, add(t, add(t, a, b), c), trial);
        },
        {constant(random_tensor(s, rng, -3, 3)), constant(random_tensor(s, rng, 0.1, 2.0))});
  }
}

TEST_F(GradientFidelity, ReductionsAndLayout) {
  for (int trial = 0; trial < 100; ++trial) {
    const Shape s{extent(rng), extent(rng) + 1, extent(rng)};
    expect_fidelity(
        [&](DTape& t, const auto& v) {
          auto x = v[0];
          auto swapped = swap_axes(t, x, 0, 2);
          auto tr = transpose(t, swapped);
          auto r = reshape(t, tr, Shape{x->size()});
          auto m = mean_axis(t, x, 1);
          auto s1 = sum_axis(t, m, 0);
          auto total = add(t, mean(t, r), sum(t, s1));
          auto sl = slice(t, x, 1, 1, x->shape[1]);
          return add(t, total, project(t, concat(t, sl, x, 1), trial));
        },
        {constant(random_tensor(s, rng))});
  }
}

TEST_F(GradientFidelity, GatherNormalizeDistanceRepeat) {
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = extent(rng), m = extent(rng), d = extent(rng);
    std::vector<int> idx(n);
    for (auto& i : idx) i = static_cast<int>(rng() % d);
    expect_fidelity(
        [&](DTape& t, const auto& v) {
          auto g = gather_last(t, normalize_last(t, v[0]), idx);
          auto dist = pairwise_sqdist(t, v[1], v[2]);
          auto rep = repeat_leading(t, v[2], 2);
          return add(t, add(t, project(t, g, trial), project(t, dist, trial + 1)), project(t, rep, trial + 2));
        },
        {constant(random_tensor({n, d}, rng, 0.2, 1.0)), constant(random_tensor({n, d}, rng)),
         constant(random_tensor({m, d}, rng))});
  }
}

TEST(StopGradient, BlocksFlow) {
  auto w = parameter(Tensor({2}, {1, 2}));
  Tape tape;
  auto loss = sum(tape, mul(tape, stop_gradient(tape, w), w));
  tape.backward(loss);
  EXPECT_EQ(w->grad, (std::vector<float>{1, 2}));
}

}  // namespace
}  // namespace iavit
