#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "histovit/ops.hpp"
#include "support/gradcheck.hpp"

using namespace histovit;

namespace {

Tensor<double> naive_matmul(const Tensor<double>& a, const Tensor<double>& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<double> c(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t p = 0; p < k; ++p) s += a.at(i, p) * b.at(p, j);
      c.at(i, j) = s;
    }
  return c;
}

}  // namespace

TEST(Tensor, RejectsMismatchedData) {
  EXPECT_THROW(Tensor<float>(Shape{2, 3}, std::vector<float>(5)), DimensionError);
  Tensor<float> t(Shape{2, 3});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_THROW(t.reshaped(Shape{4}), DimensionError);
}

TEST(Tensor, DetectsNonFinite) {
  Tensor<float> t(Shape{3}, std::vector<float>{1.f, NAN, 2.f});
  EXPECT_FALSE(t.all_finite());
  EXPECT_THROW(require_finite(t, "t"), NumericError);
}

TEST(Matmul, IdentityAndKnownProduct) {
  GradTape<double> tape;
  auto a = tape.constant(Tensor<double>(Shape{2, 2}, {1, 2, 3, 4}));
  auto eye = tape.constant(Tensor<double>(Shape{2, 2}, {1, 0, 0, 1}));
  EXPECT_EQ(matmul(a, eye).value(), a.value());

  auto b = tape.constant(Tensor<double>(Shape{2, 2}, {5, 6, 7, 8}));
  const auto expected = naive_matmul(a.value(), b.value());
  EXPECT_EQ(expected, Tensor<double>(Shape{2, 2}, {19, 22, 43, 50}));
  EXPECT_EQ(matmul(a, b).value(), expected);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  GradTape<float> tape;
  auto a = tape.constant(Tensor<float>(Shape{2, 3}));
  auto b = tape.constant(Tensor<float>(Shape{2, 3}));
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3] and [2x3]"), std::string::npos);
  }
}

TEST(Matmul, BatchedBroadcastMatchesPerSlice) {
  Rng rng(3);
  GradTape<double> tape;
  auto a = tape.constant(test_support::random_tensor<double>({3, 2, 4}, rng));
  auto b = tape.constant(test_support::random_tensor<double>({4, 5}, rng));
  auto c = matmul(a, b).value();
  ASSERT_EQ(c.shape(), (Shape{3, 2, 5}));
  for (std::size_t s = 0; s < 3; ++s) {
    Tensor<double> slice(Shape{2, 4});
    std::copy_n(a.value().data().begin() + s * 8, 8, slice.data().begin());
    auto ref = naive_matmul(slice, b.value());
    for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(c[s * 10 + i], ref[i], 1e-12);
  }
}

TEST(Softmax, Examples) {
  GradTape<double> tape;
  auto u = softmax_lastdim(tape.constant(Tensor<double>(Shape{3}, {0, 0, 0}))).value();
  for (double v : u.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);

  auto p = softmax_lastdim(tape.constant(Tensor<double>(Shape{2}, {0, std::numbers::ln2}))).value();
  EXPECT_NEAR(p[0], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(p[1], 2.0 / 3.0, 1e-15);

  GradTape<float> ftape;
  auto big = softmax_lastdim(ftape.constant(Tensor<float>(Shape{2}, {1000.f, 0.f}))).value();
  EXPECT_TRUE(big.all_finite());
  EXPECT_NEAR(big[0], 1.0f, 1e-6f);
  EXPECT_NEAR(big[1], 0.0f, 1e-6f);

  EXPECT_THROW(softmax_lastdim(ftape.constant(Tensor<float>(Shape{2, 0}))), DimensionError);
}

TEST(Softmax, RowsAreDistributions) {
  Rng rng(11);
  GradTape<float> tape;
  auto y = softmax_lastdim(tape.constant(test_support::random_tensor<float>({7, 13}, rng, 20.0))).value();
  for (std::size_t r = 0; r < 7; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < 13; ++j) {
      EXPECT_GE(y.at(r, j), 0.f);
      EXPECT_LE(y.at(r, j), 1.f);
      s += y.at(r, j);
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(LayerNorm, Examples) {
  GradTape<double> tape;
  auto ones = tape.constant(Tensor<double>(Shape{2}, 1.0));
  auto zeros = tape.constant(Tensor<double>(Shape{2}, 0.0));
  auto c = layer_norm(tape.constant(Tensor<double>(Shape{2}, {4, 4})), ones, zeros, 1e-6).value();
  EXPECT_EQ(c[0], 0.0);
  EXPECT_EQ(c[1], 0.0);

  auto y = layer_norm(tape.constant(Tensor<double>(Shape{2}, {1, 3})), ones, zeros, 1e-12).value();
  EXPECT_NEAR(y[0], -1.0, 1e-9);
  EXPECT_NEAR(y[1], 1.0, 1e-9);

  auto fives = layer_norm(tape.constant(Tensor<double>(Shape{2}, {1, 3})), zeros,
                          tape.constant(Tensor<double>(Shape{2}, 5.0)), 1e-6)
                   .value();
  EXPECT_EQ(fives[0], 5.0);
  EXPECT_EQ(fives[1], 5.0);

  EXPECT_THROW(layer_norm(tape.constant(Tensor<double>(Shape{2}, {1, 3})), ones, zeros, 0.0), ConfigError);
}

TEST(BatchNorm, Examples) {
  GradTape<double> tape;
  Tensor<double> rm(Shape{1}, 0.0), rv(Shape{1}, 1.0);
  BatchNormState<double> st{&rm, &rv, 0.1, 1e-12};
  auto g = tape.constant(Tensor<double>(Shape{1}, 1.0));
  auto b = tape.constant(Tensor<double>(Shape{1}, 0.0));

  auto y = batch_norm_1d(tape.constant(Tensor<double>(Shape{2, 1}, {0, 2})), g, b, st, Mode::train).value();
  EXPECT_NEAR(y[0], -1.0, 1e-9);
  EXPECT_NEAR(y[1], 1.0, 1e-9);
  // running mean 0.9*0 + 0.1*1, running var 0.9*1 + 0.1*2 (unbiased)
  EXPECT_NEAR(rm[0], 0.1, 1e-15);
  EXPECT_NEAR(rv[0], 1.1, 1e-15);

  auto same = batch_norm_1d(tape.constant(Tensor<double>(Shape{3, 1}, {7, 7, 7})), g, b, st, Mode::train).value();
  for (double v : same.data()) EXPECT_EQ(v, 0.0);

  Tensor<double> m0(Shape{2}, 0.0), v1(Shape{2}, 1.0);
  BatchNormState<double> id{&m0, &v1, 0.1, 1e-300};
  auto x = Tensor<double>(Shape{2, 2}, {0.5, -2, 3, 4});
  auto e = batch_norm_1d(tape.constant(x), tape.constant(Tensor<double>(Shape{2}, 1.0)),
                         tape.constant(Tensor<double>(Shape{2}, 0.0)), id, Mode::eval)
               .value();
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(e[i], x[i], 1e-15);

  EXPECT_THROW(batch_norm_1d(tape.constant(Tensor<double>(Shape{1, 1}, {1})), g, b, st, Mode::train), ContractError);
}

TEST(Dropout, IdentityCasesAndConfigErrors) {
  Rng rng(1);
  GradTape<float> tape;
  auto x = tape.constant(test_support::random_tensor<float>({50}, rng));
  EXPECT_EQ(dropout(x, 0.0, Mode::train, rng).value(), x.value());
  EXPECT_EQ(dropout(x, 0.7, Mode::eval, rng).value(), x.value());
  EXPECT_THROW(dropout(x, 1.0, Mode::train, rng), ConfigError);
  EXPECT_THROW(dropout(x, -0.1, Mode::train, rng), ConfigError);
}

TEST(Dropout, SurvivorStatistics) {
  Rng rng(2024);
  GradTape<double> tape;
  const std::size_t n = 100000;
  auto x = tape.constant(Tensor<double>(Shape{n}, 1.0));
  auto y = dropout(x, 0.5, Mode::train, rng).value();
  std::size_t survivors = 0;
  double total = 0;
  for (double v : y.data()) {
    if (v != 0.0) {
      ++survivors;
      EXPECT_EQ(v, 2.0);
    }
    total += v;
  }
  EXPECT_NEAR(static_cast<double>(survivors) / n, 0.5, 0.01);
  EXPECT_NEAR(total / n, 1.0, 0.02);
}

TEST(Dropout, MaskReproducibleFromSeed) {
  GradTape<float> tape;
  Rng r0(5), r1(5), rx(0);
  auto x = tape.constant(test_support::random_tensor<float>({1000}, rx));
  EXPECT_EQ(dropout(x, 0.3, Mode::train, r0).value(), dropout(x, 0.3, Mode::train, r1).value());
}

TEST(CrossEntropy, Examples) {
  GradTape<double> tape;
  const std::vector<int> label{1};
  auto certain = tape.constant(Tensor<double>(Shape{1, 3}, {-1e4, 0, -1e4}));
  EXPECT_NEAR(cross_entropy(certain, std::span<const int>(label)).value().item(), 0.0, 1e-12);

  for (std::size_t c : {2u, 3u, 4u, 10u}) {
    auto uniform = tape.constant(Tensor<double>(Shape{2, c}, 0.5));
    const std::vector<int> ys{0, static_cast<int>(c) - 1};
    EXPECT_NEAR(cross_entropy(uniform, std::span<const int>(ys)).value().item(), std::log(double(c)), 1e-14);
  }

  const std::vector<int> bad{3};
  EXPECT_THROW(cross_entropy(tape.constant(Tensor<double>(Shape{1, 3})), std::span<const int>(bad)), IndexError);
  const std::vector<int> neg{-1};
  EXPECT_THROW(cross_entropy(tape.constant(Tensor<double>(Shape{1, 3})), std::span<const int>(neg)), IndexError);
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOneHotOverBatch) {
  GradTape<double> tape;
  auto z = tape.leaf(Tensor<double>(Shape{2, 2}, {0, std::numbers::ln2, 0, 0}));
  const std::vector<int> ys{1, 0};
  tape.backward(cross_entropy(z, std::span<const int>(ys)));
  auto g = tape.grad(z);
  EXPECT_NEAR(g.at(0, 0), (1.0 / 3.0) / 2, 1e-15);
  EXPECT_NEAR(g.at(0, 1), (2.0 / 3.0 - 1.0) / 2, 1e-15);
  EXPECT_NEAR(g.at(1, 0), (0.5 - 1.0) / 2, 1e-15);
  EXPECT_NEAR(g.at(1, 1), 0.5 / 2, 1e-15);
}

TEST(Backward, Examples) {
  GradTape<double> tape;
  auto x = tape.leaf(Tensor<double>(Shape{3}, {1, 2, 3}));
  tape.backward(sum(x));
  const auto gx = tape.grad(x);
  for (double g : gx.data()) EXPECT_EQ(g, 1.0);

  GradTape<double> t2;
  auto y = t2.leaf(Tensor<double>(Shape{3}, {1, 2, 3}));
  t2.backward(sum(mul(y, y)));
  EXPECT_EQ(t2.grad(y), Tensor<double>(Shape{3}, {2, 4, 6}));
}

TEST(Backward, NonScalarLossRejected) {
  GradTape<float> tape;
  auto x = tape.leaf(Tensor<float>(Shape{3}));
  EXPECT_THROW(tape.backward(x), ContractError);
}

TEST(Backward, UnreachableLeafHasZeroGradient) {
  GradTape<double> tape;
  auto x = tape.leaf(Tensor<double>(Shape{2}, {1, 2}));
  auto unused = tape.leaf(Tensor<double>(Shape{2}, {3, 4}));
  tape.backward(sum(x));
  EXPECT_EQ(tape.grad(unused), Tensor<double>(Shape{2}));
}

TEST(Backward, ParameterGradientsAccumulateAcrossCalls) {
  Parameter<double> p{"w", Tensor<double>(Shape{2}, {1, 2})};
  GradTape<double> tape;
  auto loss = sum(mul(tape.param(p), tape.param(p)));
  tape.backward(loss);
  tape.backward(loss);
  EXPECT_EQ(p.grad, Tensor<double>(Shape{2}, {4, 8}));
  p.zero_grad();
  EXPECT_EQ(p.grad, Tensor<double>(Shape{2}));
}

TEST(Backward, FrozenParameterGetsNoGradient) {
  Parameter<double> p{"w", Tensor<double>(Shape{2}, {1, 2})};
  p.trainable = false;
  GradTape<double> tape;
  tape.backward(sum(mul(tape.param(p), tape.leaf(Tensor<double>(Shape{2}, 1.0)))));
  EXPECT_NE(p.grad.shape(), p.value.shape());
}

TEST(Determinism, IdenticalSequencesAreBitwiseEqual) {
  auto run = [] {
    Rng rng(77);
    GradTape<float> tape;
    auto x = tape.leaf(test_support::random_tensor<float>({4, 6}, rng));
    auto w = tape.leaf(test_support::random_tensor<float>({6, 3}, rng));
    auto y = softmax_lastdim(gelu(matmul(x, w)));
    y = dropout(y, 0.25, Mode::train, rng);
    auto loss = sum(y);
    tape.backward(loss);
    return std::make_pair(y.value(), tape.grad(w));
  };
  EXPECT_EQ(run(), run());
}

TEST(Shapes, ConcatSliceGather) {
  GradTape<double> tape;
  auto a = tape.constant(Tensor<double>(Shape{1, 2}, {1, 2}));
  auto b = tape.constant(Tensor<double>(Shape{2, 2}, {3, 4, 5, 6}));
  auto c = concat<double>({a, b}, 0).value();
  EXPECT_EQ(c, Tensor<double>(Shape{3, 2}, {1, 2, 3, 4, 5, 6}));
  auto cols = concat<double>({b, b}, 1).value();
  EXPECT_EQ(cols, Tensor<double>(Shape{2, 4}, {3, 4, 3, 4, 5, 6, 5, 6}));
  EXPECT_EQ(slice(b, 1, 1, 1).value(), Tensor<double>(Shape{2, 1}, {4, 6}));
  EXPECT_THROW(slice(b, 1, 1, 2), DimensionError);
  const std::vector<std::size_t> idx{1, 1, 0};
  EXPECT_EQ(gather_rows(b, std::span<const std::size_t>(idx)).value(),
            Tensor<double>(Shape{3, 2}, {5, 6, 5, 6, 3, 4}));
  EXPECT_THROW(concat<double>({a, tape.constant(Tensor<double>(Shape{1, 3}))}, 0), DimensionError);
}
