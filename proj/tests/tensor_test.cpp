#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "exgn/errors.hpp"
#include "exgn/gradcheck.hpp"
#include "exgn/nn.hpp"
#include "exgn/ops.hpp"
#include "exgn/optim.hpp"

using namespace exgn;

namespace {

Tensor random_tensor(const Shape& shape, uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<real> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) x = static_cast<real>(dist(rng));
  return Tensor(shape, v);
}

std::vector<real> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(Elementwise, AddSigmoidSilu) {
  EXPECT_EQ(values(add(Tensor({2}, {1, 2}), Tensor({2}, {3, 4}))), (std::vector<real>{4, 6}));
  EXPECT_EQ(sigmoid(Tensor({1}, {0})).item(), real(0.5));
  EXPECT_EQ(silu(Tensor({1}, {0})).item(), real(0));
  Tensor b({1}, {2});
  EXPECT_EQ(elementwise(ElementwiseKind::mul, Tensor({2}, {1, 3}), &b).data()[1], real(6));
}

TEST(Elementwise, TrailingBroadcast) {
  Tensor a = Tensor::full({2, 3, 2}, 1);
  Tensor b({3, 1}, {10, 20, 30});
  Tensor c = add(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 3, 2}));
  EXPECT_EQ(c.at({1, 2, 1}), real(31));
  EXPECT_EQ(c.at({0, 1, 0}), real(21));
  EXPECT_THROW(add(Tensor::zeros({2, 3}), Tensor::zeros({2})), ShapeError);
}

TEST(Elementwise, NonFiniteIsAnError) {
  EXPECT_THROW(log(Tensor({1}, {0})), NumericError);
  EXPECT_THROW(div(Tensor({1}, {1}), Tensor({1}, {0})), NumericError);
}

TEST(Matmul, IdentityAndDot) {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor m({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(values(matmul(eye, m)), values(m));
  EXPECT_EQ(matmul(Tensor({1, 2}, {1, 2}), Tensor({2, 1}, {3, 4})).item(), real(11));
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

TEST(Matmul, BatchBroadcast) {
  Tensor a = random_tensor({3, 2, 4}, 1);
  Tensor b = random_tensor({1, 4, 5}, 2);
  Tensor c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{3, 2, 5}));
  for (int64_t bi = 0; bi < 3; ++bi) {
    for (int64_t i = 0; i < 2; ++i) {
      for (int64_t j = 0; j < 5; ++j) {
        double s = 0;
        for (int64_t k = 0; k < 4; ++k) s += a.at({bi, i, k}) * b.at({0, k, j});
        EXPECT_NEAR(c.at({bi, i, j}), s, 1e-5);
      }
    }
  }
}

TEST(Conv2d, IdentityKernel) {
  Tensor x = random_tensor({1, 1, 4, 4}, 3);
  Tensor w({1, 1, 1, 1}, {1});
  Tensor y = conv2d(x, w, Tensor::zeros({1}), 1, 0);
  EXPECT_EQ(values(y), values(x));
}

TEST(Conv2d, WindowSum) {
  Tensor x = Tensor::full({1, 1, 3, 3}, 1);
  Tensor w = Tensor::full({1, 1, 3, 3}, 1);
  Tensor y = conv2d(x, w, Tensor(), 1, 1);
  EXPECT_EQ(y.at({0, 0, 1, 1}), real(9));
  EXPECT_EQ(y.at({0, 0, 0, 0}), real(4));
}

TEST(Conv2d, StridedShapeAndErrors) {
  Tensor y = conv2d(Tensor::zeros({2, 3, 32, 32}), Tensor::zeros({8, 3, 3, 3}), Tensor(), 2, 1);
  EXPECT_EQ(y.shape(), (Shape{2, 8, 16, 16}));
  EXPECT_THROW(conv2d(Tensor::zeros({1, 1, 4, 4}), Tensor::zeros({1, 1, 2, 2}), Tensor(), 1, 0),
               ShapeError);
  EXPECT_THROW(conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 1, 3, 3}), Tensor(), 1, 1),
               ShapeError);
}

TEST(Softmax, ClosedForms) {
  auto u = softmax(Tensor({3}, {0, 0, 0}), 0);
  for (real v : u.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-7);
  auto big = softmax(Tensor({2}, {1000, 1000}), 0);
  EXPECT_EQ(values(big), (std::vector<real>{0.5, 0.5}));
  auto r = softmax(Tensor({2}, {0, static_cast<real>(std::log(3.0))}), 0);
  EXPECT_NEAR(r.data()[0], 0.25, 1e-7);
  EXPECT_NEAR(r.data()[1], 0.75, 1e-7);
}

TEST(Softmax, SlicesSumToOneProperty) {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Tensor x = random_tensor({3, 5, 4}, seed, -20, 20);
    for (int axis = 0; axis < 3; ++axis) {
      Tensor y = softmax(x, axis);
      Tensor s = sum(y, axis);
      for (real v : s.data()) EXPECT_NEAR(v, 1.0, 1e-6);
      for (real v : y.data()) EXPECT_GE(v, 0);
    }
  }
}

TEST(Softmax, LogComplementStaysFinite) {
  Tensor x({3}, {40, 0, 0});
  Tensor l = log1m_softmax(x, 0);
  EXPECT_NEAR(l.data()[0], std::log(2.0) - 40.0, 1e-4);
  EXPECT_NEAR(log_softmax(x, 0).data()[1], -40.0, 1e-4);
}

TEST(GroupNorm, ConstantInputGivesZeros) {
  Tensor y = group_norm(Tensor::full({1, 4, 3, 3}, 7), 2, Tensor::full({4}, 1), Tensor::zeros({4}));
  for (real v : y.data()) EXPECT_EQ(v, real(0));
}

TEST(GroupNorm, AffineCollapse) {
  Tensor y = group_norm(random_tensor({2, 4, 3, 3}, 5), 2, Tensor::zeros({4}), Tensor::full({4}, 3));
  for (real v : y.data()) EXPECT_EQ(v, real(3));
}

TEST(GroupNorm, NormalizedStatistics) {
  Tensor y = group_norm(random_tensor({2, 8, 4, 4}, 6, -3, 5), 4, Tensor::full({8}, 1),
                        Tensor::zeros({8}));
  const auto d = y.data();
  for (int64_t g = 0; g < 8; ++g) {  // (sample, group) blocks of 2 channels x 16
    double m = 0, v = 0;
    for (int64_t i = 0; i < 32; ++i) m += d[static_cast<size_t>(g * 32 + i)];
    m /= 32;
    for (int64_t i = 0; i < 32; ++i) v += std::pow(d[static_cast<size_t>(g * 32 + i)] - m, 2);
    v /= 32;
    EXPECT_LT(std::abs(m), 1e-5);
    EXPECT_LT(std::abs(v - 1.0), 1e-3);
  }
  EXPECT_THROW(group_norm(Tensor::zeros({1, 6, 2, 2}), 4, Tensor::zeros({6}), Tensor::zeros({6})),
               ShapeError);
}

TEST(Upsample, ConstantsAndRamp) {
  Tensor c = upsample_bilinear2x(Tensor::full({1, 2, 3, 3}, 5));
  EXPECT_EQ(c.shape(), (Shape{1, 2, 6, 6}));
  for (real v : c.data()) EXPECT_EQ(v, real(5));
  Tensor one = upsample_bilinear2x(Tensor({1, 1, 1, 1}, {2}));
  EXPECT_EQ(values(one), (std::vector<real>{2, 2, 2, 2}));
  // Column [0,1]: output rows sample at -0.25 (clamped), 0.25, 0.75, 1.25 (clamped).
  Tensor ramp = upsample_bilinear2x(Tensor({1, 1, 2, 1}, {0, 1}));
  EXPECT_EQ(ramp.shape(), (Shape{1, 1, 4, 2}));
  const std::vector<real> expect{0, 0, 0.25, 0.25, 0.75, 0.75, 1, 1};
  for (size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(ramp.data()[i], expect[i], 1e-7);
}

TEST(Pool, MaxAndAvg) {
  Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(pool2d(x, PoolKind::max, 2, 2).item(), real(4));
  EXPECT_EQ(pool2d(x, PoolKind::avg, 2, 2).item(), real(2.5));
  EXPECT_THROW(pool2d(Tensor::zeros({1, 1, 5, 5}), PoolKind::avg, 2, 2), ShapeError);
}

TEST(Pool, MaxGradientRoutesToArgmax) {
  Tape tape;
  Tensor x = Tensor({1, 1, 2, 2}, {1, 5, 3, 4}).set_requires_grad(true);
  {
    TapeScope scope(tape);
    backward(sum(pool2d(x, PoolKind::max, 2, 2)), tape);
  }
  EXPECT_EQ((std::vector<real>(x.grad().begin(), x.grad().end())),
            (std::vector<real>{0, 1, 0, 0}));
}

TEST(Backward, SumAndSquare) {
  Tape tape;
  TapeScope scope(tape);
  Tensor x = random_tensor({2, 3}, 9).set_requires_grad(true);
  backward(sum(x), tape);
  for (real g : x.grad()) EXPECT_EQ(g, real(1));

  Tensor y = Tensor({2}, {1, 2}).set_requires_grad(true);
  backward(sum(mul(y, y)), tape);
  EXPECT_EQ((std::vector<real>(y.grad().begin(), y.grad().end())), (std::vector<real>{2, 4}));
  EXPECT_TRUE(tape.empty());
}

TEST(Backward, FanOutAccumulates) {
  Tape tape;
  TapeScope scope(tape);
  Tensor x = Tensor({3}, {0.5, -1, 2}).set_requires_grad(true);
  // f = sum(3x) + sum(exp(x)); the two paths' gradients add.
  backward(add(sum(scale(x, 3)), sum(exp(x))), tape);
  for (size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(x.grad()[i], 3 + std::exp(x.data()[i]), 1e-5);
  }
}

TEST(Backward, RejectsNonScalar) {
  Tape tape;
  TapeScope scope(tape);
  Tensor x = Tensor::zeros({2}).set_requires_grad(true);
  EXPECT_THROW(backward(scale(x, 2), tape), ShapeError);
}

TEST(Backward, NoTapeNoRecording) {
  Tensor x = Tensor::zeros({2}).set_requires_grad(true);
  Tensor y = scale(x, 2);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Adam, ZeroGradientLeavesParams) {
  Tensor p = Tensor({2}, {1, -1}).set_requires_grad(true);
  p.zero_grad();
  p.grad();
  std::vector<Tensor> ps{p};
  AdamState st;
  adam_step(ps, st, AdamConfig{});
  EXPECT_EQ(values(p), (std::vector<real>{1, -1}));
}

TEST(Adam, FirstStepIsSignedLearningRate) {
  Tensor p = Tensor({3}, {0, 0, 0}).set_requires_grad(true);
  auto g = p.grad();
  g[0] = 3;
  g[1] = -0.01f;
  g[2] = 1e-3f;
  std::vector<Tensor> ps{p};
  AdamState st;
  adam_step(ps, st, AdamConfig{.lr = 0.1});
  EXPECT_NEAR(p.data()[0], -0.1, 1e-6);
  EXPECT_NEAR(p.data()[1], 0.1, 1e-6);
  EXPECT_NEAR(p.data()[2], -0.1, 1e-5);
}

TEST(Adam, TwoStepMomentRecursion) {
  Tensor p = Tensor({1}, {1}).set_requires_grad(true);
  std::vector<Tensor> ps{p};
  AdamState st;
  const double lr = 0.01, b1 = 0.9, b2 = 0.999, g = 0.5;
  p.grad()[0] = static_cast<real>(g);
  adam_step(ps, st, AdamConfig{.lr = lr});
  adam_step(ps, st, AdamConfig{.lr = lr});
  // m2 = (1-b1) g (1 + b1), v2 = (1-b2) g^2 (1 + b2); mhat = g, vhat = g^2.
  const double m2 = (1 - b1) * g * (1 + b1), v2 = (1 - b2) * g * g * (1 + b2);
  EXPECT_NEAR(st.m[0][0], m2, 1e-7);
  EXPECT_NEAR(st.v[0][0], v2, 1e-9);
  const double mhat = m2 / (1 - b1 * b1), vhat = v2 / (1 - b2 * b2);
  const double expected = 1 - lr * (1.0 / (1 + 1e-8 / g)) - lr * mhat / (std::sqrt(vhat) + 1e-8);
  EXPECT_NEAR(p.data()[0], expected, 1e-6);
  EXPECT_EQ(st.step, 2);
}

TEST(FiniteDiff, SumGivesOnes) {
  Tensor x = random_tensor({4}, 11);
  Tensor g = finite_diff_grad([](const Tensor& t) { return static_cast<double>(sum(t).item()); }, x,
                              0.5);
  for (real v : g.data()) EXPECT_NEAR(v, 1.0, 1e-5);
}

TEST(ShapeOps, PermuteConcatSlice) {
  Tensor x({2, 3}, {0, 1, 2, 3, 4, 5});
  Tensor t = transpose(x, 0, 1);
  EXPECT_EQ(values(t), (std::vector<real>{0, 3, 1, 4, 2, 5}));
  Tensor c = concat({x, x}, 1);
  EXPECT_EQ(c.shape(), (Shape{2, 6}));
  EXPECT_EQ(c.at({1, 4}), real(4));
  Tensor s = slice(c, 1, 2, 3);
  EXPECT_EQ(values(s), (std::vector<real>{2, 0, 1, 5, 3, 4}));
  Tensor st = stack({x, x}, 0);
  EXPECT_EQ(st.shape(), (Shape{2, 2, 3}));
  EXPECT_THROW(slice(x, 1, 2, 2), ShapeError);
}

TEST(Determinism, RepeatedOpsBitIdentical) {
  auto run = [] {
    Tensor x = random_tensor({2, 3, 8, 8}, 21);
    Tensor w = random_tensor({4, 3, 3, 3}, 22);
    Tensor y = conv2d(x, w, Tensor::zeros({4}), 2, 1);
    y = group_norm(silu(y), 2, Tensor::full({4}, 1), Tensor::zeros({4}));
    return values(softmax(upsample_bilinear2x(y), 1));
  };
  EXPECT_EQ(run(), run());
}

TEST(ParamStore, RegistrationAndFingerprint) {
  ParamStore ps(1);
  ps.add("a", {2, 3}, Init::kaiming_uniform, 3);
  EXPECT_THROW(ps.add("a", {1}, Init::zeros), ShapeError);
  ParamStore again(1);
  again.add("a", {2, 3}, Init::kaiming_uniform, 3);
  EXPECT_EQ(ps.fingerprint(), again.fingerprint());
  for (real v : ps.get("a").data()) EXPECT_LE(std::abs(v), std::sqrt(2.0) + 1e-6);
  Container c;
  ps.save(c, "x/");
  ParamStore other(99);
  other.add("a", {2, 3}, Init::zeros);
  other.load(c, "x/");
  EXPECT_EQ(other.fingerprint(), ps.fingerprint());
}
