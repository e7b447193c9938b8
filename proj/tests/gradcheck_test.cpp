// Analytic gradients of every differentiable op against central finite
// differences, run in the 64-bit build.
#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "exgn/gradcheck.hpp"
#include "exgn/nn.hpp"
#include "exgn/ops.hpp"

using namespace exgn;

static_assert(sizeof(real) == 8, "gradient checks run in the 64-bit build");

namespace {

constexpr double kStep = 1e-3;
constexpr double kTol = 1e-3;

Tensor random_tensor(const Shape& shape, uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<real> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) x = dist(rng);
  return Tensor(shape, v);
}

using Op = std::function<Tensor(const std::vector<Tensor>&)>;

// Projects op output onto fixed random weights so every output element
// contributes a distinct gradient signal, then compares all input grads.
double max_grad_error(const Op& op, std::vector<Tensor> inputs, uint64_t seed = 7) {
  for (auto& t : inputs) t = t.detach();
  Tensor probe_out = op(inputs);
  const Tensor weights = random_tensor(probe_out.shape(), seed);
  auto loss_of = [&](const std::vector<Tensor>& in) { return sum(mul(op(in), weights)); };

  for (auto& t : inputs) t.set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    backward(loss_of(inputs), tape);
  }
  double worst = 0;
  for (size_t i = 0; i < inputs.size(); ++i) {
    auto f = [&](const Tensor& xi) {
      std::vector<Tensor> in = inputs;
      in[i] = xi;
      return loss_of(in).item();
    };
    const Tensor numeric = finite_diff_grad(f, inputs[i], kStep);
    const auto analytic = inputs[i].grad();
    for (size_t j = 0; j < analytic.size(); ++j) {
      worst = std::max(worst, relative_error(analytic[j], numeric.data()[j], 1e-6));
    }
  }
  return worst;
}

}  // namespace

TEST(GradCheck, FiniteDiffExactForQuadratic) {
  Tensor g = finite_diff_grad([](const Tensor& t) { return sum(mul(t, t)).item(); },
                              Tensor({1}, {3}), 1e-3);
  EXPECT_NEAR(g.item(), 6.0, 1e-6);
}

TEST(GradCheck, BinaryBroadcast) {
  auto a = random_tensor({2, 3, 4}, 1);
  auto b = random_tensor({3, 1}, 2, 0.5, 1.5);
  EXPECT_LT(max_grad_error([](auto& in) { return add(in[0], in[1]); }, {a, b}), kTol);
  EXPECT_LT(max_grad_error([](auto& in) { return sub(in[0], in[1]); }, {a, b}), kTol);
  EXPECT_LT(max_grad_error([](auto& in) { return mul(in[0], in[1]); }, {a, b}), kTol);
  EXPECT_LT(max_grad_error([](auto& in) { return div(in[0], in[1]); }, {a, b}), kTol);
  auto c = random_tensor({4}, 3);
  EXPECT_LT(max_grad_error([](auto& in) { return mul(in[0], in[1]); }, {a, c}), kTol);
}

TEST(GradCheck, Unary) {
  auto x = random_tensor({3, 5}, 4, -2, 2);
  auto pos = random_tensor({3, 5}, 5, 0.2, 3);
  EXPECT_LT(max_grad_error([](auto& in) { return exp(in[0]); }, {x}), kTol);
  EXPECT_LT(max_grad_error([](auto& in) { return log(in[0]); }, {pos}), kTol);
  EXPECT_LT(max_grad_error([](auto& in) { return sigmoid(in[0]); }, {x}), kTol);
  EXPECT_LT(max_grad_error([](auto& in) { return silu(in[0]); }, {x}), kTol);
  EXPECT_LT(max_grad_error([](auto& in) { return scale(in[0], -2.5); }, {x}), kTol);
  EXPECT_LT(max_grad_error([](auto& in) { return add_scalar(in[0], 4.0); }, {x}), kTol);
  // Inputs kept away from the kink by more than the step.
  auto away = random_tensor({3, 5}, 6, 0.1, 1.0);
  auto signs = random_tensor({3, 5}, 8);
  for (size_t i = 0; i < 15; ++i) {
    if (signs.data()[i] < 0) away.mutable_data()[i] *= -1;
  }
  EXPECT_LT(max_grad_error([](auto& in) { return relu(in[0]); }, {away}), kTol);
}

TEST(GradCheck, Matmul) {
  EXPECT_LT(max_grad_error([](auto& in) { return matmul(in[0], in[1]); },
                           {random_tensor({3, 4}, 10), random_tensor({4, 2}, 11)}),
            kTol);
  EXPECT_LT(max_grad_error([](auto& in) { return matmul(in[0], in[1]); },
                           {random_tensor({2, 3, 4}, 12), random_tensor({4, 5}, 13)}),
            kTol);
  EXPECT_LT(max_grad_error([](auto& in) { return matmul(in[0], in[1]); },
                           {random_tensor({2, 1, 3, 4}, 14), random_tensor({3, 4, 2}, 15)}),
            kTol);
}

TEST(GradCheck, Conv2d) {
  auto x = random_tensor({1, 2, 5, 5}, 20);
  auto w = random_tensor({3, 2, 3, 3}, 21);
  auto b = random_tensor({3}, 22);
  for (int stride : {1, 2}) {
    EXPECT_LT(max_grad_error([stride](auto& in) { return conv2d(in[0], in[1], in[2], stride, 1); },
                             {x, w, b}),
              kTol);
  }
  EXPECT_LT(max_grad_error([](auto& in) { return conv2d(in[0], in[1], in[2], 1, 0); },
                           {random_tensor({2, 3, 4, 4}, 23), random_tensor({2, 3, 1, 1}, 24),
                            random_tensor({2}, 25)}),
            kTol);
}

TEST(GradCheck, SoftmaxFamily) {
  auto x = random_tensor({2, 3, 4}, 30, -3, 3);
  for (int axis : {0, 1, 2}) {
    EXPECT_LT(max_grad_error([axis](auto& in) { return softmax(in[0], axis); }, {x}), kTol);
    EXPECT_LT(max_grad_error([axis](auto& in) { return log_softmax(in[0], axis); }, {x}), kTol);
    EXPECT_LT(max_grad_error([axis](auto& in) { return log1m_softmax(in[0], axis); }, {x}), kTol);
  }
}

TEST(GradCheck, GroupNorm) {
  auto x = random_tensor({2, 4, 3, 3}, 40, -2, 2);
  auto g = random_tensor({4}, 41, 0.5, 1.5);
  auto b = random_tensor({4}, 42);
  EXPECT_LT(max_grad_error([](auto& in) { return group_norm(in[0], 2, in[1], in[2]); }, {x, g, b}),
            kTol);
}

TEST(GradCheck, UpsampleAndPool) {
  auto x = random_tensor({1, 2, 3, 3}, 50);
  EXPECT_LT(max_grad_error([](auto& in) { return upsample_bilinear2x(in[0]); }, {x}), kTol);
  EXPECT_LT(max_grad_error([](auto& in) { return upsample_bilinear(in[0], 4); }, {x}), kTol);
  auto p = random_tensor({1, 2, 4, 4}, 51);
  EXPECT_LT(max_grad_error([](auto& in) { return pool2d(in[0], PoolKind::avg, 2, 2); }, {p}), kTol);
  EXPECT_LT(max_grad_error([](auto& in) { return pool2d(in[0], PoolKind::max, 2, 2); }, {p}), kTol);
}

TEST(GradCheck, MaxPoolRoutesToArgmaxOnly) {
  Tensor x({1, 1, 2, 2}, {0.1, 0.9, 0.3, 0.4});
  Tensor numeric = finite_diff_grad(
      [](const Tensor& t) { return pool2d(t, PoolKind::max, 2, 2).item(); }, x, kStep);
  const std::vector<double> expect{0, 1, 0, 0};
  for (size_t i = 0; i < 4; ++i) EXPECT_NEAR(numeric.data()[i], expect[i], 1e-9);
}

TEST(GradCheck, Reductions) {
  auto x = random_tensor({3, 4, 2}, 60);
  for (int axis : {0, 1, 2}) {
    EXPECT_LT(max_grad_error([axis](auto& in) { return sum(in[0], axis); }, {x}), kTol);
    EXPECT_LT(max_grad_error([axis](auto& in) { return mean(in[0], axis, true); }, {x}), kTol);
    EXPECT_LT(max_grad_error([axis](auto& in) { return max(in[0], axis); }, {x}), kTol);
  }
  EXPECT_LT(max_grad_error([](auto& in) { return reshape(mean(in[0]), {1}); }, {x}), kTol);
}

TEST(GradCheck, ShapeOps) {
  auto x = random_tensor({2, 3, 4}, 70);
  auto y = random_tensor({2, 2, 4}, 71);
  EXPECT_LT(max_grad_error([](auto& in) { return permute(in[0], {2, 0, 1}); }, {x}), kTol);
  EXPECT_LT(max_grad_error([](auto& in) { return concat({in[0], in[1]}, 1); }, {x, y}), kTol);
  EXPECT_LT(max_grad_error([](auto& in) { return slice(in[0], 2, 1, 2); }, {x}), kTol);
  EXPECT_LT(max_grad_error([](auto& in) { return stack({in[0], in[0]}, 1); }, {x}), kTol);
  EXPECT_LT(max_grad_error([](auto& in) { return reshape(in[0], {4, 6}); }, {x}), kTol);
}

TEST(GradCheck, Attention) {
  auto q = random_tensor({2, 3, 4}, 80);
  auto k = random_tensor({2, 5, 4}, 81);
  auto v = random_tensor({2, 5, 6}, 82);
  EXPECT_LT(max_grad_error([](auto& in) { return attention(in[0], in[1], in[2]); }, {q, k, v}),
            kTol);
}
