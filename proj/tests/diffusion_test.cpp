#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "exgn/diffusion.hpp"
#include "exgn/errors.hpp"

using namespace exgn;

namespace {

Tensor random_tensor(const Shape& shape, uint64_t seed, double lo = 0.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<real> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) x = static_cast<real>(u(rng));
  return Tensor(shape, std::move(v));
}

std::vector<uint8_t> constant_classes(int64_t count, uint8_t c) {
  return std::vector<uint8_t>(static_cast<size_t>(count), c);
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

DiffusionConfig small_config() {
  DiffusionConfig cfg;
  cfg.widths = {16, 16, 32};
  cfg.d_txt = 8;
  return cfg;
}

// Overwrites parameters whose names start with `prefix` with uniform values,
// so zero-initialized layers stop masking the paths under test.
void randomize(ParamStore& ps, uint64_t seed, double amp, const std::string& prefix = "") {
  for (const auto& name : ps.names()) {
    if (name.rfind(prefix, 0) != 0) continue;
    Tensor p = ps.get(name);
    const Tensor r = random_tensor(p.shape(), seed++, -amp, amp);
    std::copy(r.data().begin(), r.data().end(), p.mutable_data().begin());
  }
}

void randomize_fusion(DiffusionModel& model, uint64_t seed) { randomize(model.mask_guide(), seed, 0.5, "proj"); }

}  // namespace

TEST(Schedule, TwoStepProducts) {
  const auto s = make_schedule(2, 0.1, 0.2);
  ASSERT_EQ(s.alpha_bars.size(), 2u);
  EXPECT_NEAR(s.alpha_bar(1), 0.9, 1e-12);
  EXPECT_NEAR(s.alpha_bar(2), 0.9 * 0.8, 1e-12);
  EXPECT_EQ(s.alpha_bar(0), 1.0);
}

TEST(Schedule, DefaultsStrictlyDecreasing) {
  const auto s = make_schedule();
  EXPECT_EQ(s.T, 100);
  for (int t = 1; t <= s.T; ++t) EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
  for (int t = 1; t < s.T; ++t) EXPECT_LT(s.betas[static_cast<size_t>(t - 1)], s.betas[static_cast<size_t>(t)]);
  EXPECT_LT(s.alpha_bar(s.T), s.alpha_bar(1));
  EXPECT_LT(s.alpha_bar(1), 1.0);
  EXPECT_LT(s.alpha_bar(s.T), 1e-3);
}

TEST(Schedule, RejectsBadBounds) {
  EXPECT_THROW(make_schedule(1, 0.1, 0.2), UsageError);
  EXPECT_THROW(make_schedule(10, 0.0, 0.2), UsageError);
  EXPECT_THROW(make_schedule(10, 0.3, 0.2), UsageError);
  EXPECT_THROW(make_schedule(10, 0.1, 1.0), UsageError);
  EXPECT_THROW(make_schedule(2, 0.1, 0.2).alpha_bar(3), UsageError);
}

TEST(Latent, ExactInverse) {
  const Tensor x = random_tensor({3, 3, 32, 32}, 1, -1, 1);
  const Tensor z = latent_encode(x);
  EXPECT_EQ(z.shape(), (Shape{3, 48, 8, 8}));
  EXPECT_TRUE(bitwise_equal(latent_decode(z), x));
}

TEST(Latent, ChannelLayoutMatchesPixelBlocks) {
  const Tensor x = random_tensor({1, 3, 8, 12}, 2);
  const Tensor z = latent_encode(x);
  ASSERT_EQ(z.shape(), (Shape{1, 48, 2, 3}));
  for (int c = 0; c < 3; ++c) {
    for (int dy = 0; dy < 4; ++dy) {
      for (int dx = 0; dx < 4; ++dx) {
        for (int i = 0; i < 2; ++i) {
          for (int j = 0; j < 3; ++j) {
            ASSERT_EQ(z.at({0, c * 16 + dy * 4 + dx, i, j}), x.at({0, c, 4 * i + dy, 4 * j + dx}));
          }
        }
      }
    }
  }
}

TEST(Latent, ConstantImageGivesConstantLatent) {
  const Tensor z = latent_encode(Tensor::full({1, 3, 32, 32}, real(0.25)));
  for (real v : z.data()) EXPECT_EQ(v, real(0.25));
}

TEST(Latent, RejectsIndivisibleSize) {
  EXPECT_THROW(latent_encode(Tensor::zeros({1, 3, 30, 32})), ShapeError);
}

TEST(Condition, LayoutOfThreeParts) {
  const Tensor zt = random_tensor({4, 48, 8, 8}, 3, -1, 1);
  const Tensor z0 = random_tensor({4, 48, 8, 8}, 4, -1, 1);
  const Tensor c = build_condition(zt, z0);
  ASSERT_EQ(c.shape(), (Shape{4, 97, 8, 8}));
  for (int n = 0; n < 4; ++n) {
    for (int i = 0; i < 8; ++i) {
      for (int j = 0; j < 8; ++j) {
        EXPECT_EQ(c.at({n, 96, i, j}), n == 0 ? real(1) : real(0));
        for (int ch = 0; ch < 48; ++ch) {
          ASSERT_EQ(c.at({n, ch, i, j}), zt.at({n, ch, i, j}));
          ASSERT_EQ(c.at({n, 48 + ch, i, j}), n == 0 ? z0.at({0, ch, i, j}) : real(0));
        }
      }
    }
  }
}

TEST(Condition, RejectsShapeMismatch) {
  EXPECT_THROW(build_condition(Tensor::zeros({2, 48, 8, 8}), Tensor::zeros({2, 48, 4, 4})), ShapeError);
}

TEST(Text, EmptyAndRepeatedAndDistinct) {
  DiffusionModel model(small_config(), 5);
  const Tensor empty = model.embed_text({});
  EXPECT_EQ(empty.shape(), (Shape{0, 8}));
  const std::vector<uint8_t> a{1, 2, 3}, b{1, 5, 3};
  EXPECT_TRUE(bitwise_equal(model.embed_text(a), model.embed_text(a)));
  EXPECT_FALSE(bitwise_equal(model.embed_text(a), model.embed_text(b)));
  const std::vector<uint8_t> bad{13};
  EXPECT_THROW(model.embed_text(bad), FormatError);
}

TEST(Text, EmptyContextRunsUnet) {
  DiffusionModel model(small_config(), 6);
  const Tensor eps = model.unet_eps(random_tensor({2, 97, 4, 4}, 7), 10, model.embed_text({}));
  EXPECT_EQ(eps.shape(), (Shape{2, 48, 4, 4}));
  for (real v : eps.data()) ASSERT_TRUE(std::isfinite(v));
}

TEST(MaskGuidance, ShapesHalvePerLevel) {
  DiffusionModel model({}, 8);
  const auto h = model.mask_guidance(one_hot(constant_classes(3 * 32 * 32, 1), 3, 32, 32));
  ASSERT_EQ(h.size(), 3u);
  EXPECT_EQ(h[0].shape(), (Shape{3, 64, 8, 8}));
  EXPECT_EQ(h[1].shape(), (Shape{3, 128, 4, 4}));
  EXPECT_EQ(h[2].shape(), (Shape{3, 256, 2, 2}));
}

TEST(MaskGuidance, SensitiveToMasksAndDeterministic) {
  DiffusionModel model(small_config(), 9);
  const Tensor bg = one_hot(constant_classes(2 * 32 * 32, 0), 2, 32, 32);
  const Tensor hand = one_hot(constant_classes(2 * 32 * 32, 1), 2, 32, 32);
  const auto a = model.mask_guidance(bg);
  const auto b = model.mask_guidance(hand);
  const auto a2 = model.mask_guidance(bg);
  for (size_t i = 0; i < a.size(); ++i) {
    EXPECT_FALSE(bitwise_equal(a[i], b[i])) << "level " << i;
    EXPECT_TRUE(bitwise_equal(a[i], a2[i])) << "level " << i;
  }
}

TEST(Unet, OutputShapeAndTimestepRange) {
  DiffusionModel model(small_config(), 10);
  const Tensor zbar = random_tensor({2, 97, 8, 8}, 11);
  const std::vector<uint8_t> tokens{1, 2};
  EXPECT_EQ(model.unet_eps(zbar, 1, model.embed_text(tokens)).shape(), (Shape{2, 48, 8, 8}));
  EXPECT_THROW(model.unet_eps(zbar, 0, model.embed_text(tokens)), UsageError);
  EXPECT_THROW(model.unet_eps(zbar, 101, model.embed_text(tokens)), UsageError);
  EXPECT_THROW(model.unet_eps(random_tensor({2, 96, 8, 8}, 12), 5, model.embed_text(tokens)), ShapeError);
}

TEST(Unet, ZeroProjectionsMakeGuidanceInert) {
  DiffusionModel model(small_config(), 13);
  randomize(model.unet(), 130, 0.2);
  const Tensor zbar = random_tensor({2, 97, 8, 8}, 14);
  const std::vector<uint8_t> tokens{3, 4};
  const auto h = model.mask_guidance(one_hot(constant_classes(2 * 32 * 32, 2), 2, 32, 32));
  const Tensor ctx = model.embed_text(tokens);
  EXPECT_TRUE(bitwise_equal(model.unet_eps(zbar, 40, ctx, &h), model.unet_eps(zbar, 40, ctx)));
  randomize_fusion(model, 15);
  EXPECT_FALSE(bitwise_equal(model.unet_eps(zbar, 40, ctx, &h), model.unet_eps(zbar, 40, ctx)));
}

TEST(Loss, ZeroInitIdentityOver32Draws) {
  DiffusionModel model(small_config(), 16);
  // Move the backbone off its initialization so the comparison is not trivial.
  randomize(model.unet(), 500, 0.2);
  const Tensor clip = random_tensor({3, 3, 32, 32}, 17);
  const Tensor onehot = one_hot(constant_classes(3 * 32 * 32, 1), 3, 32, 32);
  const std::vector<uint8_t> tokens{1, 7};
  std::mt19937_64 rng(18);
  for (int draw = 0; draw < 32; ++draw) {
    const int t = 1 + static_cast<int>(rng() % 100);
    const Tensor eps = DiffusionModel::gaussian(model.latent_shape(clip), rng);
    const double plain = model.loss_at(clip, tokens, nullptr, t, eps).item();
    const double guided = model.loss_at(clip, tokens, &onehot, t, eps).item();
    EXPECT_LT(std::abs(plain - guided) / plain, 1e-6) << "draw " << draw;
  }
}

TEST(Loss, MatchesIndependentComposition) {
  DiffusionModel model(small_config(), 19);
  randomize(model.unet(), 190, 0.2);
  randomize_fusion(model, 20);
  const Tensor clip = random_tensor({2, 3, 16, 16}, 21);
  const Tensor onehot = one_hot(constant_classes(2 * 16 * 16, 2), 2, 16, 16);
  const std::vector<uint8_t> tokens{2, 9};
  const Tensor eps = random_tensor(model.latent_shape(clip), 22, -2, 2);
  const int t = 63;

  // z_t = sqrt(ab) z0 + sqrt(1 - ab) eps built element by element in double.
  const double ab = model.schedule().alpha_bar(t);
  const Tensor z0 = latent_encode(to_model_range(clip));
  std::vector<real> zt(static_cast<size_t>(z0.numel()));
  for (size_t i = 0; i < zt.size(); ++i) {
    zt[i] = static_cast<real>(std::sqrt(ab) * z0.data()[i] + std::sqrt(1 - ab) * eps.data()[i]);
  }
  const auto h = model.mask_guidance(onehot);
  const Tensor pred = model.unet_eps(build_condition(Tensor(z0.shape(), zt), z0), t,
                                     model.embed_text(tokens), &h);
  double mse = 0;
  for (int64_t i = 0; i < pred.numel(); ++i) mse += std::pow(pred.data()[i] - eps.data()[i], 2);
  mse /= static_cast<double>(pred.numel());

  const double loss = model.loss_at(clip, tokens, &onehot, t, eps).item();
  EXPECT_GE(loss, 0.0);
  EXPECT_NEAR(loss, mse, 1e-5 * mse);
}

TEST(Loss, UntrainedExpectationInRange) {
  DiffusionModel model(small_config(), 23);
  const Tensor clip = random_tensor({2, 3, 16, 16}, 24);
  const std::vector<uint8_t> tokens{1};
  std::mt19937_64 rng(25);
  double total = 0;
  for (int i = 0; i < 64; ++i) {
    const double l = model.train_loss(clip, tokens, nullptr, rng).item();
    EXPECT_GE(l, 0.0);
    total += l;
  }
  EXPECT_GT(total / 64, 0.5);
  EXPECT_LT(total / 64, 4.0);
}

TEST(Noising, VarianceFollowsSchedule) {
  const auto s = make_schedule();
  std::mt19937_64 rng(26);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int t : {1, 20, 50, 80, 100}) {
    const double ab = s.alpha_bar(t);
    double sum = 0, sum2 = 0;
    const int draws = 256 * 48;
    for (int i = 0; i < draws; ++i) {
      const double z = std::sqrt(ab) * n(rng) + std::sqrt(1 - ab) * n(rng);
      sum += z;
      sum2 += z * z;
    }
    const double var = sum2 / draws - std::pow(sum / draws, 2);
    EXPECT_NEAR(var, ab * 1.0 + (1 - ab), 0.1) << "t " << t;
  }
}

TEST(Ddim, TimestepsDescendAndCoverFullRange) {
  DiffusionModel model(small_config(), 27);
  const auto ts = model.ddim_timesteps(20);
  ASSERT_EQ(ts.size(), 20u);
  EXPECT_EQ(ts.front(), 100);
  EXPECT_EQ(ts.back(), 5);
  for (size_t i = 1; i < ts.size(); ++i) EXPECT_EQ(ts[i - 1] - ts[i], 5);
  const auto all = model.ddim_timesteps(100);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(all[static_cast<size_t>(i)], 100 - i);
  EXPECT_THROW(model.ddim_timesteps(0), UsageError);
  EXPECT_THROW(model.ddim_timesteps(101), UsageError);
}

TEST(Ddim, DeterministicAndKeepsFirstFrame) {
  DiffusionModel model(small_config(), 28);
  randomize(model.unet(), 280, 0.1);
  randomize_fusion(model, 29);
  SampleRequest req;
  req.g1 = random_tensor({3, 32, 32}, 30);
  req.tokens = {1, 2, 3};
  req.masks = constant_classes(4 * 32 * 32, 1);
  req.n_frames = 4;
  req.steps = 4;
  req.seed = 31;
  const Tensor a = model.ddim_sample(req);
  const Tensor b = model.ddim_sample(req);
  ASSERT_EQ(a.shape(), (Shape{4, 3, 32, 32}));
  EXPECT_TRUE(bitwise_equal(a, b));
  EXPECT_TRUE(std::equal(req.g1.data().begin(), req.g1.data().end(), a.data().begin()));
  for (real v : a.data()) {
    ASSERT_GE(v, real(0));
    ASSERT_LE(v, real(1));
  }
  req.seed = 32;
  EXPECT_FALSE(bitwise_equal(a, model.ddim_sample(req)));
}

TEST(Checkpoint, PhaseOneOmitsGuidanceAndRoundTrips) {
  DiffusionModel a(small_config(), 33);
  randomize_fusion(a, 34);
  Container phase1, phase2;
  a.save(phase1, false);
  a.save(phase2, true);
  for (const auto& e : phase1.entries()) EXPECT_NE(e.name.rfind("diff/mask/", 0), 0u) << e.name;
  EXPECT_TRUE(phase2.contains("diff/mask/proj0.weight"));

  const DiffusionConfig cfg = DiffusionModel::read_config(phase2);
  EXPECT_EQ(cfg.beta_start, small_config().beta_start);
  EXPECT_EQ(cfg.beta_end, small_config().beta_end);
  DiffusionModel b(cfg, 35);
  EXPECT_FALSE(b.load(phase1));
  EXPECT_EQ(a.unet().fingerprint(), b.unet().fingerprint());
  EXPECT_NE(a.mask_guide().fingerprint(), b.mask_guide().fingerprint());
  EXPECT_TRUE(b.load(phase2));
  EXPECT_EQ(a.mask_guide().fingerprint(), b.mask_guide().fingerprint());
  EXPECT_EQ(a.text().fingerprint(), b.text().fingerprint());
}

TEST(Checkpoint, ConfigMismatchRejected) {
  DiffusionModel a(small_config(), 36);
  Container c;
  a.save(c, true);
  DiffusionModel b({}, 36);
  EXPECT_THROW(b.load(c), FormatError);
}
