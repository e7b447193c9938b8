#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "exgn/errors.hpp"
#include "exgn/training.hpp"

using namespace exgn;

namespace {

Tensor random_tensor(const Shape& shape, uint64_t seed, double lo, double hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<real> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) x = static_cast<real>(u(rng));
  return Tensor(shape, std::move(v));
}

std::vector<uint8_t> random_classes(int64_t count, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<uint8_t> c(static_cast<size_t>(count));
  for (auto& x : c) x = static_cast<uint8_t>(rng() % 3);
  return c;
}

// Direct evaluation of BCE + Dice in double precision, one pixel at a time.
double reference_seg_loss(const Tensor& logits, const std::vector<uint8_t>& target) {
  const int64_t k = logits.dim(0), hw = logits.dim(2) * logits.dim(3);
  double bce = 0;
  std::vector<std::array<double, 3>> inter(static_cast<size_t>(k)), psum(static_cast<size_t>(k)),
      qsum(static_cast<size_t>(k));
  for (int64_t i = 0; i < k; ++i) {
    for (int64_t px = 0; px < hw; ++px) {
      double l[3], m = -1e300, z = 0;
      for (int c = 0; c < 3; ++c) {
        l[c] = logits.data()[(i * 3 + c) * hw + px];
        m = std::max(m, l[c]);
      }
      for (double v : l) z += std::exp(v - m);
      for (int c = 0; c < 3; ++c) {
        const double p = std::exp(l[c] - m) / z;
        const double q = target[static_cast<size_t>(i * hw + px)] == c ? 1.0 : 0.0;
        bce -= q * std::log(p) + (1 - q) * std::log1p(-p);
        inter[static_cast<size_t>(i)][c] += p * q;
        psum[static_cast<size_t>(i)][c] += p;
        qsum[static_cast<size_t>(i)][c] += q;
      }
    }
  }
  bce /= static_cast<double>(k * 3 * hw);
  double dice = 0;
  for (size_t i = 0; i < static_cast<size_t>(k); ++i) {
    for (int c = 1; c <= 2; ++c) dice += 1 - (2 * inter[i][c] + 1) / (psum[i][c] + qsum[i][c] + 1);
  }
  return bce + dice / static_cast<double>(2 * k);
}

std::vector<synth::PairedSample> tiny_dataset(int count, uint64_t seed) {
  synth::WorldConfig wc;
  wc.n_frames = 3;
  wc.res = 16;
  return synth::generate_dataset(wc, count, seed);
}

SegConfig tiny_seg() {
  SegConfig c;
  c.d4 = 8;
  c.d8 = 8;
  c.d16 = 16;
  c.dk = 8;
  c.dv = 8;
  return c;
}

DiffusionConfig tiny_diffusion() {
  DiffusionConfig c;
  c.widths = {16, 16, 32};
  c.d_txt = 8;
  return c;
}

}  // namespace

TEST(SegLoss, MatchesReferenceOnRandomLogits) {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    const Tensor logits = random_tensor({2, 3, 8, 8}, seed, -3, 3);
    const auto target = random_classes(2 * 64, 100 + seed);
    EXPECT_NEAR(seg_loss(logits, target).item(), reference_seg_loss(logits, target), 1e-5);
  }
}

TEST(SegLoss, StrongCorrectLogitsGiveSmallLoss) {
  const auto target = random_classes(2 * 64, 7);
  std::vector<real> v(2 * 3 * 64);
  for (int i = 0; i < 2; ++i) {
    for (int c = 0; c < 3; ++c) {
      for (int px = 0; px < 64; ++px) {
        v[static_cast<size_t>((i * 3 + c) * 64 + px)] = target[static_cast<size_t>(i * 64 + px)] == c ? 10 : -10;
      }
    }
  }
  const Tensor logits({2, 3, 8, 8}, v);
  const double loss = seg_loss(logits, target).item();
  EXPECT_LT(loss, 0.05);
  EXPECT_NEAR(loss, reference_seg_loss(logits, target), 1e-5);
}

TEST(SegLoss, UniformLogitsBceClosedForm) {
  // Every pixel has p = 1/3: one class contributes -ln(1/3), two contribute -ln(2/3).
  const double bce = -(std::log(1.0 / 3) + 2 * std::log(2.0 / 3)) / 3;
  const auto target = random_classes(64, 8);
  const Tensor logits = Tensor::zeros({1, 3, 8, 8});
  const double bce_only = seg_loss(logits, target, 1.0, 0.0).item();
  EXPECT_NEAR(bce_only, bce, 1e-6);
  double dice = 0;
  for (int c = 1; c <= 2; ++c) {
    const double q = static_cast<double>(std::count(target.begin(), target.end(), c));
    dice += 1 - (2 * q / 3 + 1) / (64.0 / 3 + q + 1);
  }
  EXPECT_NEAR(seg_loss(logits, target).item(), bce + dice / 2, 1e-6);
}

TEST(SegLoss, EmptyClassHasNoDicePenalty) {
  // Target without class 2 and logits that all but exclude it.
  std::vector<uint8_t> target(64, 0);
  std::fill(target.begin(), target.begin() + 20, 1);
  std::vector<real> v(3 * 64, real(0));
  for (int px = 0; px < 64; ++px) {
    v[static_cast<size_t>(px)] = target[static_cast<size_t>(px)] == 0 ? 30 : -30;
    v[static_cast<size_t>(64 + px)] = target[static_cast<size_t>(px)] == 1 ? 30 : -30;
    v[static_cast<size_t>(128 + px)] = -30;
  }
  EXPECT_NEAR(seg_loss(Tensor({1, 3, 8, 8}, v), target, 0.0, 1.0).item(), 0.0, 1e-6);
}

TEST(SegLoss, RejectsWrongShape) {
  EXPECT_THROW(seg_loss(Tensor::zeros({1, 2, 4, 4}), std::vector<uint8_t>(16, 0)), ShapeError);
}

TEST(Schedules, EndpointsAndMidpoints) {
  EXPECT_EQ(curriculum_fraction(0, 1000), 0.0);
  EXPECT_EQ(curriculum_fraction(600, 1000), 1.0);
  EXPECT_EQ(curriculum_fraction(1000, 1000), 1.0);
  EXPECT_NEAR(curriculum_fraction(300, 1000), 0.5, 1e-12);
  EXPECT_EQ(anneal_alpha(0, 1000), 1.0);
  EXPECT_EQ(anneal_alpha(600, 1000), 0.0);
  EXPECT_EQ(anneal_alpha(999, 1000), 0.0);
  EXPECT_NEAR(anneal_alpha(300, 1000), 0.5, 1e-12);
  EXPECT_THROW(curriculum_fraction(-1, 10), UsageError);
  EXPECT_THROW(anneal_alpha(11, 10), UsageError);
}

TEST(Schedules, PiecewiseLinearAndMonotone) {
  double prev_f = -1, prev_a = 2;
  for (int s = 0; s <= 500; ++s) {
    const double f = curriculum_fraction(s, 500), a = anneal_alpha(s, 500);
    EXPECT_GE(f, prev_f);
    EXPECT_LE(a, prev_a);
    if (s < 300) {
      EXPECT_NEAR(f, s / 300.0, 1e-12);
      EXPECT_NEAR(a, 1 - s / 300.0, 1e-12);
    }
    prev_f = f;
    prev_a = a;
  }
}

TEST(Schedules, MaskedFrameCount) {
  EXPECT_EQ(masked_frame_count(0.0, 8), 0);
  EXPECT_EQ(masked_frame_count(1.0, 8), 7);
  EXPECT_EQ(masked_frame_count(0.5, 8), 4);
  EXPECT_EQ(masked_frame_count(1.0, 1), 0);
}

TEST(Batching, EpochOrderIsSeededPermutation) {
  const auto a = epoch_order(3, 0, 10);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  std::vector<size_t> iota(10);
  std::iota(iota.begin(), iota.end(), size_t{0});
  EXPECT_EQ(sorted, iota);
  EXPECT_EQ(a, epoch_order(3, 0, 10));
  EXPECT_NE(a, epoch_order(3, 1, 10));
  EXPECT_NE(a, epoch_order(4, 0, 10));
}

TEST(Batching, TotalSteps) {
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 4;
  EXPECT_EQ(total_steps(cfg, 8), 10);
  EXPECT_EQ(total_steps(cfg, 9), 15);
}

TEST(Batching, ClipAndMaskLayoutIsFrameMajor) {
  const auto data = tiny_dataset(3, 1);
  const std::vector<size_t> idx{2, 0};
  const Tensor clips = clip_batch(data, idx, View::ego);
  const Tensor masks = mask_batch(data, idx, View::exo);
  ASSERT_EQ(clips.shape(), (Shape{3, 2, 3, 16, 16}));
  ASSERT_EQ(masks.shape(), (Shape{3, 2, 3, 16, 16}));
  for (int f = 0; f < 3; ++f) {
    for (int j = 0; j < 2; ++j) {
      const auto& s = data[idx[static_cast<size_t>(j)]];
      for (int px = 0; px < 16 * 16; px += 7) {
        const int y = px / 16, x = px % 16;
        EXPECT_EQ(clips.at({f, j, 1, y, x}), s.ego_clip[static_cast<size_t>(((f * 3) + 1) * 256 + px)]);
        const uint8_t cls = s.exo_masks[static_cast<size_t>(f * 256 + px)];
        for (int c = 0; c < 3; ++c) EXPECT_EQ(masks.at({f, j, c, y, x}), cls == c ? 1 : 0);
      }
    }
    const auto fm = frame_masks(data, idx, View::ego, f);
    ASSERT_EQ(fm.size(), 2u * 256);
    EXPECT_TRUE(std::equal(fm.begin(), fm.begin() + 256, data[2].ego_masks.begin() + f * 256));
  }
}

TEST(TrainSegnet, DeterministicAndLogged) {
  const auto data = tiny_dataset(2, 2);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 1;
  cfg.seed = 5;
  SegNet a(tiny_seg(), 5), b(tiny_seg(), 5);
  int epochs_seen = 0;
  const TrainLog log = train_segnet(a, data, cfg, [&](int e) { epochs_seen = e; });
  train_segnet(b, data, cfg);
  EXPECT_EQ(epochs_seen, 4);
  EXPECT_EQ(a.params().fingerprint(), b.params().fingerprint());
  ASSERT_EQ(log.records.size(), 8u);
  for (size_t i = 0; i < log.records.size(); ++i) {
    EXPECT_EQ(log.records[i].step, static_cast<int64_t>(i));
    if (i > 0) {
      EXPECT_LE(log.records[i].alpha, log.records[i - 1].alpha);
    }
    EXPECT_TRUE(std::isfinite(log.records[i].loss));
  }
  EXPECT_EQ(log.records.front().alpha, 1.0);
  EXPECT_EQ(log.records.back().alpha, 0.0);
  EXPECT_EQ(log.records.back().mask_frac, 1.0);

  const auto path = std::filesystem::temp_directory_path() / "exgn_train_log.csv";
  log.write_csv(path.string());
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "step,loss,alpha,mask_frac,ms");
  std::filesystem::remove(path);
}

TEST(TrainSegnet, OverfitLossDecreases) {
  const auto data = tiny_dataset(2, 3);
  TrainConfig cfg;
  cfg.epochs = 100;
  cfg.batch_size = 2;
  cfg.learning_rate = 3e-3;
  cfg.ramp_fraction = 0.01;
  SegNet net(tiny_seg(), 6);
  const TrainLog log = train_segnet(net, data, cfg);
  EXPECT_LT(log.records.back().loss, 0.8 * log.records.front().loss);
}

TEST(TrainSegnet, RejectsBadConfig) {
  const auto data = tiny_dataset(1, 4);
  SegNet net(tiny_seg(), 7);
  TrainConfig cfg;
  cfg.learning_rate = 0;
  EXPECT_THROW(train_segnet(net, data, cfg), UsageError);
  cfg = {};
  EXPECT_THROW(train_segnet(net, {}, cfg), UsageError);
}

TEST(TrainDiffusion, PhaseOneDeterministic) {
  const auto data = tiny_dataset(2, 8);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 2;
  cfg.seed = 9;
  DiffusionModel a(tiny_diffusion(), 9), b(tiny_diffusion(), 9);
  const TrainLog la = train_diffusion_phase1(a, data, cfg);
  const TrainLog lb = train_diffusion_phase1(b, data, cfg);
  EXPECT_EQ(a.unet().fingerprint(), b.unet().fingerprint());
  EXPECT_EQ(a.text().fingerprint(), b.text().fingerprint());
  ASSERT_EQ(la.records.size(), 2u);
  EXPECT_EQ(la.records[1].loss, lb.records[1].loss);
  // Guidance parameters are untouched by phase 1.
  EXPECT_EQ(a.mask_guide().fingerprint(), DiffusionModel(tiny_diffusion(), 9).mask_guide().fingerprint());
}

TEST(TrainDiffusion, PhaseTwoFreezesBackbone) {
  const auto data = tiny_dataset(2, 10);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 2;
  DiffusionModel model(tiny_diffusion(), 11);
  train_diffusion_phase1(model, data, cfg);
  const uint64_t unet = model.unet().fingerprint(), text = model.text().fingerprint();
  const uint64_t mask = model.mask_guide().fingerprint();
  train_diffusion_phase2(model, data, cfg);
  EXPECT_EQ(model.unet().fingerprint(), unet);
  EXPECT_EQ(model.text().fingerprint(), text);
  EXPECT_NE(model.mask_guide().fingerprint(), mask);
}

TEST(TrainDiffusion, OverfitLossDecreases) {
  const auto data = tiny_dataset(1, 12);
  TrainConfig cfg;
  cfg.epochs = 60;
  cfg.batch_size = 1;
  DiffusionModel model(tiny_diffusion(), 13);
  const TrainLog log = train_diffusion_phase1(model, data, cfg);
  auto window_mean = [&](size_t begin) {
    double s = 0;
    for (size_t i = begin; i < begin + 10; ++i) s += log.records[i].loss;
    return s / 10;
  };
  EXPECT_LT(window_mean(50), window_mean(0));
}
