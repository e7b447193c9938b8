#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "exgn/diffusion.hpp"
#include "exgn/optim.hpp"
#include "exgn/segnet.hpp"
#include "exgn/synthworld.hpp"

namespace exgn {
inline namespace EXGN_PRECISION_NS {

struct TrainRecord {
  int64_t step = 0;
  double loss = 0;
  double alpha = 0;
  double mask_frac = 0;
  double ms = 0;
};

struct TrainLog {
  std::vector<TrainRecord> records;
  void write_csv(const std::string& path) const;
};

struct TrainConfig {
  int epochs = 100;
  int batch_size = 4;
  double learning_rate = 1e-3;
  uint64_t seed = 0;
  /// Share of total steps over which the curriculum and alpha ramps run.
  double ramp_fraction = 0.6;
  double alpha_start = 1.0;
  double alpha_end = 0.0;
  double bce_weight = 1.0;
  double dice_weight = 1.0;
};

/// Called after every epoch with the 1-based epoch number.
using EpochHook = std::function<void(int epoch)>;

/// BCE (one-vs-rest over all three classes, averaged over classes and
/// pixels) plus soft Dice (s = 1) averaged over classes 1 and 2 and over
/// images. logits [K, 3, H, W], target class ids [K, H, W].
Tensor seg_loss(const Tensor& logits, std::span<const uint8_t> target, double bce_weight = 1.0,
                double dice_weight = 1.0);

/// Fraction of frames 2..N with zeroed ego inputs: 0 -> 1 over the ramp.
double curriculum_fraction(int64_t step, int64_t total_steps, double ramp_fraction = 0.6);
/// Blend weight: start -> end over the ramp.
double anneal_alpha(int64_t step, int64_t total_steps, double ramp_fraction = 0.6,
                    double start = 1.0, double end = 0.0);
/// Number of trailing frames (out of frames 2..N) that are zeroed.
int masked_frame_count(double fraction, int n_frames);

/// Number of optimizer steps a run of cfg over `dataset_size` clips takes.
int64_t total_steps(const TrainConfig& cfg, size_t dataset_size);

/// Clip order of one epoch: a seeded permutation of [0, count).
std::vector<size_t> epoch_order(uint64_t seed, int epoch, size_t count);

/// Frame-major clip tensor [N, B, 3, H, W] of the chosen samples.
Tensor clip_batch(const std::vector<synth::PairedSample>& data, const std::vector<size_t>& idx,
                  View view);
/// Frame-major one-hot masks [N, B, 3, H, W].
Tensor mask_batch(const std::vector<synth::PairedSample>& data, const std::vector<size_t>& idx,
                  View view);
/// Class ids of frame n of the chosen samples, [B, H, W].
std::vector<uint8_t> frame_masks(const std::vector<synth::PairedSample>& data,
                                 const std::vector<size_t>& idx, View view, int n);

/// Teacher-forced segmentation training of `net` in place.
TrainLog train_segnet(SegNet& net, const std::vector<synth::PairedSample>& data,
                      const TrainConfig& cfg, const EpochHook& on_epoch = {});

/// Phase 1: UNet and text table, no mask guidance.
TrainLog train_diffusion_phase1(DiffusionModel& model, const std::vector<synth::PairedSample>& data,
                                const TrainConfig& cfg, const EpochHook& on_epoch = {});
/// Phase 2: only the mask-guidance parameters are updated; the backbone and
/// text table stay bit-identical. Ground-truth ego masks drive guidance.
TrainLog train_diffusion_phase2(DiffusionModel& model, const std::vector<synth::PairedSample>& data,
                                const TrainConfig& cfg, const EpochHook& on_epoch = {});

}  // namespace EXGN_PRECISION_NS
}  // namespace exgn
