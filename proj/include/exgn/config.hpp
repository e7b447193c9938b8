#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "exgn/diffusion.hpp"
#include "exgn/segnet.hpp"
#include "exgn/synthworld.hpp"
#include "exgn/training.hpp"

// Run configuration shared by every CLI command. JSON with a fixed schema;
// unknown keys are rejected with the full key path in the message.
//
//   {
//     "seed": 0,
//     "world": {"frames": 8, "resolution": 32, "count": 8,
//               "actions": ["push_left", "push_right", ...]},
//     "segnet": {"d4": 32, "d8": 64, "d16": 96, "dk": 64, "dv": 64, "capacity": 6},
//     "diffusion": {"T": 100, "beta_start": 0.001, "beta_end": 0.2, "patch": 4,
//                   "widths": [64, 128, 256], "d_txt": 64, "sample_steps": 100},
//     "train": {"seg": {...}, "diff1": {...}, "diff2": {...}}
//   }
//
// Each train block accepts epochs, batch_size, learning_rate, seed,
// ramp_fraction, alpha_start, alpha_end, bce_weight and dice_weight. A train
// block without "seed" inherits the top-level seed.

namespace exgn {

struct RunConfig {
  uint64_t seed = 0;
  synth::WorldConfig world;
  int count = 8;
  SegConfig segnet;
  DiffusionConfig diffusion;
  int sample_steps = 100;
  TrainConfig seg_train;
  TrainConfig diff1_train;
  TrainConfig diff2_train;
};

/// Defaults overlaid with the keys present in `text`. Throws UsageError on
/// malformed JSON, unknown keys, wrong types and out-of-range values.
RunConfig parse_config(const std::string& text);
/// Reads and parses a file; an empty path yields the defaults.
RunConfig load_config(const std::filesystem::path& path);

}  // namespace exgn
