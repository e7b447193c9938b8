#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "exgn/container.hpp"

// Procedural paired ego/exo toy world: a disc-shaped hand manipulating a
// rectangular object over a smooth textured table, rendered from a fixed
// full-scene (exo) camera and a hand-following crop (ego) camera, with exact
// per-pixel class maps {0 background, 1 hand, 2 object}.

namespace exgn::synth {

enum class Action : uint8_t { push_left, push_right, pick_up, put_down, stir, idle };
inline constexpr int kActionCount = 6;

std::string_view action_name(Action a);
/// Throws UsageError for names outside the action set.
Action parse_action(std::string_view name);
/// Throws FormatError for ids outside the action set.
Action action_from_id(int id);

enum class View { ego, exo };

struct Vec2 {
  double x = 0;
  double y = 0;
};

inline constexpr std::array<float, 3> kHandColor{0.95f, 0.78f, 0.62f};
/// Side of the ego viewport in world units.
inline constexpr double kEgoViewport = 0.5;

struct WorldState {
  Vec2 hand_center;
  double hand_radius = 0.065;
  Vec2 object_center;
  Vec2 object_half_extent;
  bool object_attached = false;
  uint64_t background_texture_seed = 0;
  std::array<float, 3> object_color{0.2f, 0.5f, 0.8f};
  /// Center of the ego viewport: the previous frame's hand position,
  /// clamped so the viewport stays inside the world square.
  Vec2 ego_anchor;
};

/// Deterministic trajectory of `n_frames` world states. Throws ShapeError for
/// n_frames < 2.
std::vector<WorldState> simulate(uint64_t seed, Action action, int n_frames);

struct RenderedFrame {
  int res = 0;
  std::vector<float> rgb;     // [3, res, res], values in [0, 1]
  std::vector<uint8_t> mask;  // [res, res], values in {0, 1, 2}
};

/// Throws ShapeError for res < 16.
RenderedFrame render(const WorldState& world, View view, int res);

/// Maps a pixel center of `view` to world coordinates.
Vec2 pixel_to_world(const WorldState& world, View view, int res, double row, double col);

const std::vector<std::string>& vocabulary();
std::vector<uint8_t> instruction_tokens(Action action);

struct PairedSample {
  int n_frames = 0;
  int res = 0;
  std::vector<float> ego_clip;  // [N, 3, res, res]
  std::vector<float> exo_clip;
  std::vector<uint8_t> ego_masks;  // [N, res, res]
  std::vector<uint8_t> exo_masks;
  std::vector<uint8_t> tokens;
  uint64_t seed = 0;
  Action action = Action::idle;

  bool operator==(const PairedSample&) const = default;
};

PairedSample make_sample(uint64_t seed, Action action, int n_frames, int res);

struct WorldConfig {
  int n_frames = 8;
  int res = 32;
  std::vector<Action> actions{Action::push_left, Action::push_right, Action::pick_up,
                              Action::put_down,  Action::stir,       Action::idle};
};

/// Sample i uses action actions[i % size] and seed derive_seed(master_seed, i),
/// so any subset of indices can be generated independently.
std::vector<PairedSample> generate_dataset(const WorldConfig& cfg, int count,
                                           uint64_t master_seed);

Container dataset_to_container(const std::vector<PairedSample>& samples);
/// Validates shapes against the meta entry and every mask value.
std::vector<PairedSample> dataset_from_container(const Container& c);

void write_dataset(const std::vector<PairedSample>& samples, const std::filesystem::path& path);
std::vector<PairedSample> read_dataset(const std::filesystem::path& path);

}  // namespace exgn::synth
