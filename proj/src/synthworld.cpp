#include "exgn/synthworld.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "exgn/errors.hpp"
#include "exgn/rng.hpp"

namespace exgn::synth {

namespace {

constexpr std::array<std::string_view, kActionCount> kActionNames{
    "push_left", "push_right", "pick_up", "put_down", "stir", "idle"};

// Per-frame hand jitter bound per axis; the norm stays below 0.01.
constexpr double kJitter = 0.005;

double lerp(double a, double b, double t) { return a + (b - a) * t; }

Vec2 clamp_to_world(Vec2 p, double hx, double hy) {
  return {std::clamp(p.x, hx, 1.0 - hx), std::clamp(p.y, hy, 1.0 - hy)};
}

// Smooth background: a few seeded plane waves per channel, evaluated in world
// coordinates so both cameras see the same table.
struct Texture {
  struct Wave {
    double fx, fy, phase, amp;
  };
  std::array<double, 3> base{};
  std::array<std::array<Wave, 4>, 3> waves{};

  explicit Texture(uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> base_d(0.25, 0.55), freq(1.0, 5.0), sign(-1.0, 1.0),
        phase(0.0, 2.0 * std::numbers::pi), amp(0.03, 0.07);
    for (int c = 0; c < 3; ++c) {
      base[static_cast<size_t>(c)] = base_d(rng);
      for (auto& w : waves[static_cast<size_t>(c)]) {
        w.fx = freq(rng) * (sign(rng) < 0 ? -1 : 1);
        w.fy = freq(rng) * (sign(rng) < 0 ? -1 : 1);
        w.phase = phase(rng);
        w.amp = amp(rng);
      }
    }
  }

  float at(int c, double x, double y) const {
    double v = base[static_cast<size_t>(c)];
    for (const auto& w : waves[static_cast<size_t>(c)]) {
      v += w.amp * std::sin(2.0 * std::numbers::pi * (w.fx * x + w.fy * y) + w.phase);
    }
    return static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
};

}  // namespace

std::string_view action_name(Action a) { return kActionNames[static_cast<size_t>(a)]; }

Action parse_action(std::string_view name) {
  for (int i = 0; i < kActionCount; ++i) {
    if (kActionNames[static_cast<size_t>(i)] == name) return static_cast<Action>(i);
  }
  throw UsageError("unknown action: " + std::string(name));
}

Action action_from_id(int id) {
  if (id < 0 || id >= kActionCount) throw FormatError("unknown action_id " + std::to_string(id));
  return static_cast<Action>(id);
}

std::vector<WorldState> simulate(uint64_t seed, Action action, int n_frames) {
  if (n_frames < 2) throw ShapeError("simulate needs at least 2 frames");
  const int action_id = static_cast<int>(action);
  if (action_id < 0 || action_id >= kActionCount) {
    throw FormatError("unknown action_id " + std::to_string(action_id));
  }
  std::mt19937_64 rng(derive_seed(seed, static_cast<uint64_t>(action_id)));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  WorldState base;
  base.hand_radius = uniform(0.06, 0.07);
  base.object_half_extent = {uniform(0.06, 0.09), uniform(0.06, 0.09)};
  base.background_texture_seed = rng();
  base.object_color = {static_cast<float>(uniform(0.1, 0.45)), static_cast<float>(uniform(0.25, 0.8)),
                       static_cast<float>(uniform(0.5, 1.0))};
  const double r = base.hand_radius;
  const double hx = base.object_half_extent.x, hy = base.object_half_extent.y;

  const int last = n_frames - 1;
  const int attach = std::max(1, n_frames / 4);
  // put_down releases the object this many frames before the end.
  const int detach = std::max(attach + 1, last - std::max(1, n_frames / 4));
  const double travel = uniform(0.2, 0.28);

  Vec2 object{uniform(0.3, 0.7), uniform(0.3, 0.7)};
  Vec2 start, grip;  // hand start and the point where it takes the object
  switch (action) {
    case Action::push_left:
      object = {uniform(0.55, 0.7), uniform(0.3, 0.7)};
      grip = {object.x + hx + 0.5 * r, object.y};
      start = {grip.x + uniform(0.08, 0.15), grip.y + uniform(-0.08, 0.08)};
      break;
    case Action::push_right:
      object = {uniform(0.3, 0.45), uniform(0.3, 0.7)};
      grip = {object.x - hx - 0.5 * r, object.y};
      start = {grip.x - uniform(0.08, 0.15), grip.y + uniform(-0.08, 0.08)};
      break;
    case Action::pick_up:
      object = {uniform(0.3, 0.7), uniform(0.55, 0.7)};
      grip = {object.x, object.y - hy - 0.5 * r};
      start = {grip.x + uniform(-0.08, 0.08), grip.y - uniform(0.08, 0.15)};
      break;
    case Action::put_down:
      object = {uniform(0.3, 0.7), uniform(0.3, 0.45)};
      grip = {object.x, object.y - hy - 0.5 * r};
      start = grip;
      break;
    case Action::stir:
    case Action::idle:
      start = {uniform(0.25, 0.75), uniform(0.25, 0.75)};
      grip = start;
      break;
  }
  const double step = travel / std::max(1, last - attach);
  const double stir_radius = 0.6 * std::max(hx, hy);
  const double stir_phase = uniform(0.0, 2.0 * std::numbers::pi);

  auto waypoint = [&](int n) -> Vec2 {
    const double approach = std::min(1.0, static_cast<double>(n) / attach);
    const int moved = std::max(0, n - attach);
    switch (action) {
      case Action::push_left:
        return n <= attach ? Vec2{lerp(start.x, grip.x, approach), lerp(start.y, grip.y, approach)}
                           : Vec2{grip.x - step * moved, grip.y};
      case Action::push_right:
        return n <= attach ? Vec2{lerp(start.x, grip.x, approach), lerp(start.y, grip.y, approach)}
                           : Vec2{grip.x + step * moved, grip.y};
      case Action::pick_up:
        return n <= attach ? Vec2{lerp(start.x, grip.x, approach), lerp(start.y, grip.y, approach)}
                           : Vec2{grip.x, grip.y - step * moved};
      case Action::put_down: {
        const double down = travel / std::max(1, detach);
        if (n <= detach) return {grip.x, grip.y + down * n};
        return {grip.x + 0.05 * (n - detach), grip.y + down * detach - 0.06 * (n - detach)};
      }
      case Action::stir: {
        const double a = stir_phase + 2.0 * std::numbers::pi * n / n_frames;
        return {object.x + stir_radius * std::cos(a), object.y + stir_radius * std::sin(a)};
      }
      case Action::idle:
        return start;
    }
    return start;
  };
  auto attached_at = [&](int n) {
    switch (action) {
      case Action::push_left:
      case Action::push_right:
      case Action::pick_up:
        return n >= attach;
      case Action::put_down:
        return n <= detach;
      default:
        return false;
    }
  };

  std::vector<WorldState> states;
  states.reserve(static_cast<size_t>(n_frames));
  Vec2 offset{0, 0};  // object center minus hand center while attached
  bool was_attached = false;
  for (int n = 0; n < n_frames; ++n) {
    WorldState s = base;
    Vec2 w = waypoint(n);
    w.x += uniform(-kJitter, kJitter);
    w.y += uniform(-kJitter, kJitter);
    s.hand_center = clamp_to_world(w, r, r);
    s.object_attached = attached_at(n);
    if (s.object_attached) {
      if (!was_attached) offset = {object.x - grip.x, object.y - grip.y};
      object = clamp_to_world({s.hand_center.x + offset.x, s.hand_center.y + offset.y}, hx, hy);
    }
    was_attached = s.object_attached;
    s.object_center = object;
    const Vec2 anchor = n == 0 ? s.hand_center : states.back().hand_center;
    const double half = kEgoViewport / 2;
    s.ego_anchor = clamp_to_world(anchor, half, half);
    states.push_back(s);
  }
  return states;
}

Vec2 pixel_to_world(const WorldState& world, View view, int res, double row, double col) {
  const double u = (col + 0.5) / res, v = (row + 0.5) / res;
  if (view == View::exo) return {u, v};
  const double half = kEgoViewport / 2;
  return {world.ego_anchor.x - half + u * kEgoViewport, world.ego_anchor.y - half + v * kEgoViewport};
}

RenderedFrame render(const WorldState& world, View view, int res) {
  if (res < 16) throw ShapeError("render resolution must be >= 16");
  RenderedFrame f;
  f.res = res;
  const size_t plane = static_cast<size_t>(res) * static_cast<size_t>(res);
  f.rgb.resize(3 * plane);
  f.mask.resize(plane);
  const Texture texture(world.background_texture_seed);
  const double r2 = world.hand_radius * world.hand_radius;
  for (int i = 0; i < res; ++i) {
    for (int j = 0; j < res; ++j) {
      const Vec2 p = pixel_to_world(world, view, res, i, j);
      const double dx = p.x - world.hand_center.x, dy = p.y - world.hand_center.y;
      uint8_t cls = 0;
      if (dx * dx + dy * dy <= r2) {
        cls = 1;
      } else if (std::abs(p.x - world.object_center.x) <= world.object_half_extent.x &&
                 std::abs(p.y - world.object_center.y) <= world.object_half_extent.y) {
        cls = 2;
      }
      const size_t at = static_cast<size_t>(i) * static_cast<size_t>(res) + static_cast<size_t>(j);
      f.mask[at] = cls;
      for (int c = 0; c < 3; ++c) {
        float v;
        if (cls == 1) {
          v = kHandColor[static_cast<size_t>(c)];
        } else if (cls == 2) {
          v = world.object_color[static_cast<size_t>(c)];
        } else {
          v = texture.at(c, p.x, p.y);
        }
        f.rgb[static_cast<size_t>(c) * plane + at] = v;
      }
    }
  }
  return f;
}

const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> words{"hand",  "pushes", "object", "left",   "right",
                                              "picks", "up",     "puts",   "down",   "stirs",
                                              "around", "stays", "still"};
  return words;
}

std::vector<uint8_t> instruction_tokens(Action action) {
  switch (action) {
    case Action::push_left: return {0, 1, 2, 3};
    case Action::push_right: return {0, 1, 2, 4};
    case Action::pick_up: return {0, 5, 6, 2};
    case Action::put_down: return {0, 7, 8, 2};
    case Action::stir: return {0, 9, 10, 2};
    case Action::idle: return {0, 11, 12};
  }
  throw FormatError("unknown action_id " + std::to_string(static_cast<int>(action)));
}

PairedSample make_sample(uint64_t seed, Action action, int n_frames, int res) {
  const auto states = simulate(seed, action, n_frames);
  PairedSample s;
  s.n_frames = n_frames;
  s.res = res;
  s.seed = seed;
  s.action = action;
  s.tokens = instruction_tokens(action);
  for (const auto& w : states) {
    const auto ego = render(w, View::ego, res);
    const auto exo = render(w, View::exo, res);
    s.ego_clip.insert(s.ego_clip.end(), ego.rgb.begin(), ego.rgb.end());
    s.exo_clip.insert(s.exo_clip.end(), exo.rgb.begin(), exo.rgb.end());
    s.ego_masks.insert(s.ego_masks.end(), ego.mask.begin(), ego.mask.end());
    s.exo_masks.insert(s.exo_masks.end(), exo.mask.begin(), exo.mask.end());
  }
  return s;
}

std::vector<PairedSample> generate_dataset(const WorldConfig& cfg, int count, uint64_t master_seed) {
  if (count <= 0) throw UsageError("empty dataset requested");
  if (cfg.actions.empty()) throw UsageError("action mix is empty");
  std::vector<PairedSample> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    const Action a = cfg.actions[static_cast<size_t>(i) % cfg.actions.size()];
    out.push_back(make_sample(derive_seed(master_seed, static_cast<uint64_t>(i)), a, cfg.n_frames,
                              cfg.res));
  }
  return out;
}

namespace {

std::string key(size_t i, const char* field) { return "s" + std::to_string(i) + "/" + field; }

void check_dims(const Container::Entry& e, const std::vector<uint64_t>& expect) {
  if (e.dims != expect) throw FormatError("unexpected shape for entry " + e.name);
}

}  // namespace

Container dataset_to_container(const std::vector<PairedSample>& samples) {
  if (samples.empty()) throw UsageError("empty dataset requested");
  const auto n = static_cast<uint64_t>(samples.front().n_frames);
  const auto res = static_cast<uint64_t>(samples.front().res);
  Container c;
  const std::vector<float> meta{static_cast<float>(samples.size()), static_cast<float>(n),
                                static_cast<float>(res), static_cast<float>(vocabulary().size())};
  c.put_f32("meta", {4}, meta);
  for (size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (static_cast<uint64_t>(s.n_frames) != n || static_cast<uint64_t>(s.res) != res) {
      throw FormatError("samples in one dataset must share frame count and resolution");
    }
    c.put_f32(key(i, "ego"), {n, 3, res, res}, s.ego_clip);
    c.put_f32(key(i, "exo"), {n, 3, res, res}, s.exo_clip);
    c.put_u8(key(i, "ego_mask"), {n, res, res}, s.ego_masks);
    c.put_u8(key(i, "exo_mask"), {n, res, res}, s.exo_masks);
    c.put_u8(key(i, "tokens"), {s.tokens.size()}, s.tokens);
    std::array<uint8_t, 8> seed_bytes{};
    for (size_t b = 0; b < 8; ++b) seed_bytes[b] = static_cast<uint8_t>(s.seed >> (8 * b));
    c.put_u8(key(i, "seed"), {8}, seed_bytes);
    const uint8_t action = static_cast<uint8_t>(s.action);
    c.put_u8(key(i, "action"), {1}, std::span<const uint8_t>(&action, 1));
  }
  return c;
}

std::vector<PairedSample> dataset_from_container(const Container& c) {
  const auto& meta = c.get_f32("meta");
  if (meta.f32.size() != 4) throw FormatError("dataset meta entry must hold 4 values");
  const auto count = static_cast<size_t>(meta.f32[0]);
  const auto n = static_cast<uint64_t>(meta.f32[1]);
  const auto res = static_cast<uint64_t>(meta.f32[2]);
  const auto vocab = static_cast<size_t>(meta.f32[3]);
  if (count == 0) throw FormatError("dataset holds no samples");
  const uint64_t plane = res * res;
  std::vector<PairedSample> out;
  out.reserve(count);
  for (size_t i = 0; i < count; ++i) {
    PairedSample s;
    s.n_frames = static_cast<int>(n);
    s.res = static_cast<int>(res);
    const auto& ego = c.get_f32(key(i, "ego"));
    const auto& exo = c.get_f32(key(i, "exo"));
    const auto& ego_m = c.get_u8(key(i, "ego_mask"));
    const auto& exo_m = c.get_u8(key(i, "exo_mask"));
    check_dims(ego, {n, 3, res, res});
    check_dims(exo, {n, 3, res, res});
    check_dims(ego_m, {n, res, res});
    check_dims(exo_m, {n, res, res});
    for (const auto* m : {&ego_m, &exo_m}) {
      for (size_t p = 0; p < m->u8.size(); ++p) {
        if (m->u8[p] > 2) {
          throw FormatError("mask value " + std::to_string(m->u8[p]) + " outside {0,1,2} in sample " +
                            std::to_string(i) + " frame " + std::to_string(p / plane) + " (" +
                            m->name + ")");
        }
      }
    }
    s.ego_clip = ego.f32;
    s.exo_clip = exo.f32;
    s.ego_masks = ego_m.u8;
    s.exo_masks = exo_m.u8;
    s.tokens = c.get_u8(key(i, "tokens")).u8;
    for (uint8_t t : s.tokens) {
      if (t >= vocab) throw FormatError("token id out of vocabulary in sample " + std::to_string(i));
    }
    const auto& seed = c.get_u8(key(i, "seed"));
    if (seed.u8.size() != 8) throw FormatError("bad seed entry in sample " + std::to_string(i));
    for (size_t b = 0; b < 8; ++b) s.seed |= static_cast<uint64_t>(seed.u8[b]) << (8 * b);
    const auto& action = c.get_u8(key(i, "action"));
    if (action.u8.size() != 1) throw FormatError("bad action entry in sample " + std::to_string(i));
    s.action = action_from_id(action.u8[0]);
    out.push_back(std::move(s));
  }
  return out;
}

void write_dataset(const std::vector<PairedSample>& samples, const std::filesystem::path& path) {
  dataset_to_container(samples).save(path);
}

std::vector<PairedSample> read_dataset(const std::filesystem::path& path) {
  return dataset_from_container(Container::load(path));
}

}  // namespace exgn::synth
