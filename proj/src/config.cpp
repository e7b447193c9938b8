#include "exgn/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "exgn/errors.hpp"

namespace exgn {

namespace {

using nlohmann::json;

void require_object(const json& j, const std::string& path) {
  if (!j.is_object()) throw UsageError("config: " + path + " must be an object");
}

void check_keys(const json& j, const std::string& path, const std::set<std::string>& allowed) {
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) {
      throw UsageError("config: unknown key \"" + (path.empty() ? key : path + "." + key) + "\"");
    }
  }
}

template <class T>
void read(const json& j, const std::string& key, const std::string& path, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw UsageError("config: " + path + "." + key + " has the wrong type");
  }
}

void positive(int v, const std::string& name) {
  if (v < 1) throw UsageError("config: " + name + " must be positive, got " + std::to_string(v));
}

void read_train(const json& j, const std::string& path, uint64_t seed, TrainConfig& t) {
  t.seed = seed;
  if (!j.contains("train") || !j["train"].contains(path)) return;
  const json& b = j["train"][path];
  const std::string full = "train." + path;
  require_object(b, full);
  check_keys(b, full,
             {"epochs", "batch_size", "learning_rate", "seed", "ramp_fraction", "alpha_start", "alpha_end",
              "bce_weight", "dice_weight"});
  read(b, "epochs", full, t.epochs);
  read(b, "batch_size", full, t.batch_size);
  read(b, "learning_rate", full, t.learning_rate);
  read(b, "seed", full, t.seed);
  read(b, "ramp_fraction", full, t.ramp_fraction);
  read(b, "alpha_start", full, t.alpha_start);
  read(b, "alpha_end", full, t.alpha_end);
  read(b, "bce_weight", full, t.bce_weight);
  read(b, "dice_weight", full, t.dice_weight);
  positive(t.epochs, full + ".epochs");
  positive(t.batch_size, full + ".batch_size");
  if (!(t.learning_rate > 0)) throw UsageError("config: " + full + ".learning_rate must be positive");
  if (!(t.ramp_fraction > 0 && t.ramp_fraction <= 1)) {
    throw UsageError("config: " + full + ".ramp_fraction must lie in (0, 1]");
  }
  for (double a : {t.alpha_start, t.alpha_end}) {
    if (!(a >= 0 && a <= 1)) throw UsageError("config: " + full + " alpha bounds must lie in [0, 1]");
  }
  if (!(t.bce_weight >= 0 && t.dice_weight >= 0)) {
    throw UsageError("config: " + full + " loss weights must be non-negative");
  }
}

}  // namespace

RunConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw UsageError(std::string("config: invalid JSON: ") + e.what());
  }
  require_object(j, "top level");
  check_keys(j, "", {"seed", "world", "segnet", "diffusion", "train"});

  RunConfig c;
  read(j, "seed", "", c.seed);
  c.diffusion.vocab = static_cast<int>(synth::vocabulary().size());

  if (j.contains("world")) {
    const json& w = j["world"];
    require_object(w, "world");
    check_keys(w, "world", {"frames", "resolution", "count", "actions"});
    read(w, "frames", "world", c.world.n_frames);
    read(w, "resolution", "world", c.world.res);
    read(w, "count", "world", c.count);
    if (w.contains("actions")) {
      std::vector<std::string> names;
      read(w, "actions", "world", names);
      if (names.empty()) throw UsageError("config: world.actions must not be empty");
      c.world.actions.clear();
      for (const auto& n : names) c.world.actions.push_back(synth::parse_action(n));
    }
  }
  if (c.world.n_frames < 2) throw UsageError("config: world.frames must be at least 2");
  if (c.world.res < 16 || c.world.res % 16 != 0) {
    throw UsageError("config: world.resolution must be a positive multiple of 16");
  }
  if (c.count < 0) throw UsageError("config: world.count must be non-negative");

  if (j.contains("segnet")) {
    const json& s = j["segnet"];
    require_object(s, "segnet");
    check_keys(s, "segnet", {"d4", "d8", "d16", "dk", "dv", "capacity"});
    read(s, "d4", "segnet", c.segnet.d4);
    read(s, "d8", "segnet", c.segnet.d8);
    read(s, "d16", "segnet", c.segnet.d16);
    read(s, "dk", "segnet", c.segnet.dk);
    read(s, "dv", "segnet", c.segnet.dv);
    read(s, "capacity", "segnet", c.segnet.capacity_per_view);
  }
  for (auto [v, name] : {std::pair{c.segnet.d4, "d4"}, {c.segnet.d8, "d8"}, {c.segnet.d16, "d16"},
                         {c.segnet.dk, "dk"}, {c.segnet.dv, "dv"}, {c.segnet.capacity_per_view, "capacity"}}) {
    positive(v, std::string("segnet.") + name);
  }

  if (j.contains("diffusion")) {
    const json& d = j["diffusion"];
    require_object(d, "diffusion");
    check_keys(d, "diffusion", {"T", "beta_start", "beta_end", "patch", "widths", "d_txt", "sample_steps"});
    read(d, "T", "diffusion", c.diffusion.T);
    read(d, "beta_start", "diffusion", c.diffusion.beta_start);
    read(d, "beta_end", "diffusion", c.diffusion.beta_end);
    read(d, "patch", "diffusion", c.diffusion.patch);
    read(d, "widths", "diffusion", c.diffusion.widths);
    read(d, "d_txt", "diffusion", c.diffusion.d_txt);
    read(d, "sample_steps", "diffusion", c.sample_steps);
  }
  make_schedule(c.diffusion.T, c.diffusion.beta_start, c.diffusion.beta_end);
  positive(c.diffusion.patch, "diffusion.patch");
  positive(c.diffusion.d_txt, "diffusion.d_txt");
  for (int w : c.diffusion.widths) positive(w, "diffusion.widths");
  if ((c.world.res / c.diffusion.patch) % 4 != 0 || c.world.res % c.diffusion.patch != 0) {
    throw UsageError("config: resolution / patch must be a multiple of 4");
  }
  if (c.sample_steps < 1 || c.sample_steps > c.diffusion.T) {
    throw UsageError("config: diffusion.sample_steps must lie in [1, T]");
  }

  if (j.contains("train")) {
    require_object(j["train"], "train");
    check_keys(j["train"], "train", {"seg", "diff1", "diff2"});
  }
  read_train(j, "seg", c.seed, c.seg_train);
  read_train(j, "diff1", c.seed, c.diff1_train);
  read_train(j, "diff2", c.seed, c.diff2_train);
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  if (path.empty()) return parse_config("{}");
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace exgn
