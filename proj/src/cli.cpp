#include "exgn/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <thread>

#include <nlohmann/json.hpp>

#include "exgn/config.hpp"
#include "exgn/errors.hpp"
#include "exgn/metrics.hpp"
#include "exgn/rng.hpp"

namespace exgn {

namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void make_dirs(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw FormatError("cannot create directory " + p.string() + ": " + ec.message());
}

std::vector<synth::PairedSample> read_data(const fs::path& path) {
  if (!fs::exists(path)) throw FormatError("dataset not found: " + path.string());
  auto data = synth::read_dataset(path);
  if (data.empty()) throw FormatError("dataset " + path.string() + " holds no samples");
  return data;
}

Container read_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw FormatError("checkpoint not found: " + path.string());
  return Container::load(path);
}

Tensor first_frame(const synth::PairedSample& s) {
  const size_t n = static_cast<size_t>(3 * s.res * s.res);
  return Tensor({3, s.res, s.res}, std::vector<real>(s.ego_clip.begin(), s.ego_clip.begin() + n));
}

Tensor clip_tensor(const std::vector<float>& v, int n, int res) {
  return Tensor({n, 3, res, res}, std::vector<real>(v.begin(), v.end()));
}

void write_pgm(const fs::path& path, std::span<const uint8_t> mask, int h, int w) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "P5\n" << w << ' ' << h << "\n2\n";
  out.write(reinterpret_cast<const char*>(mask.data()), static_cast<std::streamsize>(mask.size()));
}

// Planar [3, h, w] floats in [0, 1] to interleaved 8-bit RGB.
void write_ppm(const fs::path& path, std::span<const real> rgb, int h, int w) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "P6\n" << w << ' ' << h << "\n255\n";
  const size_t plane = static_cast<size_t>(h * w);
  std::vector<uint8_t> bytes(3 * plane);
  for (size_t px = 0; px < plane; ++px) {
    for (size_t c = 0; c < 3; ++c) {
      const double v = std::clamp(static_cast<double>(rgb[c * plane + px]), 0.0, 1.0);
      bytes[3 * px + c] = static_cast<uint8_t>(std::lround(v * 255.0));
    }
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::string sample_name(size_t i) { return "s" + std::to_string(i); }

fs::path prediction_path(const fs::path& run, size_t i) { return run / "frames" / (sample_name(i) + ".exgn"); }

void print_class_fractions(std::ostream& out, const char* view, const std::vector<synth::PairedSample>& data,
                           bool ego) {
  std::array<double, 3> counts{};
  double total = 0;
  for (const auto& s : data) {
    for (uint8_t c : ego ? s.ego_masks : s.exo_masks) counts[c] += 1;
    total += static_cast<double>((ego ? s.ego_masks : s.exo_masks).size());
  }
  out << "  " << view << " class fractions: background " << counts[0] / total << ", hand "
      << counts[1] / total << ", object " << counts[2] / total << '\n';
}

// gen-data ---------------------------------------------------------------

struct GenDataOptions {
  std::string config, out;
  std::optional<int> count;
  std::optional<uint64_t> seed;
};

void cmd_gen_data(const GenDataOptions& o, std::ostream& out) {
  RunConfig cfg = load_config(o.config);
  const int count = o.count.value_or(cfg.count);
  const uint64_t seed = o.seed.value_or(cfg.seed);
  if (count <= 0) throw UsageError("empty dataset requested");
  const auto data = synth::generate_dataset(cfg.world, count, seed);
  const fs::path path(o.out);
  if (path.has_parent_path()) make_dirs(path.parent_path());
  synth::write_dataset(data, path);
  out << "wrote " << path.string() << ": " << count << " samples, " << cfg.world.n_frames << " frames, "
      << cfg.world.res << "x" << cfg.world.res << ", seed " << seed << '\n';
  print_class_fractions(out, "ego", data, true);
  print_class_fractions(out, "exo", data, false);
}

// train ------------------------------------------------------------------

struct TrainOptions {
  std::string stage, config, data, out, init;
};

void cmd_train(const TrainOptions& o, std::ostream& out) {
  if (o.stage == "diff2" && o.init.empty()) {
    throw UsageError("--stage diff2 requires --init pointing at a diff1 checkpoint");
  }
  if (o.stage != "diff2" && !o.init.empty()) throw UsageError("--init applies only to --stage diff2");
  const RunConfig cfg = load_config(o.config);
  const auto data = read_data(o.data);
  const fs::path run(o.out);
  const fs::path ckpt_dir = run / "checkpoints", log_dir = run / "logs";
  make_dirs(ckpt_dir);
  make_dirs(log_dir);
  const fs::path ckpt = ckpt_dir / (o.stage + ".exgn");

  const auto t0 = Clock::now();
  TrainLog log;
  if (o.stage == "seg") {
    SegNet net(cfg.segnet, cfg.seg_train.seed);
    const int every = std::max(1, cfg.seg_train.epochs / 10);
    log = train_segnet(net, data, cfg.seg_train, [&](int epoch) {
      if (epoch % every != 0 && epoch != cfg.seg_train.epochs) return;
      Container c;
      net.save(c);
      c.save(ckpt);
    });
  } else {
    const TrainConfig& tc = o.stage == "diff1" ? cfg.diff1_train : cfg.diff2_train;
    DiffusionModel model(cfg.diffusion, tc.seed);
    if (o.stage == "diff2") {
      const Container init = read_checkpoint(o.init);
      model.load(init);
    }
    const bool guided = o.stage == "diff2";
    const int every = std::max(1, tc.epochs / 10);
    auto hook = [&](int epoch) {
      if (epoch % every != 0 && epoch != tc.epochs) return;
      Container c;
      model.save(c, guided);
      c.save(ckpt);
    };
    log = guided ? train_diffusion_phase2(model, data, tc, hook) : train_diffusion_phase1(model, data, tc, hook);
  }
  for (const auto& r : log.records) {
    if (!std::isfinite(r.loss)) throw NumericError("training loss became non-finite at step " + std::to_string(r.step));
  }
  const fs::path log_path = log_dir / (o.stage + ".csv");
  log.write_csv(log_path.string());
  out << "stage " << o.stage << ": " << log.records.size() << " steps in " << std::fixed << std::setprecision(1)
      << seconds_since(t0) << " s, final loss " << std::setprecision(5) << log.records.back().loss << '\n'
      << "  checkpoint " << ckpt.string() << "\n  log " << log_path.string() << '\n';
}

// infer ------------------------------------------------------------------

struct InferOptions {
  std::string seg, diff, data, out, config;
  std::optional<int> sample, steps;
  std::optional<uint64_t> seed;
  bool oracle_masks = false;
};

void cmd_infer(const InferOptions& o, std::ostream& out) {
  if (!o.oracle_masks && o.seg.empty()) throw UsageError("--seg is required unless --oracle-masks is given");
  const RunConfig cfg = load_config(o.config);
  const int steps = o.steps.value_or(cfg.sample_steps);
  const uint64_t seed = o.seed.value_or(cfg.seed);
  const auto data = read_data(o.data);

  const Container diff_ckpt = read_checkpoint(o.diff);
  DiffusionModel model(DiffusionModel::read_config(diff_ckpt));
  if (!model.load(diff_ckpt)) throw FormatError(o.diff + " has no mask-guidance parameters (phase-1 checkpoint?)");
  std::optional<SegNet> net;
  if (!o.oracle_masks) {
    const Container seg_ckpt = read_checkpoint(o.seg);
    net.emplace(SegNet::read_config(seg_ckpt));
    net->load(seg_ckpt);
  }
  const int res = data.front().res;
  if (res % 16 != 0 || (res / model.config().patch) % 4 != 0) {
    throw FormatError("dataset resolution " + std::to_string(res) + " does not fit the checkpoints");
  }
  model.ddim_timesteps(steps);

  std::vector<size_t> samples;
  if (o.sample) {
    if (*o.sample < 0 || static_cast<size_t>(*o.sample) >= data.size()) {
      throw UsageError("--sample " + std::to_string(*o.sample) + " outside [0, " + std::to_string(data.size()) + ")");
    }
    samples.push_back(static_cast<size_t>(*o.sample));
  } else {
    for (size_t i = 0; i < data.size(); ++i) samples.push_back(i);
  }

  const fs::path run(o.out);
  make_dirs(run / "frames");
  make_dirs(run / "masks");
  const auto t0 = Clock::now();
  for (size_t i : samples) {
    const auto& s = data[i];
    const Tensor g1 = first_frame(s);
    std::vector<uint8_t> masks =
        o.oracle_masks ? s.ego_masks : net->rollout(clip_tensor(s.exo_clip, s.n_frames, s.res), s.exo_masks, g1);
    SampleRequest req;
    req.g1 = g1;
    req.tokens = s.tokens;
    req.masks = masks;
    req.n_frames = s.n_frames;
    req.steps = steps;
    req.seed = derive_seed(seed, i);
    const Tensor clip = model.ddim_sample(req);
    for (real v : clip.data()) {
      if (!std::isfinite(v)) throw NumericError("non-finite value in generated clip of sample " + std::to_string(i));
    }

    const size_t plane = static_cast<size_t>(s.res * s.res);
    for (int n = 0; n < s.n_frames; ++n) {
      const std::string stem = sample_name(i) + "_f" + std::to_string(n + 1);
      write_pgm(run / "masks" / (stem + ".pgm"), std::span(masks).subspan(static_cast<size_t>(n) * plane, plane),
                s.res, s.res);
      write_ppm(run / "frames" / (stem + ".ppm"), clip.data().subspan(static_cast<size_t>(n) * 3 * plane, 3 * plane),
                s.res, s.res);
    }
    Container dump;
    put_tensor(dump, "clip", clip);
    dump.put_u8("masks", {static_cast<uint64_t>(s.n_frames), static_cast<uint64_t>(s.res), static_cast<uint64_t>(s.res)},
                masks);
    const std::vector<uint8_t> oracle{static_cast<uint8_t>(o.oracle_masks)};
    dump.put_u8("oracle_masks", {1}, oracle);
    dump.save(prediction_path(run, i));
  }
  out << "generated " << samples.size() << " clip(s) with " << (o.oracle_masks ? "ground-truth" : "predicted")
      << " masks, " << steps << " DDIM steps, in " << std::fixed << std::setprecision(1) << seconds_since(t0)
      << " s\n  output " << run.string() << '\n';
}

// eval -------------------------------------------------------------------

struct EvalOptions {
  std::string pred, data, out;
};

struct SampleEval {
  metrics::ClipSegScores seg;
  std::vector<metrics::GenScore> gen;
};

SampleEval evaluate_sample(const fs::path& run, size_t i, const synth::PairedSample& s) {
  const fs::path path = prediction_path(run, i);
  if (!fs::exists(path)) throw FormatError("missing prediction for sample " + std::to_string(i) + ": " + path.string());
  const Container c = Container::load(path);
  const auto& clip = c.get_f32("clip");
  const auto& masks = c.get_u8("masks");
  const std::vector<uint64_t> clip_dims{static_cast<uint64_t>(s.n_frames), 3, static_cast<uint64_t>(s.res),
                                        static_cast<uint64_t>(s.res)};
  if (clip.dims != clip_dims || masks.u8.size() != s.ego_masks.size()) {
    throw FormatError("prediction for sample " + std::to_string(i) + " does not match the dataset shape");
  }
  SampleEval e;
  e.seg = metrics::evaluate_masks(masks.u8, s.ego_masks, s.n_frames, s.res, s.res);
  e.gen = metrics::evaluate_frames(clip.f32, s.ego_clip, s.n_frames, s.res, s.res);
  return e;
}

void cmd_eval(const EvalOptions& o, std::ostream& out) {
  const auto data = read_data(o.data);
  const fs::path run(o.pred);
  // Check every sample up front so a missing one fails before any work.
  for (size_t i = 0; i < data.size(); ++i) {
    if (!fs::exists(prediction_path(run, i))) {
      throw FormatError("missing prediction for sample " + std::to_string(i) + ": " + prediction_path(run, i).string());
    }
  }

  std::vector<SampleEval> results(data.size());
  std::vector<std::exception_ptr> errors(data.size());
  const size_t workers = std::min<size_t>(static_cast<size_t>(worker_threads()), data.size());
  auto work = [&](size_t first) {
    for (size_t i = first; i < data.size(); i += workers) {
      try {
        results[i] = evaluate_sample(run, i, data[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (size_t w = 1; w < workers; ++w) pool.emplace_back(work, w);
  work(0);
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  const fs::path report(o.out);
  make_dirs(report);
  std::ofstream seg_csv(report / "seg.csv"), gen_csv(report / "gen.csv");
  if (!seg_csv || !gen_csv) throw FormatError("cannot write report files in " + report.string());
  seg_csv << std::setprecision(10) << "sample,frame,class,iou,ca,le\n";
  gen_csv << std::setprecision(10) << "sample,frame,ssim,psnr\n";
  std::array<std::array<double, 3>, metrics::kMaskClassCount> seg_sum{};
  std::array<double, 2> gen_sum{};
  size_t seg_rows = 0, gen_rows = 0;
  for (size_t i = 0; i < data.size(); ++i) {
    const auto& r = results[i];
    for (size_t n = 0; n < r.seg.frames.size(); ++n) {
      for (int c = 0; c < metrics::kMaskClassCount; ++c) {
        const auto& sc = r.seg.frames[n][static_cast<size_t>(c)];
        seg_csv << i << ',' << n + 1 << ',' << metrics::mask_class_name(static_cast<metrics::MaskClass>(c)) << ','
                << sc.iou << ',' << sc.contour_accuracy << ',' << sc.location_error << '\n';
        seg_sum[static_cast<size_t>(c)][0] += sc.iou;
        seg_sum[static_cast<size_t>(c)][1] += sc.contour_accuracy;
        seg_sum[static_cast<size_t>(c)][2] += sc.location_error;
      }
      ++seg_rows;
    }
    // Frame 1 is the given input and is left out of generation scores.
    for (size_t n = 1; n < r.gen.size(); ++n) {
      gen_csv << i << ',' << n + 1 << ',' << r.gen[n].ssim << ',' << r.gen[n].psnr << '\n';
      gen_sum[0] += r.gen[n].ssim;
      gen_sum[1] += r.gen[n].psnr;
      ++gen_rows;
    }
  }

  nlohmann::ordered_json summary;
  summary["samples"] = data.size();
  for (int c = 0; c < metrics::kMaskClassCount; ++c) {
    const auto& s = seg_sum[static_cast<size_t>(c)];
    const double rows = static_cast<double>(seg_rows);
    summary["segmentation"][metrics::mask_class_name(static_cast<metrics::MaskClass>(c))] = {
        {"iou", s[0] / rows}, {"ca", s[1] / rows}, {"le", s[2] / rows}};
  }
  const double g = std::max<double>(1.0, static_cast<double>(gen_rows));
  summary["generation"] = {{"ssim", gen_sum[0] / g}, {"psnr", gen_sum[1] / g}, {"frames_scored", gen_rows}};
  std::ofstream json_out(report / "summary.json");
  json_out << summary.dump(2) << '\n';
  if (!json_out) throw FormatError("cannot write " + (report / "summary.json").string());

  out << "evaluated " << data.size() << " samples\n"
      << "  foreground IoU " << summary["segmentation"]["foreground"]["iou"].get<double>() << ", CA "
      << summary["segmentation"]["foreground"]["ca"].get<double>() << ", LE "
      << summary["segmentation"]["foreground"]["le"].get<double>() << '\n'
      << "  SSIM " << summary["generation"]["ssim"].get<double>() << ", PSNR "
      << summary["generation"]["psnr"].get<double>() << " dB (frames 2..N)\n"
      << "  report " << report.string() << '\n';
}

}  // namespace

int worker_threads() {
  const char* v = std::getenv("EXGN_THREADS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1 || n > 1024) {
    throw UsageError(std::string("EXGN_THREADS must be a positive integer, got \"") + v + "\"");
  }
  return static_cast<int>(n);
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Cross-view hand-object mask prediction and mask-guided video generation on a toy world"};
  app.require_subcommand(1);

  GenDataOptions gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic paired ego/exo dataset");
  gen_cmd->add_option("--config", gen.config, "JSON run configuration");
  gen_cmd->add_option("--out", gen.out, "Dataset file to write")->required();
  gen_cmd->add_option("--count", gen.count, "Number of samples (overrides world.count)");
  gen_cmd->add_option("--seed", gen.seed, "Master seed (overrides seed)");

  TrainOptions train;
  auto* train_cmd = app.add_subcommand("train", "Train one stage and write its checkpoint and log");
  train_cmd->add_option("--stage", train.stage, "seg, diff1 or diff2")
      ->required()
      ->check(CLI::IsMember({"seg", "diff1", "diff2"}));
  train_cmd->add_option("--config", train.config, "JSON run configuration");
  train_cmd->add_option("--data", train.data, "Dataset file")->required();
  train_cmd->add_option("--out", train.out, "Run directory")->required();
  train_cmd->add_option("--init", train.init, "diff1 checkpoint (required for diff2)");

  InferOptions infer;
  auto* infer_cmd = app.add_subcommand("infer", "Predict ego masks and generate ego clips");
  infer_cmd->add_option("--seg", infer.seg, "Segmentation checkpoint");
  infer_cmd->add_option("--diff", infer.diff, "Phase-2 diffusion checkpoint")->required();
  infer_cmd->add_option("--data", infer.data, "Dataset file")->required();
  infer_cmd->add_option("--sample", infer.sample, "Single sample index (default: all)");
  infer_cmd->add_option("--steps", infer.steps, "DDIM steps (overrides diffusion.sample_steps)");
  infer_cmd->add_option("--seed", infer.seed, "Sampling seed (overrides seed)");
  infer_cmd->add_option("--out", infer.out, "Run directory")->required();
  infer_cmd->add_option("--config", infer.config, "JSON run configuration");
  infer_cmd->add_flag("--oracle-masks", infer.oracle_masks, "Use ground-truth ego masks instead of predictions");

  EvalOptions eval;
  auto* eval_cmd = app.add_subcommand("eval", "Score predictions against the dataset");
  eval_cmd->add_option("--pred", eval.pred, "Run directory written by infer")->required();
  eval_cmd->add_option("--data", eval.data, "Dataset file")->required();
  eval_cmd->add_option("--out", eval.out, "Report directory")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
      return kExitOk;
    }
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    worker_threads();
    if (*gen_cmd) cmd_gen_data(gen, out);
    if (*train_cmd) cmd_train(train, out);
    if (*infer_cmd) cmd_infer(infer, out);
    if (*eval_cmd) cmd_eval(eval, out);
    return kExitOk;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const Error& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace exgn
