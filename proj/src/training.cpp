#include "exgn/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "exgn/errors.hpp"
#include "exgn/rng.hpp"

namespace exgn {
inline namespace EXGN_PRECISION_NS {

namespace {

using Clock = std::chrono::steady_clock;

double ramp(int64_t step, int64_t total_steps, double ramp_fraction) {
  if (total_steps <= 0 || step < 0 || step > total_steps) {
    throw UsageError("schedule step " + std::to_string(step) + " outside [0, " +
                     std::to_string(total_steps) + "]");
  }
  const double end = ramp_fraction * static_cast<double>(total_steps);
  if (end <= 0 || static_cast<double>(step) >= end) return 1.0;
  return static_cast<double>(step) / end;
}

void check_dataset(const std::vector<synth::PairedSample>& data, const TrainConfig& cfg) {
  if (data.empty()) throw UsageError("training needs a non-empty dataset");
  if (cfg.epochs < 1 || cfg.batch_size < 1) throw UsageError("epochs and batch_size must be positive");
  if (!(cfg.learning_rate > 0)) throw UsageError("learning_rate must be positive");
  for (const auto& s : data) {
    if (s.n_frames != data.front().n_frames || s.res != data.front().res) {
      throw FormatError("all training clips must share frame count and resolution");
    }
  }
}

std::vector<size_t> batch_indices(const std::vector<size_t>& order, int64_t batch, int batch_size) {
  const size_t begin = static_cast<size_t>(batch) * static_cast<size_t>(batch_size);
  const size_t end = std::min(order.size(), begin + static_cast<size_t>(batch_size));
  return {order.begin() + static_cast<std::ptrdiff_t>(begin), order.begin() + static_cast<std::ptrdiff_t>(end)};
}

double elapsed_ms(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

Tensor sample_clip(const synth::PairedSample& s, View view) {
  const auto& v = view == View::ego ? s.ego_clip : s.exo_clip;
  return Tensor({s.n_frames, 3, s.res, s.res}, std::vector<real>(v.begin(), v.end()));
}

// Shared loop of both diffusion phases.
TrainLog train_diffusion(DiffusionModel& model, const std::vector<synth::PairedSample>& data,
                         const TrainConfig& cfg, const EpochHook& on_epoch, bool guided) {
  check_dataset(data, cfg);
  std::vector<Tensor> params;
  if (guided) {
    model.unet().set_requires_grad(false);
    model.text().set_requires_grad(false);
    model.mask_guide().set_requires_grad(true);
    params = model.mask_guide().tensors();
  } else {
    model.unet().set_requires_grad(true);
    model.text().set_requires_grad(true);
    model.mask_guide().set_requires_grad(false);
    params = model.unet().tensors();
    const auto text = model.text().tensors();
    params.insert(params.end(), text.begin(), text.end());
  }
  std::vector<Tensor> clips, onehots;
  for (const auto& s : data) {
    clips.push_back(sample_clip(s, View::ego));
    if (guided) onehots.push_back(one_hot(s.ego_masks, s.n_frames, s.res, s.res));
  }

  AdamState state;
  const AdamConfig adam{cfg.learning_rate};
  const int64_t batches = (static_cast<int64_t>(data.size()) + cfg.batch_size - 1) / cfg.batch_size;
  TrainLog log;
  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(cfg.seed, epoch, data.size());
    for (int64_t b = 0; b < batches; ++b, ++step) {
      const auto t0 = Clock::now();
      const auto idx = batch_indices(order, b, cfg.batch_size);
      for (auto& p : params) p.zero_grad();
      double loss_sum = 0;
      for (size_t k = 0; k < idx.size(); ++k) {
        const size_t i = idx[k];
        // Noise stream per (step, clip) so any step is reproducible alone.
        std::mt19937_64 rng(derive_seed(derive_seed(cfg.seed, static_cast<uint64_t>(step)), i));
        Tape tape;
        TapeScope scope(tape);
        const Tensor loss = model.train_loss(clips[i], data[i].tokens, guided ? &onehots[i] : nullptr, rng);
        loss_sum += loss.item();
        backward(scale(loss, real(1) / static_cast<real>(idx.size())), tape);
      }
      adam_step(params, state, adam);
      log.records.push_back({step, loss_sum / static_cast<double>(idx.size()), 0.0, 0.0, elapsed_ms(t0)});
    }
    if (on_epoch) on_epoch(epoch + 1);
  }
  for (auto& p : params) p.zero_grad();
  return log;
}

}  // namespace

void TrainLog::write_csv(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write training log " + path);
  out << "step,loss,alpha,mask_frac,ms\n";
  for (const auto& r : records) {
    out << r.step << ',' << r.loss << ',' << r.alpha << ',' << r.mask_frac << ',' << r.ms << '\n';
  }
}

Tensor seg_loss(const Tensor& logits, std::span<const uint8_t> target, double bce_weight,
                double dice_weight) {
  if (logits.rank() != 4 || logits.dim(1) != 3) {
    throw ShapeError("seg_loss expects logits [K, 3, H, W], got " + shape_str(logits.shape()));
  }
  const int64_t k = logits.dim(0), h = logits.dim(2), w = logits.dim(3);
  const Tensor q = one_hot(target, k, h, w);
  const Tensor log_p = log_softmax(logits, 1);
  const Tensor log_1mp = log1m_softmax(logits, 1);
  // -(q log p + (1 - q) log(1 - p)), averaged over images, classes and pixels.
  const Tensor bce = scale(mean(add(mul(q, sub(log_p, log_1mp)), log_1mp)), real(-1));

  const Tensor p = softmax(logits, 1);
  const Tensor p_fg = reshape(slice(p, 1, 1, 2), {k, 2, h * w});
  const Tensor q_fg = reshape(slice(q, 1, 1, 2), {k, 2, h * w});
  const Tensor inter = sum(mul(p_fg, q_fg), 2);
  const Tensor denom = add_scalar(add(sum(p_fg, 2), sum(q_fg, 2)), real(1));
  const Tensor dice = sub(Tensor::scalar(1), mean(div(add_scalar(scale(inter, real(2)), real(1)), denom)));
  return add(scale(bce, static_cast<real>(bce_weight)), scale(dice, static_cast<real>(dice_weight)));
}

double curriculum_fraction(int64_t step, int64_t total_steps, double ramp_fraction) {
  return ramp(step, total_steps, ramp_fraction);
}

double anneal_alpha(int64_t step, int64_t total_steps, double ramp_fraction, double start, double end) {
  const double r = ramp(step, total_steps, ramp_fraction);
  if (r == 1.0) return end;
  return start + (end - start) * r;
}

int masked_frame_count(double fraction, int n_frames) {
  return static_cast<int>(std::lround(fraction * (n_frames - 1)));
}

int64_t total_steps(const TrainConfig& cfg, size_t dataset_size) {
  const int64_t batches =
      (static_cast<int64_t>(dataset_size) + cfg.batch_size - 1) / cfg.batch_size;
  return batches * cfg.epochs;
}

std::vector<size_t> epoch_order(uint64_t seed, int epoch, size_t count) {
  std::vector<size_t> order(count);
  std::iota(order.begin(), order.end(), size_t{0});
  std::mt19937_64 rng(derive_seed(seed ^ 0x5E6D1A7A11ull, static_cast<uint64_t>(epoch)));
  // Fisher-Yates with an explicit draw so the order does not depend on the
  // standard library's shuffle.
  for (size_t i = count; i > 1; --i) {
    const size_t j = static_cast<size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

Tensor clip_batch(const std::vector<synth::PairedSample>& data, const std::vector<size_t>& idx,
                  View view) {
  const auto& first = data.at(idx.front());
  const int64_t n = first.n_frames, b = static_cast<int64_t>(idx.size()), res = first.res;
  const size_t frame = static_cast<size_t>(3 * res * res);
  std::vector<real> v(static_cast<size_t>(n * b) * frame);
  for (int64_t f = 0; f < n; ++f) {
    for (int64_t j = 0; j < b; ++j) {
      const auto& s = data.at(idx[static_cast<size_t>(j)]);
      const auto& clip = view == View::ego ? s.ego_clip : s.exo_clip;
      std::copy_n(clip.begin() + static_cast<std::ptrdiff_t>(static_cast<size_t>(f) * frame), frame,
                  v.begin() + static_cast<std::ptrdiff_t>(static_cast<size_t>(f * b + j) * frame));
    }
  }
  return Tensor({n, b, 3, res, res}, std::move(v));
}

std::vector<uint8_t> frame_masks(const std::vector<synth::PairedSample>& data,
                                 const std::vector<size_t>& idx, View view, int n) {
  std::vector<uint8_t> out;
  for (size_t i : idx) {
    const auto& s = data.at(i);
    const auto& m = view == View::ego ? s.ego_masks : s.exo_masks;
    const size_t plane = static_cast<size_t>(s.res * s.res);
    out.insert(out.end(), m.begin() + static_cast<std::ptrdiff_t>(static_cast<size_t>(n) * plane),
               m.begin() + static_cast<std::ptrdiff_t>(static_cast<size_t>(n + 1) * plane));
  }
  return out;
}

Tensor mask_batch(const std::vector<synth::PairedSample>& data, const std::vector<size_t>& idx,
                  View view) {
  const auto& first = data.at(idx.front());
  const int64_t n = first.n_frames, b = static_cast<int64_t>(idx.size()), res = first.res;
  std::vector<uint8_t> classes;
  for (int f = 0; f < n; ++f) {
    const auto m = frame_masks(data, idx, view, f);
    classes.insert(classes.end(), m.begin(), m.end());
  }
  return reshape(one_hot(classes, n * b, res, res), {n, b, 3, res, res});
}

TrainLog train_segnet(SegNet& net, const std::vector<synth::PairedSample>& data,
                      const TrainConfig& cfg, const EpochHook& on_epoch) {
  check_dataset(data, cfg);
  const int n_frames = data.front().n_frames;
  const int64_t batches = (static_cast<int64_t>(data.size()) + cfg.batch_size - 1) / cfg.batch_size;
  const int64_t total = total_steps(cfg, data.size());
  net.params().set_requires_grad(true);
  std::vector<Tensor> params = net.params().tensors();
  AdamState state;
  const AdamConfig adam{cfg.learning_rate};
  TrainLog log;
  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(cfg.seed, epoch, data.size());
    for (int64_t b = 0; b < batches; ++b, ++step) {
      const auto t0 = Clock::now();
      const auto idx = batch_indices(order, b, cfg.batch_size);
      const double frac = curriculum_fraction(step, total, cfg.ramp_fraction);
      const double alpha = anneal_alpha(step, total, cfg.ramp_fraction, cfg.alpha_start, cfg.alpha_end);
      const int masked = masked_frame_count(frac, n_frames);

      UnrollInputs in;
      in.exo_frames = clip_batch(data, idx, View::exo);
      in.exo_onehot = mask_batch(data, idx, View::exo);
      in.ego_onehot = mask_batch(data, idx, View::ego);
      Tensor ego = clip_batch(data, idx, View::ego);
      // Zero the trailing `masked` frames.
      const size_t frame = static_cast<size_t>(ego.numel() / n_frames);
      auto ego_data = ego.mutable_data();
      std::fill(ego_data.begin() + static_cast<std::ptrdiff_t>(static_cast<size_t>(n_frames - masked) * frame),
                ego_data.end(), real(0));
      in.ego_frames = ego;
      in.alpha.assign(static_cast<size_t>(n_frames), alpha);
      in.use_gt_value.assign(static_cast<size_t>(n_frames), true);
      for (int f = n_frames - masked; f < n_frames; ++f) in.use_gt_value[static_cast<size_t>(f)] = false;

      net.params().zero_grad();
      Tape tape;
      double loss_value = 0;
      {
        TapeScope scope(tape);
        const UnrollOutput out = net.unroll(in);
        Tensor loss = Tensor::scalar(0);
        for (int f = 0; f < n_frames; ++f) {
          loss = add(loss, seg_loss(out.logits[static_cast<size_t>(f)],
                                    frame_masks(data, idx, View::ego, f), cfg.bce_weight,
                                    cfg.dice_weight));
        }
        loss_value = loss.item();
        backward(loss, tape);
      }
      adam_step(params, state, adam);
      log.records.push_back({step, loss_value, alpha, static_cast<double>(masked) / std::max(1, n_frames - 1),
                             elapsed_ms(t0)});
    }
    if (on_epoch) on_epoch(epoch + 1);
  }
  net.params().zero_grad();
  return log;
}

TrainLog train_diffusion_phase1(DiffusionModel& model, const std::vector<synth::PairedSample>& data,
                                const TrainConfig& cfg, const EpochHook& on_epoch) {
  return train_diffusion(model, data, cfg, on_epoch, false);
}

TrainLog train_diffusion_phase2(DiffusionModel& model, const std::vector<synth::PairedSample>& data,
                                const TrainConfig& cfg, const EpochHook& on_epoch) {
  return train_diffusion(model, data, cfg, on_epoch, true);
}

}  // namespace EXGN_PRECISION_NS
}  // namespace exgn
