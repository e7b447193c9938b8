#include "exgn/segnet.hpp"

#include <algorithm>
#include <cmath>

#include "exgn/errors.hpp"

namespace exgn {
inline namespace EXGN_PRECISION_NS {

namespace {

// [B, C, h, w] -> [B, h*w, C]
Tensor to_tokens(const Tensor& x) {
  return reshape(permute(x, {0, 2, 3, 1}), {x.dim(0), x.dim(2) * x.dim(3), x.dim(1)});
}

// [B, h*w, C] -> [B, C, h, w]
Tensor from_tokens(const Tensor& t, int64_t h, int64_t w) {
  return permute(reshape(t, {t.dim(0), h, w, t.dim(2)}), {0, 3, 1, 2});
}

// Frame n of a frame-major [N*B, ...] tensor.
Tensor frame_slice(const Tensor& x, int64_t n, int64_t batch) {
  return slice(x, 0, n * batch, batch);
}

Tensor flatten_clip(const Tensor& clip) {
  Shape s = clip.shape();
  if (s.size() != 5) throw ShapeError("expected clip tensor [N, B, C, H, W], got " + shape_str(s));
  return reshape(clip, {s[0] * s[1], s[2], s[3], s[4]});
}

}  // namespace

MemoryBank::MemoryBank(int capacity_per_view) : capacity_(capacity_per_view) {
  if (capacity_per_view < 1) throw ShapeError("memory capacity must be positive");
}

void MemoryBank::store(MemoryEntry entry) {
  int last = -1;
  for (const auto& e : entries_) {
    if (e.view == entry.view) last = e.frame_index;
  }
  if (entry.frame_index <= last) {
    throw ShapeError("memory store out of order: frame " + std::to_string(entry.frame_index) +
                     " after " + std::to_string(last));
  }
  const View view = entry.view;
  entries_.push_back(std::move(entry));
  if (count(view) <= capacity_) return;
  // Oldest entry of this view after its pinned first one.
  bool seen_first = false;
  for (auto it = entries_.begin(); it != entries_.end(); ++it) {
    if (it->view != view) continue;
    if (!seen_first) {
      seen_first = true;
      continue;
    }
    entries_.erase(it);
    return;
  }
}

int MemoryBank::count(View view) const {
  return static_cast<int>(
      std::count_if(entries_.begin(), entries_.end(), [&](const auto& e) { return e.view == view; }));
}

std::vector<int> MemoryBank::frame_indices(View view) const {
  std::vector<int> out;
  for (const auto& e : entries_) {
    if (e.view == view) out.push_back(e.frame_index);
  }
  return out;
}

Tensor blend(const Tensor& z_exo_query, const Tensor& z_ego_query, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw UsageError("blend alpha must lie in [0, 1], got " + std::to_string(alpha));
  }
  if (alpha == 1.0) return z_ego_query;
  if (alpha == 0.0) return z_exo_query;
  if (z_exo_query.shape() != z_ego_query.shape()) throw ShapeError("blend operands differ in shape");
  return add(scale(z_ego_query, static_cast<real>(alpha)),
             scale(z_exo_query, static_cast<real>(1.0 - alpha)));
}

SegNet::ConvNorm SegNet::conv_norm(const std::string& name, int64_t cin, int64_t cout, int stride) {
  return {make_conv(params_, name + ".conv", cin, cout, 3, stride),
          make_group_norm(params_, name + ".norm", cout)};
}

SegNet::ResBlock SegNet::res_block(const std::string& name, int64_t c) {
  ResBlock r;
  r.a = conv_norm(name + ".a", c, c, 1);
  r.conv = make_conv(params_, name + ".b.conv", c, c, 3);
  r.norm = make_group_norm(params_, name + ".b.norm", c);
  return r;
}

SegNet::SegNet(const SegConfig& cfg, uint64_t seed) : cfg_(cfg), params_(seed) {
  if (cfg.d4 <= 0 || cfg.d8 <= 0 || cfg.d16 <= 0 || cfg.dk <= 0 || cfg.dv <= 0) {
    throw UsageError("segnet widths must be positive");
  }
  stem_ = conv_norm("enc.stem", 3, 16, 2);
  down4_ = conv_norm("enc.down4", 16, cfg.d4, 2);
  down8_ = conv_norm("enc.down8", cfg.d4, cfg.d8, 2);
  down16_ = conv_norm("enc.down16", cfg.d8, cfg.d16, 2);
  for (int i = 0; i < 2; ++i) {
    stage4_.push_back(res_block("enc.s4." + std::to_string(i), cfg.d4));
    stage8_.push_back(res_block("enc.s8." + std::to_string(i), cfg.d8));
    stage16_.push_back(res_block("enc.s16." + std::to_string(i), cfg.d16));
  }
  const int64_t widths[] = {6, 16, cfg.d4, cfg.d8, cfg.d16};
  for (int i = 0; i < 4; ++i) {
    mask_down_.push_back(conv_norm("mask.down" + std::to_string(i), widths[i], widths[i + 1], 2));
  }
  mask_res_ = res_block("mask.res", cfg.d16);
  const int64_t hidden = std::max(1, cfg.d16 / 16);
  cbam_fc1_ = make_linear(params_, "cbam.fc1", cfg.d16, hidden);
  cbam_fc2_ = make_linear(params_, "cbam.fc2", hidden, cfg.d16);
  cbam_spatial_ = make_conv(params_, "cbam.spatial", 2, 1, 7);
  w_q_ = make_linear(params_, "attn.w_q", cfg.d16, cfg.dk, false);
  w_k_ = make_linear(params_, "attn.w_k", cfg.d16, cfg.dk, false);
  w_v_ = make_linear(params_, "attn.w_v", cfg.d16, cfg.dv, false);
  w_out_ = make_linear(params_, "attn.w_out", cfg.dv, cfg.dv, false);
  dec16_ = {conv_norm("dec16.0", cfg.dv + cfg.d16, cfg.d16, 1), conv_norm("dec16.1", cfg.d16, cfg.d16, 1)};
  dec8_ = {conv_norm("dec8.0", cfg.d16 + cfg.d8, cfg.d8, 1), conv_norm("dec8.1", cfg.d8, cfg.d8, 1)};
  dec4_ = {conv_norm("dec4.0", cfg.d8 + cfg.d4, cfg.d4, 1), conv_norm("dec4.1", cfg.d4, cfg.d4, 1)};
  head_ = make_conv(params_, "head", cfg.d4, 3, 1);
}

MultiScaleFeatures SegNet::encode_image(const Tensor& frames) const {
  if (frames.rank() != 4 || frames.dim(1) != 3) {
    throw ShapeError("encode_image expects [B, 3, H, W], got " + shape_str(frames.shape()));
  }
  if (frames.dim(2) % 16 != 0 || frames.dim(3) % 16 != 0) {
    throw ShapeError("frame size must be divisible by 16, got " + shape_str(frames.shape()));
  }
  MultiScaleFeatures f;
  Tensor x = down4_(stem_(frames));
  for (const auto& r : stage4_) x = r(x);
  f.f4 = x;
  x = down8_(x);
  for (const auto& r : stage8_) x = r(x);
  f.f8 = x;
  x = down16_(x);
  for (const auto& r : stage16_) x = r(x);
  f.f16 = x;
  return f;
}

Tensor SegNet::cbam_channel_gates(const Tensor& x) const {
  const int64_t b = x.dim(0), c = x.dim(1);
  const Tensor flat = reshape(x, {b, c, x.dim(2) * x.dim(3)});
  auto mlp = [&](const Tensor& v) { return cbam_fc2_(relu(cbam_fc1_(v))); };
  const Tensor logits = add(mlp(mean(flat, 2)), mlp(max(flat, 2)));
  return reshape(sigmoid(logits), {b, c, 1, 1});
}

Tensor SegNet::cbam(const Tensor& x) const {
  const Tensor gated = mul(x, cbam_channel_gates(x));
  const Tensor pooled = concat({mean(gated, 1, true), max(gated, 1, true)}, 1);
  return mul(gated, sigmoid(cbam_spatial_(pooled)));
}

Tensor SegNet::encode_mask(const Tensor& frames, const Tensor& onehot, const Tensor& image_f16) const {
  if (frames.shape() != onehot.shape()) {
    throw ShapeError("encode_mask: frame " + shape_str(frames.shape()) + " vs mask " +
                     shape_str(onehot.shape()));
  }
  Tensor x = concat({frames, onehot}, 1);
  for (const auto& d : mask_down_) x = d(x);
  x = mask_res_(x);
  if (x.shape() != image_f16.shape()) {
    throw ShapeError("encode_mask: mask feature " + shape_str(x.shape()) + " vs image feature " +
                     shape_str(image_f16.shape()));
  }
  return cbam(add(x, image_f16));
}

Tensor SegNet::memory_read(const Tensor& query_f16, const MemoryBank& bank, Tensor* weights) const {
  if (bank.empty()) throw ShapeError("memory_read on an empty bank");
  const int64_t b = query_f16.dim(0), h = query_f16.dim(2), w = query_f16.dim(3), l = h * w;
  const Tensor q = reshape(w_q_(to_tokens(query_f16)), {b, l, 1, cfg_.dk});
  std::vector<Tensor> keys, values;
  for (const auto& e : bank.entries()) {
    if (e.key.dim(0) != b || e.key.dim(1) != l) {
      throw ShapeError("memory entry " + shape_str(e.key.shape()) + " does not match query " +
                       shape_str(query_f16.shape()));
    }
    keys.push_back(e.key);
    values.push_back(e.value);
  }
  const Tensor k = stack(keys, 2);    // [B, L, E, Dk]
  const Tensor v = stack(values, 2);  // [B, L, E, Dv]
  const real inv_sqrt_dk = real(1) / std::sqrt(static_cast<real>(cfg_.dk));
  const Tensor a = softmax(scale(matmul(q, transpose(k, 2, 3)), inv_sqrt_dk), -1);
  if (weights) *weights = a;
  const Tensor read = reshape(matmul(a, v), {b, l, cfg_.dv});
  return from_tokens(w_out_(read), h, w);
}

void SegNet::memory_store(MemoryBank& bank, View view, int frame_index, const Tensor& image_f16,
                          const Tensor& value_feature) const {
  if (image_f16.shape() != value_feature.shape()) {
    throw ShapeError("memory_store: key feature " + shape_str(image_f16.shape()) +
                     " vs value feature " + shape_str(value_feature.shape()));
  }
  bank.store({view, frame_index, w_k_(to_tokens(image_f16)), w_v_(to_tokens(value_feature))});
}

Tensor SegNet::decode_mask(const Tensor& zpp, const MultiScaleFeatures& feats) const {
  Tensor x = concat({zpp, feats.f16}, 1);
  for (const auto& c : dec16_) x = c(x);
  x = concat({upsample_bilinear2x(x), feats.f8}, 1);
  for (const auto& c : dec8_) x = c(x);
  x = concat({upsample_bilinear2x(x), feats.f4}, 1);
  for (const auto& c : dec4_) x = c(x);
  return upsample_bilinear(head_(x), 4);
}

Tensor SegNet::predict_step(const Tensor& exo_frame, const Tensor& exo_onehot,
                            const Tensor& ego_frame, MemoryBank& bank, int frame_index,
                            double alpha, const Tensor* ego_value_onehot) const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw UsageError("blend alpha must lie in [0, 1], got " + std::to_string(alpha));
  }
  const Tensor exo16 = encode_image(exo_frame).f16;
  memory_store(bank, View::exo, frame_index, exo16, encode_mask(exo_frame, exo_onehot, exo16));
  const MultiScaleFeatures ego = encode_image(ego_frame);
  const Tensor z = alpha < 1.0 ? memory_read(exo16, bank) : Tensor();
  const Tensor zp = alpha > 0.0 ? memory_read(ego.f16, bank) : Tensor();
  const Tensor logits = decode_mask(blend(z, zp, alpha), ego);
  Tensor onehot;
  if (ego_value_onehot) {
    onehot = *ego_value_onehot;
  } else {
    onehot = one_hot(argmax_classes(logits), logits.dim(0), logits.dim(2), logits.dim(3));
  }
  memory_store(bank, View::ego, frame_index, ego.f16, encode_mask(ego_frame, onehot, ego.f16));
  return logits;
}

UnrollOutput SegNet::unroll(const UnrollInputs& in) const {
  const int64_t n_frames = in.exo_frames.dim(0), batch = in.exo_frames.dim(1);
  if (in.ego_frames.shape() != in.exo_frames.shape() || in.exo_onehot.shape() != in.exo_frames.shape()) {
    throw ShapeError("unroll: ego/exo clip shapes differ");
  }
  if (static_cast<int64_t>(in.alpha.size()) != n_frames ||
      static_cast<int64_t>(in.use_gt_value.size()) != n_frames) {
    throw ShapeError("unroll: per-frame schedules must have one entry per frame");
  }
  const bool any_gt = std::find(in.use_gt_value.begin(), in.use_gt_value.end(), true) !=
                      in.use_gt_value.end();
  if (any_gt && in.ego_onehot.shape() != in.exo_frames.shape()) {
    throw ShapeError("unroll: ground-truth ego masks missing or misshaped");
  }

  // Everything that does not depend on earlier predictions runs batched over
  // all frames.
  const Tensor exo_flat = flatten_clip(in.exo_frames);
  const Tensor ego_flat = flatten_clip(in.ego_frames);
  const Tensor exo16 = encode_image(exo_flat).f16;
  const Tensor exo_values = encode_mask(exo_flat, flatten_clip(in.exo_onehot), exo16);
  const MultiScaleFeatures ego = encode_image(ego_flat);
  const Tensor ego_onehot = any_gt ? flatten_clip(in.ego_onehot) : Tensor();

  UnrollOutput out{{}, MemoryBank(cfg_.capacity_per_view)};
  for (int64_t n = 0; n < n_frames; ++n) {
    const double alpha = in.alpha[static_cast<size_t>(n)];
    if (!(alpha >= 0.0 && alpha <= 1.0)) {
      throw UsageError("blend alpha must lie in [0, 1], got " + std::to_string(alpha));
    }
    const int frame_index = static_cast<int>(n) + 1;
    const Tensor exo16_n = frame_slice(exo16, n, batch);
    memory_store(out.bank, View::exo, frame_index, exo16_n, frame_slice(exo_values, n, batch));
    const MultiScaleFeatures ego_n{frame_slice(ego.f4, n, batch), frame_slice(ego.f8, n, batch),
                                   frame_slice(ego.f16, n, batch)};
    const Tensor z = alpha < 1.0 ? memory_read(exo16_n, out.bank) : Tensor();
    const Tensor zp = alpha > 0.0 ? memory_read(ego_n.f16, out.bank) : Tensor();
    const Tensor logits = decode_mask(blend(z, zp, alpha), ego_n);
    Tensor onehot;
    if (in.use_gt_value[static_cast<size_t>(n)]) {
      onehot = frame_slice(ego_onehot, n, batch);
    } else {
      onehot = one_hot(argmax_classes(logits), batch, logits.dim(2), logits.dim(3));
    }
    const Tensor ego_frame_n = frame_slice(ego_flat, n, batch);
    memory_store(out.bank, View::ego, frame_index, ego_n.f16,
                 encode_mask(ego_frame_n, onehot, ego_n.f16));
    out.logits.push_back(logits);
  }
  return out;
}

std::vector<uint8_t> SegNet::rollout(const Tensor& exo_frames, std::span<const uint8_t> exo_masks,
                                     const Tensor& g1) const {
  if (exo_frames.rank() != 4 || exo_frames.dim(1) != 3) {
    throw ShapeError("rollout expects exo frames [N, 3, H, W], got " + shape_str(exo_frames.shape()));
  }
  const int64_t n = exo_frames.dim(0), h = exo_frames.dim(2), w = exo_frames.dim(3);
  if (g1.shape() != Shape{3, h, w}) {
    throw ShapeError("rollout: first ego frame " + shape_str(g1.shape()) + " does not match exo " +
                     shape_str(exo_frames.shape()));
  }
  // Only the first ego frame is ever read; later ego inputs are zero images.
  std::vector<real> ego(static_cast<size_t>(exo_frames.numel()), real(0));
  std::copy(g1.data().begin(), g1.data().end(), ego.begin());
  UnrollInputs in;
  in.exo_frames = reshape(exo_frames, {n, 1, 3, h, w});
  in.exo_onehot = reshape(one_hot(exo_masks, n, h, w), {n, 1, 3, h, w});
  in.ego_frames = Tensor({n, 1, 3, h, w}, std::move(ego));
  in.use_gt_value.assign(static_cast<size_t>(n), false);
  in.alpha.assign(static_cast<size_t>(n), 0.0);
  in.alpha[0] = 1.0;
  const UnrollOutput out = unroll(in);
  std::vector<uint8_t> classes;
  classes.reserve(static_cast<size_t>(n * h * w));
  for (const auto& l : out.logits) {
    const auto c = argmax_classes(l);
    classes.insert(classes.end(), c.begin(), c.end());
  }
  return classes;
}

void SegNet::save(Container& out) const {
  params_.save(out, "seg/");
  const std::vector<float> meta{static_cast<float>(cfg_.d4),  static_cast<float>(cfg_.d8),
                                static_cast<float>(cfg_.d16), static_cast<float>(cfg_.dk),
                                static_cast<float>(cfg_.dv),  static_cast<float>(cfg_.capacity_per_view)};
  out.put_f32("seg/meta", {meta.size()}, meta);
}

SegConfig SegNet::read_config(const Container& in) {
  const auto& m = in.get_f32("seg/meta");
  if (m.f32.size() != 6) throw FormatError("seg/meta must hold 6 values");
  SegConfig c;
  c.d4 = static_cast<int>(m.f32[0]);
  c.d8 = static_cast<int>(m.f32[1]);
  c.d16 = static_cast<int>(m.f32[2]);
  c.dk = static_cast<int>(m.f32[3]);
  c.dv = static_cast<int>(m.f32[4]);
  c.capacity_per_view = static_cast<int>(m.f32[5]);
  return c;
}

void SegNet::load(const Container& in) {
  const SegConfig c = read_config(in);
  if (c.d4 != cfg_.d4 || c.d8 != cfg_.d8 || c.d16 != cfg_.d16 || c.dk != cfg_.dk || c.dv != cfg_.dv ||
      c.capacity_per_view != cfg_.capacity_per_view) {
    throw FormatError("segmentation checkpoint dims do not match the configured network");
  }
  params_.load(in, "seg/");
}

}  // namespace EXGN_PRECISION_NS
}  // namespace exgn
