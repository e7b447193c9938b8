#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "exgn/container.hpp"
#include "exgn/nn.hpp"
#include "exgn/synthworld.hpp"

// Cross-view hand/object mask predictor: a shared image encoder, a mask
// encoder fused with image features through CBAM, per-location attention
// over an ego/exo memory bank, and a skip-connected mask decoder.
//
// Tensors carry a leading batch axis B so several clips advance together;
// clip tensors are laid out frame-major as [N, B, C, H, W].

namespace exgn {
inline namespace EXGN_PRECISION_NS {

using synth::View;

struct SegConfig {
  int d4 = 32;
  int d8 = 64;
  int d16 = 96;
  int dk = 64;
  int dv = 64;
  int capacity_per_view = 6;
};

struct MultiScaleFeatures {
  Tensor f4;   // [B, d4, H/4, W/4]
  Tensor f8;   // [B, d8, H/8, W/8]
  Tensor f16;  // [B, d16, H/16, W/16]
};

struct MemoryEntry {
  View view = View::exo;
  int frame_index = 0;
  Tensor key;    // [B, L, Dk], L = (H/16)(W/16)
  Tensor value;  // [B, L, Dv]
};

/// Per-view FIFO store whose first entry of each view is never evicted.
class MemoryBank {
 public:
  explicit MemoryBank(int capacity_per_view = 6);

  /// Throws ShapeError when frame_index does not increase within the view.
  void store(MemoryEntry entry);

  const std::vector<MemoryEntry>& entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }
  int count(View view) const;
  std::vector<int> frame_indices(View view) const;
  int capacity_per_view() const { return capacity_; }

 private:
  int capacity_;
  std::vector<MemoryEntry> entries_;
};

/// alpha * z_ego_query + (1 - alpha) * z_exo_query. The endpoints return the
/// corresponding input unchanged. Throws UsageError for alpha outside [0, 1].
Tensor blend(const Tensor& z_exo_query, const Tensor& z_ego_query, double alpha);

/// Inputs of one teacher-forced unroll; every clip tensor is [N, B, 3, H, W].
struct UnrollInputs {
  Tensor exo_frames;
  Tensor exo_onehot;
  /// Ego frames with unobserved frames already zeroed.
  Tensor ego_frames;
  /// Ground-truth ego one-hot masks; read only for frames with use_gt_value.
  Tensor ego_onehot;
  /// Per frame: whether the ego memory value comes from ground truth or from
  /// the network's own argmax prediction.
  std::vector<bool> use_gt_value;
  /// Per-frame blend weight of the ego-query readout.
  std::vector<double> alpha;
};

struct UnrollOutput {
  std::vector<Tensor> logits;  // per frame, [B, 3, H, W]
  MemoryBank bank;
};

class SegNet {
 public:
  explicit SegNet(const SegConfig& cfg = {}, uint64_t seed = 0);

  const SegConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  /// frames [B, 3, H, W] with H and W divisible by 16.
  MultiScaleFeatures encode_image(const Tensor& frames) const;
  /// Value feature [B, d16, H/16, W/16] from frame + one-hot mask, fused with
  /// the image feature through CBAM.
  Tensor encode_mask(const Tensor& frames, const Tensor& onehot, const Tensor& image_f16) const;
  /// Channel gates of the CBAM block, [B, d16, 1, 1].
  Tensor cbam_channel_gates(const Tensor& x) const;
  Tensor cbam(const Tensor& x) const;

  /// Readout [B, Dv, h, w]. When `weights` is set it receives the attention
  /// weights [B, L, 1, E] over bank entries. Throws ShapeError on an empty bank.
  Tensor memory_read(const Tensor& query_f16, const MemoryBank& bank,
                     Tensor* weights = nullptr) const;
  void memory_store(MemoryBank& bank, View view, int frame_index, const Tensor& image_f16,
                    const Tensor& value_feature) const;
  /// Logits [B, 3, H, W].
  Tensor decode_mask(const Tensor& zpp, const MultiScaleFeatures& feats) const;

  /// Processes frame n of a clip batch: stores the exo entry, reads memory
  /// with exo and ego queries, decodes ego logits, stores the ego entry.
  /// `ego_value_onehot` replaces the predicted mask for the ego entry.
  Tensor predict_step(const Tensor& exo_frame, const Tensor& exo_onehot, const Tensor& ego_frame,
                      MemoryBank& bank, int frame_index, double alpha,
                      const Tensor* ego_value_onehot = nullptr) const;

  UnrollOutput unroll(const UnrollInputs& in) const;

  /// Inference: exo_frames [N, 3, H, W], exo_masks class ids [N, H, W], the
  /// first ego frame [3, H, W]. Returns predicted ego class ids [N, H, W].
  std::vector<uint8_t> rollout(const Tensor& exo_frames, std::span<const uint8_t> exo_masks,
                               const Tensor& g1) const;

  void save(Container& out) const;
  /// Checks the stored dims against this network before loading.
  void load(const Container& in);
  static SegConfig read_config(const Container& in);

 private:
  struct ConvNorm {
    Conv2d conv;
    GroupNorm norm;
    Tensor operator()(const Tensor& x) const { return relu(norm(conv(x))); }
  };
  struct ResBlock {
    ConvNorm a;
    Conv2d conv;
    GroupNorm norm;
    Tensor operator()(const Tensor& x) const { return relu(add(x, norm(conv(a(x))))); }
  };

  ConvNorm conv_norm(const std::string& name, int64_t cin, int64_t cout, int stride);
  ResBlock res_block(const std::string& name, int64_t c);

  SegConfig cfg_;
  ParamStore params_;

  ConvNorm stem_, down4_, down8_, down16_;
  std::vector<ResBlock> stage4_, stage8_, stage16_;
  std::vector<ConvNorm> mask_down_;
  ResBlock mask_res_;
  Linear cbam_fc1_, cbam_fc2_;
  Conv2d cbam_spatial_;
  Linear w_q_, w_k_, w_v_, w_out_;
  std::vector<ConvNorm> dec16_, dec8_, dec4_;
  Conv2d head_;
};

}  // namespace EXGN_PRECISION_NS
}  // namespace exgn
