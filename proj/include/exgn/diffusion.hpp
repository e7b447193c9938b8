#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "exgn/container.hpp"
#include "exgn/nn.hpp"

// Mask-conditioned latent video diffusion. Clips are [N, 3, H, W] with the
// frame axis doubling as the batch axis of every convolution; temporal
// attention mixes information across it.

namespace exgn {
inline namespace EXGN_PRECISION_NS {

struct DiffusionSchedule {
  int T = 0;
  std::vector<double> betas;       // index t - 1 for t in [1, T]
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  /// Cumulative product up to t, with alpha_bar(0) = 1.
  double alpha_bar(int t) const;
};

/// Linear beta schedule. The defaults are the common 1000-step range scaled to
/// 100 steps, so alpha_bar(T) is close to zero. Throws UsageError unless
/// T >= 2 and 0 < beta_start < beta_end < 1.
DiffusionSchedule make_schedule(int T = 100, double beta_start = 1e-3, double beta_end = 0.2);

/// Space-to-depth [N, C, H, W] -> [N, C*p*p, H/p, W/p]; channel c*p*p + dy*p + dx
/// holds pixel (p*i + dy, p*j + dx) of input channel c.
Tensor latent_encode(const Tensor& clip, int patch = 4);
Tensor latent_decode(const Tensor& latent, int patch = 4);

/// [0, 1] pixels to the [-1, 1] model range and back.
Tensor to_model_range(const Tensor& x);
Tensor from_model_range(const Tensor& x);

/// Per frame: noisy latent, clean first-frame latent (zeros after frame 1),
/// and a visibility channel that is 1 on frame 1 only.
Tensor build_condition(const Tensor& z_t, const Tensor& z0);

/// Sinusoidal embedding of a scalar timestep, [1, dim].
Tensor timestep_embedding(double t, int dim);

struct DiffusionConfig {
  int T = 100;
  double beta_start = 1e-3;
  double beta_end = 0.2;
  int patch = 4;
  std::array<int, 3> widths{64, 128, 256};
  int d_txt = 64;
  int vocab = 13;
};

/// Sampler inputs shared by inference and evaluation.
struct SampleRequest {
  Tensor g1;                     // [3, H, W]
  std::vector<uint8_t> tokens;
  /// Class ids [N, H, W] driving mask guidance; empty disables guidance.
  std::vector<uint8_t> masks;
  int n_frames = 8;
  int steps = 20;
  uint64_t seed = 0;
};

class DiffusionModel {
 public:
  explicit DiffusionModel(const DiffusionConfig& cfg = {}, uint64_t seed = 0);

  const DiffusionConfig& config() const { return cfg_; }
  const DiffusionSchedule& schedule() const { return schedule_; }
  ParamStore& unet() { return unet_; }
  ParamStore& text() { return text_; }
  ParamStore& mask_guide() { return mask_; }
  const ParamStore& unet() const { return unet_; }
  const ParamStore& text() const { return text_; }
  const ParamStore& mask_guide() const { return mask_; }

  int latent_channels() const { return 3 * cfg_.patch * cfg_.patch; }

  /// [L, d_txt]; an empty token list yields a [0, d_txt] context.
  Tensor embed_text(std::span<const uint8_t> tokens) const;
  /// Guidance features at the three fusion resolutions (finest first) from
  /// one-hot masks [N, 3, H, W].
  std::vector<Tensor> mask_guidance(const Tensor& onehot) const;
  /// Noise prediction for z_bar [N, 2*Cz + 1, Hz, Wz] at timestep t in [1, T].
  /// `h` == nullptr skips every fusion site.
  Tensor unet_eps(const Tensor& z_bar, int t, const Tensor& text_ctx,
                  const std::vector<Tensor>* h = nullptr) const;

  /// Mean squared error between eps and the prediction at (t, eps) for a
  /// clean clip [N, 3, H, W] in [0, 1]. `onehot` == nullptr disables guidance.
  Tensor loss_at(const Tensor& clip, std::span<const uint8_t> tokens, const Tensor* onehot, int t,
                 const Tensor& eps) const;
  /// Draws t ~ U[1, T] and eps ~ N(0, I) from `rng` and evaluates loss_at.
  template <class Rng>
  Tensor train_loss(const Tensor& clip, std::span<const uint8_t> tokens, const Tensor* onehot,
                    Rng& rng) const {
    std::uniform_int_distribution<int> pick_t(1, schedule_.T);
    const int t = pick_t(rng);
    return loss_at(clip, tokens, onehot, t, gaussian(latent_shape(clip), rng));
  }

  /// Deterministic (eta = 0) DDIM over an evenly spaced timestep subsequence.
  /// Frame 1 of the result is g1 exactly; other frames are clamped to [0, 1].
  Tensor ddim_sample(const SampleRequest& req) const;
  /// Timesteps visited by a `steps`-step sampler, descending.
  std::vector<int> ddim_timesteps(int steps) const;

  /// `with_mask_guidance` false writes a phase-1 checkpoint without the
  /// guidance parameters.
  void save(Container& out, bool with_mask_guidance) const;
  /// Loads the backbone and text table, plus guidance parameters when the
  /// checkpoint has them. Returns whether it did.
  bool load(const Container& in);
  static DiffusionConfig read_config(const Container& in);

  Shape latent_shape(const Tensor& clip) const;
  template <class Rng>
  static Tensor gaussian(const Shape& shape, Rng& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<real> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : v) x = static_cast<real>(n(rng));
    return Tensor(shape, std::move(v));
  }

 private:
  struct ResBlock {
    GroupNorm norm1, norm2;
    Conv2d conv1, conv2;
    Linear time_proj;  // absent (empty weight) in the guidance encoder
    Conv2d skip;       // 1x1, present when widths differ
    Tensor operator()(const Tensor& x, const Tensor* temb) const;
  };
  struct SelfAttention {
    GroupNorm norm;
    Linear q, k, v, out;
  };
  struct CrossAttention {
    GroupNorm norm;
    Linear q, k, v, out;
  };
  struct Level {
    ResBlock res;
    SelfAttention spatial;
    CrossAttention cross;
    SelfAttention temporal;
  };
  struct GuideBlock {
    Conv2d down;
    ResBlock res;
    SelfAttention temporal;
  };

  ResBlock res_block(ParamStore& ps, const std::string& name, int64_t cin, int64_t cout,
                     bool with_time);
  SelfAttention self_attention(ParamStore& ps, const std::string& name, int64_t c);
  CrossAttention cross_attention(const std::string& name, int64_t c);
  Level level(const std::string& name, int64_t cin, int64_t cout);

  Tensor spatial_attention(const SelfAttention& a, const Tensor& x) const;
  Tensor temporal_attention(const SelfAttention& a, const Tensor& x) const;
  Tensor cross_attention(const CrossAttention& a, const Tensor& x, const Tensor& ctx) const;
  Tensor run_level(const Level& lv, const Tensor& x, const Tensor& temb, const Tensor& ctx,
                   const Tensor* h, const Linear* proj) const;

  DiffusionConfig cfg_;
  DiffusionSchedule schedule_;
  ParamStore unet_, text_, mask_;

  Conv2d conv_in_;
  Linear time_fc1_, time_fc2_;
  Level down1_, down2_, mid_, up2_, up1_;
  Conv2d downsample1_, downsample2_;
  GroupNorm out_norm_;
  Conv2d conv_out_;
  Tensor embed_;
  std::array<GuideBlock, 4> guide_;
  std::array<Linear, 3> guide_proj_;  // fusion at up1 (finest), up2, mid
};

}  // namespace EXGN_PRECISION_NS
}  // namespace exgn
