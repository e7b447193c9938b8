#include "exgn/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>

#include "exgn/errors.hpp"
#include "exgn/rng.hpp"

namespace exgn {
inline namespace EXGN_PRECISION_NS {

namespace {

// [N, C, h, w] -> [N, h*w, C]
Tensor to_tokens(const Tensor& x) {
  return reshape(permute(x, {0, 2, 3, 1}), {x.dim(0), x.dim(2) * x.dim(3), x.dim(1)});
}

Tensor from_tokens(const Tensor& t, int64_t h, int64_t w) {
  return permute(reshape(t, {t.dim(0), h, w, t.dim(2)}), {0, 3, 1, 2});
}

// Sinusoidal codes of frame indices 0..n-1, [n, dim].
Tensor frame_positions(int64_t n, int64_t dim) {
  std::vector<Tensor> rows;
  for (int64_t i = 0; i < n; ++i) rows.push_back(timestep_embedding(static_cast<double>(i), static_cast<int>(dim)));
  return reshape(concat(rows, 0), {n, dim});
}

}  // namespace

double DiffusionSchedule::alpha_bar(int t) const {
  if (t == 0) return 1.0;
  if (t < 0 || t > T) throw UsageError("timestep " + std::to_string(t) + " outside [0, T]");
  return alpha_bars[static_cast<size_t>(t - 1)];
}

DiffusionSchedule make_schedule(int T, double beta_start, double beta_end) {
  if (T < 2) throw UsageError("diffusion needs T >= 2");
  if (!(beta_start > 0 && beta_start < beta_end && beta_end < 1)) {
    throw UsageError("beta range must satisfy 0 < beta_start < beta_end < 1");
  }
  DiffusionSchedule s;
  s.T = T;
  double prod = 1.0;
  for (int i = 0; i < T; ++i) {
    const double beta = beta_start + (beta_end - beta_start) * i / (T - 1);
    s.betas.push_back(beta);
    s.alphas.push_back(1.0 - beta);
    prod *= 1.0 - beta;
    s.alpha_bars.push_back(prod);
  }
  return s;
}

Tensor latent_encode(const Tensor& clip, int patch) {
  if (clip.rank() != 4 || clip.dim(2) % patch != 0 || clip.dim(3) % patch != 0) {
    throw ShapeError("latent_encode needs [N, C, H, W] with H, W divisible by " +
                     std::to_string(patch) + ", got " + shape_str(clip.shape()));
  }
  const int64_t n = clip.dim(0), c = clip.dim(1), hz = clip.dim(2) / patch, wz = clip.dim(3) / patch;
  const Tensor blocks = reshape(clip, {n, c, hz, patch, wz, patch});
  return reshape(permute(blocks, {0, 1, 3, 5, 2, 4}), {n, c * patch * patch, hz, wz});
}

Tensor latent_decode(const Tensor& latent, int patch) {
  const int64_t pp = static_cast<int64_t>(patch) * patch;
  if (latent.rank() != 4 || latent.dim(1) % pp != 0) {
    throw ShapeError("latent_decode needs [N, C*p*p, h, w], got " + shape_str(latent.shape()));
  }
  const int64_t n = latent.dim(0), c = latent.dim(1) / pp, hz = latent.dim(2), wz = latent.dim(3);
  const Tensor blocks = reshape(latent, {n, c, patch, patch, hz, wz});
  return reshape(permute(blocks, {0, 1, 4, 2, 5, 3}), {n, c, hz * patch, wz * patch});
}

Tensor to_model_range(const Tensor& x) { return add_scalar(scale(x, real(2)), real(-1)); }
Tensor from_model_range(const Tensor& x) { return scale(add_scalar(x, real(1)), real(0.5)); }

Tensor build_condition(const Tensor& z_t, const Tensor& z0) {
  if (z_t.shape() != z0.shape() || z_t.rank() != 4) {
    throw ShapeError("build_condition: " + shape_str(z_t.shape()) + " vs " + shape_str(z0.shape()));
  }
  const int64_t n = z_t.dim(0), c = z_t.dim(1), h = z_t.dim(2), w = z_t.dim(3);
  const int64_t plane = h * w;
  std::vector<real> first(static_cast<size_t>(n * c * plane), real(0));
  std::copy_n(z0.data().begin(), c * plane, first.begin());
  std::vector<real> visible(static_cast<size_t>(n * plane), real(0));
  std::fill_n(visible.begin(), plane, real(1));
  return concat({z_t, Tensor({n, c, h, w}, std::move(first)), Tensor({n, 1, h, w}, std::move(visible))},
                1);
}

Tensor timestep_embedding(double t, int dim) {
  if (dim < 2 || dim % 2 != 0) throw ShapeError("timestep embedding width must be even");
  const int half = dim / 2;
  std::vector<real> v(static_cast<size_t>(dim));
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    v[static_cast<size_t>(i)] = static_cast<real>(std::sin(t * freq));
    v[static_cast<size_t>(half + i)] = static_cast<real>(std::cos(t * freq));
  }
  return Tensor({1, dim}, std::move(v));
}

Tensor DiffusionModel::ResBlock::operator()(const Tensor& x, const Tensor* temb) const {
  Tensor h = conv1(silu(norm1(x)));
  if (temb && time_proj.weight.rank() == 2) {
    const Tensor t = time_proj(silu(*temb));
    h = add(h, reshape(t, {1, t.dim(1), 1, 1}));
  }
  h = conv2(silu(norm2(h)));
  return add(skip.weight.rank() == 4 ? skip(x) : x, h);
}

DiffusionModel::ResBlock DiffusionModel::res_block(ParamStore& ps, const std::string& name,
                                                   int64_t cin, int64_t cout, bool with_time) {
  ResBlock r;
  r.norm1 = make_group_norm(ps, name + ".norm1", cin);
  r.conv1 = make_conv(ps, name + ".conv1", cin, cout, 3);
  if (with_time) r.time_proj = make_linear(ps, name + ".time", 4 * cfg_.widths[0], cout);
  r.norm2 = make_group_norm(ps, name + ".norm2", cout);
  r.conv2 = make_conv(ps, name + ".conv2", cout, cout, 3, 1, Init::zeros);
  if (cin != cout) r.skip = make_conv(ps, name + ".skip", cin, cout, 1);
  return r;
}

DiffusionModel::SelfAttention DiffusionModel::self_attention(ParamStore& ps, const std::string& name,
                                                             int64_t c) {
  return {make_group_norm(ps, name + ".norm", c), make_linear(ps, name + ".q", c, c),
          make_linear(ps, name + ".k", c, c), make_linear(ps, name + ".v", c, c),
          make_linear(ps, name + ".out", c, c, true, Init::zeros)};
}

DiffusionModel::CrossAttention DiffusionModel::cross_attention(const std::string& name, int64_t c) {
  return {make_group_norm(unet_, name + ".norm", c), make_linear(unet_, name + ".q", c, c),
          make_linear(unet_, name + ".k", cfg_.d_txt, c), make_linear(unet_, name + ".v", cfg_.d_txt, c),
          make_linear(unet_, name + ".out", c, c, true, Init::zeros)};
}

DiffusionModel::Level DiffusionModel::level(const std::string& name, int64_t cin, int64_t cout) {
  return {res_block(unet_, name + ".res", cin, cout, true), self_attention(unet_, name + ".spatial", cout),
          cross_attention(name + ".cross", cout), self_attention(unet_, name + ".temporal", cout)};
}

DiffusionModel::DiffusionModel(const DiffusionConfig& cfg, uint64_t seed)
    : cfg_(cfg),
      schedule_(make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)),
      unet_(derive_seed(seed, 1)),
      text_(derive_seed(seed, 2)),
      mask_(derive_seed(seed, 3)) {
  if (cfg.patch < 1) throw UsageError("patch size must be positive");
  for (int w : cfg.widths) {
    if (w <= 0) throw UsageError("diffusion widths must be positive");
  }
  if (cfg.vocab < 1 || cfg.vocab > 32) throw UsageError("text vocabulary must hold 1..32 words");
  const int64_t c1 = cfg.widths[0], c2 = cfg.widths[1], c3 = cfg.widths[2];
  const int64_t cz = latent_channels();

  conv_in_ = make_conv(unet_, "conv_in", 2 * cz + 1, c1, 3);
  time_fc1_ = make_linear(unet_, "time.fc1", c1, 4 * c1);
  time_fc2_ = make_linear(unet_, "time.fc2", 4 * c1, 4 * c1);
  down1_ = level("down1", c1, c1);
  downsample1_ = make_conv(unet_, "downsample1", c1, c1, 3, 2);
  down2_ = level("down2", c1, c2);
  downsample2_ = make_conv(unet_, "downsample2", c2, c2, 3, 2);
  mid_ = level("mid", c2, c3);
  up2_ = level("up2", c3 + c2, c2);
  up1_ = level("up1", c2 + c1, c1);
  out_norm_ = make_group_norm(unet_, "out.norm", c1);
  conv_out_ = make_conv(unet_, "out.conv", c1, cz, 3, 1, Init::zeros);

  embed_ = text_.add("embed", {cfg.vocab, cfg.d_txt}, Init::kaiming_uniform, cfg.d_txt);

  const int64_t guide_widths[] = {3, 32, c1, c2, c3};
  for (int i = 0; i < 4; ++i) {
    const std::string name = "guide" + std::to_string(i);
    guide_[static_cast<size_t>(i)] = {
        make_conv(mask_, name + ".down", guide_widths[i], guide_widths[i + 1], 3, 2),
        res_block(mask_, name + ".res", guide_widths[i + 1], guide_widths[i + 1], false),
        self_attention(mask_, name + ".temporal", guide_widths[i + 1])};
  }
  // Zero-initialized so guidance starts as an exact no-op.
  for (int i = 0; i < 3; ++i) {
    const int64_t c = guide_widths[i + 2];
    guide_proj_[static_cast<size_t>(i)] =
        make_linear(mask_, "proj" + std::to_string(i), c, c, true, Init::zeros);
  }
}

Tensor DiffusionModel::embed_text(std::span<const uint8_t> tokens) const {
  const int64_t l = static_cast<int64_t>(tokens.size());
  if (l == 0) return Tensor({0, cfg_.d_txt}, {});
  std::vector<real> onehot(static_cast<size_t>(l * cfg_.vocab), real(0));
  for (int64_t i = 0; i < l; ++i) {
    const uint8_t id = tokens[static_cast<size_t>(i)];
    if (id >= cfg_.vocab) throw FormatError("token id " + std::to_string(id) + " out of vocabulary");
    onehot[static_cast<size_t>(i * cfg_.vocab + id)] = real(1);
  }
  return matmul(Tensor({l, cfg_.vocab}, std::move(onehot)), embed_);
}

Tensor DiffusionModel::spatial_attention(const SelfAttention& a, const Tensor& x) const {
  const Tensor tok = to_tokens(a.norm(x));
  const Tensor o = a.out(attention(a.q(tok), a.k(tok), a.v(tok)));
  return add(x, from_tokens(o, x.dim(2), x.dim(3)));
}

Tensor DiffusionModel::temporal_attention(const SelfAttention& a, const Tensor& x) const {
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  // Tokens are the frames at one spatial location, tagged with their index.
  Tensor tok = reshape(permute(a.norm(x), {2, 3, 0, 1}), {h * w, n, c});
  tok = add(tok, frame_positions(n, c));
  const Tensor o = a.out(attention(a.q(tok), a.k(tok), a.v(tok)));
  return add(x, permute(reshape(o, {h, w, n, c}), {2, 3, 0, 1}));
}

Tensor DiffusionModel::cross_attention(const CrossAttention& a, const Tensor& x,
                                       const Tensor& ctx) const {
  if (ctx.rank() != 2 || ctx.dim(0) == 0) return x;
  const Tensor tok = to_tokens(a.norm(x));
  const Tensor o = a.out(attention(a.q(tok), a.k(ctx), a.v(ctx)));
  return add(x, from_tokens(o, x.dim(2), x.dim(3)));
}

Tensor DiffusionModel::run_level(const Level& lv, const Tensor& x, const Tensor& temb,
                                 const Tensor& ctx, const Tensor* h, const Linear* proj) const {
  Tensor y = lv.res(x, &temb);
  y = spatial_attention(lv.spatial, y);
  y = cross_attention(lv.cross, y, ctx);
  if (h) {
    if (h->dim(0) != y.dim(0) || h->dim(2) != y.dim(2) || h->dim(3) != y.dim(3)) {
      throw ShapeError("guidance feature " + shape_str(h->shape()) + " does not match latent " +
                       shape_str(y.shape()));
    }
    y = add(y, from_tokens((*proj)(to_tokens(*h)), y.dim(2), y.dim(3)));
  }
  return temporal_attention(lv.temporal, y);
}

std::vector<Tensor> DiffusionModel::mask_guidance(const Tensor& onehot) const {
  if (onehot.rank() != 4 || onehot.dim(1) != 3) {
    throw ShapeError("mask_guidance expects one-hot [N, 3, H, W], got " + shape_str(onehot.shape()));
  }
  if (onehot.dim(2) % 16 != 0 || onehot.dim(3) % 16 != 0) {
    throw ShapeError("mask_guidance needs H, W divisible by 16, got " + shape_str(onehot.shape()));
  }
  std::vector<Tensor> out;
  Tensor x = onehot;
  for (size_t i = 0; i < guide_.size(); ++i) {
    const auto& g = guide_[i];
    x = temporal_attention(g.temporal, g.res(g.down(x), nullptr));
    if (i >= 1) out.push_back(x);
  }
  return out;
}

Tensor DiffusionModel::unet_eps(const Tensor& z_bar, int t, const Tensor& text_ctx,
                                const std::vector<Tensor>* h) const {
  if (t < 1 || t > schedule_.T) {
    throw UsageError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(schedule_.T) + "]");
  }
  if (z_bar.rank() != 4 || z_bar.dim(1) != 2 * latent_channels() + 1) {
    throw ShapeError("unet input must be [N, " + std::to_string(2 * latent_channels() + 1) +
                     ", h, w], got " + shape_str(z_bar.shape()));
  }
  if (z_bar.dim(2) % 4 != 0 || z_bar.dim(3) % 4 != 0) {
    throw ShapeError("latent size must be divisible by 4, got " + shape_str(z_bar.shape()));
  }
  if (h && h->size() != 3) throw ShapeError("mask guidance must provide three feature maps");
  const Tensor temb = time_fc2_(silu(time_fc1_(timestep_embedding(t, cfg_.widths[0]))));
  auto fusion = [&](size_t i) { return h ? &(*h)[i] : nullptr; };

  const Tensor s1 = run_level(down1_, conv_in_(z_bar), temb, text_ctx, nullptr, nullptr);
  const Tensor s2 = run_level(down2_, downsample1_(s1), temb, text_ctx, nullptr, nullptr);
  Tensor x = run_level(mid_, downsample2_(s2), temb, text_ctx, fusion(2), &guide_proj_[2]);
  x = run_level(up2_, concat({upsample_bilinear2x(x), s2}, 1), temb, text_ctx, fusion(1),
                &guide_proj_[1]);
  x = run_level(up1_, concat({upsample_bilinear2x(x), s1}, 1), temb, text_ctx, fusion(0),
                &guide_proj_[0]);
  return conv_out_(silu(out_norm_(x)));
}

Shape DiffusionModel::latent_shape(const Tensor& clip) const {
  if (clip.rank() != 4 || clip.dim(1) != 3) {
    throw ShapeError("expected clip [N, 3, H, W], got " + shape_str(clip.shape()));
  }
  return {clip.dim(0), latent_channels(), clip.dim(2) / cfg_.patch, clip.dim(3) / cfg_.patch};
}

Tensor DiffusionModel::loss_at(const Tensor& clip, std::span<const uint8_t> tokens,
                               const Tensor* onehot, int t, const Tensor& eps) const {
  const Tensor z0 = latent_encode(to_model_range(clip.detach()), cfg_.patch);
  if (eps.shape() != z0.shape()) {
    throw ShapeError("noise " + shape_str(eps.shape()) + " does not match latent " + shape_str(z0.shape()));
  }
  const double ab = schedule_.alpha_bar(t);
  const Tensor z_t = add(scale(z0, static_cast<real>(std::sqrt(ab))),
                         scale(eps, static_cast<real>(std::sqrt(1.0 - ab))));
  std::vector<Tensor> h;
  if (onehot) h = mask_guidance(*onehot);
  const Tensor pred = unet_eps(build_condition(z_t, z0), t, embed_text(tokens), onehot ? &h : nullptr);
  const Tensor diff = sub(pred, eps);
  return mean(mul(diff, diff));
}

std::vector<int> DiffusionModel::ddim_timesteps(int steps) const {
  if (steps < 1 || steps > schedule_.T) {
    throw UsageError("DDIM steps must lie in [1, " + std::to_string(schedule_.T) + "], got " +
                     std::to_string(steps));
  }
  std::vector<int> ts;
  for (int i = steps - 1; i >= 0; --i) {
    ts.push_back(static_cast<int>((static_cast<int64_t>(i) + 1) * schedule_.T / steps));
  }
  return ts;
}

Tensor DiffusionModel::ddim_sample(const SampleRequest& req) const {
  const auto ts = ddim_timesteps(req.steps);
  if (req.g1.rank() != 3 || req.g1.dim(0) != 3) {
    throw ShapeError("g1 must be [3, H, W], got " + shape_str(req.g1.shape()));
  }
  if (req.n_frames < 1) throw UsageError("sampler needs at least one frame");
  const int64_t n = req.n_frames, h = req.g1.dim(1), w = req.g1.dim(2);
  const Shape zshape{n, latent_channels(), h / cfg_.patch, w / cfg_.patch};
  const int64_t frame_latent = zshape[1] * zshape[2] * zshape[3];

  const Tensor g1_latent = latent_encode(to_model_range(reshape(req.g1, {1, 3, h, w})), cfg_.patch);
  std::vector<real> z0v(static_cast<size_t>(n * frame_latent), real(0));
  std::copy(g1_latent.data().begin(), g1_latent.data().end(), z0v.begin());
  const Tensor z0(zshape, std::move(z0v));

  const Tensor ctx = embed_text(req.tokens);
  std::vector<Tensor> guidance;
  const bool guided = !req.masks.empty();
  if (guided) guidance = mask_guidance(one_hot(req.masks, n, h, w));

  std::mt19937_64 rng(req.seed);
  Tensor z = gaussian(zshape, rng);
  for (size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    const double ab = schedule_.alpha_bar(t), ab_prev = schedule_.alpha_bar(t_prev);
    const Tensor eps = unet_eps(build_condition(z, z0), t, ctx, guided ? &guidance : nullptr);
    std::vector<real> next(static_cast<size_t>(z.numel()));
    const auto zd = z.data(), ed = eps.data();
    for (size_t k = 0; k < next.size(); ++k) {
      double x0 = (zd[k] - std::sqrt(1.0 - ab) * ed[k]) / std::sqrt(ab);
      x0 = std::clamp(x0, -1.0, 1.0);
      next[k] = static_cast<real>(std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * ed[k]);
    }
    z = Tensor(zshape, std::move(next));
  }
  const Tensor pixels = from_model_range(latent_decode(z, cfg_.patch));
  std::vector<real> out(pixels.data().begin(), pixels.data().end());
  for (auto& v : out) v = std::clamp(v, real(0), real(1));
  std::copy(req.g1.data().begin(), req.g1.data().end(), out.begin());
  return Tensor({n, 3, h, w}, std::move(out));
}

void DiffusionModel::save(Container& out, bool with_mask_guidance) const {
  unet_.save(out, "diff/unet/");
  text_.save(out, "diff/text/");
  if (with_mask_guidance) mask_.save(out, "diff/mask/");
  const std::vector<float> meta{static_cast<float>(cfg_.T),
                                static_cast<float>(cfg_.beta_start),
                                static_cast<float>(cfg_.beta_end),
                                static_cast<float>(cfg_.patch),
                                static_cast<float>(cfg_.widths[0]),
                                static_cast<float>(cfg_.widths[1]),
                                static_cast<float>(cfg_.widths[2]),
                                static_cast<float>(cfg_.d_txt),
                                static_cast<float>(cfg_.vocab)};
  out.put_f32("diff/meta", {meta.size()}, meta);
  // The beta bounds again as raw doubles, so a model rebuilt from the
  // checkpoint has exactly the same schedule.
  std::array<uint8_t, 16> betas{};
  std::memcpy(betas.data(), &cfg_.beta_start, 8);
  std::memcpy(betas.data() + 8, &cfg_.beta_end, 8);
  out.put_u8("diff/betas", {betas.size()}, betas);
}

DiffusionConfig DiffusionModel::read_config(const Container& in) {
  const auto& m = in.get_f32("diff/meta");
  if (m.f32.size() != 9) throw FormatError("diff/meta must hold 9 values");
  DiffusionConfig c;
  c.T = static_cast<int>(m.f32[0]);
  c.beta_start = m.f32[1];
  c.beta_end = m.f32[2];
  c.patch = static_cast<int>(m.f32[3]);
  c.widths = {static_cast<int>(m.f32[4]), static_cast<int>(m.f32[5]), static_cast<int>(m.f32[6])};
  c.d_txt = static_cast<int>(m.f32[7]);
  c.vocab = static_cast<int>(m.f32[8]);
  const auto& b = in.get_u8("diff/betas");
  if (b.u8.size() != 16) throw FormatError("diff/betas must hold 16 bytes");
  std::memcpy(&c.beta_start, b.u8.data(), 8);
  std::memcpy(&c.beta_end, b.u8.data() + 8, 8);
  return c;
}

bool DiffusionModel::load(const Container& in) {
  const DiffusionConfig c = read_config(in);
  if (c.T != cfg_.T || c.beta_start != cfg_.beta_start || c.beta_end != cfg_.beta_end || c.patch != cfg_.patch ||
      c.widths != cfg_.widths || c.d_txt != cfg_.d_txt || c.vocab != cfg_.vocab) {
    throw FormatError("diffusion checkpoint dims do not match the configured model");
  }
  unet_.load(in, "diff/unet/");
  text_.load(in, "diff/text/");
  if (!in.contains("diff/mask/" + mask_.names().front())) return false;
  mask_.load(in, "diff/mask/");
  return true;
}

}  // namespace EXGN_PRECISION_NS
}  // namespace exgn
