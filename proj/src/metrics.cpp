#include "exgn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "exgn/errors.hpp"

namespace exgn::metrics {

namespace {

void require_same_size(size_t a, size_t b, const char* what) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": size mismatch " + std::to_string(a) + " vs " +
                     std::to_string(b));
  }
}

void require_plane(std::span<const uint8_t> m, int h, int w, const char* what) {
  if (h <= 0 || w <= 0 || m.size() != static_cast<size_t>(h) * static_cast<size_t>(w)) {
    throw ShapeError(std::string(what) + ": mask does not match " + std::to_string(h) + "x" +
                     std::to_string(w));
  }
}

// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
std::array<double, 11> gaussian_taps() {
  std::array<double, 11> g{};
  double total = 0;
  for (int i = 0; i < 11; ++i) {
    const double d = i - 5;
    g[static_cast<size_t>(i)] = std::exp(-d * d / (2 * 1.5 * 1.5));
    total += g[static_cast<size_t>(i)];
  }
  for (auto& v : g) v /= total;
  return g;
}

// Valid-region separable filtering of one [h, w] plane.
std::vector<double> filter_valid(const std::vector<double>& x, int h, int w,
                                 const std::array<double, 11>& g) {
  const int oh = h - 10, ow = w - 10;
  std::vector<double> rows(static_cast<size_t>(h) * static_cast<size_t>(ow));
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < ow; ++j) {
      double s = 0;
      for (int k = 0; k < 11; ++k) s += g[static_cast<size_t>(k)] * x[static_cast<size_t>(i * w + j + k)];
      rows[static_cast<size_t>(i * ow + j)] = s;
    }
  }
  std::vector<double> out(static_cast<size_t>(oh) * static_cast<size_t>(ow));
  for (int i = 0; i < oh; ++i) {
    for (int j = 0; j < ow; ++j) {
      double s = 0;
      for (int k = 0; k < 11; ++k) s += g[static_cast<size_t>(k)] * rows[static_cast<size_t>((i + k) * ow + j)];
      out[static_cast<size_t>(i * ow + j)] = s;
    }
  }
  return out;
}

}  // namespace

bool centroid(std::span<const uint8_t> mask, int h, int w, Centroid& out) {
  require_plane(mask, h, w, "centroid");
  double sr = 0, sc = 0;
  int64_t n = 0;
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      if (!mask[static_cast<size_t>(i * w + j)]) continue;
      sr += i + 0.5;
      sc += j + 0.5;
      ++n;
    }
  }
  if (n == 0) return false;
  out = {sr / static_cast<double>(n), sc / static_cast<double>(n)};
  return true;
}

double normalized_distance(Centroid a, Centroid b, int h, int w) {
  return std::hypot(a.row - b.row, a.col - b.col) / std::hypot(h, w);
}

double iou(std::span<const uint8_t> pred, std::span<const uint8_t> gt) {
  require_same_size(pred.size(), gt.size(), "iou");
  int64_t inter = 0, uni = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    inter += p && g;
    uni += p || g;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double contour_accuracy(std::span<const uint8_t> pred, std::span<const uint8_t> gt, int h, int w) {
  require_plane(pred, h, w, "contour_accuracy");
  require_plane(gt, h, w, "contour_accuracy");
  Centroid cp, cg;
  const bool has_p = centroid(pred, h, w, cp), has_g = centroid(gt, h, w, cg);
  if (!has_p && !has_g) return 1.0;
  if (has_p != has_g) return 0.0;
  const int dr = static_cast<int>(std::lround(cg.row - cp.row));
  const int dc = static_cast<int>(std::lround(cg.col - cp.col));
  std::vector<uint8_t> shifted(pred.size(), 0);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      if (!pred[static_cast<size_t>(i * w + j)]) continue;
      const int r = i + dr, c = j + dc;
      if (r >= 0 && r < h && c >= 0 && c < w) shifted[static_cast<size_t>(r * w + c)] = 1;
    }
  }
  return iou(shifted, gt);
}

double location_error(std::span<const uint8_t> pred, std::span<const uint8_t> gt, int h, int w) {
  require_plane(pred, h, w, "location_error");
  require_plane(gt, h, w, "location_error");
  Centroid cp, cg;
  const bool has_p = centroid(pred, h, w, cp), has_g = centroid(gt, h, w, cg);
  if (!has_p && !has_g) return 0.0;
  if (has_p != has_g) return 1.0;
  return normalized_distance(cp, cg, h, w);
}

SegScore score_masks(std::span<const uint8_t> pred, std::span<const uint8_t> gt, int h, int w) {
  return {iou(pred, gt), contour_accuracy(pred, gt, h, w), location_error(pred, gt, h, w)};
}

double ssim(std::span<const float> a, std::span<const float> b, int channels, int h, int w) {
  if (h < 11 || w < 11) throw ShapeError("ssim needs images of at least 11x11");
  const size_t plane = static_cast<size_t>(h) * static_cast<size_t>(w);
  require_same_size(a.size(), static_cast<size_t>(channels) * plane, "ssim");
  require_same_size(b.size(), a.size(), "ssim");
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  static const auto g = gaussian_taps();
  double total = 0;
  size_t count = 0;
  std::vector<double> x(plane), y(plane), xx(plane), yy(plane), xy(plane);
  for (int c = 0; c < channels; ++c) {
    for (size_t p = 0; p < plane; ++p) {
      x[p] = a[static_cast<size_t>(c) * plane + p];
      y[p] = b[static_cast<size_t>(c) * plane + p];
      xx[p] = x[p] * x[p];
      yy[p] = y[p] * y[p];
      xy[p] = x[p] * y[p];
    }
    const auto mx = filter_valid(x, h, w, g), my = filter_valid(y, h, w, g);
    const auto sxx = filter_valid(xx, h, w, g), syy = filter_valid(yy, h, w, g),
               sxy = filter_valid(xy, h, w, g);
    for (size_t i = 0; i < mx.size(); ++i) {
      const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i];
      const double cov = sxy[i] - mx[i] * my[i];
      total += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) /
               ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    count += mx.size();
  }
  return total / static_cast<double>(count);
}

double psnr(std::span<const float> a, std::span<const float> b) {
  require_same_size(a.size(), b.size(), "psnr");
  if (a.empty()) throw ShapeError("psnr of empty images");
  double se = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.size());
  if (mse == 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

const char* mask_class_name(MaskClass c) {
  switch (c) {
    case MaskClass::foreground: return "foreground";
    case MaskClass::hand: return "hand";
    case MaskClass::object: return "object";
  }
  return "?";
}

std::vector<uint8_t> class_mask(std::span<const uint8_t> labels, MaskClass c) {
  std::vector<uint8_t> out(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) {
    switch (c) {
      case MaskClass::foreground: out[i] = labels[i] == 1 || labels[i] == 2; break;
      case MaskClass::hand: out[i] = labels[i] == 1; break;
      case MaskClass::object: out[i] = labels[i] == 2; break;
    }
  }
  return out;
}

ClipSegScores evaluate_masks(std::span<const uint8_t> pred, std::span<const uint8_t> gt,
                             int n_frames, int h, int w) {
  const size_t plane = static_cast<size_t>(h) * static_cast<size_t>(w);
  require_same_size(pred.size(), static_cast<size_t>(n_frames) * plane, "evaluate_masks");
  require_same_size(gt.size(), pred.size(), "evaluate_masks");
  ClipSegScores out;
  for (int n = 0; n < n_frames; ++n) {
    const auto p = pred.subspan(static_cast<size_t>(n) * plane, plane);
    const auto g = gt.subspan(static_cast<size_t>(n) * plane, plane);
    std::array<SegScore, kMaskClassCount> frame{};
    for (int c = 0; c < kMaskClassCount; ++c) {
      const auto cls = static_cast<MaskClass>(c);
      frame[static_cast<size_t>(c)] = score_masks(class_mask(p, cls), class_mask(g, cls), h, w);
    }
    out.frames.push_back(frame);
  }
  for (int c = 0; c < kMaskClassCount; ++c) {
    auto& m = out.mean[static_cast<size_t>(c)];
    for (const auto& f : out.frames) {
      m.iou += f[static_cast<size_t>(c)].iou;
      m.contour_accuracy += f[static_cast<size_t>(c)].contour_accuracy;
      m.location_error += f[static_cast<size_t>(c)].location_error;
    }
    if (n_frames > 0) {
      m.iou /= n_frames;
      m.contour_accuracy /= n_frames;
      m.location_error /= n_frames;
    }
  }
  return out;
}

std::vector<GenScore> evaluate_frames(std::span<const float> pred, std::span<const float> gt,
                                      int n_frames, int h, int w) {
  const size_t frame = 3 * static_cast<size_t>(h) * static_cast<size_t>(w);
  require_same_size(pred.size(), static_cast<size_t>(n_frames) * frame, "evaluate_frames");
  require_same_size(gt.size(), pred.size(), "evaluate_frames");
  std::vector<GenScore> out;
  for (int n = 0; n < n_frames; ++n) {
    const auto p = pred.subspan(static_cast<size_t>(n) * frame, frame);
    const auto g = gt.subspan(static_cast<size_t>(n) * frame, frame);
    out.push_back({ssim(p, g, 3, h, w), psnr(p, g)});
  }
  return out;
}

}  // namespace exgn::metrics
