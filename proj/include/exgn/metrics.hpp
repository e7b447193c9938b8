#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

// Mask metrics take binary masks as bytes (nonzero = on) in row-major
// [H, W] layout; image metrics take [3, H, W] floats in [0, 1].

namespace exgn::metrics {

struct SegScore {
  double iou = 0;
  double contour_accuracy = 0;
  double location_error = 0;
};

struct GenScore {
  double ssim = 0;
  double psnr = 0;
};

inline constexpr double kPsnrCap = 100.0;

struct Centroid {
  double row = 0;
  double col = 0;
};

/// Mean pixel-center coordinate (i + 0.5, j + 0.5); false for an empty mask.
bool centroid(std::span<const uint8_t> mask, int h, int w, Centroid& out);

/// Distance between two points in pixel units over the image diagonal
/// sqrt(h^2 + w^2), so opposite image corners are 1 apart.
double normalized_distance(Centroid a, Centroid b, int h, int w);

/// Both empty -> 1.
double iou(std::span<const uint8_t> pred, std::span<const uint8_t> gt);
/// IoU after shifting pred by the rounded centroid offset; pixels shifted
/// past the border are dropped. Both empty -> 1, exactly one empty -> 0.
double contour_accuracy(std::span<const uint8_t> pred, std::span<const uint8_t> gt, int h, int w);
/// Both empty -> 0, exactly one empty -> 1.
double location_error(std::span<const uint8_t> pred, std::span<const uint8_t> gt, int h, int w);
SegScore score_masks(std::span<const uint8_t> pred, std::span<const uint8_t> gt, int h, int w);

/// Gaussian-window SSIM (11x11, sigma 1.5, K1 0.01, K2 0.03, L 1) over the
/// valid region, averaged over channels. Throws ShapeError when h or w < 11.
double ssim(std::span<const float> a, std::span<const float> b, int channels, int h, int w);
/// 10 log10(1 / MSE), capped at kPsnrCap.
double psnr(std::span<const float> a, std::span<const float> b);

enum class MaskClass { foreground, hand, object };
inline constexpr int kMaskClassCount = 3;
const char* mask_class_name(MaskClass c);

/// Binary mask of one class; foreground is hand or object.
std::vector<uint8_t> class_mask(std::span<const uint8_t> labels, MaskClass c);

struct ClipSegScores {
  /// frames[n][c] for MaskClass c.
  std::vector<std::array<SegScore, kMaskClassCount>> frames;
  std::array<SegScore, kMaskClassCount> mean{};
};

/// Per-frame scores over class-id clips [N, H, W].
ClipSegScores evaluate_masks(std::span<const uint8_t> pred, std::span<const uint8_t> gt,
                             int n_frames, int h, int w);

/// Per-frame SSIM/PSNR over clips [N, 3, H, W].
std::vector<GenScore> evaluate_frames(std::span<const float> pred, std::span<const float> gt,
                                      int n_frames, int h, int w);

}  // namespace exgn::metrics
