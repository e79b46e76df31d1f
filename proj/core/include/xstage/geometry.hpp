#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace xstage {

/// Corner-form box in pixels.
struct BoxXYXY {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const;
  bool valid() const;

  friend bool operator==(const BoxXYXY&, const BoxXYXY&) = default;
};

/// Positional vector of a query: center (x, y), z = log2 scale, r = log2 aspect ratio.
/// Width is 2^(z - r/2) and height 2^(z + r/2).
struct BoxXYZR {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  double r = 0.0;

  friend bool operator==(const BoxXYZR&, const BoxXYZR&) = default;
};

struct GroundTruth {
  BoxXYXY box;
  int category = 0;

  friend bool operator==(const GroundTruth&, const GroundTruth&) = default;
};

struct ImageSize {
  double width = 0.0;
  double height = 0.0;

  friend bool operator==(const ImageSize&, const ImageSize&) = default;
};

BoxXYXY xyzr_to_xyxy(const BoxXYZR& b);
/// Inverse of xyzr_to_xyxy; requires positive width and height.
BoxXYZR xyxy_to_xyzr(const BoxXYXY& b);

/// Intersection over union. Zero-area boxes score 0 against everything, themselves included.
double iou(const BoxXYXY& a, const BoxXYXY& b);
double giou(const BoxXYXY& a, const BoxXYXY& b);

struct ScoredBox {
  BoxXYXY box;
  int category = 0;
  double score = 0.0;
};

/// Greedy per-category suppression by descending score (ties: lower index first).
/// A box is dropped when its IoU with an already-kept box of the same category exceeds
/// `iou_threshold`. Returns kept indexes in the order they were kept.
std::vector<std::size_t> nms(std::span<const ScoredBox> boxes, double iou_threshold);

}  // namespace xstage
