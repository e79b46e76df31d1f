#include "xstage/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "xstage/error.hpp"

namespace xstage {

double BoxXYXY::area() const { return std::max(0.0, width()) * std::max(0.0, height()); }

bool BoxXYXY::valid() const {
  return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) &&
         x1 <= x2 && y1 <= y2;
}

BoxXYXY xyzr_to_xyxy(const BoxXYZR& b) {
  if (!std::isfinite(b.x) || !std::isfinite(b.y) || !std::isfinite(b.z) || !std::isfinite(b.r)) {
    throw InvalidArgument("xyzr_to_xyxy: non-finite positional vector");
  }
  const double w = std::exp2(b.z - 0.5 * b.r);
  const double h = std::exp2(b.z + 0.5 * b.r);
  if (!std::isfinite(w) || !std::isfinite(h)) {
    throw InvalidArgument("xyzr_to_xyxy: 2^z overflows (z=" + std::to_string(b.z) +
                          ", r=" + std::to_string(b.r) + ")");
  }
  return {b.x - 0.5 * w, b.y - 0.5 * h, b.x + 0.5 * w, b.y + 0.5 * h};
}

BoxXYZR xyxy_to_xyzr(const BoxXYXY& b) {
  const double w = b.width();
  const double h = b.height();
  if (!(w > 0.0) || !(h > 0.0)) {
    throw InvalidArgument("xyxy_to_xyzr: box must have positive width and height");
  }
  const double lw = std::log2(w);
  const double lh = std::log2(h);
  return {0.5 * (b.x1 + b.x2), 0.5 * (b.y1 + b.y2), 0.5 * (lw + lh), lh - lw};
}

namespace {

struct Overlap {
  double inter;
  double uni;
};

Overlap overlap(const BoxXYXY& a, const BoxXYXY& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  return {inter, a.area() + b.area() - inter};
}

}  // namespace

double iou(const BoxXYXY& a, const BoxXYXY& b) {
  if (a.area() <= 0.0 || b.area() <= 0.0) return 0.0;
  const auto o = overlap(a, b);
  return o.uni > 0.0 ? o.inter / o.uni : 0.0;
}

double giou(const BoxXYXY& a, const BoxXYXY& b) {
  const auto o = overlap(a, b);
  const double ew = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
  const double eh = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
  const double enclosing = ew * eh;
  const double i = iou(a, b);
  if (enclosing <= 0.0) return i;
  return i - (enclosing - o.uni) / enclosing;
}

std::vector<std::size_t> nms(std::span<const ScoredBox> boxes, double iou_threshold) {
  if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) {
    throw InvalidArgument("nms: threshold must lie in (0, 1]");
  }
  for (const auto& b : boxes) {
    if (!std::isfinite(b.score)) throw InvalidArgument("nms: non-finite score");
  }
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t l, std::size_t r) {
    return boxes[l].score > boxes[r].score;
  });

  std::vector<std::size_t> kept;
  for (std::size_t idx : order) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](std::size_t k) {
      return boxes[k].category == boxes[idx].category &&
             iou(boxes[k].box, boxes[idx].box) > iou_threshold;
    });
    if (!suppressed) kept.push_back(idx);
  }
  return kept;
}

}  // namespace xstage
