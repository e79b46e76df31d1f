#include "xstage/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "xstage/error.hpp"

namespace xstage {

namespace {

void check_lengths(std::size_t scores, std::size_t target) {
  if (scores != target) {
    throw DimensionError("focal_loss_multihot: " + std::to_string(scores) + " scores vs " +
                         std::to_string(target) + " targets");
  }
}

}  // namespace

double focal_loss_multihot(std::span<const double> scores, std::span<const double> target,
                           double alpha, double gamma) {
  check_lengths(scores.size(), target.size());
  double loss = 0.0;
  for (std::size_t c = 0; c < scores.size(); ++c) {
    const double p = clamp_probability(scores[c]);
    const double t = target[c];
    loss += t * alpha * std::pow(1.0 - p, gamma) * (-std::log(p)) +
            (1.0 - t) * (1.0 - alpha) * std::pow(p, gamma) * (-std::log(1.0 - p));
  }
  return loss;
}

Vector focal_loss_multihot_grad(std::span<const double> scores, std::span<const double> target,
                                double alpha, double gamma) {
  check_lengths(scores.size(), target.size());
  Vector grad(scores.size(), 0.0);
  for (std::size_t c = 0; c < scores.size(); ++c) {
    const double p = scores[c];
    if (p <= kProbabilityClamp || p >= 1.0 - kProbabilityClamp) continue;
    const double t = target[c];
    const double q = 1.0 - p;
    const double d_pos =
        alpha * (gamma * std::pow(q, gamma - 1.0) * std::log(p) - std::pow(q, gamma) / p);
    const double d_neg =
        (1.0 - alpha) * (-gamma * std::pow(p, gamma - 1.0) * std::log(q) + std::pow(p, gamma) / q);
    grad[c] = t * d_pos + (1.0 - t) * d_neg;
  }
  return grad;
}

LocalizationLoss localization_loss(const BoxXYXY& pred, const BoxXYXY& target, ImageSize image) {
  return {normalized_l1(pred, target, image), 1.0 - giou(pred, target)};
}

LocalizationGrad localization_loss_grad(const BoxXYXY& a, const BoxXYXY& b, ImageSize image) {
  LocalizationGrad g;
  const auto sign = [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); };
  g.l1 = {sign(a.x1 - b.x1) / image.width, sign(a.y1 - b.y1) / image.height,
          sign(a.x2 - b.x2) / image.width, sign(a.y2 - b.y2) / image.height};

  // giou = I/U - 1 + U/E, differentiated through the min/max selections.
  const double wa = a.x2 - a.x1;
  const double ha = a.y2 - a.y1;
  const double ix1 = std::max(a.x1, b.x1), ix2 = std::min(a.x2, b.x2);
  const double iy1 = std::max(a.y1, b.y1), iy2 = std::min(a.y2, b.y2);
  const double iw = std::max(0.0, ix2 - ix1);
  const double ih = std::max(0.0, iy2 - iy1);
  const double inter = iw * ih;
  const double uni = wa * ha + b.area() - inter;
  const double ew = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
  const double eh = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
  const double enc = ew * eh;
  if (!(uni > 0.0) || !(enc > 0.0) || wa <= 0.0 || ha <= 0.0) return g;

  const std::array<double, 4> d_area{-ha, -wa, ha, wa};
  std::array<double, 4> d_iw{}, d_ih{}, d_ew{}, d_eh{};
  if (iw > 0.0 && ih > 0.0) {
    d_iw = {a.x1 > b.x1 ? -1.0 : 0.0, 0.0, a.x2 < b.x2 ? 1.0 : 0.0, 0.0};
    d_ih = {0.0, a.y1 > b.y1 ? -1.0 : 0.0, 0.0, a.y2 < b.y2 ? 1.0 : 0.0};
  }
  d_ew = {a.x1 < b.x1 ? -1.0 : 0.0, 0.0, a.x2 > b.x2 ? 1.0 : 0.0, 0.0};
  d_eh = {0.0, a.y1 < b.y1 ? -1.0 : 0.0, 0.0, a.y2 > b.y2 ? 1.0 : 0.0};
  for (std::size_t k = 0; k < 4; ++k) {
    const double d_inter = d_iw[k] * ih + iw * d_ih[k];
    const double d_uni = d_area[k] - d_inter;
    const double d_enc = d_ew[k] * eh + ew * d_eh[k];
    const double d_giou =
        (d_inter * uni - inter * d_uni) / (uni * uni) + (d_uni * enc - uni * d_enc) / (enc * enc);
    g.giou[k] = -d_giou;
  }
  return g;
}

LossBreakdown stage_loss(std::span<const Prediction> stage_predictions, const StageTargets& targets,
                         std::span<const GroundTruth> ground_truths, const CostWeights& weights,
                         ImageSize image) {
  if (stage_predictions.size() != targets.classes.size() ||
      stage_predictions.size() != targets.box_target.size()) {
    throw DimensionError("stage_loss: " + std::to_string(stage_predictions.size()) +
                         " predictions vs " + std::to_string(targets.classes.size()) + " targets");
  }
  LossBreakdown out;
  out.weights = weights;
  for (std::size_t q = 0; q < stage_predictions.size(); ++q) {
    const auto& pred = stage_predictions[q];
    out.classification += focal_loss_multihot(pred.class_scores, targets.classes[q],
                                              weights.focal_alpha, weights.focal_gamma);
    if (const auto& t = targets.box_target[q]) {
      const auto loc =
          localization_loss(pred.box, ground_truths[static_cast<std::size_t>(*t)].box, image);
      out.l1 += loc.l1;
      out.giou += loc.giou;
    }
  }
  const double norm = std::max(1.0, static_cast<double>(targets.positives()));
  out.classification /= norm;
  out.l1 /= norm;
  out.giou /= norm;
  out.total = weights.cls * out.classification + weights.l1 * out.l1 + weights.giou * out.giou;
  return out;
}

}  // namespace xstage
