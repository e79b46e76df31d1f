#pragma once

#include <array>
#include <span>

#include "xstage/assigner.hpp"
#include "xstage/geometry.hpp"
#include "xstage/matching.hpp"

namespace xstage {

/// Sigmoid focal loss summed over categories. Probabilities are clamped to
/// [1e-8, 1 - 1e-8]; targets are {0, 1}.
double focal_loss_multihot(std::span<const double> scores, std::span<const double> target,
                           double alpha, double gamma);

/// Derivative with respect to the (unclamped) probabilities; zero where clamping is active.
Vector focal_loss_multihot_grad(std::span<const double> scores, std::span<const double> target,
                                double alpha, double gamma);

struct LocalizationLoss {
  double l1 = 0.0;
  double giou = 0.0;  // 1 - GIoU
};

LocalizationLoss localization_loss(const BoxXYXY& pred, const BoxXYXY& target, ImageSize image);

/// Gradients of each term with respect to the predicted corners (x1, y1, x2, y2).
struct LocalizationGrad {
  std::array<double, 4> l1{};
  std::array<double, 4> giou{};
};
LocalizationGrad localization_loss_grad(const BoxXYXY& pred, const BoxXYXY& target, ImageSize image);

struct LossBreakdown {
  double classification = 0.0;
  double l1 = 0.0;
  double giou = 0.0;
  double total = 0.0;
  CostWeights weights;
};

/// Classification over every query of the stage, localization over own-stage matches
/// only. All three terms are divided by max(1, own-stage positives).
LossBreakdown stage_loss(std::span<const Prediction> stage_predictions, const StageTargets& targets,
                         std::span<const GroundTruth> ground_truths, const CostWeights& weights,
                         ImageSize image);

}  // namespace xstage
