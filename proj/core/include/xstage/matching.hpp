#pragma once

#include <optional>
#include <span>
#include <vector>

#include "xstage/geometry.hpp"
#include "xstage/numerics.hpp"

namespace xstage {

/// Output of one query at one decoder stage. Stages are 1-based.
struct Prediction {
  int query_index = 0;
  int stage = 1;
  BoxXYXY box;
  Vector class_scores;  // post-sigmoid probabilities, one per category

  friend bool operator==(const Prediction&, const Prediction&) = default;
};

/// Weights of the matching cost; the same values weight the training losses.
struct CostWeights {
  double cls = 2.0;
  double l1 = 5.0;
  double giou = 2.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
};

inline constexpr double kProbabilityClamp = 1e-8;

double clamp_probability(double p);

/// Positive-minus-negative focal cost of assigning a probability p to a positive label.
double focal_cost(double p, double alpha, double gamma);

/// Sum of absolute corner differences, x normalized by image width and y by height.
double normalized_l1(const BoxXYXY& a, const BoxXYXY& b, ImageSize image);

/// Rows are ground truths, columns are queries.
struct CostMatrix {
  Matrix cost;
  CostWeights weights;
};

CostMatrix build_cost_matrix(std::span<const Prediction> stage_predictions,
                             std::span<const GroundTruth> ground_truths, const CostWeights& weights,
                             ImageSize image);

/// One stage's one-to-one assignment.
struct StageMatch {
  std::vector<std::optional<int>> gt_to_query;  // indexed by ground truth
  std::vector<int> unmatched_queries;           // ascending
  double total_cost = 0.0;

  /// Inverse map query -> ground truth for `num_queries` queries.
  std::vector<std::optional<int>> query_to_gt(std::size_t num_queries) const;

  friend bool operator==(const StageMatch&, const StageMatch&) = default;
};

/// Per-stage assignments; stages[0] is stage 1.
struct MatchTrace {
  std::vector<StageMatch> stages;

  const StageMatch& stage(int i) const;
  int num_stages() const { return static_cast<int>(stages.size()); }

  friend bool operator==(const MatchTrace&, const MatchTrace&) = default;
};

/// Exact minimum-cost injection of rows into columns. Among optimal injections (ties
/// within a relative 1e-9 of the cost scale) the lexicographically smallest sequence of
/// column indexes, ordered by row, is returned. Throws if rows > cols.
StageMatch hungarian_solve(const Matrix& cost);
StageMatch hungarian_solve(const CostMatrix& cost);

/// Optimal total cost only (no tie-breaking pass).
double assignment_cost(const Matrix& cost);

}  // namespace xstage
