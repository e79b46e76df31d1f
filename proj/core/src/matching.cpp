#include "xstage/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "xstage/error.hpp"

namespace xstage {

double clamp_probability(double p) {
  return std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp);
}

double focal_cost(double p, double alpha, double gamma) {
  p = clamp_probability(p);
  const double pos = alpha * std::pow(1.0 - p, gamma) * (-std::log(p));
  const double neg = (1.0 - alpha) * std::pow(p, gamma) * (-std::log(1.0 - p));
  return pos - neg;
}

double normalized_l1(const BoxXYXY& a, const BoxXYXY& b, ImageSize image) {
  return std::abs(a.x1 - b.x1) / image.width + std::abs(a.y1 - b.y1) / image.height +
         std::abs(a.x2 - b.x2) / image.width + std::abs(a.y2 - b.y2) / image.height;
}

CostMatrix build_cost_matrix(std::span<const Prediction> stage_predictions,
                             std::span<const GroundTruth> ground_truths, const CostWeights& weights,
                             ImageSize image) {
  if (!(image.width > 0.0) || !(image.height > 0.0)) {
    throw InvalidArgument("build_cost_matrix: image size must be positive");
  }
  if (!stage_predictions.empty()) {
    const int stage = stage_predictions.front().stage;
    for (const auto& p : stage_predictions) {
      if (p.stage != stage) {
        throw InvalidArgument("build_cost_matrix: predictions from stages " +
                              std::to_string(stage) + " and " + std::to_string(p.stage));
      }
    }
  }
  CostMatrix out{Matrix(ground_truths.size(), stage_predictions.size()), weights};
  for (std::size_t g = 0; g < ground_truths.size(); ++g) {
    const auto& gt = ground_truths[g];
    for (std::size_t q = 0; q < stage_predictions.size(); ++q) {
      const auto& pred = stage_predictions[q];
      if (gt.category < 0 || static_cast<std::size_t>(gt.category) >= pred.class_scores.size()) {
        throw InvalidArgument("build_cost_matrix: ground-truth category " +
                              std::to_string(gt.category) + " outside score vector of length " +
                              std::to_string(pred.class_scores.size()));
      }
      const double cls = focal_cost(pred.class_scores[static_cast<std::size_t>(gt.category)],
                                    weights.focal_alpha, weights.focal_gamma);
      out.cost(g, q) = weights.cls * cls + weights.l1 * normalized_l1(pred.box, gt.box, image) +
                       weights.giou * (1.0 - giou(pred.box, gt.box));
    }
  }
  if (!out.cost.all_finite()) throw InvalidArgument("build_cost_matrix: non-finite cost");
  return out;
}

std::vector<std::optional<int>> StageMatch::query_to_gt(std::size_t num_queries) const {
  std::vector<std::optional<int>> out(num_queries);
  for (std::size_t g = 0; g < gt_to_query.size(); ++g) {
    if (gt_to_query[g] && static_cast<std::size_t>(*gt_to_query[g]) < num_queries) {
      out[static_cast<std::size_t>(*gt_to_query[g])] = static_cast<int>(g);
    }
  }
  return out;
}

const StageMatch& MatchTrace::stage(int i) const {
  if (i < 1 || i > num_stages()) {
    throw InvalidArgument("match trace has no stage " + std::to_string(i));
  }
  return stages[static_cast<std::size_t>(i - 1)];
}

namespace {

struct Solution {
  std::vector<int> row_to_col;
  std::vector<double> u;  // row potentials
  std::vector<double> v;  // column potentials
};

// Shortest augmenting path on a rows <= cols matrix, O(rows^2 cols). Column potentials
// stay <= 0 and are 0 on unmatched columns, so (u, v) is dual optimal.
Solution solve_rect(const Matrix& a) {
  const std::size_t n = a.rows();
  const std::size_t m = a.cols();
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  std::vector<double> minv(m + 1);
  std::vector<char> used(m + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  Solution sol{std::vector<int>(n, -1), std::vector<double>(n), std::vector<double>(m)};
  for (std::size_t j = 1; j <= m; ++j) {
    if (p[j] != 0) sol.row_to_col[p[j] - 1] = static_cast<int>(j - 1);
  }
  for (std::size_t i = 0; i < n; ++i) sol.u[i] = u[i + 1];
  for (std::size_t j = 0; j < m; ++j) sol.v[j] = v[j + 1];
  return sol;
}

double value_of(const Matrix& cost, const std::vector<int>& row_to_col) {
  double total = 0.0;
  for (std::size_t r = 0; r < cost.rows(); ++r)
    total += cost(r, static_cast<std::size_t>(row_to_col[r]));
  return total;
}

void check_shape(const Matrix& cost) {
  if (cost.rows() > cost.cols()) {
    throw InvalidArgument("hungarian_solve: " + std::to_string(cost.rows()) +
                          " ground-truth objects but only " + std::to_string(cost.cols()) +
                          " queries");
  }
  if (!cost.all_finite()) throw InvalidArgument("hungarian_solve: non-finite cost entry");
}

double tie_tolerance(const Matrix& cost) {
  double scale = 0.0;
  for (double x : cost.flat()) scale = std::max(scale, std::abs(x));
  return 1e-9 * (1.0 + scale * static_cast<double>(std::max<std::size_t>(cost.rows(), 1)));
}

// Optimal assignment of rows [first_row, rows) to the unused columns, written into
// `row_to_col`; returns its value.
double solve_residual(const Matrix& cost, std::size_t first_row, const std::vector<char>& col_used,
                      std::vector<int>& row_to_col) {
  std::vector<std::size_t> cols;
  for (std::size_t c = 0; c < cost.cols(); ++c)
    if (!col_used[c]) cols.push_back(c);
  const std::size_t rows = cost.rows() - first_row;
  if (rows == 0) return 0.0;
  Matrix sub(rows, cols.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < cols.size(); ++k) sub(r, k) = cost(first_row + r, cols[k]);
  const auto sol = solve_rect(sub);
  for (std::size_t r = 0; r < rows; ++r)
    row_to_col[first_row + r] = static_cast<int>(cols[static_cast<std::size_t>(sol.row_to_col[r])]);
  return value_of(sub, sol.row_to_col);
}

}  // namespace

double assignment_cost(const Matrix& cost) {
  check_shape(cost);
  if (cost.rows() == 0) return 0.0;
  return value_of(cost, solve_rect(cost).row_to_col);
}

StageMatch hungarian_solve(const Matrix& cost) {
  check_shape(cost);
  const std::size_t n = cost.rows();
  const std::size_t m = cost.cols();
  StageMatch out;
  out.gt_to_query.resize(n);
  if (n > 0) {
    const auto sol = solve_rect(cost);
    const double best = value_of(cost, sol.row_to_col);
    const double tol = tie_tolerance(cost);

    // Fix rows in order, each to the smallest column that still admits an optimal
    // completion. Optimal solutions only use edges that are tight under the optimal
    // duals, which prunes almost every candidate; `reference` is an optimal solution
    // agreeing with the rows fixed so far, so its column needs no verification solve.
    std::vector<char> col_used(m, 0);
    std::vector<int> chosen(n, -1);
    std::vector<int> reference = sol.row_to_col;
    double fixed = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < m && chosen[r] < 0; ++c) {
        if (col_used[c]) continue;
        if (cost(r, c) - sol.u[r] - sol.v[c] > tol) continue;
        col_used[c] = 1;
        if (reference[r] == static_cast<int>(c)) {
          chosen[r] = static_cast<int>(c);
          fixed += cost(r, c);
          break;
        }
        std::vector<int> completion_cols = reference;
        const double completion = fixed + cost(r, c) + solve_residual(cost, r + 1, col_used, completion_cols);
        if (completion <= best + tol) {
          chosen[r] = static_cast<int>(c);
          fixed += cost(r, c);
          completion_cols[r] = static_cast<int>(c);
          reference = std::move(completion_cols);
        } else {
          col_used[c] = 0;
        }
      }
      if (chosen[r] < 0) {
        // Numerical corner case: fall back to the solver's own column.
        chosen = sol.row_to_col;
        break;
      }
    }
    for (std::size_t r = 0; r < n; ++r) out.gt_to_query[r] = chosen[r];
    out.total_cost = value_of(cost, chosen);
  }
  std::vector<char> matched(m, 0);
  for (const auto& q : out.gt_to_query) matched[static_cast<std::size_t>(*q)] = 1;
  for (std::size_t c = 0; c < m; ++c)
    if (!matched[c]) out.unmatched_queries.push_back(static_cast<int>(c));
  return out;
}

StageMatch hungarian_solve(const CostMatrix& cost) { return hungarian_solve(cost.cost); }

}  // namespace xstage
