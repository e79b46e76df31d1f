#pragma once

// Independent reference implementations and hand-rolled generators shared by the unit
// tests and the acceptance binary. Each oracle rebuilds its answer by enumeration or from
// lower-level primitives, never through the routine it is compared against.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <set>
#include <vector>

#include "xstage/harness.hpp"

namespace oracle {

using xstage::BoxXYXY;
using xstage::GroundTruth;
using xstage::ImageSize;
using xstage::Matrix;
using xstage::Prediction;
using xstage::PredictionTable;
using xstage::Vector;

// ------------------------------------------------------------ assignment

struct BruteAssignment {
  double total = std::numeric_limits<double>::infinity();
  std::vector<int> row_to_col;
};

/// Every injection of rows into columns, visited in lexicographic order; the first one
/// reaching the minimum (summed in row order) is kept.
inline BruteAssignment brute_force_assignment(const Matrix& cost) {
  BruteAssignment best;
  const std::size_t n = cost.rows(), m = cost.cols();
  if (n == 0) return {0.0, {}};
  std::vector<int> cols(n);
  std::vector<char> used(m, 0);
  const auto visit = [&](auto&& self, std::size_t r) -> void {
    if (r == n) {
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) total += cost(i, static_cast<std::size_t>(cols[i]));
      if (total < best.total) best = {total, cols};
      return;
    }
    for (std::size_t c = 0; c < m; ++c) {
      if (used[c]) continue;
      used[c] = 1;
      cols[r] = static_cast<int>(c);
      self(self, r + 1);
      used[c] = 0;
    }
  };
  visit(visit, 0);
  return best;
}

// ------------------------------------------------------------ cross-stage bags

/// Per query of `stage`: every gt t such that some stage j in [lo, hi] matched t to that
/// query and the query's box at `stage` overlaps t by at least eta.
inline std::vector<std::set<int>> brute_force_bags(int stage, int lo, int hi, double eta,
                                                   const xstage::MatchTrace& trace,
                                                   const PredictionTable& predictions,
                                                   const std::vector<GroundTruth>& gts) {
  std::vector<std::set<int>> bags(static_cast<std::size_t>(predictions.num_queries()));
  for (int q = 0; q < predictions.num_queries(); ++q) {
    for (std::size_t t = 0; t < gts.size(); ++t) {
      bool matched_in_window = false;
      for (int j = lo; j <= hi; ++j) {
        const auto& m = trace.stages[static_cast<std::size_t>(j - 1)].gt_to_query[t];
        matched_in_window = matched_in_window || (m && *m == q);
      }
      if (!matched_in_window) continue;
      const BoxXYXY& a = predictions.at(stage, q).box;
      const BoxXYXY& b = gts[t].box;
      const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
      const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
      const double inter = iw * ih;
      const double uni = a.width() * a.height() + b.width() * b.height() - inter;
      const bool degenerate = a.width() * a.height() <= 0.0 || b.width() * b.height() <= 0.0;
      const double overlap = degenerate || uni <= 0.0 ? 0.0 : inter / uni;
      if (overlap >= eta) bags[static_cast<std::size_t>(q)].insert(static_cast<int>(t));
    }
  }
  return bags;
}

// ------------------------------------------------------------ vanilla one-to-one pipeline

struct VanillaStage {
  std::vector<std::optional<int>> gt_to_query;
  std::vector<Vector> classes;  // one-hot from the own-stage match
  double cls = 0.0, l1 = 0.0, giou = 0.0, total = 0.0;
};

/// Per stage: exhaustive matching, one-hot targets from that match alone, focal plus
/// localization losses normalized by the number of matches.
inline std::vector<VanillaStage> vanilla_pipeline(const xstage::Scenario& s, const xstage::CostWeights& w) {
  std::vector<VanillaStage> out;
  const auto c = static_cast<std::size_t>(s.num_classes());
  for (int i = 1; i <= s.num_stages(); ++i) {
    const auto preds = s.predictions.stage(i);
    VanillaStage st;
    const auto cost = xstage::build_cost_matrix(preds, s.ground_truths, w, s.image);
    const auto best = brute_force_assignment(cost.cost);
    st.classes.assign(preds.size(), Vector(c, 0.0));
    std::vector<std::optional<int>> box_target(preds.size());
    for (std::size_t t = 0; t < best.row_to_col.size(); ++t) {
      const int q = best.row_to_col[t];
      st.gt_to_query.push_back(q);
      st.classes[static_cast<std::size_t>(q)][static_cast<std::size_t>(s.ground_truths[t].category)] = 1.0;
      box_target[static_cast<std::size_t>(q)] = static_cast<int>(t);
    }
    for (std::size_t q = 0; q < preds.size(); ++q) {
      st.cls += xstage::focal_loss_multihot(preds[q].class_scores, st.classes[q], w.focal_alpha, w.focal_gamma);
      if (box_target[q]) {
        const auto loc = xstage::localization_loss(preds[q].box, s.ground_truths[static_cast<std::size_t>(*box_target[q])].box, s.image);
        st.l1 += loc.l1;
        st.giou += loc.giou;
      }
    }
    const double norm = std::max(1.0, static_cast<double>(best.row_to_col.size()));
    st.cls /= norm;
    st.l1 /= norm;
    st.giou /= norm;
    st.total = w.cls * st.cls + w.l1 * st.l1 + w.giou * st.giou;
    out.push_back(std::move(st));
  }
  return out;
}

// ------------------------------------------------------------ vanilla decoder stage

/// One decoder stage without any reuse: a single dynamic channel mixing and a spatial
/// mixing with the freshly generated filter only.
inline xstage::QueryState vanilla_stage(const xstage::DecoderParams& params, int stage,
                                        const xstage::QueryState& query, const xstage::Pyramid& pyramid,
                                        ImageSize image, Prediction& pred) {
  using namespace xstage;
  const auto& cfg = params.config;
  const auto& sp = params.stages[static_cast<std::size_t>(stage - 1)];
  const auto dc = static_cast<std::size_t>(cfg.group_channels);
  const auto sampled = sample_points(query.content, query.box, sp.sampler, pyramid, dc);
  Vector flat;
  for (std::size_t g = 0; g < static_cast<std::size_t>(cfg.groups); ++g) {
    const Matrix channel = generate_channel_filter(query.content, sp.channel_generators[g]).kernel;
    const Matrix spatial = generate_channel_filter(query.content, sp.spatial_generators[g]).kernel;
    const Matrix mixed = norm_relu(matmul(sampled.features[g], channel), sp.cascade.norms.at(0));
    const Matrix z = norm_relu(matmul(spatial, mixed), sp.spatial_norm);
    flat.insert(flat.end(), z.flat().begin(), z.flat().end());
  }
  Vector update = linear(flat, sp.output_weight, sp.output_bias);
  for (std::size_t d = 0; d < update.size(); ++d) update[d] += query.content[d];
  QueryState next{layer_norm(update, sp.content_norm.gain, sp.content_norm.shift), query.box};
  const Vector logits = linear(next.content, sp.class_weight, sp.class_bias);
  const Vector delta = linear(next.content, sp.box_weight, sp.box_bias);
  const double w = std::exp2(query.box.z - 0.5 * query.box.r);
  const double h = std::exp2(query.box.z + 0.5 * query.box.r);
  next.box.x = std::clamp(query.box.x + delta[0] * w, 0.0, image.width);
  next.box.y = std::clamp(query.box.y + delta[1] * h, 0.0, image.height);
  next.box.z = std::clamp(query.box.z + delta[2], 1.0, std::log2(std::max(image.width, image.height)));
  next.box.r = std::clamp(query.box.r + delta[3], -3.0, 3.0);
  const BoxXYXY box = xyzr_to_xyxy(next.box);
  pred.stage = stage;
  pred.box = {std::clamp(box.x1, 0.0, image.width), std::clamp(box.y1, 0.0, image.height),
              std::clamp(box.x2, 0.0, image.width), std::clamp(box.y2, 0.0, image.height)};
  pred.class_scores.clear();
  for (double l : logits) pred.class_scores.push_back(sigmoid(l));
  return next;
}

// ------------------------------------------------------------ generators

/// Positive-area box inside the image.
inline BoxXYXY random_box(std::mt19937_64& rng, ImageSize image, double min_side = 4.0) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double w = min_side + u(rng) * (0.5 * image.width - min_side);
  const double h = min_side + u(rng) * (0.5 * image.height - min_side);
  const double x = u(rng) * (image.width - w);
  const double y = u(rng) * (image.height - h);
  return {x, y, x + w, y + h};
}

/// Moves every corner by up to `fraction` of the box size, keeping the box valid.
inline BoxXYXY jitter(std::mt19937_64& rng, const BoxXYXY& b, double fraction, ImageSize image) {
  std::uniform_real_distribution<double> u(-fraction, fraction);
  double x1 = b.x1 + u(rng) * b.width(), x2 = b.x2 + u(rng) * b.width();
  double y1 = b.y1 + u(rng) * b.height(), y2 = b.y2 + u(rng) * b.height();
  if (x1 > x2) std::swap(x1, x2);
  if (y1 > y2) std::swap(y1, y2);
  return {std::clamp(x1, 0.0, image.width), std::clamp(y1, 0.0, image.height),
          std::clamp(x2, 0.0, image.width), std::clamp(y2, 0.0, image.height)};
}

struct ScenarioShape {
  int max_stages = 6;
  int max_queries = 10;
  int max_gts = 5;
  int max_classes = 5;
};

/// Queries follow a ground truth (or wander freely) with a per-stage jitter, so matches
/// move between queries across stages and IoUs spread over the whole [0, 1] range.
inline xstage::Scenario random_scenario(std::mt19937_64& rng, ScenarioShape shape = {}) {
  std::uniform_int_distribution<int> stages(1, shape.max_stages);
  std::uniform_int_distribution<int> classes(1, shape.max_classes);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  xstage::Scenario s;
  s.image = {64.0 + 192.0 * u(rng), 64.0 + 192.0 * u(rng)};
  const int l = stages(rng), c = classes(rng);
  const int n = std::uniform_int_distribution<int>(1, shape.max_queries)(rng);
  const int gts = std::uniform_int_distribution<int>(0, std::min(shape.max_gts, n))(rng);
  for (int t = 0; t < gts; ++t) {
    s.ground_truths.push_back({random_box(rng, s.image), std::uniform_int_distribution<int>(0, c - 1)(rng)});
  }
  s.predictions = PredictionTable(l, n, c);
  std::vector<int> follows(static_cast<std::size_t>(n), -1);
  for (int& f : follows)
    if (gts > 0 && u(rng) < 0.8) f = std::uniform_int_distribution<int>(0, gts - 1)(rng);
  for (int i = 1; i <= l; ++i) {
    for (int q = 0; q < n; ++q) {
      Prediction p;
      p.stage = i;
      p.query_index = q;
      const int f = follows[static_cast<std::size_t>(q)];
      p.box = f >= 0 ? jitter(rng, s.ground_truths[static_cast<std::size_t>(f)].box, 0.4 * u(rng), s.image)
                     : random_box(rng, s.image);
      for (int k = 0; k < c; ++k) p.class_scores.push_back(u(rng));
      s.predictions.set(std::move(p));
    }
  }
  return s;
}

/// The late-matched query of a cross-stage assignment: one gt, matched to query 0 at
/// stages 1..3 and to query 1 at stages 4..6. Query 1's stage-1 box has IoU 0.8 with
/// the gt.
inline xstage::Scenario late_match_scenario() {
  xstage::Scenario s;
  s.image = {100.0, 100.0};
  const int classes = 4, category = 2;
  const BoxXYXY gt{10.0, 10.0, 50.0, 50.0};
  s.ground_truths.push_back({gt, category});
  s.predictions = PredictionTable(6, 3, classes);
  for (int i = 1; i <= 6; ++i) {
    const bool early = i <= 3;
    const auto scores = [&](double p) {
      Vector v(classes, 0.05);
      v[category] = p;
      return v;
    };
    // The leader sits on the gt with a confident score; the other drifts slightly off.
    const BoxXYXY on_gt = gt;
    const BoxXYXY near_gt{10.0, 10.0, 50.0, 42.0};  // IoU 0.8
    s.predictions.set({0, i, early ? on_gt : BoxXYXY{60.0, 60.0, 90.0, 90.0}, scores(early ? 0.9 : 0.1)});
    s.predictions.set({1, i, early ? near_gt : on_gt, scores(early ? 0.4 : 0.9)});
    s.predictions.set({2, i, BoxXYXY{70.0, 5.0, 95.0, 30.0}, scores(0.05)});
  }
  return s;
}

}  // namespace oracle
