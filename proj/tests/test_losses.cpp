#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "xstage/error.hpp"
#include "xstage/losses.hpp"

using namespace xstage;

TEST_CASE("focal loss examples") {
  CHECK(focal_loss_multihot(Vector{0.0, 1.0, 0.0}, Vector{0, 1, 0}, 0.25, 2.0) < 3e-6);
  CHECK(focal_loss_multihot(Vector{0.5}, Vector{1}, 0.25, 2.0) ==
        doctest::Approx(0.25 * 0.25 * std::log(2.0)).epsilon(1e-12));

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Vector p(10);
  for (double& x : p) x = u(rng);
  Vector t3(10, 0.0), t7(10, 0.0), both(10, 0.0);
  t3[3] = t7[7] = both[3] = both[7] = 1.0;
  const Vector zero(10, 0.0);
  const double base = focal_loss_multihot(p, zero, 0.25, 2.0);
  CHECK(focal_loss_multihot(p, both, 0.25, 2.0) ==
        doctest::Approx(focal_loss_multihot(p, t3, 0.25, 2.0) + focal_loss_multihot(p, t7, 0.25, 2.0) - base)
            .epsilon(1e-12));
  CHECK_THROWS_AS(focal_loss_multihot(Vector{0.5, 0.5}, Vector{1}, 0.25, 2.0), DimensionError);
}

TEST_CASE("focal loss is non-negative and falls as a probability moves toward its target") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 500; ++trial) {
    Vector p(4), t(4);
    for (double& x : p) x = u(rng);
    for (double& x : t) x = u(rng) < 0.5 ? 0.0 : 1.0;
    const double before = focal_loss_multihot(p, t, 0.25, 2.0);
    CHECK(before >= 0.0);
    const std::size_t c = trial % 4;
    Vector q = p;
    q[c] = p[c] + 0.5 * (t[c] - p[c]);
    CHECK(focal_loss_multihot(q, t, 0.25, 2.0) <= before);
  }
}

TEST_CASE("localization loss examples") {
  const ImageSize image{10, 10};
  const auto same = localization_loss({1, 2, 5, 6}, {1, 2, 5, 6}, image);
  CHECK(same.l1 == 0.0);
  CHECK(same.giou == 0.0);
  const auto off = localization_loss({0, 0, 2, 2}, {1, 1, 3, 3}, image);
  CHECK(off.l1 == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(off.giou == doctest::Approx(1.0 - (1.0 / 7.0 - 2.0 / 9.0)).epsilon(1e-15));

  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 500; ++trial) {
    const auto g = localization_loss(oracle::random_box(rng, {100, 100}, 0.5), oracle::random_box(rng, {100, 100}, 0.5),
                                     {100, 100});
    CHECK(g.giou >= 0.0);
    CHECK(g.giou <= 2.0);
  }
}

TEST_CASE("stage loss: background only, and cross-stage positives skip localization") {
  const ImageSize image{100, 100};
  const CostWeights w;
  const std::vector<Prediction> preds{{0, 1, {10, 10, 30, 30}, {0.1, 0.2}}, {1, 1, {50, 50, 70, 90}, {0.3, 0.1}}};

  StageTargets empty{1, {Vector{0, 0}, Vector{0, 0}}, {std::nullopt, std::nullopt}};
  const auto bg = stage_loss(preds, empty, {}, w, image);
  CHECK(bg.l1 == 0.0);
  CHECK(bg.giou == 0.0);
  CHECK(bg.classification == doctest::Approx(focal_loss_multihot(preds[0].class_scores, Vector{0, 0}, 0.25, 2) +
                                             focal_loss_multihot(preds[1].class_scores, Vector{0, 0}, 0.25, 2)));

  const std::vector<GroundTruth> gts{{{10, 10, 30, 30}, 1}};
  StageTargets own{1, {Vector{0, 1}, Vector{0, 0}}, {0, std::nullopt}};
  StageTargets extra{1, {Vector{0, 1}, Vector{0, 1}}, {0, std::nullopt}};
  const auto a = stage_loss(preds, own, gts, w, image);
  const auto b = stage_loss(preds, extra, gts, w, image);
  CHECK(a.l1 == b.l1);
  CHECK(a.giou == b.giou);
  CHECK(a.classification != b.classification);
  CHECK(a.total == doctest::Approx(w.cls * a.classification + w.l1 * a.l1 + w.giou * a.giou).epsilon(1e-15));
}

TEST_CASE("stage loss is invariant to query order") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const auto s = oracle::random_scenario(rng, {1, 6, 3, 3});
    const auto r = assign_all_stages(s.predictions, s.ground_truths, AssignerConfig::uniform(1, s.num_classes()),
                                     CostWeights{}, s.image);
    const auto preds = s.predictions.stage(1);
    std::vector<Prediction> rev(preds.rbegin(), preds.rend());
    StageTargets t = r.targets[0];
    std::reverse(t.classes.begin(), t.classes.end());
    std::reverse(t.box_target.begin(), t.box_target.end());
    const auto a = stage_loss(preds, r.targets[0], s.ground_truths, CostWeights{}, s.image);
    const auto b = stage_loss(rev, t, s.ground_truths, CostWeights{}, s.image);
    CHECK(a.total == doctest::Approx(b.total).epsilon(1e-13));
  }
}

TEST_CASE("focal and localization gradients at fixed probes") {
  const ScalarFunction f = [](std::span<const double> p) { return focal_loss_multihot(p, Vector{1, 0, 1}, 0.25, 2.0); };
  const Vector probe{0.3, 0.6, 0.9};
  CHECK(grad_check("focal", f, focal_loss_multihot_grad(probe, Vector{1, 0, 1}, 0.25, 2.0), probe, 1e-6).max_rel_error < 1e-6);

  const BoxXYXY target{10, 10, 40, 30};
  const ImageSize image{100, 80};
  const Vector box{12, 7, 45, 28};
  const auto g = localization_loss_grad({12, 7, 45, 28}, target, image);
  const ScalarFunction gi = [&](std::span<const double> x) {
    return localization_loss({x[0], x[1], x[2], x[3]}, target, image).giou;
  };
  CHECK(grad_check("giou", gi, Vector(g.giou.begin(), g.giou.end()), box, 1e-5).max_rel_error < 1e-6);
}
