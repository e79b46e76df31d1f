#pragma once

#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "xstage/geometry.hpp"
#include "xstage/matching.hpp"

namespace xstage {

/// Complete stage-major grid of predictions: one per (stage, query).
class PredictionTable {
 public:
  PredictionTable() = default;
  PredictionTable(int num_stages, int num_queries, int num_classes);

  int num_stages() const noexcept { return num_stages_; }
  int num_queries() const noexcept { return num_queries_; }
  int num_classes() const noexcept { return num_classes_; }

  const Prediction& at(int stage, int query) const;
  /// Replaces the slot (p.stage, p.query_index) after validating p.
  void set(Prediction p);
  std::span<const Prediction> stage(int stage) const;
  std::span<const Prediction> all() const noexcept { return slots_; }

  friend bool operator==(const PredictionTable&, const PredictionTable&) = default;

 private:
  std::size_t slot(int stage, int query) const;

  int num_stages_ = 0;
  int num_queries_ = 0;
  int num_classes_ = 0;
  std::vector<Prediction> slots_;
};

/// One end of an application window: an absolute stage, an offset from the receiving
/// stage i, or an offset from the last stage L. Relative ends are clamped into [1, L].
struct ScopeBound {
  enum class Kind { Absolute, Stage, Last };
  Kind kind = Kind::Stage;
  int offset = 0;

  /// Parses "3", "i", "i-1", "i+2", "L", "L-1".
  static ScopeBound parse(const std::string& text);
  std::string to_string() const;
  int resolve(int stage, int num_stages) const;

  friend bool operator==(const ScopeBound&, const ScopeBound&) = default;
};

struct ScopeRule {
  ScopeBound lo{ScopeBound::Kind::Stage, -1};
  ScopeBound hi{ScopeBound::Kind::Last, 0};

  static ScopeRule previous_to_last() { return {}; }
  static ScopeRule own_stage() {
    return {{ScopeBound::Kind::Stage, 0}, {ScopeBound::Kind::Stage, 0}};
  }
  static ScopeRule all_stages() {
    return {{ScopeBound::Kind::Absolute, 1}, {ScopeBound::Kind::Last, 0}};
  }

  /// [alpha_i, beta_i]; throws when the window leaves [1, L] or is empty.
  std::pair<int, int> window(int stage, int num_stages) const;

  friend bool operator==(const ScopeRule&, const ScopeRule&) = default;
};

struct AssignerConfig {
  int num_stages = 6;
  int num_classes = 80;
  ScopeRule scope = ScopeRule::previous_to_last();
  std::vector<double> iou_threshold;  // one per stage

  static AssignerConfig uniform(int num_stages, int num_classes, double iou_threshold = 0.5,
                                ScopeRule scope = ScopeRule::previous_to_last());

  double threshold(int stage) const;
  void validate() const;
};

/// Candidate bags of one receiving stage: per query, the admitted ground-truth indexes.
struct StageBags {
  int stage = 1;
  std::vector<std::set<int>> per_query;

  friend bool operator==(const StageBags&, const StageBags&) = default;
};

struct StageTargets {
  int stage = 1;
  std::vector<Vector> classes;                  // multi-hot, one per query
  std::vector<std::optional<int>> box_target;   // own-stage matched gt, per query

  int positives() const;
  friend bool operator==(const StageTargets&, const StageTargets&) = default;
};

struct AssignmentResult {
  MatchTrace trace;
  std::vector<StageBags> bags;
  std::vector<StageTargets> targets;
};

/// Bipartite matching of every stage against the ground truths.
MatchTrace match_all_stages(const PredictionTable& predictions,
                            std::span<const GroundTruth> ground_truths, const CostWeights& weights,
                            ImageSize image);

/// For each j in the window of `stage` and each (gt t -> query q) in trace[j], admits t to
/// bag(stage, q) iff IoU(prediction(stage, q), t) >= eta_stage.
StageBags gather_bags(int stage, const MatchTrace& trace, const PredictionTable& predictions,
                      std::span<const GroundTruth> ground_truths, const AssignerConfig& config);

StageTargets merge_targets(const StageBags& bags, const MatchTrace& trace,
                           std::span<const GroundTruth> ground_truths, int num_classes);

AssignmentResult assign_all_stages(const PredictionTable& predictions,
                                   std::span<const GroundTruth> ground_truths,
                                   const AssignerConfig& config, const CostWeights& weights,
                                   ImageSize image);

enum class InstabilityMode { Consecutive, AgainstFinal };

/// Fraction of (gt, stage pair) events in which the matched query changes. Pairs are
/// consecutive stages, or each stage against the last one.
double instability(const MatchTrace& trace, InstabilityMode mode = InstabilityMode::Consecutive);

}  // namespace xstage
