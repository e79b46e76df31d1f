#include "xstage/assigner.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <string>

#include "xstage/error.hpp"

namespace xstage {

PredictionTable::PredictionTable(int num_stages, int num_queries, int num_classes)
    : num_stages_(num_stages), num_queries_(num_queries), num_classes_(num_classes) {
  if (num_stages < 1 || num_queries < 0 || num_classes < 1) {
    throw InvalidArgument("PredictionTable: need >= 1 stage, >= 0 queries, >= 1 class");
  }
  slots_.resize(static_cast<std::size_t>(num_stages) * static_cast<std::size_t>(num_queries));
  for (int s = 1; s <= num_stages; ++s) {
    for (int q = 0; q < num_queries; ++q) {
      auto& p = slots_[slot(s, q)];
      p.stage = s;
      p.query_index = q;
      p.class_scores.assign(static_cast<std::size_t>(num_classes), 0.0);
    }
  }
}

std::size_t PredictionTable::slot(int stage, int query) const {
  if (stage < 1 || stage > num_stages_ || query < 0 || query >= num_queries_) {
    throw InvalidArgument("PredictionTable: no slot for stage " + std::to_string(stage) +
                          ", query " + std::to_string(query));
  }
  return static_cast<std::size_t>(stage - 1) * static_cast<std::size_t>(num_queries_) +
         static_cast<std::size_t>(query);
}

const Prediction& PredictionTable::at(int stage, int query) const {
  return slots_[slot(stage, query)];
}

void PredictionTable::set(Prediction p) {
  const auto s = slot(p.stage, p.query_index);
  if (!p.box.valid()) throw InvalidArgument("PredictionTable: malformed box");
  if (p.class_scores.size() != static_cast<std::size_t>(num_classes_)) {
    throw DimensionError("PredictionTable: " + std::to_string(p.class_scores.size()) +
                         " class scores, expected " + std::to_string(num_classes_));
  }
  for (double c : p.class_scores) {
    if (!(c >= 0.0 && c <= 1.0)) throw InvalidArgument("PredictionTable: probability outside [0,1]");
  }
  slots_[s] = std::move(p);
}

std::span<const Prediction> PredictionTable::stage(int stage) const {
  if (stage < 1 || stage > num_stages_) {
    throw InvalidArgument("PredictionTable: no stage " + std::to_string(stage));
  }
  const auto first = static_cast<std::size_t>(stage - 1) * static_cast<std::size_t>(num_queries_);
  return std::span<const Prediction>(slots_).subspan(first, static_cast<std::size_t>(num_queries_));
}

ScopeBound ScopeBound::parse(const std::string& text) {
  std::string s;
  for (char c : text)
    if (!std::isspace(static_cast<unsigned char>(c))) s += c;
  if (s.empty()) throw InvalidArgument("scope bound: empty");
  const auto parse_offset = [&](std::size_t pos) {
    if (pos == s.size()) return 0;
    if (s[pos] != '+' && s[pos] != '-') throw InvalidArgument("scope bound: cannot parse '" + text + "'");
    try {
      std::size_t used = 0;
      const int v = std::stoi(s.substr(pos), &used);
      if (pos + used != s.size()) throw InvalidArgument("scope bound: cannot parse '" + text + "'");
      return v;
    } catch (const std::logic_error&) {
      throw InvalidArgument("scope bound: cannot parse '" + text + "'");
    }
  };
  if (s[0] == 'i') return {Kind::Stage, parse_offset(1)};
  if (s[0] == 'L') return {Kind::Last, parse_offset(1)};
  try {
    std::size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used != s.size()) throw InvalidArgument("scope bound: cannot parse '" + text + "'");
    return {Kind::Absolute, v};
  } catch (const std::logic_error&) {
    throw InvalidArgument("scope bound: cannot parse '" + text + "'");
  }
}

std::string ScopeBound::to_string() const {
  const auto with_offset = [&](const char* base) {
    std::string out = base;
    if (offset > 0) out += "+" + std::to_string(offset);
    if (offset < 0) out += std::to_string(offset);
    return out;
  };
  switch (kind) {
    case Kind::Absolute: return std::to_string(offset);
    case Kind::Stage: return with_offset("i");
    case Kind::Last: return with_offset("L");
  }
  return {};
}

int ScopeBound::resolve(int stage, int num_stages) const {
  switch (kind) {
    case Kind::Absolute: return offset;
    case Kind::Stage: return std::clamp(stage + offset, 1, num_stages);
    case Kind::Last: return std::clamp(num_stages + offset, 1, num_stages);
  }
  return offset;
}

std::pair<int, int> ScopeRule::window(int stage, int num_stages) const {
  if (stage < 1 || stage > num_stages) {
    throw InvalidArgument("scope: stage " + std::to_string(stage) + " outside [1, " +
                          std::to_string(num_stages) + "]");
  }
  const int a = lo.resolve(stage, num_stages);
  const int b = hi.resolve(stage, num_stages);
  if (a < 1 || b > num_stages || a > b) {
    throw InvalidArgument("scope: window [" + std::to_string(a) + ", " + std::to_string(b) +
                          "] for stage " + std::to_string(stage) + " is outside [1, " +
                          std::to_string(num_stages) + "] or empty");
  }
  return {a, b};
}

AssignerConfig AssignerConfig::uniform(int num_stages, int num_classes, double iou_threshold,
                                       ScopeRule scope) {
  AssignerConfig c;
  c.num_stages = num_stages;
  c.num_classes = num_classes;
  c.scope = scope;
  c.iou_threshold.assign(static_cast<std::size_t>(std::max(num_stages, 0)), iou_threshold);
  return c;
}

double AssignerConfig::threshold(int stage) const {
  if (stage < 1 || static_cast<std::size_t>(stage) > iou_threshold.size()) {
    throw InvalidArgument("assigner: no IoU threshold for stage " + std::to_string(stage));
  }
  return iou_threshold[static_cast<std::size_t>(stage - 1)];
}

void AssignerConfig::validate() const {
  if (num_stages < 1) throw InvalidArgument("assigner: need at least one stage");
  if (num_classes < 1) throw InvalidArgument("assigner: need at least one class");
  if (iou_threshold.size() != static_cast<std::size_t>(num_stages)) {
    throw InvalidArgument("assigner: expected " + std::to_string(num_stages) +
                          " IoU thresholds, got " + std::to_string(iou_threshold.size()));
  }
  for (double eta : iou_threshold) {
    if (!(eta >= 0.0 && eta < 1.0)) throw InvalidArgument("assigner: IoU threshold outside [0, 1)");
  }
  for (int i = 1; i <= num_stages; ++i) (void)scope.window(i, num_stages);
}

int StageTargets::positives() const {
  return static_cast<int>(std::count_if(box_target.begin(), box_target.end(),
                                        [](const auto& t) { return t.has_value(); }));
}

MatchTrace match_all_stages(const PredictionTable& predictions,
                            std::span<const GroundTruth> ground_truths, const CostWeights& weights,
                            ImageSize image) {
  MatchTrace trace;
  trace.stages.reserve(static_cast<std::size_t>(predictions.num_stages()));
  for (int s = 1; s <= predictions.num_stages(); ++s) {
    trace.stages.push_back(
        hungarian_solve(build_cost_matrix(predictions.stage(s), ground_truths, weights, image)));
  }
  return trace;
}

StageBags gather_bags(int stage, const MatchTrace& trace, const PredictionTable& predictions,
                      std::span<const GroundTruth> ground_truths, const AssignerConfig& config) {
  const auto [alpha, beta] = config.scope.window(stage, config.num_stages);
  if (beta > trace.num_stages()) {
    throw InvalidArgument("gather_bags: trace has " + std::to_string(trace.num_stages()) +
                          " stages, window needs " + std::to_string(beta));
  }
  const double eta = config.threshold(stage);
  StageBags bags{stage, std::vector<std::set<int>>(static_cast<std::size_t>(predictions.num_queries()))};
  for (int j = alpha; j <= beta; ++j) {
    const auto& match = trace.stage(j);
    for (std::size_t t = 0; t < match.gt_to_query.size(); ++t) {
      if (!match.gt_to_query[t]) continue;
      const int q = *match.gt_to_query[t];
      if (iou(predictions.at(stage, q).box, ground_truths[t].box) >= eta) {
        bags.per_query[static_cast<std::size_t>(q)].insert(static_cast<int>(t));
      }
    }
  }
  return bags;
}

StageTargets merge_targets(const StageBags& bags, const MatchTrace& trace,
                           std::span<const GroundTruth> ground_truths, int num_classes) {
  const std::size_t n = bags.per_query.size();
  StageTargets out{bags.stage, std::vector<Vector>(n, Vector(static_cast<std::size_t>(num_classes), 0.0)),
                   trace.stage(bags.stage).query_to_gt(n)};
  for (std::size_t q = 0; q < n; ++q) {
    for (int t : bags.per_query[q]) {
      const int cat = ground_truths[static_cast<std::size_t>(t)].category;
      if (cat < 0 || cat >= num_classes) {
        throw InvalidArgument("merge_targets: category " + std::to_string(cat) + " outside [0, " +
                              std::to_string(num_classes) + ")");
      }
      out.classes[q][static_cast<std::size_t>(cat)] = 1.0;
    }
  }
  return out;
}

AssignmentResult assign_all_stages(const PredictionTable& predictions,
                                   std::span<const GroundTruth> ground_truths,
                                   const AssignerConfig& config, const CostWeights& weights,
                                   ImageSize image) {
  config.validate();
  if (config.num_stages != predictions.num_stages()) {
    throw InvalidArgument("assign_all_stages: config has " + std::to_string(config.num_stages) +
                          " stages, predictions have " + std::to_string(predictions.num_stages()));
  }
  AssignmentResult result;
  result.trace = match_all_stages(predictions, ground_truths, weights, image);
  for (int i = 1; i <= config.num_stages; ++i) {
    auto bags = gather_bags(i, result.trace, predictions, ground_truths, config);
    result.targets.push_back(merge_targets(bags, result.trace, ground_truths, config.num_classes));
    result.bags.push_back(std::move(bags));
  }
  return result;
}

double instability(const MatchTrace& trace, InstabilityMode mode) {
  if (trace.num_stages() < 2) throw InvalidArgument("instability: need at least two stages");
  const std::size_t n_gt = trace.stages.front().gt_to_query.size();
  for (const auto& s : trace.stages) {
    if (s.gt_to_query.size() != n_gt) {
      throw InvalidArgument("instability: stages disagree on the ground-truth set");
    }
  }
  if (n_gt == 0) return 0.0;
  std::size_t events = 0;
  std::size_t transfers = 0;
  const std::size_t last = trace.stages.size() - 1;
  for (std::size_t s = 0; s < last; ++s) {
    const auto& a = trace.stages[s].gt_to_query;
    const auto& b = (mode == InstabilityMode::Consecutive ? trace.stages[s + 1] : trace.stages[last])
                        .gt_to_query;
    for (std::size_t t = 0; t < n_gt; ++t) {
      ++events;
      if (a[t] != b[t]) ++transfers;
    }
  }
  return static_cast<double>(transfers) / static_cast<double>(events);
}

}  // namespace xstage
