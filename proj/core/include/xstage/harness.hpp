#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "xstage/assigner.hpp"
#include "xstage/decoder.hpp"
#include "xstage/losses.hpp"
#include "xstage/numerics.hpp"
#include "xstage/scenario.hpp"

namespace xstage {

inline constexpr int kReportSchemaVersion = 1;

struct AssignReport {
  AssignerConfig config;
  CostWeights weights;
  InstabilityMode instability_mode = InstabilityMode::Consecutive;
  AssignmentResult result;
  std::vector<LossBreakdown> losses;  // per stage
  std::vector<int> pos_count;         // own-stage matches per stage
  double instability = 0.0;           // 0 for single-stage scenarios
};

/// Matches every stage, gathers and merges cross-stage bags, and scores each stage.
AssignReport run_assign(const Scenario& scenario, const AssignerConfig& config,
                        const CostWeights& weights,
                        InstabilityMode mode = InstabilityMode::Consecutive);

struct FlopsStageRow {
  int stage = 0;
  int points_in = 0;
  int spatial_groups = 0;
  FlopsReport flops;
  std::int64_t static_params = 0;
  std::int64_t static_bound = 0;  // 3 * P * D_C^2
};

struct FlopsTable {
  DecoderConfig config;
  FlopsReport steady;  // at config.points_in
  std::int64_t adapter_params = 0;
  std::int64_t generator_params = 0;
  std::int64_t static_params = 0;  // at config.points_in
  std::vector<FlopsStageRow> stages;
  std::vector<FlopsStageRow> sweep;  // P in {8, 16, 32, 64, 128}
};

FlopsTable run_flops(const DecoderConfig& config);

struct NmsReport {
  int stage = 0;
  double threshold = 0.0;
  std::vector<ScoredBox> candidates;  // one per query: best category and its score
  std::vector<std::size_t> kept;
};

/// Greedy per-category NMS over the predictions of `stage` (default: last stage).
NmsReport run_nms(const Scenario& scenario, double threshold, int stage = 0);

inline constexpr double kGradCheckTolerance = 1e-4;
inline constexpr double kGradCheckStep = 1e-5;

/// Decoder and loss operations with finite-difference checks.
const std::vector<std::string>& gradcheck_ops();

struct GradCheckSuite {
  std::uint64_t seed = 0;
  double step = kGradCheckStep;
  double tolerance = kGradCheckTolerance;
  std::vector<GradCheckReport> blocks;  // one per parameter block

  bool passed() const;
  double max_rel_error() const;
};

/// Runs the checks of `op` ("all" for every op) on small random probes drawn from
/// `seed`. Probes are redrawn until they sit away from relu, clamp and grid kinks.
GradCheckSuite run_gradcheck(const std::string& op, std::uint64_t seed, double step = kGradCheckStep,
                             double tolerance = kGradCheckTolerance);

struct RunInfo {
  std::string command;
  std::uint64_t seed = 0;
  std::string source;  // scenario path or generator description
};

/// Machine-readable reports: JSON with "schema": "xstage-report" and "schema_version".
/// Throws InvalidArgument if any metric is not finite.
std::string to_json(const AssignReport& report, const Scenario& scenario, const RunInfo& info);
std::string to_json(const AssignReport& report, const Scenario& scenario, const RunInfo& info,
                    const DecoderConfig& decoder, InitMode init);
std::string to_json(const FlopsTable& table, const RunInfo& info);
std::string to_json(const NmsReport& report, const RunInfo& info);
std::string to_json(const GradCheckSuite& suite, const RunInfo& info);

}  // namespace xstage
