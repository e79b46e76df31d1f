#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "xstage/assigner.hpp"
#include "xstage/decoder.hpp"
#include "xstage/geometry.hpp"

namespace xstage {

inline constexpr int kScenarioSchemaVersion = 1;

/// Ground truths plus the per-stage, per-query predictions of one image.
struct Scenario {
  ImageSize image{};
  std::vector<GroundTruth> ground_truths;
  PredictionTable predictions{1, 0, 1};

  int num_classes() const { return predictions.num_classes(); }
  int num_stages() const { return predictions.num_stages(); }
  int num_queries() const { return predictions.num_queries(); }

  friend bool operator==(const Scenario&, const Scenario&) = default;
};

/// Text format, one record per line ('#' starts a comment):
///
///   xstage-scenario 1
///   image <width> <height>
///   classes <C>
///   stages <L>
///   queries <N>
///   gt <index> <category> <x1> <y1> <x2> <y2>
///   pred <stage> <query> <x1> <y1> <x2> <y2> <p_0> ... <p_{C-1}>
///
/// gt indexes run 0.. without gaps; pred records are stage-major and cover every
/// (stage, query) pair exactly once. Errors are SchemaError naming field and line.
Scenario parse_scenario(std::istream& in);
Scenario load_scenario(const std::filesystem::path& path);

/// Writes every double in shortest round-trip form, so save -> load is the identity.
void write_scenario(std::ostream& out, const Scenario& scenario);
void save_scenario(const std::filesystem::path& path, const Scenario& scenario);

/// Shortest decimal text that parses back to exactly `value`.
std::string format_double(double value);

/// Independent stream seed derived from one user seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

struct RandomScenarioOptions {
  int num_stages = 3;
  int num_queries = 8;
  int num_gts = 3;
  int num_classes = 4;
  ImageSize image{128.0, 96.0};
};

/// Ground truths at random; each query tracks a jittered copy of some ground truth (or
/// a random box) that drifts from stage to stage, with random class probabilities.
Scenario random_scenario(const RandomScenarioOptions& options, std::uint64_t seed);

/// Random ground truths; predictions from the decoder forward pass on a random pyramid.
Scenario synthesize_scenario(const DecoderConfig& config, InitMode init, int num_gts, ImageSize image,
                             std::uint64_t seed);

}  // namespace xstage
