#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "xstage/assigner.hpp"
#include "xstage/geometry.hpp"
#include "xstage/numerics.hpp"

namespace xstage {

/// Shape and reuse schedule of the decoder. Stages are 1-based.
struct DecoderConfig {
  int num_stages = 6;
  int num_queries = 100;
  int content_dim = 256;      // D
  int groups = 4;             // G
  int group_channels = 64;    // D_C, with D = G * D_C
  int points_in = 32;         // P_in for stages >= 2
  int points_in_first = 64;   // P_in at stage 1
  int out_points_factor = 4;  // P_out = factor * P_in
  int max_reused_channel = -1;  // cap on reused channel filters per stage; < 0: no cap
  int reused_spatial = 1;       // N_S
  int channel_reuse_start = 3;  // first stage that reuses channel filters
  int spatial_reuse_start = 3;  // first stage that reuses spatial filters
  int num_classes = 80;

  /// Base model shape (D=256, G=4, D_C=64, 100 queries).
  static DecoderConfig base();
  /// Small shape for synthetic end-to-end runs.
  static DecoderConfig desk();

  int points_at(int stage) const;
  int out_points_at(int stage) const;
  int spatial_groups_at(int stage) const;
  /// Number of bank filters reused by the cascade at `stage` (i - gamma_i).
  int reused_channel_at(int stage) const;
  /// Effective N_S at `stage`: 0 before spatial_reuse_start, at most stage - 1.
  int reused_spatial_at(int stage) const;
  /// Rows produced by the current-stage spatial generator.
  int current_spatial_rows_at(int stage) const;

  void validate() const;
};

/// K = 2^floor(log2 sqrt(P)).
int spatial_group_size(int points);

/// Linear map from a content vector to a rows x cols kernel:
/// kernel = W_0 + sum_d W_d * v_d, stored as a (rows*cols) x D weight (column d is W_d)
/// plus a rows*cols bias (W_0).
struct FilterGenerator {
  std::size_t rows = 0;
  std::size_t cols = 0;
  Matrix weight;
  Vector bias;

  static FilterGenerator zeros(std::size_t rows, std::size_t cols, std::size_t content_dim);
};

struct DynamicFilter {
  Matrix kernel;
  int origin_stage = 0;
};

DynamicFilter generate_channel_filter(std::span<const double> content, const FilterGenerator& gen,
                                      int origin_stage = 0);

struct FilterGeneratorGrad {
  Vector content;
  Matrix weight;
  Vector bias;
};
FilterGeneratorGrad generate_filter_backward(std::span<const double> content,
                                             const FilterGenerator& gen, const Matrix& grad_kernel);

/// Gate weights of one adapter: row gate sigma(W1 v) and column gate sigma(W2 v).
struct Adapter {
  Matrix row_weight;  // rows x in
  Matrix col_weight;  // cols x in

  static Adapter zeros(std::size_t rows, std::size_t cols, std::size_t in);
};

/// M' = (w1 w2^T) * M_prev + (1 - w1 w2^T) * M_cur, elementwise.
DynamicFilter adapt_filter(const DynamicFilter& prev, const DynamicFilter& cur,
                           std::span<const double> content, const Adapter& adapter);

struct AdapterGrad {
  Matrix prev;
  Matrix cur;
  Vector content;
  Matrix row_weight;
  Matrix col_weight;
};
AdapterGrad adapt_filter_backward(const Matrix& prev, const Matrix& cur,
                                  std::span<const double> content, const Adapter& adapter,
                                  const Matrix& grad_out);

/// Static channel-spatial mixing of one group's P x D_C features split into K spatial
/// groups: out = (X + within(X) + across(X)) * channel^T + channel_bias.
struct StaticMixParams {
  int spatial_groups = 1;  // K
  Matrix within;           // (P/K * D_C) square, mixes points inside one spatial group
  Matrix across;           // (K * D_C) square, mixes the same slot across spatial groups
  Matrix channel;          // D_C x D_C
  Vector channel_bias;     // D_C

  static StaticMixParams identity(int points, int group_channels);
};

Matrix static_group_mix(const Matrix& features, const StaticMixParams& params);

struct StaticMixGrad {
  Matrix input;
  StaticMixParams params;
};
StaticMixGrad static_group_mix_backward(const Matrix& features, const StaticMixParams& params,
                                        const Matrix& grad_out);

struct NormParams {
  Vector gain;
  Vector shift;

  static NormParams identity(std::size_t n);
};

/// Row-wise layer norm followed by relu.
Matrix norm_relu(const Matrix& x, const NormParams& norm);

/// Per query: one matrix per channel group, P_in x D_C.
using SampledFeatures = std::vector<Matrix>;

/// Kernels of one stage, one per channel group.
struct FilterSet {
  int origin_stage = 0;
  std::vector<Matrix> kernels;
};

/// Per-query store of the channel and spatial filters of earlier stages, oldest first.
struct FilterBank {
  std::vector<FilterSet> channel;
  std::vector<FilterSet> spatial;
};

/// Parameters of the cascade at one stage with `reused` bank filters.
struct CascadeParams {
  std::vector<std::vector<Adapter>> adapters;  // [reused][group], D_C x D_C gates on v_g
  std::vector<StaticMixParams> statics;        // [reused], between consecutive dynamic mixings
  std::vector<NormParams> norms;               // [reused + 1], after every dynamic mixing

  int reused() const { return static_cast<int>(statics.size()); }
};

/// Current-filter mixing, then for every reused bank filter (oldest first): static
/// layer, adapter, dynamic mixing; every dynamic mixing is followed by norm + relu.
/// The adapter of group g reads the slice v[g*D_C, (g+1)*D_C).
SampledFeatures cascade_channel_mix(const SampledFeatures& features, const FilterBank& bank,
                                    const FilterSet& current, std::span<const double> content,
                                    const CascadeParams& params);

struct CascadeGrad {
  SampledFeatures features;
  std::vector<Matrix> current;
  std::vector<std::vector<Matrix>> bank;  // [reused][group], oldest first
  Vector content;
  CascadeParams params;
};
CascadeGrad cascade_channel_mix_backward(const SampledFeatures& features, const FilterBank& bank,
                                         const FilterSet& current, std::span<const double> content,
                                         const CascadeParams& params,
                                         const SampledFeatures& grad_out);

/// Adapts the `reused` most recent bank spatial filters (first P_in rows of each, gated
/// against the first P_in rows of the current filter) and stacks them above the current
/// filter's rows. Every group's result has P_out rows.
FilterSet build_spatial_filter(const FilterBank& bank, const FilterSet& current,
                               std::span<const double> content,
                               const std::vector<std::vector<Adapter>>& adapters, int reused,
                               int points_in, int out_points);

/// Feature pyramid level; `scale` is the log2 size coordinate the level answers to.
struct PyramidLevel {
  FeatureGrid grid;
  double stride = 1.0;
  double scale = 0.0;
};
using Pyramid = std::vector<PyramidLevel>;

/// Random pyramid with strides 4, 8, 16, 32 and scale = log2(stride).
Pyramid make_random_pyramid(ImageSize image, std::size_t channels, std::uint64_t seed);

/// Reads channels [channel_begin, channel_begin + count) at pixel (x, y) and scale z:
/// bilinear in space, linear between the two levels bracketing z, clamped at both ends.
Vector sample_pyramid(const Pyramid& pyramid, double x, double y, double z,
                      std::size_t channel_begin, std::size_t count);

/// Two-level sampler: per group, K group offsets (dx1, dy1, dz1) and P/K point offsets
/// (dx2, dy2, dz2) produced by linear layers on the content vector.
struct SamplerParams {
  int groups = 1;
  int points = 1;
  int spatial_groups = 1;  // K
  Matrix group_weight;     // (G*K*3) x D
  Vector group_bias;
  Matrix point_weight;     // (G*(P/K)*3) x D
  Vector point_bias;

  static SamplerParams zeros(int groups, int points, int content_dim);
};

struct SamplingPoint {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

struct SampleResult {
  SampledFeatures features;                       // [group] P x D_C
  std::vector<std::vector<SamplingPoint>> points;  // [group][point]
};

SampleResult sample_points(std::span<const double> content, const BoxXYZR& box,
                           const SamplerParams& params, const Pyramid& pyramid,
                           std::size_t group_channels);

struct SamplerGrad {
  Vector content;
  Matrix group_weight;
  Vector group_bias;
  Matrix point_weight;
  Vector point_bias;
};
SamplerGrad sample_points_backward(std::span<const double> content, const BoxXYZR& box,
                                   const SamplerParams& params, const Pyramid& pyramid,
                                   std::size_t group_channels, const SampledFeatures& grad_out);

struct StageParams {
  int stage = 1;
  SamplerParams sampler;
  std::vector<FilterGenerator> channel_generators;  // [group], D_C x D_C
  std::vector<FilterGenerator> spatial_generators;  // [group], current rows x P_in
  CascadeParams cascade;
  std::vector<std::vector<Adapter>> spatial_adapters;  // [N_S][group], P_in x D_C gates
  NormParams spatial_norm;                             // D_C
  Matrix output_weight;                                // D x (G * P_out * D_C)
  Vector output_bias;
  NormParams content_norm;  // D
  Matrix class_weight;      // C x D
  Vector class_bias;
  Matrix box_weight;        // 4 x D
  Vector box_bias;
};

struct DecoderParams {
  DecoderConfig config;
  std::vector<StageParams> stages;
};

enum class InitMode {
  /// Filter-generator, sampler and adapter weights zero; channel W_0 = identity;
  /// sampler biases dxy_1 ~ U[-0.5, 0.5], dxy_2 ~ U[-0.5/sqrt2, 0.5/sqrt2], dz = 0.
  Paper,
  /// Paper initialization plus small uniform noise on every weight, for exercising
  /// the forward pass away from its identity point.
  Random,
};

DecoderParams init_parameters(const DecoderConfig& config, std::uint64_t seed,
                              InitMode mode = InitMode::Paper);

struct QueryState {
  Vector content;
  BoxXYZR box;
};

/// Predictions of every stage plus each query's final filter bank.
struct DecoderRun {
  PredictionTable predictions;
  std::vector<FilterBank> banks;
  std::vector<QueryState> final_queries;
};

/// Forward pass of one stage for one query; appends the stage's filters to `bank`.
QueryState decoder_stage_forward(const DecoderParams& params, int stage, const QueryState& query,
                                 const Pyramid& pyramid, FilterBank& bank, ImageSize image,
                                 Prediction& prediction);

DecoderRun run_decoder(const DecoderParams& params, std::span<const QueryState> queries,
                       const Pyramid& pyramid, ImageSize image);

/// Closed-form costs of dynamic channel mixing.
struct FlopsReport {
  double mixing = 0.0;      // B*N*G*P_in*(2*D_C - 1)*D_C
  double generation = 0.0;  // B*N*G*(2*D - 1)*D_C*D_C
  double ratio = 0.0;       // generation / mixing
};
FlopsReport flops_report(const DecoderConfig& config, int points_in, int batch = 1);

std::int64_t adapter_param_count(const DecoderConfig& config);    // 2 * D_C^2
std::int64_t generator_param_count(const DecoderConfig& config);  // (D + 1) * D_C^2
std::int64_t static_mix_param_count(int points, int group_channels);  // (K^2 + (P/K)^2) * D_C^2

}  // namespace xstage
