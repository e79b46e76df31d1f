#include <benchmark/benchmark.h>

#include <random>

#include "xstage/assigner.hpp"
#include "xstage/decoder.hpp"
#include "xstage/matching.hpp"
#include "xstage/scenario.hpp"

using namespace xstage;

namespace {

Matrix random_cost(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 10.0);
  Matrix m(rows, cols);
  for (double& x : m.flat()) x = u(rng);
  return m;
}

void BM_Hungarian(benchmark::State& state) {
  const auto n_gt = static_cast<std::size_t>(state.range(0));
  const Matrix cost = random_cost(n_gt, 100, 7);
  for (auto _ : state) benchmark::DoNotOptimize(hungarian_solve(cost));
  state.SetLabel(std::to_string(n_gt) + " gts x 100 queries");
}
BENCHMARK(BM_Hungarian)->Arg(5)->Arg(20)->Arg(50)->Arg(100);

void BM_AssignAllStages(benchmark::State& state) {
  const auto s = random_scenario({6, 100, static_cast<int>(state.range(0)), 80, {640, 480}}, 3);
  const auto config = AssignerConfig::uniform(6, 80, 0.5);
  for (auto _ : state)
    benchmark::DoNotOptimize(assign_all_stages(s.predictions, s.ground_truths, config, CostWeights{}, s.image));
}
BENCHMARK(BM_AssignAllStages)->Arg(10)->Arg(50);

// Cascade with `reused` bank filters at the base group shape (P_in 32, D_C 64).
void BM_CascadeMix(benchmark::State& state) {
  const int reused = static_cast<int>(state.range(0));
  const auto cfg = DecoderConfig::base();
  const auto dc = static_cast<std::size_t>(cfg.group_channels);
  const auto groups = static_cast<std::size_t>(cfg.groups);
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const auto random_matrix = [&](std::size_t r, std::size_t c) {
    Matrix m(r, c);
    for (double& x : m.flat()) x = u(rng);
    return m;
  };
  SampledFeatures features;
  FilterSet current;
  for (std::size_t g = 0; g < groups; ++g) {
    features.push_back(random_matrix(32, dc));
    current.kernels.push_back(random_matrix(dc, dc));
  }
  FilterBank bank;
  CascadeParams params;
  params.norms.push_back(NormParams::identity(dc));
  for (int k = 0; k < reused; ++k) {
    FilterSet set{k + 1, {}};
    std::vector<Adapter> adapters;
    for (std::size_t g = 0; g < groups; ++g) {
      set.kernels.push_back(random_matrix(dc, dc));
      adapters.push_back({random_matrix(dc, dc), random_matrix(dc, dc)});
    }
    bank.channel.push_back(std::move(set));
    params.adapters.push_back(std::move(adapters));
    params.statics.push_back(StaticMixParams::identity(32, cfg.group_channels));
    params.norms.push_back(NormParams::identity(dc));
  }
  Vector content(static_cast<std::size_t>(cfg.content_dim));
  for (double& x : content) x = u(rng);
  for (auto _ : state) benchmark::DoNotOptimize(cascade_channel_mix(features, bank, current, content, params));
}
BENCHMARK(BM_CascadeMix)->DenseRange(0, 4);

void BM_SamplePoints(benchmark::State& state) {
  const auto cfg = DecoderConfig::base();
  auto sampler = SamplerParams::zeros(cfg.groups, static_cast<int>(state.range(0)), cfg.content_dim);
  const auto pyramid = make_random_pyramid({320, 240}, static_cast<std::size_t>(cfg.content_dim), 2);
  const Vector content(static_cast<std::size_t>(cfg.content_dim), 0.1);
  const BoxXYZR box{160, 120, 6, 0};
  for (auto _ : state)
    benchmark::DoNotOptimize(sample_points(content, box, sampler, pyramid, static_cast<std::size_t>(cfg.group_channels)));
}
BENCHMARK(BM_SamplePoints)->Arg(32)->Arg(64);

void BM_DecoderDesk(benchmark::State& state) {
  const auto cfg = DecoderConfig::desk();
  for (auto _ : state) benchmark::DoNotOptimize(synthesize_scenario(cfg, InitMode::Random, 5, {256, 192}, 9));
}
BENCHMARK(BM_DecoderDesk);

}  // namespace

BENCHMARK_MAIN();
