#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "xstage/decoder.hpp"
#include "xstage/error.hpp"

using namespace xstage;

namespace {

Matrix random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double half = 1.0) {
  std::uniform_real_distribution<double> u(-half, half);
  Matrix m(rows, cols);
  for (double& x : m.flat()) x = u(rng);
  return m;
}

Vector random_vector(std::mt19937_64& rng, std::size_t n, double half = 1.0) {
  std::uniform_real_distribution<double> u(-half, half);
  Vector v(n);
  for (double& x : v) x = u(rng);
  return v;
}

}  // namespace

TEST_CASE("spatial group size is the power of two below sqrt(P)") {
  CHECK(spatial_group_size(8) == 2);
  CHECK(spatial_group_size(16) == 4);
  CHECK(spatial_group_size(32) == 4);
  CHECK(spatial_group_size(64) == 8);
  CHECK(spatial_group_size(128) == 8);
  CHECK(spatial_group_size(1) == 1);
  CHECK_THROWS_AS(spatial_group_size(0), InvalidArgument);
}

TEST_CASE("config validation") {
  CHECK_NOTHROW(DecoderConfig::base().validate());
  CHECK_NOTHROW(DecoderConfig::desk().validate());
  auto c = DecoderConfig::desk();
  c.content_dim = 15;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c = DecoderConfig::desk();
  c.reused_spatial = 5;  // 5 * 8 > 4 * 8
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c = DecoderConfig::desk();
  c.spatial_reuse_start = 2;  // stage 2 would reuse stage 1's 16-point filter
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
}

TEST_CASE("reuse schedule") {
  const auto c = DecoderConfig::base();
  CHECK(c.reused_channel_at(1) == 0);
  CHECK(c.reused_channel_at(2) == 0);
  CHECK(c.reused_channel_at(3) == 2);
  CHECK(c.reused_channel_at(5) == 4);
  CHECK(c.reused_spatial_at(2) == 0);
  CHECK(c.reused_spatial_at(4) == 1);
  CHECK(c.points_at(1) == 64);
  CHECK(c.points_at(2) == 32);
  CHECK(c.current_spatial_rows_at(4) == 128 - 32);
  auto capped = c;
  capped.max_reused_channel = 1;
  CHECK(capped.reused_channel_at(6) == 1);
}

TEST_CASE("generate_channel_filter examples") {
  auto gen = FilterGenerator::zeros(1, 1, 2);
  gen.weight(0, 0) = 2.0;
  gen.weight(0, 1) = 3.0;
  CHECK(generate_channel_filter(Vector{1, 1}, gen).kernel(0, 0) == 5.0);

  std::mt19937_64 rng(1);
  auto g = FilterGenerator::zeros(3, 3, 4);
  g.bias = random_vector(rng, 9);
  const Matrix w0(3, 3, g.bias);
  CHECK(generate_channel_filter(random_vector(rng, 4), g).kernel == w0);
  g.weight = random_matrix(rng, 9, 4);
  CHECK(generate_channel_filter(Vector(4, 0.0), g).kernel == w0);
  CHECK_THROWS_AS(generate_channel_filter(Vector(3, 0.0), g), DimensionError);
}

TEST_CASE("adapt_filter examples") {
  std::mt19937_64 rng(2);
  const Matrix prev = random_matrix(rng, 3, 4), cur = random_matrix(rng, 3, 4);
  const Vector v = random_vector(rng, 5);
  const auto quarter = adapt_filter({prev, 1}, {cur, 2}, v, Adapter::zeros(3, 4, 5)).kernel;
  for (std::size_t i = 0; i < prev.size(); ++i)
    CHECK(quarter.flat()[i] == doctest::Approx(0.25 * prev.flat()[i] + 0.75 * cur.flat()[i]).epsilon(1e-15));

  Adapter saturated{Matrix(3, 1, 1e3), Matrix(4, 1, 1e3)};
  CHECK(adapt_filter({prev, 1}, {cur, 2}, Vector{1.0}, saturated).kernel == prev);

  CHECK_THROWS_AS(adapt_filter({prev, 1}, {Matrix(4, 3), 2}, v, Adapter::zeros(3, 4, 5)), DimensionError);
}

TEST_CASE("adapt_filter stays between its inputs at seed 0") {
  std::mt19937_64 rng(0);
  for (int trial = 0; trial < 1000; ++trial) {
    const Matrix prev = random_matrix(rng, 4, 4), cur = random_matrix(rng, 4, 4);
    const Adapter a{random_matrix(rng, 4, 4, 3.0), random_matrix(rng, 4, 4, 3.0)};
    const auto out = adapt_filter({prev, 0}, {cur, 0}, random_vector(rng, 4), a).kernel;
    for (std::size_t i = 0; i < out.size(); ++i) {
      CHECK(out.flat()[i] >= std::min(prev.flat()[i], cur.flat()[i]));
      CHECK(out.flat()[i] <= std::max(prev.flat()[i], cur.flat()[i]));
    }
  }
}

TEST_CASE("static_group_mix with zero branches is the channel-mixed input") {
  std::mt19937_64 rng(3);
  auto p = StaticMixParams::identity(32, 3);
  CHECK(p.spatial_groups == 4);
  CHECK(p.within.rows() == 8 * 3);
  CHECK(p.across.rows() == 4 * 3);
  p.within = Matrix(p.within.rows(), p.within.cols());
  p.across = Matrix(p.across.rows(), p.across.cols());
  p.channel = random_matrix(rng, 3, 3);
  p.channel_bias = random_vector(rng, 3);
  const Matrix x = random_matrix(rng, 32, 3);
  const Matrix out = static_group_mix(x, p);
  Matrix expected = matmul_nt(x, p.channel);
  for (std::size_t r = 0; r < 32; ++r)
    for (std::size_t c = 0; c < 3; ++c) expected(r, c) += p.channel_bias[c];
  CHECK(out == expected);
  CHECK_THROWS_AS(static_group_mix(random_matrix(rng, 30, 3), p), InvalidArgument);
}

TEST_CASE("static mix parameter bound over the sweep") {
  for (int p : {8, 16, 32, 64, 128}) CHECK(static_mix_param_count(p, 64) <= 3LL * p * 64 * 64);
  CHECK(static_mix_param_count(32, 64) == (16 + 64) * 64 * 64);
}

TEST_CASE("cascade without reuse is one dynamic mixing and a norm") {
  std::mt19937_64 rng(4);
  const SampledFeatures x{random_matrix(rng, 4, 3), random_matrix(rng, 4, 3)};
  const FilterSet cur{1, {random_matrix(rng, 3, 3), random_matrix(rng, 3, 3)}};
  CascadeParams params;
  params.norms = {{random_vector(rng, 3), random_vector(rng, 3)}};
  const auto out = cascade_channel_mix(x, {}, cur, random_vector(rng, 6), params);
  for (std::size_t g = 0; g < 2; ++g) CHECK(out[g] == norm_relu(matmul(x[g], cur.kernels[g]), params.norms[0]));
}

TEST_CASE("cascade with four reused filters reads every one of them") {
  std::mt19937_64 rng(5);
  const SampledFeatures x{random_matrix(rng, 4, 3)};
  const FilterSet cur{5, {random_matrix(rng, 3, 3)}};
  FilterBank bank;
  CascadeParams params;
  for (int k = 0; k < 4; ++k) {
    bank.channel.push_back({k + 1, {random_matrix(rng, 3, 3)}});
    params.adapters.push_back({Adapter::zeros(3, 3, 3)});
    params.statics.push_back(StaticMixParams::identity(4, 3));
  }
  params.norms.assign(5, NormParams::identity(3));
  const Vector v = random_vector(rng, 3);
  const auto base = cascade_channel_mix(x, bank, cur, v, params);
  for (int k = 0; k < 4; ++k) {
    FilterBank changed = bank;
    changed.channel[static_cast<std::size_t>(k)].kernels[0](0, 0) += 1.0;
    CHECK(cascade_channel_mix(x, changed, cur, v, params)[0] != base[0]);
  }
  FilterBank shallow = bank;
  shallow.channel.pop_back();
  shallow.channel.pop_back();
  shallow.channel.pop_back();
  CHECK_THROWS_AS(cascade_channel_mix(x, shallow, cur, v, params), InvalidArgument);
}

TEST_CASE("identity cascade leaves normalized non-negative features unchanged") {
  // Rows with mean 0 and unit variance pass the norm unchanged up to epsilon; relu then
  // clips the negative entries.
  const Matrix x(2, 4, {1, -1, 1, -1, -1, -1, 1, 1});
  const FilterSet cur{3, {Matrix::identity(4)}};
  FilterBank bank;
  bank.channel = {{1, {Matrix::identity(4)}}, {2, {Matrix::identity(4)}}};
  CascadeParams params;
  for (int k = 0; k < 2; ++k) {
    params.adapters.push_back({Adapter::zeros(4, 4, 4)});
    auto st = StaticMixParams::identity(2, 4);
    st.within = Matrix(st.within.rows(), st.within.cols());
    st.across = Matrix(st.across.rows(), st.across.cols());
    params.statics.push_back(st);
  }
  params.norms.assign(3, NormParams::identity(4));
  const auto out = cascade_channel_mix({x}, bank, cur, Vector(4, 0.0), params)[0];
  // After the first relu rows are (1,0,1,0): mean 0.5, std 0.5, so later norms map the
  // row to (1,-1,1,-1) and relu returns (1,0,1,0) again.
  for (std::size_t i = 0; i < x.size(); ++i)
    CHECK(out.flat()[i] == doctest::Approx(std::max(0.0, x.flat()[i])).epsilon(1e-4));
}

TEST_CASE("build_spatial_filter") {
  std::mt19937_64 rng(6);
  const FilterSet cur{3, {random_matrix(rng, 16, 4)}};
  const auto alone = build_spatial_filter({}, cur, Vector(4, 0.0), {}, 0, 4, 16);
  CHECK(alone.kernels[0] == cur.kernels[0]);

  const FilterSet cur12{3, {random_matrix(rng, 12, 4)}};
  FilterBank bank;
  bank.spatial.push_back({2, {random_matrix(rng, 16, 4)}});
  const auto reused = build_spatial_filter(bank, cur12, Vector(4, 0.0), {{Adapter::zeros(4, 4, 4)}}, 1, 4, 16);
  REQUIRE(reused.kernels[0].rows() == 16);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c)
      CHECK(reused.kernels[0](r, c) ==
            doctest::Approx(0.25 * bank.spatial[0].kernels[0](r, c) + 0.75 * cur12.kernels[0](r, c)).epsilon(1e-15));
  for (std::size_t r = 0; r < 12; ++r)
    for (std::size_t c = 0; c < 4; ++c) CHECK(reused.kernels[0](r + 4, c) == cur12.kernels[0](r, c));

  CHECK_THROWS_AS(build_spatial_filter(bank, cur12, Vector(4, 0.0), {{Adapter::zeros(4, 4, 4)}}, 5, 4, 16),
                  InvalidArgument);
}

TEST_CASE("sampler: zero offsets, hand-evaluated offset and translation") {
  const ImageSize image{64, 64};
  const Pyramid pyramid = make_random_pyramid(image, 4, 1);
  auto p = SamplerParams::zeros(1, 4, 3);
  const auto zero = sample_points(Vector{0.1, 0.2, 0.3}, {20, 30, 3, 0}, p, pyramid, 4);
  for (const auto& pt : zero.points[0]) {
    CHECK(pt.x == 20.0);
    CHECK(pt.y == 30.0);
    CHECK(pt.z == 3.0);
  }
  // Level 1 has scale 3: the read is a pure bilinear sample of that level.
  CHECK(zero.features[0].row(0)[0] == bilinear_sample(pyramid[1].grid, 20.0 / 8 - 0.5, 30.0 / 8 - 0.5)[0]);

  auto one = SamplerParams::zeros(1, 1, 1);
  one.group_bias = {0.5, -0.5, 0.0};
  const auto hand = sample_points(Vector{0.0}, {8, 8, 3, 0}, one, pyramid, 4);
  CHECK(hand.points[0][0].x == 12.0);
  CHECK(hand.points[0][0].y == 4.0);
  CHECK(hand.points[0][0].z == 3.0);

  std::mt19937_64 rng(7);
  auto q = SamplerParams::zeros(2, 8, 3);
  q.group_weight = random_matrix(rng, q.group_weight.rows(), 3, 0.3);
  q.point_weight = random_matrix(rng, q.point_weight.rows(), 3, 0.3);
  q.group_bias = random_vector(rng, q.group_bias.size(), 0.5);
  q.point_bias = random_vector(rng, q.point_bias.size(), 0.5);
  const Vector v = random_vector(rng, 3);
  const auto a = sample_points(v, {30, 20, 3.5, 0.4}, q, pyramid, 2);
  const auto b = sample_points(v, {37.5, 11.25, 3.5, 0.4}, q, pyramid, 2);
  for (std::size_t g = 0; g < 2; ++g) {
    for (std::size_t i = 0; i < 8; ++i) {
      CHECK(b.points[g][i].x - a.points[g][i].x == doctest::Approx(7.5).epsilon(1e-12));
      CHECK(b.points[g][i].y - a.points[g][i].y == doctest::Approx(-8.75).epsilon(1e-12));
      CHECK(b.points[g][i].z == a.points[g][i].z);
    }
  }
}

TEST_CASE("sampler offsets scale with 2^(z - r/2) when z offsets are zero") {
  const Pyramid pyramid = make_random_pyramid({64, 64}, 2, 2);
  std::mt19937_64 rng(8);
  auto p = SamplerParams::zeros(1, 4, 2);
  p.group_bias = random_vector(rng, p.group_bias.size());
  p.point_bias = random_vector(rng, p.point_bias.size());
  for (std::size_t i = 2; i < p.group_bias.size(); i += 3) p.group_bias[i] = 0.0;
  for (std::size_t i = 2; i < p.point_bias.size(); i += 3) p.point_bias[i] = 0.0;
  const auto a = sample_points(Vector{0, 0}, {32, 32, 2.0, 0.5}, p, pyramid, 2);
  const auto b = sample_points(Vector{0, 0}, {32, 32, 3.0, 0.5}, p, pyramid, 2);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(b.points[0][i].x - 32 == doctest::Approx(2.0 * (a.points[0][i].x - 32)).epsilon(1e-12));
    CHECK(b.points[0][i].y - 32 == doctest::Approx(2.0 * (a.points[0][i].y - 32)).epsilon(1e-12));
  }
}

TEST_CASE("pyramid blend is linear between levels and clamped outside") {
  const Pyramid pyramid = make_random_pyramid({64, 64}, 1, 3);
  const Vector lo = sample_pyramid(pyramid, 20, 20, 3.0, 0, 1);
  const Vector hi = sample_pyramid(pyramid, 20, 20, 4.0, 0, 1);
  CHECK(sample_pyramid(pyramid, 20, 20, 3.25, 0, 1)[0] == doctest::Approx(0.75 * lo[0] + 0.25 * hi[0]).epsilon(1e-14));
  CHECK(sample_pyramid(pyramid, 20, 20, -4.0, 0, 1) == sample_pyramid(pyramid, 20, 20, 2.0, 0, 1));
  CHECK(sample_pyramid(pyramid, 20, 20, 9.0, 0, 1) == sample_pyramid(pyramid, 20, 20, 5.0, 0, 1));
}

TEST_CASE("initialization contract") {
  const auto params = init_parameters(DecoderConfig::desk(), 5);
  std::mt19937_64 rng(9);
  for (const auto& sp : params.stages) {
    for (const auto& gen : sp.channel_generators) {
      CHECK(generate_channel_filter(random_vector(rng, 16, 10.0), gen).kernel == Matrix::identity(8));
    }
    const auto& s = sp.sampler;
    for (double w : s.group_weight.flat()) CHECK(w == 0.0);
    for (double w : s.point_weight.flat()) CHECK(w == 0.0);
    for (std::size_t i = 0; i < s.group_bias.size(); i += 3) {
      CHECK(std::abs(s.group_bias[i]) <= 0.5);
      CHECK(std::abs(s.group_bias[i + 1]) <= 0.5);
      CHECK(s.group_bias[i + 2] == 0.0);
    }
    for (std::size_t i = 0; i < s.point_bias.size(); i += 3) {
      CHECK(std::abs(s.point_bias[i]) <= 0.5 / std::sqrt(2.0));
      CHECK(std::abs(s.point_bias[i + 1]) <= 0.5 / std::sqrt(2.0));
      CHECK(s.point_bias[i + 2] == 0.0);
    }
    for (const auto& set : sp.cascade.adapters)
      for (const auto& a : set) {
        for (double w : a.row_weight.flat()) CHECK(w == 0.0);
        for (double w : a.col_weight.flat()) CHECK(w == 0.0);
      }
  }
  CHECK(init_parameters(DecoderConfig::desk(), 5).stages[2].sampler.group_bias == params.stages[2].sampler.group_bias);
}

TEST_CASE("filter bank depth after stage i is i, reuse starts at the configured stage") {
  const auto cfg = DecoderConfig::desk();
  const auto params = init_parameters(cfg, 1, InitMode::Random);
  const ImageSize image{128, 96};
  const Pyramid pyramid = make_random_pyramid(image, 16, 2);
  QueryState q{Vector(16, 0.1), {60, 40, 4.5, 0.2}};
  FilterBank bank;
  for (int i = 1; i <= cfg.num_stages; ++i) {
    Prediction pred;
    q = decoder_stage_forward(params, i, q, pyramid, bank, image, pred);
    CHECK(bank.channel.size() == static_cast<std::size_t>(i));
    CHECK(bank.spatial.size() == static_cast<std::size_t>(i));
    CHECK(params.stages[static_cast<std::size_t>(i - 1)].cascade.reused() == (i >= 3 ? i - 1 : 0));
    CHECK(pred.box.valid());
    for (double p : pred.class_scores) CHECK(std::isfinite(p));
  }
}

TEST_CASE("FLOPs and parameter accounting") {
  const auto base = DecoderConfig::base();
  const auto r = flops_report(base, 32);
  CHECK(r.ratio == doctest::Approx(8.047244).epsilon(1e-6));
  CHECK(flops_report(base, 64).ratio == doctest::Approx(r.ratio / 2).epsilon(1e-15));
  CHECK(r.mixing == 100.0 * 4 * 32 * 127 * 64);
  CHECK(adapter_param_count(base) == 8192);
  CHECK(generator_param_count(base) > 256LL * 64 * 64);
}
