#include "xstage/decoder.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <random>
#include <string>

#include "xstage/error.hpp"

namespace xstage {

// ---------------------------------------------------------------- configuration

DecoderConfig DecoderConfig::base() { return DecoderConfig{}; }

DecoderConfig DecoderConfig::desk() {
  DecoderConfig c;
  c.num_queries = 10;
  c.content_dim = 16;
  c.groups = 2;
  c.group_channels = 8;
  c.points_in = 8;
  c.points_in_first = 16;
  c.num_classes = 8;
  return c;
}

int spatial_group_size(int points) {
  if (points < 1) throw InvalidArgument("spatial_group_size: points must be positive");
  const int log2_points = std::bit_width(static_cast<unsigned>(points)) - 1;
  return 1 << (log2_points / 2);
}

namespace {

void check_stage(const DecoderConfig& c, int stage) {
  if (stage < 1 || stage > c.num_stages) {
    throw InvalidArgument("decoder: stage " + std::to_string(stage) + " outside [1, " +
                          std::to_string(c.num_stages) + "]");
  }
}

}  // namespace

int DecoderConfig::points_at(int stage) const {
  check_stage(*this, stage);
  return stage == 1 ? points_in_first : points_in;
}

int DecoderConfig::out_points_at(int stage) const { return out_points_factor * points_at(stage); }

int DecoderConfig::spatial_groups_at(int stage) const { return spatial_group_size(points_at(stage)); }

int DecoderConfig::reused_channel_at(int stage) const {
  check_stage(*this, stage);
  if (stage < channel_reuse_start) return 0;
  const int all = stage - 1;
  return max_reused_channel < 0 ? all : std::min(all, max_reused_channel);
}

int DecoderConfig::reused_spatial_at(int stage) const {
  check_stage(*this, stage);
  if (stage < spatial_reuse_start) return 0;
  return std::min(reused_spatial, stage - 1);
}

int DecoderConfig::current_spatial_rows_at(int stage) const {
  return out_points_at(stage) - reused_spatial_at(stage) * points_at(stage);
}

void DecoderConfig::validate() const {
  const auto fail = [](const std::string& what) { throw InvalidArgument("decoder config: " + what); };
  if (num_stages < 1) fail("num_stages must be >= 1");
  if (num_queries < 1) fail("num_queries must be >= 1");
  if (content_dim < 1 || groups < 1 || group_channels < 1) fail("dimensions must be positive");
  if (content_dim != groups * group_channels) {
    fail("content_dim " + std::to_string(content_dim) + " != groups * group_channels (" +
         std::to_string(groups) + " * " + std::to_string(group_channels) + ")");
  }
  if (points_in < 1 || points_in_first < 1) fail("sampling points must be positive");
  if (out_points_factor < 1) fail("out_points_factor must be >= 1");
  if (reused_spatial < 0) fail("reused_spatial must be >= 0");
  if (channel_reuse_start < 1 || spatial_reuse_start < 1) fail("reuse start stages must be >= 1");
  if (num_classes < 1) fail("num_classes must be >= 1");
  for (int i = 1; i <= num_stages; ++i) {
    const int p = points_at(i);
    const int k = spatial_group_size(p);
    if (p % k != 0) {
      fail("stage " + std::to_string(i) + ": " + std::to_string(p) +
           " points not divisible by spatial group size " + std::to_string(k));
    }
    const int ns = reused_spatial_at(i);
    if (ns * p > out_points_at(i)) {
      fail("stage " + std::to_string(i) + ": " + std::to_string(ns) + " reused spatial filters x " +
           std::to_string(p) + " points exceed " + std::to_string(out_points_at(i)) + " output points");
    }
    for (int j = i - ns; j < i; ++j) {
      if (points_at(j) != p) {
        fail("stage " + std::to_string(i) + " reuses the spatial filter of stage " +
             std::to_string(j) + ", which samples a different number of points");
      }
    }
  }
}

// ---------------------------------------------------------------- filters

FilterGenerator FilterGenerator::zeros(std::size_t rows, std::size_t cols, std::size_t content_dim) {
  return {rows, cols, Matrix(rows * cols, content_dim), Vector(rows * cols, 0.0)};
}

DynamicFilter generate_channel_filter(std::span<const double> content, const FilterGenerator& gen,
                                      int origin_stage) {
  if (gen.weight.rows() != gen.rows * gen.cols || gen.bias.size() != gen.rows * gen.cols) {
    throw DimensionError("generate_channel_filter: generator for " + std::to_string(gen.rows) + "x" +
                         std::to_string(gen.cols) + " kernels holds weight " +
                         gen.weight.shape_string() + " and bias of length " +
                         std::to_string(gen.bias.size()));
  }
  return {Matrix(gen.rows, gen.cols, linear(content, gen.weight, gen.bias)), origin_stage};
}

Adapter Adapter::zeros(std::size_t rows, std::size_t cols, std::size_t in) {
  return {Matrix(rows, in), Matrix(cols, in)};
}

namespace {

Vector sigmoid_of(const Vector& x) {
  Vector out(x.size());
  std::transform(x.begin(), x.end(), out.begin(), sigmoid);
  return out;
}

}  // namespace

DynamicFilter adapt_filter(const DynamicFilter& prev, const DynamicFilter& cur,
                           std::span<const double> content, const Adapter& adapter) {
  const Matrix& mp = prev.kernel;
  const Matrix& mc = cur.kernel;
  if (mp.rows() != mc.rows() || mp.cols() != mc.cols()) {
    throw DimensionError("adapt_filter: previous filter " + mp.shape_string() +
                         " vs current filter " + mc.shape_string());
  }
  if (adapter.row_weight.rows() != mp.rows() || adapter.col_weight.rows() != mp.cols()) {
    throw DimensionError("adapt_filter: gates " + adapter.row_weight.shape_string() + " and " +
                         adapter.col_weight.shape_string() + " for filter " + mp.shape_string());
  }
  const Vector w1 = sigmoid_of(linear(content, adapter.row_weight, Vector(mp.rows(), 0.0)));
  const Vector w2 = sigmoid_of(linear(content, adapter.col_weight, Vector(mp.cols(), 0.0)));
  DynamicFilter out{Matrix(mp.rows(), mp.cols()), cur.origin_stage};
  for (std::size_t r = 0; r < mp.rows(); ++r) {
    for (std::size_t c = 0; c < mp.cols(); ++c) {
      // std::lerp stays inside [min, max] of its endpoints; the expanded form can round one ulp out.
      out.kernel(r, c) = std::lerp(mc(r, c), mp(r, c), w1[r] * w2[c]);
    }
  }
  return out;
}

// ---------------------------------------------------------------- static mixing

StaticMixParams StaticMixParams::identity(int points, int group_channels) {
  const int k = spatial_group_size(points);
  if (points % k != 0) {
    throw InvalidArgument("static mixing: " + std::to_string(points) +
                          " points not divisible by K = " + std::to_string(k));
  }
  const auto dc = static_cast<std::size_t>(group_channels);
  const auto within = static_cast<std::size_t>(points / k) * dc;
  const auto across = static_cast<std::size_t>(k) * dc;
  return {k, Matrix(within, within), Matrix(across, across), Matrix::identity(dc), Vector(dc, 0.0)};
}

namespace {

struct StaticShape {
  std::size_t points, channels, k, per_group;
};

StaticShape static_shape(const Matrix& x, const StaticMixParams& p) {
  if (p.spatial_groups < 1) throw InvalidArgument("static mixing: K must be positive");
  const auto k = static_cast<std::size_t>(p.spatial_groups);
  if (x.rows() % k != 0) {
    throw InvalidArgument("static mixing: " + std::to_string(x.rows()) +
                          " points not divisible by K = " + std::to_string(k));
  }
  const StaticShape s{x.rows(), x.cols(), k, x.rows() / k};
  if (p.within.rows() != s.per_group * s.channels || p.within.cols() != p.within.rows() ||
      p.across.rows() != s.k * s.channels || p.across.cols() != p.across.rows() ||
      p.channel.rows() != s.channels || p.channel.cols() != s.channels ||
      p.channel_bias.size() != s.channels) {
    throw DimensionError("static mixing: features " + x.shape_string() + " with within " +
                         p.within.shape_string() + ", across " + p.across.shape_string() +
                         ", channel " + p.channel.shape_string());
  }
  return s;
}

// T = X + within(X) + across(X)
Matrix static_pre_channel(const Matrix& x, const StaticMixParams& p, const StaticShape& s) {
  Matrix t = x;
  Vector buf;
  for (std::size_t g = 0; g < s.k; ++g) {
    buf.assign(x.flat().begin() + static_cast<long>(g * s.per_group * s.channels),
               x.flat().begin() + static_cast<long>((g + 1) * s.per_group * s.channels));
    const Vector y = linear(buf, p.within, Vector(buf.size(), 0.0));
    for (std::size_t i = 0; i < y.size(); ++i) t.flat()[g * s.per_group * s.channels + i] += y[i];
  }
  buf.resize(s.k * s.channels);
  for (std::size_t m = 0; m < s.per_group; ++m) {
    for (std::size_t g = 0; g < s.k; ++g)
      for (std::size_t c = 0; c < s.channels; ++c) buf[g * s.channels + c] = x(g * s.per_group + m, c);
    const Vector y = linear(buf, p.across, Vector(buf.size(), 0.0));
    for (std::size_t g = 0; g < s.k; ++g)
      for (std::size_t c = 0; c < s.channels; ++c) t(g * s.per_group + m, c) += y[g * s.channels + c];
  }
  return t;
}

}  // namespace

Matrix static_group_mix(const Matrix& features, const StaticMixParams& params) {
  const auto s = static_shape(features, params);
  Matrix out = matmul_nt(static_pre_channel(features, params, s), params.channel);
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += params.channel_bias[c];
  return out;
}

StaticMixGrad static_group_mix_backward(const Matrix& features, const StaticMixParams& params,
                                        const Matrix& grad_out) {
  const auto s = static_shape(features, params);
  if (grad_out.rows() != s.points || grad_out.cols() != s.channels) {
    throw DimensionError("static mixing backward: gradient " + grad_out.shape_string() +
                         " vs features " + features.shape_string());
  }
  const Matrix t = static_pre_channel(features, params, s);
  StaticMixGrad g;
  g.params.spatial_groups = params.spatial_groups;
  g.params.channel = matmul_tn(grad_out, t);
  g.params.channel_bias.assign(s.channels, 0.0);
  for (std::size_t r = 0; r < s.points; ++r)
    for (std::size_t c = 0; c < s.channels; ++c) g.params.channel_bias[c] += grad_out(r, c);
  const Matrix dt = matmul(grad_out, params.channel);

  g.input = dt;
  g.params.within = Matrix(params.within.rows(), params.within.cols());
  g.params.across = Matrix(params.across.rows(), params.across.cols());
  Vector in, dy;
  for (std::size_t grp = 0; grp < s.k; ++grp) {
    const auto off = static_cast<long>(grp * s.per_group * s.channels);
    const auto len = static_cast<long>(s.per_group * s.channels);
    in.assign(features.flat().begin() + off, features.flat().begin() + off + len);
    dy.assign(dt.flat().begin() + off, dt.flat().begin() + off + len);
    const auto lg = linear_backward(in, params.within, dy);
    add_inplace(g.params.within, lg.weight);
    for (long i = 0; i < len; ++i) g.input.flat()[static_cast<std::size_t>(off + i)] += lg.input[static_cast<std::size_t>(i)];
  }
  in.resize(s.k * s.channels);
  dy.resize(s.k * s.channels);
  for (std::size_t m = 0; m < s.per_group; ++m) {
    for (std::size_t grp = 0; grp < s.k; ++grp) {
      for (std::size_t c = 0; c < s.channels; ++c) {
        in[grp * s.channels + c] = features(grp * s.per_group + m, c);
        dy[grp * s.channels + c] = dt(grp * s.per_group + m, c);
      }
    }
    const auto lg = linear_backward(in, params.across, dy);
    add_inplace(g.params.across, lg.weight);
    for (std::size_t grp = 0; grp < s.k; ++grp)
      for (std::size_t c = 0; c < s.channels; ++c)
        g.input(grp * s.per_group + m, c) += lg.input[grp * s.channels + c];
  }
  return g;
}

// ---------------------------------------------------------------- normalization

NormParams NormParams::identity(std::size_t n) { return {Vector(n, 1.0), Vector(n, 0.0)}; }

Matrix norm_relu(const Matrix& x, const NormParams& norm) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const Vector y = layer_norm(x.row(r), norm.gain, norm.shift);
    auto o = out.row(r);
    for (std::size_t c = 0; c < y.size(); ++c) o[c] = relu(y[c]);
  }
  return out;
}

// ---------------------------------------------------------------- cascade mixing

namespace {

std::span<const double> group_slice(std::span<const double> content, std::size_t group,
                                    std::size_t width) {
  if ((group + 1) * width > content.size()) {
    throw DimensionError("content vector of length " + std::to_string(content.size()) +
                         " has no slice for group " + std::to_string(group) + " of width " +
                         std::to_string(width));
  }
  return content.subspan(group * width, width);
}

void check_cascade(const SampledFeatures& features, const FilterBank& bank, const FilterSet& current,
                   const CascadeParams& params) {
  const int reused = params.reused();
  if (static_cast<int>(params.adapters.size()) != reused ||
      static_cast<int>(params.norms.size()) != reused + 1) {
    throw DimensionError("cascade_channel_mix: " + std::to_string(params.statics.size()) +
                         " static layers, " + std::to_string(params.adapters.size()) +
                         " adapter sets, " + std::to_string(params.norms.size()) + " norms");
  }
  if (static_cast<int>(bank.channel.size()) < reused) {
    throw InvalidArgument("cascade_channel_mix: bank holds " + std::to_string(bank.channel.size()) +
                          " channel filters, " + std::to_string(reused) + " requested");
  }
  if (current.kernels.size() != features.size()) {
    throw DimensionError("cascade_channel_mix: " + std::to_string(features.size()) +
                         " feature groups vs " + std::to_string(current.kernels.size()) + " filters");
  }
}

}  // namespace

SampledFeatures cascade_channel_mix(const SampledFeatures& features, const FilterBank& bank,
                                    const FilterSet& current, std::span<const double> content,
                                    const CascadeParams& params) {
  check_cascade(features, bank, current, params);
  const int reused = params.reused();
  const std::size_t first = bank.channel.size() - static_cast<std::size_t>(reused);
  SampledFeatures out;
  out.reserve(features.size());
  for (std::size_t g = 0; g < features.size(); ++g) {
    const Matrix& cur = current.kernels[g];
    Matrix y = norm_relu(matmul(features[g], cur), params.norms[0]);
    for (int k = 0; k < reused; ++k) {
      const auto ks = static_cast<std::size_t>(k);
      const Matrix u = static_group_mix(y, params.statics[ks]);
      const auto& prev = bank.channel[first + ks].kernels.at(g);
      const Matrix m = adapt_filter({prev, 0}, {cur, 0}, group_slice(content, g, cur.rows()),
                                    params.adapters[ks].at(g))
                           .kernel;
      y = norm_relu(matmul(u, m), params.norms[ks + 1]);
    }
    out.push_back(std::move(y));
  }
  return out;
}

// ---------------------------------------------------------------- spatial filters

FilterSet build_spatial_filter(const FilterBank& bank, const FilterSet& current,
                               std::span<const double> content,
                               const std::vector<std::vector<Adapter>>& adapters, int reused,
                               int points_in, int out_points) {
  if (reused < 0) throw InvalidArgument("build_spatial_filter: negative reuse count");
  if (reused * points_in > out_points) {
    throw InvalidArgument("build_spatial_filter: " + std::to_string(reused) + " x " +
                          std::to_string(points_in) + " reused rows exceed " +
                          std::to_string(out_points) + " output points");
  }
  if (static_cast<int>(bank.spatial.size()) < reused) {
    throw InvalidArgument("build_spatial_filter: bank holds " + std::to_string(bank.spatial.size()) +
                          " spatial filters, " + std::to_string(reused) + " requested");
  }
  if (static_cast<int>(adapters.size()) < reused) {
    throw DimensionError("build_spatial_filter: " + std::to_string(adapters.size()) +
                         " adapter sets for " + std::to_string(reused) + " reused filters");
  }
  const auto p = static_cast<std::size_t>(points_in);
  const std::size_t first = bank.spatial.size() - static_cast<std::size_t>(reused);
  FilterSet out{current.origin_stage, {}};
  for (std::size_t g = 0; g < current.kernels.size(); ++g) {
    const Matrix& cur = current.kernels[g];
    if (cur.cols() != p || cur.rows() + static_cast<std::size_t>(reused) * p !=
                               static_cast<std::size_t>(out_points)) {
      throw DimensionError("build_spatial_filter: current filter " + cur.shape_string() + " with " +
                           std::to_string(reused) + " reused filters does not give " +
                           std::to_string(out_points) + "x" + std::to_string(points_in));
    }
    Matrix cur_top(p, p);
    for (std::size_t r = 0; r < std::min(p, cur.rows()); ++r)
      std::copy(cur.row(r).begin(), cur.row(r).end(), cur_top.row(r).begin());

    Matrix kernel(static_cast<std::size_t>(out_points), p);
    std::size_t row = 0;
    for (int k = 0; k < reused; ++k) {
      const Matrix& stored = bank.spatial[first + static_cast<std::size_t>(k)].kernels.at(g);
      if (stored.cols() != p || stored.rows() < p) {
        throw DimensionError("build_spatial_filter: stored filter " + stored.shape_string() +
                             " cannot supply " + std::to_string(p) + "x" + std::to_string(p) + " rows");
      }
      Matrix slice(p, p);
      for (std::size_t r = 0; r < p; ++r)
        std::copy(stored.row(r).begin(), stored.row(r).end(), slice.row(r).begin());
      const auto& adapter = adapters[static_cast<std::size_t>(k)].at(g);
      const Matrix adapted =
          adapt_filter({slice, 0}, {cur_top, 0},
                       group_slice(content, g, adapter.row_weight.cols()), adapter)
              .kernel;
      for (std::size_t r = 0; r < p; ++r, ++row)
        std::copy(adapted.row(r).begin(), adapted.row(r).end(), kernel.row(row).begin());
    }
    for (std::size_t r = 0; r < cur.rows(); ++r, ++row)
      std::copy(cur.row(r).begin(), cur.row(r).end(), kernel.row(row).begin());
    out.kernels.push_back(std::move(kernel));
  }
  return out;
}

// ---------------------------------------------------------------- sampling

Pyramid make_random_pyramid(ImageSize image, std::size_t channels, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  Pyramid pyramid;
  for (double stride : {4.0, 8.0, 16.0, 32.0}) {
    const auto h = static_cast<std::size_t>(std::max(1.0, std::ceil(image.height / stride)));
    const auto w = static_cast<std::size_t>(std::max(1.0, std::ceil(image.width / stride)));
    PyramidLevel level{FeatureGrid(h, w, channels), stride, std::log2(stride)};
    for (double& v : level.grid.flat()) v = dist(rng);
    pyramid.push_back(std::move(level));
  }
  return pyramid;
}

namespace {

struct LevelBlend {
  std::size_t lo = 0;
  std::size_t hi = 0;
  double t = 0.0;        // weight of hi
  double dt_dz = 0.0;    // zero when clamped
};

LevelBlend blend_for(const Pyramid& pyramid, double z) {
  if (pyramid.empty()) throw InvalidArgument("sampling: empty pyramid");
  const std::size_t last = pyramid.size() - 1;
  if (z <= pyramid.front().scale) return {0, 0, 0.0, 0.0};
  if (z >= pyramid.back().scale) return {last, last, 0.0, 0.0};
  std::size_t l = 0;
  while (l + 1 < last && z >= pyramid[l + 1].scale) ++l;
  const double span = pyramid[l + 1].scale - pyramid[l].scale;
  return {l, l + 1, (z - pyramid[l].scale) / span, 1.0 / span};
}

struct PyramidSample {
  Vector value;
  Vector d_dx;
  Vector d_dy;
  Vector d_dz;
};

PyramidSample sample_pyramid_with_grad(const Pyramid& pyramid, double x, double y, double z,
                                       std::size_t channel_begin, std::size_t count) {
  const auto blend = blend_for(pyramid, z);
  const auto at_level = [&](std::size_t l) {
    const auto& level = pyramid[l];
    auto s = bilinear_sample_with_grad(level.grid, x / level.stride - 0.5, y / level.stride - 0.5,
                                       channel_begin, count);
    for (auto& v : s.d_dx) v /= level.stride;
    for (auto& v : s.d_dy) v /= level.stride;
    return s;
  };
  const auto lo = at_level(blend.lo);
  PyramidSample out{lo.value, lo.d_dx, lo.d_dy, Vector(count, 0.0)};
  if (blend.hi != blend.lo) {
    const auto hi = at_level(blend.hi);
    for (std::size_t c = 0; c < count; ++c) {
      out.value[c] = (1.0 - blend.t) * lo.value[c] + blend.t * hi.value[c];
      out.d_dx[c] = (1.0 - blend.t) * lo.d_dx[c] + blend.t * hi.d_dx[c];
      out.d_dy[c] = (1.0 - blend.t) * lo.d_dy[c] + blend.t * hi.d_dy[c];
      out.d_dz[c] = (hi.value[c] - lo.value[c]) * blend.dt_dz;
    }
  }
  return out;
}

void check_sampler(const SamplerParams& p, std::size_t content_dim) {
  if (p.spatial_groups < 1 || p.points % p.spatial_groups != 0) {
    throw InvalidArgument("sampler: " + std::to_string(p.points) +
                          " points not divisible by K = " + std::to_string(p.spatial_groups));
  }
  const auto g = static_cast<std::size_t>(p.groups);
  const auto k = static_cast<std::size_t>(p.spatial_groups);
  const auto m = static_cast<std::size_t>(p.points / p.spatial_groups);
  if (p.group_weight.rows() != g * k * 3 || p.group_weight.cols() != content_dim ||
      p.point_weight.rows() != g * m * 3 || p.point_weight.cols() != content_dim) {
    throw DimensionError("sampler: weights " + p.group_weight.shape_string() + " and " +
                         p.point_weight.shape_string() + " for content of length " +
                         std::to_string(content_dim));
  }
}

struct SamplerOffsets {
  Vector group;  // [(g*K + k)*3 + c]
  Vector point;  // [(g*M + m)*3 + c]
};

SamplerOffsets sampler_offsets(std::span<const double> content, const SamplerParams& p) {
  return {linear(content, p.group_weight, p.group_bias), linear(content, p.point_weight, p.point_bias)};
}

}  // namespace

Vector sample_pyramid(const Pyramid& pyramid, double x, double y, double z,
                      std::size_t channel_begin, std::size_t count) {
  return sample_pyramid_with_grad(pyramid, x, y, z, channel_begin, count).value;
}

SamplerParams SamplerParams::zeros(int groups, int points, int content_dim) {
  const int k = spatial_group_size(points);
  const auto d = static_cast<std::size_t>(content_dim);
  const auto gk = static_cast<std::size_t>(groups * k * 3);
  const auto gm = static_cast<std::size_t>(groups * (points / k) * 3);
  return {groups, points, k, Matrix(gk, d), Vector(gk, 0.0), Matrix(gm, d), Vector(gm, 0.0)};
}

SampleResult sample_points(std::span<const double> content, const BoxXYZR& box,
                           const SamplerParams& params, const Pyramid& pyramid,
                           std::size_t group_channels) {
  check_sampler(params, content.size());
  const auto off = sampler_offsets(content, params);
  const auto groups = static_cast<std::size_t>(params.groups);
  const auto k = static_cast<std::size_t>(params.spatial_groups);
  const auto m = static_cast<std::size_t>(params.points) / k;
  const double scale = std::exp2(box.z - 0.5 * box.r);

  SampleResult out;
  for (std::size_t g = 0; g < groups; ++g) {
    Matrix feats(k * m, group_channels);
    std::vector<SamplingPoint> pts;
    pts.reserve(k * m);
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double* p1 = &off.group[(g * k + kk) * 3];
      const double e1 = std::exp2(p1[2]);
      for (std::size_t mm = 0; mm < m; ++mm) {
        const double* p2 = &off.point[(g * m + mm) * 3];
        const SamplingPoint pt{box.x + scale * (p1[0] + e1 * p2[0]),
                               box.y + scale * (p1[1] + e1 * p2[1]), box.z + p1[2] + p2[2]};
        const Vector v = sample_pyramid(pyramid, pt.x, pt.y, pt.z, g * group_channels, group_channels);
        std::copy(v.begin(), v.end(), feats.row(kk * m + mm).begin());
        pts.push_back(pt);
      }
    }
    out.features.push_back(std::move(feats));
    out.points.push_back(std::move(pts));
  }
  return out;
}

SamplerGrad sample_points_backward(std::span<const double> content, const BoxXYZR& box,
                                   const SamplerParams& params, const Pyramid& pyramid,
                                   std::size_t group_channels, const SampledFeatures& grad_out) {
  check_sampler(params, content.size());
  const auto off = sampler_offsets(content, params);
  const auto groups = static_cast<std::size_t>(params.groups);
  const auto k = static_cast<std::size_t>(params.spatial_groups);
  const auto m = static_cast<std::size_t>(params.points) / k;
  if (grad_out.size() != groups) {
    throw DimensionError("sampler backward: " + std::to_string(grad_out.size()) +
                         " gradient groups vs " + std::to_string(groups));
  }
  const double scale = std::exp2(box.z - 0.5 * box.r);
  constexpr double ln2 = 0.69314718055994530942;

  Vector d_group(off.group.size(), 0.0);
  Vector d_point(off.point.size(), 0.0);
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double* p1 = &off.group[(g * k + kk) * 3];
      const double e1 = std::exp2(p1[2]);
      for (std::size_t mm = 0; mm < m; ++mm) {
        const double* p2 = &off.point[(g * m + mm) * 3];
        const double px = box.x + scale * (p1[0] + e1 * p2[0]);
        const double py = box.y + scale * (p1[1] + e1 * p2[1]);
        const double pz = box.z + p1[2] + p2[2];
        const auto s = sample_pyramid_with_grad(pyramid, px, py, pz, g * group_channels, group_channels);
        const auto upstream = grad_out[g].row(kk * m + mm);
        double gx = 0.0, gy = 0.0, gz = 0.0;
        for (std::size_t c = 0; c < group_channels; ++c) {
          gx += upstream[c] * s.d_dx[c];
          gy += upstream[c] * s.d_dy[c];
          gz += upstream[c] * s.d_dz[c];
        }
        double* dg = &d_group[(g * k + kk) * 3];
        double* dp = &d_point[(g * m + mm) * 3];
        dg[0] += gx * scale;
        dg[1] += gy * scale;
        dg[2] += gz + (gx * p2[0] + gy * p2[1]) * scale * e1 * ln2;
        dp[0] += gx * scale * e1;
        dp[1] += gy * scale * e1;
        dp[2] += gz;
      }
    }
  }
  const auto lg = linear_backward(content, params.group_weight, d_group);
  const auto lp = linear_backward(content, params.point_weight, d_point);
  SamplerGrad out{lg.input, lg.weight, lg.bias, lp.weight, lp.bias};
  add_inplace(out.content, lp.input);
  return out;
}

// ---------------------------------------------------------------- initialization

namespace {

void fill_uniform(std::span<double> xs, double half_width, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-half_width, half_width);
  for (double& x : xs) x = dist(rng);
}

void add_uniform(std::span<double> xs, double half_width, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-half_width, half_width);
  for (double& x : xs) x += dist(rng);
}

}  // namespace

DecoderParams init_parameters(const DecoderConfig& config, std::uint64_t seed, InitMode mode) {
  config.validate();
  std::mt19937_64 rng(seed);
  const auto d = static_cast<std::size_t>(config.content_dim);
  const auto dc = static_cast<std::size_t>(config.group_channels);
  const auto groups = static_cast<std::size_t>(config.groups);
  const auto classes = static_cast<std::size_t>(config.num_classes);
  const bool random = mode == InitMode::Random;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  constexpr double dxy2_half = 0.5 / 1.4142135623730951;

  DecoderParams params{config, {}};
  for (int i = 1; i <= config.num_stages; ++i) {
    StageParams sp;
    sp.stage = i;
    const int points = config.points_at(i);
    const auto p = static_cast<std::size_t>(points);
    const auto p_out = static_cast<std::size_t>(config.out_points_at(i));

    sp.sampler = SamplerParams::zeros(config.groups, points, config.content_dim);
    const auto k = static_cast<std::size_t>(sp.sampler.spatial_groups);
    const auto m = p / k;
    for (std::size_t g = 0; g < groups * k; ++g) {
      std::uniform_real_distribution<double> dist(-0.5, 0.5);
      sp.sampler.group_bias[g * 3 + 0] = dist(rng);
      sp.sampler.group_bias[g * 3 + 1] = dist(rng);
    }
    for (std::size_t g = 0; g < groups * m; ++g) {
      std::uniform_real_distribution<double> dist(-dxy2_half, dxy2_half);
      sp.sampler.point_bias[g * 3 + 0] = dist(rng);
      sp.sampler.point_bias[g * 3 + 1] = dist(rng);
    }

    const auto cur_rows = static_cast<std::size_t>(config.current_spatial_rows_at(i));
    for (std::size_t g = 0; g < groups; ++g) {
      auto ch = FilterGenerator::zeros(dc, dc, d);
      for (std::size_t r = 0; r < dc; ++r) ch.bias[r * dc + r] = 1.0;
      sp.channel_generators.push_back(std::move(ch));
      auto sg = FilterGenerator::zeros(cur_rows, p, d);
      fill_uniform(sg.bias, 1.0 / std::sqrt(static_cast<double>(p)), rng);
      sp.spatial_generators.push_back(std::move(sg));
    }

    const int reused = config.reused_channel_at(i);
    for (int r = 0; r < reused; ++r) {
      sp.cascade.adapters.emplace_back(groups, Adapter::zeros(dc, dc, dc));
      sp.cascade.statics.push_back(StaticMixParams::identity(points, config.group_channels));
    }
    sp.cascade.norms.assign(static_cast<std::size_t>(reused + 1), NormParams::identity(dc));

    for (int r = 0; r < config.reused_spatial_at(i); ++r) {
      sp.spatial_adapters.emplace_back(groups, Adapter::zeros(p, p, dc));
    }
    sp.spatial_norm = NormParams::identity(dc);

    const std::size_t flat = groups * p_out * dc;
    sp.output_weight = Matrix(d, flat);
    fill_uniform(sp.output_weight.flat(), 1.0 / std::sqrt(static_cast<double>(flat)), rng);
    sp.output_bias.assign(d, 0.0);
    sp.content_norm = NormParams::identity(d);
    sp.class_weight = Matrix(classes, d);
    fill_uniform(sp.class_weight.flat(), inv_sqrt_d, rng);
    sp.class_bias.assign(classes, -2.0);
    sp.box_weight = Matrix(4, d);
    fill_uniform(sp.box_weight.flat(), 0.1 * inv_sqrt_d, rng);
    sp.box_bias.assign(4, 0.0);

    if (random) {
      add_uniform(sp.sampler.group_weight.flat(), 0.5 * inv_sqrt_d, rng);
      add_uniform(sp.sampler.point_weight.flat(), 0.5 * inv_sqrt_d, rng);
      for (auto& gen : sp.channel_generators) add_uniform(gen.weight.flat(), inv_sqrt_d / static_cast<double>(dc), rng);
      for (auto& gen : sp.spatial_generators) add_uniform(gen.weight.flat(), inv_sqrt_d / static_cast<double>(p), rng);
      const double inv_sqrt_dc = 1.0 / std::sqrt(static_cast<double>(dc));
      for (auto& set : sp.cascade.adapters) {
        for (auto& a : set) {
          add_uniform(a.row_weight.flat(), inv_sqrt_dc, rng);
          add_uniform(a.col_weight.flat(), inv_sqrt_dc, rng);
        }
      }
      for (auto& st : sp.cascade.statics) {
        add_uniform(st.within.flat(), 0.5 / std::sqrt(static_cast<double>(st.within.cols())), rng);
        add_uniform(st.across.flat(), 0.5 / std::sqrt(static_cast<double>(st.across.cols())), rng);
        add_uniform(st.channel.flat(), 0.5 * inv_sqrt_dc, rng);
      }
      for (auto& set : sp.spatial_adapters) {
        for (auto& a : set) {
          add_uniform(a.row_weight.flat(), inv_sqrt_dc, rng);
          add_uniform(a.col_weight.flat(), inv_sqrt_dc, rng);
        }
      }
    }
    params.stages.push_back(std::move(sp));
  }
  return params;
}

// ---------------------------------------------------------------- forward pass

QueryState decoder_stage_forward(const DecoderParams& params, int stage, const QueryState& query,
                                 const Pyramid& pyramid, FilterBank& bank, ImageSize image,
                                 Prediction& prediction) {
  const auto& cfg = params.config;
  check_stage(cfg, stage);
  const auto& sp = params.stages.at(static_cast<std::size_t>(stage - 1));
  const auto groups = static_cast<std::size_t>(cfg.groups);
  const auto dc = static_cast<std::size_t>(cfg.group_channels);
  const std::span<const double> v = query.content;

  const auto sampled = sample_points(v, query.box, sp.sampler, pyramid, dc);

  FilterSet channel{stage, {}};
  FilterSet spatial_current{stage, {}};
  for (std::size_t g = 0; g < groups; ++g) {
    channel.kernels.push_back(generate_channel_filter(v, sp.channel_generators[g], stage).kernel);
    spatial_current.kernels.push_back(generate_channel_filter(v, sp.spatial_generators[g], stage).kernel);
  }
  const auto mixed = cascade_channel_mix(sampled.features, bank, channel, v, sp.cascade);
  auto spatial = build_spatial_filter(bank, spatial_current, v, sp.spatial_adapters,
                                      cfg.reused_spatial_at(stage), cfg.points_at(stage),
                                      cfg.out_points_at(stage));

  Vector flat;
  flat.reserve(groups * static_cast<std::size_t>(cfg.out_points_at(stage)) * dc);
  for (std::size_t g = 0; g < groups; ++g) {
    const Matrix z = norm_relu(matmul(spatial.kernels[g], mixed[g]), sp.spatial_norm);
    flat.insert(flat.end(), z.flat().begin(), z.flat().end());
  }
  bank.channel.push_back(std::move(channel));
  bank.spatial.push_back(std::move(spatial));

  Vector update = linear(flat, sp.output_weight, sp.output_bias);
  add_inplace(update, v);
  QueryState next{layer_norm(update, sp.content_norm.gain, sp.content_norm.shift), query.box};

  const Vector logits = linear(next.content, sp.class_weight, sp.class_bias);
  const Vector delta = linear(next.content, sp.box_weight, sp.box_bias);
  const double w = std::exp2(query.box.z - 0.5 * query.box.r);
  const double h = std::exp2(query.box.z + 0.5 * query.box.r);
  const double max_z = std::log2(std::max(image.width, image.height));
  next.box.x = std::clamp(query.box.x + delta[0] * w, 0.0, image.width);
  next.box.y = std::clamp(query.box.y + delta[1] * h, 0.0, image.height);
  next.box.z = std::clamp(query.box.z + delta[2], 1.0, max_z);
  next.box.r = std::clamp(query.box.r + delta[3], -3.0, 3.0);

  auto box = xyzr_to_xyxy(next.box);
  box.x1 = std::clamp(box.x1, 0.0, image.width);
  box.x2 = std::clamp(box.x2, 0.0, image.width);
  box.y1 = std::clamp(box.y1, 0.0, image.height);
  box.y2 = std::clamp(box.y2, 0.0, image.height);
  prediction.stage = stage;
  prediction.box = box;
  prediction.class_scores.resize(logits.size());
  std::transform(logits.begin(), logits.end(), prediction.class_scores.begin(), sigmoid);
  return next;
}

DecoderRun run_decoder(const DecoderParams& params, std::span<const QueryState> queries,
                       const Pyramid& pyramid, ImageSize image) {
  const auto& cfg = params.config;
  cfg.validate();
  if (static_cast<int>(queries.size()) != cfg.num_queries) {
    throw DimensionError("run_decoder: " + std::to_string(queries.size()) + " queries, config expects " +
                         std::to_string(cfg.num_queries));
  }
  DecoderRun run{PredictionTable(cfg.num_stages, cfg.num_queries, cfg.num_classes),
                 std::vector<FilterBank>(queries.size()),
                 std::vector<QueryState>(queries.begin(), queries.end())};
  for (int stage = 1; stage <= cfg.num_stages; ++stage) {
    for (std::size_t q = 0; q < queries.size(); ++q) {
      Prediction pred;
      pred.query_index = static_cast<int>(q);
      run.final_queries[q] =
          decoder_stage_forward(params, stage, run.final_queries[q], pyramid, run.banks[q], image, pred);
      run.predictions.set(std::move(pred));
    }
  }
  return run;
}

// ---------------------------------------------------------------- accounting

FlopsReport flops_report(const DecoderConfig& config, int points_in, int batch) {
  const double bng = static_cast<double>(batch) * config.num_queries * config.groups;
  const double dc = config.group_channels;
  const double d = config.content_dim;
  FlopsReport r;
  r.mixing = bng * points_in * (2.0 * dc - 1.0) * dc;
  r.generation = bng * (2.0 * d - 1.0) * dc * dc;
  r.ratio = r.generation / r.mixing;
  return r;
}

std::int64_t adapter_param_count(const DecoderConfig& config) {
  const std::int64_t dc = config.group_channels;
  return 2 * dc * dc;
}

std::int64_t generator_param_count(const DecoderConfig& config) {
  const std::int64_t dc = config.group_channels;
  return (static_cast<std::int64_t>(config.content_dim) + 1) * dc * dc;
}

std::int64_t static_mix_param_count(int points, int group_channels) {
  const std::int64_t k = spatial_group_size(points);
  const std::int64_t per = points / k;
  const std::int64_t dc = group_channels;
  return (k * k + per * per) * dc * dc;
}

}  // namespace xstage
