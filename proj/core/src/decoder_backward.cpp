#include <algorithm>
#include <string>

#include "xstage/decoder.hpp"
#include "xstage/error.hpp"

namespace xstage {

namespace {

Matrix zeros_like(const Matrix& m) { return Matrix(m.rows(), m.cols()); }

StaticMixParams zeros_like(const StaticMixParams& p) {
  return {p.spatial_groups, zeros_like(p.within), zeros_like(p.across), zeros_like(p.channel),
          Vector(p.channel_bias.size(), 0.0)};
}

Vector gate(std::span<const double> content, const Matrix& weight) {
  Vector w = linear(content, weight, Vector(weight.rows(), 0.0));
  for (double& x : w) x = sigmoid(x);
  return w;
}

// Backward of row-wise layer norm + relu; accumulates the norm parameter gradients.
Matrix norm_relu_backward(const Matrix& x, const NormParams& norm, const Matrix& grad_out,
                          NormParams& grad_norm) {
  Matrix dx(x.rows(), x.cols());
  Vector dz(x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const Vector z = layer_norm(x.row(r), norm.gain, norm.shift);
    const auto up = grad_out.row(r);
    for (std::size_t c = 0; c < z.size(); ++c) dz[c] = z[c] > 0.0 ? up[c] : 0.0;
    const auto lg = layer_norm_backward(x.row(r), norm.gain, dz);
    add_inplace(grad_norm.gain, lg.gain);
    add_inplace(grad_norm.shift, lg.shift);
    std::copy(lg.input.begin(), lg.input.end(), dx.row(r).begin());
  }
  return dx;
}

}  // namespace

FilterGeneratorGrad generate_filter_backward(std::span<const double> content,
                                             const FilterGenerator& gen, const Matrix& grad_kernel) {
  if (grad_kernel.rows() != gen.rows || grad_kernel.cols() != gen.cols) {
    throw DimensionError("generate_filter_backward: gradient " + grad_kernel.shape_string() +
                         " for " + std::to_string(gen.rows) + "x" + std::to_string(gen.cols) +
                         " kernels");
  }
  auto lg = linear_backward(content, gen.weight, grad_kernel.flat());
  return {std::move(lg.input), std::move(lg.weight), std::move(lg.bias)};
}

AdapterGrad adapt_filter_backward(const Matrix& prev, const Matrix& cur,
                                  std::span<const double> content, const Adapter& adapter,
                                  const Matrix& grad_out) {
  if (prev.rows() != cur.rows() || prev.cols() != cur.cols() || grad_out.rows() != prev.rows() ||
      grad_out.cols() != prev.cols()) {
    throw DimensionError("adapt_filter_backward: filters " + prev.shape_string() + ", " +
                         cur.shape_string() + ", gradient " + grad_out.shape_string());
  }
  const Vector w1 = gate(content, adapter.row_weight);
  const Vector w2 = gate(content, adapter.col_weight);
  AdapterGrad g{zeros_like(prev), zeros_like(cur), {}, {}, {}};
  Vector d1(w1.size(), 0.0), d2(w2.size(), 0.0);
  for (std::size_t r = 0; r < prev.rows(); ++r) {
    for (std::size_t c = 0; c < prev.cols(); ++c) {
      const double gt = w1[r] * w2[c];
      const double up = grad_out(r, c);
      g.prev(r, c) = up * gt;
      g.cur(r, c) = up * (1.0 - gt);
      const double dgate = up * (prev(r, c) - cur(r, c));
      d1[r] += dgate * w2[c];
      d2[c] += dgate * w1[r];
    }
  }
  for (std::size_t r = 0; r < d1.size(); ++r) d1[r] *= w1[r] * (1.0 - w1[r]);
  for (std::size_t c = 0; c < d2.size(); ++c) d2[c] *= w2[c] * (1.0 - w2[c]);
  auto l1 = linear_backward(content, adapter.row_weight, d1);
  auto l2 = linear_backward(content, adapter.col_weight, d2);
  g.content = std::move(l1.input);
  add_inplace(g.content, l2.input);
  g.row_weight = std::move(l1.weight);
  g.col_weight = std::move(l2.weight);
  return g;
}

CascadeGrad cascade_channel_mix_backward(const SampledFeatures& features, const FilterBank& bank,
                                         const FilterSet& current, std::span<const double> content,
                                         const CascadeParams& params,
                                         const SampledFeatures& grad_out) {
  const int reused = params.reused();
  if (static_cast<int>(params.adapters.size()) != reused ||
      static_cast<int>(params.norms.size()) != reused + 1 ||
      static_cast<int>(bank.channel.size()) < reused || current.kernels.size() != features.size() ||
      grad_out.size() != features.size()) {
    throw DimensionError("cascade_channel_mix_backward: inconsistent cascade, bank or gradient sizes");
  }
  const auto r = static_cast<std::size_t>(reused);
  const std::size_t first = bank.channel.size() - r;

  CascadeGrad g;
  g.content.assign(content.size(), 0.0);
  g.bank.assign(r, {});
  for (const auto& n : params.norms) {
    g.params.norms.push_back({Vector(n.gain.size(), 0.0), Vector(n.shift.size(), 0.0)});
  }
  for (const auto& s : params.statics) g.params.statics.push_back(zeros_like(s));
  for (const auto& set : params.adapters) {
    std::vector<Adapter> zero;
    for (const auto& a : set) zero.push_back({zeros_like(a.row_weight), zeros_like(a.col_weight)});
    g.params.adapters.push_back(std::move(zero));
  }

  for (std::size_t grp = 0; grp < features.size(); ++grp) {
    const Matrix& cur = current.kernels[grp];
    const std::size_t width = cur.rows();
    if ((grp + 1) * width > content.size()) {
      throw DimensionError("cascade_channel_mix_backward: content too short for group " +
                           std::to_string(grp));
    }
    const auto v = content.subspan(grp * width, width);

    // Replay the forward pass, keeping every intermediate.
    std::vector<Matrix> pre{matmul(features[grp], cur)};
    std::vector<Matrix> post{norm_relu(pre[0], params.norms[0])};
    std::vector<Matrix> mixed_in, kernels;
    for (std::size_t k = 0; k < r; ++k) {
      mixed_in.push_back(static_group_mix(post.back(), params.statics[k]));
      const auto& prev = bank.channel[first + k].kernels.at(grp);
      kernels.push_back(adapt_filter({prev, 0}, {cur, 0}, v, params.adapters[k].at(grp)).kernel);
      pre.push_back(matmul(mixed_in.back(), kernels.back()));
      post.push_back(norm_relu(pre.back(), params.norms[k + 1]));
    }

    Matrix d_cur = zeros_like(cur);
    Matrix dy = grad_out[grp];
    for (std::size_t k = r; k-- > 0;) {
      const Matrix dh = norm_relu_backward(pre[k + 1], params.norms[k + 1], dy, g.params.norms[k + 1]);
      const Matrix du = matmul_nt(dh, kernels[k]);
      const Matrix dm = matmul_tn(mixed_in[k], dh);
      const auto& prev = bank.channel[first + k].kernels.at(grp);
      auto ag = adapt_filter_backward(prev, cur, v, params.adapters[k].at(grp), dm);
      g.bank[k].push_back(std::move(ag.prev));
      add_inplace(d_cur, ag.cur);
      for (std::size_t i = 0; i < width; ++i) g.content[grp * width + i] += ag.content[i];
      add_inplace(g.params.adapters[k][grp].row_weight, ag.row_weight);
      add_inplace(g.params.adapters[k][grp].col_weight, ag.col_weight);
      auto sg = static_group_mix_backward(post[k], params.statics[k], du);
      auto& acc = g.params.statics[k];
      add_inplace(acc.within, sg.params.within);
      add_inplace(acc.across, sg.params.across);
      add_inplace(acc.channel, sg.params.channel);
      add_inplace(acc.channel_bias, sg.params.channel_bias);
      dy = std::move(sg.input);
    }
    const Matrix dh = norm_relu_backward(pre[0], params.norms[0], dy, g.params.norms[0]);
    g.features.push_back(matmul_nt(dh, cur));
    add_inplace(d_cur, matmul_tn(features[grp], dh));
    g.current.push_back(std::move(d_cur));
  }
  return g;
}

}  // namespace xstage
