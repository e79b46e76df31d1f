#include "xstage/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "xstage/error.hpp"

namespace xstage {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw DimensionError("matrix data length " + std::to_string(data_.size()) +
                         " does not match shape " + std::to_string(rows) + "x" +
                         std::to_string(cols));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

std::string Matrix::shape_string() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + a.shape_string() + " * " + b.shape_string());
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto b_row = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aik * b_row[j];
    }
  }
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul_tn: " + a.shape_string() + "^T * " + b.shape_string());
  }
  Matrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto a_row = a.row(k);
    auto b_row = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a_row[i];
      if (aki == 0.0) continue;
      auto out_row = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aki * b_row[j];
    }
  }
  return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: " + a.shape_string() + " * " + b.shape_string() + "^T");
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto a_row = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto b_row = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a_row[k] * b_row[k];
      out(i, j) = acc;
    }
  }
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

void add_inplace(Matrix& dst, const Matrix& src) {
  if (dst.rows() != src.rows() || dst.cols() != src.cols()) {
    throw DimensionError("add: " + dst.shape_string() + " += " + src.shape_string());
  }
  auto d = dst.flat();
  auto s = src.flat();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

void add_inplace(Vector& dst, std::span<const double> src) {
  if (dst.size() != src.size()) {
    throw DimensionError("add: vector of length " + std::to_string(dst.size()) + " += length " +
                         std::to_string(src.size()));
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

Vector linear(std::span<const double> input, const Matrix& weight, std::span<const double> bias) {
  if (weight.cols() != input.size() || weight.rows() != bias.size()) {
    throw DimensionError("linear: weight " + weight.shape_string() + ", input length " +
                         std::to_string(input.size()) + ", bias length " +
                         std::to_string(bias.size()));
  }
  Vector out(bias.begin(), bias.end());
  for (std::size_t i = 0; i < weight.rows(); ++i) {
    auto w = weight.row(i);
    double acc = 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) acc += w[j] * input[j];
    out[i] += acc;
  }
  return out;
}

LinearGrad linear_backward(std::span<const double> input, const Matrix& weight,
                           std::span<const double> grad_out) {
  if (weight.cols() != input.size() || weight.rows() != grad_out.size()) {
    throw DimensionError("linear_backward: weight " + weight.shape_string() + ", input length " +
                         std::to_string(input.size()) + ", grad length " +
                         std::to_string(grad_out.size()));
  }
  LinearGrad g{Vector(input.size(), 0.0), Matrix(weight.rows(), weight.cols()),
               Vector(grad_out.begin(), grad_out.end())};
  for (std::size_t i = 0; i < weight.rows(); ++i) {
    const double go = grad_out[i];
    if (go == 0.0) continue;
    auto w = weight.row(i);
    auto gw = g.weight.row(i);
    for (std::size_t j = 0; j < w.size(); ++j) {
      g.input[j] += w[j] * go;
      gw[j] = input[j] * go;
    }
  }
  return g;
}

namespace {

struct Moments {
  double mean;
  double inv_std;
};

Moments moments(std::span<const double> x, double epsilon) {
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  return {mean, 1.0 / std::sqrt(var + epsilon)};
}

void check_layer_norm_args(std::size_t n, std::size_t gain, std::size_t shift, double epsilon) {
  if (n == 0) throw InvalidArgument("layer_norm: empty input");
  if (gain != n || shift != n) {
    throw DimensionError("layer_norm: input length " + std::to_string(n) + ", gain length " +
                         std::to_string(gain) + ", shift length " + std::to_string(shift));
  }
  if (!(epsilon > 0.0)) throw InvalidArgument("layer_norm: epsilon must be positive");
}

}  // namespace

Vector layer_norm(std::span<const double> input, std::span<const double> gain,
                  std::span<const double> shift, double epsilon) {
  check_layer_norm_args(input.size(), gain.size(), shift.size(), epsilon);
  const auto m = moments(input, epsilon);
  Vector out(input.size());
  for (std::size_t i = 0; i < input.size(); ++i) {
    out[i] = gain[i] * (input[i] - m.mean) * m.inv_std + shift[i];
  }
  return out;
}

LayerNormGrad layer_norm_backward(std::span<const double> input, std::span<const double> gain,
                                  std::span<const double> grad_out, double epsilon) {
  check_layer_norm_args(input.size(), gain.size(), grad_out.size(), epsilon);
  const std::size_t n = input.size();
  const auto m = moments(input, epsilon);
  LayerNormGrad g{Vector(n), Vector(n), Vector(grad_out.begin(), grad_out.end())};
  Vector xhat(n);
  Vector dxhat(n);
  double mean_dxhat = 0.0;
  double mean_dxhat_xhat = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    xhat[i] = (input[i] - m.mean) * m.inv_std;
    dxhat[i] = grad_out[i] * gain[i];
    g.gain[i] = grad_out[i] * xhat[i];
    mean_dxhat += dxhat[i];
    mean_dxhat_xhat += dxhat[i] * xhat[i];
  }
  mean_dxhat /= static_cast<double>(n);
  mean_dxhat_xhat /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    g.input[i] = m.inv_std * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
  }
  return g;
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double relu(double x) { return x > 0.0 ? x : 0.0; }

FeatureGrid::FeatureGrid(std::size_t height, std::size_t width, std::size_t channels, double fill)
    : height_(height), width_(width), channels_(channels), data_(height * width * channels, fill) {}

Vector bilinear_sample(const FeatureGrid& grid, double x, double y) {
  return bilinear_sample_with_grad(grid, x, y, 0, grid.channels()).value;
}

BilinearSample bilinear_sample_with_grad(const FeatureGrid& grid, double x, double y,
                                         std::size_t channel_begin, std::size_t channel_count) {
  if (channel_begin + channel_count > grid.channels()) {
    throw DimensionError("bilinear_sample: channels [" + std::to_string(channel_begin) + ", " +
                         std::to_string(channel_begin + channel_count) + ") exceed grid depth " +
                         std::to_string(grid.channels()));
  }
  BilinearSample out{Vector(channel_count, 0.0), Vector(channel_count, 0.0),
                     Vector(channel_count, 0.0)};
  const double w = static_cast<double>(grid.width());
  const double h = static_cast<double>(grid.height());
  if (!(x > -1.0 && x < w && y > -1.0 && y < h)) return out;

  const double fx0 = std::floor(x);
  const double fy0 = std::floor(y);
  const double tx = x - fx0;
  const double ty = y - fy0;
  const long x0 = static_cast<long>(fx0);
  const long y0 = static_cast<long>(fy0);

  const auto cell = [&](long cy, long cx) -> const double* {
    if (cx < 0 || cy < 0 || cx >= static_cast<long>(grid.width()) ||
        cy >= static_cast<long>(grid.height())) {
      return nullptr;
    }
    return grid.at(static_cast<std::size_t>(cy), static_cast<std::size_t>(cx)).data() +
           channel_begin;
  };
  const double* f00 = cell(y0, x0);
  const double* f10 = cell(y0, x0 + 1);
  const double* f01 = cell(y0 + 1, x0);
  const double* f11 = cell(y0 + 1, x0 + 1);

  for (std::size_t c = 0; c < channel_count; ++c) {
    const double v00 = f00 ? f00[c] : 0.0;
    const double v10 = f10 ? f10[c] : 0.0;
    const double v01 = f01 ? f01[c] : 0.0;
    const double v11 = f11 ? f11[c] : 0.0;
    out.value[c] = (1 - tx) * (1 - ty) * v00 + tx * (1 - ty) * v10 + (1 - tx) * ty * v01 +
                   tx * ty * v11;
    out.d_dx[c] = (1 - ty) * (v10 - v00) + ty * (v11 - v01);
    out.d_dy[c] = (1 - tx) * (v01 - v00) + tx * (v11 - v10);
  }
  return out;
}

Vector central_difference(const std::string& op, const ScalarFunction& f,
                          std::span<const double> probe, double step, std::size_t cols) {
  if (!(step > 0.0)) throw InvalidArgument("grad_check(" + op + "): step must be positive");
  if (cols == 0) cols = std::max<std::size_t>(probe.size(), 1);
  Vector numeric(probe.size());
  std::vector<double> x(probe.begin(), probe.end());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + step;
    const double fp = f(x);
    x[i] = saved - step;
    const double fm = f(x);
    x[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      std::ostringstream msg;
      msg << "grad_check(" << op << "): non-finite function value at coordinate (" << i / cols
          << ", " << i % cols << ")";
      throw InvalidArgument(msg.str());
    }
    numeric[i] = (fp - fm) / (2.0 * step);
  }
  return numeric;
}

GradCheckReport compare_gradients(std::string op, std::span<const double> analytic,
                                  std::span<const double> numeric, double step, std::size_t cols) {
  if (analytic.size() != numeric.size()) {
    throw DimensionError("grad_check(" + op + "): analytic gradient length " +
                         std::to_string(analytic.size()) + " vs probe length " +
                         std::to_string(numeric.size()));
  }
  if (cols == 0) cols = std::max<std::size_t>(numeric.size(), 1);
  GradCheckReport report{std::move(op), 0.0, {0, 0}, step, 0.0, 0.0};
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    const double denom =
        std::max({std::abs(analytic[i]), std::abs(numeric[i]), kGradCheckDenominatorFloor});
    const double rel = std::abs(analytic[i] - numeric[i]) / denom;
    if (!(rel <= report.max_rel_error)) {
      report.max_rel_error = rel;
      report.worst = {i / cols, i % cols};
      report.worst_analytic = analytic[i];
      report.worst_numeric = numeric[i];
    }
  }
  return report;
}

GradCheckReport grad_check(std::string op, const ScalarFunction& f, std::span<const double> analytic,
                           std::span<const double> probe, double step, std::size_t cols) {
  if (analytic.size() != probe.size()) {
    throw DimensionError("grad_check(" + op + "): analytic gradient length " +
                         std::to_string(analytic.size()) + " vs probe length " +
                         std::to_string(probe.size()));
  }
  const Vector numeric = central_difference(op, f, probe, step, cols);
  return compare_gradients(std::move(op), analytic, numeric, step, cols);
}

}  // namespace xstage
