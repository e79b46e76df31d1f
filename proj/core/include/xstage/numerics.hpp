#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace xstage {

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> flat() noexcept { return data_; }
  std::span<const double> flat() const noexcept { return data_; }

  bool all_finite() const;
  std::string shape_string() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Products. The _tn/_nt variants transpose the left/right operand.
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix matmul_tn(const Matrix& a, const Matrix& b);
Matrix matmul_nt(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
void add_inplace(Matrix& dst, const Matrix& src);
void add_inplace(Vector& dst, std::span<const double> src);

/// weight * input + bias. Throws DimensionError naming both shapes on mismatch.
Vector linear(std::span<const double> input, const Matrix& weight, std::span<const double> bias);

struct LinearGrad {
  Vector input;
  Matrix weight;
  Vector bias;
};
LinearGrad linear_backward(std::span<const double> input, const Matrix& weight,
                           std::span<const double> grad_out);

inline constexpr double kLayerNormEpsilon = 1e-5;

Vector layer_norm(std::span<const double> input, std::span<const double> gain,
                  std::span<const double> shift, double epsilon = kLayerNormEpsilon);

struct LayerNormGrad {
  Vector input;
  Vector gain;
  Vector shift;
};
LayerNormGrad layer_norm_backward(std::span<const double> input, std::span<const double> gain,
                                  std::span<const double> grad_out,
                                  double epsilon = kLayerNormEpsilon);

double sigmoid(double x);
double relu(double x);

/// H x W grid of feature vectors; cell (row y, column x) sits at integer coordinate (x, y).
class FeatureGrid {
 public:
  FeatureGrid() = default;
  FeatureGrid(std::size_t height, std::size_t width, std::size_t channels, double fill = 0.0);

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t channels() const noexcept { return channels_; }

  std::span<double> at(std::size_t y, std::size_t x) {
    return {data_.data() + (y * width_ + x) * channels_, channels_};
  }
  std::span<const double> at(std::size_t y, std::size_t x) const {
    return {data_.data() + (y * width_ + x) * channels_, channels_};
  }
  std::span<double> flat() noexcept { return data_; }
  std::span<const double> flat() const noexcept { return data_; }

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::size_t channels_ = 0;
  std::vector<double> data_;
};

/// Bilinear interpolation with zero padding outside [0, W-1] x [0, H-1].
Vector bilinear_sample(const FeatureGrid& grid, double x, double y);

struct BilinearSample {
  Vector value;
  Vector d_dx;
  Vector d_dy;
};
/// Samples channels [channel_begin, channel_begin + channel_count) together with the
/// partial derivatives in x and y (one-sided at integer coordinates).
BilinearSample bilinear_sample_with_grad(const FeatureGrid& grid, double x, double y,
                                         std::size_t channel_begin, std::size_t channel_count);

struct GradCheckReport {
  std::string op;
  double max_rel_error = 0.0;
  std::pair<std::size_t, std::size_t> worst{0, 0};
  double step = 0.0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

using ScalarFunction = std::function<double(std::span<const double>)>;

inline constexpr double kGradCheckDenominatorFloor = 1e-8;

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate of `probe`.
/// Throws InvalidArgument naming the coordinate if f is not finite there.
Vector central_difference(const std::string& op, const ScalarFunction& f,
                          std::span<const double> probe, double step, std::size_t cols = 0);

/// Largest |a - n| / max(|a|, |n|, 1e-8) over all coordinates. `cols` shapes the flat
/// coordinate into the (row, col) pair reported as the worst coordinate; 0 means one row.
GradCheckReport compare_gradients(std::string op, std::span<const double> analytic,
                                  std::span<const double> numeric, double step, std::size_t cols = 0);

/// compare_gradients(analytic, central_difference(f, probe)).
GradCheckReport grad_check(std::string op, const ScalarFunction& f, std::span<const double> analytic,
                           std::span<const double> probe, double step, std::size_t cols = 0);

}  // namespace xstage
