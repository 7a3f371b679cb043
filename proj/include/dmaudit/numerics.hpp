#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dmaudit/errors.hpp"

namespace dmaudit {

// Dense row-major f64 matrix. All model state and image data lives in these;
// everything runs in double precision so gradient checks against central
// differences have headroom.
class Matrix {
 public:
  Matrix() : rows_(0), cols_(0) {}
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_)
      throw ArgumentError("Matrix: data length != rows*cols");
  }

  static Matrix row_vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Matrix(1, n, std::move(v));
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }
  std::vector<double>& raw() { return data_; }
  const std::vector<double>& raw() const { return data_; }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void ensure_finite(const std::string& label) const {
    if (!all_finite()) throw NumericError(label + ": non-finite entries");
  }

  Matrix transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
  }

  Matrix& operator+=(const Matrix& o) {
    require_same_shape(o, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Matrix& operator-=(const Matrix& o) {
    require_same_shape(o, "operator-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Matrix& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }

  friend Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
  friend Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
  friend Matrix operator*(Matrix a, double s) { return a *= s; }
  friend Matrix operator*(double s, Matrix a) { return a *= s; }

  bool operator==(const Matrix& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
  }

  double max_abs() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::abs(v));
    return m;
  }

  double frobenius_norm() const {
    double s = 0.0;
    for (double v : data_) s += v * v;
    return std::sqrt(s);
  }

 private:
  void require_same_shape(const Matrix& o, const char* op) const {
    if (!same_shape(o))
      throw ArgumentError(std::string(op) + ": shape mismatch (" + std::to_string(rows_) + "x" +
                          std::to_string(cols_) + " vs " + std::to_string(o.rows_) + "x" +
                          std::to_string(o.cols_) + ")");
  }

  std::size_t rows_, cols_;
  std::vector<double> data_;
};

// C = A * B. Loop order (i, k, j) keeps B accesses contiguous; this is the
// hot kernel of the whole artifact.
Matrix matmul(const Matrix& a, const Matrix& b);

// C += A * B and C += A^T * B / C += A * B^T, used by the backward passes to
// avoid materializing transposes in inner loops.
void matmul_acc(const Matrix& a, const Matrix& b, Matrix& c);
void matmul_at_b_acc(const Matrix& a, const Matrix& b, Matrix& c);
Matrix matmul_a_bt(const Matrix& a, const Matrix& b);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> v);

// Numerically stable softmax (max subtraction). Output sums to 1 within
// 1e-12 and is invariant to adding a constant to every input.
std::vector<double> softmax(std::span<const double> v);

// J = diag(s) - s s^T for a probability vector s. Rejects inputs whose mass
// deviates from 1 by more than 1e-6.
Matrix softmax_jacobian(std::span<const double> s);

// y = (x - mean) / sqrt(var + eps) * scale + shift, population variance.
std::vector<double> layer_norm(std::span<const double> x, std::span<const double> scale,
                               std::span<const double> shift, double eps);

// Mean squared elementwise difference.
double mse(const Matrix& a, const Matrix& b);

// Central-difference gradient oracle: (f(x + h e_ij) - f(x - h e_ij)) / 2h.
constexpr double kDefaultFdStep = 1e-5;
Matrix finite_diff_grad(const std::function<double(const Matrix&)>& f, Matrix x,
                        double h = kDefaultFdStep);

// Largest singular value by power iteration on M^T M. Deterministic start
// vector; matrices here are tiny so a fixed iteration budget converges far
// below the tolerances any caller asserts.
double spectral_norm(const Matrix& m, int iterations = 200);

struct GradCheckReport {
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  std::size_t probe_count = 0;
};

// Compares an analytic gradient against the finite-difference oracle.
// Relative error is measured per entry against max(|a|, |b|, 1e-3 * gmax)
// where gmax is the largest magnitude in either gradient, so that
// finite-difference roundoff on near-zero entries does not dominate.
GradCheckReport grad_check(const Matrix& analytic, const Matrix& numeric);

}  // namespace dmaudit
