#include "dmaudit/numerics.hpp"

#include <algorithm>
#include <cmath>

namespace dmaudit {

Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  matmul_acc(a, b, c);
  return c;
}

void matmul_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  if (a.cols() != b.rows() || c.rows() != a.rows() || c.cols() != b.cols())
    throw ArgumentError("matmul: inner/output dimension mismatch (" + std::to_string(a.rows()) +
                        "x" + std::to_string(a.cols()) + " * " + std::to_string(b.rows()) + "x" +
                        std::to_string(b.cols()) + ")");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = pc + i * n;
    const double* ai = pa + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = ai[kk];
      if (av == 0.0) continue;
      const double* bk = pb + kk * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bk[j];
    }
  }
}

void matmul_at_b_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  // c += a^T b, a: (m x r), b: (m x n), c: (r x n)
  if (a.rows() != b.rows() || c.rows() != a.cols() || c.cols() != b.cols())
    throw ArgumentError("matmul_at_b: dimension mismatch");
  const std::size_t m = a.rows(), r = a.cols(), n = b.cols();
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = pa + i * r;
    const double* bi = pb + i * n;
    for (std::size_t kk = 0; kk < r; ++kk) {
      const double av = ai[kk];
      if (av == 0.0) continue;
      double* ck = pc + kk * n;
      for (std::size_t j = 0; j < n; ++j) ck[j] += av * bi[j];
    }
  }
}

Matrix matmul_a_bt(const Matrix& a, const Matrix& b) {
  // a: (m x k), b: (n x k) -> (m x n)
  if (a.cols() != b.cols()) throw ArgumentError("matmul_a_bt: inner dimension mismatch");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Matrix c(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a.data() + i * k;
    double* ci = c.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b.data() + j * k;
      double s = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) s += ai[kk] * bj[kk];
      ci[j] = s;
    }
  }
  return c;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ArgumentError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

std::vector<double> softmax(std::span<const double> v) {
  if (v.empty()) throw ArgumentError("softmax: empty input");
  double mx = v[0];
  for (double x : v) {
    if (!std::isfinite(x)) throw ArgumentError("softmax: non-finite input");
    mx = std::max(mx, x);
  }
  std::vector<double> out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    sum += out[i];
  }
  for (double& x : out) x /= sum;
  return out;
}

Matrix softmax_jacobian(std::span<const double> s) {
  if (s.empty()) throw ArgumentError("softmax_jacobian: empty input");
  double sum = 0.0;
  for (double x : s) sum += x;
  if (std::abs(sum - 1.0) > 1e-6)
    throw ArgumentError("softmax_jacobian: input is not a probability vector (sum=" +
                        std::to_string(sum) + ")");
  const std::size_t n = s.size();
  Matrix j(n, n);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) j(a, b) = (a == b ? s[a] : 0.0) - s[a] * s[b];
  return j;
}

std::vector<double> layer_norm(std::span<const double> x, std::span<const double> scale,
                               std::span<const double> shift, double eps) {
  if (x.size() != scale.size() || x.size() != shift.size())
    throw ArgumentError("layer_norm: length mismatch");
  if (x.empty()) throw ArgumentError("layer_norm: empty input");
  if (eps < 0.0) throw ArgumentError("layer_norm: eps must be >= 0");
  const double n = static_cast<double>(x.size());
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= n;
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= n;
  const double inv = 1.0 / std::sqrt(var + eps);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mu) * inv * scale[i] + shift[i];
  return out;
}

double mse(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ArgumentError("mse: shape mismatch");
  if (a.size() == 0) throw ArgumentError("mse: empty matrices");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.raw()[i] - b.raw()[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

Matrix finite_diff_grad(const std::function<double(const Matrix&)>& f, Matrix x, double h) {
  if (h <= 0.0) throw ArgumentError("finite_diff_grad: h must be > 0");
  Matrix g(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x.raw()[i];
    x.raw()[i] = orig + h;
    const double fp = f(x);
    x.raw()[i] = orig - h;
    const double fm = f(x);
    x.raw()[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("finite_diff_grad: non-finite function value at probe " +
                         std::to_string(i));
    g.raw()[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

double spectral_norm(const Matrix& m, int iterations) {
  if (m.size() == 0) return 0.0;
  const std::size_t n = m.cols();
  // Deterministic non-degenerate start vector.
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = 1.0 + 0.01 * static_cast<double>(i % 7);
  double nv = norm2(v);
  for (double& x : v) x /= nv;

  std::vector<double> mv(m.rows());
  double sigma = 0.0;
  for (int it = 0; it < iterations; ++it) {
    // mv = M v
    for (std::size_t i = 0; i < m.rows(); ++i) mv[i] = dot(m.row(i), v);
    // v' = M^T mv
    std::vector<double> w(n, 0.0);
    for (std::size_t i = 0; i < m.rows(); ++i) {
      const auto ri = m.row(i);
      for (std::size_t j = 0; j < n; ++j) w[j] += ri[j] * mv[i];
    }
    const double nw = norm2(w);
    if (nw == 0.0) return 0.0;
    for (std::size_t j = 0; j < n; ++j) v[j] = w[j] / nw;
    const double next = std::sqrt(nw);
    if (it > 8 && std::abs(next - sigma) <= 1e-14 * std::max(1.0, next)) {
      sigma = next;
      break;
    }
    sigma = next;
  }
  return sigma;
}

GradCheckReport grad_check(const Matrix& analytic, const Matrix& numeric) {
  if (!analytic.same_shape(numeric)) throw ArgumentError("grad_check: shape mismatch");
  GradCheckReport rep;
  rep.probe_count = analytic.size();
  if (rep.probe_count == 0) throw ArgumentError("grad_check: empty gradients");
  const double gmax = std::max(analytic.max_abs(), numeric.max_abs());
  const double floor = std::max(1e-3 * gmax, 1e-12);
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic.raw()[i];
    const double b = numeric.raw()[i];
    const double abs_err = std::abs(a - b);
    rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
    const double denom = std::max({std::abs(a), std::abs(b), floor});
    rep.max_rel_err = std::max(rep.max_rel_err, abs_err / denom);
  }
  return rep;
}

}  // namespace dmaudit
