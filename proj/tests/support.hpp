#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <vector>

// Shared numeric oracles for the test suite: adaptive quadrature and
// finite-difference gradients, kept independent of the library internals so
// they can cross-check them.

namespace testsupport {

namespace detail {
inline double simpson(const std::function<double(double)>& f, double a, double b,
                      double fa, double fm, double fb) {
  return (b - a) / 6.0 * (fa + 4.0 * fm + fb);
}

inline double adapt(const std::function<double(double)>& f, double a, double b,
                    double fa, double fm, double fb, double whole, double tol, int depth) {
  const double m = 0.5 * (a + b);
  const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = simpson(f, a, m, fa, flm, fm);
  const double right = simpson(f, m, b, fm, frm, fb);
  if (depth <= 0 || std::fabs(left + right - whole) < 15.0 * tol) {
    return left + right + (left + right - whole) / 15.0;
  }
  return adapt(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) +
         adapt(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1);
}
}  // namespace detail

// Adaptive Simpson quadrature of f over [a, b] to absolute tolerance tol.
// The interval is pre-split into uniform panels so narrow peaks between the
// initial probe points are not missed.
inline double integrate(const std::function<double(double)>& f, double a, double b,
                        double tol = 1e-10) {
  const int panels = 64;
  const double w = (b - a) / panels;
  double total = 0.0;
  for (int i = 0; i < panels; ++i) {
    const double lo = a + i * w, hi = (i == panels - 1) ? b : lo + w;
    const double m = 0.5 * (lo + hi);
    const double fa = f(lo), fm = f(m), fb = f(hi);
    const double whole = detail::simpson(f, lo, hi, fa, fm, fb);
    total += detail::adapt(f, lo, hi, fa, fm, fb, whole, tol / panels, 50);
  }
  return total;
}

// kth raw/central moments of a density given by f over [a, b].
inline double density_mean(const std::function<double(double)>& f, double a, double b) {
  return integrate([&](double x) { return x * f(x); }, a, b, 1e-11);
}

inline double density_sd(const std::function<double(double)>& f, double a, double b) {
  const double m = density_mean(f, a, b);
  const double v = integrate([&](double x) { return (x - m) * (x - m) * f(x); }, a, b, 1e-11);
  return std::sqrt(v);
}

// Central finite-difference gradient of a scalar function of a vector.
inline std::vector<double> fd_gradient(const std::function<double(const std::vector<double>&)>& f,
                                       std::vector<double> x, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    const double hi = h * std::max(1.0, std::fabs(xi));
    x[i] = xi + hi;
    const double fp = f(x);
    x[i] = xi - hi;
    const double fm = f(x);
    x[i] = xi;
    g[i] = (fp - fm) / (2.0 * hi);
  }
  return g;
}

// Five-point stencil gradient: fourth-order accurate, so a larger step can be
// used when the function has strong curvature or a large absolute value.
inline std::vector<double> fd_gradient5(const std::function<double(const std::vector<double>&)>& f,
                                        std::vector<double> x, double h = 1e-3) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    const double hi = h * std::max(1.0, std::fabs(xi));
    x[i] = xi + 2.0 * hi;
    const double f2p = f(x);
    x[i] = xi + hi;
    const double f1p = f(x);
    x[i] = xi - hi;
    const double f1m = f(x);
    x[i] = xi - 2.0 * hi;
    const double f2m = f(x);
    x[i] = xi;
    g[i] = (f2m - 8.0 * f1m + 8.0 * f1p - f2p) / (12.0 * hi);
  }
  return g;
}

// Central finite-difference Jacobian of a vector-valued function.
inline std::vector<std::vector<double>> fd_jacobian(
    const std::function<std::vector<double>(const std::vector<double>&)>& f, std::vector<double> x,
    double h = 1e-6) {
  const std::vector<double> f0 = f(x);
  std::vector<std::vector<double>> jac(f0.size(), std::vector<double>(x.size()));
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    const double hi = h * std::max(1.0, std::fabs(xi));
    x[i] = xi + hi;
    const auto fp = f(x);
    x[i] = xi - hi;
    const auto fm = f(x);
    x[i] = xi;
    for (std::size_t r = 0; r < f0.size(); ++r) jac[r][i] = (fp[r] - fm[r]) / (2.0 * hi);
  }
  return jac;
}

// log |det A| by Gaussian elimination with partial pivoting.
inline double log_abs_det(std::vector<std::vector<double>> a) {
  const std::size_t n = a.size();
  double logdet = 0.0;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r) {
      if (std::fabs(a[r][col]) > std::fabs(a[piv][col])) piv = r;
    }
    if (std::fabs(a[piv][col]) < 1e-300) return -std::numeric_limits<double>::infinity();
    std::swap(a[col], a[piv]);
    logdet += std::log(std::fabs(a[col][col]));
    for (std::size_t r = col + 1; r < n; ++r) {
      const double factor = a[r][col] / a[col][col];
      for (std::size_t c = col; c < n; ++c) a[r][c] -= factor * a[col][c];
    }
  }
  return logdet;
}

}  // namespace testsupport
