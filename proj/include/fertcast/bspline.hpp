#pragma once

#include <algorithm>
#include <array>
#include <stdexcept>
#include <vector>

// Clamped cubic B-spline basis with uniformly spaced interior knots. Rows
// form a partition of unity over the domain, so constant coefficient vectors
// give constant splines and Greville-sampled lines are reproduced exactly.

namespace fertcast {

class BsplineBasis {
 public:
  BsplineBasis(int K, double a, double b) : K_(K), a_(a), b_(b) {
    if (K < 4) throw std::invalid_argument("cubic basis needs at least 4 functions");
    if (!(b > a)) throw std::invalid_argument("bad spline domain");
    knots_.resize(K + 4);
    const int spans = K - 3;
    for (int i = 0; i < 4; ++i) knots_[i] = a;
    for (int i = 1; i < spans; ++i) knots_[3 + i] = a + (b - a) * i / spans;
    for (int i = K; i < K + 4; ++i) knots_[i] = b;
  }

  int size() const { return K_; }
  double domain_lo() const { return a_; }
  double domain_hi() const { return b_; }

  // The K basis values at x; x outside the domain is clamped to its edge.
  std::vector<double> row(double x) const {
    std::vector<double> out(K_, 0.0);
    x = std::clamp(x, a_, b_);
    int s = 3;
    while (s < K_ - 1 && x >= knots_[s + 1]) ++s;
    std::array<double, 4> left{}, right{}, n{};
    n[0] = 1.0;
    for (int j = 1; j <= 3; ++j) {
      left[j] = x - knots_[s + 1 - j];
      right[j] = knots_[s + j] - x;
      double saved = 0.0;
      for (int r = 0; r < j; ++r) {
        const double temp = n[r] / (right[r + 1] + left[j - r]);
        n[r] = saved + right[r + 1] * temp;
        saved = left[j - r] * temp;
      }
      n[j] = saved;
    }
    for (int i = 0; i < 4; ++i) out[s - 3 + i] = n[i];
    return out;
  }

  // Greville abscissa of basis function i: coefficients set to these
  // reproduce the identity function.
  double greville(int i) const {
    return (knots_[i + 1] + knots_[i + 2] + knots_[i + 3]) / 3.0;
  }

  // Support interval of basis function i (closed).
  std::pair<double, double> support(int i) const { return {knots_[i], knots_[i + 4]}; }

 private:
  int K_;
  double a_, b_;
  std::vector<double> knots_;
};

}  // namespace fertcast
