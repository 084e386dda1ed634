#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

// Parametric component families for age schedules. Each family is exposed
// through a location/spread parameterization chosen for interpretability:
//   gamma    - mode and standard deviation
//   hadwiger - mean and standard deviation (inverse-Gaussian density)
//   weibull  - median and distance from median to upper quartile
// All conversions are exact closed forms and round-trip.

namespace fertcast {

enum class Family { gamma, hadwiger, weibull };

inline std::string_view family_name(Family f) {
  switch (f) {
    case Family::gamma: return "gamma";
    case Family::hadwiger: return "hadwiger";
    case Family::weibull: return "weibull";
  }
  return "?";
}

inline Family parse_family(std::string_view name) {
  if (name == "gamma") return Family::gamma;
  if (name == "hadwiger") return Family::hadwiger;
  if (name == "weibull") return Family::weibull;
  throw std::invalid_argument("unknown component family: '" + std::string(name) +
                              "' (expected gamma, hadwiger or weibull)");
}

// Location/spread view of a component. location: years; spread: years.
template <class S>
struct BasicComponentSpec {
  Family family;
  S location;
  S spread;
};
using ComponentSpec = BasicComponentSpec<double>;

// Family-native parameters: gamma (shape, rate); hadwiger as inverse
// Gaussian (mean, lambda); weibull (shape, scale).
template <class S>
struct BasicNaturalParams {
  Family family;
  S p1;
  S p2;
};
using NaturalParams = BasicNaturalParams<double>;

namespace detail {

inline constexpr double kLogTwoPi = 1.8378770664093454836;
inline constexpr double kLn2 = 0.6931471805599453094;

// Unvalidated conversion cores, generic over the scalar type so they can be
// taped for differentiation. Callers guarantee the inputs are in-domain.

template <class S>
BasicNaturalParams<S> gamma_nat_from_mode_sd(const S& mode, const S& sd) {
  using std::sqrt;
  // positive root of sd^2 r^2 - mode r - 1 = 0
  const S rate = (mode + sqrt(mode * mode + 4.0 * sd * sd)) / (2.0 * sd * sd);
  const S shape = 1.0 + mode * rate;
  return {Family::gamma, shape, rate};
}

template <class S>
BasicNaturalParams<S> invgauss_nat_from_mean_sd(const S& mean, const S& sd) {
  const S lambda = mean * mean * mean / (sd * sd);
  return {Family::hadwiger, mean, lambda};
}

template <class S>
BasicNaturalParams<S> weibull_nat_from_median_uqd(const S& median, const S& uqd) {
  using std::exp;
  using std::log1p;
  using std::log;
  const S shape = kLn2 / log1p(uqd / median);
  // scale = median / (ln 2)^(1/shape)
  const S scale = median * exp(-std::log(kLn2) / shape);
  return {Family::weibull, shape, scale};
}

template <class S>
BasicNaturalParams<S> natural_params(const BasicComponentSpec<S>& spec) {
  switch (spec.family) {
    case Family::gamma: return gamma_nat_from_mode_sd(spec.location, spec.spread);
    case Family::hadwiger: return invgauss_nat_from_mean_sd(spec.location, spec.spread);
    case Family::weibull: return weibull_nat_from_median_uqd(spec.location, spec.spread);
  }
  return {spec.family, S(0), S(0)};
}

template <class S>
S log_density_nat(const BasicNaturalParams<S>& np, double x) {
  using std::exp;
  using std::log;
  using std::lgamma;
  const double lx = std::log(x);
  switch (np.family) {
    case Family::gamma:
      return np.p1 * log(np.p2) - lgamma(np.p1) + (np.p1 - 1.0) * lx - np.p2 * x;
    case Family::hadwiger: {
      const S d = x - np.p1;
      return 0.5 * (log(np.p2) - kLogTwoPi - 3.0 * lx) - np.p2 * d * d / (2.0 * np.p1 * np.p1 * x);
    }
    case Family::weibull:
      return log(np.p1) - np.p1 * log(np.p2) + (np.p1 - 1.0) * lx - exp(np.p1 * (lx - log(np.p2)));
  }
  return S(0);
}

// Regularized lower incomplete gamma P(a, x); series for x < a+1, continued
// fraction otherwise.
inline double gamma_p(double a, double x) {
  if (x <= 0.0) return 0.0;
  const double gln = std::lgamma(a);
  if (x < a + 1.0) {
    double ap = a;
    double sum = 1.0 / a;
    double del = sum;
    for (int i = 0; i < 500; ++i) {
      ap += 1.0;
      del *= x / ap;
      sum += del;
      if (std::fabs(del) < std::fabs(sum) * 1e-16) break;
    }
    return sum * std::exp(-x + a * std::log(x) - gln);
  }
  const double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i <= 500; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::fabs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::fabs(delta - 1.0) < 1e-16) break;
  }
  return 1.0 - std::exp(-x + a * std::log(x) - gln) * h;
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

inline double cdf_nat(const NaturalParams& np, double x) {
  if (x <= 0.0) return 0.0;
  switch (np.family) {
    case Family::gamma:
      return gamma_p(np.p1, np.p2 * x);
    case Family::hadwiger: {
      const double mu = np.p1, lambda = np.p2;
      const double s = std::sqrt(lambda / x);
      const double a = normal_cdf(s * (x / mu - 1.0));
      const double b = std::exp(2.0 * lambda / mu + std::log(normal_cdf(-s * (x / mu + 1.0))));
      return std::min(1.0, a + b);
    }
    case Family::weibull:
      return -std::expm1(-std::pow(x / np.p2, np.p1));
  }
  return 0.0;
}

inline void require_finite_positive(double v, const char* what) {
  if (!std::isfinite(v) || v <= 0.0) {
    throw std::domain_error(std::string(what) + " must be finite and > 0");
  }
}

}  // namespace detail

// --- conversions (validated, double precision) ---

// Gamma with the given mode (>= 0) and standard deviation; shape >= 1.
inline NaturalParams gamma_from_mode_sd(double mode, double sd) {
  if (!std::isfinite(mode) || mode < 0.0) {
    throw std::domain_error("gamma mode must be finite and >= 0");
  }
  detail::require_finite_positive(sd, "gamma sd");
  return detail::gamma_nat_from_mode_sd(mode, sd);
}

// Inverse Gaussian with the given mean and standard deviation; lambda = mean^3/sd^2.
inline NaturalParams invgauss_from_mean_sd(double mean, double sd) {
  detail::require_finite_positive(mean, "inverse-Gaussian mean");
  detail::require_finite_positive(sd, "inverse-Gaussian sd");
  return detail::invgauss_nat_from_mean_sd(mean, sd);
}

// Weibull with the given median and upper-quartile distance;
// shape k = ln 2 / ln(1 + uqd/median), exact.
inline NaturalParams weibull_from_median_uqd(double median, double uqd) {
  detail::require_finite_positive(median, "weibull median");
  detail::require_finite_positive(uqd, "weibull uqd");
  return detail::weibull_nat_from_median_uqd(median, uqd);
}

inline NaturalParams natural_params(const ComponentSpec& spec) {
  switch (spec.family) {
    case Family::gamma: return gamma_from_mode_sd(spec.location, spec.spread);
    case Family::hadwiger: return invgauss_from_mean_sd(spec.location, spec.spread);
    case Family::weibull: return weibull_from_median_uqd(spec.location, spec.spread);
  }
  throw std::logic_error("bad family tag");
}

// Recover the (location, spread) summary defining each family's
// parameterization; inverse of the conversions above.
inline std::pair<double, double> location_spread(const NaturalParams& np) {
  switch (np.family) {
    case Family::gamma:
      return {(np.p1 - 1.0) / np.p2, std::sqrt(np.p1) / np.p2};
    case Family::hadwiger:
      return {np.p1, std::sqrt(np.p1 * np.p1 * np.p1 / np.p2)};
    case Family::weibull: {
      const double median = np.p2 * std::pow(detail::kLn2, 1.0 / np.p1);
      const double q75 = np.p2 * std::pow(2.0 * detail::kLn2, 1.0 / np.p1);
      return {median, q75 - median};
    }
  }
  throw std::logic_error("bad family tag");
}

// Log density at x; zero density (-inf) for x outside the support.
inline double log_density(const ComponentSpec& spec, double x) {
  if (!(x > 0.0)) return -std::numeric_limits<double>::infinity();
  return detail::log_density_nat(natural_params(spec), x);
}

inline double cdf(const ComponentSpec& spec, double x) {
  return detail::cdf_nat(natural_params(spec), x);
}

// Quantile function. Closed form for weibull; monotone bisection on the cdf
// for gamma and hadwiger.
inline double quantile(const ComponentSpec& spec, double p) {
  if (!(p > 0.0) || !(p < 1.0)) throw std::domain_error("quantile level must be in (0,1)");
  const NaturalParams np = natural_params(spec);
  if (np.family == Family::weibull) {
    return np.p2 * std::pow(-std::log1p(-p), 1.0 / np.p1);
  }
  double lo = 0.0;
  double hi = spec.location + 40.0 * spec.spread + 10.0;
  while (detail::cdf_nat(np, hi) < p) hi *= 2.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (detail::cdf_nat(np, mid) < p) lo = mid; else hi = mid;
    if (hi - lo < 1e-13 * (1.0 + hi)) break;
  }
  return 0.5 * (lo + hi);
}

// Mass of the density between integer ages x and x+1, evaluated at the
// interval midpoint.
inline double midpoint_mass(const ComponentSpec& spec, int age) {
  if (age < 0) throw std::domain_error("age must be >= 0");
  return std::exp(log_density(spec, age + 0.5));
}

}  // namespace fertcast
