#pragma once

// Held-out assessment: the period split on t = cohort + age, error and
// coverage metrics for rate forecasts, and the two freeze baselines.

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "fertcast/data.hpp"
#include "fertcast/forecast.hpp"

namespace fertcast {

struct EvalCell {
  int cohort = 0;  // cohort year
  int cell = 0;    // grid cell index
  double births = 0.0;
  double exposure = 0.0;
};

struct HoldoutSplit {
  int t0 = 0;
  int horizon = 0;
  FertilityDataset fit;        // input with post-jump-off cells masked out
  std::vector<EvalCell> eval;  // cells with t in [t0+1, t0+horizon]
  int n_beyond = 0;            // observed cells past the window, not evaluated
  int n_zero_exposure = 0;     // degenerate cells excluded from eval
};

// Partition observed cells by the period index t = cohort + lowest age of the
// cell: everything through t0 stays in the fitting set, the next `horizon`
// periods form the evaluation set.
inline HoldoutSplit split(const FertilityDataset& ds, int t0, int horizon) {
  if (horizon < 1) throw std::invalid_argument("holdout horizon must be at least one period");
  HoldoutSplit out;
  out.t0 = t0;
  out.horizon = horizon;
  out.fit = ds;
  for (auto& cd : out.fit.cohorts) {
    for (int i = 0; i < ds.grid.n_cells(); ++i) {
      if (!cd.observed[i]) continue;
      const int t = cd.cohort + ds.grid.cells[i].age_lo;
      if (t <= t0) continue;
      cd.observed[i] = 0;
      cd.complete = false;
      if (t > t0 + horizon) {
        ++out.n_beyond;
      } else if (!(cd.exposure[i] > 0.0)) {
        ++out.n_zero_exposure;
      } else {
        out.eval.push_back({cd.cohort, i, cd.births[i], cd.exposure[i]});
      }
    }
  }
  while (!out.fit.cohorts.empty() && out.fit.cohorts.back().n_observed() == 0) {
    out.fit.cohorts.pop_back();
  }
  if (out.fit.cohorts.empty()) throw std::invalid_argument("no cells left to fit on");
  if (out.eval.empty()) {
    throw std::invalid_argument("empty evaluation set: dataset does not span past the jump-off");
  }
  return out;
}

inline std::vector<double> observed_rates(const std::vector<EvalCell>& eval) {
  std::vector<double> out;
  out.reserve(eval.size());
  for (const auto& e : eval) out.push_back(e.births / e.exposure);
  return out;
}

inline double rmse(const std::vector<double>& forecast, const std::vector<double>& observed) {
  if (forecast.size() != observed.size()) {
    throw std::invalid_argument("rmse needs matched forecast/observation cells");
  }
  if (forecast.empty()) throw std::invalid_argument("rmse of an empty set");
  double ss = 0.0;
  for (std::size_t i = 0; i < forecast.size(); ++i) {
    const double d = forecast[i] - observed[i];
    ss += d * d;
  }
  return std::sqrt(ss / forecast.size());
}

inline double coverage(const std::vector<double>& lower, const std::vector<double>& upper,
                       const std::vector<double>& observed) {
  if (lower.size() != upper.size() || lower.size() != observed.size()) {
    throw std::invalid_argument("coverage needs matched bounds and observations");
  }
  if (lower.empty()) throw std::invalid_argument("coverage of an empty set");
  int inside = 0;
  for (std::size_t i = 0; i < lower.size(); ++i) {
    if (!(lower[i] <= upper[i])) {
      throw std::invalid_argument("interval bounds are crossed at cell " + std::to_string(i));
    }
    inside += observed[i] >= lower[i] && observed[i] <= upper[i];
  }
  return static_cast<double>(inside) / lower.size();
}

// Indices into kSummaryLevels bracketing the central interval of a level.
inline std::pair<int, int> central_interval_levels(double level) {
  if (level == 0.5) return {2, 4};
  if (level == 0.9) return {1, 5};
  if (level == 0.95) return {0, 6};
  throw std::invalid_argument("no summary quantiles for this interval level");
}

// Pull per-eval-cell values out of a forecast summary; the summary must span
// every evaluation cohort.
namespace detail {

inline const CellSummary& summary_cell(const ForecastSummary& s, const EvalCell& e) {
  const int c = e.cohort - s.first_cohort;
  if (c < 0 || c >= static_cast<int>(s.cells.size())) {
    throw std::invalid_argument("forecast summary does not cover cohort " +
                                std::to_string(e.cohort));
  }
  return s.cells[c][e.cell];
}

}  // namespace detail

inline std::vector<double> summary_point_forecasts(const ForecastSummary& s,
                                                   const std::vector<EvalCell>& eval) {
  std::vector<double> out;
  out.reserve(eval.size());
  for (const auto& e : eval) out.push_back(detail::summary_cell(s, e).f_mean);
  return out;
}

inline std::pair<std::vector<double>, std::vector<double>> summary_interval(
    const ForecastSummary& s, const std::vector<EvalCell>& eval, double level,
    bool predictive) {
  if (predictive && !s.has_predictive) {
    throw std::invalid_argument("summary holds no predictive quantiles");
  }
  const auto [lo, hi] = central_interval_levels(level);
  std::pair<std::vector<double>, std::vector<double>> out;
  out.first.reserve(eval.size());
  out.second.reserve(eval.size());
  for (const auto& e : eval) {
    const auto& cell = detail::summary_cell(s, e);
    const auto& q = predictive ? cell.predictive : cell.f;
    out.first.push_back(q[lo]);
    out.second.push_back(q[hi]);
  }
  return out;
}

namespace detail {

// Observed rate of grid cell row `i` at period t, or NaN if unobserved.
inline double rate_at_period(const FertilityDataset& ds, int i, int t) {
  const int year = t - ds.grid.cells[i].age_lo;
  const int idx = year - ds.first_cohort();
  if (idx < 0 || idx >= ds.n_cohorts()) return std::numeric_limits<double>::quiet_NaN();
  const auto& cd = ds.cohorts[idx];
  if (!cd.observed[i]) return std::numeric_limits<double>::quiet_NaN();
  return cd.births[i] / cd.exposure[i];
}

inline double last_fit_rate(const FertilityDataset& fit, int i, int t0) {
  for (int t = t0;; --t) {
    const int year = t - fit.grid.cells[i].age_lo;
    if (year < fit.first_cohort()) {
      throw std::invalid_argument("cell " + fit.grid.cells[i].label +
                                  " has no observed rate before the jump-off");
    }
    const double r = rate_at_period(fit, i, t);
    if (!std::isnan(r)) return r;
  }
}

}  // namespace detail

// Hold each cell row's latest pre-jump-off rate constant.
inline std::vector<double> freeze_rate(const FertilityDataset& fit,
                                       const std::vector<EvalCell>& eval, int t0) {
  std::vector<double> out;
  out.reserve(eval.size());
  for (const auto& e : eval) out.push_back(detail::last_fit_rate(fit, e.cell, t0));
  return out;
}

// Extrapolate each cell row linearly with the mean annual change over the five
// years ending at the jump-off, persist it for five years, then hold flat;
// never below zero.
inline std::vector<double> freeze_slope(const FertilityDataset& fit,
                                        const std::vector<EvalCell>& eval, int t0) {
  std::vector<double> out;
  out.reserve(eval.size());
  for (const auto& e : eval) {
    const double r_now = detail::rate_at_period(fit, e.cell, t0);
    const double r_back = detail::rate_at_period(fit, e.cell, t0 - 5);
    if (std::isnan(r_now) || std::isnan(r_back)) {
      throw std::invalid_argument("cell " + fit.grid.cells[e.cell].label +
                                  ": need six periods of history through the jump-off");
    }
    const double slope = (r_now - r_back) / 5.0;
    const int t = e.cohort + fit.grid.cells[e.cell].age_lo;
    const double steps = std::min(t - t0, 5);
    out.push_back(std::max(0.0, r_now + slope * steps));
  }
  return out;
}

}  // namespace fertcast
