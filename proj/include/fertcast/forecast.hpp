#pragma once

// Posterior and predictive outputs: extending the latent walks to unseen
// cohorts, mapping draws through the rate model, simulating births with
// negative-binomial noise, and reducing everything to quantile summaries.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "fertcast/data.hpp"
#include "fertcast/model.hpp"
#include "fertcast/rng.hpp"
#include "fertcast/sampler.hpp"

namespace fertcast {

// Extend the six unconstrained series of one draw by `horizon` cohorts,
// stepping each with that draw's own innovation sd, and map the new values
// through the usual link functions.
inline Constrained<double> extend_walks(const Constrained<double>& con, int horizon,
                                        std::mt19937_64& eng) {
  if (horizon < 0) throw std::invalid_argument("horizon must be non-negative");
  if (con.cohorts.empty()) throw std::invalid_argument("no cohorts to extend from");
  Constrained<double> out = con;
  std::normal_distribution<double> unit(0.0, 1.0);
  for (int h = 0; h < horizon; ++h) {
    std::array<double, 6> u;
    for (int j = 0; j < 6; ++j) {
      u[j] = out.eta_u[j].back() + con.eta_sd[j] * unit(eng);
      out.eta_u[j].push_back(u[j]);
    }
    BasicCohortParams<double> p;
    p.theta = std::exp(u[0]);
    p.psi = logistic(u[1]);
    p.mu_sum = 35.0 + std::exp(u[2]);
    p.mu_diff = 2.0 + std::exp(u[3]);
    p.tau1 = std::exp(u[4]);
    p.tau2 = std::exp(u[5]);
    out.cohorts.push_back(p);
  }
  return out;
}

// Per-draw rates for observed and extended cohorts.  `f` is the
// occurrence/exposure rate — directly comparable with births/exposure, and
// exposure * f is the expected cell count.  `phi` holds the effective
// cell-level dispersion implied by the likelihood's uniform within-cell
// exposure split; it is exposure-free because the aggregate moment match
// cancels any common scaling of the per-age means.
struct ForecastDraws {
  int first_cohort = 0;
  int n_observed = 0;  // cohorts carried over from the dataset
  int n_cohorts = 0;   // observed + extended
  int n_cells = 0;
  int n_draws = 0;
  std::vector<double> f;      // [draw][cohort][cell]
  std::vector<double> phi;    // [draw][cohort][cell]
  std::vector<double> theta;  // [draw][cohort]

  int horizon() const { return n_cohorts - n_observed; }
  std::size_t cell_index(int d, int c, int i) const {
    return (static_cast<std::size_t>(d) * n_cohorts + c) * n_cells + i;
  }
  double rate(int d, int c, int i) const { return f[cell_index(d, c, i)]; }
  double dispersion(int d, int c, int i) const { return phi[cell_index(d, c, i)]; }
  double cfs(int d, int c) const { return theta[static_cast<std::size_t>(d) * n_cohorts + c]; }
};

namespace detail {

struct CohortCellRates {
  std::vector<double> f;
  std::vector<double> phi_eff;
  bool ok = false;
};

inline CohortCellRates cohort_cell_rates(const BasicCohortParams<double>& p,
                                         const std::vector<double>& phi_age,
                                         const AgeGrid& grid, Family family1,
                                         Family family2) {
  CohortCellRates out;
  if (!component_valid(family1, p.mu1(), p.tau1) ||
      !component_valid(family2, p.mu2(), p.tau2)) {
    return out;
  }
  const auto c1 = ComponentMass<double>::make(family1, p.mu1(), p.tau1);
  const auto c2 = ComponentMass<double>::make(family2, p.mu2(), p.tau2);
  const auto raw = mixture_age_masses(c1, c2, p.psi, grid);
  double total = 0.0;
  for (double r : raw) total += r;
  if (!(total > 0.0) || !std::isfinite(total)) return out;

  out.f.resize(grid.n_cells());
  out.phi_eff.resize(grid.n_cells());
  for (int i = 0; i < grid.n_cells(); ++i) {
    const AgeCell& cell = grid.cells[i];
    double mass = 0.0;
    for (int a = cell.age_lo; a <= cell.age_hi; ++a) mass += raw[a - AgeGrid::kMinAge];
    // Occurrence/exposure rate: cell exposure sums the member ages, so the
    // aggregate-cell rate is the average of the member-age rates.  This keeps
    // exposure * f equal to the expected count in the likelihood.
    out.f[i] = p.theta * mass / (total * cell.n_ages());
    if (cell.n_ages() == 1) {
      out.phi_eff[i] = phi_age[cell.age_lo - AgeGrid::kMinAge];
    } else {
      std::vector<std::pair<double, double>> parts;
      for (int a = cell.age_lo; a <= cell.age_hi; ++a) {
        const int ai = a - AgeGrid::kMinAge;
        parts.emplace_back(raw[ai], phi_age[ai]);
      }
      out.phi_eff[i] = aggregate_nb(parts).second;
    }
    if (!(out.phi_eff[i] > 0.0) || !std::isfinite(out.phi_eff[i])) return out;
  }
  out.ok = true;
  return out;
}

inline std::vector<double> phi_by_age(const std::vector<double>& beta,
                                      const BsplineBasis& basis) {
  std::vector<double> phi;
  phi.reserve(AgeGrid::kMaxAge - AgeGrid::kMinAge + 1);
  for (int a = AgeGrid::kMinAge; a <= AgeGrid::kMaxAge; ++a) {
    const auto row = basis.row(a + 0.5);
    double v = 0.0;
    for (std::size_t k = 0; k < beta.size(); ++k) v += beta[k] * row[k];
    if (!(std::fabs(v) < 700.0)) return {};
    phi.push_back(std::exp(v));
  }
  return phi;
}

}  // namespace detail

// Map every retained draw through the rate model, extending the walks by
// `horizon` cohorts.  Extension randomness is keyed by (seed, draw index), so
// the result is reproducible no matter how draws are scheduled; an extension
// that wanders outside the mixture's support is redrawn.
inline ForecastDraws posterior_rates(const Draws& draws, const FertilityDataset& ds,
                                     const ModelConfig& cfg, int horizon,
                                     std::uint64_t seed) {
  if (horizon < 0) throw std::invalid_argument("horizon must be non-negative");
  cfg.validate();
  const int C = ds.n_cohorts();
  if (C < 1) throw std::invalid_argument("dataset has no cohorts");
  const ParamLayout lay{C, cfg.spline_size};
  if (draws.n_params != lay.size()) {
    throw std::invalid_argument("draws do not match the dataset/config layout");
  }
  const BsplineBasis basis = age_spline_basis(cfg.spline_size);

  ForecastDraws out;
  out.first_cohort = ds.first_cohort();
  out.n_observed = C;
  out.n_cohorts = C + horizon;
  out.n_cells = ds.grid.n_cells();
  out.n_draws = draws.n_chains() * draws.n_retained();
  out.f.resize(static_cast<std::size_t>(out.n_draws) * out.n_cohorts * out.n_cells);
  out.phi.resize(out.f.size());
  out.theta.resize(static_cast<std::size_t>(out.n_draws) * out.n_cohorts);

  const std::uint64_t extension_base = derive_seed(seed, 1);
  int d = 0;
  for (int ch = 0; ch < draws.n_chains(); ++ch) {
    for (int it = 0; it < draws.n_retained(); ++it, ++d) {
      const std::span<const double> z(
          &draws.chain_values[ch][static_cast<std::size_t>(it) * draws.n_params],
          static_cast<std::size_t>(draws.n_params));
      const auto con = constrain(z, cfg, C);
      auto eng = make_engine(extension_base, static_cast<std::uint64_t>(d));

      std::vector<detail::CohortCellRates> rows;
      for (int attempt = 0;; ++attempt) {
        const Constrained<double> ext =
            horizon > 0 ? extend_walks(con, horizon, eng) : con;
        const auto phi_age = detail::phi_by_age(ext.beta, basis);
        rows.clear();
        bool ok = !phi_age.empty();
        for (int c = 0; ok && c < out.n_cohorts; ++c) {
          rows.push_back(detail::cohort_cell_rates(ext.cohorts[c], phi_age, ds.grid,
                                                   cfg.family1, cfg.family2));
          ok = rows.back().ok;
        }
        if (ok) {
          for (int c = 0; c < out.n_cohorts; ++c) {
            out.theta[static_cast<std::size_t>(d) * out.n_cohorts + c] =
                ext.cohorts[c].theta;
          }
          break;
        }
        // a retained draw is always inside the support, so only the random
        // extension can fail; try a fresh path
        if (horizon == 0 || attempt >= 1000) {
          throw std::runtime_error("draw " + std::to_string(d) +
                                   ": could not extend walks inside the model support");
        }
      }
      for (int c = 0; c < out.n_cohorts; ++c) {
        for (int i = 0; i < out.n_cells; ++i) {
          out.f[out.cell_index(d, c, i)] = rows[c].f[i];
          out.phi[out.cell_index(d, c, i)] = rows[c].phi_eff[i];
        }
      }
    }
  }
  return out;
}

// One negative-binomial birth count via its gamma-Poisson mixture.
inline double nb_birth_draw(double mean, double phi, std::mt19937_64& eng) {
  if (!(mean >= 0.0) || !std::isfinite(mean)) {
    throw std::invalid_argument("nb_birth_draw: mean must be finite and non-negative");
  }
  if (mean == 0.0) return 0.0;
  if (!(phi > 0.0) || !std::isfinite(phi)) {
    throw std::invalid_argument("nb_birth_draw: dispersion must be finite and positive");
  }
  std::gamma_distribution<double> mix(phi, mean / phi);
  const double lambda = mix(eng);
  if (!(lambda > 0.0)) return 0.0;
  std::poisson_distribution<long long> pois(lambda);
  return static_cast<double>(pois(eng));
}

struct PredictiveDraws {
  int n_draws = 0;
  int n_cohorts = 0;
  int n_cells = 0;
  std::vector<double> rate;  // [draw][cohort][cell], simulated births / exposure

  double at(int d, int c, int i) const {
    return rate[(static_cast<std::size_t>(d) * n_cohorts + c) * n_cells + i];
  }
};

// Exposure per cohort and cell for the predictive simulation: observed cells
// keep their exposure, everything else (ragged tops and extended cohorts)
// borrows the latest cohort that observed the cell.
inline std::vector<std::vector<double>> default_exposure_schedule(const FertilityDataset& ds,
                                                                 int horizon) {
  if (horizon < 0) throw std::invalid_argument("horizon must be non-negative");
  const int n = ds.grid.n_cells();
  std::vector<double> latest(n, 0.0);
  for (const auto& cd : ds.cohorts) {
    for (int i = 0; i < n; ++i) {
      if (cd.observed[i]) latest[i] = cd.exposure[i];
    }
  }
  for (int i = 0; i < n; ++i) {
    if (!(latest[i] > 0.0)) {
      throw std::invalid_argument("cell " + ds.grid.cells[i].label +
                                  " is never observed; no exposure to carry forward");
    }
  }
  std::vector<std::vector<double>> schedule;
  for (const auto& cd : ds.cohorts) {
    std::vector<double> row(n);
    for (int i = 0; i < n; ++i) row[i] = cd.observed[i] ? cd.exposure[i] : latest[i];
    schedule.push_back(std::move(row));
  }
  for (int h = 0; h < horizon; ++h) schedule.push_back(latest);
  return schedule;
}

// Simulate births over the exposure schedule and return them as rates.
// Streams are keyed by (seed, draw, cohort).
inline PredictiveDraws predictive_rate_draws(const ForecastDraws& fd,
                                             const std::vector<std::vector<double>>& exposure,
                                             std::uint64_t seed) {
  if (static_cast<int>(exposure.size()) != fd.n_cohorts) {
    throw std::invalid_argument("exposure schedule does not cover every cohort");
  }
  for (const auto& row : exposure) {
    if (static_cast<int>(row.size()) != fd.n_cells) {
      throw std::invalid_argument("exposure schedule does not cover every cell");
    }
    for (double e : row) {
      if (!(e > 0.0)) throw std::invalid_argument("exposure must be positive");
    }
  }
  PredictiveDraws out;
  out.n_draws = fd.n_draws;
  out.n_cohorts = fd.n_cohorts;
  out.n_cells = fd.n_cells;
  out.rate.resize(fd.f.size());
  const std::uint64_t predictive_base = derive_seed(seed, 2);
  for (int d = 0; d < fd.n_draws; ++d) {
    const std::uint64_t draw_seed = derive_seed(predictive_base, static_cast<std::uint64_t>(d));
    for (int c = 0; c < fd.n_cohorts; ++c) {
      auto eng = make_engine(draw_seed, static_cast<std::uint64_t>(c));
      for (int i = 0; i < fd.n_cells; ++i) {
        const double r = exposure[c][i];
        const double births =
            nb_birth_draw(r * fd.rate(d, c, i), fd.dispersion(d, c, i), eng);
        out.rate[fd.cell_index(d, c, i)] = births / r;
      }
    }
  }
  return out;
}

// --- summaries ---

inline constexpr std::array<double, 7> kSummaryLevels{0.025, 0.05, 0.25, 0.5,
                                                      0.75,  0.95, 0.975};

// Linear-interpolation empirical quantile (the "type 7" convention): with n
// sorted values, level p sits at rank (n-1)p.
inline double quantile_sorted(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) throw std::invalid_argument("quantile of an empty sample");
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("quantile level outside [0, 1]");
  const double h = (sorted.size() - 1) * p;
  const std::size_t lo = static_cast<std::size_t>(h);
  if (lo + 1 >= sorted.size()) return sorted.back();
  return sorted[lo] + (h - lo) * (sorted[lo + 1] - sorted[lo]);
}

inline double quantile_type7(std::vector<double> sample, double p) {
  std::sort(sample.begin(), sample.end());
  return quantile_sorted(sample, p);
}

struct CellSummary {
  double f_mean = 0.0;
  std::array<double, 7> f{};
  std::array<double, 7> predictive{};
};

struct CohortSummary {
  double cfs_mean = 0.0;
  std::array<double, 7> cfs{};
};

struct ForecastSummary {
  std::array<double, 7> levels = kSummaryLevels;
  int first_cohort = 0;
  int n_observed = 0;
  bool has_predictive = false;
  std::vector<std::vector<CellSummary>> cells;  // [cohort][cell]
  std::vector<CohortSummary> cohorts;
};

namespace detail {

inline std::array<double, 7> level_quantiles(std::vector<double>& column) {
  std::sort(column.begin(), column.end());
  std::array<double, 7> q;
  for (std::size_t l = 0; l < q.size(); ++l) q[l] = quantile_sorted(column, kSummaryLevels[l]);
  return q;
}

}  // namespace detail

inline ForecastSummary summarize(const ForecastDraws& fd,
                                 const PredictiveDraws* pred = nullptr) {
  if (fd.n_draws < 100) throw std::invalid_argument("summaries need at least 100 draws");
  if (pred != nullptr && (pred->n_draws != fd.n_draws || pred->n_cohorts != fd.n_cohorts ||
                          pred->n_cells != fd.n_cells)) {
    throw std::invalid_argument("predictive draws do not match the rate draws");
  }
  ForecastSummary out;
  out.first_cohort = fd.first_cohort;
  out.n_observed = fd.n_observed;
  out.has_predictive = pred != nullptr;
  out.cells.resize(fd.n_cohorts, std::vector<CellSummary>(fd.n_cells));
  out.cohorts.resize(fd.n_cohorts);

  std::vector<double> column(fd.n_draws);
  for (int c = 0; c < fd.n_cohorts; ++c) {
    for (int i = 0; i < fd.n_cells; ++i) {
      double sum = 0.0;
      for (int d = 0; d < fd.n_draws; ++d) {
        column[d] = fd.rate(d, c, i);
        sum += column[d];
      }
      auto& cell = out.cells[c][i];
      cell.f_mean = sum / fd.n_draws;
      cell.f = detail::level_quantiles(column);
      if (pred != nullptr) {
        for (int d = 0; d < fd.n_draws; ++d) column[d] = pred->at(d, c, i);
        cell.predictive = detail::level_quantiles(column);
      }
    }
    double sum = 0.0;
    for (int d = 0; d < fd.n_draws; ++d) {
      column[d] = fd.cfs(d, c);
      sum += column[d];
    }
    out.cohorts[c].cfs_mean = sum / fd.n_draws;
    out.cohorts[c].cfs = detail::level_quantiles(column);
  }
  return out;
}

}  // namespace fertcast
