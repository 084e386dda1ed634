#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fertcast/autodiff.hpp"
#include "fertcast/bspline.hpp"
#include "fertcast/data.hpp"
#include "fertcast/densities.hpp"
#include "fertcast/special.hpp"

// The joint model: cohort fertility schedules as a level parameter times a
// normalized two-component mixture over age cells, a negative-binomial
// likelihood whose log dispersion is a spline in age, and random walks
// tying everything together across cohorts. All heavy functions are
// templated over the scalar so the same code produces values (double) and
// tape-recorded gradients (ad::Var).

namespace fertcast {

template <class S>
struct BasicCohortParams {
  S theta;    // completed fertility level, > 0
  S psi;      // mixture weight, in (0, 1)
  S mu_sum;   // location sum, > 35
  S mu_diff;  // location gap, > 2
  S tau1;     // first-component spread, > 0
  S tau2;     // second-component spread, > 0

  S mu1() const { return (mu_sum - mu_diff) * 0.5; }
  S mu2() const { return (mu_sum + mu_diff) * 0.5; }
};
using CohortParams = BasicCohortParams<double>;

struct DispersionSpline {
  std::vector<double> beta;
  BsplineBasis basis;
  double sigma_phi = 1.0;
};

inline BsplineBasis age_spline_basis(int K) {
  return BsplineBasis(K, AgeGrid::kMinAge, AgeGrid::kMaxAge);
}

struct ModelConfig {
  Family family1 = Family::gamma;
  Family family2 = Family::gamma;
  int spline_size = 8;

  // First-element priors for the random walks, on the unconstrained scale.
  double theta_first_mean = 0.6931471805599453;  // ln 2
  double theta_first_sd = 0.5;
  double psi_first_mean = 0.0;
  double psi_first_sd = 1.0;
  double mu_sum_first_mean = 2.995732273553991;  // ln 20
  double mu_sum_first_sd = 0.5;
  double mu_diff_first_mean = 2.0794415416798357;  // ln 8
  double mu_diff_first_sd = 0.5;
  double tau_first_mean = 1.6094379124341003;  // ln 5
  double tau_first_sd = 0.5;
  double beta_first_mean = 4.0;
  double beta_first_sd = 2.0;

  // Half-normal prior scales for the seven innovation sds (theta, psi,
  // mu_sum, mu_diff, tau1, tau2; then the spline-coefficient walk).
  std::array<double, 6> eta_sd_scale{0.5, 0.5, 0.5, 0.5, 0.5, 0.5};
  double phi_sd_scale = 1.0;

  bool non_centered = false;
  AgeGrid grid = AgeGrid::standard();

  void validate() const {
    if (spline_size < 4) throw std::invalid_argument("spline_size must be >= 4");
    const double scales[] = {theta_first_sd, psi_first_sd,  mu_sum_first_sd,
                             mu_diff_first_sd, tau_first_sd, beta_first_sd,
                             phi_sd_scale};
    for (double s : scales) {
      if (!(s > 0.0)) throw std::invalid_argument("prior scales must be positive");
    }
    for (double s : eta_sd_scale) {
      if (!(s > 0.0)) throw std::invalid_argument("prior scales must be positive");
    }
    grid.validate();
  }

  std::pair<double, double> first_prior(int component) const {
    switch (component) {
      case 0: return {theta_first_mean, theta_first_sd};
      case 1: return {psi_first_mean, psi_first_sd};
      case 2: return {mu_sum_first_mean, mu_sum_first_sd};
      case 3: return {mu_diff_first_mean, mu_diff_first_sd};
      default: return {tau_first_mean, tau_first_sd};
    }
  }
};

inline constexpr std::array<const char*, 6> kEtaComponentNames = {
    "theta", "psi", "mu_sum", "mu_diff", "tau1", "tau2"};

// Flat unconstrained vector: six per-cohort blocks, K spline coefficients,
// six log innovation sds, one log spline-walk sd.
struct ParamLayout {
  int n_cohorts = 0;
  int spline_size = 0;

  int size() const { return 6 * n_cohorts + spline_size + 7; }
  int eta(int component, int c) const { return component * n_cohorts + c; }
  int beta(int k) const { return 6 * n_cohorts + k; }
  int eta_log_sd(int component) const { return 6 * n_cohorts + spline_size + component; }
  int phi_log_sd() const { return 6 * n_cohorts + spline_size + 6; }
};

// Names for draw files; cohort blocks are indexed by cohort year.
inline std::vector<std::string> param_names(const ParamLayout& lay, int first_cohort) {
  std::vector<std::string> names(lay.size());
  for (int j = 0; j < 6; ++j) {
    for (int c = 0; c < lay.n_cohorts; ++c) {
      names[lay.eta(j, c)] =
          std::string(kEtaComponentNames[j]) + "_u[" + std::to_string(first_cohort + c) + "]";
    }
    names[lay.eta_log_sd(j)] = std::string("log_sd_") + kEtaComponentNames[j];
  }
  for (int k = 0; k < lay.spline_size; ++k) {
    names[lay.beta(k)] = "beta[" + std::to_string(k + 1) + "]";
  }
  names[lay.phi_log_sd()] = "log_sd_phi";
  return names;
}

template <class S>
struct Constrained {
  std::vector<BasicCohortParams<S>> cohorts;
  std::array<std::vector<S>, 6> eta_u;  // unconstrained series after any reconstruction
  std::vector<S> beta;
  std::array<S, 6> eta_sd;
  S phi_sd;
  S log_jacobian;  // log |det| of the full z -> (params, beta, sds) map
};

// --- transforms ---

template <class S>
Constrained<S> constrain(std::span<const S> z, const ModelConfig& cfg, int n_cohorts) {
  using std::exp;
  const ParamLayout lay{n_cohorts, cfg.spline_size};
  if (static_cast<int>(z.size()) != lay.size()) {
    throw std::invalid_argument("parameter vector length does not match layout");
  }
  Constrained<S> out;
  out.log_jacobian = S(0.0);

  for (int j = 0; j < 6; ++j) {
    const S lsd = z[lay.eta_log_sd(j)];
    out.eta_sd[j] = exp(lsd);
    out.log_jacobian += lsd;
  }
  {
    const S lsd = z[lay.phi_log_sd()];
    out.phi_sd = exp(lsd);
    out.log_jacobian += lsd;
  }

  for (int j = 0; j < 6; ++j) {
    auto& u = out.eta_u[j];
    u.resize(n_cohorts);
    if (cfg.non_centered && n_cohorts > 1) {
      u[0] = z[lay.eta(j, 0)];
      for (int c = 1; c < n_cohorts; ++c) {
        u[c] = u[c - 1] + out.eta_sd[j] * z[lay.eta(j, c)];
      }
      out.log_jacobian += (n_cohorts - 1.0) * z[lay.eta_log_sd(j)];
    } else {
      for (int c = 0; c < n_cohorts; ++c) u[c] = z[lay.eta(j, c)];
    }
  }

  out.beta.resize(cfg.spline_size);
  if (cfg.non_centered && cfg.spline_size > 1) {
    out.beta[0] = z[lay.beta(0)];
    for (int k = 1; k < cfg.spline_size; ++k) {
      out.beta[k] = out.beta[k - 1] + out.phi_sd * z[lay.beta(k)];
    }
    out.log_jacobian += (cfg.spline_size - 1.0) * z[lay.phi_log_sd()];
  } else {
    for (int k = 0; k < cfg.spline_size; ++k) out.beta[k] = z[lay.beta(k)];
  }

  out.cohorts.resize(n_cohorts);
  for (int c = 0; c < n_cohorts; ++c) {
    auto& p = out.cohorts[c];
    const S& ut = out.eta_u[0][c];
    const S& up = out.eta_u[1][c];
    const S& us = out.eta_u[2][c];
    const S& ud = out.eta_u[3][c];
    const S& u1 = out.eta_u[4][c];
    const S& u2 = out.eta_u[5][c];
    p.theta = exp(ut);
    p.psi = logistic(up);
    p.mu_sum = 35.0 + exp(us);
    p.mu_diff = 2.0 + exp(ud);
    p.tau1 = exp(u1);
    p.tau2 = exp(u2);
    // d psi / d up = s(1-s); log s = -log1pexp(-up), log(1-s) = -log1pexp(up)
    out.log_jacobian += ut + us + ud + u1 + u2 - log1pexp(up) - log1pexp(-up);
  }
  return out;
}

inline std::vector<double> unconstrain(const Constrained<double>& con, const ModelConfig& cfg) {
  const int C = static_cast<int>(con.cohorts.size());
  const ParamLayout lay{C, cfg.spline_size};
  std::vector<double> z(lay.size());
  for (int j = 0; j < 6; ++j) z[lay.eta_log_sd(j)] = std::log(con.eta_sd[j]);
  z[lay.phi_log_sd()] = std::log(con.phi_sd);

  std::array<std::vector<double>, 6> u;
  for (auto& v : u) v.resize(C);
  for (int c = 0; c < C; ++c) {
    const auto& p = con.cohorts[c];
    u[0][c] = std::log(p.theta);
    u[1][c] = std::log(p.psi) - std::log1p(-p.psi);
    u[2][c] = std::log(p.mu_sum - 35.0);
    u[3][c] = std::log(p.mu_diff - 2.0);
    u[4][c] = std::log(p.tau1);
    u[5][c] = std::log(p.tau2);
  }
  for (int j = 0; j < 6; ++j) {
    if (cfg.non_centered && C > 1) {
      z[lay.eta(j, 0)] = u[j][0];
      for (int c = 1; c < C; ++c) {
        z[lay.eta(j, c)] = (u[j][c] - u[j][c - 1]) / con.eta_sd[j];
      }
    } else {
      for (int c = 0; c < C; ++c) z[lay.eta(j, c)] = u[j][c];
    }
  }
  if (cfg.non_centered && cfg.spline_size > 1) {
    z[lay.beta(0)] = con.beta[0];
    for (int k = 1; k < cfg.spline_size; ++k) {
      z[lay.beta(k)] = (con.beta[k] - con.beta[k - 1]) / con.phi_sd;
    }
  } else {
    for (int k = 0; k < cfg.spline_size; ++k) z[lay.beta(k)] = con.beta[k];
  }
  return z;
}

// --- mixture schedule ---

namespace detail {

// Per-cohort hoisted evaluator for one component's log midpoint density:
// the natural-parameter conversion happens once, each age costs a handful
// of tape nodes.
template <class S>
struct ComponentMass {
  Family family;
  S a0, a1, a2, a3;

  static ComponentMass make(Family fam, const S& loc, const S& spread) {
    using std::log;
    using fertcast::ad::log;  // no-op for double
    ComponentMass m;
    m.family = fam;
    switch (fam) {
      case Family::gamma: {
        const auto np = gamma_nat_from_mode_sd(loc, spread);
        m.a0 = np.p1 * log(np.p2) - lgamma_s(np.p1);
        m.a1 = np.p1 - 1.0;
        m.a2 = np.p2;
        break;
      }
      case Family::hadwiger: {
        const auto np = invgauss_nat_from_mean_sd(loc, spread);
        m.a0 = 0.5 * log(np.p2) - 0.5 * kLogTwoPi;
        m.a1 = np.p2 / (2.0 * np.p1 * np.p1);
        m.a2 = np.p1;
        break;
      }
      case Family::weibull: {
        const auto np = weibull_nat_from_median_uqd(loc, spread);
        m.a3 = np.p1 * log(np.p2);
        m.a0 = log(np.p1) - m.a3;
        m.a1 = np.p1 - 1.0;
        m.a2 = np.p1;
        break;
      }
    }
    return m;
  }

  S log_at(double x) const {
    using std::exp;
    const double lx = std::log(x);
    switch (family) {
      case Family::gamma:
        return a0 + a1 * lx - a2 * x;
      case Family::hadwiger: {
        const S d = a2 - x;
        return a0 - 1.5 * lx - a1 * d * d * (1.0 / x);
      }
      case Family::weibull:
        return a0 + a1 * lx - exp(a2 * lx - a3);
    }
    return S(0.0);
  }

 private:
  static double lgamma_s(double x) { return std::lgamma(x); }
  static ad::Var lgamma_s(const ad::Var& x) { return ad::lgamma(x); }
};

inline bool component_valid(Family fam, double loc, double spread) {
  if (!(spread > 0.0) || !std::isfinite(loc)) return false;
  if (fam == Family::gamma) {
    const double r = (loc + std::sqrt(loc * loc + 4.0 * spread * spread)) / (2.0 * spread * spread);
    return 1.0 + loc * r > 0.0;
  }
  return loc > 0.0;
}

template <class S>
std::vector<S> mixture_age_masses(const ComponentMass<S>& c1, const ComponentMass<S>& c2,
                                  const S& psi, const AgeGrid& grid) {
  using std::exp;
  std::vector<S> out;
  out.reserve(grid.n_ages());
  const S w2 = 1.0 - psi;
  for (int a = AgeGrid::kMinAge; a <= AgeGrid::kMaxAge; ++a) {
    const double x = a + 0.5;
    out.push_back(psi * exp(c1.log_at(x)) + w2 * exp(c2.log_at(x)));
  }
  return out;
}

}  // namespace detail

// Normalized cell schedule for an explicit pair of component specs.
template <class S>
std::vector<S> mixture_pasfr(const BasicComponentSpec<S>& spec1,
                             const BasicComponentSpec<S>& spec2, const S& psi,
                             const AgeGrid& grid) {
  auto c1 = detail::ComponentMass<S>::make(spec1.family, spec1.location, spec1.spread);
  auto c2 = detail::ComponentMass<S>::make(spec2.family, spec2.location, spec2.spread);
  const auto raw = detail::mixture_age_masses(c1, c2, psi, grid);
  std::vector<S> cell(grid.n_cells(), S(0.0));
  S total = S(0.0);
  for (int i = 0; i < grid.n_cells(); ++i) {
    for (int a = grid.cells[i].age_lo; a <= grid.cells[i].age_hi; ++a) {
      cell[i] += raw[a - AgeGrid::kMinAge];
    }
    total += cell[i];
  }
  const S inv = 1.0 / total;
  for (auto& v : cell) v *= inv;
  return cell;
}

// Cell schedule xi for one cohort's parameters (Sum over cells = 1).
template <class S>
std::vector<S> pasfr(const BasicCohortParams<S>& p, const AgeGrid& grid, Family family1,
                     Family family2) {
  const BasicComponentSpec<S> s1{family1, p.mu1(), p.tau1};
  const BasicComponentSpec<S> s2{family2, p.mu2(), p.tau2};
  return mixture_pasfr(s1, s2, p.psi, grid);
}

// Expected births per woman falling in each cell, f = theta * xi; sums to
// theta across cells.  On a single-age grid these are the age-specific rates;
// for an aggregate cell divide by its age span to get the occurrence/exposure
// rate that matches births/exposure.
template <class S>
std::vector<S> rates(const S& theta, const std::vector<S>& xi) {
  std::vector<S> f;
  f.reserve(xi.size());
  for (const auto& x : xi) f.push_back(theta * x);
  return f;
}

// --- dispersion ---

// Log dispersion at each cell's midpoint age.
inline std::vector<double> dispersion_at_cells(const DispersionSpline& sp, const AgeGrid& grid) {
  if (static_cast<int>(sp.beta.size()) != sp.basis.size()) {
    throw std::invalid_argument("spline coefficient count does not match basis");
  }
  std::vector<double> phi(grid.n_cells());
  for (int i = 0; i < grid.n_cells(); ++i) {
    const auto row = sp.basis.row(grid.cells[i].midpoint());
    double v = 0.0;
    for (int k = 0; k < sp.basis.size(); ++k) v += sp.beta[k] * row[k];
    phi[i] = v;
  }
  return phi;
}

// --- negative binomial ---

namespace detail {

inline double nb_log_pmf_core(double y, double m, double phi) {
  return std::lgamma(y + phi) - std::lgamma(phi) - std::lgamma(y + 1.0) -
         (y + phi) * std::log1p(m / phi) + y * (std::log(m) - std::log(phi));
}

// Fused tape node: one entry with analytic partials in (m, phi).
inline ad::Var nb_log_pmf_core(double y, const ad::Var& m, const ad::Var& phi) {
  const double mv = ad::value(m), pv = ad::value(phi);
  const double val = nb_log_pmf_core(y, mv, pv);
  ad::Tape* t = m.tape ? m.tape : phi.tape;
  if (!t) return ad::Var(val);
  const double dm = y / mv - (y + pv) / (pv + mv);
  const double dphi = digamma(y + pv) - digamma(pv) - std::log1p(mv / pv) + (mv - y) / (pv + mv);
  return ad::Var(t, t->push2(dm, m.idx, dphi, phi.idx), val);
}

}  // namespace detail

// log P(Y = y) for the negative binomial with mean m and dispersion phi
// (variance m + m^2/phi).
inline double nb_log_pmf(double y, double m, double phi) {
  if (!(y >= 0.0) || std::floor(y) != y || !std::isfinite(y)) {
    throw std::domain_error("nb_log_pmf: y must be a non-negative integer");
  }
  if (!(m > 0.0) || !(phi > 0.0)) {
    throw std::domain_error("nb_log_pmf: mean and dispersion must be positive");
  }
  return detail::nb_log_pmf_core(y, m, phi);
}

// Moment-matched negative binomial for a sum of independent NB cells:
// mean M = sum m_i, dispersion M^2 / (V - M) with V the summed variances.
template <class S>
std::pair<S, S> aggregate_nb(const std::vector<std::pair<S, S>>& cells) {
  if (cells.empty()) throw std::invalid_argument("aggregate_nb: no cells");
  if (cells.size() == 1) return cells.front();
  S M = S(0.0), excess = S(0.0);  // excess = V - M = sum m_i^2 / phi_i
  for (const auto& [m, phi] : cells) {
    M += m;
    excess += m * m / phi;
  }
  return {M, M * M / excess};
}

// Moment-matched log dispersion per cell given per-age means (indexed from
// age 12); aggregate cells combine their single-age negative binomials.
inline std::vector<double> dispersion_at_cells(const DispersionSpline& sp, const AgeGrid& grid,
                                               const std::vector<double>& age_means) {
  if (static_cast<int>(age_means.size()) != grid.n_ages()) {
    throw std::invalid_argument("age_means must cover every single age");
  }
  std::vector<double> phi(grid.n_cells());
  for (int i = 0; i < grid.n_cells(); ++i) {
    const AgeCell& cell = grid.cells[i];
    if (cell.n_ages() == 1) {
      const auto row = sp.basis.row(cell.midpoint());
      double v = 0.0;
      for (int k = 0; k < sp.basis.size(); ++k) v += sp.beta[k] * row[k];
      phi[i] = v;
      continue;
    }
    std::vector<std::pair<double, double>> parts;
    for (int a = cell.age_lo; a <= cell.age_hi; ++a) {
      const auto row = sp.basis.row(a + 0.5);
      double v = 0.0;
      for (int k = 0; k < sp.basis.size(); ++k) v += sp.beta[k] * row[k];
      parts.emplace_back(age_means[a - AgeGrid::kMinAge], std::exp(v));
    }
    phi[i] = std::log(aggregate_nb(parts).second);
  }
  return phi;
}

// --- priors ---

namespace detail {

template <class S>
S normal_lpdf(const S& x, double mean, double sd) {
  const double c = -0.5 * kLogTwoPi - std::log(sd);
  const S d = (x - mean) * (1.0 / sd);
  return c - 0.5 * d * d;
}

template <class S>
S half_normal_lpdf(const S& x, double scale) {
  return kLn2 + normal_lpdf(x, 0.0, scale);
}

}  // namespace detail

// Random-walk log prior: Normal first element, Normal increments.
template <class S>
S rw_log_prior(const std::vector<S>& series, const S& sd, double first_mean, double first_sd) {
  if (series.empty()) throw std::invalid_argument("rw_log_prior: empty series");
  using std::log;
  S lp = detail::normal_lpdf(series[0], first_mean, first_sd);
  const int n = static_cast<int>(series.size());
  if (n > 1) {
    const S inv = 1.0 / sd;
    S ss = S(0.0);
    for (int c = 1; c < n; ++c) {
      const S d = (series[c] - series[c - 1]) * inv;
      ss += d * d;
    }
    lp += -(n - 1) * 0.5 * detail::kLogTwoPi - (n - 1.0) * log(sd) - 0.5 * ss;
  }
  return lp;
}

// --- joint posterior ---

class Model {
 public:
  Model(FertilityDataset data, ModelConfig config)
      : data_(std::move(data)), cfg_(std::move(config)), basis_(age_spline_basis(cfg_.spline_size)) {
    cfg_.validate();
    data_.canonicalize();
    if (data_.cohorts.empty()) throw std::invalid_argument("dataset has no cohorts");
    lay_ = ParamLayout{data_.n_cohorts(), cfg_.spline_size};
    for (int a = AgeGrid::kMinAge; a <= AgeGrid::kMaxAge; ++a) {
      age_basis_.push_back(basis_.row(a + 0.5));
    }
  }

  const ParamLayout& layout() const { return lay_; }
  int dim() const { return lay_.size(); }
  const FertilityDataset& data() const { return data_; }
  const ModelConfig& config() const { return cfg_; }
  const BsplineBasis& basis() const { return basis_; }

  template <class S>
  S eval(std::span<const S> z) const {
    using std::exp;
    using ad::value;
    constexpr double kNegInf = -std::numeric_limits<double>::infinity();
    const auto con = constrain(z, cfg_, lay_.n_cohorts);

    // Log dispersion per single age; bail out where exp would overflow.
    std::vector<S> phi_age;
    phi_age.reserve(data_.grid.n_ages());
    for (int a = 0; a < data_.grid.n_ages(); ++a) {
      S v = S(0.0);
      const auto& row = age_basis_[a];
      for (int k = 0; k < cfg_.spline_size; ++k) {
        if (row[k] != 0.0) v += con.beta[k] * row[k];
      }
      if (!(std::fabs(value(v)) < 700.0)) return S(kNegInf);
      phi_age.push_back(exp(v));
    }

    S loglik = S(0.0);
    for (int c = 0; c < lay_.n_cohorts; ++c) {
      const auto& p = con.cohorts[c];
      const double mu1v = value(p.mu1()), mu2v = value(p.mu2());
      if (!detail::component_valid(cfg_.family1, mu1v, value(p.tau1)) ||
          !detail::component_valid(cfg_.family2, mu2v, value(p.tau2))) {
        return S(kNegInf);
      }
      auto c1 = detail::ComponentMass<S>::make(cfg_.family1, p.mu1(), p.tau1);
      auto c2 = detail::ComponentMass<S>::make(cfg_.family2, p.mu2(), p.tau2);
      const auto raw = detail::mixture_age_masses(c1, c2, p.psi, data_.grid);
      S total = S(0.0);
      for (const auto& r : raw) total += r;
      if (!(value(total) > 0.0) || !std::isfinite(value(total))) return S(kNegInf);
      const S scale = p.theta / total;  // rate per unit of raw mass

      const auto& cd = data_.cohorts[c];
      for (int i = 0; i < data_.grid.n_cells(); ++i) {
        if (!cd.observed[i]) continue;
        const AgeCell& cell = data_.grid.cells[i];
        const double R = cd.exposure[i];
        if (cell.n_ages() == 1) {
          const S m = raw[cell.age_lo - AgeGrid::kMinAge] * scale * R;
          if (!(value(m) > 0.0) || !std::isfinite(value(m))) return S(kNegInf);
          loglik += detail::nb_log_pmf_core(cd.births[i], m, phi_age[cell.age_lo - AgeGrid::kMinAge]);
        } else {
          // Exposure is split uniformly across the ages of an aggregate
          // cell; the cell count is the moment-matched sum of its ages.
          const S sc = scale * (R / cell.n_ages());
          S M = S(0.0), excess = S(0.0);
          for (int a = cell.age_lo; a <= cell.age_hi; ++a) {
            const int ai = a - AgeGrid::kMinAge;
            const S m = raw[ai] * sc;
            M += m;
            excess += m * m / phi_age[ai];
          }
          if (!(value(M) > 0.0) || !std::isfinite(value(M))) return S(kNegInf);
          const S phi_agg = M * M / excess;
          // squared means can overflow or underflow past what the dispersion
          // can absorb; treat either extreme as an impossible point
          if (!(value(phi_agg) > 0.0) || !std::isfinite(value(phi_agg))) return S(kNegInf);
          loglik += detail::nb_log_pmf_core(cd.births[i], M, phi_agg);
        }
      }
    }

    // Random-walk priors live on the unconstrained scale, so only the sd
    // transforms contribute a change-of-variables term.
    S lp = loglik;
    for (int j = 0; j < 6; ++j) {
      const auto [fm, fs] = cfg_.first_prior(j);
      if (cfg_.non_centered && lay_.n_cohorts > 1) {
        lp += detail::normal_lpdf(con.eta_u[j][0], fm, fs);
        for (int c = 1; c < lay_.n_cohorts; ++c) {
          lp += detail::normal_lpdf(z[lay_.eta(j, c)], 0.0, 1.0);
        }
      } else {
        lp += rw_log_prior(con.eta_u[j], con.eta_sd[j], fm, fs);
      }
      lp += detail::half_normal_lpdf(con.eta_sd[j], cfg_.eta_sd_scale[j]);
      lp += z[lay_.eta_log_sd(j)];
    }
    if (cfg_.non_centered && cfg_.spline_size > 1) {
      lp += detail::normal_lpdf(con.beta[0], cfg_.beta_first_mean, cfg_.beta_first_sd);
      for (int k = 1; k < cfg_.spline_size; ++k) {
        lp += detail::normal_lpdf(z[lay_.beta(k)], 0.0, 1.0);
      }
    } else {
      lp += rw_log_prior(con.beta, con.phi_sd, cfg_.beta_first_mean, cfg_.beta_first_sd);
    }
    lp += detail::half_normal_lpdf(con.phi_sd, cfg_.phi_sd_scale);
    lp += z[lay_.phi_log_sd()];
    return lp;
  }

  double log_posterior(std::span<const double> z) const { return eval<double>(z); }

  // Value plus gradient via one taped evaluation. Not thread-safe across
  // concurrent calls on the same instance; give each chain its own Model.
  double value_and_grad(std::span<const double> z, std::vector<double>& grad) const {
    const int n = dim();
    tape_.clear();
    tape_.reserve(1024 + 1100 * static_cast<std::size_t>(lay_.n_cohorts) + 8 * n);
    vars_.clear();
    vars_.reserve(n);
    for (int i = 0; i < n; ++i) vars_.push_back(ad::leaf(tape_, z[i]));
    const ad::Var out = eval<ad::Var>(std::span<const ad::Var>(vars_));
    grad.assign(n, 0.0);
    if (out.idx < 0) return ad::value(out);
    tape_.gradient(out.idx, adj_);
    for (int i = 0; i < n; ++i) grad[i] = adj_[vars_[i].idx];
    return ad::value(out);
  }

  // Prior-centered starting point: constant walks at their first-element
  // means, innovation sds a bit below their prior scales.
  std::vector<double> initial_mean() const {
    std::vector<double> z(lay_.size(), 0.0);
    for (int j = 0; j < 6; ++j) {
      const auto [fm, fs] = cfg_.first_prior(j);
      if (cfg_.non_centered) {
        z[lay_.eta(j, 0)] = fm;
      } else {
        for (int c = 0; c < lay_.n_cohorts; ++c) z[lay_.eta(j, c)] = fm;
      }
      z[lay_.eta_log_sd(j)] = std::log(cfg_.eta_sd_scale[j]) - 1.0;
    }
    if (cfg_.non_centered) {
      z[lay_.beta(0)] = cfg_.beta_first_mean;
    } else {
      for (int k = 0; k < cfg_.spline_size; ++k) z[lay_.beta(k)] = cfg_.beta_first_mean;
    }
    z[lay_.phi_log_sd()] = std::log(cfg_.phi_sd_scale) - 1.0;
    return z;
  }

 private:
  FertilityDataset data_;
  ModelConfig cfg_;
  BsplineBasis basis_;
  ParamLayout lay_;
  std::vector<std::vector<double>> age_basis_;
  mutable ad::Tape tape_;
  mutable std::vector<ad::Var> vars_;
  mutable std::vector<double> adj_;
};

inline double log_posterior(std::span<const double> z, const FertilityDataset& data,
                            const ModelConfig& cfg) {
  return Model(data, cfg).log_posterior(z);
}

inline std::vector<double> log_posterior_grad(std::span<const double> z,
                                              const FertilityDataset& data,
                                              const ModelConfig& cfg) {
  Model m(data, cfg);
  std::vector<double> g;
  m.value_and_grad(z, g);
  return g;
}

}  // namespace fertcast
