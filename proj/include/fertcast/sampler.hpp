#pragma once

// No-U-Turn sampler over a caller-supplied log density and gradient.
//
// The transition is the multinomial variant: trajectories grow by doubling
// until a U-turn or divergence, and the next state is drawn from the whole
// trajectory with Boltzmann weights.  Warmup interleaves dual-averaging step
// size adaptation with an expanding-window estimate of a diagonal metric.
// Chains are run sequentially with independent RNG streams derived from the
// base seed, so results are reproducible for a fixed seed regardless of how
// the work would be scheduled.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fertcast/rng.hpp"

namespace fertcast {

using LogPostFn = std::function<double(const std::vector<double>&)>;
// Fills the gradient and returns the log density.
using GradFn = std::function<double(const std::vector<double>&, std::vector<double>&)>;

struct SamplerConfig {
  int chains = 4;
  int iterations = 10000;
  int warmup = -1;  // -1 picks half of iterations
  double target_accept = 0.95;
  int max_depth = 12;
  int thin = 4;
  std::uint64_t seed = 0;
  double init_jitter = 2.0;

  int resolved_warmup() const { return warmup < 0 ? iterations / 2 : warmup; }
  int retained_per_chain() const { return (iterations - resolved_warmup()) / thin; }

  void validate() const {
    if (chains < 1) throw std::invalid_argument("need at least one chain");
    if (!(target_accept > 0.0) || !(target_accept < 1.0)) {
      throw std::invalid_argument("target acceptance must be in (0, 1)");
    }
    if (resolved_warmup() >= iterations || resolved_warmup() < 0) {
      throw std::invalid_argument("warmup must be shorter than the run");
    }
    if (thin < 1) throw std::invalid_argument("thinning factor must be >= 1");
    if (max_depth < 1 || max_depth > 20) throw std::invalid_argument("max depth out of range");
  }
};

// Everything the sampler needs to know about the target.  The callables must
// remain valid for the duration of the run.
struct TargetModel {
  int dim = 0;
  LogPostFn log_post;
  GradFn value_and_grad;
  std::vector<double> init_mean;           // center of the initialization jitter
  std::vector<std::string> param_names;    // optional; used when persisting draws
};

template <class M>
TargetModel make_target(const M& model) {
  TargetModel t;
  t.dim = model.dim();
  t.init_mean = model.initial_mean();
  t.log_post = [&model](const std::vector<double>& q) { return model.log_posterior(q); };
  t.value_and_grad = [&model](const std::vector<double>& q, std::vector<double>& g) {
    return model.value_and_grad(q, g);
  };
  return t;
}

struct IterationStats {
  bool divergent = false;
  int depth = 0;
  int n_leapfrog = 0;
  double step_size = 0.0;
  double accept = 0.0;        // mean Metropolis statistic over the trajectory
  double energy = 0.0;        // Hamiltonian at the accepted state
  double energy_error = 0.0;  // accepted-state Hamiltonian minus the initial one
};

struct Draws {
  int n_params = 0;
  std::vector<std::string> param_names;
  std::vector<std::vector<double>> chain_values;  // [chain][iter * n_params + p]
  std::vector<std::vector<IterationStats>> chain_stats;
  std::vector<int> warmup_divergences;  // all warmup transitions
  std::vector<int> post_divergences;    // all post-warmup transitions, thinned or not
  std::vector<double> adapted_step;
  std::vector<std::vector<double>> adapted_metric;  // inverse (variance) scale

  int n_chains() const { return static_cast<int>(chain_values.size()); }
  int n_retained() const {
    return chain_values.empty() ? 0 : static_cast<int>(chain_values[0].size()) / n_params;
  }
  double value(int chain, int iter, int param) const {
    return chain_values[chain][static_cast<std::size_t>(iter) * n_params + param];
  }
  // All retained draws of one parameter within one chain, in iteration order.
  std::vector<double> column(int chain, int param) const {
    const int n = n_retained();
    std::vector<double> out(n);
    for (int i = 0; i < n; ++i) out[i] = value(chain, i, param);
    return out;
  }
  int total_retained() const { return n_chains() * n_retained(); }
};

// Position/momentum pair with the cached density and gradient at the position.
struct PhasePoint {
  std::vector<double> position;
  std::vector<double> momentum;
  std::vector<double> gradient;
  double log_post = 0.0;
};

inline PhasePoint make_phase_point(std::vector<double> q, std::vector<double> p,
                                   const GradFn& grad_fn) {
  PhasePoint s;
  s.position = std::move(q);
  s.momentum = std::move(p);
  s.log_post = grad_fn(s.position, s.gradient);
  return s;
}

inline double hamiltonian(const PhasePoint& s, const std::vector<double>& inv_metric) {
  double kinetic = 0.0;
  for (std::size_t i = 0; i < s.momentum.size(); ++i) {
    kinetic += inv_metric[i] * s.momentum[i] * s.momentum[i];
  }
  return -s.log_post + 0.5 * kinetic;
}

// One half-kick / drift / half-kick update.  `step` may be negative to
// integrate backwards in time.
inline void leapfrog_step(PhasePoint& s, double step, const GradFn& grad_fn,
                          const std::vector<double>& inv_metric) {
  const std::size_t n = s.position.size();
  for (std::size_t i = 0; i < n; ++i) s.momentum[i] += 0.5 * step * s.gradient[i];
  for (std::size_t i = 0; i < n; ++i) s.position[i] += step * inv_metric[i] * s.momentum[i];
  s.log_post = grad_fn(s.position, s.gradient);
  for (std::size_t i = 0; i < n; ++i) s.momentum[i] += 0.5 * step * s.gradient[i];
}

namespace detail {

constexpr double kDivergenceThreshold = 1000.0;

inline double log_add_exp(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  const double hi = std::max(a, b);
  return hi + std::log1p(std::exp(std::min(a, b) - hi));
}

inline bool uturn(const PhasePoint& minus, const PhasePoint& plus,
                  const std::vector<double>& inv_metric) {
  double dot_minus = 0.0, dot_plus = 0.0;
  for (std::size_t i = 0; i < minus.position.size(); ++i) {
    const double rho = plus.position[i] - minus.position[i];
    dot_minus += rho * inv_metric[i] * minus.momentum[i];
    dot_plus += rho * inv_metric[i] * plus.momentum[i];
  }
  return dot_minus <= 0.0 || dot_plus <= 0.0;
}

struct Subtree {
  PhasePoint minus, plus;  // trajectory edges of this subtree
  PhasePoint prop;         // multinomial proposal drawn from it
  double prop_energy = 0.0;
  double log_sum_w = -std::numeric_limits<double>::infinity();
  double sum_accept = 0.0;
  long n_accept = 0;
  long n_leapfrog = 0;
  bool divergent = false;
  bool turning = false;
};

inline double safe_log_uniform(std::mt19937_64& eng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return std::log(std::max(u(eng), 1e-300));
}

inline Subtree build_tree(int depth, const PhasePoint& edge, double step, double h0,
                          const GradFn& grad_fn, const std::vector<double>& inv_metric,
                          std::mt19937_64& eng) {
  if (depth == 0) {
    Subtree leaf;
    leaf.prop = edge;
    leapfrog_step(leaf.prop, step, grad_fn, inv_metric);
    const double h = hamiltonian(leaf.prop, inv_metric);
    const double delta = h - h0;
    leaf.n_leapfrog = 1;
    leaf.n_accept = 1;
    // treat NaN energies as divergent
    if (!(delta <= kDivergenceThreshold)) {
      leaf.divergent = true;
      leaf.sum_accept = 0.0;
      return leaf;
    }
    leaf.minus = leaf.prop;
    leaf.plus = leaf.prop;
    leaf.prop_energy = h;
    leaf.log_sum_w = -delta;
    leaf.sum_accept = std::min(1.0, std::exp(-delta));
    return leaf;
  }

  Subtree first = build_tree(depth - 1, edge, step, h0, grad_fn, inv_metric, eng);
  if (first.divergent || first.turning) return first;

  // grow from the far edge in the direction of travel
  const PhasePoint& far = step > 0.0 ? first.plus : first.minus;
  Subtree second = build_tree(depth - 1, far, step, h0, grad_fn, inv_metric, eng);

  Subtree merged;
  merged.n_leapfrog = first.n_leapfrog + second.n_leapfrog;
  merged.sum_accept = first.sum_accept + second.sum_accept;
  merged.n_accept = first.n_accept + second.n_accept;
  if (second.divergent || second.turning) {
    merged.divergent = second.divergent;
    merged.turning = second.turning;
    return merged;
  }
  merged.log_sum_w = log_add_exp(first.log_sum_w, second.log_sum_w);
  const bool take_second = safe_log_uniform(eng) < second.log_sum_w - merged.log_sum_w;
  merged.prop = take_second ? std::move(second.prop) : std::move(first.prop);
  merged.prop_energy = take_second ? second.prop_energy : first.prop_energy;
  if (step > 0.0) {
    merged.minus = std::move(first.minus);
    merged.plus = std::move(second.plus);
  } else {
    merged.minus = std::move(second.minus);
    merged.plus = std::move(first.plus);
  }
  merged.turning = uturn(merged.minus, merged.plus, inv_metric);
  return merged;
}

// Classic dual-averaging controller for the log step size.
struct DualAverage {
  double mu = 0.0;
  double log_eps = 0.0;
  double log_eps_bar = 0.0;
  double h_bar = 0.0;
  long count = 0;
  static constexpr double kGamma = 0.05;
  static constexpr double kT0 = 10.0;
  static constexpr double kKappa = 0.75;

  void init(double eps0) {
    mu = std::log(10.0 * eps0);
    log_eps = std::log(eps0);
    log_eps_bar = log_eps;
    h_bar = 0.0;
    count = 0;
  }
  void update(double accept, double target) {
    ++count;
    const double eta = 1.0 / (count + kT0);
    h_bar = (1.0 - eta) * h_bar + eta * (target - accept);
    log_eps = mu - std::sqrt(static_cast<double>(count)) / kGamma * h_bar;
    const double w = std::pow(static_cast<double>(count), -kKappa);
    log_eps_bar = w * log_eps + (1.0 - w) * log_eps_bar;
  }
  double current() const { return std::exp(log_eps); }
  double averaged() const { return std::exp(log_eps_bar); }
};

struct RunningVariance {
  long n = 0;
  std::vector<double> mean, m2;

  void reset(int dim) {
    n = 0;
    mean.assign(dim, 0.0);
    m2.assign(dim, 0.0);
  }
  void add(const std::vector<double>& x) {
    ++n;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double d = x[i] - mean[i];
      mean[i] += d / n;
      m2[i] += d * (x[i] - mean[i]);
    }
  }
  // Shrunk toward a small scalar the way warmup estimators usually are,
  // which keeps early windows from committing to noisy scales.
  std::vector<double> regularized() const {
    std::vector<double> out(mean.size(), 1.0);
    if (n < 2) return out;
    const double w = static_cast<double>(n) / (n + 5.0);
    for (std::size_t i = 0; i < mean.size(); ++i) {
      const double var = m2[i] / (n - 1);
      out[i] = var > 0.0 ? w * var + 1e-3 * (1.0 - w) : 1.0;
    }
    return out;
  }
};

inline double find_initial_step(const PhasePoint& start, const GradFn& grad_fn,
                                const std::vector<double>& inv_metric, std::mt19937_64& eng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  PhasePoint probe = start;
  for (std::size_t i = 0; i < probe.momentum.size(); ++i) {
    probe.momentum[i] = nd(eng) / std::sqrt(inv_metric[i]);
  }
  const double h0 = hamiltonian(probe, inv_metric);
  double eps = 1.0;
  auto accept_prob = [&](double step) {
    PhasePoint trial = probe;
    leapfrog_step(trial, step, grad_fn, inv_metric);
    const double dh = h0 - hamiltonian(trial, inv_metric);
    return std::isfinite(dh) ? std::exp(std::min(0.0, dh)) : 0.0;
  };
  const double dir = accept_prob(eps) > 0.5 ? 2.0 : 0.5;
  for (int it = 0; it < 60; ++it) {
    const double p = accept_prob(eps);
    if (dir > 1.0 ? p <= 0.5 : p >= 0.5) break;
    eps *= dir;
    if (eps > 1e3 || eps < 1e-10) break;
  }
  return std::min(std::max(eps, 1e-10), 1e3);
}

// Variance-update window boundaries within warmup: a settling buffer, then
// doubling windows, then a terminal buffer that only tunes the step size.
inline std::vector<int> window_closes(int warmup, int init_buf, int term_buf, int base) {
  std::vector<int> closes;
  if (warmup < init_buf + term_buf + base) return closes;
  int start = init_buf;
  int width = base;
  while (true) {
    int end = start + width;
    if (end + 2 * width >= warmup - term_buf) {
      closes.push_back(warmup - term_buf);
      break;
    }
    closes.push_back(end);
    start = end;
    width *= 2;
  }
  return closes;
}

}  // namespace detail

// One NUTS update from `state`; the momentum is refreshed internally.  On
// return `state` holds the next position with its density and gradient.
inline IterationStats nuts_transition(PhasePoint& state, const GradFn& grad_fn, double step,
                                      int max_depth, const std::vector<double>& inv_metric,
                                      std::mt19937_64& eng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  for (std::size_t i = 0; i < state.momentum.size(); ++i) {
    state.momentum[i] = nd(eng) / std::sqrt(inv_metric[i]);
  }
  const double h0 = hamiltonian(state, inv_metric);

  PhasePoint minus = state, plus = state;
  PhasePoint prop = state;
  double prop_energy = h0;
  double log_sum_w = 0.0;  // weight 1 for the starting point
  double sum_accept = 0.0;
  long n_accept = 0;
  IterationStats stats;
  stats.step_size = step;

  std::uniform_real_distribution<double> u01(0.0, 1.0);
  int depth = 0;
  while (depth < max_depth) {
    const double dir = u01(eng) < 0.5 ? -1.0 : 1.0;
    const PhasePoint& edge = dir > 0.0 ? plus : minus;
    detail::Subtree sub =
        detail::build_tree(depth, edge, dir * step, h0, grad_fn, inv_metric, eng);
    stats.n_leapfrog += static_cast<int>(sub.n_leapfrog);
    sum_accept += sub.sum_accept;
    n_accept += sub.n_accept;
    if (sub.divergent) {
      stats.divergent = true;
      break;
    }
    if (sub.turning) break;
    // biased progressive sampling: favor the fresh subtree
    if (detail::safe_log_uniform(eng) < sub.log_sum_w - log_sum_w) {
      prop = sub.prop;
      prop_energy = sub.prop_energy;
    }
    log_sum_w = detail::log_add_exp(log_sum_w, sub.log_sum_w);
    if (dir > 0.0) {
      plus = std::move(sub.plus);
    } else {
      minus = std::move(sub.minus);
    }
    ++depth;
    if (detail::uturn(minus, plus, inv_metric)) break;
  }
  stats.depth = depth;
  stats.accept = n_accept > 0 ? sum_accept / n_accept : 0.0;
  stats.energy = prop_energy;
  stats.energy_error = prop_energy - h0;
  state = std::move(prop);
  return stats;
}

inline Draws run_chains(const TargetModel& target, const SamplerConfig& cfg) {
  cfg.validate();
  if (target.dim <= 0) throw std::invalid_argument("target dimension must be positive");
  if (static_cast<int>(target.init_mean.size()) != target.dim) {
    throw std::invalid_argument("init_mean length does not match dimension");
  }

  const int warmup = cfg.resolved_warmup();
  const int post = cfg.iterations - warmup;
  const int retained = cfg.retained_per_chain();

  Draws draws;
  draws.n_params = target.dim;
  draws.param_names = target.param_names;
  draws.chain_values.resize(cfg.chains);
  draws.chain_stats.resize(cfg.chains);
  draws.warmup_divergences.assign(cfg.chains, 0);
  draws.post_divergences.assign(cfg.chains, 0);
  draws.adapted_step.assign(cfg.chains, 0.0);
  draws.adapted_metric.resize(cfg.chains);

  for (int chain = 0; chain < cfg.chains; ++chain) {
    auto eng = make_engine(cfg.seed, static_cast<std::uint64_t>(chain));
    std::uniform_real_distribution<double> jitter(-cfg.init_jitter, cfg.init_jitter);

    // jittered initialization around the supplied center
    std::vector<double> q(target.dim);
    bool found = false;
    for (int attempt = 0; attempt < 100 && !found; ++attempt) {
      for (int i = 0; i < target.dim; ++i) q[i] = target.init_mean[i] + jitter(eng);
      found = std::isfinite(target.log_post(q));
    }
    if (!found) {
      throw std::runtime_error("chain " + std::to_string(chain) +
                               ": no finite starting point after 100 draws");
    }
    PhasePoint state = make_phase_point(q, std::vector<double>(target.dim, 0.0),
                                        target.value_and_grad);

    std::vector<double> inv_metric(target.dim, 1.0);
    detail::DualAverage da;
    da.init(detail::find_initial_step(state, target.value_and_grad, inv_metric, eng));
    detail::RunningVariance rv;
    rv.reset(target.dim);
    auto closes = detail::window_closes(warmup, 75, 50, 25);
    std::size_t next_close = 0;
    const int collect_from = 75;
    const int collect_to = closes.empty() ? 0 : closes.back();

    for (int s = 0; s < warmup; ++s) {
      const auto st = nuts_transition(state, target.value_and_grad, da.current(), cfg.max_depth,
                                      inv_metric, eng);
      draws.warmup_divergences[chain] += st.divergent ? 1 : 0;
      da.update(st.accept, cfg.target_accept);
      if (!closes.empty() && s >= collect_from && s < collect_to) {
        rv.add(state.position);
        if (next_close < closes.size() && s + 1 == closes[next_close]) {
          inv_metric = rv.regularized();
          rv.reset(target.dim);
          ++next_close;
          da.init(da.current());
        }
      }
    }
    const double step = warmup > 0 ? da.averaged() : da.current();
    draws.adapted_step[chain] = step;
    draws.adapted_metric[chain] = inv_metric;

    auto& values = draws.chain_values[chain];
    auto& stats = draws.chain_stats[chain];
    values.reserve(static_cast<std::size_t>(retained) * target.dim);
    stats.reserve(retained);
    for (int s = 0; s < post; ++s) {
      const auto st =
          nuts_transition(state, target.value_and_grad, step, cfg.max_depth, inv_metric, eng);
      draws.post_divergences[chain] += st.divergent ? 1 : 0;
      if (s % cfg.thin == cfg.thin - 1 && static_cast<int>(stats.size()) < retained) {
        values.insert(values.end(), state.position.begin(), state.position.end());
        stats.push_back(st);
      }
    }
  }
  return draws;
}

}  // namespace fertcast
