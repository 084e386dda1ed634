#pragma once

// Convergence and model-comparison diagnostics over retained draws: split
// potential-scale-reduction, Pareto-smoothed importance sampling for
// leave-one-out comparison, the bounded refit protocol for unreliable points,
// and chain clustering for multimodal posteriors.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <utility>
#include <vector>

#include "fertcast/sampler.hpp"

namespace fertcast {

struct RhatResult {
  double value = 1.0;
  bool degenerate = false;  // zero total variance
};

// Split potential-scale-reduction: each chain contributes its two halves.
inline RhatResult split_rhat(const std::vector<std::vector<double>>& chains) {
  if (chains.size() < 2) throw std::invalid_argument("split_rhat needs at least two chains");
  const std::size_t n = chains[0].size();
  for (const auto& c : chains) {
    if (c.size() != n) throw std::invalid_argument("split_rhat needs equal-length chains");
  }
  if (n < 4) throw std::invalid_argument("split_rhat needs at least four draws per chain");

  const std::size_t half = n / 2;
  std::vector<double> means, vars;
  for (const auto& c : chains) {
    for (int part = 0; part < 2; ++part) {
      // drop the middle draw when the length is odd
      const std::size_t begin = part == 0 ? 0 : n - half;
      double m = 0.0;
      for (std::size_t i = 0; i < half; ++i) m += c[begin + i];
      m /= half;
      double v = 0.0;
      for (std::size_t i = 0; i < half; ++i) {
        v += (c[begin + i] - m) * (c[begin + i] - m);
      }
      means.push_back(m);
      vars.push_back(v / (half - 1));
    }
  }
  const std::size_t m_half = means.size();
  double w = 0.0;
  for (double v : vars) w += v;
  w /= m_half;
  double grand = 0.0;
  for (double v : means) grand += v;
  grand /= m_half;
  double b = 0.0;
  for (double v : means) b += (v - grand) * (v - grand);
  b *= static_cast<double>(half) / (m_half - 1);

  if (!(w > 0.0)) return {1.0, true};
  const double var_plus = (half - 1.0) / half * w + b / half;
  return {std::sqrt(var_plus / w), false};
}

inline RhatResult split_rhat(const Draws& draws, int param) {
  std::vector<std::vector<double>> chains;
  for (int c = 0; c < draws.n_chains(); ++c) chains.push_back(draws.column(c, param));
  return split_rhat(chains);
}

struct GpdFit {
  double k = 0.0;
  double sigma = 0.0;
  bool degenerate() const { return k == -std::numeric_limits<double>::infinity(); }
};

// Profile-likelihood generalized-Pareto fit to exceedances (Zhang–Stephens
// grid posterior), with a weak prior pulling the shape toward 0.5.
inline GpdFit gpd_fit_tail(std::vector<double> exceedances) {
  const std::size_t n = exceedances.size();
  if (n < 5) throw std::invalid_argument("tail fit needs at least five exceedances");
  std::sort(exceedances.begin(), exceedances.end());
  const double hi = exceedances.back();
  if (!(hi - exceedances.front() > 0.0) || !(hi > 0.0)) {
    return {-std::numeric_limits<double>::infinity(), 0.0};
  }

  const int grid = 30 + static_cast<int>(std::floor(std::sqrt(static_cast<double>(n))));
  std::size_t q_idx = static_cast<std::size_t>(std::floor(n / 4.0 + 0.5));
  q_idx = q_idx > 0 ? q_idx - 1 : 0;
  double xstar = exceedances[q_idx];
  if (!(xstar > 0.0)) xstar = hi;

  auto k_of_theta = [&](double theta) {
    double s = 0.0;
    for (double x : exceedances) s += std::log1p(-theta * x);
    return s / n;
  };

  std::vector<double> thetas(grid), logliks(grid);
  double max_l = -std::numeric_limits<double>::infinity();
  for (int j = 0; j < grid; ++j) {
    const double t =
        1.0 / hi + (1.0 - std::sqrt(grid / (j + 0.5))) / (3.0 * xstar);
    thetas[j] = t;
    const double kj = k_of_theta(t);
    logliks[j] = (t != 0.0 && kj != 0.0) ? n * (std::log(-t / kj) - kj - 1.0)
                                         : -std::numeric_limits<double>::infinity();
    max_l = std::max(max_l, logliks[j]);
  }
  double wsum = 0.0, theta_hat = 0.0;
  for (int j = 0; j < grid; ++j) {
    const double w = std::exp(logliks[j] - max_l);
    wsum += w;
    theta_hat += w * thetas[j];
  }
  theta_hat /= wsum;

  GpdFit fit;
  if (theta_hat == 0.0) {
    // exponential boundary of the family
    double mean = 0.0;
    for (double x : exceedances) mean += x;
    fit.k = 0.0;
    fit.sigma = mean / n;
  } else {
    fit.k = k_of_theta(theta_hat);
    fit.sigma = -fit.k / theta_hat;
  }
  // weak prior: shrink the shape toward 0.5 with ~10 pseudo-observations
  fit.k = (fit.k * n + 5.0) / (n + 10.0);
  return fit;
}

namespace detail {

inline double gpd_quantile(double p, double k, double sigma) {
  if (std::fabs(k) < 1e-6) return -sigma * std::log1p(-p);
  return sigma / k * (std::pow(1.0 - p, -k) - 1.0);
}

inline double log_sum_exp(const std::vector<double>& x) {
  double hi = -std::numeric_limits<double>::infinity();
  for (double v : x) hi = std::max(hi, v);
  if (!std::isfinite(hi)) return hi;
  double s = 0.0;
  for (double v : x) s += std::exp(v - hi);
  return hi + std::log(s);
}

}  // namespace detail

struct PsisWeights {
  std::vector<double> weights;  // unnormalized, bounded by the raw maximum
  double pareto_k = -std::numeric_limits<double>::infinity();
};

// Smooth one point's importance ratios: fit a generalized Pareto to the
// largest 20% and replace them with fitted quantiles, truncated at the raw
// maximum.  Input is log ratios; any common shift cancels.
inline PsisWeights smoothed_importance_weights(std::vector<double> log_ratios) {
  const std::size_t s = log_ratios.size();
  if (s < 25) throw std::invalid_argument("importance smoothing needs more draws");
  const double shift = *std::max_element(log_ratios.begin(), log_ratios.end());
  PsisWeights out;
  out.weights.resize(s);
  for (std::size_t i = 0; i < s; ++i) out.weights[i] = std::exp(log_ratios[i] - shift);
  const double raw_max = 1.0;

  const std::size_t tail = std::max<std::size_t>(5, static_cast<std::size_t>(0.2 * s));
  std::vector<std::size_t> order(s);
  for (std::size_t i = 0; i < s; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return out.weights[a] < out.weights[b]; });
  const double threshold = out.weights[order[s - tail - 1]];

  std::vector<double> exceed(tail);
  for (std::size_t j = 0; j < tail; ++j) {
    exceed[j] = out.weights[order[s - tail + j]] - threshold;
  }
  if (!(exceed.back() > 0.0)) return out;  // flat tail: nothing to smooth

  const GpdFit fit = gpd_fit_tail(exceed);
  if (fit.degenerate()) return out;
  out.pareto_k = fit.k;
  for (std::size_t j = 0; j < tail; ++j) {
    const double p = (j + 0.5) / tail;
    const double smoothed = threshold + detail::gpd_quantile(p, fit.k, fit.sigma);
    out.weights[order[s - tail + j]] = std::min(smoothed, raw_max);
  }
  return out;
}

struct PointwiseLogLik {
  int n_draws = 0;
  int n_points = 0;
  std::vector<double> values;  // row-major: [draw][point]

  void resize(int draws, int points) {
    n_draws = draws;
    n_points = points;
    values.assign(static_cast<std::size_t>(draws) * points, 0.0);
  }
  double& at(int s, int i) { return values[static_cast<std::size_t>(s) * n_points + i]; }
  double at(int s, int i) const { return values[static_cast<std::size_t>(s) * n_points + i]; }
};

struct LooResult {
  double elpd = 0.0;
  double looic = 0.0;  // always exactly -2 * elpd
  std::vector<double> elpd_pointwise;
  std::vector<double> pareto_k;  // -inf where the tail was flat
  std::vector<int> flagged;      // points with k > 0.7
};

constexpr double kParetoKThreshold = 0.7;

inline LooResult psis_loo(const PointwiseLogLik& ll) {
  if (ll.n_draws < 100) throw std::invalid_argument("psis_loo needs at least 100 draws");
  if (ll.n_points < 1) throw std::invalid_argument("psis_loo needs at least one point");
  LooResult res;
  res.elpd_pointwise.resize(ll.n_points);
  res.pareto_k.resize(ll.n_points);
  std::vector<double> log_ratios(ll.n_draws), col(ll.n_draws), log_num(ll.n_draws),
      log_den(ll.n_draws);
  for (int i = 0; i < ll.n_points; ++i) {
    for (int s = 0; s < ll.n_draws; ++s) {
      col[s] = ll.at(s, i);
      log_ratios[s] = -col[s];
    }
    const auto psis = smoothed_importance_weights(log_ratios);
    res.pareto_k[i] = psis.pareto_k;
    if (psis.pareto_k > kParetoKThreshold) res.flagged.push_back(i);
    for (int s = 0; s < ll.n_draws; ++s) {
      const double lw = std::log(psis.weights[s]);
      log_num[s] = lw + col[s];
      log_den[s] = lw;
    }
    res.elpd_pointwise[i] = detail::log_sum_exp(log_num) - detail::log_sum_exp(log_den);
    res.elpd += res.elpd_pointwise[i];
  }
  res.looic = -2.0 * res.elpd;
  return res;
}

// A held-out data cell identified by its cohort and the cell's starting age;
// the refit batching measures distance on these two coordinates.
struct CellRef {
  int cohort = 0;
  int age = 0;
  bool operator==(const CellRef&) const = default;
};

inline int l1_distance(const CellRef& a, const CellRef& b) {
  return std::abs(a.cohort - b.cohort) + std::abs(a.age - b.age);
}

// Group unreliable points into at most `max_refits` batches, greedily placing
// each point in the batch where it is farthest from the current members, so
// one refit never drops two nearby cells at once.
inline std::vector<std::vector<CellRef>> refit_plan(std::vector<CellRef> points,
                                                    int max_refits = 3) {
  std::vector<std::vector<CellRef>> batches;
  if (points.empty()) return batches;
  if (max_refits < 1) throw std::invalid_argument("need at least one refit batch");
  std::sort(points.begin(), points.end(), [](const CellRef& a, const CellRef& b) {
    return a.cohort != b.cohort ? a.cohort < b.cohort : a.age < b.age;
  });
  if (static_cast<int>(points.size()) <= max_refits) {
    for (const auto& p : points) batches.push_back({p});
    return batches;
  }
  batches.resize(max_refits);
  for (const auto& p : points) {
    int best = 0;
    double best_dist = -1.0;
    for (int b = 0; b < max_refits; ++b) {
      double d = std::numeric_limits<double>::infinity();
      for (const auto& q : batches[b]) d = std::min(d, static_cast<double>(l1_distance(p, q)));
      if (d > best_dist) {
        best_dist = d;
        best = b;
      }
    }
    batches[best].push_back(p);
  }
  return batches;
}

struct ModePartition {
  std::vector<int> group_of_chain;  // group ids numbered by first appearance
  int selected = 0;
  std::vector<int> selected_chains;
  int n_groups = 0;
};

// Cluster chains that appear to sample the same mode: two chains agree when
// every parameter's mean gap is under four pooled within-chain sds.  The
// largest cluster wins; ties go to the cluster with the smallest mean LOOIC
// when per-chain values are supplied.
inline ModePartition mode_partition(const Draws& draws,
                                    const std::vector<double>& chain_looic = {}) {
  const int nc = draws.n_chains();
  if (nc < 1) throw std::invalid_argument("mode partition needs at least one chain");
  if (nc == 1) {
    ModePartition solo;
    solo.group_of_chain = {0};
    solo.selected = 0;
    solo.selected_chains = {0};
    solo.n_groups = 1;
    return solo;
  }
  const int np = draws.n_params;
  const int n = draws.n_retained();

  std::vector<std::vector<double>> mean(nc, std::vector<double>(np, 0.0));
  std::vector<std::vector<double>> var(nc, std::vector<double>(np, 0.0));
  for (int c = 0; c < nc; ++c) {
    for (int p = 0; p < np; ++p) {
      double m = 0.0;
      for (int i = 0; i < n; ++i) m += draws.value(c, i, p);
      m /= n;
      double v = 0.0;
      for (int i = 0; i < n; ++i) {
        const double d = draws.value(c, i, p) - m;
        v += d * d;
      }
      mean[c][p] = m;
      var[c][p] = n > 1 ? v / (n - 1) : 0.0;
    }
  }

  auto same_mode = [&](int a, int b) {
    for (int p = 0; p < np; ++p) {
      const double gap = std::fabs(mean[a][p] - mean[b][p]);
      const double pooled = std::sqrt(0.5 * (var[a][p] + var[b][p]));
      if (pooled > 0.0 ? gap >= 4.0 * pooled : gap > 0.0) return false;
    }
    return true;
  };

  // transitive closure by union-find
  std::vector<int> parent(nc);
  for (int c = 0; c < nc; ++c) parent[c] = c;
  std::function<int(int)> find = [&](int x) {
    return parent[x] == x ? x : parent[x] = find(parent[x]);
  };
  for (int a = 0; a < nc; ++a) {
    for (int b = a + 1; b < nc; ++b) {
      if (same_mode(a, b)) parent[find(a)] = find(b);
    }
  }

  ModePartition part;
  part.group_of_chain.assign(nc, -1);
  std::vector<int> roots;
  for (int c = 0; c < nc; ++c) {
    const int r = find(c);
    auto it = std::find(roots.begin(), roots.end(), r);
    if (it == roots.end()) {
      roots.push_back(r);
      part.group_of_chain[c] = static_cast<int>(roots.size()) - 1;
    } else {
      part.group_of_chain[c] = static_cast<int>(it - roots.begin());
    }
  }
  part.n_groups = static_cast<int>(roots.size());

  std::vector<int> size(part.n_groups, 0);
  std::vector<double> looic_sum(part.n_groups, 0.0);
  for (int c = 0; c < nc; ++c) {
    ++size[part.group_of_chain[c]];
    if (!chain_looic.empty()) looic_sum[part.group_of_chain[c]] += chain_looic[c];
  }
  int best = 0;
  for (int g = 1; g < part.n_groups; ++g) {
    if (size[g] > size[best]) {
      best = g;
    } else if (size[g] == size[best] && !chain_looic.empty() &&
               looic_sum[g] / size[g] < looic_sum[best] / size[best]) {
      best = g;
    }
  }
  part.selected = best;
  for (int c = 0; c < nc; ++c) {
    if (part.group_of_chain[c] == best) part.selected_chains.push_back(c);
  }
  return part;
}

// Split R-hat over a subset of chains (after mode selection).
inline RhatResult split_rhat_within(const Draws& draws, const std::vector<int>& chains,
                                    int param) {
  std::vector<std::vector<double>> cols;
  for (int c : chains) cols.push_back(draws.column(c, param));
  if (cols.size() < 2) {
    // a single chain still splits into halves
    const auto full = draws.column(chains.at(0), param);
    const std::size_t half = full.size() / 2;
    cols.clear();
    cols.emplace_back(full.begin(), full.begin() + half);
    cols.emplace_back(full.end() - half, full.end());
  }
  return split_rhat(cols);
}

}  // namespace fertcast
