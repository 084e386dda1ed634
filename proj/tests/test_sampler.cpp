#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>
#include <vector>

#include "fertcast/sampler.hpp"

using namespace fertcast;

namespace {

// Independent Gaussian target with the given coordinate sds.
TargetModel gaussian_target(std::vector<double> sds) {
  TargetModel t;
  t.dim = static_cast<int>(sds.size());
  t.init_mean.assign(t.dim, 0.0);
  t.log_post = [sds](const std::vector<double>& q) {
    double lp = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) lp -= 0.5 * q[i] * q[i] / (sds[i] * sds[i]);
    return lp;
  };
  t.value_and_grad = [sds](const std::vector<double>& q, std::vector<double>& g) {
    g.resize(q.size());
    double lp = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) {
      const double v = sds[i] * sds[i];
      lp -= 0.5 * q[i] * q[i] / v;
      g[i] = -q[i] / v;
    }
    return lp;
  };
  return t;
}

double mean_of(const std::vector<double>& x) {
  return std::accumulate(x.begin(), x.end(), 0.0) / x.size();
}

double sd_of(const std::vector<double>& x) {
  const double m = mean_of(x);
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return std::sqrt(s / (x.size() - 1));
}

// Batch-means Monte Carlo standard error of the mean.
double batch_mcse(const std::vector<double>& x, int n_batches = 50) {
  const int len = static_cast<int>(x.size()) / n_batches;
  std::vector<double> bm(n_batches);
  for (int b = 0; b < n_batches; ++b) {
    double s = 0.0;
    for (int i = 0; i < len; ++i) s += x[b * len + i];
    bm[b] = s / len;
  }
  return sd_of(bm) / std::sqrt(static_cast<double>(n_batches));
}

}  // namespace

TEST_CASE("leapfrog basics") {
  const auto target = gaussian_target({1.0});
  const std::vector<double> unit{1.0};

  SECTION("zero momentum and zero gradient leave the position fixed") {
    TargetModel flat;
    flat.dim = 1;
    flat.init_mean = {0.0};
    flat.log_post = [](const std::vector<double>&) { return 0.0; };
    flat.value_and_grad = [](const std::vector<double>& q, std::vector<double>& g) {
      g.assign(q.size(), 0.0);
      return 0.0;
    };
    auto s = make_phase_point({1.7}, {0.0}, flat.value_and_grad);
    leapfrog_step(s, 0.25, flat.value_and_grad, unit);
    CHECK(s.position[0] == Catch::Approx(1.7));
    CHECK(s.momentum[0] == Catch::Approx(0.0));
  }

  SECTION("single-step energy error scales as step cubed") {
    auto drift = [&](double step) {
      auto s = make_phase_point({1.0}, {0.5}, target.value_and_grad);
      const double h0 = hamiltonian(s, unit);
      leapfrog_step(s, step, target.value_and_grad, unit);
      return std::fabs(hamiltonian(s, unit) - h0);
    };
    const double ratio = drift(0.2) / drift(0.1);
    CHECK(ratio > 6.0);
    CHECK(ratio < 10.0);
  }

  SECTION("integrating back with negated momentum returns the start") {
    const auto t10 = gaussian_target({1.0, 3.0, 0.5});
    const std::vector<double> metric{1.0, 4.0, 0.25};
    auto s = make_phase_point({0.3, -1.2, 2.0}, {0.7, -0.1, 0.4}, t10.value_and_grad);
    for (int i = 0; i < 10; ++i) leapfrog_step(s, 0.05, t10.value_and_grad, metric);
    for (auto& p : s.momentum) p = -p;
    for (int i = 0; i < 10; ++i) leapfrog_step(s, 0.05, t10.value_and_grad, metric);
    CHECK(s.position[0] == Catch::Approx(0.3).margin(1e-10));
    CHECK(s.position[1] == Catch::Approx(-1.2).margin(1e-10));
    CHECK(s.position[2] == Catch::Approx(2.0).margin(1e-10));
  }
}

TEST_CASE("nuts transitions sample a known one-dimensional target") {
  const auto target = gaussian_target({1.0});
  const std::vector<double> unit{1.0};
  auto eng = make_engine(42, 0);
  auto state = make_phase_point({0.0}, {0.0}, target.value_and_grad);

  const int n = 6000;
  std::vector<double> xs;
  xs.reserve(n);
  int divergences = 0;
  for (int i = 0; i < n; ++i) {
    const auto st = nuts_transition(state, target.value_and_grad, 0.6, 10, unit, eng);
    divergences += st.divergent ? 1 : 0;
    xs.push_back(state.position[0]);
  }
  CHECK(divergences == 0);
  const double mcse = std::max(batch_mcse(xs), 0.01);
  CHECK(std::fabs(mean_of(xs)) < 3.0 * mcse);
  CHECK(sd_of(xs) == Catch::Approx(1.0).epsilon(0.05));
}

TEST_CASE("well-conditioned anisotropic target runs clean") {
  std::vector<double> sds(10);
  for (int i = 0; i < 10; ++i) sds[i] = 1.0 + i;  // condition number 100 in variance
  const auto target = gaussian_target(sds);
  std::vector<double> inv(10);
  for (int i = 0; i < 10; ++i) inv[i] = sds[i] * sds[i];  // adapted metric

  auto eng = make_engine(7, 3);
  auto state = make_phase_point(std::vector<double>(10, 0.0), std::vector<double>(10, 0.0),
                                target.value_and_grad);
  int divergences = 0;
  double abs_energy_error = 0.0;
  const int n = 5000;
  for (int i = 0; i < n; ++i) {
    const auto st = nuts_transition(state, target.value_and_grad, 0.5, 10, inv, eng);
    divergences += st.divergent ? 1 : 0;
    abs_energy_error += std::fabs(st.energy_error);
  }
  CHECK(divergences == 0);
  CHECK(abs_energy_error / n < 1.0);
}

TEST_CASE("flat target saturates the depth cap") {
  TargetModel flat;
  flat.dim = 2;
  flat.init_mean = {0.0, 0.0};
  flat.log_post = [](const std::vector<double>&) { return 0.0; };
  flat.value_and_grad = [](const std::vector<double>& q, std::vector<double>& g) {
    g.assign(q.size(), 0.0);
    return 0.0;
  };
  const std::vector<double> unit{1.0, 1.0};
  auto eng = make_engine(9, 0);
  auto state = make_phase_point({0.0, 0.0}, {0.0, 0.0}, flat.value_and_grad);
  const auto st = nuts_transition(state, flat.value_and_grad, 1.0, 6, unit, eng);
  CHECK(st.depth == 6);
  CHECK(st.n_leapfrog == 63);  // 1 + 2 + ... + 32 doublings
  CHECK_FALSE(st.divergent);
}

TEST_CASE("run_chains on a two-scale Gaussian") {
  const auto target = gaussian_target({1.0, 10.0});
  SamplerConfig cfg;
  cfg.chains = 4;
  cfg.iterations = 2000;
  cfg.warmup = 1000;
  cfg.thin = 2;
  cfg.seed = 123;
  const auto draws = run_chains(target, cfg);

  SECTION("shape and bookkeeping") {
    CHECK(draws.n_chains() == 4);
    CHECK(draws.n_retained() == 500);
    CHECK(draws.total_retained() == 2000);
    for (int c = 0; c < 4; ++c) {
      CHECK(draws.chain_stats[c].size() == 500);
      CHECK(draws.post_divergences[c] == 0);
    }
  }
  SECTION("post-warmup acceptance lands near the target") {
    double acc = 0.0;
    int n = 0;
    for (const auto& chain : draws.chain_stats) {
      for (const auto& st : chain) {
        acc += st.accept;
        ++n;
      }
    }
    acc /= n;
    CHECK(acc > 0.90);
    CHECK(acc < 0.99);
  }
  SECTION("adapted metric recovers the coordinate scales") {
    for (int c = 0; c < 4; ++c) {
      const double ratio = draws.adapted_metric[c][1] / draws.adapted_metric[c][0];
      CHECK(ratio > 50.0);
      CHECK(ratio < 200.0);
    }
  }
  SECTION("moments match the target") {
    for (int p = 0; p < 2; ++p) {
      std::vector<double> pooled;
      for (int c = 0; c < 4; ++c) {
        const auto col = draws.column(c, p);
        pooled.insert(pooled.end(), col.begin(), col.end());
      }
      const double truth_sd = p == 0 ? 1.0 : 10.0;
      CHECK(std::fabs(mean_of(pooled)) < 0.15 * truth_sd);
      CHECK(sd_of(pooled) == Catch::Approx(truth_sd).epsilon(0.10));
    }
  }
  SECTION("energy errors stay small") {
    double tot = 0.0;
    int n = 0;
    for (const auto& chain : draws.chain_stats) {
      for (const auto& st : chain) {
        tot += std::fabs(st.energy_error);
        ++n;
      }
    }
    CHECK(tot / n < 1.0);
  }
  SECTION("same seed reproduces bit-identical draws") {
    const auto again = run_chains(target, cfg);
    REQUIRE(again.chain_values.size() == draws.chain_values.size());
    for (int c = 0; c < 4; ++c) {
      CHECK(again.chain_values[c] == draws.chain_values[c]);
      CHECK(again.adapted_step[c] == draws.adapted_step[c]);
      CHECK(again.adapted_metric[c] == draws.adapted_metric[c]);
    }
  }
  SECTION("a different seed gives different draws but the same distribution") {
    SamplerConfig other = cfg;
    other.seed = 987;
    const auto alt = run_chains(target, other);
    CHECK(alt.chain_values[0] != draws.chain_values[0]);
    std::vector<double> pooled;
    for (int c = 0; c < 4; ++c) {
      const auto col = alt.column(c, 1);
      pooled.insert(pooled.end(), col.begin(), col.end());
    }
    CHECK(sd_of(pooled) == Catch::Approx(10.0).epsilon(0.10));
  }
}

TEST_CASE("retained-count arithmetic") {
  const auto target = gaussian_target({1.0});
  SamplerConfig cfg;
  cfg.chains = 1;
  cfg.iterations = 1000;
  cfg.warmup = 500;
  cfg.thin = 4;
  cfg.seed = 5;
  const auto draws = run_chains(target, cfg);
  CHECK(draws.n_retained() == 125);
  CHECK(cfg.retained_per_chain() == 125);
}

TEST_CASE("sampler config validation") {
  SamplerConfig cfg;
  CHECK(cfg.resolved_warmup() == 5000);
  CHECK(cfg.retained_per_chain() == 1250);
  CHECK_NOTHROW(cfg.validate());
  SamplerConfig bad = cfg;
  bad.target_accept = 1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.warmup = cfg.iterations;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.thin = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("initialization gives up on an impossible target") {
  TargetModel impossible;
  impossible.dim = 1;
  impossible.init_mean = {0.0};
  impossible.log_post = [](const std::vector<double>&) {
    return -std::numeric_limits<double>::infinity();
  };
  impossible.value_and_grad = [](const std::vector<double>& q, std::vector<double>& g) {
    g.assign(q.size(), 0.0);
    return -std::numeric_limits<double>::infinity();
  };
  SamplerConfig cfg;
  cfg.chains = 1;
  cfg.iterations = 20;
  cfg.warmup = 10;
  cfg.thin = 1;
  CHECK_THROWS_AS(run_chains(impossible, cfg), std::runtime_error);
}
