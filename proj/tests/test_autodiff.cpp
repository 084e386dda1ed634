#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "fertcast/autodiff.hpp"
#include "fertcast/densities.hpp"
#include "fertcast/special.hpp"
#include "support.hpp"

using fertcast::ad::Tape;
using fertcast::ad::Var;
using fertcast::ad::leaf;

TEST_CASE("digamma matches derivative of lgamma and known values") {
  // psi(1) = -gamma_E, psi(1/2) = -gamma_E - 2 ln 2
  const double euler = 0.57721566490153286061;
  CHECK(fertcast::digamma(1.0) == Catch::Approx(-euler).margin(1e-12));
  CHECK(fertcast::digamma(0.5) == Catch::Approx(-euler - 2.0 * std::log(2.0)).margin(1e-12));
  CHECK(fertcast::digamma(2.0) == Catch::Approx(1.0 - euler).margin(1e-12));
  // recurrence psi(x+1) = psi(x) + 1/x on awkward arguments
  for (double x : {0.13, 1.7, 6.2, 41.0, 350.0}) {
    CHECK(fertcast::digamma(x + 1.0) ==
          Catch::Approx(fertcast::digamma(x) + 1.0 / x).epsilon(1e-12));
  }
  // finite difference of lgamma
  for (double x : {0.8, 3.3, 12.0, 90.0}) {
    const double h = 1e-6 * std::max(1.0, x);
    const double fd = (std::lgamma(x + h) - std::lgamma(x - h)) / (2.0 * h);
    CHECK(fertcast::digamma(x) == Catch::Approx(fd).epsilon(1e-7));
  }
}

TEST_CASE("stable logistic helpers") {
  CHECK(fertcast::logistic(0.0) == Catch::Approx(0.5));
  CHECK(fertcast::logistic(800.0) == Catch::Approx(1.0));
  CHECK(fertcast::logistic(-800.0) == Catch::Approx(0.0).margin(1e-300));
  CHECK(fertcast::log1pexp(-40.0) == Catch::Approx(std::exp(-40.0)).epsilon(1e-12));
  CHECK(fertcast::log1pexp(50.0) == Catch::Approx(50.0 + std::exp(-50.0)).epsilon(1e-15));
}

TEST_CASE("tape gradients of composite expressions match closed forms") {
  Tape tape;
  SECTION("product/quotient/chain") {
    Var x = leaf(tape, 1.3), y = leaf(tape, -0.4);
    using fertcast::ad::exp;
    using fertcast::ad::log;
    Var f = (x * y + exp(x) / (1.0 + y * y)) - log(x) * 3.0;
    std::vector<double> adj;
    tape.gradient(f.idx, adj);
    const double ex = std::exp(1.3);
    // df/dx = y + e^x/(1+y^2) - 3/x
    CHECK(adj[x.idx] == Catch::Approx(-0.4 + ex / 1.16 - 3.0 / 1.3).epsilon(1e-12));
    // df/dy = x - e^x * 2y/(1+y^2)^2
    CHECK(adj[y.idx] == Catch::Approx(1.3 - ex * 2.0 * (-0.4) / (1.16 * 1.16)).epsilon(1e-12));
    CHECK(fertcast::ad::value(f) ==
          Catch::Approx(1.3 * -0.4 + ex / 1.16 - std::log(1.3) * 3.0).epsilon(1e-14));
  }
  SECTION("lgamma, sqrt, pow, log1p, logistic, log1pexp") {
    tape.clear();
    Var x = leaf(tape, 2.7);
    using namespace fertcast::ad;
    Var f = lgamma(x) + sqrt(x) + pow(x, 1.5) + log1p(x) + logistic(x) + log1pexp(x);
    std::vector<double> adj;
    tape.gradient(f.idx, adj);
    const double s = fertcast::logistic(2.7);
    const double expected = fertcast::digamma(2.7) + 0.5 / std::sqrt(2.7) +
                            1.5 * std::sqrt(2.7) + 1.0 / 3.7 + s * (1.0 - s) + s;
    CHECK(adj[x.idx] == Catch::Approx(expected).epsilon(1e-12));
  }
  SECTION("constants stay off the tape") {
    tape.clear();
    const std::size_t before = tape.size();
    Var c = 3.0;
    Var d = c * 2.0 + fertcast::ad::exp(c);
    CHECK(tape.size() == before);
    CHECK(d.idx == -1);
    CHECK(fertcast::ad::value(d) == Catch::Approx(6.0 + std::exp(3.0)));
  }
}

TEST_CASE("tape gradient matches finite differences on a random expression") {
  std::mt19937_64 eng(99);
  std::uniform_real_distribution<double> u(0.2, 2.0);
  auto f = [](const std::vector<double>& v) {
    double a = v[0], b = v[1], c = v[2];
    return std::lgamma(a + b) - std::lgamma(b) + a * std::log(c) -
           (a + b) * std::log(1.0 + c) + std::sqrt(a * c) / (1.0 + b);
  };
  for (int rep = 0; rep < 5; ++rep) {
    std::vector<double> v{u(eng), u(eng), u(eng)};
    Tape tape;
    Var a = leaf(tape, v[0]), b = leaf(tape, v[1]), c = leaf(tape, v[2]);
    using namespace fertcast::ad;
    Var g = lgamma(a + b) - lgamma(b) + a * log(c) - (a + b) * log(1.0 + c) +
            sqrt(a * c) / (1.0 + b);
    CHECK(value(g) == Catch::Approx(f(v)).epsilon(1e-12));
    std::vector<double> adj;
    tape.gradient(g.idx, adj);
    const auto fd = testsupport::fd_gradient(f, v);
    CHECK(adj[a.idx] == Catch::Approx(fd[0]).epsilon(1e-6));
    CHECK(adj[b.idx] == Catch::Approx(fd[1]).epsilon(1e-6));
    CHECK(adj[c.idx] == Catch::Approx(fd[2]).epsilon(1e-6));
  }
}

TEST_CASE("density conversion cores are differentiable") {
  // The templated conversion + log-density path used inside the model:
  // gradient with respect to (location, spread) checked against finite
  // differences for each family.
  auto logden = [](fertcast::Family fam, const std::vector<double>& v) {
    fertcast::BasicComponentSpec<double> spec{fam, v[0], v[1]};
    return fertcast::detail::log_density_nat(fertcast::detail::natural_params(spec), 27.5);
  };
  for (fertcast::Family fam :
       {fertcast::Family::gamma, fertcast::Family::hadwiger, fertcast::Family::weibull}) {
    std::vector<double> v{29.0, 5.2};
    Tape tape;
    Var loc = leaf(tape, v[0]), spread = leaf(tape, v[1]);
    fertcast::BasicComponentSpec<Var> spec{fam, loc, spread};
    Var ld = fertcast::detail::log_density_nat(fertcast::detail::natural_params(spec), 27.5);
    CHECK(fertcast::ad::value(ld) == Catch::Approx(logden(fam, v)).epsilon(1e-12));
    std::vector<double> adj;
    tape.gradient(ld.idx, adj);
    const auto fd = testsupport::fd_gradient([&](const std::vector<double>& w) {
      return logden(fam, w);
    }, v);
    INFO(fertcast::family_name(fam));
    CHECK(adj[loc.idx] == Catch::Approx(fd[0]).epsilon(1e-6));
    CHECK(adj[spread.idx] == Catch::Approx(fd[1]).epsilon(1e-6));
  }
}
