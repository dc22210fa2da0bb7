#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "unfold/mrf.hpp"
#include "unfold/numerics.hpp"

using namespace unfold;
using namespace unfold::mrf;

namespace {

PairwiseMrf two_node_chain() {
  // e^psi = [[2,1],[1,2]] between the nodes, evidence factor (1,3) on node 0
  PairwiseMrf g;
  g.hidden_states = {2, 2};
  g.visible_states = {2};
  Matrix psi(2, 2);
  psi << std::log(2.0), 0.0, 0.0, std::log(2.0);
  g.edges_hh.push_back({0, 1, psi});
  Matrix ev(2, 2);
  ev << 0.0, 0.0, std::log(3.0), std::log(3.0);
  g.edges_hv.push_back({0, 0, ev});
  return g;
}

PairwiseMrf random_tree(std::mt19937_64& gen, int max_nodes = 8, int max_states = 3) {
  std::uniform_int_distribution<int> nodes(2, max_nodes);
  std::uniform_int_distribution<int> states(2, max_states);
  std::normal_distribution<double> N(0.0, 1.0);
  PairwiseMrf g;
  const int n = nodes(gen);
  for (int i = 0; i < n; ++i) g.hidden_states.push_back(states(gen));
  for (int i = 1; i < n; ++i) {
    std::uniform_int_distribution<int> parent(0, i - 1);
    const int p = parent(gen);
    Matrix psi(g.states(p), g.states(i));
    for (int a = 0; a < psi.rows(); ++a)
      for (int b = 0; b < psi.cols(); ++b) psi(a, b) = N(gen);
    g.edges_hh.push_back({p, i, psi});
  }
  for (int i = 0; i < n; ++i) {
    g.visible_states.push_back(2);
    Matrix psi(g.states(i), 2);
    for (int a = 0; a < psi.rows(); ++a)
      for (int b = 0; b < 2; ++b) psi(a, b) = N(gen);
    g.edges_hv.push_back({i, static_cast<int>(g.visible_states.size()) - 1, psi});
  }
  return g;
}

std::vector<int> random_assignment(std::mt19937_64& gen, const PairwiseMrf& g) {
  std::vector<int> v;
  for (int s : g.visible_states) {
    std::uniform_int_distribution<int> val(0, s - 1);
    v.push_back(val(gen));
  }
  return v;
}

double sup_diff(const std::vector<std::vector<double>>& a,
                const std::vector<std::vector<double>>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t s = 0; s < a[i].size(); ++s)
      m = std::max(m, std::abs(a[i][s] - b[i][s]));
  return m;
}

std::vector<double> normalized(std::vector<double> m) {
  double s = 0.0;
  for (double x : m) s += x;
  for (double& x : m) x /= s;
  return m;
}

}  // namespace

TEST_CASE("brute force marginals on hand-checkable graphs") {
  PairwiseMrf single;
  single.hidden_states = {3};
  const auto uniform = brute_force_marginals(single, {});
  for (double q : uniform[0]) CHECK(q == Catch::Approx(1.0 / 3.0));

  PairwiseMrf biased;
  biased.hidden_states = {2};
  biased.visible_states = {2};
  Matrix ev(2, 2);
  ev << 0.0, 0.0, 1.0, 1.0;  // psi(1, v) - psi(0, v) = 1
  biased.edges_hv.push_back({0, 0, ev});
  const auto q = brute_force_marginals(biased, {0});
  CHECK(q[0][1] == Catch::Approx(logistic(1.0)).epsilon(1e-12));

  const auto chain = brute_force_marginals(two_node_chain(), {1});
  CHECK(chain[0][1] == Catch::Approx(9.0 / 12.0).epsilon(1e-12));
  CHECK(chain[1][1] == Catch::Approx(7.0 / 12.0).epsilon(1e-12));
}

TEST_CASE("brute force rejects oversized state spaces") {
  PairwiseMrf g;
  g.hidden_states.assign(21, 2);  // 2^21 > 1e6
  CHECK_THROWS_AS(brute_force_marginals(g, {}), std::invalid_argument);
}

TEST_CASE("mf_message basics") {
  Matrix zero = Matrix::Zero(3, 2);
  const auto flat = mf_message({0.4, 0.6}, zero);
  for (double m : flat) CHECK(m == 1.0);

  Matrix psi(2, 2);
  psi << 0.3, -0.7, 1.1, 0.25;
  const auto degenerate = mf_message({0.0, 1.0}, psi);
  CHECK(degenerate[0] == Catch::Approx(std::exp(-0.7)));
  CHECK(degenerate[1] == Catch::Approx(std::exp(0.25)));

  psi << 0.0, 1.0, 2.0, 0.0;
  const auto m = mf_message({0.5, 0.5}, psi);
  CHECK(m[0] == Catch::Approx(std::exp(0.5)));
  CHECK(m[1] == Catch::Approx(std::exp(1.0)));
}

TEST_CASE("bp_message basics") {
  Matrix zero = Matrix::Zero(2, 2);
  const auto flat = bp_message({0.5, 0.5}, {0.5, 0.5}, zero);
  CHECK(flat[0] == Catch::Approx(flat[1]));

  CHECK_THROWS_AS(bp_message({0.5, 0.5}, {0.0, 1.0}, zero), std::invalid_argument);
}

TEST_CASE("generalized message reductions") {
  std::mt19937_64 gen(3);
  std::normal_distribution<double> N(0.0, 1.0);
  std::uniform_real_distribution<double> U(0.1, 1.0);
  for (int trial = 0; trial < 30; ++trial) {
    Matrix psi(2, 2);
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b) psi(a, b) = N(gen);
    std::vector<double> q{U(gen), U(gen)};
    const double qs = q[0] + q[1];
    q[0] /= qs;
    q[1] /= qs;
    std::vector<double> minc{U(gen), U(gen)};

    // lambda = kappa = 1 is BP, bitwise
    const auto bp = bp_message(q, minc, psi);
    const auto gen1 = generalized_message(q, minc, psi, {1.0, 1.0});
    CHECK(gen1[0] == bp[0]);
    CHECK(gen1[1] == bp[1]);

    // tiny lambda collapses to the MF message (compare normalized)
    const auto mf = normalized(mf_message(q, psi));
    const auto gl = normalized(generalized_message(q, minc, psi, {1e-6, 1.0}));
    CHECK(std::abs(gl[0] - mf[0]) < 1e-4);
    CHECK(std::abs(gl[1] - mf[1]) < 1e-4);

    // mid lambda equals the weighted power mean, term by term
    const auto gmid = generalized_message(q, minc, psi, {0.5, 1.0});
    for (int hi = 0; hi < 2; ++hi) {
      Vector w(2), x(2);
      w << q[0], q[1];
      x << std::exp(psi(hi, 0)) / minc[0], std::exp(psi(hi, 1)) / minc[1];
      CHECK(gmid[static_cast<std::size_t>(hi)] ==
            Catch::Approx(power_mean(w, x, 0.5)).epsilon(1e-12));
    }

    // kappa -> inf gives the max-product message
    const auto gmax = generalized_message(q, minc, psi, {1.0, kInf});
    for (int hi = 0; hi < 2; ++hi) {
      const double expect = std::max(q[0] * std::exp(psi(hi, 0)) / minc[0],
                                     q[1] * std::exp(psi(hi, 1)) / minc[1]);
      CHECK(gmax[static_cast<std::size_t>(hi)] == Catch::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("generalized message is monotone in lambda termwise") {
  std::mt19937_64 gen(5);
  std::normal_distribution<double> N(0.0, 1.0);
  std::uniform_real_distribution<double> U(0.1, 1.0);
  const std::vector<double> lambdas{1e-3, 0.01, 0.1, 0.3, 0.6, 1.0};
  for (int trial = 0; trial < 30; ++trial) {
    Matrix psi(3, 3);
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) psi(a, b) = N(gen);
    std::vector<double> q{U(gen), U(gen), U(gen)};
    const double qs = q[0] + q[1] + q[2];
    for (auto& x : q) x /= qs;
    std::vector<double> minc{U(gen), U(gen), U(gen)};
    for (std::size_t i = 0; i + 1 < lambdas.size(); ++i) {
      const auto lo = generalized_message(q, minc, psi, {lambdas[i], 1.0});
      const auto hi = generalized_message(q, minc, psi, {lambdas[i + 1], 1.0});
      for (int s = 0; s < 3; ++s)
        CHECK(lo[static_cast<std::size_t>(s)] <= hi[static_cast<std::size_t>(s)] + 1e-12);
    }
  }
}

TEST_CASE("schedule_blend") {
  const std::vector<double> old_m{0.2, 0.8}, new_m{0.4, 0.6};
  CHECK(schedule_blend(old_m, new_m, 1.0, 1.0) == new_m);
  CHECK(schedule_blend(old_m, new_m, 0.0, 1.0) == old_m);
  const auto mid = schedule_blend(old_m, new_m, 0.5, 1.0);
  CHECK(mid[0] == Catch::Approx(0.3));
  const auto geo = schedule_blend(old_m, new_m, 0.5, 0.0);
  CHECK(geo[0] == Catch::Approx(std::sqrt(0.2 * 0.4)));
  CHECK_THROWS_AS(schedule_blend(old_m, new_m, 1.5, 1.0), std::invalid_argument);
}

TEST_CASE("compute_beliefs basics") {
  PairwiseMrf lone;
  lone.hidden_states = {4};
  lone.visible_states = {2};
  lone.edges_hv.push_back({0, 0, Matrix::Zero(4, 2)});
  const auto q = compute_beliefs({}, lone, {1});
  for (double x : q[0]) CHECK(x == Catch::Approx(0.25));

  PairwiseMrf biased;
  biased.hidden_states = {2};
  biased.visible_states = {2};
  Matrix ev(2, 2);
  ev << 0.0, 0.0, 1.0, 1.0;
  biased.edges_hv.push_back({0, 0, ev});
  const auto qb = compute_beliefs({}, biased, {0});
  CHECK(qb[0][1] == Catch::Approx(logistic(1.0)).epsilon(1e-12));
}

TEST_CASE("run_inference with zero iterations returns the uniform state") {
  const auto g = two_node_chain();
  const auto state = run_inference(g, {1}, {}, ScheduleParams::synchronous(), 0);
  for (const auto& q : state.belief)
    for (double x : q) CHECK(x == 0.5);
  for (const auto& m : state.message)
    for (double x : m) CHECK(x == 0.5);
}

TEST_CASE("BP is exact on the two-node chain") {
  const auto g = two_node_chain();
  const auto state = run_inference(g, {1}, {}, ScheduleParams::synchronous(), 8);
  CHECK(state.belief[0][1] == Catch::Approx(0.75).epsilon(1e-10));
  CHECK(state.belief[1][1] == Catch::Approx(7.0 / 12.0).epsilon(1e-10));
}

TEST_CASE("BP beliefs match enumeration on random trees") {
  std::mt19937_64 gen(17);
  for (int trial = 0; trial < 50; ++trial) {
    const auto g = random_tree(gen);
    const auto v = random_assignment(gen, g);
    const auto exact = brute_force_marginals(g, v);
    const int iters = 2 * g.num_hidden() + 2;
    const auto state = run_inference(g, v, {}, ScheduleParams::synchronous(), iters);
    CHECK(sup_diff(state.belief, exact) < 1e-10);
  }
}

TEST_CASE("beliefs stay normalized through inference") {
  std::mt19937_64 gen(23);
  const auto g = random_tree(gen, 6, 3);
  const auto v = random_assignment(gen, g);
  StyleMap style;
  style.global = {0.5, 2.0};
  ScheduleParams sched{0.7, Matrix()};
  const auto state = run_inference(g, v, style, sched, 7);
  for (const auto& q : state.belief) {
    double s = 0.0;
    for (double x : q) {
      CHECK(x >= 0.0);
      s += x;
    }
    CHECK(s == Catch::Approx(1.0).epsilon(1e-12));
  }
  for (const auto& m : state.message)
    for (double x : m) CHECK(x > 0.0);
}

TEST_CASE("mean field reaches a synchronous fixed point on two nodes") {
  std::mt19937_64 gen(29);
  std::normal_distribution<double> N(0.0, 1.0);
  PairwiseMrf g;
  g.hidden_states = {2, 2};
  g.visible_states = {2};
  Matrix psi(2, 2);
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b) psi(a, b) = N(gen);
  g.edges_hh.push_back({0, 1, psi});
  Matrix ev(2, 2);
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b) ev(a, b) = N(gen);
  g.edges_hv.push_back({0, 0, ev});

  StyleMap mf_style;
  mf_style.global = {0.0, 1.0};  // mean-field limit branch
  const auto state =
      run_inference(g, {1}, mf_style, ScheduleParams::synchronous(0.0), 300);
  const auto next =
      run_inference(g, {1}, mf_style, ScheduleParams::synchronous(0.0), 301);
  CHECK(sup_diff(state.belief, next.belief) < 1e-9);
}

TEST_CASE("per-edge style overrides and schedule gates") {
  const auto g = two_node_chain();
  StyleMap style;
  style.global = {1.0, 1.0};
  style.per_edge[{0, 1}] = {0.0, 1.0};
  CHECK(style.get(0, 1).lambda == 0.0);
  CHECK(style.get(1, 0).lambda == 1.0);

  // alpha = 0 everywhere keeps the messages at their initial uniform value
  ScheduleParams frozen;
  frozen.z = Matrix::Constant(2, 4, -1e9);
  const auto state = run_inference(g, {1}, style, frozen, 4);
  for (const auto& m : state.message)
    for (double x : m) CHECK(x == Catch::Approx(0.5));
}

TEST_CASE("mrf validation catches malformed graphs") {
  PairwiseMrf g;
  g.hidden_states = {2, 2};
  Matrix psi = Matrix::Zero(2, 2);
  g.edges_hh.push_back({1, 1, psi});
  CHECK_THROWS_AS(g.validate(), std::invalid_argument);
  g.edges_hh[0] = {0, 1, Matrix::Zero(3, 2)};
  CHECK_THROWS_AS(g.validate(), std::invalid_argument);
}
