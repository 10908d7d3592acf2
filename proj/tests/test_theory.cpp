// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include "motifdiff/theory.hpp"

using namespace motifdiff;
using namespace motifdiff::theory;

namespace {

ToyMDP chain_mdp(int horizon, const std::vector<int>& counts, Rng& rng) {
  ToyMDP mdp = random_toy_mdp(rng);
  mdp.horizon = horizon;
  mdp.action_counts = counts;
  mdp.ref.clear();
  mdp.ref.resize(horizon);
  for (int h = 0; h < horizon; ++h) {
    Mat table(mdp.states_at(h), counts[h]);
    for (int s = 0; s < table.rows(); ++s) {
      double total = 0;
      for (int a = 0; a < counts[h]; ++a) {
        table(s, a) = 0.1 + rng.u01();
        total += table(s, a);
      }
      table.row(s) /= total;
    }
    mdp.ref[h] = table;
  }
  mdp.rewards = Vec(mdp.states_at(horizon));
  for (int s = 0; s < mdp.rewards.size(); ++s) mdp.rewards[s] = rng.normal();
  return mdp;
}

}  // namespace

TEST_CASE("gibbs maximizer") {
  SECTION("constant Q returns the reference") {
    Vec ref(3);
    ref << 0.2, 0.5, 0.3;
    GibbsResult g = gibbs_maximizer(ref, Vec::Constant(3, 1.7), 0.8);
    CHECK((g.policy - ref).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(g.value == Catch::Approx(1.7).margin(1e-12));
  }
  SECTION("two-action closed form") {
    Vec ref = Vec::Constant(2, 0.5);
    Vec q(2);
    q << 1.0, 0.0;
    GibbsResult g = gibbs_maximizer(ref, q, 1.0);
    double e = std::exp(1.0);
    CHECK(g.policy[0] == Catch::Approx(e / (e + 1)).margin(1e-12));    // 0.7311
    CHECK(g.policy[1] == Catch::Approx(1 / (e + 1)).margin(1e-12));    // 0.2689
    CHECK(g.value == Catch::Approx(std::log((e + 1) / 2)).margin(1e-12));  // 0.6201
  }
  SECTION("large beta recovers the reference") {
    Vec ref(4);
    ref << 0.4, 0.3, 0.2, 0.1;
    Vec q(4);
    q << 3.0, -1.0, 0.5, 2.0;
    GibbsResult g = gibbs_maximizer(ref, q, 1e6);
    CHECK(0.5 * (g.policy - ref).cwiseAbs().sum() < 1e-5);
  }
  SECTION("support preservation and errors") {
    Vec ref(3);
    ref << 0.7, 0.3, 0.0;
    Vec q(3);
    q << 0.0, 0.0, 1000.0;
    GibbsResult g = gibbs_maximizer(ref, q, 1.0);
    CHECK(g.policy[2] == 0.0);
    try {
      gibbs_maximizer(ref, q, 0.0);
      FAIL("expected BadBeta");
    } catch (const Error& e) {
      CHECK(e.category() == "BadBeta");
    }
  }
  SECTION("numerical stability at tiny beta") {
    Vec ref = Vec::Constant(2, 0.5);
    Vec q(2);
    q << 50.0, -50.0;
    GibbsResult g = gibbs_maximizer(ref, q, 1e-6);
    CHECK(std::isfinite(g.value));
    CHECK(g.policy[0] == Catch::Approx(1.0).margin(1e-12));
  }
}

TEST_CASE("soft bellman recursion") {
  Rng rng(2024);
  SECTION("horizon 1 reduces to a single gibbs call") {
    ToyMDP mdp = chain_mdp(1, {4}, rng);
    BellmanSolution sol = soft_bellman_solve(mdp, 0.7);
    GibbsResult g = gibbs_maximizer(mdp.ref[0].row(0), mdp.rewards, 0.7);
    CHECK((sol.policy[0].row(0).transpose() - g.policy).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(sol.values[0][0] == Catch::Approx(g.value).margin(1e-15));
  }
  SECTION("zero rewards give the reference policy and zero value") {
    ToyMDP mdp = chain_mdp(3, {2, 3, 2}, rng);
    mdp.rewards.setZero();
    BellmanSolution sol = soft_bellman_solve(mdp, 1.3);
    for (int h = 0; h < 3; ++h) {
      CHECK((sol.policy[h] - mdp.ref[h]).cwiseAbs().maxCoeff() < 1e-12);
    }
    CHECK(std::abs(sol.values[0][0]) < 1e-12);
  }
  SECTION("optimal objective matches enumeration") {
    for (int rep = 0; rep < 20; ++rep) {
      ToyMDP mdp = random_toy_mdp(rng);
      for (double beta : {0.1, 1.0, 10.0}) {
        BellmanSolution sol = soft_bellman_solve(mdp, beta);
        double j = enumerate_objective(mdp, sol.policy, beta);
        REQUIRE(std::abs(j - sol.values[0][0]) < 1e-9);
      }
    }
  }
  SECTION("beta to zero approaches the best trajectory reward") {
    ToyMDP mdp = chain_mdp(3, {3, 3, 3}, rng);
    BellmanSolution sol = soft_bellman_solve(mdp, 1e-6);
    double best = mdp.rewards.maxCoeff();
    CHECK(std::abs(enumerate_objective(mdp, sol.policy, 1e-6) - best) < 1e-4);
  }
}

TEST_CASE("enumerate objective") {
  Rng rng(55);
  ToyMDP mdp = chain_mdp(2, {3, 2}, rng);

  SECTION("reference policy pays no KL") {
    double j = enumerate_objective(mdp, mdp.ref, 0.9);
    // expected reward under the reference, computed directly
    double expected = 0.0;
    for (int a0 = 0; a0 < 3; ++a0) {
      for (int a1 = 0; a1 < 2; ++a1) {
        expected += mdp.ref[0](0, a0) * mdp.ref[1](a0, a1) * mdp.rewards[a0 * 2 + a1];
      }
    }
    CHECK(j == Catch::Approx(expected).margin(1e-12));
  }
  SECTION("support violation is rejected") {
    ToyMDP zmdp = mdp;
    zmdp.ref[0](0, 0) = 0.0;
    double rest = zmdp.ref[0].row(0).sum();
    zmdp.ref[0].row(0) /= rest;
    zmdp.ref[0](0, 0) = 0.0;
    PolicyTables bad = mdp.ref;  // positive mass on the zeroed action
    try {
      enumerate_objective(zmdp, bad, 1.0);
      FAIL("expected SupportViolation");
    } catch (const Error& e) {
      CHECK(e.category() == "SupportViolation");
    }
  }
}

TEST_CASE("amplification bound") {
  CHECK(amplification_bound(0.5, std::log(2.0), 1.0) == Catch::Approx(2.0 / 3).margin(1e-12));
  CHECK(amplification_bound(1.0, 0.5, 1.0) == Catch::Approx(1.0).margin(1e-15));
  // delta -> 0 recovers p_g
  CHECK(amplification_bound(0.37, 1e-12, 1.0) == Catch::Approx(0.37).margin(1e-9));
  CHECK_THROWS_AS(amplification_bound(0.0, 1.0, 1.0), Error);
  CHECK_THROWS_AS(amplification_bound(0.5, -1.0, 1.0), Error);
  CHECK_THROWS_AS(amplification_bound(0.5, 1.0, 0.0), Error);
}

TEST_CASE("factorized KL") {
  SECTION("identical distributions have zero KL everywhere") {
    Rng rng(9);
    FactorizedDist p = random_factorized(rng, {3, 2, 4});
    FactorizedKl kl = factorized_kl(p, p);
    CHECK(kl.joint == 0.0);
    for (double t : kl.per_factor) CHECK(t == 0.0);
  }
  SECTION("independent binary factors add") {
    FactorizedDist p, q;
    Mat p1(1, 2), q1(1, 2);
    p1 << 0.7, 0.3;
    q1 << 0.4, 0.6;
    Mat p2(2, 2), q2(2, 2);
    p2 << 0.2, 0.8, 0.2, 0.8;  // same row for both prefixes: independent
    q2 << 0.5, 0.5, 0.5, 0.5;
    p.factors = {p1, p2};
    q.factors = {q1, q2};
    double k1 = 0.7 * std::log(0.7 / 0.4) + 0.3 * std::log(0.3 / 0.6);
    double k2 = 0.2 * std::log(0.2 / 0.5) + 0.8 * std::log(0.8 / 0.5);
    FactorizedKl kl = factorized_kl(p, q);
    CHECK(kl.joint == Catch::Approx(k1 + k2).margin(1e-12));
    CHECK(kl.per_factor[0] == Catch::Approx(k1).margin(1e-12));
    CHECK(kl.per_factor[1] == Catch::Approx(k2).margin(1e-12));
  }
  SECTION("prefix-dependent decomposition equals the joint") {
    Rng rng(31);
    for (int rep = 0; rep < 30; ++rep) {
      FactorizedDist p = random_factorized(rng, {3, 2, 3});
      FactorizedDist q = random_factorized(rng, {3, 2, 3});
      FactorizedKl kl = factorized_kl(p, q);
      double total = 0.0;
      for (double t : kl.per_factor) total += t;
      REQUIRE(std::abs(total - kl.joint) < 1e-12);
      // budget dilution: average per factor is at most joint / M
      CHECK(kl.per_factor_average <= kl.joint / 3 + 1e-15);
    }
  }
  SECTION("structure mismatch") {
    Rng rng(3);
    FactorizedDist p = random_factorized(rng, {2, 2});
    FactorizedDist q = random_factorized(rng, {2, 3});
    try {
      factorized_kl(p, q);
      FAIL("expected StructureMismatch");
    } catch (const Error& e) {
      CHECK(e.category() == "StructureMismatch");
    }
  }
}

TEST_CASE("decision counts") {
  DecisionCounts dc = decision_counts(4, 2);
  CHECK(dc.l_atom == 10);
  CHECK(dc.l_motif == 5);
  CHECK(dc.ratio == 0.5);
  CHECK(dc.bound == Catch::Approx(0.75).margin(1e-15));

  DecisionCounts unit = decision_counts(1, 1);
  CHECK(unit.l_atom == 1);
  CHECK(unit.l_motif == 1);
  CHECK(unit.ratio == 1.0);
  CHECK(unit.bound == Catch::Approx(3.0).margin(1e-15));

  // chi = 5.5 reproduces the headline 0.099 figure to 3 decimals
  double bound = 3.0 / (5.5 * 5.5);
  CHECK(std::round(bound * 1000.0) / 1000.0 == Catch::Approx(0.099).margin(1e-12));

  CHECK_THROWS_AS(decision_counts(2, 3), Error);
  CHECK_THROWS_AS(decision_counts(3, 0), Error);
}

TEST_CASE("verification battery passes") {
  auto rows = run_battery();
  REQUIRE(rows.size() >= 7);
  for (const auto& row : rows) {
    INFO(row.name << ": " << row.detail);
    CHECK(row.pass);
  }
}
