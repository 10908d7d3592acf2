// SPDX-License-Identifier: Apache-2.0
//
// Exact numerical verification of the KL-regularized control theory on
// enumerable toy MDPs: the Gibbs variational identity, the soft Bellman
// recursion, downstream-value amplification, factorized KL decomposition,
// per-factor KL budget dilution and the decision-count comparison.
#pragma once

#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "motifdiff/common.hpp"

namespace motifdiff::theory {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Toy MDP: the state at step h is the action-history prefix, encoded as a
// mixed-radix index over the per-step action counts.

struct ToyMDP {
  int horizon = 1;
  std::vector<int> action_counts;  // size horizon
  std::vector<Mat> ref;            // ref[h]: states_h x actions_h, rows sum to 1
  Vec rewards;                     // over final states (all prefixes of length H)

  int states_at(int h) const {
    int n = 1;
    for (int s = 0; s < h; ++s) n *= action_counts[s];
    return n;
  }

  void check() const {
    if (horizon < 1 || static_cast<int>(action_counts.size()) != horizon) {
      fail("MalformedRecord", "bad toy MDP shape");
    }
    long total = 1;
    for (int c : action_counts) {
      if (c < 1) fail("MalformedRecord", "empty action set");
      total *= c;
      if (total > 1000000) fail("MalformedRecord", "toy MDP exceeds enumerability bound");
    }
    for (int h = 0; h < horizon; ++h) {
      if (ref[h].rows() != states_at(h) || ref[h].cols() != action_counts[h]) {
        fail("MalformedRecord", "reference table shape mismatch");
      }
      for (int s = 0; s < ref[h].rows(); ++s) {
        if (std::abs(ref[h].row(s).sum() - 1.0) > 1e-9) {
          fail("MalformedRecord", "reference row does not sum to 1");
        }
      }
    }
    if (rewards.size() != states_at(horizon)) {
      fail("MalformedRecord", "terminal reward table shape mismatch");
    }
  }
};

/// Policy tables with the same shape as the MDP's reference tables.
using PolicyTables = std::vector<Mat>;

// ---------------------------------------------------------------------------
// Gibbs variational identity

struct GibbsResult {
  Vec policy;
  double value = 0.0;
};

/// argmax_pi { <pi, Q> - beta KL(pi || ref) }: pi*(a) proportional to
/// ref(a) exp(Q(a)/beta), with value beta log sum ref exp(Q/beta).
/// Zero-reference actions stay at exactly zero.
inline GibbsResult gibbs_maximizer(const Vec& ref, const Vec& q, double beta) {
  if (beta <= 0.0) fail("BadBeta", "beta must be positive");
  if (std::abs(ref.sum() - 1.0) > 1e-9) fail("MalformedRecord", "reference must sum to 1");
  int n = static_cast<int>(ref.size());
  double m = -std::numeric_limits<double>::infinity();
  for (int a = 0; a < n; ++a) {
    if (ref[a] > 0.0) m = std::max(m, q[a]);
  }
  double z = 0.0;
  Vec pi = Vec::Zero(n);
  for (int a = 0; a < n; ++a) {
    if (ref[a] <= 0.0) continue;
    pi[a] = ref[a] * std::exp((q[a] - m) / beta);
    z += pi[a];
  }
  pi /= z;
  return {pi, beta * std::log(z) + m};
}

// ---------------------------------------------------------------------------
// Soft Bellman recursion

struct BellmanSolution {
  std::vector<Vec> values;     // values[h]: states_h, h = 0..H
  PolicyTables policy;         // policy[h]: states_h x actions_h
};

/// Backward recursion V_H = R, V_h = beta log sum ref exp(Q_h / beta) with
/// the Gibbs maximizer at every state.
inline BellmanSolution soft_bellman_solve(const ToyMDP& mdp, double beta) {
  mdp.check();
  if (beta <= 0.0) fail("BadBeta", "beta must be positive");
  BellmanSolution sol;
  sol.values.resize(mdp.horizon + 1);
  sol.policy.resize(mdp.horizon);
  sol.values[mdp.horizon] = mdp.rewards;
  for (int h = mdp.horizon - 1; h >= 0; --h) {
    int states = mdp.states_at(h);
    int actions = mdp.action_counts[h];
    sol.values[h] = Vec::Zero(states);
    sol.policy[h] = Mat::Zero(states, actions);
    for (int s = 0; s < states; ++s) {
      Vec q(actions);
      for (int a = 0; a < actions; ++a) q[a] = sol.values[h + 1][s * actions + a];
      GibbsResult g = gibbs_maximizer(mdp.ref[h].row(s), q, beta);
      sol.policy[h].row(s) = g.policy;
      sol.values[h][s] = g.value;
    }
  }
  return sol;
}

// ---------------------------------------------------------------------------
// Exact objective evaluation

/// J_beta(pi) = E_pi[R] - beta sum_h E[KL(pi(.|s_h) || ref(.|s_h))], computed
/// exactly by forward dynamic programming over prefix states.
inline double enumerate_objective(const ToyMDP& mdp, const PolicyTables& policy, double beta) {
  mdp.check();
  if (beta <= 0.0) fail("BadBeta", "beta must be positive");
  Vec prob = Vec::Ones(1);
  double kl_total = 0.0;
  for (int h = 0; h < mdp.horizon; ++h) {
    int states = mdp.states_at(h);
    int actions = mdp.action_counts[h];
    if (policy[h].rows() != states || policy[h].cols() != actions) {
      fail("MalformedRecord", "policy table shape mismatch");
    }
    Vec next = Vec::Zero(states * actions);
    for (int s = 0; s < states; ++s) {
      double kl = 0.0;
      for (int a = 0; a < actions; ++a) {
        double p = policy[h](s, a);
        double r = mdp.ref[h](s, a);
        if (p < 0.0) fail("MalformedRecord", "negative policy probability");
        if (p > 0.0 && r <= 0.0) {
          fail("SupportViolation", "policy mass outside the reference support");
        }
        if (p > 0.0) kl += p * std::log(p / r);
        next[s * actions + a] = prob[s] * p;
      }
      kl_total += prob[s] * kl;
    }
    prob = next;
  }
  return prob.dot(mdp.rewards) - beta * kl_total;
}

// ---------------------------------------------------------------------------
// Downstream-value amplification bound

/// Lower bound on the optimal probability of a high-value action subset with
/// reference mass p_g and value gap delta.
inline double amplification_bound(double p_g, double delta, double beta) {
  if (p_g <= 0.0 || p_g > 1.0 || delta <= 0.0 || beta <= 0.0) {
    fail("BadArgs", "need p_g in (0,1], delta > 0, beta > 0");
  }
  double e = std::exp(delta / beta);
  return e * p_g / (e * p_g + 1.0 - p_g);
}

// ---------------------------------------------------------------------------
// Factorized one-step KL

/// Ordered conditional factors: factor j is a table over realized-prefix rows
/// (mixed-radix over earlier factor cardinalities) by d_j categories.
struct FactorizedDist {
  std::vector<Mat> factors;

  int factor_count() const { return static_cast<int>(factors.size()); }
  int cardinality(int j) const { return static_cast<int>(factors[j].cols()); }

  void check() const {
    int rows = 1;
    for (int j = 0; j < factor_count(); ++j) {
      if (factors[j].rows() != rows) fail("StructureMismatch", "prefix row count mismatch");
      for (int s = 0; s < factors[j].rows(); ++s) {
        if (std::abs(factors[j].row(s).sum() - 1.0) > 1e-9) {
          fail("MalformedRecord", "conditional row does not sum to 1");
        }
      }
      rows *= cardinality(j);
      if (rows > 1000000) fail("MalformedRecord", "factor space exceeds enumerability bound");
    }
  }
};

struct FactorizedKl {
  double joint = 0.0;                   // full product-space enumeration
  std::vector<double> per_factor;      // prefix-weighted conditional KLs
  double per_factor_average = 0.0;
};

/// Joint KL(p || q) by enumeration, and its exact per-factor decomposition
/// sum_j E_{prefix ~ p} KL(p_j(.|prefix) || q_j(.|prefix)).
inline FactorizedKl factorized_kl(const FactorizedDist& p, const FactorizedDist& q) {
  p.check();
  q.check();
  if (p.factor_count() != q.factor_count()) {
    fail("StructureMismatch", "factor counts differ");
  }
  for (int j = 0; j < p.factor_count(); ++j) {
    if (p.cardinality(j) != q.cardinality(j)) {
      fail("StructureMismatch", "factor cardinalities differ");
    }
  }
  int m = p.factor_count();

  // Joint KL by full enumeration of the product space.
  double joint = 0.0;
  std::vector<int> assignment(m, 0);
  while (true) {
    double pp = 1.0, qq = 1.0;
    int prefix = 0;
    for (int j = 0; j < m; ++j) {
      pp *= p.factors[j](prefix, assignment[j]);
      qq *= q.factors[j](prefix, assignment[j]);
      prefix = prefix * p.cardinality(j) + assignment[j];
    }
    if (pp > 0.0) {
      if (qq <= 0.0) fail("SupportViolation", "p has mass where q vanishes");
      joint += pp * std::log(pp / qq);
    }
    int j = m - 1;
    while (j >= 0 && ++assignment[j] == p.cardinality(j)) assignment[j--] = 0;
    if (j < 0) break;
  }

  // Decomposition: prefix visit probabilities under p.
  FactorizedKl out;
  out.joint = joint;
  Vec prefix_prob = Vec::Ones(1);
  for (int j = 0; j < m; ++j) {
    double term = 0.0;
    int card = p.cardinality(j);
    Vec next = Vec::Zero(prefix_prob.size() * card);
    for (int s = 0; s < prefix_prob.size(); ++s) {
      double kl = 0.0;
      for (int a = 0; a < card; ++a) {
        double pv = p.factors[j](s, a);
        double qv = q.factors[j](s, a);
        if (pv > 0.0) {
          if (qv <= 0.0) fail("SupportViolation", "p has mass where q vanishes");
          kl += pv * std::log(pv / qv);
        }
        next[s * card + a] = prefix_prob[s] * pv;
      }
      term += prefix_prob[s] * kl;
    }
    out.per_factor.push_back(term);
    prefix_prob = next;
  }
  for (double t : out.per_factor) out.per_factor_average += t;
  out.per_factor_average /= m;
  return out;
}

// ---------------------------------------------------------------------------
// Decision counts

struct DecisionCounts {
  long l_atom = 0;
  long l_motif = 0;
  double ratio = 0.0;
  double bound = 0.0;  // 3 / chi^2
};

/// Atom-level decisions n + C(n,2) at n_atom versus motif-level decisions
/// n + C(n,2) + n(n-1) at n_motif, with the 3/chi^2 upper bound.
inline DecisionCounts decision_counts(int n_atom, int n_motif) {
  if (n_motif < 1 || n_motif > n_atom) fail("BadSizes", "need 1 <= n_motif <= n_atom");
  DecisionCounts out;
  out.l_atom = (static_cast<long>(n_atom) * n_atom + n_atom) / 2;
  out.l_motif = (3L * n_motif * n_motif - n_motif) / 2;
  out.ratio = static_cast<double>(out.l_motif) / static_cast<double>(out.l_atom);
  double chi = static_cast<double>(n_atom) / n_motif;
  out.bound = 3.0 / (chi * chi);
  if (out.ratio > out.bound + 1e-12) fail("BadSizes", "decision-count bound violated");
  return out;
}

// ---------------------------------------------------------------------------
// Verification battery (used by tests and the `verify` CLI subcommand)

struct VerifyRow {
  std::string name;
  bool pass = false;
  std::string detail;
};

inline ToyMDP random_toy_mdp(Rng& rng, int max_horizon = 4, int max_actions = 5) {
  ToyMDP mdp;
  mdp.horizon = 1 + rng.uniform_int(max_horizon);
  for (int h = 0; h < mdp.horizon; ++h) {
    mdp.action_counts.push_back(2 + rng.uniform_int(max_actions - 1));
  }
  mdp.ref.resize(mdp.horizon);
  for (int h = 0; h < mdp.horizon; ++h) {
    Mat table(mdp.states_at(h), mdp.action_counts[h]);
    for (int s = 0; s < table.rows(); ++s) {
      double total = 0.0;
      for (int a = 0; a < table.cols(); ++a) {
        table(s, a) = 0.05 + rng.u01();
        total += table(s, a);
      }
      table.row(s) /= total;
    }
    mdp.ref[h] = table;
  }
  mdp.rewards = Vec(mdp.states_at(mdp.horizon));
  for (int s = 0; s < mdp.rewards.size(); ++s) mdp.rewards[s] = 2.0 * rng.normal();
  return mdp;
}

inline FactorizedDist random_factorized(Rng& rng, const std::vector<int>& cards) {
  FactorizedDist d;
  int rows = 1;
  for (int card : cards) {
    Mat table(rows, card);
    for (int s = 0; s < rows; ++s) {
      double total = 0.0;
      for (int a = 0; a < card; ++a) {
        table(s, a) = 0.05 + rng.u01();
        total += table(s, a);
      }
      table.row(s) /= total;
    }
    d.factors.push_back(table);
    rows *= card;
  }
  return d;
}

/// Runs every theory check; one row per proposition/corollary.
inline std::vector<VerifyRow> run_battery(std::uint64_t seed = 20240808) {
  std::vector<VerifyRow> rows;
  auto push = [&](const std::string& name, bool pass, double worst) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "max deviation %.3e", worst);
    rows.push_back({name, pass, buf});
  };

  {  // Gibbs identity closed forms
    Vec ref = Vec::Constant(2, 0.5);
    Vec q(2);
    q << 1.0, 0.0;
    GibbsResult g = gibbs_maximizer(ref, q, 1.0);
    double e = std::exp(1.0);
    double worst = std::abs(g.policy[0] - e / (e + 1.0));
    worst = std::max(worst, std::abs(g.value - std::log((e + 1.0) / 2.0)));
    Vec qc = Vec::Constant(3, 0.7);
    Vec ref3(3);
    ref3 << 0.2, 0.5, 0.3;
    GibbsResult gc = gibbs_maximizer(ref3, qc, 2.0);
    worst = std::max(worst, (gc.policy - ref3).cwiseAbs().maxCoeff());
    worst = std::max(worst, std::abs(gc.value - 0.7));
    GibbsResult glim = gibbs_maximizer(ref, q, 1e6);
    bool tv_ok = 0.5 * (glim.policy - ref).cwiseAbs().sum() < 1e-5;
    push("gibbs_variational_identity", worst < 1e-9 && tv_ok, worst);
  }

  {  // Soft Bellman optimality vs exact enumeration, 50+ random MDPs
    Rng rng(seed);
    double worst = 0.0;
    double worst_gain = 0.0;
    double worst_tilt = 0.0;
    bool support_ok = true;
    int mdps = 0;
    for (int rep = 0; rep < 18; ++rep) {
      for (double beta : {0.1, 1.0, 10.0}) {
        ToyMDP mdp = random_toy_mdp(rng);
        ++mdps;
        BellmanSolution sol = soft_bellman_solve(mdp, beta);
        double j_star = enumerate_objective(mdp, sol.policy, beta);
        worst = std::max(worst, std::abs(j_star - sol.values[0][0]));
        // no perturbation of the optimal policy may do better
        for (int pert = 0; pert < 2; ++pert) {
          PolicyTables alt = sol.policy;
          for (auto& table : alt) {
            for (int s = 0; s < table.rows(); ++s) {
              double total = 0.0;
              for (int a = 0; a < table.cols(); ++a) {
                table(s, a) *= std::exp(0.3 * rng.normal());
                total += table(s, a);
              }
              table.row(s) /= total;
            }
          }
          worst_gain = std::max(worst_gain, enumerate_objective(mdp, alt, beta) - j_star);
        }
        // relative tilt identity at the root state
        const Mat& pi0 = sol.policy[0];
        const Mat& ref0 = mdp.ref[0];
        for (int a = 1; a < pi0.cols(); ++a) {
          double lhs = (pi0(0, a) / ref0(0, a)) / (pi0(0, 0) / ref0(0, 0));
          double rhs = std::exp((sol.values[1][a] - sol.values[1][0]) / beta);
          worst_tilt = std::max(worst_tilt, std::abs(lhs - rhs) / std::max(1.0, rhs));
        }
      }
    }
    {  // support preservation with a zero-reference action
      ToyMDP mdp;
      mdp.horizon = 1;
      mdp.action_counts = {3};
      Mat ref(1, 3);
      ref << 0.6, 0.4, 0.0;
      mdp.ref = {ref};
      mdp.rewards = Vec(3);
      mdp.rewards << 0.0, 1.0, 100.0;
      BellmanSolution sol = soft_bellman_solve(mdp, 0.5);
      support_ok = sol.policy[0](0, 2) == 0.0;
    }
    push("soft_bellman_vs_enumeration(" + std::to_string(mdps) + " mdps)",
         worst < 1e-9 && support_ok, worst);
    push("no_policy_beats_optimum", worst_gain < 1e-9, worst_gain);
    push("relative_action_tilt", worst_tilt < 1e-9, worst_tilt);
  }

  {  // Factorized KL decomposition + budget dilution on 100+ random pairs
    Rng rng(seed + 1);
    double worst = 0.0;
    bool budget_ok = true;
    int pairs = 0;
    for (int rep = 0; rep < 110; ++rep) {
      int m = 2 + rng.uniform_int(3);
      std::vector<int> cards;
      for (int j = 0; j < m; ++j) cards.push_back(2 + rng.uniform_int(3));
      FactorizedDist p = random_factorized(rng, cards);
      FactorizedDist q = random_factorized(rng, cards);
      FactorizedKl kl = factorized_kl(p, q);
      ++pairs;
      double total = 0.0;
      for (double t : kl.per_factor) total += t;
      worst = std::max(worst, std::abs(total - kl.joint));
      if (kl.per_factor_average > kl.joint / m + 1e-15) budget_ok = false;
    }
    push("factorized_kl_decomposition(" + std::to_string(pairs) + " pairs)", worst < 1e-12,
         worst);
    push("kl_budget_per_subdecision", budget_ok, 0.0);
  }

  {  // Amplification bound on 1000 hypothesis-satisfying instances
    Rng rng(seed + 2);
    double worst = 0.0;
    for (int rep = 0; rep < 1000; ++rep) {
      int n = 3 + rng.uniform_int(5);
      Vec ref(n);
      double total = 0.0;
      for (int a = 0; a < n; ++a) {
        ref[a] = 0.05 + rng.u01();
        total += ref[a];
      }
      ref /= total;
      int g_size = 1 + rng.uniform_int(n - 1);
      double b = rng.normal();
      double delta = 0.1 + 2.0 * rng.u01();
      double beta = 0.2 + 3.0 * rng.u01();
      Vec q(n);
      double p_g = 0.0;
      for (int a = 0; a < n; ++a) {
        if (a < g_size) {
          q[a] = b + delta + rng.u01();  // at least b + delta
          p_g += ref[a];
        } else {
          q[a] = b - rng.u01();  // at most b
        }
      }
      GibbsResult res = gibbs_maximizer(ref, q, beta);
      double mass = 0.0;
      for (int a = 0; a < g_size; ++a) mass += res.policy[a];
      double bound = amplification_bound(p_g, delta, beta);
      worst = std::max(worst, bound - mass);  // must stay <= 0
    }
    push("amplification_bound(1000 instances)", worst <= 1e-12, worst);
  }

  {  // Decision-count formulas and the compression bound
    DecisionCounts dc = decision_counts(4, 2);
    bool ok = dc.l_atom == 10 && dc.l_motif == 5 && std::abs(dc.ratio - 0.5) < 1e-15 &&
              dc.ratio <= dc.bound;
    DecisionCounts unit = decision_counts(1, 1);
    ok = ok && unit.l_atom == 1 && unit.l_motif == 1 && unit.ratio == 1.0;
    double chi = 5.5;
    double bound = 3.0 / (chi * chi);
    ok = ok && std::abs(std::round(bound * 1000.0) / 1000.0 - 0.099) < 1e-12;
    push("decision_count_reduction", ok, std::abs(bound - 0.0991735537190083));
  }

  return rows;
}

}  // namespace motifdiff::theory
