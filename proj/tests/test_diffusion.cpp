// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include <catch_amalgamated.hpp>

#include "motifdiff/diffusion.hpp"

using namespace motifdiff;

namespace {

// Brute-force Bayes oracle: p(k) ∝ Σ_i x0(i) · qbar_{t-1}(k|i) · q_t(j|k),
// with the transition matrices materialized explicitly.
Vec posterior_oracle(const Vec& x0, int j, int t, const NoiseSchedule& sched,
                     const Vec& marginal) {
  int d = static_cast<int>(marginal.size());
  auto q_step = [&](int a, int b, double alpha) {
    return alpha * (a == b ? 1.0 : 0.0) + (1.0 - alpha) * marginal[b];
  };
  Vec post = Vec::Zero(d);
  for (int k = 0; k < d; ++k) {
    for (int i = 0; i < d; ++i) {
      post[k] += x0[i] * q_step(i, k, sched.alpha_bar[t - 1]) * q_step(k, j, sched.alpha(t));
    }
  }
  return post / post.sum();
}

PaddedState two_slot_state(int d_unused = 0) {
  (void)d_unused;
  PaddedState z(3);
  z.m = {1, 1, 0};
  z.x = {1, 0, 0};
  z.E(0, 1) = 1;
  z.E(1, 0) = 1;
  z.P(0, 1) = 1;
  z.P(1, 0) = 1;
  return z;
}

TransitionModel toy_transitions(int d_x, int d_p) {
  TransitionModel tm;
  tm.m_x = Vec::Constant(d_x, 1.0 / d_x);
  tm.m_e = Vec::Constant(kBondCategories, 1.0 / kBondCategories);
  tm.m_p = Vec::Constant(d_p, 1.0 / d_p);
  // a non-uniform X marginal to exercise asymmetric cases
  if (d_x >= 3) {
    tm.m_x << 0.5, 0.3, 0.2;
  }
  return tm;
}

}  // namespace

TEST_CASE("cosine schedule shape") {
  auto sched = cosine_schedule(50);
  REQUIRE(sched.alpha_bar.size() == 51);
  CHECK(sched.alpha_bar[0] == 1.0);
  CHECK(sched.alpha_bar[50] < 1e-6);
  for (int t = 1; t <= 50; ++t) {
    CHECK(sched.alpha_bar[t] < sched.alpha_bar[t - 1]);
    CHECK(sched.alpha(t) > 0.0);
    CHECK(sched.alpha(t) <= 1.0);
  }
}

TEST_CASE("forward_sample endpoints") {
  auto sched = cosine_schedule(50);
  auto tm = toy_transitions(3, 4);
  PaddedState z0 = two_slot_state();
  Rng rng(1);

  SECTION("t = 0 is the identity") {
    for (int i = 0; i < 20; ++i) CHECK(forward_sample(z0, 0, sched, tm, rng) == z0);
  }
  SECTION("bad step") {
    CHECK_THROWS_AS(forward_sample(z0, 51, sched, tm, rng), Error);
    CHECK_THROWS_AS(forward_sample(z0, -1, sched, tm, rng), Error);
  }
  SECTION("t = T matches the marginal within 3 standard errors") {
    const int kDraws = 100000;
    Vec counts = Vec::Zero(3);
    for (int s = 0; s < kDraws; ++s) {
      PaddedState z = forward_sample(z0, 50, sched, tm, rng);
      counts[z.x[0]] += 1.0;
    }
    for (int k = 0; k < 3; ++k) {
      double p = tm.m_x[k];
      double se = std::sqrt(p * (1 - p) / kDraws);
      CHECK(std::abs(counts[k] / kDraws - p) < 3 * se + 1e-12);
    }
  }
  SECTION("mid t matches the closed-form mixture within 3 standard errors") {
    const int kDraws = 100000;
    int t = 25;
    Vec counts = Vec::Zero(3);
    for (int s = 0; s < kDraws; ++s) {
      PaddedState z = forward_sample(z0, t, sched, tm, rng);
      counts[z.x[0]] += 1.0;
    }
    double ab = sched.alpha_bar[t];
    for (int k = 0; k < 3; ++k) {
      double p = ab * (z0.x[0] == k ? 1.0 : 0.0) + (1 - ab) * tm.m_x[k];
      double se = std::sqrt(p * (1 - p) / kDraws);
      CHECK(std::abs(counts[k] / kDraws - p) < 3 * se + 1e-12);
    }
  }
  SECTION("inactive entries untouched and E symmetric") {
    for (int s = 0; s < 200; ++s) {
      PaddedState z = forward_sample(z0, 30, sched, tm, rng);
      CHECK(z.m == z0.m);
      CHECK(z.x[2] == 0);
      CHECK(z.E(0, 2) == 0);
      CHECK(z.E(0, 1) == z.E(1, 0));
    }
  }
}

TEST_CASE("marginal consistency: stepwise composition equals one-shot") {
  // chi-squared test on the X factor of a one-active-slot state
  auto sched = cosine_schedule(20);
  TransitionModel tm = toy_transitions(3, 4);
  PaddedState z0(1);
  z0.m = {1};
  z0.x = {2};

  const int kDraws = 50000;
  const int t = 7;
  Rng rng(99);
  Vec counts = Vec::Zero(3);
  for (int s = 0; s < kDraws; ++s) {
    PaddedState z = z0;
    for (int step = 1; step <= t; ++step) {
      // single-step kernel: keep with alpha_step else marginal
      if (rng.u01() >= sched.alpha(step)) {
        std::vector<double> w(tm.m_x.data(), tm.m_x.data() + 3);
        z.x[0] = rng.categorical(w);
      }
    }
    counts[z.x[0]] += 1.0;
  }
  double abor = sched.alpha_bar[t];
  double chi2 = 0.0;
  for (int k = 0; k < 3; ++k) {
    double expected = kDraws * (abor * (z0.x[0] == k ? 1.0 : 0.0) + (1 - abor) * tm.m_x[k]);
    chi2 += (counts[k] - expected) * (counts[k] - expected) / expected;
  }
  CHECK(chi2 < 13.8);  // 99.9% quantile, 2 dof
}

TEST_CASE("reverse posterior") {
  auto sched = cosine_schedule(50);
  auto tm = toy_transitions(3, 4);
  PaddedState z = two_slot_state();

  auto uniform_pred = [&](const PaddedState& state) {
    FactorRows pred;
    auto vals = factor_values(state);
    pred.x = Mat::Constant(vals.x.size(), 3, 1.0 / 3);
    pred.e = Mat::Constant(vals.e.size(), kBondCategories, 0.25);
    pred.p = Mat::Constant(vals.p.size(), 4, 0.25);
    return pred;
  };

  SECTION("matches brute-force enumeration on 3-category factors") {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
      int t = 1 + rng.uniform_int(50);
      Vec x0(3);
      x0 << rng.u01() + 0.01, rng.u01() + 0.01, rng.u01() + 0.01;
      x0 /= x0.sum();
      FactorRows pred = uniform_pred(z);
      pred.x.row(0) = x0.transpose();
      pred.x.row(1) = x0.transpose();
      FactorRows post = reverse_posterior(z, pred, t, sched, tm);
      Vec oracle = posterior_oracle(x0, z.x[0], t, sched, tm.m_x);
      for (int k = 0; k < 3; ++k) {
        CHECK(std::abs(post.x(0, k) - oracle[k]) < 1e-9);
      }
    }
  }
  SECTION("rows are normalized") {
    FactorRows post = reverse_posterior(z, uniform_pred(z), 17, sched, tm);
    for (const Mat* rows : {&post.x, &post.e, &post.p}) {
      for (int r = 0; r < rows->rows(); ++r) {
        CHECK(std::abs(rows->row(r).sum() - 1.0) < 1e-9);
      }
    }
  }
  SECTION("t = 1 with near-1 alpha concentrates on the point-mass prediction") {
    NoiseSchedule tight;
    tight.steps = 2;
    tight.alpha_bar = {1.0, 1.0 - 1e-12, 0.5};
    FactorRows pred = uniform_pred(z);
    pred.x = Mat::Zero(2, 3);
    pred.x(0, 2) = 1.0;  // point mass away from z_t value
    pred.x(1, 0) = 1.0;
    FactorRows post = reverse_posterior(z, pred, 1, tight, tm);
    CHECK(post.x(0, 2) > 1.0 - 1e-9);
    // and the argmax is the predicted endpoint category
    int argmax;
    post.x.row(0).maxCoeff(&argmax);
    CHECK(argmax == 2);
  }
  SECTION("uniform prediction and uniform marginal: symmetry off the current value") {
    TransitionModel uni = toy_transitions(4, 4);
    uni.m_x = Vec::Constant(4, 0.25);
    PaddedState zu(1);
    zu.m = {1};
    zu.x = {1};
    FactorRows pred;
    pred.x = Mat::Constant(1, 4, 0.25);
    pred.e = Mat(0, kBondCategories);
    pred.p = Mat(0, 4);
    FactorRows post = reverse_posterior(zu, pred, 9, cosine_schedule(20), uni);
    CHECK(std::abs(post.x(0, 0) - post.x(0, 2)) < 1e-12);
    CHECK(std::abs(post.x(0, 0) - post.x(0, 3)) < 1e-12);
  }
  SECTION("errors") {
    FactorRows pred = uniform_pred(z);
    CHECK_THROWS_AS(reverse_posterior(z, pred, 0, sched, tm), Error);
    CHECK_THROWS_AS(reverse_posterior(z, pred, 51, sched, tm), Error);
    pred.x(0, 0) += 0.01;  // break normalization
    try {
      reverse_posterior(z, pred, 5, sched, tm);
      FAIL("expected UnnormalizedPrediction");
    } catch (const Error& e) {
      CHECK(e.category() == "UnnormalizedPrediction");
    }
    FactorRows missing = uniform_pred(z);
    missing.e = Mat(0, kBondCategories);
    try {
      reverse_posterior(z, missing, 5, sched, tm);
      FAIL("expected MissingFactorPrediction");
    } catch (const Error& e) {
      CHECK(e.category() == "MissingFactorPrediction");
    }
  }
}

TEST_CASE("oracle endpoint reconstruction from small t") {
  // With x0 predictions fixed to the true one-hots, sampling the reverse
  // chain from z_t recovers z_0 at least as often as the analytic per-factor
  // recovery probability (minus Monte Carlo slack).
  auto sched = cosine_schedule(50);
  auto tm = toy_transitions(3, 4);
  const int d = 3;
  const int true_value = 1;
  const int t_start = 5;

  // Analytic recovery probability: evolve the per-factor distribution through
  // the posterior kernels with point-mass x0.
  Vec x0 = Vec::Zero(d);
  x0[true_value] = 1.0;
  Rng rng(17);
  // start from the worst case: z_t differs from z_0
  int z_t_val = 0;
  Vec dist = Vec::Zero(d);
  dist[z_t_val] = 1.0;
  for (int t = t_start; t >= 1; --t) {
    Vec next = Vec::Zero(d);
    for (int j = 0; j < d; ++j) {
      if (dist[j] == 0.0) continue;
      Vec step = posterior_oracle(x0, j, t, sched, tm.m_x);
      next += dist[j] * step;
    }
    dist = next;
  }
  double analytic = std::clamp(dist[true_value], 0.0, 1.0);

  const int kDraws = 20000;
  int hits = 0;
  for (int s = 0; s < kDraws; ++s) {
    int v = z_t_val;
    for (int t = t_start; t >= 1; --t) {
      Vec post = posterior_oracle(x0, v, t, sched, tm.m_x);
      std::vector<double> w(post.data(), post.data() + d);
      v = rng.categorical(w);
    }
    if (v == true_value) ++hits;
  }
  double freq = static_cast<double>(hits) / kDraws;
  double mc_err = 3.0 * std::sqrt(analytic * (1 - analytic) / kDraws);
  CHECK(freq >= analytic - mc_err);
  CHECK(analytic > 0.9);  // cosine schedule keeps early steps nearly lossless
}

TEST_CASE("masked cross-entropy loss") {
  auto vals_state = two_slot_state();
  LossConfig cfg;

  SECTION("perfect one-hot predictions give zero loss") {
    FactorRows pred;
    auto vals = factor_values(vals_state);
    pred.x = Mat::Zero(vals.x.size(), 3);
    for (std::size_t r = 0; r < vals.x.size(); ++r) pred.x(r, vals.x[r]) = 1.0;
    pred.e = Mat::Zero(vals.e.size(), kBondCategories);
    for (std::size_t r = 0; r < vals.e.size(); ++r) pred.e(r, vals.e[r]) = 1.0;
    pred.p = Mat::Zero(vals.p.size(), 4);
    for (std::size_t r = 0; r < vals.p.size(); ++r) pred.p(r, vals.p[r]) = 1.0;
    auto loss = masked_ce_loss(pred, vals_state, cfg);
    CHECK(loss.total == 0.0);
  }
  SECTION("uniform predictions give ln d per channel") {
    FactorRows pred;
    auto vals = factor_values(vals_state);
    pred.x = Mat::Constant(vals.x.size(), 3, 1.0 / 3);
    pred.e = Mat::Constant(vals.e.size(), kBondCategories, 0.25);
    pred.p = Mat::Constant(vals.p.size(), 4, 0.25);
    auto loss = masked_ce_loss(pred, vals_state, cfg);
    CHECK(std::abs(loss.ce_x - std::log(3.0)) < 1e-12);
    CHECK(std::abs(loss.ce_e - std::log(4.0)) < 1e-12);
    CHECK(std::abs(loss.ce_p - std::log(4.0)) < 1e-12);
    CHECK(std::abs(loss.total - (std::log(3.0) + 2 * std::log(4.0))) < 1e-12);
  }
  SECTION("single active node: pair channels contribute zero") {
    PaddedState z(3);
    z.m = {1, 0, 0};
    z.x = {2, 0, 0};
    FactorRows pred;
    pred.x = Mat::Constant(1, 3, 1.0 / 3);
    pred.e = Mat(0, kBondCategories);
    pred.p = Mat(0, 4);
    auto loss = masked_ce_loss(pred, z, cfg);
    CHECK(loss.ce_e == 0.0);
    CHECK(loss.ce_p == 0.0);
    CHECK(loss.total == loss.ce_x);
  }
  SECTION("lambda weighting") {
    PaddedState z(3);
    z.m = {1, 0, 0};
    z.x = {0, 0, 0};
    FactorRows pred;
    pred.x = Mat::Constant(1, 3, 1.0 / 3);
    pred.e = Mat(0, kBondCategories);
    pred.p = Mat(0, 4);
    auto loss = masked_ce_loss(pred, z, {2.0, 1.0, 1.0});
    CHECK(std::abs(loss.total - 2.0 * std::log(3.0)) < 1e-12);
  }
}

TEST_CASE("mask prior sampling") {
  SECTION("degenerate prior") {
    MaskPrior prior{5, {0, 0, 1.0, 0, 0}};
    Rng rng(3);
    for (int s = 0; s < 50; ++s) {
      auto m = sample_mask(prior, rng);
      CHECK(m == std::vector<std::uint8_t>{1, 1, 1, 0, 0});
    }
  }
  SECTION("Monte Carlo frequencies match the prior") {
    MaskPrior prior{4, {0.1, 0.2, 0.3, 0.4}};
    Rng rng(8);
    const int kDraws = 100000;
    std::vector<int> counts(4, 0);
    for (int s = 0; s < kDraws; ++s) {
      auto m = sample_mask(prior, rng);
      int n = 0;
      for (auto v : m) n += v;
      counts[n - 1] += 1;
    }
    for (int k = 0; k < 4; ++k) {
      double p = prior.prob[k];
      double se = std::sqrt(p * (1 - p) / kDraws);
      CHECK(std::abs(counts[k] / double(kDraws) - p) < 3 * se);
    }
  }
  SECTION("single-motif corpus gives n = 1 always") {
    PaddedState z(4);
    z.m = {1, 0, 0, 0};
    auto prior = estimate_mask_prior({z, z, z}, 4);
    Rng rng(4);
    for (int s = 0; s < 20; ++s) {
      auto m = sample_mask(prior, rng);
      CHECK(m == std::vector<std::uint8_t>{1, 0, 0, 0});
    }
  }
}

TEST_CASE("prior sampling") {
  auto tm = toy_transitions(3, 4);
  SECTION("marginal frequencies") {
    Rng rng(11);
    const int kDraws = 100000;
    Vec counts = Vec::Zero(3);
    std::vector<std::uint8_t> mask{1, 0};
    for (int s = 0; s < kDraws; ++s) {
      PaddedState z = prior_sample(mask, tm, rng);
      counts[z.x[0]] += 1.0;
    }
    for (int k = 0; k < 3; ++k) {
      double p = tm.m_x[k];
      double se = std::sqrt(p * (1 - p) / kDraws);
      CHECK(std::abs(counts[k] / kDraws - p) < 3 * se);
    }
  }
  SECTION("structural invariants always hold") {
    Rng rng(12);
    std::vector<std::uint8_t> mask{1, 0, 1, 1};
    for (int s = 0; s < 200; ++s) {
      PaddedState z = prior_sample(mask, tm, rng);
      CHECK(z.m == mask);
      for (int i = 0; i < 4; ++i) {
        CHECK(z.E(i, i) == 0);
        CHECK(z.P(i, i) == 0);
        for (int j = 0; j < 4; ++j) {
          CHECK(z.E(i, j) == z.E(j, i));
          if (!mask[i] || !mask[j]) {
            CHECK(z.E(i, j) == 0);
            CHECK(z.P(i, j) == 0);
          }
        }
      }
    }
  }
  SECTION("n = 1 draws no pair factors") {
    Rng rng(13);
    PaddedState z = prior_sample({0, 1, 0}, tm, rng);
    CHECK(z.active_count() == 1);
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) {
        CHECK(z.E(i, j) == 0);
        CHECK(z.P(i, j) == 0);
      }
    }
  }
}

TEST_CASE("transition estimation") {
  PaddedState z = two_slot_state();
  auto tm = estimate_transitions({z}, 3, 4);
  CHECK(std::abs(tm.m_x.sum() - 1.0) < 1e-12);
  CHECK(std::abs(tm.m_e.sum() - 1.0) < 1e-12);
  CHECK(std::abs(tm.m_p.sum() - 1.0) < 1e-12);
  CHECK(tm.m_x.minCoeff() > 0.0);  // strictly positive categories
  // x values {1, 0} -> roughly half mass each on categories 0 and 1
  CHECK(tm.m_x[0] > 0.4);
  CHECK(tm.m_x[1] > 0.4);
  CHECK(tm.m_x[2] < 0.01);
  CHECK_THROWS_AS(estimate_transitions({}, 3, 4), Error);
}
