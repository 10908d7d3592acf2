// SPDX-License-Identifier: Apache-2.0
//
// Categorical diffusion over padded motif states: cosine noise schedule,
// marginal-resampling transitions, forward corruption, endpoint-prediction
// reverse posteriors, mask/prior sampling and the masked denoising loss.
#pragma once

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "motifdiff/common.hpp"
#include "motifdiff/npe.hpp"

namespace motifdiff {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Noise schedule

struct NoiseSchedule {
  int steps = 0;                  // T
  std::vector<double> alpha_bar;  // size T+1, alpha_bar[0] = 1, decreasing

  /// Per-step retention alpha_t = alpha_bar[t] / alpha_bar[t-1], t in [1, T].
  double alpha(int t) const { return alpha_bar[t] / alpha_bar[t - 1]; }

  void check_step(int t, int lo) const {
    if (t < lo || t > steps) fail("BadStep", "diffusion step out of range");
  }
};

/// Cosine schedule rescaled so alpha_bar[0] = 1.
inline NoiseSchedule cosine_schedule(int steps, double s = 0.008) {
  NoiseSchedule sched;
  sched.steps = steps;
  sched.alpha_bar.resize(steps + 1);
  auto f = [s](double u) {
    double v = std::cos((u + s) / (1.0 + s) * M_PI / 2.0);
    return v * v;
  };
  for (int t = 0; t <= steps; ++t) {
    sched.alpha_bar[t] = f(static_cast<double>(t) / steps) / f(0.0);
  }
  sched.alpha_bar[0] = 1.0;
  return sched;
}

// ---------------------------------------------------------------------------
// Transition marginals and mask prior

struct TransitionModel {
  Vec m_x;  // over motif types, size d_x
  Vec m_e;  // over bond categories, size kBondCategories
  Vec m_p;  // over attachment categories, size a_max + 1
};

/// Channel marginals over active slots/pairs of the given states. A small
/// floor keeps every category strictly positive so reverse posteriors and
/// their logs stay finite.
inline TransitionModel estimate_transitions(const std::vector<PaddedState>& data, int d_x,
                                            int d_p, double floor = 1e-6) {
  if (data.empty()) fail("EmptyCorpus", "no states for transition estimation");
  TransitionModel tm;
  tm.m_x = Vec::Zero(d_x);
  tm.m_e = Vec::Zero(kBondCategories);
  tm.m_p = Vec::Zero(d_p);
  for (const auto& z : data) {
    auto slots = z.active_slots();
    for (std::size_t a = 0; a < slots.size(); ++a) {
      tm.m_x[z.x[slots[a]]] += 1.0;
      for (std::size_t b = 0; b < slots.size(); ++b) {
        if (a == b) continue;
        tm.m_p[z.P(slots[a], slots[b])] += 1.0;
        if (a < b) tm.m_e[z.E(slots[a], slots[b])] += 1.0;
      }
    }
  }
  for (Vec* v : {&tm.m_x, &tm.m_e, &tm.m_p}) {
    *v = (v->array() + floor).matrix();
    *v /= v->sum();
  }
  return tm;
}

struct MaskPrior {
  int n_max = 0;
  std::vector<double> prob;  // prob[k] = P(n = k + 1)
};

inline MaskPrior estimate_mask_prior(const std::vector<PaddedState>& data, int n_max) {
  if (data.empty()) fail("EmptyCorpus", "no states for mask prior");
  MaskPrior prior;
  prior.n_max = n_max;
  prior.prob.assign(n_max, 0.0);
  for (const auto& z : data) {
    int n = z.active_count();
    if (n < 1 || n > n_max) fail("TooManyNodes", "state size outside mask prior support");
    prior.prob[n - 1] += 1.0;
  }
  for (auto& p : prior.prob) p /= static_cast<double>(data.size());
  return prior;
}

/// Draw an active-slot count and activate the prefix.
inline std::vector<std::uint8_t> sample_mask(const MaskPrior& prior, Rng& rng) {
  int n = rng.categorical(prior.prob) + 1;
  std::vector<std::uint8_t> m(prior.n_max, 0);
  for (int i = 0; i < n; ++i) m[i] = 1;
  return m;
}

// ---------------------------------------------------------------------------
// Factor enumeration shared by diffusion, the denoiser and RL.
//
// Factor order is fixed everywhere: active slots ascending (X), unordered
// active pairs in lexicographic order (E), ordered active pairs in
// lexicographic order (P).

inline std::vector<std::pair<int, int>> active_pairs(const PaddedState& z) {
  std::vector<std::pair<int, int>> out;
  auto slots = z.active_slots();
  for (std::size_t a = 0; a < slots.size(); ++a) {
    for (std::size_t b = a + 1; b < slots.size(); ++b) out.push_back({slots[a], slots[b]});
  }
  return out;
}

inline std::vector<std::pair<int, int>> active_ordered_pairs(const PaddedState& z) {
  std::vector<std::pair<int, int>> out;
  auto slots = z.active_slots();
  for (int i : slots) {
    for (int j : slots) {
      if (i != j) out.push_back({i, j});
    }
  }
  return out;
}

/// Per-factor categorical rows in the shared factor order.
struct FactorRows {
  Mat x;  // n_active × d_x
  Mat e;  // n_pairs × d_e
  Mat p;  // n_ordered × d_p
};

/// Realized categorical values of a state, in the shared factor order.
struct FactorValues {
  std::vector<int> x, e, p;
};

inline FactorValues factor_values(const PaddedState& z) {
  FactorValues v;
  for (int i : z.active_slots()) v.x.push_back(z.x[i]);
  for (auto [i, j] : active_pairs(z)) v.e.push_back(z.E(i, j));
  for (auto [i, j] : active_ordered_pairs(z)) v.p.push_back(z.P(i, j));
  return v;
}

// ---------------------------------------------------------------------------
// Forward corruption

/// One-shot jump to step t: every active factor keeps its value with
/// probability alpha_bar[t], otherwise resamples from the channel marginal.
inline PaddedState forward_sample(const PaddedState& z0, int t, const NoiseSchedule& sched,
                                  const TransitionModel& tm, Rng& rng) {
  sched.check_step(t, 0);
  double keep = sched.alpha_bar[t];
  PaddedState z = z0;
  auto resample = [&](const Vec& marginal) {
    std::vector<double> w(marginal.data(), marginal.data() + marginal.size());
    return rng.categorical(w);
  };
  for (int i : z0.active_slots()) {
    if (rng.u01() >= keep) z.x[i] = resample(tm.m_x);
  }
  for (auto [i, j] : active_pairs(z0)) {
    if (rng.u01() >= keep) {
      int v = resample(tm.m_e);
      z.E(i, j) = v;
      z.E(j, i) = v;
    }
  }
  for (auto [i, j] : active_ordered_pairs(z0)) {
    if (rng.u01() >= keep) z.P(i, j) = resample(tm.m_p);
  }
  return z;
}

/// All active factors drawn from the channel marginals (the p(z_T) prior).
inline PaddedState prior_sample(const std::vector<std::uint8_t>& mask,
                                const TransitionModel& tm, Rng& rng) {
  PaddedState z(static_cast<int>(mask.size()));
  z.m = mask;
  auto draw = [&](const Vec& marginal) {
    std::vector<double> w(marginal.data(), marginal.data() + marginal.size());
    return rng.categorical(w);
  };
  for (int i : z.active_slots()) z.x[i] = draw(tm.m_x);
  for (auto [i, j] : active_pairs(z)) {
    int v = draw(tm.m_e);
    z.E(i, j) = v;
    z.E(j, i) = v;
  }
  for (auto [i, j] : active_ordered_pairs(z)) z.P(i, j) = draw(tm.m_p);
  return z;
}

// ---------------------------------------------------------------------------
// Reverse posterior from endpoint predictions
//
// For a factor with current value j at step t, marginal m and endpoint
// prediction x0:
//   p(z_{t-1} = k) ∝ (alpha_t·1[k=j] + (1-alpha_t)·m(j))
//                  · (alpha_bar_{t-1}·x0(k) + (1-alpha_bar_{t-1})·m(k))

namespace detail {

/// Constant left factor U(row, k) for a batch of factors with current values
/// zt_vals: U(k) = alpha_t·1[k = j] + (1 - alpha_t)·m(j).
inline Mat posterior_mix_matrix(const std::vector<int>& zt_vals, int t,
                                const NoiseSchedule& sched, const Vec& marginal) {
  double a = sched.alpha(t);
  Mat u(zt_vals.size(), marginal.size());
  for (std::size_t r = 0; r < zt_vals.size(); ++r) {
    int j = zt_vals[r];
    for (int k = 0; k < marginal.size(); ++k) {
      u(r, k) = (1.0 - a) * marginal[j] + (k == j ? a : 0.0);
    }
  }
  return u;
}

/// Plain-double posterior for one channel; rows of x0 are endpoint
/// predictions aligned with zt_vals.
inline Mat posterior_rows(const Mat& x0, const std::vector<int>& zt_vals, int t,
                          const NoiseSchedule& sched, const Vec& marginal) {
  double ab_prev = sched.alpha_bar[t - 1];
  Mat u = posterior_mix_matrix(zt_vals, t, sched, marginal);
  Mat w = ab_prev * x0;
  w.rowwise() += ((1.0 - ab_prev) * marginal).transpose();
  Mat post = u.cwiseProduct(w);
  for (int r = 0; r < post.rows(); ++r) {
    double total = post.row(r).sum();
    post.row(r) /= total;
  }
  return post;
}

inline void check_prediction_rows(const Mat& rows, std::size_t expected, const char* channel) {
  if (rows.rows() != static_cast<Eigen::Index>(expected)) {
    fail("MissingFactorPrediction", std::string("prediction rows missing for channel ") + channel);
  }
  for (int r = 0; r < rows.rows(); ++r) {
    if (std::abs(rows.row(r).sum() - 1.0) > 1e-6) {
      fail("UnnormalizedPrediction", "endpoint prediction row does not sum to 1");
    }
  }
}

}  // namespace detail

/// Per-factor categorical distributions over z_{t-1}, given endpoint
/// predictions x0_dist in the shared factor order.
inline FactorRows reverse_posterior(const PaddedState& z_t, const FactorRows& x0_dist, int t,
                                    const NoiseSchedule& sched, const TransitionModel& tm) {
  sched.check_step(t, 1);
  FactorValues vals = factor_values(z_t);
  detail::check_prediction_rows(x0_dist.x, vals.x.size(), "X");
  detail::check_prediction_rows(x0_dist.e, vals.e.size(), "E");
  detail::check_prediction_rows(x0_dist.p, vals.p.size(), "P");
  FactorRows out;
  out.x = detail::posterior_rows(x0_dist.x, vals.x, t, sched, tm.m_x);
  out.e = detail::posterior_rows(x0_dist.e, vals.e, t, sched, tm.m_e);
  out.p = detail::posterior_rows(x0_dist.p, vals.p, t, sched, tm.m_p);
  return out;
}

// ---------------------------------------------------------------------------
// Masked denoising loss

struct LossConfig {
  double lambda_x = 1.0;
  double lambda_e = 1.0;
  double lambda_p = 1.0;
};

struct LossBreakdown {
  double total = 0.0;
  double ce_x = 0.0;
  double ce_e = 0.0;
  double ce_p = 0.0;
};

/// Masked cross entropy of endpoint predictions against the clean state;
/// every empty factor set contributes 0.
inline LossBreakdown masked_ce_loss(const FactorRows& pred, const PaddedState& z0,
                                    const LossConfig& cfg) {
  FactorValues vals = factor_values(z0);
  detail::check_prediction_rows(pred.x, vals.x.size(), "X");
  detail::check_prediction_rows(pred.e, vals.e.size(), "E");
  detail::check_prediction_rows(pred.p, vals.p.size(), "P");
  auto channel_ce = [](const Mat& rows, const std::vector<int>& truth) {
    if (truth.empty()) return 0.0;
    double ce = 0.0;
    for (std::size_t r = 0; r < truth.size(); ++r) {
      ce -= std::log(rows(static_cast<int>(r), truth[r]));
    }
    return ce / static_cast<double>(truth.size());
  };
  LossBreakdown out;
  out.ce_x = channel_ce(pred.x, vals.x);
  out.ce_e = channel_ce(pred.e, vals.e);
  out.ce_p = channel_ce(pred.p, vals.p);
  out.total = cfg.lambda_x * out.ce_x + cfg.lambda_e * out.ce_e + cfg.lambda_p * out.ce_p;
  return out;
}

}  // namespace motifdiff
