// SPDX-License-Identifier: Apache-2.0
//
// Reverse diffusion as a finite-horizon terminal-reward MDP: rollout
// collection with factorized log-probabilities, the terminal molecular
// reward, and the clipped-PPO update against a frozen reference policy.
#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "motifdiff/denoiser.hpp"
#include "motifdiff/optim.hpp"

namespace motifdiff {

struct PPOConfig {
  double clip_eps = 0.2;
  double c_value = 0.5;
  double c_entropy = 0.001;
  double c_kl = 0.01;
  int suffix_steps = 30;  // K: trainable final reverse steps
  int batch_size = 32;
  int update_passes = 2;
  double learning_rate = 1e-5;
  double w_val = 0.1;

  void check(int horizon) const {
    if (clip_eps <= 0.0) fail("MalformedRecord", "clip_eps must be positive");
    if (c_value < 0 || c_entropy < 0 || c_kl < 0) {
      fail("MalformedRecord", "loss coefficients must be non-negative");
    }
    if (suffix_steps < 1 || suffix_steps > horizon) {
      fail("BadStep", "suffix_steps must lie in [1, T]");
    }
  }
};

/// Everything a rollout needs besides the parameters.
struct RlEnv {
  const NoiseSchedule* schedule = nullptr;
  const TransitionModel* transitions = nullptr;
  const MaskPrior* mask_prior = nullptr;
  const MotifVocab* vocab = nullptr;
  const TaskRegistry* registry = nullptr;
};

struct StepRecord {
  int t = 0;               // reverse step: z_t -> z_{t-1}
  double old_logprob = 0;  // under the collecting policy
  double value = 0;        // critic estimate at z_t
  FactorRows ref_posterior;  // frozen-reference posterior at the same state
};

struct Trajectory {
  Condition condition;
  std::vector<std::uint8_t> mask;
  std::vector<PaddedState> states;  // states[t] = z_t, t = 0..T
  std::vector<StepRecord> steps;    // recorded suffix steps, descending t
  double reward = 0.0;
  bool valid = false;
};

// ---------------------------------------------------------------------------
// Posterior graph shared by sampling, log-probs and the PPO update.

namespace detail {

struct PosteriorNodes {
  ad::Val x, e, p;  // posterior rows per channel (shared factor order)
  ad::Val value;
};

/// Builds reverse-posterior rows for all active factors of z_t on the tape.
inline PosteriorNodes posterior_graph(ad::Tape& tp, const ParamNodes& nodes,
                                      const PaddedState& z_t, int t,
                                      const std::optional<CondInput>& cond,
                                      const RlEnv& env) {
  env.schedule->check_step(t, 1);
  const ModelConfig& cfg = nodes.cfg;
  ForwardNodes f = forward_graph(tp, nodes, z_t, t, cond);
  FactorValues vals = factor_values(z_t);
  double ab_prev = env.schedule->alpha_bar[t - 1];

  auto channel = [&](ad::Val logits, const std::vector<std::pair<int, int>>& at, int width,
                     const std::vector<int>& zt_vals, const Vec& marginal) {
    ad::Val rows = tp.gather_blocks(logits, at, width);
    ad::Val x0 = tp.softmax_rows(rows);
    ad::Val w = tp.add_rows(tp.scale(x0, ab_prev),
                            tp.constant(((1.0 - ab_prev) * marginal).transpose()));
    ad::Val u = tp.constant(posterior_mix_matrix(zt_vals, t, *env.schedule, marginal));
    return tp.normalize_rows(tp.mul(w, u));
  };

  std::vector<std::pair<int, int>> x_at;
  for (int i : z_t.active_slots()) x_at.push_back({i, 0});
  std::vector<std::pair<int, int>> e_at;
  for (auto [i, j] : active_pairs(z_t)) e_at.push_back({i, j * cfg.d_e});
  std::vector<std::pair<int, int>> p_at;
  for (auto [i, j] : active_ordered_pairs(z_t)) p_at.push_back({i, j * cfg.d_p});

  PosteriorNodes out;
  out.x = channel(f.x_logits, x_at, cfg.d_x, vals.x, env.transitions->m_x);
  out.e = channel(f.e_logits, e_at, cfg.d_e, vals.e, env.transitions->m_e);
  out.p = channel(f.p_logits, p_at, cfg.d_p, vals.p, env.transitions->m_p);
  out.value = f.value;
  return out;
}

/// Joint log-probability of the realized z_{t-1} under the posterior rows:
/// the sum of per-factor categorical log-probabilities.
inline ad::Val logprob_from_posteriors(ad::Tape& tp, const PosteriorNodes& post,
                                       const FactorValues& realized) {
  auto picks = [](const std::vector<int>& vals) {
    std::vector<std::pair<int, int>> idx;
    for (std::size_t r = 0; r < vals.size(); ++r) idx.push_back({static_cast<int>(r), vals[r]});
    return idx;
  };
  ad::Val total = tp.sum(tp.log(tp.gather_entries(post.x, picks(realized.x))));
  if (!realized.e.empty()) {
    total = tp.add(total, tp.sum(tp.log(tp.gather_entries(post.e, picks(realized.e)))));
  }
  if (!realized.p.empty()) {
    total = tp.add(total, tp.sum(tp.log(tp.gather_entries(post.p, picks(realized.p)))));
  }
  return total;
}

inline FactorRows posterior_values(const ad::Tape& tp, const PosteriorNodes& post) {
  return {tp.val(post.x), tp.val(post.e), tp.val(post.p)};
}

/// Draw z_{t-1} by sampling every active factor from its posterior row.
inline PaddedState sample_step(const FactorRows& rows, const PaddedState& z_t, Rng& rng) {
  PaddedState z_prev = z_t;
  auto draw_row = [&](const Mat& m, int r) {
    std::vector<double> w(m.cols());
    for (int k = 0; k < m.cols(); ++k) w[k] = m(r, k);
    return rng.categorical(w);
  };
  auto slots = z_t.active_slots();
  for (std::size_t k = 0; k < slots.size(); ++k) {
    z_prev.x[slots[k]] = draw_row(rows.x, static_cast<int>(k));
  }
  auto pairs = active_pairs(z_t);
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    int v = draw_row(rows.e, static_cast<int>(k));
    z_prev.E(pairs[k].first, pairs[k].second) = v;
    z_prev.E(pairs[k].second, pairs[k].first) = v;
  }
  auto ordered = active_ordered_pairs(z_t);
  for (std::size_t k = 0; k < ordered.size(); ++k) {
    z_prev.P(ordered[k].first, ordered[k].second) = draw_row(rows.p, static_cast<int>(k));
  }
  return z_prev;
}

/// Entropy summed over all factors.
inline ad::Val entropy_from_posteriors(ad::Tape& tp, const PosteriorNodes& post) {
  auto h = [&](ad::Val rows) { return tp.scale(tp.sum(tp.mul(rows, tp.log(rows))), -1.0); };
  return tp.add(tp.add(h(post.x), h(post.e)), h(post.p));
}

/// KL(current || reference) summed over all factors; the reference rows are
/// constants.
inline ad::Val kl_from_posteriors(ad::Tape& tp, const PosteriorNodes& post,
                                  const FactorRows& ref) {
  auto channel = [&](ad::Val rows, const Mat& ref_rows) {
    ad::Val log_ref = tp.constant(ref_rows.array().log().matrix());
    return tp.sum(tp.mul(rows, tp.sub(tp.log(rows), log_ref)));
  };
  return tp.add(tp.add(channel(post.x, ref.x), channel(post.e, ref.e)),
                channel(post.p, ref.p));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Terminal reward

struct RewardOutcome {
  double reward = 0.0;
  bool valid = false;
  std::optional<MolGraph> molecule;  // present whenever decoding succeeded
};

/// Decode z_0 and score it: w_val * r_val + (1 - w_val) * r_prop. Decode
/// failures are invalid molecules, never exceptions.
inline RewardOutcome terminal_reward(const PaddedState& z0, const Condition& cond,
                                     const TaskSpec& task, const MotifVocab& vocab,
                                     double w_val) {
  RewardOutcome out;
  MolGraph g;
  bool decoded = false;
  try {
    g = detokenize(unpad(z0), vocab);
    decoded = true;
  } catch (const Error&) {
    decoded = false;
  }
  if (decoded) {
    out.molecule = g;
    out.valid = check_validity(g).is_valid;
  }
  double r_val = out.valid ? 1.0 : -1.0;
  double r_prop = 0.0;
  if (out.valid) {
    r_prop = shape(discrepancy(evaluate(g, task), cond.target, task), task);
  }
  out.reward = w_val * r_val + (1.0 - w_val) * r_prop;
  return out;
}

// ---------------------------------------------------------------------------
// Log-probability of one reverse step (plain wrapper over the shared graph)

inline double step_logprob(const ModelParams& params, const PaddedState& z_t,
                           const PaddedState& z_tm1, int t,
                           const std::optional<CondInput>& cond, const RlEnv& env) {
  if (z_t.m != z_tm1.m) fail("MaskMismatch", "states do not share a mask");
  ad::Tape tape;
  ParamNodes nodes = lift_params(tape, params);
  auto post = detail::posterior_graph(tape, nodes, z_t, t, cond, env);
  auto lp = detail::logprob_from_posteriors(tape, post, factor_values(z_tm1));
  return tape.val(lp)(0, 0);
}

// ---------------------------------------------------------------------------
// Rollout collection

/// Samples one reverse trajectory from the current policy. The final
/// suffix_steps steps are recorded with their collection-time log-probs,
/// value estimates and frozen-reference posteriors; earlier steps are
/// sampled but carry no losses.
inline Trajectory collect_rollout(const ModelParams& params, const ModelParams& ref_params,
                                  const Condition& cond, const PPOConfig& cfg,
                                  const RlEnv& env, Rng& rng) {
  int horizon = env.schedule->steps;
  cfg.check(horizon);
  const TaskSpec& task = env.registry->get(cond.task);
  CondInput cin = make_cond_input(params, cond, *env.registry);

  Trajectory traj;
  traj.condition = cond;
  traj.mask = sample_mask(*env.mask_prior, rng);
  traj.states.resize(horizon + 1);
  traj.states[horizon] = prior_sample(traj.mask, *env.transitions, rng);

  for (int t = horizon; t >= 1; --t) {
    const PaddedState& z_t = traj.states[t];
    ad::Tape tape;
    ParamNodes nodes = lift_params(tape, params);
    auto post = detail::posterior_graph(tape, nodes, z_t, t, cin, env);
    FactorRows rows = detail::posterior_values(tape, post);
    PaddedState z_prev = detail::sample_step(rows, z_t, rng);
    traj.states[t - 1] = z_prev;

    if (t <= cfg.suffix_steps) {
      StepRecord rec;
      rec.t = t;
      auto lp = detail::logprob_from_posteriors(tape, post, factor_values(z_prev));
      rec.old_logprob = tape.val(lp)(0, 0);
      rec.value = tape.val(post.value)(0, 0);
      // Reference posterior at the same state, recorded for the KL penalty.
      ad::Tape ref_tape;
      ParamNodes ref_nodes = lift_params(ref_tape, ref_params);
      auto ref_post = detail::posterior_graph(ref_tape, ref_nodes, z_t, t, cin, env);
      rec.ref_posterior = detail::posterior_values(ref_tape, ref_post);
      traj.steps.push_back(std::move(rec));
    }
  }

  RewardOutcome outcome = terminal_reward(traj.states[0], cond, task, *env.vocab, cfg.w_val);
  traj.reward = outcome.reward;
  traj.valid = outcome.valid;
  return traj;
}

/// Full reverse chain without PPO bookkeeping (sampling/deployment path).
inline PaddedState sample_state(const ModelParams& params,
                                const std::optional<CondInput>& cond, const RlEnv& env,
                                Rng& rng) {
  auto mask = sample_mask(*env.mask_prior, rng);
  PaddedState z = prior_sample(mask, *env.transitions, rng);
  for (int t = env.schedule->steps; t >= 1; --t) {
    ad::Tape tape;
    ParamNodes nodes = lift_params(tape, params);
    auto post = detail::posterior_graph(tape, nodes, z, t, cond, env);
    z = detail::sample_step(detail::posterior_values(tape, post), z, rng);
  }
  return z;
}

// ---------------------------------------------------------------------------
// PPO update

struct PPODiagnostics {
  double mean_reward = 0.0;
  double validity_rate = 0.0;
  double mean_kl = 0.0;           // final pass, per step
  double max_ratio_dev = 0.0;     // max |rho - 1| on the first pass
  double actor_loss = 0.0;        // final pass
  double value_loss = 0.0;
  double entropy = 0.0;
  double total_loss = 0.0;
};

/// PPO loss pieces for one batch on one tape. Advantages are constants;
/// ratios use the stored collection-time log-probs.
namespace detail {

struct PPOLossNodes {
  ad::Val total, actor, value, entropy, kl;
  double max_ratio_dev = 0.0;  // max |rho - 1| across steps
};

inline PPOLossNodes build_ppo_loss(ad::Tape& tape, const ParamNodes& nodes,
                                   const std::vector<Trajectory>& batch,
                                   const std::vector<double>& advantages,
                                   const PPOConfig& cfg, const RlEnv& env,
                                   const TaskRegistry& registry, const ModelParams& params) {
  ad::Val actor_sum = tape.constant(Mat::Zero(1, 1));
  ad::Val value_sum = tape.constant(Mat::Zero(1, 1));
  ad::Val entropy_sum = tape.constant(Mat::Zero(1, 1));
  ad::Val kl_sum = tape.constant(Mat::Zero(1, 1));
  std::size_t adv_idx = 0;
  int total_steps = 0;
  for (const auto& traj : batch) total_steps += static_cast<int>(traj.steps.size());
  if (total_steps == 0) fail("EmptyBatch", "no trainable steps in batch");
  PPOLossNodes out;
  for (const auto& traj : batch) {
    CondInput cin = make_cond_input(params, traj.condition, registry);
    for (const auto& step : traj.steps) {
      double a = advantages[adv_idx++];
      auto post = posterior_graph(tape, nodes, traj.states[step.t], step.t, cin, env);
      auto new_lp = logprob_from_posteriors(tape, post, factor_values(traj.states[step.t - 1]));
      ad::Val ratio =
          tape.exp(tape.sub(new_lp, tape.constant(Mat::Constant(1, 1, step.old_logprob))));
      out.max_ratio_dev = std::max(out.max_ratio_dev, std::abs(tape.val(ratio)(0, 0) - 1.0));
      ad::Val surrogate = tape.minimum(
          tape.scale(ratio, a),
          tape.scale(tape.clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps), a));
      actor_sum = tape.add(actor_sum, tape.scale(surrogate, -1.0));
      ad::Val verr = tape.sub(post.value, tape.constant(Mat::Constant(1, 1, traj.reward)));
      value_sum = tape.add(value_sum, tape.mul(verr, verr));
      entropy_sum = tape.add(entropy_sum, entropy_from_posteriors(tape, post));
      kl_sum = tape.add(kl_sum, kl_from_posteriors(tape, post, step.ref_posterior));
    }
  }
  double inv = 1.0 / total_steps;
  out.actor = tape.scale(actor_sum, inv);
  out.value = tape.scale(value_sum, inv);
  out.entropy = tape.scale(entropy_sum, inv);
  out.kl = tape.scale(kl_sum, inv);
  out.total = tape.add(tape.add(out.actor, tape.scale(out.value, cfg.c_value)),
                       tape.add(tape.scale(out.entropy, -cfg.c_entropy),
                                tape.scale(out.kl, cfg.c_kl)));
  return out;
}

}  // namespace detail

/// Batch advantages (reward minus stored value), normalized to zero mean and
/// unit variance within the batch.
inline std::vector<double> normalized_advantages(const std::vector<Trajectory>& batch) {
  std::vector<double> advantages;
  for (const auto& traj : batch) {
    for (const auto& step : traj.steps) advantages.push_back(traj.reward - step.value);
  }
  if (advantages.empty()) fail("EmptyBatch", "no trainable steps in batch");
  double mean = 0.0;
  for (double a : advantages) mean += a;
  mean /= advantages.size();
  double var = 0.0;
  for (double a : advantages) var += (a - mean) * (a - mean);
  var /= advantages.size();
  double denom = var > 1e-24 ? std::sqrt(var) : 1.0;
  for (double& a : advantages) a = (a - mean) / denom;
  return advantages;
}

/// Runs cfg.update_passes clipped-PPO gradient steps on the collected batch.
/// Ratios always use the stored collection-time log-probs.
inline PPODiagnostics ppo_update(ModelParams& params, const ModelParams& ref_params,
                                 const std::vector<Trajectory>& batch, const PPOConfig& cfg,
                                 const RlEnv& env, Adam& optimizer) {
  (void)ref_params;  // the reference enters through the recorded posteriors
  if (batch.empty()) fail("EmptyBatch", "ppo_update needs trajectories");
  std::vector<double> advantages = normalized_advantages(batch);

  PPODiagnostics diag;
  for (const auto& traj : batch) {
    diag.mean_reward += traj.reward;
    diag.validity_rate += traj.valid ? 1.0 : 0.0;
  }
  diag.mean_reward /= batch.size();
  diag.validity_rate /= batch.size();

  for (int pass = 0; pass < cfg.update_passes; ++pass) {
    ad::Tape tape;
    ParamNodes nodes = lift_params(tape, params);
    auto loss = detail::build_ppo_loss(tape, nodes, batch, advantages, cfg, env,
                                       *env.registry, params);
    double loss_val = tape.val(loss.total)(0, 0);
    if (!std::isfinite(loss_val)) fail("NonFiniteLoss", "PPO loss is not finite");
    if (pass == 0) diag.max_ratio_dev = loss.max_ratio_dev;
    diag.actor_loss = tape.val(loss.actor)(0, 0);
    diag.value_loss = tape.val(loss.value)(0, 0);
    diag.entropy = tape.val(loss.entropy)(0, 0);
    diag.mean_kl = tape.val(loss.kl)(0, 0);
    diag.total_loss = loss_val;

    tape.backward(loss.total);
    ParamGrads grads = collect_grads(tape, nodes);
    optimizer.step(params, grads);
  }
  return diag;
}

/// Full PPO loss for a fixed batch and fixed advantages, without updating.
inline double ppo_loss_value(const ModelParams& params, const std::vector<Trajectory>& batch,
                             const std::vector<double>& advantages, const PPOConfig& cfg,
                             const RlEnv& env) {
  ad::Tape tape;
  ParamNodes nodes = lift_params(tape, params);
  auto loss =
      detail::build_ppo_loss(tape, nodes, batch, advantages, cfg, env, *env.registry, params);
  return tape.val(loss.total)(0, 0);
}

/// Exact gradients of the full PPO loss for a fixed batch and advantages.
inline std::pair<double, ParamGrads> ppo_gradients(const ModelParams& params,
                                                   const std::vector<Trajectory>& batch,
                                                   const std::vector<double>& advantages,
                                                   const PPOConfig& cfg, const RlEnv& env) {
  ad::Tape tape;
  ParamNodes nodes = lift_params(tape, params);
  auto loss =
      detail::build_ppo_loss(tape, nodes, batch, advantages, cfg, env, *env.registry, params);
  double loss_val = tape.val(loss.total)(0, 0);
  if (!std::isfinite(loss_val)) fail("NonFiniteLoss", "PPO loss is not finite");
  tape.backward(loss.total);
  return {loss_val, collect_grads(tape, nodes)};
}

}  // namespace motifdiff
