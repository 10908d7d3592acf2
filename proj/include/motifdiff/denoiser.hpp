// SPDX-License-Identifier: Apache-2.0
//
// The endpoint predictor f(z_t, t, c) -> (X0, E0, P0) logits plus a value
// head: graph-level motif tokens, a stack of attention blocks with adaptive
// modulation, residual row-wise output heads, exact gradients through the
// autodiff tape, task-embedding composition and binary checkpointing.
#pragma once

#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "motifdiff/autodiff.hpp"
#include "motifdiff/diffusion.hpp"
#include "motifdiff/oracle.hpp"

namespace motifdiff {

struct ModelConfig {
  int n_max = 8;
  int d_x = 2;
  int d_e = kBondCategories;
  int d_p = 2;
  int depth = 2;
  int hidden = 64;
  int heads = 4;
  int mlp_ratio = 4;
  int embed_x = 32;
  int embed_e = 16;
  int embed_p = 16;
  int time_features = 16;

  int token_dim() const { return embed_x + embed_e + embed_p; }
  int head_dim() const { return hidden / heads; }
  // hidden splits feeding the X / E / P heads
  int split_e() const { return hidden / 3; }
  int split_p() const { return hidden / 3; }
  int split_x() const { return hidden - split_e() - split_p(); }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct BlockParams {
  Mat w_mod, b_mod;            // adaptive modulation from the condition vector
  Mat w_q, w_k, w_v, w_o, b_o; // self-attention
  Mat w_f1, b_f1, w_f2, b_f2;  // feed-forward
};

struct ModelParams {
  ModelConfig cfg;
  Mat emb_x;        // d_x x embed_x motif-type table
  Mat w_ge;         // (n_max * d_e) x embed_e bond-row projection
  Mat w_gp;         // (n_max * d_p) x embed_p attachment-row projection
  Mat w_in, b_in;   // token -> hidden
  Mat w_t1, b_t1, w_t2, b_t2;  // timestep embedding
  Mat w_y1, b_y1, w_y2, b_y2;  // target encoder
  Mat task_table;              // one row per registered task
  std::vector<std::string> task_ids;
  std::vector<BlockParams> blocks;
  Mat w_x;  // split_x x d_x
  Mat w_e;  // split_e x (n_max * d_e)
  Mat w_p;  // split_p x (n_max * d_p)
  Mat w_v1, b_v1, w_v2, b_v2;  // value head over pooled state ++ condition

  int task_index(const std::string& id) const {
    for (std::size_t k = 0; k < task_ids.size(); ++k) {
      if (task_ids[k] == id) return static_cast<int>(k);
    }
    fail("UnknownTask", "task has no embedding row: " + id);
  }
};

/// Visits every tensor in a fixed order (serialization, gradients and the
/// optimizer all share this ordering).
template <typename Params, typename Fn>
void visit_params(Params& p, Fn&& fn) {
  fn("emb_x", p.emb_x);
  fn("w_ge", p.w_ge);
  fn("w_gp", p.w_gp);
  fn("w_in", p.w_in);
  fn("b_in", p.b_in);
  fn("w_t1", p.w_t1);
  fn("b_t1", p.b_t1);
  fn("w_t2", p.w_t2);
  fn("b_t2", p.b_t2);
  fn("w_y1", p.w_y1);
  fn("b_y1", p.b_y1);
  fn("w_y2", p.w_y2);
  fn("b_y2", p.b_y2);
  fn("task_table", p.task_table);
  for (std::size_t d = 0; d < p.blocks.size(); ++d) {
    auto& b = p.blocks[d];
    std::string prefix = "block" + std::to_string(d) + ".";
    fn(prefix + "w_mod", b.w_mod);
    fn(prefix + "b_mod", b.b_mod);
    fn(prefix + "w_q", b.w_q);
    fn(prefix + "w_k", b.w_k);
    fn(prefix + "w_v", b.w_v);
    fn(prefix + "w_o", b.w_o);
    fn(prefix + "b_o", b.b_o);
    fn(prefix + "w_f1", b.w_f1);
    fn(prefix + "b_f1", b.b_f1);
    fn(prefix + "w_f2", b.w_f2);
    fn(prefix + "b_f2", b.b_f2);
  }
  fn("w_x", p.w_x);
  fn("w_e", p.w_e);
  fn("w_p", p.w_p);
  fn("w_v1", p.w_v1);
  fn("b_v1", p.b_v1);
  fn("w_v2", p.w_v2);
  fn("b_v2", p.b_v2);
}

namespace detail {

inline Mat he_init(int rows, int cols, Rng& rng) {
  Mat m(rows, cols);
  double s = 1.0 / std::sqrt(static_cast<double>(rows));
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) m(i, j) = s * rng.normal();
  }
  return m;
}

}  // namespace detail

/// Training initialization: scaled-normal weights, zero biases, zero
/// modulation (each block starts as an identity residual).
inline ModelParams init_params(const ModelConfig& cfg, const std::vector<std::string>& tasks,
                               Rng& rng) {
  if (cfg.hidden % cfg.heads != 0) fail("MalformedRecord", "hidden not divisible by heads");
  ModelParams p;
  p.cfg = cfg;
  int h = cfg.hidden;
  p.emb_x = detail::he_init(cfg.d_x, cfg.embed_x, rng);
  p.w_ge = detail::he_init(cfg.n_max * cfg.d_e, cfg.embed_e, rng);
  p.w_gp = detail::he_init(cfg.n_max * cfg.d_p, cfg.embed_p, rng);
  p.w_in = detail::he_init(cfg.token_dim(), h, rng);
  p.b_in = Mat::Zero(1, h);
  p.w_t1 = detail::he_init(cfg.time_features, h, rng);
  p.b_t1 = Mat::Zero(1, h);
  p.w_t2 = detail::he_init(h, h, rng);
  p.b_t2 = Mat::Zero(1, h);
  p.w_y1 = detail::he_init(1, h, rng);
  p.b_y1 = Mat::Zero(1, h);
  p.w_y2 = detail::he_init(h, h, rng);
  p.b_y2 = Mat::Zero(1, h);
  p.task_ids = tasks;
  p.task_table = 0.1 * detail::he_init(std::max(1, static_cast<int>(tasks.size())), h, rng);
  if (tasks.empty()) p.task_table = Mat(0, h);
  p.blocks.resize(cfg.depth);
  for (auto& b : p.blocks) {
    b.w_mod = Mat::Zero(h, 6 * h);
    b.b_mod = Mat::Zero(1, 6 * h);
    b.w_q = detail::he_init(h, h, rng);
    b.w_k = detail::he_init(h, h, rng);
    b.w_v = detail::he_init(h, h, rng);
    b.w_o = detail::he_init(h, h, rng);
    b.b_o = Mat::Zero(1, h);
    b.w_f1 = detail::he_init(h, cfg.mlp_ratio * h, rng);
    b.b_f1 = Mat::Zero(1, cfg.mlp_ratio * h);
    b.w_f2 = detail::he_init(cfg.mlp_ratio * h, h, rng);
    b.b_f2 = Mat::Zero(1, h);
  }
  p.w_x = detail::he_init(cfg.split_x(), cfg.d_x, rng);
  p.w_e = detail::he_init(cfg.split_e(), cfg.n_max * cfg.d_e, rng);
  p.w_p = detail::he_init(cfg.split_p(), cfg.n_max * cfg.d_p, rng);
  p.w_v1 = detail::he_init(2 * h, h, rng);
  p.b_v1 = Mat::Zero(1, h);
  p.w_v2 = detail::he_init(h, 1, rng);
  p.b_v2 = Mat::Zero(1, 1);
  return p;
}

/// Every tensor random (including modulation and biases); used by gradient
/// checks so no path is dead.
inline ModelParams init_params_dense_random(const ModelConfig& cfg,
                                            const std::vector<std::string>& tasks, Rng& rng,
                                            double scale = 0.3) {
  ModelParams p = init_params(cfg, tasks, rng);
  visit_params(p, [&](const std::string&, Mat& m) {
    for (int i = 0; i < m.rows(); ++i) {
      for (int j = 0; j < m.cols(); ++j) m(i, j) = scale * rng.normal();
    }
  });
  return p;
}

inline void zero_params(ModelParams& p) {
  visit_params(p, [](const std::string&, Mat& m) { m.setZero(); });
}

// ---------------------------------------------------------------------------
// Forward graph

/// Condition resolved against the model: task-table row plus normalized
/// target value.
struct CondInput {
  int task_index = 0;
  double y_norm = 0.0;
};

/// Normalizes a condition: z-score for regression, {0,1} -> {-1,+1} for
/// classification.
inline CondInput make_cond_input(const ModelParams& params, const Condition& c,
                                 const TaskRegistry& registry) {
  const TaskSpec& task = registry.get(c.task);
  CondInput in;
  in.task_index = params.task_index(c.task);
  if (task.kind == TaskKind::kRegression) {
    in.y_norm = (c.target - task.mean) / task.std;
  } else {
    in.y_norm = c.target > 0.5 ? 1.0 : -1.0;
  }
  return in;
}

struct ParamNodes {
  ModelConfig cfg;
  ad::Val emb_x, w_ge, w_gp, w_in, b_in;
  ad::Val w_t1, b_t1, w_t2, b_t2;
  ad::Val w_y1, b_y1, w_y2, b_y2;
  ad::Val task_table;
  struct BlockNodes {
    ad::Val w_mod, b_mod, w_q, w_k, w_v, w_o, b_o, w_f1, b_f1, w_f2, b_f2;
  };
  std::vector<BlockNodes> blocks;
  ad::Val w_x, w_e, w_p;
  ad::Val w_v1, b_v1, w_v2, b_v2;
};

template <typename Fn>
void visit_params(ParamNodes& p, Fn&& fn) {
  fn("emb_x", p.emb_x);
  fn("w_ge", p.w_ge);
  fn("w_gp", p.w_gp);
  fn("w_in", p.w_in);
  fn("b_in", p.b_in);
  fn("w_t1", p.w_t1);
  fn("b_t1", p.b_t1);
  fn("w_t2", p.w_t2);
  fn("b_t2", p.b_t2);
  fn("w_y1", p.w_y1);
  fn("b_y1", p.b_y1);
  fn("w_y2", p.w_y2);
  fn("b_y2", p.b_y2);
  fn("task_table", p.task_table);
  for (std::size_t d = 0; d < p.blocks.size(); ++d) {
    auto& b = p.blocks[d];
    std::string prefix = "block" + std::to_string(d) + ".";
    fn(prefix + "w_mod", b.w_mod);
    fn(prefix + "b_mod", b.b_mod);
    fn(prefix + "w_q", b.w_q);
    fn(prefix + "w_k", b.w_k);
    fn(prefix + "w_v", b.w_v);
    fn(prefix + "w_o", b.w_o);
    fn(prefix + "b_o", b.b_o);
    fn(prefix + "w_f1", b.w_f1);
    fn(prefix + "b_f1", b.b_f1);
    fn(prefix + "w_f2", b.w_f2);
    fn(prefix + "b_f2", b.b_f2);
  }
  fn("w_x", p.w_x);
  fn("w_e", p.w_e);
  fn("w_p", p.w_p);
  fn("w_v1", p.w_v1);
  fn("b_v1", p.b_v1);
  fn("w_v2", p.w_v2);
  fn("b_v2", p.b_v2);
}

/// Lifts all parameter tensors onto a tape as leaves.
inline ParamNodes lift_params(ad::Tape& tape, const ModelParams& params) {
  ParamNodes nodes;
  nodes.cfg = params.cfg;
  nodes.blocks.resize(params.blocks.size());
  std::vector<const Mat*> tensors;
  visit_params(const_cast<ModelParams&>(params),
               [&](const std::string&, Mat& m) { tensors.push_back(&m); });
  std::size_t k = 0;
  visit_params(nodes, [&](const std::string&, ad::Val& v) { v = tape.param(*tensors[k++]); });
  return nodes;
}

/// Gradients aligned with the visit_params order.
struct ParamGrads {
  std::vector<std::string> names;
  std::vector<Mat> grads;
};

inline ParamGrads collect_grads(const ad::Tape& tape, ParamNodes& nodes) {
  ParamGrads out;
  visit_params(nodes, [&](const std::string& name, ad::Val& v) {
    out.names.push_back(name);
    out.grads.push_back(tape.grad(v));
  });
  return out;
}

namespace detail {

/// One-hot token/residual constants for a state. Rows and blocks touching
/// inactive slots are zeroed.
struct StateConstants {
  Mat ox;  // n_max x d_x
  Mat oe;  // n_max x (n_max * d_e)
  Mat op;  // n_max x (n_max * d_p)
  Mat attn_mask;  // n_max x n_max additive (-1e30 on inactive key columns)
  std::vector<int> active;
};

inline StateConstants state_constants(const PaddedState& z, const ModelConfig& cfg) {
  StateConstants sc;
  int n = cfg.n_max;
  sc.ox = Mat::Zero(n, cfg.d_x);
  sc.oe = Mat::Zero(n, n * cfg.d_e);
  sc.op = Mat::Zero(n, n * cfg.d_p);
  sc.attn_mask = Mat::Zero(n, n);
  sc.active = z.active_slots();
  for (int i = 0; i < n; ++i) {
    if (!z.m[i]) {
      sc.attn_mask.col(i).setConstant(-1e30);
      continue;
    }
    sc.ox(i, z.x[i]) = 1.0;
    for (int j = 0; j < n; ++j) {
      if (!z.m[j] || j == i) continue;
      sc.oe(i, j * cfg.d_e + z.E(i, j)) = 1.0;
      sc.op(i, j * cfg.d_p + z.P(i, j)) = 1.0;
    }
  }
  return sc;
}

inline Mat timestep_features(int t, int count) {
  Mat f(1, count);
  int half = count / 2;
  for (int k = 0; k < half; ++k) {
    double freq = std::exp(-std::log(10000.0) * k / std::max(1, half - 1));
    f(0, k) = std::sin(t * freq);
    f(0, half + k) = std::cos(t * freq);
  }
  return f;
}

}  // namespace detail

/// Per-slot token vectors (motif embedding ++ projected relation rows);
/// inactive slots produce a zero token.
inline Mat build_tokens(const ModelParams& params, const PaddedState& z) {
  auto sc = detail::state_constants(z, params.cfg);
  Mat tokens(params.cfg.n_max, params.cfg.token_dim());
  tokens << sc.ox * params.emb_x, sc.oe * params.w_ge, sc.op * params.w_gp;
  return tokens;
}

/// Forward-pass graph output: logits nodes plus the scalar value node.
struct ForwardNodes {
  ad::Val x_logits;  // n_max x d_x
  ad::Val e_logits;  // n_max x (n_max * d_e), symmetric across (i, j) blocks
  ad::Val p_logits;  // n_max x (n_max * d_p), directional
  ad::Val value;     // 1 x 1
};

/// Builds the full forward computation on the tape. With no condition the
/// condition vector reduces to the timestep embedding (unconditional mode).
inline ForwardNodes forward_graph(ad::Tape& t, const ParamNodes& p, const PaddedState& z,
                                  int step, const std::optional<CondInput>& cond) {
  const ModelConfig& cfg = p.cfg;
  auto sc = detail::state_constants(z, cfg);
  ad::Val ox = t.constant(sc.ox);
  ad::Val oe = t.constant(sc.oe);
  ad::Val op = t.constant(sc.op);
  ad::Val mask = t.constant(sc.attn_mask);

  // Graph-level tokens: motif embedding ++ projected bond row ++ projected
  // attachment row; inactive slots stay zero.
  ad::Val tokens = t.hcat(t.hcat(t.matmul(ox, p.emb_x), t.matmul(oe, p.w_ge)),
                          t.matmul(op, p.w_gp));
  ad::Val h = t.add_rows(t.matmul(tokens, p.w_in), p.b_in);

  // Condition vector: timestep embedding plus (task embedding + encoded target).
  ad::Val tfeat = t.constant(detail::timestep_features(step, cfg.time_features));
  ad::Val temb = t.add_rows(
      t.matmul(t.silu(t.add_rows(t.matmul(tfeat, p.w_t1), p.b_t1)), p.w_t2), p.b_t2);
  ad::Val cvec = temb;
  if (cond) {
    ad::Val task_row = t.block(p.task_table, cond->task_index, 0, 1, cfg.hidden);
    ad::Val y = t.constant(Mat::Constant(1, 1, cond->y_norm));
    ad::Val yenc = t.add_rows(
        t.matmul(t.silu(t.add_rows(t.matmul(y, p.w_y1), p.b_y1)), p.w_y2), p.b_y2);
    cvec = t.add(cvec, t.add(task_row, yenc));
  }

  ad::Val ones_row = t.constant(Mat::Ones(1, cfg.hidden));
  int hd = cfg.head_dim();
  for (const auto& blk : p.blocks) {
    ad::Val mod = t.add_rows(t.matmul(cvec, blk.w_mod), blk.b_mod);
    auto piece = [&](int k) { return t.block(mod, 0, k * cfg.hidden, 1, cfg.hidden); };
    ad::Val gamma1 = piece(0), beta1 = piece(1), gate1 = piece(2);
    ad::Val gamma2 = piece(3), beta2 = piece(4), gate2 = piece(5);

    ad::Val a1 = t.add_rows(t.mul_rows(t.layernorm_rows(h), t.add(gamma1, ones_row)), beta1);
    ad::Val q = t.matmul(a1, blk.w_q);
    ad::Val k = t.matmul(a1, blk.w_k);
    ad::Val v = t.matmul(a1, blk.w_v);
    ad::Val heads_out;
    for (int head = 0; head < cfg.heads; ++head) {
      ad::Val qh = t.block(q, 0, head * hd, cfg.n_max, hd);
      ad::Val kh = t.block(k, 0, head * hd, cfg.n_max, hd);
      ad::Val vh = t.block(v, 0, head * hd, cfg.n_max, hd);
      ad::Val scores =
          t.add(t.scale(t.matmul(qh, t.transpose(kh)), 1.0 / std::sqrt(double(hd))), mask);
      ad::Val att = t.softmax_rows(scores);
      ad::Val out = t.matmul(att, vh);
      heads_out = head == 0 ? out : t.hcat(heads_out, out);
    }
    ad::Val attn = t.add_rows(t.matmul(heads_out, blk.w_o), blk.b_o);
    h = t.add(h, t.mul_rows(attn, gate1));

    ad::Val a2 = t.add_rows(t.mul_rows(t.layernorm_rows(h), t.add(gamma2, ones_row)), beta2);
    ad::Val f = t.add_rows(
        t.matmul(t.silu(t.add_rows(t.matmul(a2, blk.w_f1), blk.b_f1)), blk.w_f2), blk.b_f2);
    h = t.add(h, t.mul_rows(f, gate2));
  }

  // Residual row-wise heads on the hidden split.
  ad::Val hx = t.block(h, 0, 0, cfg.n_max, cfg.split_x());
  ad::Val he = t.block(h, 0, cfg.split_x(), cfg.n_max, cfg.split_e());
  ad::Val hp = t.block(h, 0, cfg.split_x() + cfg.split_e(), cfg.n_max, cfg.split_p());
  ForwardNodes out;
  out.x_logits = t.add(t.matmul(hx, p.w_x), ox);
  out.e_logits = t.sym_pair_avg(t.add(t.matmul(he, p.w_e), oe), cfg.n_max, cfg.d_e);
  out.p_logits = t.add(t.matmul(hp, p.w_p), op);

  ad::Val pooled = t.mean_rows_subset(h, sc.active);
  ad::Val vin = t.hcat(pooled, cvec);
  out.value = t.add_rows(
      t.matmul(t.silu(t.add_rows(t.matmul(vin, p.w_v1), p.b_v1)), p.w_v2), p.b_v2);
  return out;
}

/// Plain forward pass: runs the tape and extracts values.
struct ForwardOutput {
  Mat x_logits, e_logits, p_logits;
  double value = 0.0;
};

inline ForwardOutput forward(const ModelParams& params, const PaddedState& z, int step,
                             const std::optional<CondInput>& cond) {
  ad::Tape tape;
  ParamNodes nodes = lift_params(tape, params);
  ForwardNodes f = forward_graph(tape, nodes, z, step, cond);
  ForwardOutput out;
  out.x_logits = tape.val(f.x_logits);
  out.e_logits = tape.val(f.e_logits);
  out.p_logits = tape.val(f.p_logits);
  out.value = tape.val(f.value)(0, 0);
  return out;
}

/// Softmaxed endpoint predictions per factor (shared factor order).
inline FactorRows endpoint_rows(const ModelConfig& cfg, const Mat& x_logits,
                                const Mat& e_logits, const Mat& p_logits,
                                const PaddedState& z) {
  FactorRows rows;
  auto slots = z.active_slots();
  Mat xr(slots.size(), cfg.d_x);
  for (std::size_t k = 0; k < slots.size(); ++k) xr.row(k) = x_logits.row(slots[k]);
  auto pairs = active_pairs(z);
  Mat er(pairs.size(), cfg.d_e);
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    er.row(k) = e_logits.block(pairs[k].first, pairs[k].second * cfg.d_e, 1, cfg.d_e);
  }
  auto ordered = active_ordered_pairs(z);
  Mat pr(ordered.size(), cfg.d_p);
  for (std::size_t k = 0; k < ordered.size(); ++k) {
    pr.row(k) = p_logits.block(ordered[k].first, ordered[k].second * cfg.d_p, 1, cfg.d_p);
  }
  rows.x = ad::Tape::softmax_rows_value(xr);
  rows.e = ad::Tape::softmax_rows_value(er);
  rows.p = ad::Tape::softmax_rows_value(pr);
  return rows;
}

// ---------------------------------------------------------------------------
// Masked CE training objective (exact gradients)

struct TrainItem {
  PaddedState z_t;
  PaddedState z_0;
  int t = 1;
  std::optional<CondInput> cond;
};

/// Builds the masked CE loss for one item on the tape.
inline ad::Val masked_ce_graph(ad::Tape& t, const ParamNodes& p, const TrainItem& item,
                               const LossConfig& cfg) {
  ForwardNodes f = forward_graph(t, p, item.z_t, item.t, item.cond);
  const ModelConfig& mc = p.cfg;
  FactorValues truth = factor_values(item.z_0);
  auto slots = item.z_0.active_slots();

  auto channel_ce = [&](ad::Val logits, const std::vector<std::pair<int, int>>& at, int width,
                        const std::vector<int>& values) -> std::optional<ad::Val> {
    if (values.empty()) return std::nullopt;
    ad::Val rows = t.gather_blocks(logits, at, width);
    ad::Val probs = t.softmax_rows(rows);
    std::vector<std::pair<int, int>> picks;
    for (std::size_t k = 0; k < values.size(); ++k) {
      picks.push_back({static_cast<int>(k), values[k]});
    }
    ad::Val chosen = t.gather_entries(probs, picks);
    return t.scale(t.sum(t.log(chosen)), -1.0 / static_cast<double>(values.size()));
  };

  std::vector<std::pair<int, int>> x_at;
  for (int i : slots) x_at.push_back({i, 0});
  std::vector<std::pair<int, int>> e_at;
  for (auto [i, j] : active_pairs(item.z_0)) e_at.push_back({i, j * mc.d_e});
  std::vector<std::pair<int, int>> p_at;
  for (auto [i, j] : active_ordered_pairs(item.z_0)) p_at.push_back({i, j * mc.d_p});

  ad::Val loss = t.constant(Mat::Zero(1, 1));
  if (auto ce = channel_ce(f.x_logits, x_at, mc.d_x, truth.x)) {
    loss = t.add(loss, t.scale(*ce, cfg.lambda_x));
  }
  if (auto ce = channel_ce(f.e_logits, e_at, mc.d_e, truth.e)) {
    loss = t.add(loss, t.scale(*ce, cfg.lambda_e));
  }
  if (auto ce = channel_ce(f.p_logits, p_at, mc.d_p, truth.p)) {
    loss = t.add(loss, t.scale(*ce, cfg.lambda_p));
  }
  return loss;
}

/// Mean masked CE loss over a batch, without gradients.
inline double batch_ce_loss(const ModelParams& params, const std::vector<TrainItem>& batch,
                            const LossConfig& cfg) {
  if (batch.empty()) fail("EmptyBatch", "loss batch is empty");
  ad::Tape tape;
  ParamNodes nodes = lift_params(tape, params);
  double total = 0.0;
  for (const auto& item : batch) {
    total += tape.val(masked_ce_graph(tape, nodes, item, cfg))(0, 0);
  }
  return total / static_cast<double>(batch.size());
}

/// Exact gradients of the mean masked CE loss over a batch.
inline std::pair<double, ParamGrads> gradients(const ModelParams& params,
                                               const std::vector<TrainItem>& batch,
                                               const LossConfig& cfg) {
  if (batch.empty()) fail("EmptyBatch", "gradient batch is empty");
  ad::Tape tape;
  ParamNodes nodes = lift_params(tape, params);
  ad::Val total = tape.constant(Mat::Zero(1, 1));
  for (const auto& item : batch) {
    total = tape.add(total, masked_ce_graph(tape, nodes, item, cfg));
  }
  total = tape.scale(total, 1.0 / static_cast<double>(batch.size()));
  double loss = tape.val(total)(0, 0);
  if (!std::isfinite(loss)) fail("NonFiniteLoss", "masked CE loss is not finite");
  tape.backward(total);
  return {loss, collect_grads(tape, nodes)};
}

// ---------------------------------------------------------------------------
// Task-embedding composition

/// Registers a new task embedding as a convex combination of existing rows;
/// generator weights are untouched.
inline void compose_task_embedding(ModelParams& params,
                                   const std::vector<std::pair<std::string, double>>& weights,
                                   const std::string& new_id) {
  double total = 0.0;
  for (const auto& [id, c] : weights) {
    if (c < 0.0) fail("NotConvex", "negative coefficient for " + id);
    total += c;
  }
  if (std::abs(total - 1.0) > 1e-9) fail("NotConvex", "coefficients must sum to 1");
  Mat row = Mat::Zero(1, params.cfg.hidden);
  for (const auto& [id, c] : weights) {
    row += c * params.task_table.row(params.task_index(id));
  }
  Mat table(params.task_table.rows() + 1, params.cfg.hidden);
  table << params.task_table, row;
  params.task_table = std::move(table);
  params.task_ids.push_back(new_id);
}

// ---------------------------------------------------------------------------
// Checkpointing: versioned binary container of named flat 64-bit arrays plus
// the schedule, transition and mask-prior payloads and the vocab hash.

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[5] = "MDIF";

struct Checkpoint {
  ModelParams params;
  NoiseSchedule schedule;
  TransitionModel transitions;
  MaskPrior mask_prior;
  std::uint64_t vocab_hash = 0;
};

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline void write_f64(std::ostream& os, double v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), s.size());
}
inline void write_vec(std::ostream& os, const std::vector<double>& v) {
  write_u32(os, static_cast<std::uint32_t>(v.size()));
  for (double x : v) write_f64(os, x);
}
inline void write_eigen_vec(std::ostream& os, const Vec& v) {
  write_u32(os, static_cast<std::uint32_t>(v.size()));
  for (int i = 0; i < v.size(); ++i) write_f64(os, v[i]);
}
inline void write_mat(std::ostream& os, const Mat& m) {
  write_u32(os, static_cast<std::uint32_t>(m.rows()));
  write_u32(os, static_cast<std::uint32_t>(m.cols()));
  for (int i = 0; i < m.rows(); ++i) {
    for (int j = 0; j < m.cols(); ++j) write_f64(os, m(i, j));
  }
}

struct Reader {
  std::istream& is;
  void raw(void* dst, std::size_t n) {
    is.read(reinterpret_cast<char*>(dst), n);
    if (!is) fail("CorruptFile", "checkpoint truncated");
  }
  std::uint32_t u32() { std::uint32_t v; raw(&v, sizeof(v)); return v; }
  std::uint64_t u64() { std::uint64_t v; raw(&v, sizeof(v)); return v; }
  double f64() { double v; raw(&v, sizeof(v)); return v; }
  std::string str() {
    std::string s(u32(), '\0');
    if (!s.empty()) raw(s.data(), s.size());
    return s;
  }
  std::vector<double> vec() {
    std::vector<double> v(u32());
    for (auto& x : v) x = f64();
    return v;
  }
  Vec eigen_vec() {
    auto v = vec();
    return Eigen::Map<const Vec>(v.data(), v.size());
  }
  Mat mat() {
    std::uint32_t r = u32(), c = u32();
    Mat m(r, c);
    for (std::uint32_t i = 0; i < r; ++i) {
      for (std::uint32_t j = 0; j < c; ++j) m(i, j) = f64();
    }
    return m;
  }
};

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail("CorruptFile", "cannot open checkpoint for writing: " + path);
  os.write(kCheckpointMagic, 4);
  detail::write_u32(os, kCheckpointVersion);
  detail::write_u64(os, ck.vocab_hash);
  const ModelConfig& c = ck.params.cfg;
  for (int v : {c.n_max, c.d_x, c.d_e, c.d_p, c.depth, c.hidden, c.heads, c.mlp_ratio,
                c.embed_x, c.embed_e, c.embed_p, c.time_features}) {
    detail::write_u32(os, static_cast<std::uint32_t>(v));
  }
  detail::write_u32(os, static_cast<std::uint32_t>(ck.schedule.steps));
  detail::write_vec(os, ck.schedule.alpha_bar);
  detail::write_eigen_vec(os, ck.transitions.m_x);
  detail::write_eigen_vec(os, ck.transitions.m_e);
  detail::write_eigen_vec(os, ck.transitions.m_p);
  detail::write_u32(os, static_cast<std::uint32_t>(ck.mask_prior.n_max));
  detail::write_vec(os, ck.mask_prior.prob);
  detail::write_u32(os, static_cast<std::uint32_t>(ck.params.task_ids.size()));
  for (const auto& id : ck.params.task_ids) detail::write_string(os, id);
  std::uint32_t count = 0;
  visit_params(const_cast<ModelParams&>(ck.params), [&](const std::string&, Mat&) { ++count; });
  detail::write_u32(os, count);
  visit_params(const_cast<ModelParams&>(ck.params), [&](const std::string& name, Mat& m) {
    detail::write_string(os, name);
    detail::write_mat(os, m);
  });
  if (!os) fail("CorruptFile", "checkpoint write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("CorruptFile", "cannot open checkpoint: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    fail("CorruptFile", "bad checkpoint magic");
  }
  detail::Reader r{is};
  std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) fail("VersionMismatch", "unsupported checkpoint version");
  Checkpoint ck;
  ck.vocab_hash = r.u64();
  ModelConfig c;
  c.n_max = r.u32();
  c.d_x = r.u32();
  c.d_e = r.u32();
  c.d_p = r.u32();
  c.depth = r.u32();
  c.hidden = r.u32();
  c.heads = r.u32();
  c.mlp_ratio = r.u32();
  c.embed_x = r.u32();
  c.embed_e = r.u32();
  c.embed_p = r.u32();
  c.time_features = r.u32();
  ck.schedule.steps = r.u32();
  ck.schedule.alpha_bar = r.vec();
  ck.transitions.m_x = r.eigen_vec();
  ck.transitions.m_e = r.eigen_vec();
  ck.transitions.m_p = r.eigen_vec();
  ck.mask_prior.n_max = r.u32();
  ck.mask_prior.prob = r.vec();
  std::vector<std::string> task_ids(r.u32());
  for (auto& id : task_ids) id = r.str();

  Rng dummy(0);
  ck.params = init_params(c, task_ids, dummy);
  std::uint32_t count = r.u32();
  std::uint32_t seen = 0;
  visit_params(ck.params, [&](const std::string& name, Mat& m) {
    std::string stored = r.str();
    if (stored != name) fail("CorruptFile", "unexpected tensor " + stored);
    Mat loaded = r.mat();
    if (loaded.rows() != m.rows() || loaded.cols() != m.cols()) {
      fail("CorruptFile", "tensor shape mismatch for " + name);
    }
    m = std::move(loaded);
    ++seen;
  });
  if (seen != count) fail("CorruptFile", "tensor count mismatch");
  return ck;
}

/// Load that additionally verifies the vocabulary binding.
inline Checkpoint load_checkpoint(const std::string& path, std::uint64_t expected_vocab_hash) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.vocab_hash != expected_vocab_hash) {
    fail("VocabMismatch", "checkpoint was trained with a different vocabulary");
  }
  return ck;
}

}  // namespace motifdiff
