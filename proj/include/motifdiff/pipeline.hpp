// SPDX-License-Identifier: Apache-2.0
//
// End-to-end stage driver: corpus I/O and synthesis, deterministic splits,
// and the learn-vocab / pretrain / sft / rl / sample / eval / verify stages,
// each reading one json config object.
#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "motifdiff/metrics.hpp"
#include "motifdiff/rl.hpp"
#include "motifdiff/theory.hpp"

namespace motifdiff {

using Config = nlohmann::json;

// ---------------------------------------------------------------------------
// Corpus I/O

struct CorpusRecord {
  MolGraph mol;
  std::map<std::string, double> targets;  // optional per-task labels
};

/// jsonl corpus (one record per line); files ending in .smi are read as one
/// SMILES-subset string per line.
inline std::vector<CorpusRecord> load_corpus(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail("CorruptFile", "cannot open corpus: " + path);
  std::vector<CorpusRecord> out;
  std::string line;
  bool smi = path.size() > 4 && path.substr(path.size() - 4) == ".smi";
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    CorpusRecord rec;
    if (smi) {
      rec.mol = parse_molecule(line, MolFormat::kSmilesSubset);
    } else {
      nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_discarded()) fail("MalformedRecord", "invalid corpus line");
      rec.mol = from_json_record(j);
      if (j.contains("targets")) {
        for (auto& [k, v] : j["targets"].items()) rec.targets[k] = v.get<double>();
      }
    }
    out.push_back(std::move(rec));
  }
  if (out.empty()) fail("EmptyCorpus", "corpus file has no records: " + path);
  return out;
}

inline void save_corpus(const std::vector<MolGraph>& mols, const std::string& path) {
  std::ofstream os(path);
  if (!os) fail("CorruptFile", "cannot write corpus: " + path);
  for (const auto& g : mols) os << to_jsonl(g) << "\n";
}

/// Random valence-respecting molecules emitted through the SMILES-subset
/// writer and re-parsed, so every record exercises the grammar.
inline std::vector<MolGraph> synthesize_corpus(int count, std::uint64_t seed,
                                               int min_atoms = 2, int max_atoms = 9) {
  static const std::vector<std::pair<std::string, int>> kPool = {
      {"C", 4}, {"C", 4}, {"C", 4}, {"C", 4}, {"N", 3}, {"O", 2},
      {"O", 2}, {"S", 2}, {"F", 1}, {"*", 4}};
  Rng rng(seed);
  std::vector<MolGraph> out;
  while (static_cast<int>(out.size()) < count) {
    MolGraph g;
    std::vector<int> slack;
    int n = min_atoms + rng.uniform_int(max_atoms - min_atoms + 1);
    for (int i = 0; i < n; ++i) {
      auto [symbol, valence] = kPool[rng.uniform_int(static_cast<int>(kPool.size()))];
      g.atoms.push_back(symbol);
      slack.push_back(valence);
    }
    bool ok = true;
    for (int i = 1; i < n; ++i) {
      std::vector<int> candidates;
      for (int j = 0; j < i; ++j) {
        if (slack[j] >= 1) candidates.push_back(j);
      }
      if (candidates.empty()) {
        ok = false;
        break;
      }
      int j = candidates[rng.uniform_int(static_cast<int>(candidates.size()))];
      int order = 1;
      if (slack[j] >= 2 && slack[i] >= 2 && rng.u01() < 0.25) order = 2;
      if (slack[j] >= 3 && slack[i] >= 3 && rng.u01() < 0.05) order = 3;
      g.bonds.push_back({j, i, order});
      slack[j] -= order;
      slack[i] -= order;
    }
    if (!ok) continue;
    // ring closures (up to two) where valence allows
    int rings = rng.uniform_int(3);
    for (int r = 0; r < rings; ++r) {
      for (int attempt = 0; attempt < 6; ++attempt) {
        int i = rng.uniform_int(n), j = rng.uniform_int(n);
        if (i == j) continue;
        int a = std::min(i, j), b = std::max(i, j);
        bool exists = false;
        for (const auto& bond : g.bonds) {
          if (bond.i == a && bond.j == b) exists = true;
        }
        if (exists || slack[a] < 1 || slack[b] < 1) continue;
        g.bonds.push_back({a, b, 1});
        slack[a] -= 1;
        slack[b] -= 1;
        break;
      }
    }
    std::sort(g.bonds.begin(), g.bonds.end());
    MolGraph parsed = parse_molecule(to_smiles_subset(g), MolFormat::kSmilesSubset);
    if (!check_validity(parsed).is_valid) continue;
    out.push_back(std::move(parsed));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Deterministic 8:1:1 split by canonical-serialization hash

enum class Split { kTrain, kValidation, kTest };

inline Split split_of(const MolGraph& g) {
  std::uint64_t bucket = fnv1a64(canonical_jsonl(g)) % 10;
  if (bucket < 8) return Split::kTrain;
  return bucket == 8 ? Split::kValidation : Split::kTest;
}

template <typename T, typename GetMol>
std::vector<T> take_split(const std::vector<T>& all, Split split, GetMol&& mol_of) {
  std::vector<T> out;
  for (const auto& item : all) {
    if (split_of(mol_of(item)) == split) out.push_back(item);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Config helpers

inline double cfg_num(const Config& c, const std::string& key, double fallback) {
  return c.contains(key) ? c.at(key).get<double>() : fallback;
}
inline int cfg_int(const Config& c, const std::string& key, int fallback) {
  return c.contains(key) ? c.at(key).get<int>() : fallback;
}
inline std::string cfg_str(const Config& c, const std::string& key,
                           const std::string& fallback = "") {
  return c.contains(key) ? c.at(key).get<std::string>() : fallback;
}
inline std::string cfg_path(const Config& c, const std::string& key) {
  if (!c.contains(key)) fail("MalformedRecord", "config key missing: " + key);
  return c.at(key).get<std::string>();
}

inline std::uint64_t cfg_seed(const Config& c) {
  return c.contains("seed") ? c.at("seed").get<std::uint64_t>() : 0;
}

inline std::string out_path(const Config& c, const std::string& name) {
  std::filesystem::path dir = cfg_str(c, "out", ".");
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

inline std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("CorruptFile", "cannot open file: " + path);
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

inline void spit(const std::string& text, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail("CorruptFile", "cannot write file: " + path);
  os << text;
}

// ---------------------------------------------------------------------------
// Shared stage plumbing

namespace detail {

inline MotifVocab load_vocab_file(const Config& c) {
  return vocab_from_json(slurp(cfg_path(c, "vocab")));
}

inline TaskRegistry load_registry_file(const Config& c) {
  return registry_from_json(slurp(cfg_path(c, "tasks")));
}

inline ModelConfig model_config(const Config& c, const MotifVocab& vocab) {
  ModelConfig mc;
  mc.n_max = cfg_int(c, "n_max", 12);
  mc.d_x = vocab.size();
  mc.d_e = kBondCategories;
  mc.d_p = vocab.max_arity() + 1;
  mc.depth = cfg_int(c, "depth", 2);
  mc.hidden = cfg_int(c, "hidden", 64);
  mc.heads = cfg_int(c, "heads", 4);
  mc.mlp_ratio = cfg_int(c, "mlp_ratio", 4);
  mc.embed_x = cfg_int(c, "embed_x", 32);
  mc.embed_e = cfg_int(c, "embed_e", 16);
  mc.embed_p = cfg_int(c, "embed_p", 16);
  mc.time_features = cfg_int(c, "time_features", 16);
  return mc;
}

/// Tokenize and pad a record list, dropping molecules that exceed the slot
/// budget; returns states aligned with the kept record indices.
struct PaddedCorpus {
  std::vector<PaddedState> states;
  std::vector<int> kept;  // indices into the input list
};

inline PaddedCorpus pad_corpus(const std::vector<CorpusRecord>& records,
                               const MotifVocab& vocab, int n_max) {
  PaddedCorpus out;
  for (std::size_t k = 0; k < records.size(); ++k) {
    MotifGraph mg = tokenize(records[k].mol, vocab);
    if (mg.node_count() > n_max) continue;
    out.states.push_back(pad(mg, n_max));
    out.kept.push_back(static_cast<int>(k));
  }
  if (out.states.empty()) fail("EmptyCorpus", "no molecule fits the slot budget");
  return out;
}

/// Condition for a molecule under a task: the oracle's own label.
inline Condition condition_for(const MolGraph& g, const TaskSpec& task) {
  if (task.kind == TaskKind::kRegression) return {task.id, evaluate(g, task)};
  return {task.id, descriptor_value(g, task.descriptor) >= task.theta_cls ? 1.0 : 0.0};
}

inline std::vector<Condition> conditions_from_config(const Config& c) {
  std::vector<Condition> out;
  if (!c.contains("conditions")) return out;
  for (const auto& j : c.at("conditions")) {
    out.push_back({j.at("task").get<std::string>(), j.at("target").get<double>()});
  }
  return out;
}

inline RlEnv make_env(const Checkpoint& ck, const MotifVocab& vocab,
                      const TaskRegistry& registry) {
  return {&ck.schedule, &ck.transitions, &ck.mask_prior, &vocab, &registry};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stages

inline void stage_gen_corpus(const Config& c) {
  int count = cfg_int(c, "count", 500);
  auto corpus = synthesize_corpus(count, cfg_seed(c), cfg_int(c, "min_atoms", 2),
                                  cfg_int(c, "max_atoms", 9));
  std::string path = out_path(c, cfg_str(c, "corpus_out", "corpus.jsonl"));
  save_corpus(corpus, path);
  std::cout << "wrote " << corpus.size() << " molecules to " << path << "\n";
}

inline void stage_learn_vocab(const Config& c) {
  auto records = load_corpus(cfg_path(c, "corpus"));
  auto train = take_split(records, Split::kTrain,
                          [](const CorpusRecord& r) -> const MolGraph& { return r.mol; });
  if (train.empty()) train = records;
  std::vector<MolGraph> mols;
  for (const auto& r : train) {
    if (check_validity(r.mol).is_valid) mols.push_back(r.mol);
  }
  MotifVocab vocab = learn_vocab(mols, cfg_int(c, "V", 64), cfg_int(c, "R", 8));
  std::string path = out_path(c, cfg_str(c, "vocab_out", "vocab.json"));
  spit(vocab_to_json(vocab), path);
  auto stats = compression_stats(mols, vocab);
  std::cout << "vocab size " << vocab.size() << " (a_max " << vocab.max_arity() << ") -> "
            << path << "\n"
            << "compression: " << stats.mean_atom_nodes << " atoms / "
            << stats.mean_motif_nodes << " motifs = " << stats.ratio << "x ("
            << stats.reduction_pct << "% reduction)\n";
}

/// Masked-CE training shared by pretrain (unconditional) and sft
/// (conditional); returns the per-epoch mean loss trace.
namespace detail {

struct TrainData {
  std::vector<PaddedState> states;
  std::vector<const CorpusRecord*> records;
};

inline std::vector<double> train_masked_ce(ModelParams& params, const TrainData& data,
                                           const NoiseSchedule& schedule,
                                           const TransitionModel& transitions,
                                           const TaskRegistry* registry, int epochs,
                                           int batch_size, double lr, const LossConfig& lcfg,
                                           Rng& rng, Adam* opt_in = nullptr,
                                           int decay_over = 0) {
  Adam local_opt(lr);
  Adam& opt = opt_in != nullptr ? *opt_in : local_opt;
  std::vector<double> trace;
  std::vector<int> order(data.states.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    if (decay_over > 0) {
      double frac = std::min(1.0, static_cast<double>(epoch) / decay_over);
      opt.set_lr(0.1 * lr + 0.9 * lr * 0.5 * (1.0 + std::cos(M_PI * frac)));
    }
    rng.shuffle(order);
    double epoch_loss = 0.0;
    int batches = 0;
    for (std::size_t at = 0; at < order.size(); at += batch_size) {
      std::vector<TrainItem> batch;
      for (std::size_t k = at; k < std::min(order.size(), at + batch_size); ++k) {
        int idx = order[k];
        TrainItem item;
        item.z_0 = data.states[idx];
        item.t = 1 + rng.uniform_int(schedule.steps);
        item.z_t = forward_sample(item.z_0, item.t, schedule, transitions, rng);
        if (registry != nullptr) {
          const auto& tasks = registry->tasks();
          const TaskSpec& task = tasks[rng.uniform_int(static_cast<int>(tasks.size()))];
          item.cond = make_cond_input(params, condition_for(data.records[idx]->mol, task),
                                      *registry);
        }
        batch.push_back(std::move(item));
      }
      auto [loss, grads] = gradients(params, batch, lcfg);
      opt.step(params, grads);
      epoch_loss += loss;
      ++batches;
    }
    trace.push_back(epoch_loss / std::max(1, batches));
  }
  return trace;
}

}  // namespace detail

inline void stage_pretrain(const Config& c) {
  Rng rng(cfg_seed(c));
  MotifVocab vocab = detail::load_vocab_file(c);
  auto records = load_corpus(cfg_path(c, "corpus"));
  auto train = take_split(records, Split::kTrain,
                          [](const CorpusRecord& r) -> const MolGraph& { return r.mol; });
  if (train.empty()) train = records;

  ModelConfig mc = detail::model_config(c, vocab);
  auto padded = detail::pad_corpus(train, vocab, mc.n_max);

  Checkpoint ck;
  ck.schedule = cosine_schedule(cfg_int(c, "T", 50));
  ck.transitions = estimate_transitions(padded.states, vocab.size(), vocab.max_arity() + 1);
  ck.mask_prior = estimate_mask_prior(padded.states, mc.n_max);
  ck.vocab_hash = vocab_content_hash(vocab);

  std::vector<std::string> task_ids;
  if (c.contains("tasks")) {
    TaskRegistry registry = detail::load_registry_file(c);
    for (const auto& t : registry.tasks()) task_ids.push_back(t.id);
  }
  ck.params = init_params(mc, task_ids, rng);

  detail::TrainData data;
  data.states = padded.states;
  LossConfig lcfg{cfg_num(c, "lambda_x", 1.0), cfg_num(c, "lambda_e", 1.0),
                  cfg_num(c, "lambda_p", 1.0)};
  int epochs = cfg_int(c, "epochs", 50);
  auto trace = detail::train_masked_ce(ck.params, data, ck.schedule, ck.transitions, nullptr,
                                       epochs, cfg_int(c, "batch_size", 16),
                                       cfg_num(c, "learning_rate", 3e-3), lcfg, rng, nullptr,
                                       epochs);
  for (std::size_t e = 0; e < trace.size(); ++e) {
    if (e % 10 == 0 || e + 1 == trace.size()) {
      std::cout << "pretrain epoch " << e << " loss " << trace[e] << "\n";
    }
  }
  std::string path = out_path(c, cfg_str(c, "checkpoint_out", "pretrain.ckpt"));
  save_checkpoint(ck, path);
  std::cout << "wrote " << path << "\n";
}

inline void stage_sft(const Config& c) {
  Rng rng(cfg_seed(c));
  MotifVocab vocab = detail::load_vocab_file(c);
  TaskRegistry registry = detail::load_registry_file(c);
  Checkpoint ck = load_checkpoint(cfg_path(c, "checkpoint_in"), vocab_content_hash(vocab));

  auto records = load_corpus(cfg_path(c, "corpus"));
  auto train = take_split(records, Split::kTrain,
                          [](const CorpusRecord& r) -> const MolGraph& { return r.mol; });
  auto val = take_split(records, Split::kValidation,
                        [](const CorpusRecord& r) -> const MolGraph& { return r.mol; });
  if (train.empty()) train = records;
  if (val.empty()) val = train;

  // Fit regression normalization on the training split.
  for (const auto& spec : registry.tasks()) {
    if (spec.kind != TaskKind::kRegression) continue;
    TaskSpec& task = registry.get_mutable(spec.id);
    double mean = 0.0;
    for (const auto& r : train) mean += evaluate(r.mol, task);
    mean /= train.size();
    double var = 0.0;
    for (const auto& r : train) {
      double d = evaluate(r.mol, task) - mean;
      var += d * d;
    }
    var /= train.size();
    task.mean = mean;
    task.std = std::max(std::sqrt(var), 1e-6);
  }
  spit(registry_to_json(registry), out_path(c, "tasks_resolved.json"));

  auto padded = detail::pad_corpus(train, vocab, ck.params.cfg.n_max);
  detail::TrainData data;
  data.states = padded.states;
  for (int idx : padded.kept) data.records.push_back(&train[idx]);

  LossConfig lcfg{cfg_num(c, "lambda_x", 1.0), cfg_num(c, "lambda_e", 1.0),
                  cfg_num(c, "lambda_p", 1.0)};
  int epochs = cfg_int(c, "epochs", 100);
  int val_interval = cfg_int(c, "val_interval", 10);
  int val_samples = cfg_int(c, "val_samples", 24);

  RlEnv env = detail::make_env(ck, vocab, registry);
  ModelParams best = ck.params;
  double best_score = std::numeric_limits<double>::infinity();

  // Validation controllability: sample against held-out conditions and
  // average the oracle discrepancy (invalid decodes are skipped; an epoch
  // with no valid decode scores infinitely bad).
  auto validation_score = [&](const ModelParams& params, std::uint64_t tag) {
    Rng vrng(cfg_seed(c) ^ (0x9e3779b97f4a7c15ull + tag));
    double total = 0.0;
    int counted = 0;
    const auto& tasks = registry.tasks();
    for (int s = 0; s < val_samples; ++s) {
      const CorpusRecord& rec = val[s % val.size()];
      const TaskSpec& task = tasks[s % tasks.size()];
      Condition cond = detail::condition_for(rec.mol, task);
      CondInput cin = make_cond_input(params, cond, registry);
      PaddedState z0 = sample_state(params, cin, env, vrng);
      RewardOutcome outcome = terminal_reward(z0, cond, task, vocab, 0.1);
      if (!outcome.valid) continue;
      total += discrepancy(evaluate(*outcome.molecule, task), cond.target, task);
      ++counted;
    }
    return counted == 0 ? std::numeric_limits<double>::infinity() : total / counted;
  };

  double lr = cfg_num(c, "learning_rate", 1e-3);
  Adam opt(lr);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    double frac = static_cast<double>(epoch) / epochs;
    opt.set_lr(0.1 * lr + 0.9 * lr * 0.5 * (1.0 + std::cos(M_PI * frac)));
    auto trace =
        detail::train_masked_ce(ck.params, data, ck.schedule, ck.transitions, &registry, 1,
                                cfg_int(c, "batch_size", 16), lr, lcfg, rng, &opt);
    bool last = epoch + 1 == epochs;
    if (epoch % val_interval == val_interval - 1 || last) {
      double score = validation_score(ck.params, static_cast<std::uint64_t>(epoch));
      std::cout << "sft epoch " << epoch << " loss " << trace.back()
                << " val-discrepancy " << score << "\n";
      if (score < best_score) {
        best_score = score;
        best = ck.params;
      }
    }
  }
  ck.params = best;
  std::string path = out_path(c, cfg_str(c, "checkpoint_out", "sft.ckpt"));
  save_checkpoint(ck, path);
  std::cout << "wrote " << path << " (best val-discrepancy " << best_score << ")\n";
}

inline void stage_rl(const Config& c) {
  Rng rng(cfg_seed(c));
  MotifVocab vocab = detail::load_vocab_file(c);
  TaskRegistry registry = detail::load_registry_file(c);
  Checkpoint ck = load_checkpoint(cfg_path(c, "checkpoint_in"), vocab_content_hash(vocab));
  const ModelParams ref_params = ck.params;  // frozen reference

  PPOConfig pcfg;
  pcfg.clip_eps = cfg_num(c, "clip_eps", 0.2);
  pcfg.c_value = cfg_num(c, "c_value", 0.5);
  pcfg.c_entropy = cfg_num(c, "c_entropy", 0.001);
  pcfg.c_kl = cfg_num(c, "c_kl", 0.01);
  pcfg.suffix_steps = cfg_int(c, "suffix_steps", 30);
  pcfg.batch_size = cfg_int(c, "batch_size", 16);
  pcfg.update_passes = cfg_int(c, "update_passes", 2);
  pcfg.learning_rate = cfg_num(c, "learning_rate", 3e-4);
  pcfg.w_val = cfg_num(c, "w_val", 0.1);
  pcfg.check(ck.schedule.steps);

  // Rollout conditions: explicit list, or uniform over the training split's
  // condition list across all registered tasks.
  std::vector<Condition> conditions = detail::conditions_from_config(c);
  if (conditions.empty()) {
    auto records = load_corpus(cfg_path(c, "corpus"));
    auto train = take_split(records, Split::kTrain,
                            [](const CorpusRecord& r) -> const MolGraph& { return r.mol; });
    if (train.empty()) train = records;
    for (const auto& rec : train) {
      for (const auto& task : registry.tasks()) {
        conditions.push_back(detail::condition_for(rec.mol, task));
      }
    }
  }
  if (conditions.empty()) fail("EmptyCorpus", "no rollout conditions");

  RlEnv env = detail::make_env(ck, vocab, registry);
  Adam opt(pcfg.learning_rate);
  int epochs = cfg_int(c, "epochs", 200);

  std::ofstream log(out_path(c, cfg_str(c, "log_out", "rl_log.jsonl")));
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::vector<Trajectory> batch;
    for (int k = 0; k < pcfg.batch_size; ++k) {
      const Condition& cond =
          conditions[rng.uniform_int(static_cast<int>(conditions.size()))];
      Rng stream = rng.fork(static_cast<std::uint64_t>(epoch) * 1000 + k);
      batch.push_back(collect_rollout(ck.params, ref_params, cond, pcfg, env, stream));
    }
    PPODiagnostics diag = ppo_update(ck.params, ref_params, batch, pcfg, env, opt);
    nlohmann::json row = {{"epoch", epoch},
                          {"mean_reward", diag.mean_reward},
                          {"mean_kl", diag.mean_kl},
                          {"validity_rate", diag.validity_rate}};
    log << row.dump() << "\n";
    if (epoch % 20 == 0 || epoch + 1 == epochs) {
      std::cout << "rl epoch " << epoch << " reward " << diag.mean_reward << " validity "
                << diag.validity_rate << " kl " << diag.mean_kl << "\n";
    }
  }
  std::string path = out_path(c, cfg_str(c, "checkpoint_out", "rl.ckpt"));
  save_checkpoint(ck, path);
  std::cout << "wrote " << path << "\n";
}

inline void stage_sample(const Config& c) {
  Rng rng(cfg_seed(c));
  MotifVocab vocab = detail::load_vocab_file(c);
  TaskRegistry registry = detail::load_registry_file(c);
  Checkpoint ck = load_checkpoint(cfg_path(c, "checkpoint_in"), vocab_content_hash(vocab));
  RlEnv env = detail::make_env(ck, vocab, registry);

  std::vector<Condition> conditions = detail::conditions_from_config(c);
  if (conditions.empty()) {
    auto records = load_corpus(cfg_path(c, "corpus"));
    auto test = take_split(records, Split::kTest,
                           [](const CorpusRecord& r) -> const MolGraph& { return r.mol; });
    if (test.empty()) test = records;
    for (const auto& rec : test) {
      for (const auto& task : registry.tasks()) {
        conditions.push_back(detail::condition_for(rec.mol, task));
      }
    }
  }
  int count = cfg_int(c, "count", 100);

  std::string path = out_path(c, cfg_str(c, "gen_out", "generated.jsonl"));
  std::ofstream os(path);
  int valid_count = 0;
  for (int k = 0; k < count; ++k) {
    const Condition& cond = conditions[k % conditions.size()];
    CondInput cin = make_cond_input(ck.params, cond, registry);
    Rng stream = rng.fork(static_cast<std::uint64_t>(k));
    PaddedState z0 = sample_state(ck.params, cin, env, stream);
    RewardOutcome outcome =
        terminal_reward(z0, cond, registry.get(cond.task), vocab, 0.1);
    nlohmann::json rec;
    rec["condition"] = {{"task", cond.task}, {"target", cond.target}};
    if (outcome.molecule) {
      rec["molecule"] = nlohmann::json::parse(to_jsonl(*outcome.molecule));
    } else {
      rec["molecule"] = nullptr;
    }
    rec["valid"] = outcome.valid;
    os << rec.dump() << "\n";
    valid_count += outcome.valid ? 1 : 0;
  }
  std::cout << "wrote " << count << " samples to " << path << " (validity "
            << static_cast<double>(valid_count) / count << ")\n";
}

inline void stage_eval(const Config& c) {
  TaskRegistry registry = detail::load_registry_file(c);
  auto records = load_corpus(cfg_path(c, "corpus"));
  std::vector<MolGraph> reference;
  for (const auto& r : records) reference.push_back(r.mol);

  std::vector<std::optional<MolGraph>> generated;
  std::vector<Condition> conditions;
  std::ifstream is(cfg_path(c, "generated"));
  if (!is) fail("CorruptFile", "cannot open generated set");
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::json rec = nlohmann::json::parse(line, nullptr, false);
    if (rec.is_discarded()) fail("MalformedRecord", "invalid generated record");
    conditions.push_back({rec.at("condition").at("task").get<std::string>(),
                          rec.at("condition").at("target").get<double>()});
    if (rec.contains("molecule") && !rec["molecule"].is_null()) {
      generated.push_back(from_json_record(rec["molecule"]));
    } else {
      generated.push_back(std::nullopt);
    }
  }
  EvalReport report = evaluate_set(generated, reference, conditions, registry);
  std::string text = report_to_text(report);
  std::cout << text;
  spit(text, out_path(c, "report.txt"));
  spit(report_to_csv(report), out_path(c, "report.csv"));
}

/// Theory battery; returns false when any row fails.
inline bool stage_verify(const Config& c) {
  auto rows = theory::run_battery(cfg_seed(c) == 0 ? 20240808 : cfg_seed(c));
  bool all_pass = true;
  std::size_t width = 0;
  for (const auto& r : rows) width = std::max(width, r.name.size());
  for (const auto& r : rows) {
    std::cout << (r.pass ? "PASS  " : "FAIL  ") << r.name
              << std::string(width - r.name.size() + 2, ' ') << r.detail << "\n";
    all_pass = all_pass && r.pass;
  }
  return all_pass;
}

/// Dispatch a stage by name. Prints the resolved config first; identical
/// config + seed reproduce identical artifacts.
inline int run_stage(const std::string& stage, const Config& config) {
  std::cout << "stage: " << stage << "\nconfig: " << config.dump() << "\nseed: "
            << cfg_seed(config) << "\n";
  if (stage == "gen-corpus") {
    stage_gen_corpus(config);
  } else if (stage == "learn-vocab") {
    stage_learn_vocab(config);
  } else if (stage == "pretrain") {
    stage_pretrain(config);
  } else if (stage == "sft") {
    stage_sft(config);
  } else if (stage == "rl") {
    stage_rl(config);
  } else if (stage == "sample") {
    stage_sample(config);
  } else if (stage == "eval") {
    stage_eval(config);
  } else if (stage == "verify") {
    return stage_verify(config) ? 0 : 1;
  } else {
    fail("MalformedRecord", "unknown stage: " + stage);
  }
  return 0;
}

}  // namespace motifdiff
