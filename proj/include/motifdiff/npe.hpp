// SPDX-License-Identifier: Apache-2.0
//
// Node-pair-encoding motif vocabulary: learning by iterative most-frequent
// adjacent-pair merging, lossless tokenize/detokenize between atom-level and
// motif-level graphs, and padding to fixed-slot states.
#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "motifdiff/common.hpp"
#include "motifdiff/molgraph.hpp"

namespace motifdiff {

/// Bond-label categories in E: 0 = none, then bond orders 1..3.
inline constexpr int kBondCategories = 4;

struct MotifUnit {
  int id = 0;
  MolGraph fragment;  // atoms in the unit's fixed canonical order

  int arity() const { return fragment.atom_count(); }
};

struct MergeRule {
  int left = 0;
  int right = 0;
  int order = 1;
  int attach_left = 1;   // 1-based position within the left unit
  int attach_right = 1;  // 1-based position within the right unit
  int result = 0;        // unit id created by this merge
};

class MotifVocab {
 public:
  const std::vector<MotifUnit>& units() const { return units_; }
  const std::vector<MergeRule>& merges() const { return merges_; }
  const std::vector<std::string>& elements() const { return elements_; }
  int ring_unit_count() const { return ring_unit_count_; }

  int size() const { return static_cast<int>(units_.size()); }
  int max_arity() const {
    int a = 0;
    for (const auto& u : units_) a = std::max(a, u.arity());
    return a;
  }

  const MotifUnit& unit(int id) const {
    if (id < 0 || id >= size()) fail("UnknownUnit", "unit id out of range");
    return units_[id];
  }

  int singleton_id(const std::string& element) const {
    auto it = singleton_ids_.find(element);
    if (it == singleton_ids_.end()) fail("UnknownElement", "no singleton unit for " + element);
    return it->second;
  }

  bool has_element(const std::string& element) const {
    return singleton_ids_.count(element) > 0;
  }

  /// Ring unit id for a canonical fragment serialization, or -1.
  int ring_unit_for(const std::string& canonical) const {
    auto it = ring_ids_.find(canonical);
    return it == ring_ids_.end() ? -1 : it->second;
  }

  void add_singleton(const std::string& element) {
    MotifUnit u;
    u.id = size();
    u.fragment.atoms.push_back(element);
    singleton_ids_[element] = u.id;
    elements_.push_back(element);
    units_.push_back(std::move(u));
  }

  void add_ring_unit(const MolGraph& canonical_fragment) {
    MotifUnit u;
    u.id = size();
    u.fragment = canonical_fragment;
    ring_ids_[to_jsonl(canonical_fragment)] = u.id;
    units_.push_back(std::move(u));
    ++ring_unit_count_;
  }

  /// Applies a merge: the new unit's atom order is the left unit's atoms
  /// followed by the right unit's atoms.
  void add_merge(int left, int right, int order, int attach_left, int attach_right) {
    const MotifUnit& lu = unit(left);
    const MotifUnit& ru = unit(right);
    if (attach_left < 1 || attach_left > lu.arity() || attach_right < 1 ||
        attach_right > ru.arity()) {
      fail("AttachOutOfRange", "merge attachment outside unit arity");
    }
    MotifUnit u;
    u.id = size();
    u.fragment = lu.fragment;
    int offset = lu.arity();
    for (const auto& a : ru.fragment.atoms) u.fragment.atoms.push_back(a);
    for (const auto& b : ru.fragment.bonds) {
      u.fragment.bonds.push_back({b.i + offset, b.j + offset, b.order});
    }
    u.fragment.bonds.push_back({attach_left - 1, offset + attach_right - 1, order});
    std::sort(u.fragment.bonds.begin(), u.fragment.bonds.end());
    merges_.push_back({left, right, order, attach_left, attach_right, u.id});
    units_.push_back(std::move(u));
  }

 private:
  std::vector<MotifUnit> units_;
  std::vector<MergeRule> merges_;
  std::vector<std::string> elements_;
  std::map<std::string, int> singleton_ids_;
  std::map<std::string, int> ring_ids_;
  int ring_unit_count_ = 0;
};

struct MotifEdge {
  int i = 0;
  int j = 0;
  int order = 1;
  int attach_i = 1;  // 1-based atom position within node i
  int attach_j = 1;

  friend bool operator==(const MotifEdge&, const MotifEdge&) = default;
};

struct MotifGraph {
  std::vector<int> nodes;  // unit ids
  std::vector<MotifEdge> edges;  // normalized: i < j, sorted, at most one per pair

  int node_count() const { return static_cast<int>(nodes.size()); }

  friend bool operator==(const MotifGraph&, const MotifGraph&) = default;
};

// ---------------------------------------------------------------------------
// Tokenization

namespace detail {

struct TokNode {
  int unit = 0;
  std::vector<int> atoms;  // atoms[pos] = original atom index at unit position pos
};

struct TokEdge {
  int order = 1;
  int attach_i = 1;
  int attach_j = 1;
};

struct TokGraph {
  std::vector<TokNode> nodes;
  std::map<std::pair<int, int>, TokEdge> edges;  // key (i, j) with i < j

  bool has_edge(int i, int j) const {
    return edges.count({std::min(i, j), std::max(i, j)}) > 0;
  }
};

/// Initial tokenization: ring systems that exist in the vocabulary become
/// ring-unit nodes, all other atoms become singleton nodes. Nodes are ordered
/// by their smallest atom index.
inline TokGraph initial_tokenization(const MolGraph& g, const MotifVocab& vocab) {
  int n = g.atom_count();
  std::vector<int> node_of(n, -1);
  std::vector<TokNode> raw_nodes;

  for (const auto& system : ring_systems(g)) {
    MolGraph sub = induced_subgraph(g, system);
    int unit_id = vocab.ring_unit_for(canonical_jsonl(sub));
    if (unit_id < 0) continue;
    auto order = canonical_order(sub);
    TokNode node;
    node.unit = unit_id;
    node.atoms.resize(system.size());
    for (std::size_t pos = 0; pos < system.size(); ++pos) {
      node.atoms[pos] = system[order[pos]];
    }
    for (int a : node.atoms) node_of[a] = static_cast<int>(raw_nodes.size());
    raw_nodes.push_back(std::move(node));
  }
  for (int a = 0; a < n; ++a) {
    if (node_of[a] >= 0) continue;
    TokNode node;
    node.unit = vocab.singleton_id(g.atoms[a]);
    node.atoms = {a};
    node_of[a] = static_cast<int>(raw_nodes.size());
    raw_nodes.push_back(std::move(node));
  }

  // Reorder nodes by smallest atom index.
  std::vector<int> perm(raw_nodes.size());
  for (std::size_t k = 0; k < raw_nodes.size(); ++k) perm[k] = static_cast<int>(k);
  std::sort(perm.begin(), perm.end(), [&](int a, int b) {
    return *std::min_element(raw_nodes[a].atoms.begin(), raw_nodes[a].atoms.end()) <
           *std::min_element(raw_nodes[b].atoms.begin(), raw_nodes[b].atoms.end());
  });
  TokGraph tg;
  std::vector<int> new_index(raw_nodes.size());
  for (std::size_t k = 0; k < perm.size(); ++k) {
    new_index[perm[k]] = static_cast<int>(k);
    tg.nodes.push_back(std::move(raw_nodes[perm[k]]));
  }

  auto position_in = [&](int node_idx, int atom) {
    const auto& atoms = tg.nodes[node_idx].atoms;
    return static_cast<int>(std::find(atoms.begin(), atoms.end(), atom) - atoms.begin());
  };

  for (const auto& b : g.bonds) {
    int ni = new_index[node_of[b.i]];
    int nj = new_index[node_of[b.j]];
    if (ni == nj) continue;  // internal to a ring unit
    int ai = position_in(ni, b.i) + 1;
    int aj = position_in(nj, b.j) + 1;
    if (ni > nj) {
      std::swap(ni, nj);
      std::swap(ai, aj);
    }
    tg.edges[{ni, nj}] = {b.order, ai, aj};
  }
  return tg;
}

/// Merges nodes i and j (i < j); `left_is_i` says which side is the rule's
/// left unit. Returns the rebuilt graph. The caller has already checked that
/// no neighbor is bonded to both i and j.
inline void apply_merge(TokGraph& tg, int i, int j, bool left_is_i, int result_unit) {
  const TokNode& a = tg.nodes[left_is_i ? i : j];
  const TokNode& b = tg.nodes[left_is_i ? j : i];
  TokNode merged;
  merged.unit = result_unit;
  merged.atoms = a.atoms;
  merged.atoms.insert(merged.atoms.end(), b.atoms.begin(), b.atoms.end());
  int left_arity = static_cast<int>(a.atoms.size());

  // Offset to apply to an attachment position on the old node `which`.
  auto offset_for = [&](int which) {
    bool was_left = (which == (left_is_i ? i : j));
    return was_left ? 0 : left_arity;
  };

  std::map<std::pair<int, int>, TokEdge> edges;
  auto shifted = [&](int v) { return v > j ? v - 1 : v; };  // j removed
  for (const auto& [key, e] : tg.edges) {
    auto [u, v] = key;
    if ((u == i && v == j)) continue;  // consumed by the merge
    TokEdge ne = e;
    int nu = u, nv = v;
    if (u == i || u == j) {
      ne.attach_i += offset_for(u);
      nu = i;
    }
    if (v == i || v == j) {
      ne.attach_j += offset_for(v);
      nv = i;
    }
    nu = shifted(nu);
    nv = shifted(nv);
    if (nu > nv) {
      std::swap(nu, nv);
      std::swap(ne.attach_i, ne.attach_j);
    }
    edges[{nu, nv}] = ne;
  }
  std::vector<TokNode> nodes;
  for (int k = 0; k < static_cast<int>(tg.nodes.size()); ++k) {
    if (k == j) continue;
    nodes.push_back(k == i ? merged : std::move(tg.nodes[k]));
  }
  tg.nodes = std::move(nodes);
  tg.edges = std::move(edges);
}

/// Applies one merge rule repeatedly: scan edges in ascending (i, j) order,
/// merge the first match, rescan. A match is skipped when merging would
/// leave two bonds between the merged node and one neighbor (such a pair is
/// not representable in the padded state).
inline void apply_rule(TokGraph& tg, const MergeRule& rule) {
  while (true) {
    bool applied = false;
    for (const auto& [key, e] : tg.edges) {
      auto [i, j] = key;
      int ui = tg.nodes[i].unit;
      int uj = tg.nodes[j].unit;
      bool fwd = ui == rule.left && uj == rule.right && e.order == rule.order &&
                 e.attach_i == rule.attach_left && e.attach_j == rule.attach_right;
      bool rev = !fwd && ui == rule.right && uj == rule.left && e.order == rule.order &&
                 e.attach_i == rule.attach_right && e.attach_j == rule.attach_left;
      if (!fwd && !rev) continue;
      bool parallel = false;
      for (const auto& [okey, oe] : tg.edges) {
        (void)oe;
        auto [u, v] = okey;
        if (u == i && v == j) continue;
        int other = -1;
        if (u == i || u == j) other = v;
        else if (v == i || v == j) other = u;
        if (other < 0) continue;
        int mi = std::min(i, other), mj = std::max(i, other);
        int ki = std::min(j, other), kj = std::max(j, other);
        if (tg.edges.count({mi, mj}) && tg.edges.count({ki, kj})) {
          parallel = true;
          break;
        }
      }
      if (parallel) continue;
      apply_merge(tg, i, j, fwd, rule.result);
      applied = true;
      break;
    }
    if (!applied) return;
  }
}

inline TokGraph tokenize_work(const MolGraph& g, const MotifVocab& vocab) {
  TokGraph tg = initial_tokenization(g, vocab);
  for (const auto& rule : vocab.merges()) apply_rule(tg, rule);
  return tg;
}

inline MotifGraph to_motif_graph(const TokGraph& tg) {
  MotifGraph mg;
  for (const auto& n : tg.nodes) mg.nodes.push_back(n.unit);
  for (const auto& [key, e] : tg.edges) {
    mg.edges.push_back({key.first, key.second, e.order, e.attach_i, e.attach_j});
  }
  return mg;
}

}  // namespace detail

/// Tokenizes a molecule into an atom-disjoint motif graph.
inline MotifGraph tokenize(const MolGraph& g, const MotifVocab& vocab) {
  for (const auto& a : g.atoms) {
    if (!vocab.has_element(a)) fail("UnknownElement", "element not in vocabulary: " + a);
  }
  return detail::to_motif_graph(detail::tokenize_work(g, vocab));
}

/// Reconstructs the atom-level graph: instantiate every unit's fragment, then
/// add one bond per motif edge between the attached atoms.
inline MolGraph detokenize(const MotifGraph& mg, const MotifVocab& vocab) {
  MolGraph g;
  std::vector<int> offset(mg.nodes.size(), 0);
  for (std::size_t k = 0; k < mg.nodes.size(); ++k) {
    const MotifUnit& u = vocab.unit(mg.nodes[k]);
    offset[k] = g.atom_count();
    for (const auto& a : u.fragment.atoms) g.atoms.push_back(a);
    for (const auto& b : u.fragment.bonds) {
      g.bonds.push_back({b.i + offset[k], b.j + offset[k], b.order});
    }
  }
  for (const auto& e : mg.edges) {
    if (e.i < 0 || e.j >= static_cast<int>(mg.nodes.size()) || e.i >= e.j) {
      fail("MalformedRecord", "bad motif edge endpoints");
    }
    int ar_i = vocab.unit(mg.nodes[e.i]).arity();
    int ar_j = vocab.unit(mg.nodes[e.j]).arity();
    if (e.attach_i < 1 || e.attach_i > ar_i || e.attach_j < 1 || e.attach_j > ar_j) {
      fail("AttachOutOfRange", "attachment position outside unit arity");
    }
    int ai = offset[e.i] + e.attach_i - 1;
    int aj = offset[e.j] + e.attach_j - 1;
    g.bonds.push_back({std::min(ai, aj), std::max(ai, aj), e.order});
  }
  std::sort(g.bonds.begin(), g.bonds.end());
  validate_structure(g);
  return g;
}

// ---------------------------------------------------------------------------
// Padded fixed-slot state z = (X, E, P, m)

struct PaddedState {
  int n_max = 0;
  std::vector<int> x;        // motif type per slot (0 for inactive)
  std::vector<int> e;        // n_max * n_max, symmetric, 0 = no bond
  std::vector<int> p;        // n_max * n_max, directional, 0 = null attachment
  std::vector<std::uint8_t> m;

  explicit PaddedState(int n = 0)
      : n_max(n), x(n, 0), e(n * n, 0), p(n * n, 0), m(n, 0) {}

  int& E(int i, int j) { return e[i * n_max + j]; }
  int E(int i, int j) const { return e[i * n_max + j]; }
  int& P(int i, int j) { return p[i * n_max + j]; }
  int P(int i, int j) const { return p[i * n_max + j]; }

  int active_count() const {
    int n = 0;
    for (auto v : m) n += v;
    return n;
  }
  std::vector<int> active_slots() const {
    std::vector<int> s;
    for (int i = 0; i < n_max; ++i) {
      if (m[i]) s.push_back(i);
    }
    return s;
  }

  friend bool operator==(const PaddedState&, const PaddedState&) = default;
};

inline PaddedState pad(const MotifGraph& mg, int n_max) {
  if (mg.node_count() > n_max) fail("TooManyNodes", "motif graph exceeds slot budget");
  PaddedState z(n_max);
  for (int i = 0; i < mg.node_count(); ++i) {
    z.m[i] = 1;
    z.x[i] = mg.nodes[i];
  }
  for (const auto& e : mg.edges) {
    z.E(e.i, e.j) = e.order;
    z.E(e.j, e.i) = e.order;
    z.P(e.i, e.j) = e.attach_i;
    z.P(e.j, e.i) = e.attach_j;
  }
  return z;
}

/// Inverse of pad. Tolerates generated states where E and P disagree: an edge
/// exists iff E != none; a missing attachment on either side of an existing
/// edge raises AttachMissing (surfaced as a decode failure downstream).
inline MotifGraph unpad(const PaddedState& z) {
  MotifGraph mg;
  auto slots = z.active_slots();
  std::vector<int> node_of(z.n_max, -1);
  for (std::size_t k = 0; k < slots.size(); ++k) {
    node_of[slots[k]] = static_cast<int>(k);
    mg.nodes.push_back(z.x[slots[k]]);
  }
  for (std::size_t a = 0; a < slots.size(); ++a) {
    for (std::size_t b = a + 1; b < slots.size(); ++b) {
      int i = slots[a], j = slots[b];
      if (z.E(i, j) == 0) continue;
      if (z.P(i, j) == 0 || z.P(j, i) == 0) {
        fail("AttachMissing", "bonded pair with null attachment position");
      }
      mg.edges.push_back({node_of[i], node_of[j], z.E(i, j), z.P(i, j), z.P(j, i)});
    }
  }
  return mg;
}

// ---------------------------------------------------------------------------
// Vocabulary learning

inline MotifVocab learn_vocab(const std::vector<MolGraph>& corpus, int target_size,
                              int ring_budget) {
  if (corpus.empty()) fail("EmptyCorpus", "vocabulary learning needs a corpus");

  std::set<std::string> observed;
  for (const auto& g : corpus) {
    for (const auto& a : g.atoms) observed.insert(a);
  }
  observed.insert("*");
  if (target_size < static_cast<int>(observed.size()) + ring_budget) {
    fail("VTooSmall", "target vocabulary smaller than singletons plus ring budget");
  }

  MotifVocab vocab;
  for (const auto& symbol : element_symbols()) {
    if (observed.count(symbol)) vocab.add_singleton(symbol);
  }

  // Ring units: most frequent fused ring systems, ties by smallest canonical
  // serialization.
  std::map<std::string, int> ring_counts;
  for (const auto& g : corpus) {
    for (const auto& system : ring_systems(g)) {
      ring_counts[canonical_jsonl(induced_subgraph(g, system))] += 1;
    }
  }
  std::vector<std::pair<int, std::string>> ranked;
  for (const auto& [canon, count] : ring_counts) ranked.push_back({-count, canon});
  std::sort(ranked.begin(), ranked.end());
  for (int r = 0; r < ring_budget && r < static_cast<int>(ranked.size()); ++r) {
    vocab.add_ring_unit(from_json_record(nlohmann::json::parse(ranked[r].second)));
  }

  // Merge loop: count adjacent unit pairs with symmetric orientation
  // normalized, merge the most frequent, retokenize.
  using PairKey = std::tuple<int, int, int, int, int>;  // left, right, order, al, ar
  while (vocab.size() < target_size) {
    std::map<PairKey, int> counts;
    for (const auto& g : corpus) {
      detail::TokGraph tg = detail::tokenize_work(g, vocab);
      for (const auto& [key, e] : tg.edges) {
        int ui = tg.nodes[key.first].unit;
        int uj = tg.nodes[key.second].unit;
        PairKey fwd{ui, uj, e.order, e.attach_i, e.attach_j};
        PairKey rev{uj, ui, e.order, e.attach_j, e.attach_i};
        counts[std::min(fwd, rev)] += 1;
      }
    }
    const PairKey* best = nullptr;
    int best_count = 1;  // require count >= 2
    for (const auto& [key, count] : counts) {
      if (count > best_count) {
        best_count = count;
        best = &key;
      }
    }
    if (best == nullptr) break;
    auto [left, right, order, al, ar] = *best;
    vocab.add_merge(left, right, order, al, ar);
  }
  return vocab;
}

struct CompressionStats {
  double mean_atom_nodes = 0.0;
  double mean_motif_nodes = 0.0;
  double ratio = 1.0;       // atoms per motif
  double reduction_pct = 0.0;
};

inline CompressionStats compression_stats(const std::vector<MolGraph>& corpus,
                                          const MotifVocab& vocab) {
  if (corpus.empty()) fail("EmptyCorpus", "no molecules to measure");
  CompressionStats s;
  for (const auto& g : corpus) {
    s.mean_atom_nodes += g.atom_count();
    s.mean_motif_nodes += tokenize(g, vocab).node_count();
  }
  s.mean_atom_nodes /= static_cast<double>(corpus.size());
  s.mean_motif_nodes /= static_cast<double>(corpus.size());
  s.ratio = s.mean_atom_nodes / s.mean_motif_nodes;
  s.reduction_pct = 100.0 * (1.0 - s.mean_motif_nodes / s.mean_atom_nodes);
  return s;
}

// ---------------------------------------------------------------------------
// Vocabulary file format

inline constexpr int kVocabFormatVersion = 1;

inline std::string vocab_to_json(const MotifVocab& vocab) {
  nlohmann::json doc;
  doc["format_version"] = kVocabFormatVersion;
  doc["kind"] = "motif-vocab";
  doc["elements"] = vocab.elements();
  auto rings = nlohmann::json::array();
  int base = static_cast<int>(vocab.elements().size());
  for (int r = 0; r < vocab.ring_unit_count(); ++r) {
    const auto& frag = vocab.units()[base + r].fragment;
    rings.push_back(nlohmann::json::parse(to_jsonl(frag)));
  }
  doc["ring_units"] = rings;
  auto merges = nlohmann::json::array();
  for (const auto& m : vocab.merges()) {
    merges.push_back({m.left, m.right, m.order, m.attach_left, m.attach_right});
  }
  doc["merges"] = merges;
  doc["d_x"] = vocab.size();
  doc["a_max"] = vocab.max_arity();
  return doc.dump();
}

inline MotifVocab vocab_from_json(const std::string& text) {
  nlohmann::json doc = nlohmann::json::parse(text, nullptr, false);
  if (doc.is_discarded() || !doc.is_object()) fail("CorruptFile", "vocab file is not json");
  if (!doc.contains("format_version") ||
      doc["format_version"].get<int>() != kVocabFormatVersion) {
    fail("VersionMismatch", "unsupported vocab format version");
  }
  MotifVocab vocab;
  for (const auto& e : doc.at("elements")) vocab.add_singleton(e.get<std::string>());
  for (const auto& r : doc.at("ring_units")) vocab.add_ring_unit(from_json_record(r));
  for (const auto& m : doc.at("merges")) {
    vocab.add_merge(m[0].get<int>(), m[1].get<int>(), m[2].get<int>(), m[3].get<int>(),
                    m[4].get<int>());
  }
  if (doc.contains("d_x") && doc["d_x"].get<int>() != vocab.size()) {
    fail("CorruptFile", "vocab d_x does not match reconstruction");
  }
  return vocab;
}

inline std::uint64_t vocab_content_hash(const MotifVocab& vocab) {
  return fnv1a64(vocab_to_json(vocab));
}

}  // namespace motifdiff
