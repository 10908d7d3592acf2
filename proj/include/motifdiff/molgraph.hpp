// SPDX-License-Identifier: Apache-2.0
//
// Atom-level molecular graphs: parsing (jsonl and a SMILES subset),
// valence-based validity, ring analysis, descriptors and canonical forms.
#pragma once

#include <algorithm>
#include <array>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "motifdiff/common.hpp"

namespace motifdiff {

struct Bond {
  int i = 0;
  int j = 0;
  int order = 1;  // 1, 2 or 3

  friend bool operator==(const Bond& a, const Bond& b) {
    return a.i == b.i && a.j == b.j && a.order == b.order;
  }
  friend auto operator<=>(const Bond& a, const Bond& b) = default;
};

/// Supported element symbols. "*" is the polymer attachment wildcard.
inline const std::vector<std::string>& element_symbols() {
  static const std::vector<std::string> kSymbols = {
      "B", "C", "N", "O", "F", "P", "S", "Cl", "Br", "I", "*"};
  return kSymbols;
}

inline bool is_known_element(const std::string& symbol) {
  const auto& known = element_symbols();
  return std::find(known.begin(), known.end(), symbol) != known.end();
}

/// Allowed valences per element; empty set means unconstrained ("*").
inline const std::vector<int>& allowed_valences(const std::string& symbol) {
  static const std::map<std::string, std::vector<int>> kTable = {
      {"B", {3}},  {"C", {4}},  {"N", {3}},     {"O", {2}},
      {"F", {1}},  {"P", {3, 5}}, {"S", {2, 4, 6}}, {"Cl", {1}},
      {"Br", {1}}, {"I", {1}},  {"*", {}}};
  return kTable.at(symbol);
}

struct MolGraph {
  std::vector<std::string> atoms;
  std::vector<Bond> bonds;  // normalized: i < j, sorted by (i, j)

  int atom_count() const { return static_cast<int>(atoms.size()); }
  int bond_count() const { return static_cast<int>(bonds.size()); }

  friend bool operator==(const MolGraph& a, const MolGraph& b) {
    return a.atoms == b.atoms && a.bonds == b.bonds;
  }
};

/// Checks the structural invariants (index ranges, i<j, no duplicates,
/// known elements). Throws MalformedRecord on violation.
inline void validate_structure(const MolGraph& g) {
  std::set<std::pair<int, int>> seen;
  for (const auto& a : g.atoms) {
    if (!is_known_element(a)) fail("MalformedRecord", "unknown element symbol: " + a);
  }
  for (const auto& b : g.bonds) {
    if (b.i < 0 || b.j >= g.atom_count() || b.i >= b.j) {
      fail("MalformedRecord", "bad bond endpoint indices");
    }
    if (b.order < 1 || b.order > 3) fail("MalformedRecord", "bond order out of range");
    if (!seen.insert({b.i, b.j}).second) fail("MalformedRecord", "duplicate bond");
  }
}

inline std::vector<std::vector<std::pair<int, int>>> adjacency(const MolGraph& g) {
  std::vector<std::vector<std::pair<int, int>>> adj(g.atoms.size());
  for (int bi = 0; bi < g.bond_count(); ++bi) {
    const Bond& b = g.bonds[bi];
    adj[b.i].push_back({b.j, bi});
    adj[b.j].push_back({b.i, bi});
  }
  return adj;
}

// ---------------------------------------------------------------------------
// Serialization

/// One-line jsonl record, preserving atom order:
/// {"atoms":["C","N",...],"bonds":[[0,1,1],...]}
inline std::string to_jsonl(const MolGraph& g) {
  nlohmann::json rec;
  rec["atoms"] = g.atoms;
  auto bonds = nlohmann::json::array();
  std::vector<Bond> sorted = g.bonds;
  std::sort(sorted.begin(), sorted.end());
  for (const auto& b : sorted) bonds.push_back({b.i, b.j, b.order});
  rec["bonds"] = bonds;
  return rec.dump();
}

inline MolGraph from_json_record(const nlohmann::json& rec) {
  MolGraph g;
  if (!rec.is_object() || !rec.contains("atoms") || !rec.contains("bonds")) {
    fail("MalformedRecord", "jsonl record must contain atoms and bonds");
  }
  try {
    for (const auto& a : rec.at("atoms")) g.atoms.push_back(a.get<std::string>());
    for (const auto& b : rec.at("bonds")) {
      if (!b.is_array() || b.size() != 3) fail("MalformedRecord", "bond must be [i,j,order]");
      Bond bond{b[0].get<int>(), b[1].get<int>(), b[2].get<int>()};
      if (bond.i > bond.j) std::swap(bond.i, bond.j);
      g.bonds.push_back(bond);
    }
  } catch (const nlohmann::json::exception& e) {
    fail("MalformedRecord", std::string("bad jsonl record: ") + e.what());
  }
  std::sort(g.bonds.begin(), g.bonds.end());
  validate_structure(g);
  return g;
}

// ---------------------------------------------------------------------------
// SMILES subset parser.
//
// Grammar: element tokens B C N O F P S, two-letter Cl Br I, wildcard *,
// bond symbols - = # (single default), parenthesized branches, ring-closure
// digits 1-9. No aromatics, charges, stereo or explicit H.

namespace detail {

inline std::string read_element_token(const std::string& s, std::size_t& pos) {
  char c = s[pos];
  if (c == '*') { ++pos; return "*"; }
  if (c == 'C' && pos + 1 < s.size() && s[pos + 1] == 'l') { pos += 2; return "Cl"; }
  if (c == 'B' && pos + 1 < s.size() && s[pos + 1] == 'r') { pos += 2; return "Br"; }
  static const std::string kSingles = "BCNOFPSI";
  if (kSingles.find(c) != std::string::npos) { ++pos; return std::string(1, c); }
  if (std::islower(static_cast<unsigned char>(c)))
    fail("UnsupportedToken", std::string("aromatic/lowercase token '") + c + "'");
  if (c == '+' || c == '-' || c == '@' || c == '[' || c == '/' || c == '\\')
    fail("UnsupportedToken", std::string("unsupported token '") + c + "'");
  fail("UnsupportedToken", std::string("unexpected character '") + c + "'");
}

}  // namespace detail

inline MolGraph parse_smiles_subset(const std::string& text) {
  MolGraph g;
  std::vector<int> open_stack;                   // branch return points
  std::optional<int> prev;                       // previous atom index
  int pending_order = 0;                         // 0 = none/default single
  struct RingOpen { int atom; int order; };      // order 0 = unspecified
  std::map<char, RingOpen> rings;

  auto add_bond = [&g](int i, int j, int order) {
    if (i == j) fail("MalformedRecord", "self bond");
    Bond b{std::min(i, j), std::max(i, j), order};
    for (const auto& e : g.bonds) {
      if (e.i == b.i && e.j == b.j) fail("MalformedRecord", "duplicate bond between atoms");
    }
    g.bonds.push_back(b);
  };

  std::size_t pos = 0;
  while (pos < text.size()) {
    char c = text[pos];
    if (c == '-' || c == '=' || c == '#') {
      if (pending_order != 0) fail("MalformedRecord", "consecutive bond symbols");
      pending_order = (c == '-') ? 1 : (c == '=') ? 2 : 3;
      ++pos;
      continue;
    }
    if (c == '(') {
      if (!prev) fail("UnbalancedParen", "branch before any atom");
      if (pending_order != 0) fail("MalformedRecord", "bond symbol before '('");
      open_stack.push_back(*prev);
      ++pos;
      continue;
    }
    if (c == ')') {
      if (open_stack.empty()) fail("UnbalancedParen", "unmatched ')'");
      if (pending_order != 0) fail("MalformedRecord", "dangling bond symbol before ')'");
      prev = open_stack.back();
      open_stack.pop_back();
      ++pos;
      continue;
    }
    if (c >= '1' && c <= '9') {
      if (!prev) fail("MalformedRecord", "ring digit before any atom");
      auto it = rings.find(c);
      if (it == rings.end()) {
        rings[c] = {*prev, pending_order};
      } else {
        int order = 1;
        if (it->second.order != 0 && pending_order != 0 && it->second.order != pending_order)
          fail("MalformedRecord", "conflicting ring-closure bond orders");
        if (it->second.order != 0) order = it->second.order;
        if (pending_order != 0) order = pending_order;
        add_bond(it->second.atom, *prev, order);
        rings.erase(it);
      }
      pending_order = 0;
      ++pos;
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      fail("MalformedRecord", "whitespace inside record");
    }
    std::string symbol = detail::read_element_token(text, pos);
    int index = g.atom_count();
    g.atoms.push_back(symbol);
    if (prev) add_bond(*prev, index, pending_order == 0 ? 1 : pending_order);
    else if (pending_order != 0) fail("MalformedRecord", "leading bond symbol");
    pending_order = 0;
    prev = index;
  }
  if (!open_stack.empty()) fail("UnbalancedParen", "unclosed '('");
  if (!rings.empty()) fail("UnclosedRing", "dangling ring-closure digit");
  if (pending_order != 0) fail("MalformedRecord", "trailing bond symbol");
  if (g.atoms.empty()) fail("MalformedRecord", "empty record");
  std::sort(g.bonds.begin(), g.bonds.end());
  validate_structure(g);
  return g;
}

enum class MolFormat { kJsonl, kSmilesSubset };

/// Parse one corpus record in the requested format.
inline MolGraph parse_molecule(const std::string& text, MolFormat format) {
  if (format == MolFormat::kSmilesSubset) return parse_smiles_subset(text);
  nlohmann::json rec = nlohmann::json::parse(text, nullptr, false);
  if (rec.is_discarded()) fail("MalformedRecord", "invalid json");
  return from_json_record(rec);
}

// ---------------------------------------------------------------------------
// Validity

struct ValenceViolation {
  int atom = 0;
  int used = 0;
  std::vector<int> allowed;
};

struct ValidityReport {
  bool is_valid = false;
  bool is_connected = false;
  std::vector<ValenceViolation> violations;
};

inline int component_count(const MolGraph& g) {
  int n = g.atom_count();
  if (n == 0) return 0;
  std::vector<int> comp(n, -1);
  auto adj = adjacency(g);
  int count = 0;
  for (int s = 0; s < n; ++s) {
    if (comp[s] >= 0) continue;
    std::vector<int> stack{s};
    comp[s] = count;
    while (!stack.empty()) {
      int v = stack.back();
      stack.pop_back();
      for (auto [w, bi] : adj[v]) {
        if (comp[w] < 0) {
          comp[w] = count;
          stack.push_back(w);
        }
      }
    }
    ++count;
  }
  return count;
}

/// Valence check: an atom violates iff its summed incident bond order exceeds
/// its maximum allowed valence ("*" is unconstrained). Validity additionally
/// requires the graph to be connected.
inline ValidityReport check_validity(const MolGraph& g) {
  ValidityReport report;
  std::vector<int> used(g.atoms.size(), 0);
  for (const auto& b : g.bonds) {
    used[b.i] += b.order;
    used[b.j] += b.order;
  }
  for (int a = 0; a < g.atom_count(); ++a) {
    const auto& allowed = allowed_valences(g.atoms[a]);
    if (allowed.empty()) continue;  // wildcard
    int max_allowed = *std::max_element(allowed.begin(), allowed.end());
    if (used[a] > max_allowed) report.violations.push_back({a, used[a], allowed});
  }
  report.is_connected = component_count(g) == 1;
  report.is_valid = report.violations.empty() && report.is_connected;
  return report;
}

// ---------------------------------------------------------------------------
// Ring analysis

/// Indices of bonds lying on at least one cycle (non-bridge bonds).
inline std::vector<int> ring_bond_indices(const MolGraph& g) {
  int n = g.atom_count();
  auto adj = adjacency(g);
  std::vector<int> disc(n, -1), low(n, 0);
  std::vector<bool> is_bridge(g.bonds.size(), false);
  int timer = 0;
  // Iterative DFS bridge finding.
  struct Frame { int v; int parent_edge; std::size_t next; };
  for (int s = 0; s < n; ++s) {
    if (disc[s] >= 0) continue;
    std::vector<Frame> stack{{s, -1, 0}};
    disc[s] = low[s] = timer++;
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next < adj[f.v].size()) {
        auto [w, bi] = adj[f.v][f.next++];
        if (bi == f.parent_edge) continue;
        if (disc[w] < 0) {
          disc[w] = low[w] = timer++;
          stack.push_back({w, bi, 0});
        } else {
          low[f.v] = std::min(low[f.v], disc[w]);
        }
      } else {
        int v = f.v;
        int pe = f.parent_edge;
        stack.pop_back();
        if (!stack.empty()) {
          int u = stack.back().v;
          low[u] = std::min(low[u], low[v]);
          if (low[v] > disc[u]) is_bridge[pe] = true;
        }
      }
    }
  }
  std::vector<int> out;
  for (int bi = 0; bi < g.bond_count(); ++bi) {
    if (!is_bridge[bi]) out.push_back(bi);
  }
  return out;
}

/// Fused ring systems: connected components of the ring-bond subgraph,
/// returned as sorted atom-index sets.
inline std::vector<std::vector<int>> ring_systems(const MolGraph& g) {
  auto ring_bonds = ring_bond_indices(g);
  std::map<int, std::vector<std::pair<int, int>>> adj;  // atom -> (atom, bond)
  for (int bi : ring_bonds) {
    adj[g.bonds[bi].i].push_back({g.bonds[bi].j, bi});
    adj[g.bonds[bi].j].push_back({g.bonds[bi].i, bi});
  }
  std::set<int> unvisited;
  for (const auto& [v, _] : adj) unvisited.insert(v);
  std::vector<std::vector<int>> systems;
  while (!unvisited.empty()) {
    int start = *unvisited.begin();
    std::vector<int> stack{start};
    std::vector<int> atoms;
    unvisited.erase(start);
    while (!stack.empty()) {
      int v = stack.back();
      stack.pop_back();
      atoms.push_back(v);
      for (auto [w, bi] : adj[v]) {
        if (unvisited.erase(w)) stack.push_back(w);
      }
    }
    std::sort(atoms.begin(), atoms.end());
    systems.push_back(std::move(atoms));
  }
  std::sort(systems.begin(), systems.end());
  return systems;
}

/// Induced subgraph on the given (sorted) atom set; bond endpoints are
/// renumbered to positions within the set.
inline MolGraph induced_subgraph(const MolGraph& g, const std::vector<int>& atoms) {
  MolGraph sub;
  std::map<int, int> local;
  for (int a : atoms) {
    local[a] = sub.atom_count();
    sub.atoms.push_back(g.atoms[a]);
  }
  for (const auto& b : g.bonds) {
    auto it = local.find(b.i);
    auto jt = local.find(b.j);
    if (it != local.end() && jt != local.end()) {
      sub.bonds.push_back({it->second, jt->second, b.order});
    }
  }
  std::sort(sub.bonds.begin(), sub.bonds.end());
  return sub;
}

// ---------------------------------------------------------------------------
// Descriptors

inline constexpr int kDescriptorSize = 8;

/// Fixed-order descriptor vector:
/// [atoms, heteroatoms, rings, #order1, #order2, #order3, wildcards, mean degree]
inline std::array<double, kDescriptorSize> descriptors(const MolGraph& g) {
  std::array<double, kDescriptorSize> d{};
  d[0] = g.atom_count();
  for (const auto& a : g.atoms) {
    if (a != "C" && a != "*") d[1] += 1.0;
    if (a == "*") d[6] += 1.0;
  }
  d[2] = g.bond_count() - g.atom_count() + component_count(g);  // cycle rank
  for (const auto& b : g.bonds) d[2 + b.order] += 1.0;
  if (!g.atoms.empty()) d[7] = 2.0 * g.bond_count() / g.atom_count();
  return d;
}

inline int ring_count(const MolGraph& g) {
  return g.bond_count() - g.atom_count() + component_count(g);
}

// ---------------------------------------------------------------------------
// Canonical labeling (individualization-refinement).
//
// Produces an atom order such that isomorphic graphs serialize identically.
// Complete (no automorphism pruning); fine for desk-scale molecules.

namespace detail {

inline std::vector<int> refine_colors(const MolGraph& g, std::vector<int> colors) {
  auto adj = adjacency(g);
  int n = g.atom_count();
  while (true) {
    // Signature: own color plus sorted (bond order, neighbor color) multiset.
    std::vector<std::vector<int>> sig(n);
    for (int v = 0; v < n; ++v) {
      sig[v].push_back(colors[v]);
      std::vector<std::pair<int, int>> nb;
      for (auto [w, bi] : adj[v]) nb.push_back({g.bonds[bi].order, colors[w]});
      std::sort(nb.begin(), nb.end());
      for (auto [o, c] : nb) {
        sig[v].push_back(o);
        sig[v].push_back(c);
      }
    }
    std::vector<std::vector<int>> uniq = sig;
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    std::vector<int> next(n);
    for (int v = 0; v < n; ++v) {
      next[v] = static_cast<int>(
          std::lower_bound(uniq.begin(), uniq.end(), sig[v]) - uniq.begin());
    }
    if (next == colors) return colors;
    colors = std::move(next);
  }
}

inline std::string serialize_with_order(const MolGraph& g, const std::vector<int>& order) {
  // order[new_pos] = old_index
  std::vector<int> pos(g.atom_count());
  for (int p = 0; p < g.atom_count(); ++p) pos[order[p]] = p;
  MolGraph out;
  for (int p = 0; p < g.atom_count(); ++p) out.atoms.push_back(g.atoms[order[p]]);
  for (const auto& b : g.bonds) {
    int i = pos[b.i], j = pos[b.j];
    out.bonds.push_back({std::min(i, j), std::max(i, j), b.order});
  }
  std::sort(out.bonds.begin(), out.bonds.end());
  return to_jsonl(out);
}

inline void canonical_search(const MolGraph& g, std::vector<int> colors,
                             std::string& best, std::vector<int>& best_order) {
  colors = refine_colors(g, colors);
  int n = g.atom_count();
  // First non-singleton color class, by color value.
  std::map<int, std::vector<int>> classes;
  for (int v = 0; v < n; ++v) classes[colors[v]].push_back(v);
  const std::vector<int>* cell = nullptr;
  for (const auto& [c, members] : classes) {
    if (members.size() > 1) { cell = &members; break; }
  }
  if (cell == nullptr) {
    std::vector<int> order(n);
    std::vector<std::pair<int, int>> by_color;
    for (int v = 0; v < n; ++v) by_color.push_back({colors[v], v});
    std::sort(by_color.begin(), by_color.end());
    for (int p = 0; p < n; ++p) order[p] = by_color[p].second;
    std::string s = serialize_with_order(g, order);
    if (best.empty() || s < best) {
      best = std::move(s);
      best_order = std::move(order);
    }
    return;
  }
  for (int v : *cell) {
    std::vector<int> branched = colors;
    for (int w = 0; w < n; ++w) {
      branched[w] = 2 * branched[w] + 1;  // make room below
    }
    branched[v] -= 1;  // individualize v just below its class
    canonical_search(g, branched, best, best_order);
  }
}

}  // namespace detail

/// Canonical atom order: order[new_pos] = old index. Isomorphic graphs map to
/// the same canonical serialization.
inline std::vector<int> canonical_order(const MolGraph& g) {
  if (g.atoms.empty()) return {};
  std::vector<std::string> uniq = g.atoms;
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  std::vector<int> colors(g.atom_count());
  for (int v = 0; v < g.atom_count(); ++v) {
    colors[v] = static_cast<int>(
        std::lower_bound(uniq.begin(), uniq.end(), g.atoms[v]) - uniq.begin());
  }
  std::string best;
  std::vector<int> best_order;
  detail::canonical_search(g, colors, best, best_order);
  return best_order;
}

/// Graph permuted into canonical order.
inline MolGraph canonical_graph(const MolGraph& g) {
  auto order = canonical_order(g);
  std::vector<int> pos(g.atom_count());
  for (int p = 0; p < g.atom_count(); ++p) pos[order[p]] = p;
  MolGraph out;
  for (int p = 0; p < g.atom_count(); ++p) out.atoms.push_back(g.atoms[order[p]]);
  for (const auto& b : g.bonds) {
    int i = pos[b.i], j = pos[b.j];
    out.bonds.push_back({std::min(i, j), std::max(i, j), b.order});
  }
  std::sort(out.bonds.begin(), out.bonds.end());
  return out;
}

/// Order-invariant serialization; equal strings iff graphs are isomorphic.
inline std::string canonical_jsonl(const MolGraph& g) {
  if (g.atoms.empty()) return to_jsonl(g);
  return to_jsonl(canonical_graph(g));
}

inline bool isomorphic(const MolGraph& a, const MolGraph& b) {
  return canonical_jsonl(a) == canonical_jsonl(b);
}

// ---------------------------------------------------------------------------
// SMILES-subset writer (DFS with branches and ring-closure digits).

namespace detail {

struct SmilesEmit {
  const MolGraph* g;
  const std::vector<std::vector<int>>* children;
  const std::vector<int>* parent_bond;
  const std::vector<std::vector<std::pair<int, int>>>* closures;  // atom -> (digit, bond)
  std::string out;

  static std::string bond_symbol(int order) {
    return order == 2 ? "=" : order == 3 ? "#" : "";
  }

  void atom(int v) {
    if ((*parent_bond)[v] >= 0) out += bond_symbol(g->bonds[(*parent_bond)[v]].order);
    out += g->atoms[v];
    for (auto [digit, bi] : (*closures)[v]) {
      out += bond_symbol(g->bonds[bi].order);
      out += static_cast<char>('0' + digit);
    }
  }

  void subtree(int v) {
    atom(v);
    const auto& kids = (*children)[v];
    for (std::size_t k = 0; k < kids.size(); ++k) {
      bool last = k + 1 == kids.size();
      if (!last) out += '(';
      subtree(kids[k]);
      if (!last) out += ')';
    }
  }
};

}  // namespace detail

inline std::string to_smiles_subset(const MolGraph& g) {
  if (g.atoms.empty()) fail("MalformedRecord", "cannot write empty graph");
  if (component_count(g) != 1) fail("MalformedRecord", "cannot write disconnected graph");
  auto adj = adjacency(g);
  int n = g.atom_count();

  // Spanning tree via DFS; non-tree bonds become ring closures.
  std::vector<bool> visited(n, false);
  std::vector<bool> tree_bond(g.bonds.size(), false);
  std::vector<std::vector<int>> children(n);
  std::vector<int> parent_bond(n, -1);
  visited[0] = true;
  std::vector<std::pair<int, std::size_t>> dfs{{0, 0}};
  while (!dfs.empty()) {
    auto& [v, next] = dfs.back();
    if (next < adj[v].size()) {
      auto [w, bi] = adj[v][next++];
      if (!visited[w]) {
        visited[w] = true;
        tree_bond[bi] = true;
        parent_bond[w] = bi;
        children[v].push_back(w);
        dfs.push_back({w, 0});
      }
    } else {
      dfs.pop_back();
    }
  }

  std::vector<std::vector<std::pair<int, int>>> closures(n);
  int next_digit = 1;
  for (int bi = 0; bi < g.bond_count(); ++bi) {
    if (tree_bond[bi]) continue;
    if (next_digit > 9) fail("MalformedRecord", "more than 9 simultaneous ring closures");
    closures[g.bonds[bi].i].push_back({next_digit, bi});
    closures[g.bonds[bi].j].push_back({next_digit, bi});
    ++next_digit;
  }

  detail::SmilesEmit emit{&g, &children, &parent_bond, &closures, {}};
  emit.subtree(0);
  return emit.out;
}

}  // namespace motifdiff
