// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <set>

#include <catch_amalgamated.hpp>

#include "motifdiff/molgraph.hpp"

using namespace motifdiff;

namespace {

MolGraph smiles(const std::string& s) { return parse_molecule(s, MolFormat::kSmilesSubset); }

// Independent cycle-rank oracle: BFS spanning forest, count non-tree edges.
int brute_force_cycle_basis_size(const MolGraph& g) {
  int n = g.atom_count();
  std::vector<int> comp(n, -1);
  auto adj = adjacency(g);
  int tree_edges = 0;
  int components = 0;
  for (int s = 0; s < n; ++s) {
    if (comp[s] >= 0) continue;
    ++components;
    std::vector<int> queue{s};
    comp[s] = s;
    while (!queue.empty()) {
      int v = queue.back();
      queue.pop_back();
      for (auto [w, bi] : adj[v]) {
        if (comp[w] < 0) {
          comp[w] = s;
          ++tree_edges;
          queue.push_back(w);
        }
      }
    }
  }
  (void)components;
  return g.bond_count() - tree_edges;
}

// Random structurally-valid graph (not necessarily valence-valid).
MolGraph random_graph(Rng& rng, int max_atoms = 8) {
  const auto& symbols = element_symbols();
  MolGraph g;
  int n = 1 + rng.uniform_int(max_atoms);
  for (int i = 0; i < n; ++i) g.atoms.push_back(symbols[rng.uniform_int((int)symbols.size())]);
  std::set<std::pair<int, int>> used;
  // random spanning tree, then a few extra edges
  for (int i = 1; i < n; ++i) {
    int j = rng.uniform_int(i);
    g.bonds.push_back({j, i, 1 + rng.uniform_int(3)});
    used.insert({j, i});
  }
  int extra = rng.uniform_int(3);
  for (int e = 0; e < extra && n >= 2; ++e) {
    int i = rng.uniform_int(n), j = rng.uniform_int(n);
    if (i == j) continue;
    auto key = std::minmax(i, j);
    if (used.count({key.first, key.second})) continue;
    used.insert({key.first, key.second});
    g.bonds.push_back({key.first, key.second, 1 + rng.uniform_int(3)});
  }
  std::sort(g.bonds.begin(), g.bonds.end());
  return g;
}

MolGraph permute_graph(const MolGraph& g, const std::vector<int>& order) {
  // order[new_pos] = old index
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

}  // namespace

TEST_CASE("smiles subset parsing") {
  SECTION("single atom") {
    MolGraph g = smiles("C");
    REQUIRE(g.atoms == std::vector<std::string>{"C"});
    REQUIRE(g.bonds.empty());
  }
  SECTION("double bond") {
    MolGraph g = smiles("O=O");
    REQUIRE(g.atoms == (std::vector<std::string>{"O", "O"}));
    REQUIRE(g.bonds == (std::vector<Bond>{{0, 1, 2}}));
  }
  SECTION("ring closure") {
    MolGraph g = smiles("C1CC1");
    REQUIRE(g.atom_count() == 3);
    REQUIRE(g.bonds == (std::vector<Bond>{{0, 1, 1}, {0, 2, 1}, {1, 2, 1}}));
  }
  SECTION("branches") {
    MolGraph g = smiles("CC(=O)C");
    REQUIRE(g.atom_count() == 4);
    REQUIRE(g.bonds == (std::vector<Bond>{{0, 1, 1}, {1, 2, 2}, {1, 3, 1}}));
  }
  SECTION("two-letter elements and wildcard") {
    MolGraph g = smiles("ClC(Br)(I)*");
    REQUIRE(g.atoms == (std::vector<std::string>{"Cl", "C", "Br", "I", "*"}));
  }
  SECTION("triple bond") {
    MolGraph g = smiles("C#N");
    REQUIRE(g.bonds == (std::vector<Bond>{{0, 1, 3}}));
  }
  SECTION("ring bond order on either side") {
    MolGraph g = smiles("C=1CCC=1");
    auto ring_bond = std::find_if(g.bonds.begin(), g.bonds.end(),
                                  [](const Bond& b) { return b.i == 0 && b.j == 3; });
    REQUIRE(ring_bond != g.bonds.end());
    CHECK(ring_bond->order == 2);
    REQUIRE(smiles("C1CCC=1") == smiles("C=1CCC1"));
  }
}

TEST_CASE("smiles subset error categories") {
  auto category_of = [](const std::string& s) -> std::string {
    try {
      parse_molecule(s, MolFormat::kSmilesSubset);
    } catch (const Error& e) {
      return e.category();
    }
    return "";
  };
  CHECK(category_of("c1ccccc1") == "UnsupportedToken");
  CHECK(category_of("C[NH2]") == "UnsupportedToken");
  CHECK(category_of("C1CC") == "UnclosedRing");
  CHECK(category_of("C(CC") == "UnbalancedParen");
  CHECK(category_of("CC)") == "UnbalancedParen");
  CHECK(category_of("C=") == "MalformedRecord");
  CHECK(category_of("") == "MalformedRecord");
  CHECK(category_of("C==C") == "MalformedRecord");
}

TEST_CASE("jsonl parsing and roundtrip") {
  MolGraph g = parse_molecule(R"({"atoms":["C","N"],"bonds":[[0,1,3]]})", MolFormat::kJsonl);
  REQUIRE(g.atoms == (std::vector<std::string>{"C", "N"}));
  REQUIRE(g.bonds == (std::vector<Bond>{{0, 1, 3}}));

  Rng rng(20240811);
  for (int trial = 0; trial < 200; ++trial) {
    MolGraph r = random_graph(rng);
    MolGraph back = parse_molecule(to_jsonl(r), MolFormat::kJsonl);
    REQUIRE(back == r);
  }

  CHECK_THROWS_AS(parse_molecule("{not json", MolFormat::kJsonl), Error);
  CHECK_THROWS_AS(parse_molecule(R"({"atoms":["C"],"bonds":[[0,0,1]]})", MolFormat::kJsonl),
                  Error);
  CHECK_THROWS_AS(parse_molecule(R"({"atoms":["Xx"],"bonds":[]})", MolFormat::kJsonl), Error);
}

TEST_CASE("validity checking") {
  SECTION("single carbon is valid") {
    auto report = check_validity(smiles("C"));
    CHECK(report.is_valid);
    CHECK(report.is_connected);
    CHECK(report.violations.empty());
  }
  SECTION("overbonded carbon") {
    MolGraph g;
    g.atoms = {"C", "F", "F", "F", "F", "F"};
    for (int i = 1; i <= 5; ++i) g.bonds.push_back({0, i, 1});
    auto report = check_validity(g);
    REQUIRE_FALSE(report.is_valid);
    REQUIRE(report.violations.size() == 1);
    CHECK(report.violations[0].atom == 0);
    CHECK(report.violations[0].used == 5);
    CHECK(report.violations[0].allowed == std::vector<int>{4});
  }
  SECTION("O=O valid, each O uses 2") {
    CHECK(check_validity(smiles("O=O")).is_valid);
  }
  SECTION("disconnected graphs are invalid") {
    MolGraph g;
    g.atoms = {"C", "C"};
    auto report = check_validity(g);
    CHECK_FALSE(report.is_valid);
    CHECK_FALSE(report.is_connected);
    CHECK(report.violations.empty());
  }
  SECTION("wildcard valence unconstrained") {
    MolGraph g;
    g.atoms = {"*", "C", "C", "C", "C", "C"};
    for (int i = 1; i <= 5; ++i) g.bonds.push_back({0, i, 1});
    CHECK(check_validity(g).is_valid);
  }
  SECTION("sulfur expanded valence") {
    MolGraph g;  // S with three double bonds: used 6, allowed up to 6
    g.atoms = {"S", "O", "O", "O"};
    for (int i = 1; i <= 3; ++i) g.bonds.push_back({0, i, 2});
    CHECK(check_validity(g).violations.empty());
  }
  SECTION("order independence under permutation") {
    Rng rng(7);
    for (int trial = 0; trial < 100; ++trial) {
      MolGraph g = random_graph(rng);
      std::vector<int> order(g.atom_count());
      for (int i = 0; i < g.atom_count(); ++i) order[i] = i;
      rng.shuffle(order);
      MolGraph p = permute_graph(g, order);
      CHECK(check_validity(g).is_valid == check_validity(p).is_valid);
    }
  }
}

TEST_CASE("ring systems") {
  SECTION("acyclic chain has none") {
    CHECK(ring_systems(smiles("CCCC")).empty());
  }
  SECTION("triangle is one system of 3") {
    auto systems = ring_systems(smiles("C1CC1"));
    REQUIRE(systems.size() == 1);
    CHECK(systems[0] == std::vector<int>{0, 1, 2});
  }
  SECTION("fused triangles form one system of 4") {
    // two triangles sharing edge (1,2)
    MolGraph g;
    g.atoms = {"C", "C", "C", "C"};
    g.bonds = {{0, 1, 1}, {0, 2, 1}, {1, 2, 1}, {1, 3, 1}, {2, 3, 1}};
    auto systems = ring_systems(g);
    REQUIRE(systems.size() == 1);
    CHECK(systems[0] == std::vector<int>{0, 1, 2, 3});
  }
  SECTION("two separate rings are two systems") {
    auto systems = ring_systems(smiles("C1CC1CC1CC1"));
    REQUIRE(systems.size() == 2);
    CHECK(systems[0].size() == 3);
    CHECK(systems[1].size() == 3);
  }
  SECTION("pendant atoms are excluded") {
    auto systems = ring_systems(smiles("CC1CC1"));
    REQUIRE(systems.size() == 1);
    CHECK(systems[0] == std::vector<int>{1, 2, 3});
  }
}

TEST_CASE("descriptors") {
  SECTION("single carbon") {
    auto d = descriptors(smiles("C"));
    std::array<double, 8> expected{1, 0, 0, 0, 0, 0, 0, 0};
    CHECK(d == expected);
  }
  SECTION("triangle") {
    auto d = descriptors(smiles("C1CC1"));
    CHECK(d[0] == 3.0);   // atoms
    CHECK(d[2] == 1.0);   // rings
    CHECK(d[3] == 3.0);   // single bonds
    CHECK(d[4] == 0.0);
    CHECK(d[5] == 0.0);
    CHECK(d[7] == 2.0);   // mean degree
  }
  SECTION("O=O") {
    auto d = descriptors(smiles("O=O"));
    CHECK(d[1] == 2.0);
    CHECK(d[3] == 0.0);
    CHECK(d[4] == 1.0);
    CHECK(d[5] == 0.0);
  }
  SECTION("ring count matches brute-force cycle basis") {
    Rng rng(99);
    for (int trial = 0; trial < 300; ++trial) {
      MolGraph g = random_graph(rng, 8);
      CHECK(ring_count(g) == brute_force_cycle_basis_size(g));
      CHECK(descriptors(g)[2] == brute_force_cycle_basis_size(g));
    }
  }
}

TEST_CASE("canonical labeling is permutation invariant") {
  Rng rng(31337);
  for (int trial = 0; trial < 200; ++trial) {
    MolGraph g = random_graph(rng, 8);
    std::vector<int> order(g.atom_count());
    for (int i = 0; i < g.atom_count(); ++i) order[i] = i;
    rng.shuffle(order);
    MolGraph p = permute_graph(g, order);
    REQUIRE(canonical_jsonl(g) == canonical_jsonl(p));
    REQUIRE(isomorphic(g, p));
  }
  // Non-isomorphic pairs must differ.
  CHECK_FALSE(isomorphic(smiles("CCO"), smiles("COC")));
  CHECK_FALSE(isomorphic(smiles("C=C"), smiles("CC")));
  CHECK(isomorphic(smiles("C(O)N"), smiles("NC(O)")));
}

TEST_CASE("smiles writer roundtrips") {
  Rng rng(5150);
  int written = 0;
  for (int trial = 0; trial < 300; ++trial) {
    MolGraph g = random_graph(rng, 8);
    if (component_count(g) != 1) continue;
    ++written;
    MolGraph back = smiles(to_smiles_subset(g));
    REQUIRE(isomorphic(g, back));
  }
  REQUIRE(written > 100);
  CHECK(to_smiles_subset(smiles("C1CC1")) == "C1CC1");
}
