// SPDX-License-Identifier: Apache-2.0
//
// Generated-set evaluation: validity rate, fragment-based diversity and
// similarity, descriptor-space Frechet distance, and per-task MAE/accuracy
// against the requested conditions.
#pragma once

#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "motifdiff/molgraph.hpp"
#include "motifdiff/oracle.hpp"

namespace motifdiff {

inline constexpr int kFragmentBuckets = 512;

/// Hashed count vector over all connected subgraphs of at most 3 atoms.
inline Eigen::VectorXd fragment_vector(const MolGraph& g) {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(kFragmentBuckets);
  auto add = [&](const std::vector<int>& atoms) {
    std::string canon = canonical_jsonl(induced_subgraph(g, atoms));
    v[fnv1a64(canon) % kFragmentBuckets] += 1.0;
  };
  for (int a = 0; a < g.atom_count(); ++a) add({a});
  for (const auto& b : g.bonds) add({b.i, b.j});
  auto adj = adjacency(g);
  std::set<std::vector<int>> triples;
  for (const auto& b : g.bonds) {
    for (int anchor : {b.i, b.j}) {
      for (auto [k, bi] : adj[anchor]) {
        if (k == b.i || k == b.j) continue;
        std::vector<int> t{b.i, b.j, k};
        std::sort(t.begin(), t.end());
        triples.insert(std::move(t));
      }
    }
  }
  for (const auto& t : triples) add(t);
  return v;
}

inline double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

/// Frechet distance between Gaussian fits of two descriptor samples:
/// |mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2}). The matrix square root is
/// taken through eigendecompositions of symmetrized products with negative
/// eigenvalues clamped at zero.
inline double frechet_descriptor_distance(const std::vector<std::array<double, 8>>& a,
                                          const std::vector<std::array<double, 8>>& b) {
  auto fit = [](const std::vector<std::array<double, 8>>& rows) {
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(8);
    for (const auto& r : rows) {
      for (int k = 0; k < 8; ++k) mu[k] += r[k];
    }
    mu /= static_cast<double>(rows.size());
    Eigen::MatrixXd sigma = Eigen::MatrixXd::Zero(8, 8);
    for (const auto& r : rows) {
      Eigen::VectorXd d(8);
      for (int k = 0; k < 8; ++k) d[k] = r[k] - mu[k];
      sigma += d * d.transpose();
    }
    sigma /= static_cast<double>(rows.size());
    return std::pair{mu, sigma};
  };
  auto sqrtm = [](const Eigen::MatrixXd& s) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (s + s.transpose()));
    Eigen::VectorXd lam = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return Eigen::MatrixXd(es.eigenvectors() * lam.asDiagonal() *
                           es.eigenvectors().transpose());
  };
  auto [mu1, s1] = fit(a);
  auto [mu2, s2] = fit(b);
  Eigen::MatrixXd c = sqrtm(s1);
  Eigen::MatrixXd inner = c * s2 * c;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()));
  double trace_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  double d = (mu1 - mu2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * trace_sqrt;
  return std::max(0.0, d);
}

struct TaskMetric {
  std::string task;
  TaskKind kind = TaskKind::kRegression;
  double value = 0.0;  // MAE (regression, normalized units) or accuracy
  int count = 0;       // valid samples contributing
};

struct EvalReport {
  double validity = 0.0;
  double diversity = 0.0;
  double similarity = 0.0;
  double distance = 0.0;
  std::vector<TaskMetric> per_task;
  int sample_count = 0;
  double uniqueness = 0.0;
  double novelty = 0.0;
};

/// Scores a generated set against a reference set. `generated[k]` is the
/// decode result for `conditions[k]` (nullopt = decode failure). Invalid
/// samples count against validity and are excluded from property metrics.
inline EvalReport evaluate_set(const std::vector<std::optional<MolGraph>>& generated,
                               const std::vector<MolGraph>& reference,
                               const std::vector<Condition>& conditions,
                               const TaskRegistry& registry) {
  if (generated.empty() || reference.empty()) fail("EmptySet", "nothing to evaluate");
  if (generated.size() != conditions.size()) {
    fail("LengthMismatch", "conditions must align with generated samples");
  }

  EvalReport report;
  report.sample_count = static_cast<int>(generated.size());

  std::vector<const MolGraph*> valid;
  std::vector<bool> is_valid(generated.size(), false);
  for (std::size_t k = 0; k < generated.size(); ++k) {
    if (generated[k] && check_validity(*generated[k]).is_valid) {
      is_valid[k] = true;
      valid.push_back(&*generated[k]);
    }
  }
  report.validity = static_cast<double>(valid.size()) / generated.size();

  // Fragment vectors over the valid set.
  std::vector<Eigen::VectorXd> frags;
  Eigen::VectorXd gen_total = Eigen::VectorXd::Zero(kFragmentBuckets);
  for (const auto* g : valid) {
    frags.push_back(fragment_vector(*g));
    gen_total += frags.back();
  }
  Eigen::VectorXd ref_total = Eigen::VectorXd::Zero(kFragmentBuckets);
  for (const auto& g : reference) ref_total += fragment_vector(g);

  if (frags.size() >= 2) {
    double sim_sum = 0.0;
    int pairs = 0;
    for (std::size_t i = 0; i < frags.size(); ++i) {
      for (std::size_t j = i + 1; j < frags.size(); ++j) {
        sim_sum += cosine(frags[i], frags[j]);
        ++pairs;
      }
    }
    report.diversity = 1.0 - sim_sum / pairs;
  }
  report.similarity = valid.empty() ? 0.0 : cosine(gen_total, ref_total);

  if (!valid.empty()) {
    std::vector<std::array<double, 8>> gen_desc, ref_desc;
    for (const auto* g : valid) gen_desc.push_back(descriptors(*g));
    for (const auto& g : reference) ref_desc.push_back(descriptors(g));
    report.distance = frechet_descriptor_distance(gen_desc, ref_desc);
  }

  // Per-task property metrics over valid samples, in registry order.
  for (const auto& task : registry.tasks()) {
    TaskMetric metric;
    metric.task = task.id;
    metric.kind = task.kind;
    double acc = 0.0;
    for (std::size_t k = 0; k < generated.size(); ++k) {
      if (!is_valid[k] || conditions[k].task != task.id) continue;
      double out = evaluate(*generated[k], task);
      if (task.kind == TaskKind::kRegression) {
        acc += discrepancy(out, conditions[k].target, task);
      } else {
        double predicted = out >= 0.5 ? 1.0 : 0.0;
        acc += predicted == conditions[k].target ? 1.0 : 0.0;
      }
      ++metric.count;
    }
    metric.value = metric.count > 0 ? acc / metric.count : 0.0;
    report.per_task.push_back(std::move(metric));
  }

  // Uniqueness and novelty by canonical serialization (auxiliary fields).
  if (!valid.empty()) {
    std::set<std::string> ref_canon;
    for (const auto& g : reference) ref_canon.insert(canonical_jsonl(g));
    std::set<std::string> seen;
    int novel = 0;
    for (const auto* g : valid) {
      std::string canon = canonical_jsonl(*g);
      if (!ref_canon.count(canon)) ++novel;
      seen.insert(std::move(canon));
    }
    report.uniqueness = static_cast<double>(seen.size()) / valid.size();
    report.novelty = static_cast<double>(novel) / valid.size();
  }
  return report;
}

// ---------------------------------------------------------------------------
// Emission: one structured-text document and one CSV row with fixed order.

inline std::string report_to_text(const EvalReport& r) {
  std::ostringstream os;
  os.precision(6);
  os << "validity: " << r.validity << "\n"
     << "diversity: " << r.diversity << "\n"
     << "similarity: " << r.similarity << "\n"
     << "distance: " << r.distance << "\n";
  for (const auto& m : r.per_task) {
    os << (m.kind == TaskKind::kRegression ? "mae" : "accuracy") << "[" << m.task
       << "]: " << m.value << " (n=" << m.count << ")\n";
  }
  os << "samples: " << r.sample_count << "\n"
     << "uniqueness: " << r.uniqueness << "\n"
     << "novelty: " << r.novelty << "\n";
  return os.str();
}

inline std::string report_to_csv(const EvalReport& r) {
  std::ostringstream header, row;
  header << "validity,diversity,similarity,distance";
  row.precision(10);
  row << r.validity << "," << r.diversity << "," << r.similarity << "," << r.distance;
  for (const auto& m : r.per_task) {
    header << "," << (m.kind == TaskKind::kRegression ? "mae_" : "accuracy_") << m.task;
    row << "," << m.value;
  }
  header << ",samples,uniqueness,novelty";
  row << "," << r.sample_count << "," << r.uniqueness << "," << r.novelty;
  return header.str() + "\n" + row.str() + "\n";
}

}  // namespace motifdiff
