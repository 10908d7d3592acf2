// SPDX-License-Identifier: Apache-2.0
//
// Deterministic synthetic property oracles: descriptor-backed evaluators,
// target normalization, discrepancy and reward shaping.
#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "motifdiff/common.hpp"
#include "motifdiff/molgraph.hpp"

namespace motifdiff {

enum class TaskKind { kRegression, kClassification };

enum class DescriptorKind { kRingCount, kHeteroatomFraction, kSizeScore };

struct TaskSpec {
  std::string id;
  TaskKind kind = TaskKind::kRegression;
  DescriptorKind descriptor = DescriptorKind::kRingCount;
  double mean = 0.0;   // regression normalization, fit on the training split
  double std = 1.0;
  double sigma = 0.5;      // reward shaping width, in normalized units
  double theta_cls = 0.0;  // classification threshold on the descriptor
  double kappa = 2.0;      // classification logistic slope
};

/// One conditional generation request: task identity plus target value
/// (real for regression, 0/1 for classification).
struct Condition {
  std::string task;
  double target = 0.0;

  friend bool operator==(const Condition&, const Condition&) = default;
};

inline double descriptor_value(const MolGraph& g, DescriptorKind kind) {
  switch (kind) {
    case DescriptorKind::kRingCount:
      return static_cast<double>(ring_count(g));
    case DescriptorKind::kHeteroatomFraction: {
      if (g.atoms.empty()) return 0.0;
      double hetero = 0.0;
      for (const auto& a : g.atoms) {
        if (a != "C" && a != "*") hetero += 1.0;
      }
      return hetero / static_cast<double>(g.atom_count());
    }
    case DescriptorKind::kSizeScore:
      return static_cast<double>(g.atom_count()) + 2.0 * ring_count(g);
  }
  fail("UnknownTask", "bad descriptor kind");
}

/// Oracle output: the raw descriptor for regression, a logistic probability
/// for classification.
inline double evaluate(const MolGraph& g, const TaskSpec& task) {
  double d = descriptor_value(g, task.descriptor);
  if (task.kind == TaskKind::kRegression) return d;
  return 1.0 / (1.0 + std::exp(-task.kappa * (d - task.theta_cls)));
}

/// Normalized absolute discrepancy between an oracle output and the target.
inline double discrepancy(double oracle_output, double target, const TaskSpec& task) {
  if (task.kind == TaskKind::kRegression) {
    return std::abs(oracle_output - target) / task.std;
  }
  if (target != 0.0 && target != 1.0) {
    fail("KindMismatch", "classification target must be 0 or 1");
  }
  return std::abs(oracle_output - target);
}

/// Reward shaping g_k(d): Gaussian falloff for regression, 1 - d for
/// classification (the probability assigned to the target label).
inline double shape(double d, const TaskSpec& task) {
  if (task.kind == TaskKind::kRegression) {
    double r = d / task.sigma;
    return std::exp(-r * r);
  }
  return 1.0 - d;
}

// ---------------------------------------------------------------------------
// Task registry

class TaskRegistry {
 public:
  void add(TaskSpec task) {
    if (index_.count(task.id)) fail("MalformedRecord", "duplicate task id " + task.id);
    index_[task.id] = static_cast<int>(tasks_.size());
    tasks_.push_back(std::move(task));
  }

  const std::vector<TaskSpec>& tasks() const { return tasks_; }
  bool has(const std::string& id) const { return index_.count(id) > 0; }

  const TaskSpec& get(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) fail("UnknownTask", "task not registered: " + id);
    return tasks_[it->second];
  }

  TaskSpec& get_mutable(const std::string& id) {
    auto it = index_.find(id);
    if (it == index_.end()) fail("UnknownTask", "task not registered: " + id);
    return tasks_[it->second];
  }

 private:
  std::vector<TaskSpec> tasks_;
  std::map<std::string, int> index_;
};

inline constexpr int kTaskRegistryFormatVersion = 1;

inline std::string task_kind_name(TaskKind k) {
  return k == TaskKind::kRegression ? "regression" : "classification";
}

inline TaskKind task_kind_from(const std::string& s) {
  if (s == "regression") return TaskKind::kRegression;
  if (s == "classification") return TaskKind::kClassification;
  fail("MalformedRecord", "unknown task kind " + s);
}

inline std::string descriptor_name(DescriptorKind k) {
  switch (k) {
    case DescriptorKind::kRingCount: return "ring_count";
    case DescriptorKind::kHeteroatomFraction: return "heteroatom_fraction";
    case DescriptorKind::kSizeScore: return "size_score";
  }
  return "ring_count";
}

inline DescriptorKind descriptor_from(const std::string& s) {
  if (s == "ring_count") return DescriptorKind::kRingCount;
  if (s == "heteroatom_fraction") return DescriptorKind::kHeteroatomFraction;
  if (s == "size_score") return DescriptorKind::kSizeScore;
  fail("MalformedRecord", "unknown descriptor " + s);
}

inline std::string registry_to_json(const TaskRegistry& registry) {
  nlohmann::json doc;
  doc["format_version"] = kTaskRegistryFormatVersion;
  auto arr = nlohmann::json::array();
  for (const auto& t : registry.tasks()) {
    arr.push_back({{"id", t.id},
                   {"kind", task_kind_name(t.kind)},
                   {"descriptor", descriptor_name(t.descriptor)},
                   {"mean", t.mean},
                   {"std", t.std},
                   {"sigma", t.sigma},
                   {"theta_cls", t.theta_cls},
                   {"kappa", t.kappa}});
  }
  doc["tasks"] = arr;
  return doc.dump(2);
}

inline TaskRegistry registry_from_json(const std::string& text) {
  nlohmann::json doc = nlohmann::json::parse(text, nullptr, false);
  if (doc.is_discarded() || !doc.is_object() || !doc.contains("tasks")) {
    fail("CorruptFile", "task registry is not valid json");
  }
  if (doc.value("format_version", -1) != kTaskRegistryFormatVersion) {
    fail("VersionMismatch", "unsupported task registry version");
  }
  TaskRegistry registry;
  for (const auto& t : doc["tasks"]) {
    TaskSpec spec;
    spec.id = t.at("id").get<std::string>();
    spec.kind = task_kind_from(t.at("kind").get<std::string>());
    spec.descriptor = descriptor_from(t.at("descriptor").get<std::string>());
    spec.mean = t.value("mean", 0.0);
    spec.std = t.value("std", 1.0);
    spec.sigma = t.value("sigma", 0.5);
    spec.theta_cls = t.value("theta_cls", 0.0);
    spec.kappa = t.value("kappa", 2.0);
    if (spec.std <= 0.0) fail("MalformedRecord", "task std must be positive");
    if (spec.sigma <= 0.0) fail("MalformedRecord", "task sigma must be positive");
    registry.add(std::move(spec));
  }
  return registry;
}

}  // namespace motifdiff
