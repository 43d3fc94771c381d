#pragma once

#include "stm/tensor_store.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace stm {

// Checkpoint-shaped parameter delta relative to a base model.
struct TaskVector {
  Checkpoint delta;
  std::string base_id;
};

enum class MergeMethod { kLinear, kTaskArithmetic, kTies };

std::string to_string(MergeMethod m);
MergeMethod merge_method_from_string(const std::string& s);

// Method tag plus per-expert weight coefficients; densities apply to Ties
// only. Weights are free amplitudes in [0,1] and are never renormalized.
struct MergeRecipe {
  MergeMethod method = MergeMethod::kLinear;
  std::vector<std::string> experts;
  std::vector<double> weights;
  std::vector<double> densities;  // empty unless method == kTies

  void validate() const;
  std::string to_json() const;
  static MergeRecipe from_json(const std::string& text);
  static MergeRecipe load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  // Compact deterministic label, also used for lexicographic tie-breaks.
  std::string label() const;
};

bool operator<(const MergeRecipe& a, const MergeRecipe& b);
bool operator==(const MergeRecipe& a, const MergeRecipe& b);

// Per-tensor entry-wise sign in {-1, 0, +1}, shape-compatible with the base.
struct SignMask {
  std::map<std::string, std::vector<signed char>> signs;
};

// Eq.-style elementwise sum over experts. Weights are used as given.
Checkpoint linear_merge(const std::vector<const Checkpoint*>& experts,
                        const std::vector<double>& weights);

TaskVector task_vector(const Checkpoint& expert, const Checkpoint& base);

Checkpoint task_arithmetic_merge(const Checkpoint& base,
                                 const std::vector<const TaskVector*>& taus,
                                 const std::vector<double>& weights);

// Keeps the ceil(density * n) largest-magnitude entries per tensor, zeroing
// the rest. Magnitude ties keep the lower flat index first.
TaskVector trim(const TaskVector& tau, double density);

// Entry-wise sign of the weighted sum across trimmed task vectors; exact
// zero sums elect 0.
SignMask elect_sign(const std::vector<const TaskVector*>& trimmed,
                    const std::vector<double>& weights);

Checkpoint ties_merge(const Checkpoint& base,
                      const std::vector<const TaskVector*>& taus,
                      const std::vector<double>& weights,
                      const std::vector<double>& densities);

// Dispatches a recipe against a pool of named experts. Accumulation order is
// sorted by expert id, so jointly permuting a recipe leaves the output
// bit-identical. Zero-weight experts are skipped entirely. The recipe is
// recorded in the output checkpoint metadata.
Checkpoint apply_recipe(const MergeRecipe& recipe,
                        const std::map<std::string, const Checkpoint*>& experts,
                        const Checkpoint* base);

}  // namespace stm
