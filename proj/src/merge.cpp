#include "stm/merge.hpp"

#include "stm/common.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace stm {

namespace {

using nlohmann::json;

void check_weights(const std::vector<double>& weights, std::size_t n) {
  if (weights.size() != n) {
    throw std::invalid_argument("expected " + std::to_string(n) +
                                " weights, got " + std::to_string(weights.size()));
  }
  for (double w : weights) {
    if (!(w >= 0.0 && w <= 1.0)) {
      throw std::invalid_argument("merge weight " + std::to_string(w) +
                                  " outside [0, 1]");
    }
  }
}

void check_densities(const std::vector<double>& densities, std::size_t n) {
  if (densities.size() != n) {
    throw std::invalid_argument("expected " + std::to_string(n) +
                                " densities, got " +
                                std::to_string(densities.size()));
  }
  for (double d : densities) {
    if (!(d > 0.0 && d <= 1.0)) {
      throw std::invalid_argument("density " + std::to_string(d) +
                                  " outside (0, 1]");
    }
  }
}

Tensor round_to_tensor(const std::vector<Index>& shape,
                       const Eigen::VectorXd& acc, const std::string& name) {
  Tensor t(shape, acc.cast<float>());
  if (!t.all_finite()) {
    throw std::runtime_error("merge produced non-finite values in '" + name + "'");
  }
  return t;
}

std::string format_coeff(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

}  // namespace

std::string to_string(MergeMethod m) {
  switch (m) {
    case MergeMethod::kLinear: return "linear";
    case MergeMethod::kTaskArithmetic: return "task_arithmetic";
    case MergeMethod::kTies: return "ties";
  }
  throw std::logic_error("unknown merge method");
}

MergeMethod merge_method_from_string(const std::string& s) {
  if (s == "linear") return MergeMethod::kLinear;
  if (s == "task_arithmetic") return MergeMethod::kTaskArithmetic;
  if (s == "ties") return MergeMethod::kTies;
  throw ConfigError("unknown merge method '" + s +
                    "' (expected linear|task_arithmetic|ties)");
}

void MergeRecipe::validate() const {
  if (experts.empty()) throw std::invalid_argument("recipe has no experts");
  check_weights(weights, experts.size());
  if (method == MergeMethod::kTies) {
    check_densities(densities, experts.size());
  } else if (!densities.empty()) {
    throw std::invalid_argument("densities are only valid for ties recipes");
  }
}

std::string MergeRecipe::to_json() const {
  json j;
  j["method"] = to_string(method);
  j["experts"] = experts;
  j["weights"] = weights;
  j["densities"] = densities;
  return j.dump();
}

MergeRecipe MergeRecipe::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid recipe JSON: ") + e.what());
  }
  MergeRecipe r;
  try {
    r.method = merge_method_from_string(j.at("method").get<std::string>());
    r.experts = j.at("experts").get<std::vector<std::string>>();
    r.weights = j.at("weights").get<std::vector<double>>();
    if (j.contains("densities")) {
      r.densities = j["densities"].get<std::vector<double>>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid recipe fields: ") + e.what());
  }
  r.validate();
  return r;
}

MergeRecipe MergeRecipe::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open recipe file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

void MergeRecipe::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw std::runtime_error("cannot write recipe file '" + path.string() + "'");
  }
  out << to_json() << "\n";
}

std::string MergeRecipe::label() const {
  std::string s = to_string(method);
  for (std::size_t i = 0; i < experts.size(); ++i) {
    s += " " + experts[i] + ":" + format_coeff(weights[i]);
    if (method == MergeMethod::kTies) {
      s += "/" + format_coeff(densities[i]);
    }
  }
  return s;
}

bool operator<(const MergeRecipe& a, const MergeRecipe& b) {
  auto ta = std::tie(a.method, a.experts, a.weights, a.densities);
  auto tb = std::tie(b.method, b.experts, b.weights, b.densities);
  return ta < tb;
}

bool operator==(const MergeRecipe& a, const MergeRecipe& b) {
  return a.method == b.method && a.experts == b.experts &&
         a.weights == b.weights && a.densities == b.densities;
}

Checkpoint linear_merge(const std::vector<const Checkpoint*>& experts,
                        const std::vector<double>& weights) {
  if (experts.empty()) throw std::invalid_argument("linear_merge: no experts");
  check_weights(weights, experts.size());
  assert_compatible(experts);

  Checkpoint out;
  for (const auto& [name, first] : *experts.front()) {
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(first.size());
    for (std::size_t k = 0; k < experts.size(); ++k) {
      if (weights[k] == 0.0) continue;
      acc += weights[k] * experts[k]->at(name).flat64();
    }
    out.insert(name, round_to_tensor(first.shape(), acc, name));
  }
  return out;
}

TaskVector task_vector(const Checkpoint& expert, const Checkpoint& base) {
  assert_compatible(expert, base);
  TaskVector tau;
  tau.base_id = base.meta().count("model_id") ? base.meta().at("model_id") : "";
  for (const auto& [name, t] : expert) {
    Eigen::VectorXd acc = t.flat64() - base.at(name).flat64();
    tau.delta.insert(name, round_to_tensor(t.shape(), acc, name));
  }
  return tau;
}

Checkpoint task_arithmetic_merge(const Checkpoint& base,
                                 const std::vector<const TaskVector*>& taus,
                                 const std::vector<double>& weights) {
  check_weights(weights, taus.size());
  std::vector<const Checkpoint*> all{&base};
  for (const TaskVector* tau : taus) all.push_back(&tau->delta);
  assert_compatible(all);

  Checkpoint out;
  for (const auto& [name, t] : base) {
    Eigen::VectorXd acc = t.flat64();
    for (std::size_t k = 0; k < taus.size(); ++k) {
      if (weights[k] == 0.0) continue;
      acc += weights[k] * taus[k]->delta.at(name).flat64();
    }
    out.insert(name, round_to_tensor(t.shape(), acc, name));
  }
  return out;
}

TaskVector trim(const TaskVector& tau, double density) {
  if (!(density > 0.0 && density <= 1.0)) {
    throw std::invalid_argument("trim density must lie in (0, 1]");
  }
  TaskVector out;
  out.base_id = tau.base_id;
  for (const auto& [name, t] : tau.delta) {
    const Eigen::VectorXf& src = t.flat();
    const Index n = src.size();
    Index keep = static_cast<Index>(std::ceil(density * static_cast<double>(n)));
    keep = std::min(keep, n);
    if (keep >= n) {
      out.delta.insert(name, t);
      continue;
    }
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    std::sort(order.begin(), order.end(), [&](Index a, Index b) {
      float ma = std::fabs(src[a]);
      float mb = std::fabs(src[b]);
      if (ma != mb) return ma > mb;
      return a < b;
    });
    Eigen::VectorXf kept = Eigen::VectorXf::Zero(n);
    for (Index i = 0; i < keep; ++i) kept[order[static_cast<std::size_t>(i)]] =
        src[order[static_cast<std::size_t>(i)]];
    out.delta.insert(name, Tensor(t.shape(), std::move(kept)));
  }
  return out;
}

SignMask elect_sign(const std::vector<const TaskVector*>& trimmed,
                    const std::vector<double>& weights) {
  if (trimmed.empty()) throw std::invalid_argument("elect_sign: empty list");
  check_weights(weights, trimmed.size());
  std::vector<const Checkpoint*> all;
  for (const TaskVector* tau : trimmed) all.push_back(&tau->delta);
  assert_compatible(all);

  SignMask mask;
  for (const auto& [name, first] : trimmed.front()->delta) {
    const Index n = first.size();
    std::vector<signed char> signs(static_cast<std::size_t>(n), 0);
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(n);
    for (std::size_t k = 0; k < trimmed.size(); ++k) {
      if (weights[k] == 0.0) continue;
      acc += weights[k] * trimmed[k]->delta.at(name).flat64();
    }
    for (Index i = 0; i < n; ++i) {
      if (acc[i] > 0.0) signs[static_cast<std::size_t>(i)] = 1;
      else if (acc[i] < 0.0) signs[static_cast<std::size_t>(i)] = -1;
    }
    mask.signs.emplace(name, std::move(signs));
  }
  return mask;
}

Checkpoint ties_merge(const Checkpoint& base,
                      const std::vector<const TaskVector*>& taus,
                      const std::vector<double>& weights,
                      const std::vector<double>& densities) {
  if (taus.empty()) throw std::invalid_argument("ties_merge: no task vectors");
  check_weights(weights, taus.size());
  check_densities(densities, taus.size());
  if (std::all_of(weights.begin(), weights.end(),
                  [](double w) { return w == 0.0; })) {
    throw std::invalid_argument("ties_merge: degenerate recipe, all weights zero");
  }
  std::vector<const Checkpoint*> all{&base};
  for (const TaskVector* tau : taus) all.push_back(&tau->delta);
  assert_compatible(all);

  // Trim each expert at its own density, then resolve interference by sign
  // majority; only sign-agreeing experts contribute, via an alpha-weighted
  // mean.
  std::vector<TaskVector> trimmed;
  trimmed.reserve(taus.size());
  std::vector<const TaskVector*> trimmed_ptrs;
  for (std::size_t k = 0; k < taus.size(); ++k) {
    trimmed.push_back(trim(*taus[k], densities[k]));
  }
  for (const TaskVector& tau : trimmed) trimmed_ptrs.push_back(&tau);
  SignMask mask = elect_sign(trimmed_ptrs, weights);

  Checkpoint out;
  for (const auto& [name, base_t] : base) {
    const Index n = base_t.size();
    const std::vector<signed char>& signs = mask.signs.at(name);
    Eigen::VectorXd merged_tau = Eigen::VectorXd::Zero(n);
    for (Index i = 0; i < n; ++i) {
      const signed char elected = signs[static_cast<std::size_t>(i)];
      if (elected == 0) continue;
      double num = 0.0;
      double den = 0.0;
      for (std::size_t k = 0; k < trimmed.size(); ++k) {
        if (weights[k] == 0.0) continue;
        const double v =
            static_cast<double>(trimmed[k].delta.at(name).flat()[i]);
        const signed char sgn = v > 0.0 ? 1 : (v < 0.0 ? -1 : 0);
        if (sgn != elected) continue;
        num += weights[k] * v;
        den += weights[k];
      }
      if (den > 0.0) merged_tau[i] = num / den;
    }
    Eigen::VectorXd acc = base_t.flat64() + merged_tau;
    out.insert(name, round_to_tensor(base_t.shape(), acc, name));
  }
  return out;
}

Checkpoint apply_recipe(const MergeRecipe& recipe,
                        const std::map<std::string, const Checkpoint*>& experts,
                        const Checkpoint* base) {
  recipe.validate();

  // Sort by expert id so the accumulation order is permutation independent.
  std::vector<std::size_t> order(recipe.experts.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return recipe.experts[a] < recipe.experts[b];
  });

  std::vector<const Checkpoint*> models;
  std::vector<double> weights;
  std::vector<double> densities;
  for (std::size_t idx : order) {
    const std::string& id = recipe.experts[idx];
    auto it = experts.find(id);
    if (it == experts.end()) {
      throw std::invalid_argument("recipe references unknown expert '" + id + "'");
    }
    models.push_back(it->second);
    weights.push_back(recipe.weights[idx]);
    if (recipe.method == MergeMethod::kTies) {
      densities.push_back(recipe.densities[idx]);
    }
  }

  Checkpoint merged;
  switch (recipe.method) {
    case MergeMethod::kLinear:
      merged = linear_merge(models, weights);
      break;
    case MergeMethod::kTaskArithmetic:
    case MergeMethod::kTies: {
      if (base == nullptr) {
        throw std::invalid_argument("task-vector merges require a base checkpoint");
      }
      std::vector<TaskVector> taus;
      taus.reserve(models.size());
      for (const Checkpoint* m : models) taus.push_back(task_vector(*m, *base));
      std::vector<const TaskVector*> tau_ptrs;
      for (const TaskVector& tau : taus) tau_ptrs.push_back(&tau);
      merged = recipe.method == MergeMethod::kTaskArithmetic
                   ? task_arithmetic_merge(*base, tau_ptrs, weights)
                   : ties_merge(*base, tau_ptrs, weights, densities);
      break;
    }
  }
  merged.meta()["merge_recipe"] = recipe.to_json();
  return merged;
}

}  // namespace stm
