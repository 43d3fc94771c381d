#include "stm/lora.hpp"

#include <charconv>

namespace stm {

LoraAdapter::LoraAdapter(int rank, double alpha_lora)
    : rank_(rank), alpha_(alpha_lora) {
  if (rank_ <= 0) throw std::invalid_argument("LoRA rank must be positive");
  if (!(alpha_ > 0.0) || !std::isfinite(alpha_ / rank_)) {
    throw std::invalid_argument("LoRA alpha must be positive and finite");
  }
}

void LoraAdapter::add_target(const std::string& name, RowMatrixXd a,
                             RowMatrixXd b) {
  if (a.rows() != rank_ || b.cols() != rank_) {
    throw std::invalid_argument("factor ranks disagree with adapter rank for '" +
                                name + "'");
  }
  if (targets_.count(name)) {
    throw std::invalid_argument("duplicate adapter target '" + name + "'");
  }
  targets_[name] = Factors{std::move(a), std::move(b)};
}

bool LoraAdapter::has_target(const std::string& name) const {
  return targets_.count(name) != 0;
}

LoraAdapter init_adapter(const Checkpoint& base, int rank, double alpha_lora,
                         std::uint64_t seed,
                         const std::set<std::string>& exclude) {
  LoraAdapter adapter(rank, alpha_lora);
  Rng rng(seed);
  bool any = false;
  for (const auto& [name, tensor] : base) {
    if (tensor.rank() != 2) continue;
    if (exclude.count(name)) continue;
    any = true;
    const Index out_dim = tensor.rows();
    const Index in_dim = tensor.cols();
    if (rank > std::min(out_dim, in_dim)) {
      throw std::invalid_argument(
          "LoRA rank " + std::to_string(rank) + " exceeds min dimension of '" +
          name + "' (" + std::to_string(std::min(out_dim, in_dim)) + ")");
    }
    RowMatrixXd a(rank, in_dim);
    for (Index i = 0; i < a.rows(); ++i) {
      for (Index j = 0; j < a.cols(); ++j) a(i, j) = rng.normal(0.0, 0.02);
    }
    RowMatrixXd b = RowMatrixXd::Zero(out_dim, rank);
    adapter.add_target(name, std::move(a), std::move(b));
  }
  if (!any) {
    throw std::invalid_argument(
        "base checkpoint has no rank-2 tensors to adapt");
  }
  return adapter;
}

TaskVector materialize_delta(const LoraAdapter& adapter, const Checkpoint& base) {
  TaskVector tau;
  tau.base_id =
      base.meta().count("model_id") ? base.meta().at("model_id") : "";
  for (const auto& [name, tensor] : base) {
    auto it = adapter.targets().find(name);
    if (it == adapter.targets().end()) {
      tau.delta.insert(name, Tensor::zeros(tensor.shape()));
      continue;
    }
    const auto& f = it->second;
    if (f.b.rows() != tensor.rows() || f.a.cols() != tensor.cols()) {
      throw std::invalid_argument("adapter factors for '" + name +
                                  "' do not match the base shape");
    }
    RowMatrixXd delta = adapter.scale() * (f.b * f.a);
    Eigen::VectorXf flat(delta.size());
    Eigen::Map<RowMatrixXf>(flat.data(), delta.rows(), delta.cols()) =
        delta.cast<float>();
    Tensor t(tensor.shape(), std::move(flat));
    if (!t.all_finite()) {
      throw std::runtime_error("adapter delta for '" + name + "' is non-finite");
    }
    tau.delta.insert(name, std::move(t));
  }
  return tau;
}

Checkpoint apply_adapter(const Checkpoint& base, const LoraAdapter& adapter) {
  TaskVector tau = materialize_delta(adapter, base);
  Checkpoint out = axpy_scale(base, tau.delta, 1.0);
  out.meta() = base.meta();
  return out;
}

void save_adapter(const LoraAdapter& adapter, const std::filesystem::path& path) {
  Checkpoint c;
  for (const auto& [name, f] : adapter.targets()) {
    c.insert(name + ".lora_A", Tensor::from_matrix(f.a.cast<float>()));
    c.insert(name + ".lora_B", Tensor::from_matrix(f.b.cast<float>()));
  }
  c.meta()["rank"] = std::to_string(adapter.rank());
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", adapter.alpha_lora());
  c.meta()["alpha_lora"] = buf;
  save_checkpoint(c, path);
}

LoraAdapter load_adapter(const std::filesystem::path& path) {
  Checkpoint c = load_checkpoint(path);
  if (!c.meta().count("rank") || !c.meta().count("alpha_lora")) {
    throw std::runtime_error("adapter file '" + path.string() +
                             "' is missing rank/alpha_lora metadata");
  }
  int rank = std::stoi(c.meta().at("rank"));
  double alpha = std::stod(c.meta().at("alpha_lora"));
  LoraAdapter adapter(rank, alpha);

  for (const auto& [name, tensor] : c) {
    const std::string a_suffix = ".lora_A";
    if (name.size() <= a_suffix.size() ||
        name.compare(name.size() - a_suffix.size(), a_suffix.size(),
                     a_suffix) != 0) {
      continue;
    }
    const std::string target = name.substr(0, name.size() - a_suffix.size());
    const std::string b_name = target + ".lora_B";
    if (!c.contains(b_name)) {
      throw std::runtime_error("adapter target '" + target +
                               "' has lora_A but no lora_B");
    }
    adapter.add_target(target, tensor.matrix64(),
                       c.at(b_name).matrix64());
  }
  return adapter;
}

}  // namespace stm
