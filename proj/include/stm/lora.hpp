#pragma once

#include "stm/common.hpp"
#include "stm/merge.hpp"
#include "stm/tensor_store.hpp"

#include <set>

namespace stm {

// Low-rank adapter: per target matrix W [out x in], a factor pair
// A [r x in], B [out x r] with effective delta (alpha_lora / r) * B * A.
// Factors are held in f64 while training updates them; they round to f32
// only when materialized or saved.
class LoraAdapter {
 public:
  struct Factors {
    RowMatrixXd a;  // [r x in]
    RowMatrixXd b;  // [out x r]
  };

  LoraAdapter() = default;
  LoraAdapter(int rank, double alpha_lora);

  int rank() const { return rank_; }
  double alpha_lora() const { return alpha_; }
  double scale() const { return alpha_ / static_cast<double>(rank_); }

  void add_target(const std::string& name, RowMatrixXd a, RowMatrixXd b);
  bool has_target(const std::string& name) const;
  const std::map<std::string, Factors>& targets() const { return targets_; }
  std::map<std::string, Factors>& targets() { return targets_; }

 private:
  int rank_ = 0;
  double alpha_ = 0.0;
  std::map<std::string, Factors> targets_;
};

// Targets every rank-2 tensor of the base (minus exclusions). A is drawn
// i.i.d. Gaussian(0, 0.02^2) from the seed, B starts all-zero so the initial
// delta is exactly zero.
LoraAdapter init_adapter(const Checkpoint& base, int rank, double alpha_lora,
                         std::uint64_t seed,
                         const std::set<std::string>& exclude = {});

// Dense checkpoint-shaped delta: (alpha/r) * B * A at targets, zeros
// elsewhere.
TaskVector materialize_delta(const LoraAdapter& adapter, const Checkpoint& base);

Checkpoint apply_adapter(const Checkpoint& base, const LoraAdapter& adapter);

// Adapter container reuses the checkpoint format with ".lora_A"/".lora_B"
// name suffixes and metadata keys rank / alpha_lora.
void save_adapter(const LoraAdapter& adapter, const std::filesystem::path& path);
LoraAdapter load_adapter(const std::filesystem::path& path);

}  // namespace stm
