#pragma once

#include "stm/encoder.hpp"
#include "stm/lora.hpp"

#include <filesystem>
#include <set>

namespace stm {

struct TrainConfig {
  double learning_rate = 5e-5;
  int batch_size = 256;
  int epochs = 1;
  int warmup_steps = 100;
  double temperature = 1.0;
  std::uint64_t seed = 0;

  // AdamW
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  int lora_rank = 16;
  double lora_alpha = 32.0;
  std::set<std::string> lora_exclude;

  void validate() const;
};

struct LossTracePoint {
  int step;
  double loss;
};

struct TrainResult {
  LoraAdapter adapter;
  std::vector<LossTracePoint> trace;
};

// d(loss)/d(factor) per adapter target, shaped like the factors.
struct AdapterGrads {
  std::map<std::string, LoraAdapter::Factors> per_target;
};

// InfoNCE loss of one batch under base + adapter; when grads is non-null the
// full reverse-mode pass also runs. Everything is computed in f64.
double batch_loss_and_grads(const Checkpoint& base, const LoraAdapter& adapter,
                            const TripletBatch& batch,
                            const EncoderConfig& enc, double temperature,
                            AdapterGrads* grads);

std::vector<TripletBatch> make_batches(const std::vector<Triplet>& triplets,
                                       int batch_size);

// LoRA-only fine-tuning: the base stays frozen; AdamW with linear warmup then
// a constant rate; deterministic given the seed.
TrainResult train(const Checkpoint& base, const std::vector<TripletBatch>& data,
                  const EncoderConfig& enc, const TrainConfig& tc);

// Central-difference check of the analytic adapter gradient over sampled
// coordinates; returns the max relative error.
double grad_check(const Checkpoint& base, const LoraAdapter& adapter,
                  const TripletBatch& batch, const EncoderConfig& enc,
                  double eps, int n_samples = 100, std::uint64_t seed = 0,
                  double temperature = 1.0);

void write_loss_trace_csv(const std::vector<LossTracePoint>& trace,
                          const std::filesystem::path& path);

}  // namespace stm
