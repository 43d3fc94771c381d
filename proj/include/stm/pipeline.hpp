#pragma once

#include "stm/sweep.hpp"
#include "stm/synth.hpp"
#include "stm/trainer.hpp"

#include <optional>

namespace stm {

struct PipelinePaths {
  std::filesystem::path data_dir = "data";
  std::filesystem::path checkpoint_dir = "checkpoints";
  std::filesystem::path report_dir = "reports";
};

// Everything one experiment needs, loadable from a JSON config file. The
// seed and a hash of the full config are stamped into every artifact.
struct PipelineConfig {
  PipelinePaths paths;
  std::uint64_t seed = 0;
  int workers = 1;
  EncoderConfig encoder;
  TrainConfig train;
  ToyGenConfig gen;
  SweepPlan sweep;
  std::optional<std::string> prompt_pool;        // pool file for query prompts
  std::optional<int> subsample_train_pairs;      // cap pairs per training run

  static PipelineConfig load(const std::filesystem::path& path);
  static PipelineConfig from_json_text(const std::string& text);
  std::string to_json_text() const;
  std::string config_hash() const;

  void validate() const;
};

// Expert ids are the four split names plus "pooled".
std::filesystem::path expert_checkpoint_path(const PipelineConfig& cfg,
                                             const std::string& id);
std::filesystem::path base_checkpoint_path(const PipelineConfig& cfg);
std::filesystem::path dataset_path(const PipelineConfig& cfg,
                                   const std::string& name);

void cmd_gen_data(const PipelineConfig& cfg);

// Trains one expert (or the pooled model) with LoRA on a frozen shared base
// and saves the folded checkpoint, the adapter, and the loss trace.
std::filesystem::path cmd_train(const PipelineConfig& cfg,
                                const std::string& split);

std::filesystem::path cmd_merge(const PipelineConfig& cfg,
                                const std::filesystem::path& recipe_file,
                                const std::filesystem::path& out_path);

struct EvalOutcome {
  SetEvaluation evaluation;
  MetricReport report;  // split-group aggregates when the set is mixed
};

EvalOutcome cmd_eval(const PipelineConfig& cfg,
                     const std::filesystem::path& checkpoint_path,
                     const std::filesystem::path& dataset_file,
                     const std::string& out_prefix);

Leaderboard cmd_sweep(const PipelineConfig& cfg);

struct StmOutcome {
  std::map<std::string, double> dev_ndcg10;   // per model id
  std::map<std::string, MetricReport> test_reports;
  MergeRecipe best_linear;
  MergeRecipe best_ties;
};

// The whole experiment in one invocation: generate data, train the four
// experts and the pooled model, grid-search linear and Ties merges on dev,
// then report every model side by side on the held-out test set.
StmOutcome cmd_stm(const PipelineConfig& cfg);

}  // namespace stm
