#pragma once

#include "stm/dataset.hpp"
#include "stm/merge.hpp"

#include <memory>

namespace stm {

enum class SweepStrategy { kFull, kRandom, kCoordinate };

std::string to_string(SweepStrategy s);
SweepStrategy sweep_strategy_from_string(const std::string& s);

struct SweepPlan {
  MergeMethod method = MergeMethod::kLinear;
  std::vector<double> weight_grid = {0.0, 0.1, 0.2, 0.3, 0.4,
                                     0.5, 0.6, 0.7, 0.8, 0.9};
  std::vector<double> density_grid = {0.1, 0.2, 0.3, 0.4, 0.5,
                                      0.6, 0.7, 0.8, 0.9};
  SweepStrategy strategy = SweepStrategy::kFull;
  int budget = 1000;
  int random_samples = 200;       // random strategy
  std::uint64_t seed = 0;         // random sampling and dev subsampling
  int coordinate_rounds = 2;      // coordinate strategy
  bool seed_one_hots = true;      // coordinate: also evaluate alpha = 1 one-hots
  double dev_query_frac = 1.0;
  double dev_doc_frac = 1.0;

  void validate() const;
  std::string to_json() const;
  static SweepPlan from_json(const std::string& text);
};

// Stateful recipe enumerator. next_batch() returns recipes that have not been
// proposed before (empty batch ends the stream); scores flow back through
// report() so the coordinate strategy can pick the best grid value before
// moving to the next coefficient.
class RecipeStream {
 public:
  virtual ~RecipeStream() = default;
  virtual std::vector<MergeRecipe> next_batch() = 0;
  virtual void report(const MergeRecipe& recipe, double score) = 0;
};

std::unique_ptr<RecipeStream> enumerate_recipes(
    const SweepPlan& plan, const std::vector<std::string>& expert_ids);

// Grid cardinality before the all-zero-weight exclusion.
std::uint64_t grid_size(const SweepPlan& plan, std::size_t n_experts);

// Seeded subsample keeping metrics meaningful: every sampled query's positive
// documents are force-included in the document sample.
RetrievalSet subsample_devset(const RetrievalSet& set, double query_frac,
                              double doc_frac, std::uint64_t seed);

// Dense evaluation of one encoder over one retrieval set.
struct SetEvaluation {
  std::map<std::string, DatasetScores> per_split;  // keyed by origin split
  DatasetScores overall;                           // pooled over all queries
  double ranking_score = 0.0;  // mean ndcg@10 over splits (overall if none)
  RankedRun run;
};

SetEvaluation evaluate_on_set(const Encoder& encoder, const RetrievalSet& set,
                              int k = 10);

struct LeaderboardRow {
  MergeRecipe recipe;
  bool ok = true;
  std::string error;
  double ndcg10 = 0.0;
  double recall10 = 0.0;
  std::map<std::string, double> per_dataset_ndcg;
};

// Rows sorted by descending dev NDCG@10 with lexicographic recipe
// tie-breaks; failed recipes sink to the bottom without affecting the
// ranking of successful ones.
struct Leaderboard {
  std::vector<LeaderboardRow> rows;

  const LeaderboardRow* best() const;
  std::string to_json() const;
  std::string to_csv() const;
  void save(const std::filesystem::path& json_path,
            const std::filesystem::path& csv_path) const;
};

struct SweepContext {
  std::map<std::string, const Checkpoint*> experts;
  const Checkpoint* base = nullptr;
  const RetrievalSet* devset = nullptr;
  EncoderConfig encoder;
  int workers = 1;
};

// Merge -> embed -> score every recipe the plan enumerates, stopping at the
// budget. Per-recipe failures are recorded as failed rows and never abort
// the sweep. Deterministic for a fixed plan regardless of worker count.
Leaderboard run_sweep(const SweepContext& ctx, const SweepPlan& plan);

}  // namespace stm
