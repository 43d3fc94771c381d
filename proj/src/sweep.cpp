#include "stm/sweep.hpp"

#include "stm/common.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>

namespace stm {

namespace {

using nlohmann::json;

constexpr double kFailedScore = -std::numeric_limits<double>::infinity();

double closest_grid_value(const std::vector<double>& grid, double target) {
  double best = grid.front();
  for (double v : grid) {
    if (std::fabs(v - target) < std::fabs(best - target)) best = v;
  }
  return best;
}

bool all_zero(const std::vector<double>& weights) {
  return std::all_of(weights.begin(), weights.end(),
                     [](double w) { return w == 0.0; });
}

// Lazily walks the Cartesian grid in odometer order, skipping the all-zero
// weight recipe.
class FullStream : public RecipeStream {
 public:
  FullStream(const SweepPlan& plan, std::vector<std::string> ids)
      : plan_(plan), ids_(std::move(ids)), total_(grid_size(plan, ids_.size())) {}

  std::vector<MergeRecipe> next_batch() override {
    constexpr std::uint64_t kChunk = 256;
    std::vector<MergeRecipe> batch;
    while (cursor_ < total_ && batch.size() < kChunk) {
      MergeRecipe r = decode(plan_, ids_, cursor_++);
      if (all_zero(r.weights)) continue;
      batch.push_back(std::move(r));
    }
    return batch;
  }

  void report(const MergeRecipe&, double) override {}

  static MergeRecipe decode(const SweepPlan& plan,
                            const std::vector<std::string>& ids,
                            std::uint64_t index) {
    MergeRecipe r;
    r.method = plan.method;
    r.experts = ids;
    const std::uint64_t w = plan.weight_grid.size();
    for (std::size_t k = 0; k < ids.size(); ++k) {
      r.weights.push_back(plan.weight_grid[index % w]);
      index /= w;
    }
    if (plan.method == MergeMethod::kTies) {
      const std::uint64_t d = plan.density_grid.size();
      for (std::size_t k = 0; k < ids.size(); ++k) {
        r.densities.push_back(plan.density_grid[index % d]);
        index /= d;
      }
    }
    return r;
  }

 private:
  SweepPlan plan_;
  std::vector<std::string> ids_;
  std::uint64_t total_;
  std::uint64_t cursor_ = 0;
};

// Uniform sample of grid points without replacement.
class RandomStream : public RecipeStream {
 public:
  RandomStream(const SweepPlan& plan, std::vector<std::string> ids)
      : plan_(plan), ids_(std::move(ids)) {
    const std::uint64_t total = grid_size(plan_, ids_.size());
    std::uint64_t want = static_cast<std::uint64_t>(plan_.random_samples);
    // The all-zero recipe is excluded from the population.
    const std::uint64_t population = total - (total > 0 ? 1 : 0);
    want = std::min(want, population);
    Rng rng(plan_.seed);
    std::set<std::uint64_t> chosen;
    while (chosen.size() < want) {
      std::uint64_t idx = rng.below(total);
      MergeRecipe r = FullStream::decode(plan_, ids_, idx);
      if (all_zero(r.weights)) continue;
      if (chosen.insert(idx).second) recipes_.push_back(std::move(r));
    }
  }

  std::vector<MergeRecipe> next_batch() override {
    if (done_) return {};
    done_ = true;
    return recipes_;
  }

  void report(const MergeRecipe&, double) override {}

 private:
  SweepPlan plan_;
  std::vector<std::string> ids_;
  std::vector<MergeRecipe> recipes_;
  bool done_ = false;
};

// Cycles over coefficients, scanning the grid for one coordinate at a time
// while the others stay fixed; starts from all-0.5 (snapped onto the grid).
class CoordinateStream : public RecipeStream {
 public:
  CoordinateStream(const SweepPlan& plan, std::vector<std::string> ids)
      : plan_(plan), ids_(std::move(ids)) {
    current_.method = plan_.method;
    current_.experts = ids_;
    const double w0 = closest_grid_value(plan_.weight_grid, 0.5);
    current_.weights.assign(ids_.size(), w0);
    if (all_zero(current_.weights)) current_.weights[0] = 1.0;
    if (plan_.method == MergeMethod::kTies) {
      current_.densities.assign(ids_.size(),
                                closest_grid_value(plan_.density_grid, 0.5));
    }
    n_coords_ = ids_.size() *
                (plan_.method == MergeMethod::kTies ? std::size_t{2} : std::size_t{1});
  }

  std::vector<MergeRecipe> next_batch() override {
    std::vector<MergeRecipe> batch;
    if (!seeded_) {
      seeded_ = true;
      batch.push_back(current_);
      if (plan_.seed_one_hots) {
        for (std::size_t k = 0; k < ids_.size(); ++k) {
          MergeRecipe one_hot;
          one_hot.method = plan_.method;
          one_hot.experts = ids_;
          one_hot.weights.assign(ids_.size(), 0.0);
          one_hot.weights[k] = 1.0;
          if (plan_.method == MergeMethod::kTies) {
            one_hot.densities.assign(ids_.size(), 1.0);
          }
          batch.push_back(std::move(one_hot));
        }
      }
      return dedupe(batch);
    }

    while (round_ < plan_.coordinate_rounds) {
      if (coord_ == n_coords_) {
        coord_ = 0;
        ++round_;
        continue;
      }
      settle_pending();
      pending_ = candidates_for(coord_);
      ++coord_;
      std::vector<MergeRecipe> unseen = dedupe(pending_);
      if (!unseen.empty()) return unseen;
      // Everything on this coordinate is already scored; settle and move on.
    }
    settle_pending();
    return {};
  }

  void report(const MergeRecipe& recipe, double score) override {
    auto it = history_.find(recipe);
    if (it == history_.end()) {
      history_.emplace(recipe, score);
    } else if (score > it->second) {
      it->second = score;
    }
  }

 private:
  std::vector<MergeRecipe> candidates_for(std::size_t coord) {
    std::vector<MergeRecipe> out;
    const bool is_density = coord >= ids_.size();
    const std::vector<double>& grid =
        is_density ? plan_.density_grid : plan_.weight_grid;
    const std::size_t k = is_density ? coord - ids_.size() : coord;
    for (double v : grid) {
      MergeRecipe r = current_;
      if (is_density) {
        r.densities[k] = v;
      } else {
        r.weights[k] = v;
        if (all_zero(r.weights)) continue;
      }
      out.push_back(std::move(r));
    }
    return out;
  }

  // Fix the scanned coordinate at its best observed value.
  void settle_pending() {
    if (pending_.empty()) return;
    double best_score = kFailedScore;
    const MergeRecipe* best = nullptr;
    for (const MergeRecipe& r : pending_) {
      auto it = history_.find(r);
      if (it == history_.end()) continue;
      if (best == nullptr || it->second > best_score) {
        best_score = it->second;
        best = &r;
      }
    }
    if (best != nullptr && best_score > kFailedScore) current_ = *best;
    pending_.clear();
  }

  std::vector<MergeRecipe> dedupe(const std::vector<MergeRecipe>& batch) {
    std::vector<MergeRecipe> out;
    for (const MergeRecipe& r : batch) {
      if (history_.count(r) || proposed_.count(r)) continue;
      proposed_.insert(r);
      out.push_back(r);
    }
    return out;
  }

  SweepPlan plan_;
  std::vector<std::string> ids_;
  MergeRecipe current_;
  std::size_t n_coords_ = 0;
  std::size_t coord_ = 0;
  int round_ = 0;
  bool seeded_ = false;
  std::vector<MergeRecipe> pending_;
  std::map<MergeRecipe, double> history_;
  std::set<MergeRecipe> proposed_;
};

}  // namespace

std::string to_string(SweepStrategy s) {
  switch (s) {
    case SweepStrategy::kFull: return "full";
    case SweepStrategy::kRandom: return "random";
    case SweepStrategy::kCoordinate: return "coordinate";
  }
  throw std::logic_error("unknown sweep strategy");
}

SweepStrategy sweep_strategy_from_string(const std::string& s) {
  if (s == "full") return SweepStrategy::kFull;
  if (s == "random") return SweepStrategy::kRandom;
  if (s == "coordinate") return SweepStrategy::kCoordinate;
  throw ConfigError("unknown sweep strategy '" + s +
                    "' (expected full|random|coordinate)");
}

void SweepPlan::validate() const {
  if (budget < 1) throw ConfigError("sweep budget must be >= 1");
  if (weight_grid.empty()) throw ConfigError("weight grid is empty");
  for (double w : weight_grid) {
    if (!(w >= 0.0 && w <= 1.0)) throw ConfigError("weight grid value outside [0, 1]");
  }
  if (method == MergeMethod::kTies) {
    if (density_grid.empty()) throw ConfigError("density grid is empty");
    for (double d : density_grid) {
      if (!(d > 0.0 && d <= 1.0)) throw ConfigError("density grid value outside (0, 1]");
    }
  }
  if (strategy == SweepStrategy::kRandom && random_samples < 1) {
    throw ConfigError("random strategy needs random_samples >= 1");
  }
  if (strategy == SweepStrategy::kCoordinate && coordinate_rounds < 1) {
    throw ConfigError("coordinate strategy needs coordinate_rounds >= 1");
  }
  if (!(dev_query_frac > 0.0 && dev_query_frac <= 1.0) ||
      !(dev_doc_frac > 0.0 && dev_doc_frac <= 1.0)) {
    throw ConfigError("dev subsample fractions must lie in (0, 1]");
  }
}

std::string SweepPlan::to_json() const {
  json j;
  j["method"] = stm::to_string(method);
  j["strategy"] = stm::to_string(strategy);
  j["weight_grid"] = weight_grid;
  j["density_grid"] = density_grid;
  j["budget"] = budget;
  j["random_samples"] = random_samples;
  j["seed"] = seed;
  j["coordinate_rounds"] = coordinate_rounds;
  j["seed_one_hots"] = seed_one_hots;
  j["dev_query_frac"] = dev_query_frac;
  j["dev_doc_frac"] = dev_doc_frac;
  return j.dump();
}

SweepPlan SweepPlan::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid sweep plan JSON: ") + e.what());
  }
  SweepPlan plan;
  try {
    if (j.contains("method")) {
      plan.method = merge_method_from_string(j["method"].get<std::string>());
    }
    if (j.contains("strategy")) {
      plan.strategy = sweep_strategy_from_string(j["strategy"].get<std::string>());
    }
    if (j.contains("weight_grid")) {
      plan.weight_grid = j["weight_grid"].get<std::vector<double>>();
    }
    if (j.contains("density_grid")) {
      plan.density_grid = j["density_grid"].get<std::vector<double>>();
    }
    if (j.contains("budget")) plan.budget = j["budget"].get<int>();
    if (j.contains("random_samples")) {
      plan.random_samples = j["random_samples"].get<int>();
    }
    if (j.contains("seed")) plan.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("coordinate_rounds")) {
      plan.coordinate_rounds = j["coordinate_rounds"].get<int>();
    }
    if (j.contains("seed_one_hots")) {
      plan.seed_one_hots = j["seed_one_hots"].get<bool>();
    }
    if (j.contains("dev_query_frac")) {
      plan.dev_query_frac = j["dev_query_frac"].get<double>();
    }
    if (j.contains("dev_doc_frac")) {
      plan.dev_doc_frac = j["dev_doc_frac"].get<double>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid sweep plan fields: ") + e.what());
  }
  plan.validate();
  return plan;
}

std::unique_ptr<RecipeStream> enumerate_recipes(
    const SweepPlan& plan, const std::vector<std::string>& expert_ids) {
  plan.validate();
  if (expert_ids.empty()) {
    throw std::invalid_argument("enumerate_recipes: no experts");
  }
  switch (plan.strategy) {
    case SweepStrategy::kFull:
      return std::make_unique<FullStream>(plan, expert_ids);
    case SweepStrategy::kRandom:
      return std::make_unique<RandomStream>(plan, expert_ids);
    case SweepStrategy::kCoordinate:
      return std::make_unique<CoordinateStream>(plan, expert_ids);
  }
  throw std::logic_error("unknown strategy");
}

std::uint64_t grid_size(const SweepPlan& plan, std::size_t n_experts) {
  std::uint64_t total = 1;
  for (std::size_t k = 0; k < n_experts; ++k) {
    total *= plan.weight_grid.size();
    if (plan.method == MergeMethod::kTies) total *= plan.density_grid.size();
  }
  return total;
}

RetrievalSet subsample_devset(const RetrievalSet& set, double query_frac,
                              double doc_frac, std::uint64_t seed) {
  if (!(query_frac > 0.0 && query_frac <= 1.0) ||
      !(doc_frac > 0.0 && doc_frac <= 1.0)) {
    throw std::invalid_argument("subsample fractions must lie in (0, 1]");
  }
  if (query_frac == 1.0 && doc_frac == 1.0) return set;
  if (set.queries.empty() || set.corpus.empty()) {
    throw std::invalid_argument("subsample of an empty retrieval set");
  }

  Rng rng(seed);
  std::vector<std::string> qids;
  for (const auto& [qid, text] : set.queries) {
    (void)text;
    qids.push_back(qid);
  }
  rng.shuffle(qids);
  std::size_t n_q = static_cast<std::size_t>(
      std::llround(query_frac * static_cast<double>(qids.size())));
  n_q = std::max<std::size_t>(1, std::min(n_q, qids.size()));
  std::set<std::string> keep_q(qids.begin(), qids.begin() + static_cast<long>(n_q));

  std::vector<std::string> dids;
  for (const auto& [did, text] : set.corpus) {
    (void)text;
    dids.push_back(did);
  }
  rng.shuffle(dids);
  std::size_t n_d = static_cast<std::size_t>(
      std::llround(doc_frac * static_cast<double>(dids.size())));
  n_d = std::max<std::size_t>(1, std::min(n_d, dids.size()));
  std::set<std::string> keep_d(dids.begin(), dids.begin() + static_cast<long>(n_d));

  // Positives of sampled queries stay in, otherwise their metrics are
  // meaningless.
  for (const std::string& qid : keep_q) {
    auto it = set.qrels.judgments.find(qid);
    if (it == set.qrels.judgments.end()) continue;
    for (const auto& [did, rel] : it->second) {
      if (rel > 0) keep_d.insert(did);
    }
  }

  RetrievalSet out;
  out.split = set.split;
  for (const std::string& qid : keep_q) {
    out.queries[qid] = set.queries.at(qid);
    auto sp = set.query_split.find(qid);
    if (sp != set.query_split.end()) out.query_split[qid] = sp->second;
    auto pr = set.prompts.find(qid);
    if (pr != set.prompts.end()) out.prompts[qid] = pr->second;
    auto qr = set.qrels.judgments.find(qid);
    if (qr != set.qrels.judgments.end()) {
      for (const auto& [did, rel] : qr->second) {
        if (keep_d.count(did)) out.qrels.judgments[qid][did] = rel;
      }
    }
  }
  for (const std::string& did : keep_d) {
    out.corpus[did] = set.corpus.at(did);
  }
  for (const RetrievalSet::TripletRef& t : set.triplets) {
    if (keep_q.count(t.query_id) && keep_d.count(t.positive_id) &&
        keep_d.count(t.negative_id)) {
      out.triplets.push_back(t);
    }
  }
  if (out.queries.empty() || out.corpus.empty()) {
    throw std::runtime_error("subsample produced an empty set");
  }
  out.validate();
  return out;
}

SetEvaluation evaluate_on_set(const Encoder& encoder, const RetrievalSet& set,
                              int k) {
  if (set.queries.empty() || set.corpus.empty()) {
    throw std::invalid_argument("evaluate_on_set: empty set");
  }
  const EncoderConfig& cfg = encoder.config();

  std::vector<std::pair<std::string, Eigen::VectorXd>> corpus_embs;
  corpus_embs.reserve(set.corpus.size());
  for (const auto& [did, text] : set.corpus) {
    corpus_embs.emplace_back(did, encoder.encode(tokenize(text, cfg)));
  }

  SetEvaluation eval;
  std::map<std::string, RankedRun> split_runs;
  for (const auto& [qid, text] : set.queries) {
    (void)text;
    Eigen::VectorXd q_emb =
        encoder.encode(tokenize(query_text_with_prompt(set, qid), cfg));
    std::vector<ScoredDoc> top = retrieve_topk(q_emb, corpus_embs, k);
    eval.run.rankings[qid] = top;
    auto sp = set.query_split.find(qid);
    const std::string split = sp != set.query_split.end() ? sp->second : set.split;
    split_runs[split].rankings[qid] = std::move(top);
  }

  eval.overall.ndcg_at_10 = ndcg_at_k(eval.run, set.qrels, k);
  eval.overall.recall_at_10 = recall_at_k(eval.run, set.qrels, k);
  double sum = 0.0;
  for (const auto& [split, run] : split_runs) {
    DatasetScores scores;
    scores.ndcg_at_10 = ndcg_at_k(run, set.qrels, k);
    scores.recall_at_10 = recall_at_k(run, set.qrels, k);
    eval.per_split[split] = scores;
    sum += scores.ndcg_at_10;
  }
  eval.ranking_score = split_runs.size() > 1
                           ? sum / static_cast<double>(split_runs.size())
                           : eval.overall.ndcg_at_10;
  return eval;
}

const LeaderboardRow* Leaderboard::best() const {
  for (const LeaderboardRow& row : rows) {
    if (row.ok) return &row;
  }
  return nullptr;
}

std::string Leaderboard::to_json() const {
  json out = json::array();
  for (const LeaderboardRow& row : rows) {
    json r;
    r["recipe"] = json::parse(row.recipe.to_json());
    r["ok"] = row.ok;
    if (!row.ok) r["error"] = row.error;
    r["ndcg@10"] = row.ndcg10;
    r["recall@10"] = row.recall10;
    r["per_dataset_ndcg@10"] = row.per_dataset_ndcg;
    out.push_back(std::move(r));
  }
  return json{{"rows", out}}.dump(2);
}

std::string Leaderboard::to_csv() const {
  std::string out = "rank,method,ndcg10,recall10";
  if (!rows.empty()) {
    for (const std::string& id : rows.front().recipe.experts) {
      out += ",w:" + id;
    }
    if (rows.front().recipe.method == MergeMethod::kTies) {
      for (const std::string& id : rows.front().recipe.experts) {
        out += ",d:" + id;
      }
    }
  }
  out += ",ok\n";
  char buf[64];
  int rank = 1;
  for (const LeaderboardRow& row : rows) {
    out += std::to_string(rank++) + "," + stm::to_string(row.recipe.method);
    std::snprintf(buf, sizeof(buf), ",%.10g,%.10g", row.ndcg10, row.recall10);
    out += buf;
    for (double w : row.recipe.weights) {
      std::snprintf(buf, sizeof(buf), ",%.10g", w);
      out += buf;
    }
    if (row.recipe.method == MergeMethod::kTies) {
      for (double d : row.recipe.densities) {
        std::snprintf(buf, sizeof(buf), ",%.10g", d);
        out += buf;
      }
    }
    out += row.ok ? ",1\n" : ",0\n";
  }
  return out;
}

void Leaderboard::save(const std::filesystem::path& json_path,
                       const std::filesystem::path& csv_path) const {
  std::ofstream j(json_path, std::ios::trunc);
  if (!j) throw std::runtime_error("cannot write '" + json_path.string() + "'");
  j << to_json() << "\n";
  std::ofstream c(csv_path, std::ios::trunc);
  if (!c) throw std::runtime_error("cannot write '" + csv_path.string() + "'");
  c << to_csv();
}

Leaderboard run_sweep(const SweepContext& ctx, const SweepPlan& plan) {
  plan.validate();
  if (ctx.experts.empty()) throw std::invalid_argument("run_sweep: no experts");
  if (ctx.devset == nullptr || ctx.devset->queries.empty()) {
    throw std::invalid_argument("run_sweep: empty dev set");
  }
  const bool needs_base = plan.method != MergeMethod::kLinear;
  if (needs_base && ctx.base == nullptr) {
    throw std::invalid_argument("run_sweep: task-vector methods need a base");
  }

  std::vector<std::string> ids;
  for (const auto& [id, ckpt] : ctx.experts) {
    (void)ckpt;
    ids.push_back(id);
  }
  std::unique_ptr<RecipeStream> stream = enumerate_recipes(plan, ids);

  Leaderboard board;
  int evaluated = 0;
  while (evaluated < plan.budget) {
    std::vector<MergeRecipe> batch = stream->next_batch();
    if (batch.empty()) break;
    if (evaluated + static_cast<int>(batch.size()) > plan.budget) {
      batch.resize(static_cast<std::size_t>(plan.budget - evaluated));
    }

    std::vector<LeaderboardRow> results(batch.size());
    parallel_for(batch.size(), ctx.workers, [&](std::size_t i) {
      LeaderboardRow& row = results[i];
      row.recipe = batch[i];
      try {
        Checkpoint merged = apply_recipe(batch[i], ctx.experts, ctx.base);
        Encoder encoder(merged, nullptr, ctx.encoder);
        SetEvaluation eval = evaluate_on_set(encoder, *ctx.devset);
        row.ndcg10 = eval.ranking_score;
        row.recall10 = eval.overall.recall_at_10;
        for (const auto& [split, scores] : eval.per_split) {
          row.per_dataset_ndcg[split] = scores.ndcg_at_10;
        }
      } catch (const std::exception& e) {
        row.ok = false;
        row.error = e.what();
      }
    });

    for (LeaderboardRow& row : results) {
      stream->report(row.recipe, row.ok ? row.ndcg10 : kFailedScore);
      board.rows.push_back(std::move(row));
      ++evaluated;
    }
  }

  std::sort(board.rows.begin(), board.rows.end(),
            [](const LeaderboardRow& a, const LeaderboardRow& b) {
              if (a.ok != b.ok) return a.ok;
              if (a.ok && a.ndcg10 != b.ndcg10) return a.ndcg10 > b.ndcg10;
              return a.recipe < b.recipe;
            });
  return board;
}

}  // namespace stm
