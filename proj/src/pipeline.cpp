#include "stm/pipeline.hpp"

#include "stm/common.hpp"

#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>

namespace stm {

namespace {

using nlohmann::json;

// Typed field access that reports the full dotted path on errors.
class Fields {
 public:
  Fields(const json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {}

  bool has(const char* key) const { return j_.contains(key); }

  Fields section(const char* key) const {
    if (!j_.contains(key)) return Fields(empty_, path(key));
    if (!j_.at(key).is_object()) {
      throw ConfigError("config field " + path(key) + ": expected an object");
    }
    return Fields(j_.at(key), path(key));
  }

  template <typename T>
  T get(const char* key, T fallback) const {
    if (!j_.contains(key)) return fallback;
    try {
      return j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config field " + path(key) + ": wrong type");
    }
  }

  std::string path(const char* key) const {
    return prefix_.empty() ? key : prefix_ + "." + key;
  }

  void check_known(std::initializer_list<const char*> known) const {
    for (const auto& [key, value] : j_.items()) {
      (void)value;
      bool found = false;
      for (const char* k : known) {
        if (key == k) {
          found = true;
          break;
        }
      }
      if (!found) {
        throw ConfigError("config field " + path(key.c_str()) + ": unknown key");
      }
    }
  }

 private:
  static const json empty_;
  const json& j_;
  std::string prefix_;
};

const json Fields::empty_ = json::object();

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
}

void stamp(Checkpoint& ckpt, const PipelineConfig& cfg) {
  ckpt.meta()["config_hash"] = cfg.config_hash();
  ckpt.meta()["seed"] = std::to_string(cfg.seed);
}

std::vector<Triplet> training_triplets(const PipelineConfig& cfg,
                                       const std::string& split) {
  std::vector<RetrievalSet> sets;
  if (split == "pooled") {
    for (const std::string& name : kSplitNames) {
      sets.push_back(load_retrieval_set(dataset_path(cfg, name)));
    }
  } else {
    sets.push_back(load_retrieval_set(dataset_path(cfg, split)));
  }
  std::vector<Triplet> triplets;
  for (const RetrievalSet& set : sets) {
    auto part = to_token_triplets(set, cfg.encoder);
    triplets.insert(triplets.end(), part.begin(), part.end());
  }
  Rng rng = Rng(cfg.seed).fork(fnv1a64("order:" + split));
  rng.shuffle(triplets);
  if (cfg.subsample_train_pairs &&
      static_cast<int>(triplets.size()) > *cfg.subsample_train_pairs) {
    triplets.resize(static_cast<std::size_t>(*cfg.subsample_train_pairs));
  }
  return triplets;
}

json report_json(const MetricReport& report) {
  json j;
  auto scores = [](const DatasetScores& s) {
    return json{{"ndcg@10", s.ndcg_at_10}, {"recall@10", s.recall_at_10}};
  };
  for (const auto& [name, s] : report.per_dataset) {
    j["per_dataset"][name] = scores(s);
  }
  j["avg_medical"] = scores(report.avg_medical);
  j["avg_general"] = scores(report.avg_general);
  j["avg_all"] = scores(report.avg_all);
  return j;
}

MetricReport aggregate_mixed(const SetEvaluation& eval) {
  std::map<std::string, std::string> labels;
  for (const auto& [split, scores] : eval.per_split) {
    (void)scores;
    labels[split] = split_group(split);
  }
  return aggregate(eval.per_split, labels);
}

}  // namespace

PipelineConfig PipelineConfig::load(const std::filesystem::path& path) {
  return from_json_text(read_file(path));
}

PipelineConfig PipelineConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config root must be a JSON object");

  PipelineConfig cfg;
  Fields root(j, "");
  root.check_known({"paths", "seed", "workers", "encoder", "train", "gen",
                    "sweep", "prompt_pool", "subsample_train_pairs"});

  Fields paths = root.section("paths");
  paths.check_known({"data_dir", "checkpoint_dir", "report_dir"});
  cfg.paths.data_dir = paths.get<std::string>("data_dir", "data");
  cfg.paths.checkpoint_dir =
      paths.get<std::string>("checkpoint_dir", "checkpoints");
  cfg.paths.report_dir = paths.get<std::string>("report_dir", "reports");

  cfg.seed = root.get<std::uint64_t>("seed", 0);
  cfg.workers = root.get<int>("workers", 1);

  Fields enc = root.section("encoder");
  enc.check_known({"vocab_size", "dim", "n_layers", "max_len", "mask_mode",
                   "pooling", "eos_id"});
  cfg.encoder.vocab_size = enc.get<int>("vocab_size", cfg.encoder.vocab_size);
  cfg.encoder.dim = enc.get<int>("dim", cfg.encoder.dim);
  cfg.encoder.n_layers = enc.get<int>("n_layers", cfg.encoder.n_layers);
  cfg.encoder.max_len = enc.get<int>("max_len", cfg.encoder.max_len);
  cfg.encoder.mask_mode = mask_mode_from_string(
      enc.get<std::string>("mask_mode", to_string(cfg.encoder.mask_mode)));
  cfg.encoder.pooling = pooling_from_string(
      enc.get<std::string>("pooling", to_string(cfg.encoder.pooling)));
  cfg.encoder.eos_id = enc.get<int>("eos_id", cfg.encoder.eos_id);

  Fields train = root.section("train");
  train.check_known({"learning_rate", "batch_size", "epochs", "warmup_steps",
                     "temperature", "weight_decay", "lora_rank", "lora_alpha",
                     "lora_exclude"});
  cfg.train.learning_rate =
      train.get<double>("learning_rate", cfg.train.learning_rate);
  cfg.train.batch_size = train.get<int>("batch_size", cfg.train.batch_size);
  cfg.train.epochs = train.get<int>("epochs", cfg.train.epochs);
  cfg.train.warmup_steps =
      train.get<int>("warmup_steps", cfg.train.warmup_steps);
  cfg.train.temperature =
      train.get<double>("temperature", cfg.train.temperature);
  cfg.train.weight_decay =
      train.get<double>("weight_decay", cfg.train.weight_decay);
  cfg.train.lora_rank = train.get<int>("lora_rank", cfg.train.lora_rank);
  cfg.train.lora_alpha = train.get<double>("lora_alpha", cfg.train.lora_alpha);
  for (const std::string& name : train.get<std::vector<std::string>>(
           "lora_exclude", std::vector<std::string>{})) {
    cfg.train.lora_exclude.insert(name);
  }

  Fields gen = root.section("gen");
  gen.check_known({"topics_per_split", "pairs_per_split", "vocab_size",
                   "keywords_per_topic", "query_keywords",
                   "dev_queries_per_topic", "test_queries_per_topic",
                   "max_filler"});
  cfg.gen.topics_per_split =
      gen.get<int>("topics_per_split", cfg.gen.topics_per_split);
  cfg.gen.pairs_per_split =
      gen.get<int>("pairs_per_split", cfg.gen.pairs_per_split);
  cfg.gen.vocab_size = gen.get<int>("vocab_size", cfg.encoder.vocab_size);
  cfg.gen.keywords_per_topic =
      gen.get<int>("keywords_per_topic", cfg.gen.keywords_per_topic);
  cfg.gen.query_keywords =
      gen.get<int>("query_keywords", cfg.gen.query_keywords);
  cfg.gen.dev_queries_per_topic =
      gen.get<int>("dev_queries_per_topic", cfg.gen.dev_queries_per_topic);
  cfg.gen.test_queries_per_topic =
      gen.get<int>("test_queries_per_topic", cfg.gen.test_queries_per_topic);
  cfg.gen.max_filler = gen.get<int>("max_filler", cfg.gen.max_filler);
  cfg.gen.seed = cfg.seed;

  if (root.has("sweep")) {
    Fields sweep = root.section("sweep");
    (void)sweep;
    cfg.sweep = SweepPlan::from_json(j.at("sweep").dump());
  }
  if (cfg.sweep.seed == 0) cfg.sweep.seed = cfg.seed;

  if (root.has("prompt_pool")) {
    cfg.prompt_pool = root.get<std::string>("prompt_pool", "");
  }
  if (root.has("subsample_train_pairs")) {
    cfg.subsample_train_pairs = root.get<int>("subsample_train_pairs", 0);
    if (*cfg.subsample_train_pairs < 1) {
      throw ConfigError("config field subsample_train_pairs: must be >= 1");
    }
  }

  cfg.validate();
  return cfg;
}

void PipelineConfig::validate() const {
  encoder.validate();
  train.validate();
  gen.validate();
  sweep.validate();
  if (workers < 1) throw ConfigError("config field workers: must be >= 1");
  if (gen.vocab_size > encoder.vocab_size) {
    throw ConfigError(
        "config field gen.vocab_size: exceeds encoder.vocab_size");
  }
}

std::string PipelineConfig::to_json_text() const {
  json j;
  j["paths"] = {{"data_dir", paths.data_dir.string()},
                {"checkpoint_dir", paths.checkpoint_dir.string()},
                {"report_dir", paths.report_dir.string()}};
  j["seed"] = seed;
  j["workers"] = workers;
  j["encoder"] = {{"vocab_size", encoder.vocab_size},
                  {"dim", encoder.dim},
                  {"n_layers", encoder.n_layers},
                  {"max_len", encoder.max_len},
                  {"mask_mode", to_string(encoder.mask_mode)},
                  {"pooling", to_string(encoder.pooling)},
                  {"eos_id", encoder.eos_id}};
  j["train"] = {{"learning_rate", train.learning_rate},
                {"batch_size", train.batch_size},
                {"epochs", train.epochs},
                {"warmup_steps", train.warmup_steps},
                {"temperature", train.temperature},
                {"weight_decay", train.weight_decay},
                {"lora_rank", train.lora_rank},
                {"lora_alpha", train.lora_alpha}};
  j["gen"] = {{"topics_per_split", gen.topics_per_split},
              {"pairs_per_split", gen.pairs_per_split},
              {"vocab_size", gen.vocab_size},
              {"keywords_per_topic", gen.keywords_per_topic},
              {"query_keywords", gen.query_keywords},
              {"dev_queries_per_topic", gen.dev_queries_per_topic},
              {"test_queries_per_topic", gen.test_queries_per_topic},
              {"max_filler", gen.max_filler}};
  j["sweep"] = json::parse(sweep.to_json());
  if (prompt_pool) j["prompt_pool"] = *prompt_pool;
  if (subsample_train_pairs) j["subsample_train_pairs"] = *subsample_train_pairs;
  return j.dump(2);
}

std::string PipelineConfig::config_hash() const {
  // Paths are excluded: the hash names the experiment, not where it ran.
  json j = json::parse(to_json_text());
  j.erase("paths");
  return hex64(fnv1a64(j.dump()));
}

std::filesystem::path expert_checkpoint_path(const PipelineConfig& cfg,
                                             const std::string& id) {
  return cfg.paths.checkpoint_dir / ("expert_" + id + ".ckpt");
}

std::filesystem::path base_checkpoint_path(const PipelineConfig& cfg) {
  return cfg.paths.checkpoint_dir / "base.ckpt";
}

std::filesystem::path dataset_path(const PipelineConfig& cfg,
                                   const std::string& name) {
  return cfg.paths.data_dir / (name + ".jsonl");
}

void cmd_gen_data(const PipelineConfig& cfg) {
  std::filesystem::create_directories(cfg.paths.data_dir);
  ToySets sets = generate_toy_sets(cfg.gen);

  std::optional<PromptPool> pool;
  if (cfg.prompt_pool) pool = load_prompt_pool(*cfg.prompt_pool);
  auto attach_prompts = [&](RetrievalSet& set, std::uint64_t stream) {
    if (!pool) return;
    set.prompts =
        assign_prompts(set.queries, *pool, Rng(cfg.seed).fork(stream).next_u64());
  };

  for (std::size_t i = 0; i < sets.splits.size(); ++i) {
    attach_prompts(sets.splits[i], 0x9000 + i);
    save_retrieval_set(sets.splits[i],
                       dataset_path(cfg, sets.splits[i].split));
  }
  attach_prompts(sets.dev, 0x9100);
  attach_prompts(sets.test, 0x9101);
  save_retrieval_set(sets.dev, dataset_path(cfg, "dev"));
  save_retrieval_set(sets.test, dataset_path(cfg, "test"));

  json manifest;
  manifest["config_hash"] = cfg.config_hash();
  manifest["seed"] = cfg.seed;
  manifest["files"] = json::array();
  for (const std::string& name :
       {std::string("med_synth"), std::string("med_real"), std::string("search"),
        std::string("nlu"), std::string("dev"), std::string("test")}) {
    manifest["files"].push_back(dataset_path(cfg, name).filename().string());
  }
  write_text(cfg.paths.data_dir / "manifest.json", manifest.dump(2) + "\n");
}

std::filesystem::path cmd_train(const PipelineConfig& cfg,
                                const std::string& split) {
  const bool known = split == "pooled" ||
                     std::find(kSplitNames.begin(), kSplitNames.end(), split) !=
                         kSplitNames.end();
  if (!known) {
    throw ConfigError("unknown training split '" + split +
                      "' (expected one of med_synth|med_real|search|nlu|pooled)");
  }
  std::filesystem::create_directories(cfg.paths.checkpoint_dir);

  Checkpoint base = init_encoder_params(cfg.encoder, cfg.seed);
  stamp(base, cfg);
  save_checkpoint(base, base_checkpoint_path(cfg));

  std::vector<Triplet> triplets = training_triplets(cfg, split);
  if (triplets.empty()) {
    throw std::runtime_error("no training triplets for split '" + split + "'");
  }
  TrainConfig tc = cfg.train;
  tc.seed = Rng(cfg.seed).fork(fnv1a64("train:" + split)).next_u64();

  TrainResult result =
      train(base, make_batches(triplets, tc.batch_size), cfg.encoder, tc);

  Checkpoint expert = apply_adapter(base, result.adapter);
  expert.meta()["expert_id"] = split;
  stamp(expert, cfg);
  const std::filesystem::path out = expert_checkpoint_path(cfg, split);
  save_checkpoint(expert, out);
  save_adapter(result.adapter,
               cfg.paths.checkpoint_dir / ("adapter_" + split + ".lora"));
  write_loss_trace_csv(result.trace,
                       cfg.paths.checkpoint_dir / ("loss_" + split + ".csv"));
  return out;
}

std::filesystem::path cmd_merge(const PipelineConfig& cfg,
                                const std::filesystem::path& recipe_file,
                                const std::filesystem::path& out_path) {
  MergeRecipe recipe = MergeRecipe::load(recipe_file);
  std::map<std::string, Checkpoint> loaded;
  std::map<std::string, const Checkpoint*> experts;
  for (const std::string& id : recipe.experts) {
    loaded.emplace(id, load_checkpoint(expert_checkpoint_path(cfg, id)));
  }
  for (const auto& [id, ckpt] : loaded) experts[id] = &ckpt;

  Checkpoint base;
  const Checkpoint* base_ptr = nullptr;
  if (recipe.method != MergeMethod::kLinear) {
    base = load_checkpoint(base_checkpoint_path(cfg));
    base_ptr = &base;
  }
  Checkpoint merged = apply_recipe(recipe, experts, base_ptr);
  stamp(merged, cfg);
  std::filesystem::create_directories(out_path.parent_path());
  save_checkpoint(merged, out_path);
  return out_path;
}

EvalOutcome cmd_eval(const PipelineConfig& cfg,
                     const std::filesystem::path& checkpoint_path,
                     const std::filesystem::path& dataset_file,
                     const std::string& out_prefix) {
  Checkpoint params = load_checkpoint(checkpoint_path);
  RetrievalSet set = load_retrieval_set(dataset_file);
  Encoder encoder(params, nullptr, cfg.encoder);

  EvalOutcome outcome;
  outcome.evaluation = evaluate_on_set(encoder, set);
  if (set.split == "mixed") {
    outcome.report = aggregate_mixed(outcome.evaluation);
  } else {
    outcome.report.per_dataset[set.split] = outcome.evaluation.overall;
    outcome.report.avg_all = outcome.evaluation.overall;
  }

  std::filesystem::create_directories(cfg.paths.report_dir);
  save_run(outcome.evaluation.run,
           cfg.paths.report_dir / (out_prefix + "_run.txt"));
  json j = report_json(outcome.report);
  j["config_hash"] = cfg.config_hash();
  j["seed"] = cfg.seed;
  j["checkpoint"] = checkpoint_path.filename().string();
  j["dataset"] = dataset_file.filename().string();
  write_text(cfg.paths.report_dir / (out_prefix + "_report.json"),
             j.dump(2) + "\n");
  write_text(cfg.paths.report_dir / (out_prefix + "_report.txt"),
             report_to_table(outcome.report));
  return outcome;
}

namespace {

Leaderboard sweep_with_method(const PipelineConfig& cfg, MergeMethod method,
                              const std::map<std::string, const Checkpoint*>& experts,
                              const Checkpoint& base, const RetrievalSet& dev) {
  SweepPlan plan = cfg.sweep;
  plan.method = method;
  SweepContext ctx;
  ctx.experts = experts;
  ctx.base = &base;
  ctx.devset = &dev;
  ctx.encoder = cfg.encoder;
  ctx.workers = cfg.workers;
  return run_sweep(ctx, plan);
}

}  // namespace

Leaderboard cmd_sweep(const PipelineConfig& cfg) {
  std::map<std::string, Checkpoint> loaded;
  std::map<std::string, const Checkpoint*> experts;
  for (const std::string& id : kSplitNames) {
    loaded.emplace(id, load_checkpoint(expert_checkpoint_path(cfg, id)));
  }
  for (const auto& [id, ckpt] : loaded) experts[id] = &ckpt;
  Checkpoint base = load_checkpoint(base_checkpoint_path(cfg));

  RetrievalSet dev = load_retrieval_set(dataset_path(cfg, "dev"));
  RetrievalSet dev_sub = subsample_devset(dev, cfg.sweep.dev_query_frac,
                                          cfg.sweep.dev_doc_frac, cfg.sweep.seed);

  Leaderboard board = sweep_with_method(cfg, cfg.sweep.method, experts, base, dev_sub);
  std::filesystem::create_directories(cfg.paths.report_dir);
  const std::string tag = "leaderboard_" + to_string(cfg.sweep.method);
  board.save(cfg.paths.report_dir / (tag + ".json"),
             cfg.paths.report_dir / (tag + ".csv"));
  return board;
}

StmOutcome cmd_stm(const PipelineConfig& cfg) {
  cmd_gen_data(cfg);

  std::vector<std::string> model_ids = kSplitNames;
  model_ids.push_back("pooled");
  std::map<std::string, Checkpoint> models;
  for (const std::string& id : model_ids) {
    cmd_train(cfg, id);
    models.emplace(id, load_checkpoint(expert_checkpoint_path(cfg, id)));
  }
  Checkpoint base = load_checkpoint(base_checkpoint_path(cfg));

  std::map<std::string, const Checkpoint*> experts;
  for (const std::string& id : kSplitNames) experts[id] = &models.at(id);

  RetrievalSet dev = load_retrieval_set(dataset_path(cfg, "dev"));
  RetrievalSet dev_sub = subsample_devset(dev, cfg.sweep.dev_query_frac,
                                          cfg.sweep.dev_doc_frac, cfg.sweep.seed);
  RetrievalSet test = load_retrieval_set(dataset_path(cfg, "test"));

  Leaderboard linear_board =
      sweep_with_method(cfg, MergeMethod::kLinear, experts, base, dev_sub);
  Leaderboard ties_board =
      sweep_with_method(cfg, MergeMethod::kTies, experts, base, dev_sub);
  std::filesystem::create_directories(cfg.paths.report_dir);
  linear_board.save(cfg.paths.report_dir / "leaderboard_linear.json",
                    cfg.paths.report_dir / "leaderboard_linear.csv");
  ties_board.save(cfg.paths.report_dir / "leaderboard_ties.json",
                  cfg.paths.report_dir / "leaderboard_ties.csv");

  const LeaderboardRow* best_linear = linear_board.best();
  const LeaderboardRow* best_ties = ties_board.best();
  if (best_linear == nullptr || best_ties == nullptr) {
    throw std::runtime_error("sweep produced no successful merge");
  }

  StmOutcome outcome;
  outcome.best_linear = best_linear->recipe;
  outcome.best_ties = best_ties->recipe;

  Checkpoint stm_linear = apply_recipe(best_linear->recipe, experts, &base);
  Checkpoint stm_ties = apply_recipe(best_ties->recipe, experts, &base);
  stamp(stm_linear, cfg);
  stamp(stm_ties, cfg);
  save_checkpoint(stm_linear, cfg.paths.checkpoint_dir / "stm_linear.ckpt");
  save_checkpoint(stm_ties, cfg.paths.checkpoint_dir / "stm_ties.ckpt");
  models.emplace("stm_linear", std::move(stm_linear));
  models.emplace("stm_ties", std::move(stm_ties));

  // Dev scores for every model through the same evaluation path the sweep
  // used; merged models inherit their leaderboard scores exactly.
  for (const std::string& id : model_ids) {
    Encoder encoder(models.at(id), nullptr, cfg.encoder);
    outcome.dev_ndcg10[id] = evaluate_on_set(encoder, dev_sub).ranking_score;
  }
  outcome.dev_ndcg10["stm_linear"] = best_linear->ndcg10;
  outcome.dev_ndcg10["stm_ties"] = best_ties->ndcg10;

  std::vector<std::string> report_ids = model_ids;
  report_ids.push_back("stm_linear");
  report_ids.push_back("stm_ties");
  for (const std::string& id : report_ids) {
    Encoder encoder(models.at(id), nullptr, cfg.encoder);
    outcome.test_reports[id] = aggregate_mixed(evaluate_on_set(encoder, test));
  }

  json j;
  j["config_hash"] = cfg.config_hash();
  j["seed"] = cfg.seed;
  j["dev_ndcg@10"] = outcome.dev_ndcg10;
  j["best_recipes"] = {
      {"linear", json::parse(outcome.best_linear.to_json())},
      {"ties", json::parse(outcome.best_ties.to_json())}};
  for (const std::string& id : report_ids) {
    j["test"][id] = report_json(outcome.test_reports[id]);
  }

  // Fig.-5-style coefficient view of the winning recipes.
  for (const auto& [tag, recipe] :
       {std::pair<std::string, const MergeRecipe*>{"linear", &outcome.best_linear},
        std::pair<std::string, const MergeRecipe*>{"ties", &outcome.best_ties}}) {
    json coeff;
    for (std::size_t k = 0; k < recipe->experts.size(); ++k) {
      coeff[recipe->experts[k]] = recipe->weights[k];
    }
    j["merge_coefficients"][tag] = coeff;
  }

  write_text(cfg.paths.report_dir / "stm_report.json", j.dump(2) + "\n");

  std::ostringstream table;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-12s %12s %12s %12s %12s\n", "model",
                "dev_ndcg10", "avg_medical", "avg_general", "avg_all");
  table << buf;
  for (const std::string& id : report_ids) {
    const MetricReport& r = outcome.test_reports[id];
    std::snprintf(buf, sizeof(buf), "%-12s %12.4f %12.4f %12.4f %12.4f\n",
                  id.c_str(), outcome.dev_ndcg10[id],
                  r.avg_medical.ndcg_at_10, r.avg_general.ndcg_at_10,
                  r.avg_all.ndcg_at_10);
    table << buf;
  }
  table << "\nbest linear recipe: " << outcome.best_linear.label() << "\n";
  table << "best ties recipe:   " << outcome.best_ties.label() << "\n";
  write_text(cfg.paths.report_dir / "stm_report.txt", table.str());
  return outcome;
}

}  // namespace stm
