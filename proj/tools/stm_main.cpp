#include "stm/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

struct GlobalOpts {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::optional<int> budget;
};

stm::PipelineConfig load_config(const GlobalOpts& opts) {
  stm::PipelineConfig cfg = stm::PipelineConfig::load(opts.config_path);
  if (opts.seed) {
    cfg.seed = *opts.seed;
    cfg.gen.seed = *opts.seed;
    cfg.sweep.seed = *opts.seed;
  }
  if (opts.workers) cfg.workers = *opts.workers;
  if (opts.budget) cfg.sweep.budget = *opts.budget;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synthesize-train-merge pipeline for toy dense retrievers"};
  app.require_subcommand(1);

  GlobalOpts opts;
  app.add_option("--config", opts.config_path, "pipeline config (JSON)")
      ->required();
  app.add_option("--seed", opts.seed, "override the config seed");
  app.add_option("--workers", opts.workers, "override sweep worker count");
  app.add_option("--budget", opts.budget, "override sweep budget");

  auto* gen = app.add_subcommand("gen-data", "generate the toy four-split corpus");

  std::string train_split;
  auto* train = app.add_subcommand("train", "fine-tune one expert with LoRA");
  train->add_option("--split", train_split,
                    "med_synth|med_real|search|nlu|pooled")
      ->required();

  std::string recipe_file, merge_out;
  auto* merge = app.add_subcommand("merge", "merge experts with a recipe file");
  merge->add_option("--recipe", recipe_file, "recipe JSON file")->required();
  merge->add_option("--out", merge_out, "output checkpoint path")->required();

  auto* sweep = app.add_subcommand("sweep", "grid-search merge recipes on dev");

  std::string eval_ckpt, eval_data, eval_prefix = "eval";
  auto* eval = app.add_subcommand("eval", "score a checkpoint on a dataset");
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--dataset", eval_data, "dataset JSONL file")->required();
  eval->add_option("--prefix", eval_prefix, "report file prefix");

  auto* pipeline = app.add_subcommand(
      "stm", "run the full pipeline: gen-data, experts + pooled, sweeps, report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    stm::PipelineConfig cfg = load_config(opts);
    if (gen->parsed()) {
      cmd_gen_data(cfg);
      std::cout << "wrote datasets to " << cfg.paths.data_dir.string() << "\n";
    } else if (train->parsed()) {
      auto path = cmd_train(cfg, train_split);
      std::cout << "wrote " << path.string() << "\n";
    } else if (merge->parsed()) {
      auto path = cmd_merge(cfg, recipe_file, merge_out);
      std::cout << "wrote " << path.string() << "\n";
    } else if (sweep->parsed()) {
      stm::Leaderboard board = cmd_sweep(cfg);
      const stm::LeaderboardRow* best = board.best();
      if (best != nullptr) {
        std::cout << "best: " << best->recipe.label() << "  ndcg@10 "
                  << best->ndcg10 << "\n";
      }
      std::cout << "wrote leaderboard to " << cfg.paths.report_dir.string()
                << "\n";
    } else if (eval->parsed()) {
      stm::EvalOutcome out = cmd_eval(cfg, eval_ckpt, eval_data, eval_prefix);
      std::cout << stm::report_to_table(out.report);
    } else if (pipeline->parsed()) {
      stm::StmOutcome out = cmd_stm(cfg);
      std::cout << "best linear: " << out.best_linear.label() << "\n";
      std::cout << "best ties:   " << out.best_ties.label() << "\n";
      std::cout << "report: "
                << (cfg.paths.report_dir / "stm_report.txt").string() << "\n";
    }
  } catch (const stm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
