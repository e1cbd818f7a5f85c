#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hmeta/cli.hpp"
#include "hmeta/errors.hpp"

namespace hmeta {

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"hierarchical transformer meta-RL on point-mass tasks"};
  app.require_subcommand(1);

  std::string config_path, out_dir, run_dir, checkpoint, out_csv;
  std::vector<std::string> overrides;
  std::int64_t only_seed = -1;

  CLI::App* train = app.add_subcommand("train", "meta-train, one run per seed");
  train->add_option("--config", config_path, "config JSON path")->required();
  train->add_option("--override", overrides,
                    "key=value config override, dotted paths");
  train->add_option("--seed", only_seed, "train this single seed");
  train->add_option("--out", out_dir, "output root, replaces config out_dir");

  EvalArgs eargs;
  CLI::App* eval = app.add_subcommand(
      "eval", "frozen-weights adaptation on sampled tasks");
  eval->add_option("--run", eargs.run_dir, "run directory")->required();
  eval->add_option("--checkpoint", eargs.checkpoint,
                   "checkpoint path, default <run>/final.ckpt");
  eval->add_option("--split", eargs.split, "task split")
      ->check(CLI::IsMember({"train", "test"}));
  eval->add_option("--tasks", eargs.tasks, "tasks to sample");
  eval->add_option("--episodes", eargs.episodes, "adaptation episodes + 1");
  eval->add_option("--seed", eargs.seed, "task sampling seed");
  eval->add_option("--out", eargs.out_csv, "output CSV path");

  AblateArgs aargs;
  std::string compare;
  CLI::App* ablate =
      app.add_subcommand("ablate", "train a K x S (and variant) grid");
  ablate->add_option("--config", config_path, "config JSON path")->required();
  ablate->add_option("--k", aargs.ks, "episode counts, comma separated")
      ->delimiter(',');
  ablate->add_option("--s", aargs.ss, "window lengths, comma separated")
      ->delimiter(',');
  ablate->add_option("--compare", compare,
                     "extra axis: sampling, state_concat or blocks")
      ->check(CLI::IsMember({"sampling", "state_concat", "blocks"}));
  ablate->add_option("--override", overrides,
                     "key=value config override, dotted paths");
  ablate->add_option("--seed", only_seed, "train this single seed per cell");
  ablate->add_option("--out", out_dir, "output root, replaces config out_dir");

  BenchArgs bargs;
  CLI::App* bench = app.add_subcommand(
      "bench-attention", "closed-form vs instrumented attention counts");
  bench->add_option("--k", bargs.ks, "episode counts")->delimiter(',');
  bench->add_option("--s", bargs.ss, "window lengths")->delimiter(',');
  bench->add_option("--d-model", bargs.d_model, "model width");
  bench->add_option("--heads", bargs.heads, "attention heads");
  bench->add_option("--l1", bargs.l1, "intra-episode blocks");
  bench->add_option("--l2", bargs.l2, "inter-episode blocks");
  bench->add_option("--out", out_csv, "write the CSV here instead of stdout");

  ExportArgs xargs;
  CLI::App* exp = app.add_subcommand(
      "export-embeddings", "task embeddings per adaptation episode");
  exp->add_option("--run", xargs.run_dir, "run directory")->required();
  exp->add_option("--checkpoint", xargs.checkpoint,
                  "checkpoint path, default <run>/final.ckpt");
  exp->add_option("--tasks", xargs.tasks_per_family, "tasks per family");
  exp->add_option("--episodes", xargs.episodes, "adaptation episodes");
  exp->add_option("--seed", xargs.seed, "task sampling seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*train) {
      RunConfig cfg = load_run_config(config_path, overrides);
      if (only_seed >= 0) {
        cfg.seeds = {static_cast<std::uint64_t>(only_seed)};
      }
      if (!out_dir.empty()) cfg.out_dir = out_dir;
      cmd_train(cfg);
      return 0;
    }
    if (*eval) {
      cmd_eval(eargs);
      return 0;
    }
    if (*ablate) {
      RunConfig cfg = load_run_config(config_path, overrides);
      if (only_seed >= 0) {
        cfg.seeds = {static_cast<std::uint64_t>(only_seed)};
      }
      if (!out_dir.empty()) cfg.out_dir = out_dir;
      aargs.compare = compare;
      cmd_ablate(cfg, aargs);
      return 0;
    }
    if (*bench) {
      const std::string csv = cmd_bench_attention(bargs);
      if (out_csv.empty()) {
        std::cout << csv;
      } else {
        std::ofstream os(out_csv, std::ios::binary);
        if (!os) throw ConfigError("cannot write " + out_csv);
        os << csv;
        std::cout << out_csv << "\n";
      }
      return 0;
    }
    if (*exp) {
      cmd_export_embeddings(xargs);
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace hmeta
