#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hmeta/envs.hpp"
#include "hmeta/metarl.hpp"
#include "hmeta/policy.hpp"

namespace hmeta {

/// One experiment, fully described: task distribution, architecture,
/// training budget, eval schedule, output location, seed list. The JSON
/// form mirrors this struct section by section (see configs/example.json).
struct RunConfig {
  TaskDistribution dist;

  std::string architecture = "htrmrl";  // htrmrl | flat | recurrent
  PolicyConfig policy;                  // k and s come from `train` on use

  TrainConfig train;

  std::int64_t eval_every = 0;  // env steps between test evals; 0 = never
  std::int64_t eval_tasks = 10;
  std::int64_t eval_episodes = 5;
  std::int64_t checkpoint_every = 0;  // env steps; 0 = final only

  std::string out_dir = "runs/out";
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};

  /// Architecture config with k/s mirrored from the train section.
  PolicyConfig policy_config() const;
  void validate() const;
};

/// Strict parse: // and /* */ comments allowed, unknown keys rejected,
/// every value type-checked. Throws ConfigError with line/column
/// positions on malformed text and dotted key paths on schema errors.
RunConfig parse_run_config(const std::string& text);

/// Canonical form: sorted keys, two-space indent, trailing newline.
/// parse and serialize are mutually inverse on valid configs.
std::string serialize_run_config(const RunConfig& cfg);

/// parse_run_config over a file, applying `key=value` overrides first.
/// Paths are dotted (train.k=10, policy.d_model=32, env.mln=true); list
/// keys accept comma values (seeds=0,1,2).
RunConfig load_run_config(const std::string& path,
                          const std::vector<std::string>& overrides = {});

/// Override application on raw config text, exposed for tests.
std::string apply_overrides(const std::string& text,
                            const std::vector<std::string>& overrides);

/// FNV-1a over the canonical serialization, as 16 hex digits.
std::string config_hash(const RunConfig& cfg);

/// Layout of one run directory: config.json snapshot, metrics.csv,
/// checkpoints/, plots, and a manifest.json sealing the run. Refuses to
/// open a directory that already holds a completed run.
class ResultStore {
 public:
  explicit ResultStore(const std::string& dir);

  const std::string& dir() const { return dir_; }
  std::string path(const std::string& rel) const;
  void write_text(const std::string& rel, const std::string& content);
  std::string checkpoint_path(std::int64_t step) const;

  /// Writes manifest.json: version string, config hash, command, seed,
  /// architecture, completed flag. Call once, after all artifacts.
  void finalize(const RunConfig& cfg, const std::string& command,
                std::uint64_t seed);

  static bool completed(const std::string& dir);

 private:
  std::string dir_;
};

/// Output root: absolute out_dir is used as is; a relative one lands
/// under $HMETA_OUT when that is set.
std::string resolve_out_dir(const std::string& out_dir);

/// Trains one run per seed. Returns the run directories in seed order.
std::vector<std::string> cmd_train(const RunConfig& cfg);

struct EvalArgs {
  std::string run_dir;
  std::string checkpoint;  // empty: <run>/final.ckpt
  std::string split = "test";
  std::int64_t tasks = 20;
  std::int64_t episodes = 10;
  std::uint64_t seed = 0;
  std::string out_csv;  // empty: <run>/eval_<split>.csv
};

/// Frozen-weights adaptation over sampled tasks; per-task rows plus an
/// aggregate row with the standard error across tasks. Returns the CSV.
std::string cmd_eval(const EvalArgs& args);

struct AblateArgs {
  std::vector<std::int64_t> ks{25};
  std::vector<std::int64_t> ss{5};
  /// "", "sampling", "state_concat" or "blocks"; adds a variant axis.
  std::string compare;
};

struct AblateCell {
  std::int64_t k = 0;
  std::int64_t s = 0;
  std::string variant;  // "base" when no compare axis is active
};

std::vector<AblateCell> ablate_grid(const AblateArgs& args);

/// Trains every cell for every seed in the base config and aggregates
/// final train success as mean and standard error. Returns the table CSV
/// (also written to <out>/ablate.csv).
std::string cmd_ablate(const RunConfig& base, const AblateArgs& args);

struct BenchArgs {
  std::vector<std::int64_t> ks{2, 5, 10, 25};
  std::vector<std::int64_t> ss{2, 5, 10};
  std::int64_t d_model = 8;
  std::int64_t heads = 1;
  std::int64_t l1 = 1;
  std::int64_t l2 = 1;
};

/// Closed-form attention counts per grid cell, cross-checked against an
/// instrumented forward pass. Returns the counts CSV.
std::string cmd_bench_attention(const BenchArgs& args);

struct ExportArgs {
  std::string run_dir;
  std::string checkpoint;  // empty: <run>/final.ckpt
  std::int64_t tasks_per_family = 8;
  std::int64_t episodes = 10;
  std::uint64_t seed = 0;
};

/// Rolls out adaptation episodes per task and records the policy's task
/// embedding after each one; writes embeddings.csv plus (given two or
/// more families) a PCA scatter SVG with the silhouette score. Returns
/// the CSV.
std::string cmd_export_embeddings(const ExportArgs& args);

/// Entry point behind main(). Exit codes: 0 success, 1 usage or config
/// error, 2 runtime failure.
int run_cli(int argc, const char* const* argv);

}  // namespace hmeta
