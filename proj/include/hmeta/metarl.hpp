#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "hmeta/envs.hpp"
#include "hmeta/memory.hpp"
#include "hmeta/optim.hpp"
#include "hmeta/policy.hpp"
#include "hmeta/rng.hpp"

namespace hmeta {

/// Outer-loop settings. k and s mirror the policy architecture and are
/// validated against it before any rollout work.
struct TrainConfig {
  std::int64_t meta_steps = 2'000'000;
  std::int64_t tasks_per_batch = 8;
  std::int64_t episodes_per_task = 10;
  std::int64_t k = 25;
  std::int64_t s = 5;
  double clip_eps = 0.2;
  std::int64_t ppo_epochs = 4;
  std::int64_t minibatch = 256;
  double value_coef = 0.5;
  double entropy_coef = 0.01;
  double gae_lambda = 0.95;
  double lr = 3e-4;
  double grad_clip = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Episode archive for replay. Recorded windows reference episodes by id;
/// the live ring forgets old ones, this map does not.
class ArchiveStore : public EpisodeStore {
 public:
  void add(Episode e);
  const Episode* find(std::int64_t id) const override;
  std::int64_t size() const { return static_cast<std::int64_t>(by_id_.size()); }

 private:
  std::unordered_map<std::int64_t, Episode> by_id_;
};

struct TaskRollout {
  TaskSpec task;
  std::vector<StepRecord> steps;        // contiguous; episodes end at done
  std::vector<double> episode_returns;  // discounted, one per episode
  std::vector<bool> episode_success;
};

struct RolloutBatch {
  std::vector<TaskRollout> tasks;
  ArchiveStore archive;
  bool advantages_ready = false;

  std::int64_t total_steps() const;
  std::vector<const StepRecord*> all_steps() const;
};

/// Runs tasks_per_batch fresh tasks for episodes_per_task episodes each,
/// acting in sample mode, and records everything a PPO epoch needs.
RolloutBatch collect_rollouts(Policy& policy, const TaskDistribution& dist,
                              const TrainConfig& cfg, Rng& rng);

/// Advantages and returns for one episode run to termination.
/// Pre-normalization values.
void gae_episode(const std::vector<double>& rewards,
                 const std::vector<double>& values, double gamma,
                 double lambda, std::vector<double>* advantages,
                 std::vector<double>* returns);

/// Fills advantage/ret on every record, then normalizes the advantages
/// across the whole batch (mean 0, std 1, epsilon 1e-8).
void compute_gae(RolloutBatch& batch, double gamma, double lambda);

struct PpoLossParts {
  Val surrogate;   // mean clipped surrogate, before negation
  Val value_loss;  // mean squared error, before its coefficient
  Val entropy;     // mean policy entropy
  Val logp_mean;   // mean re-evaluated log-prob, for the KL diagnostic
  Val total;
};

/// The clipped-surrogate objective over the given records as one graph:
/// -surrogate + value_coef * value_loss - entropy_coef * entropy.
Val build_ppo_loss(Graph& g, Policy& policy,
                   const std::vector<const StepRecord*>& steps,
                   const EpisodeStore& store, const TrainConfig& cfg,
                   PpoLossParts* parts = nullptr);

struct PpoStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double grad_norm = 0.0;  // mean pre-clip gradient norm
  std::int64_t minibatches = 0;
};

/// In-place PPO epochs over the batch. Throws NumericError with context
/// when a loss turns non-finite.
PpoStats ppo_update(Policy& policy, const RolloutBatch& batch,
                    const TrainConfig& cfg, OptimState& optim, Rng& rng);

struct MetricsRow {
  std::int64_t env_steps = 0;
  std::string split;  // "train" | "test"
  std::string task_family;
  double success_rate = 0.0;
  double mean_return = 0.0;  // discounted
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double wall_time = 0.0;  // seconds since training started
};

void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows);

struct AdaptResult {
  std::vector<bool> success;          // one flag per episode
  std::vector<double> disc_returns;  // discounted episode returns
};

/// Frozen-weights adaptation on one task: n_episodes episodes, sampling
/// for the first n-1 and acting on the mean for the last one.
AdaptResult adapt_and_eval(Policy& policy, const TaskSpec& task,
                           std::int64_t n_episodes, std::int64_t k,
                           std::int64_t s, Rng& rng);

struct MetaTrainOptions {
  std::int64_t eval_every = 0;  // env steps between test evals; 0 = never
  std::int64_t eval_tasks = 10;
  std::int64_t eval_episodes = 5;
  std::int64_t checkpoint_every = 0;  // env steps; 0 = final only
  std::function<void(const Policy&, std::int64_t)> on_checkpoint;
  std::function<void(const MetricsRow&)> on_metrics;  // fires per row
};

struct TrainResult {
  std::unique_ptr<Policy> policy;
  std::vector<MetricsRow> metrics;
  std::int64_t env_steps = 0;
  std::int64_t updates = 0;
};

/// collect -> gae -> update until the next batch would overshoot
/// meta_steps. Evaluations and checkpoints run on env-step schedules.
TrainResult meta_train(const std::string& policy_kind,
                       const PolicyConfig& pcfg, const TrainConfig& tcfg,
                       const TaskDistribution& dist,
                       const MetaTrainOptions& opts = {});

}  // namespace hmeta
