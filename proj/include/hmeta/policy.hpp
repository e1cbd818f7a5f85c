#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "hmeta/graph.hpp"
#include "hmeta/memory.hpp"
#include "hmeta/params.hpp"
#include "hmeta/rng.hpp"
#include "hmeta/tensor.hpp"
#include "hmeta/transformer.hpp"

namespace hmeta {

enum class ActMode { kSample, kMean };

struct GaussianAction {
  std::vector<double> action;      // clamped to the action box
  std::vector<double> raw_action;  // pre-clamp sample; logp matches this one
  double logp = 0.0;
  std::vector<double> mean;
  std::vector<double> sigma;
};

/// Everything needed to re-run a decision point under new weights. Which
/// fields are populated depends on the policy that produced it.
struct Conditioning {
  SequenceBatch seq;                // hierarchical: K window refs
  Tensor window_x;                  // flat: [1,n,slot_dim] raw window
  Tensor window_mask;               // flat: [1,n]
  std::vector<double> hidden;       // recurrent: hidden before this step
  std::vector<double> prev_action;  // recurrent: previous executed action
  double prev_reward = 0.0;
};

struct ActOutput {
  GaussianAction action;
  double value = 0.0;
  Conditioning cond;
};

/// One decision point as recorded during collection. Advantage and return
/// are filled in after the rollout completes.
struct StepRecord {
  std::vector<double> state;
  std::vector<double> action;  // raw sample fed back into the PPO ratio
  double logp = 0.0;
  double value = 0.0;
  double reward = 0.0;
  bool done = false;
  Conditioning cond;
  double advantage = 0.0;
  double ret = 0.0;
};

/// Per-step graph nodes for the PPO objective; every tensor is [M,1].
struct StepEval {
  Val logp;
  Val entropy;
  Val value;
};

struct PolicyConfig {
  std::int64_t state_dim = 6;
  std::int64_t action_dim = 2;
  std::int64_t d_model = 64;
  std::int64_t heads = 4;
  std::int64_t d_ff = 128;
  std::int64_t blocks = 2;
  std::int64_t blocks_t2 = 0;   // inter-episode stack depth; 0: same as blocks
  std::int64_t k = 25;           // episodes per context
  std::int64_t s = 5;            // window length
  std::int64_t flat_n = 5;       // flat baseline context length
  std::int64_t gru_hidden = 64;
  std::int64_t head_hidden = 64;
  bool state_concat = true;      // false: heads see the task code alone
  bool random_episode_windows = false;  // ablation sampler
  double logstd_lo = -5.0;
  double logstd_hi = 2.0;

  std::int64_t slot_dim() const { return state_dim + action_dim + 2; }
};

/// Shared two-layer perceptron producing (mu, log-std) plus a value head
/// with its own weights over the same input.
class GaussianHead {
 public:
  GaussianHead(ParamRegistry& reg, const std::string& prefix,
               std::int64_t in_dim, std::int64_t hidden,
               std::int64_t action_dim, Rng& rng);

  struct Out {
    Val mu;      // [M,n]
    Val logsig;  // [M,n], already clamped
    Val value;   // [M,1]
  };
  Out forward(Graph& g, Val input, double lo, double hi) const;

 private:
  Parameter *w1_, *b1_, *mu_w_, *mu_b_, *sig_w_, *sig_b_;
  Parameter *vw1_, *vb1_, *vw2_, *vb2_;
};

class Policy {
 public:
  explicit Policy(PolicyConfig cfg);
  virtual ~Policy() = default;
  Policy(const Policy&) = delete;
  Policy& operator=(const Policy&) = delete;

  virtual std::string kind() const = 0;

  const PolicyConfig& config() const { return cfg_; }
  ParamRegistry& params() { return reg_; }
  const ParamRegistry& params() const { return reg_; }

  /// Collection hooks. begin_task resets whatever persists across episodes;
  /// observe_step feeds back the executed action and its outcome.
  virtual void begin_task() {}
  virtual void observe_step(const std::vector<double>& next_state,
                            const std::vector<double>& executed_action,
                            double reward, bool done);

  /// One decision point; the policy pulls its conditioning from the buffer
  /// and reports it in the output for later replay.
  virtual ActOutput act(const std::vector<double>& state,
                        const EpisodeBuffer& buffer, Rng& rng,
                        ActMode mode) = 0;

  /// The context vector the action heads condition on, for projection.
  virtual std::vector<double> task_embedding(const std::vector<double>& state,
                                             const EpisodeBuffer& buffer,
                                             Rng& rng) = 0;

  /// Recomputes logp/entropy/value for recorded steps under the current
  /// weights, as graph nodes. `store` resolves recorded window refs.
  virtual StepEval evaluate_actions(Graph& g,
                                    const std::vector<const StepRecord*>& steps,
                                    const EpisodeStore& store) = 0;

  /// True when minibatches must be contiguous runs within one task.
  virtual bool sequential_minibatches() const { return false; }

  /// Attention score elements accumulated by any encoder stacks.
  std::uint64_t attn_ops = 0;

 protected:
  PolicyConfig cfg_;
  ParamRegistry reg_;
};

class HierarchicalPolicy : public Policy {
 public:
  HierarchicalPolicy(PolicyConfig cfg, std::uint64_t seed);

  std::string kind() const override { return "htrmrl"; }

  ActOutput act(const std::vector<double>& state, const EpisodeBuffer& buffer,
                Rng& rng, ActMode mode) override;
  /// Same, for an already-sampled context batch.
  ActOutput act_on_batch(const std::vector<double>& state,
                         const SequenceBatch& batch, const EpisodeStore& store,
                         Rng& rng, ActMode mode);

  std::vector<double> task_embedding(const std::vector<double>& state,
                                     const EpisodeBuffer& buffer,
                                     Rng& rng) override;
  /// The task code for one context batch, length d_model.
  std::vector<double> export_task_embedding(const SequenceBatch& batch,
                                            const EpisodeStore& store);

  StepEval evaluate_actions(Graph& g,
                            const std::vector<const StepRecord*>& steps,
                            const EpisodeStore& store) override;

  const EncoderStack& episode_encoder() const { return *t1_; }
  const EncoderStack& task_encoder() const { return *t2_; }

 private:
  /// z_task rows [M,d_model] for M recorded batches.
  Val encode_contexts(Graph& g,
                      const std::vector<const SequenceBatch*>& batches,
                      const EpisodeStore& store);
  Val head_input(Graph& g, Val z_task, const Tensor& states);

  std::unique_ptr<EncoderStack> t1_, t2_;
  Parameter *phi2_w_, *phi2_b_;
  std::unique_ptr<GaussianHead> head_;
};

class FlatTransformerPolicy : public Policy {
 public:
  FlatTransformerPolicy(PolicyConfig cfg, std::uint64_t seed);

  std::string kind() const override { return "flat"; }

  ActOutput act(const std::vector<double>& state, const EpisodeBuffer& buffer,
                Rng& rng, ActMode mode) override;
  /// Same, for an explicit [1,n,slot_dim] window.
  ActOutput act_on_window(const Tensor& x, const Tensor& mask, Rng& rng,
                          ActMode mode);

  std::vector<double> task_embedding(const std::vector<double>& state,
                                     const EpisodeBuffer& buffer,
                                     Rng& rng) override;

  StepEval evaluate_actions(Graph& g,
                            const std::vector<const StepRecord*>& steps,
                            const EpisodeStore& store) override;

  const EncoderStack& encoder() const { return *enc_; }

 private:
  std::unique_ptr<EncoderStack> enc_;
  std::unique_ptr<GaussianHead> head_;
};

class RecurrentPolicy : public Policy {
 public:
  RecurrentPolicy(PolicyConfig cfg, std::uint64_t seed);

  std::string kind() const override { return "recurrent"; }

  void begin_task() override;
  void observe_step(const std::vector<double>& next_state,
                    const std::vector<double>& executed_action, double reward,
                    bool done) override;

  ActOutput act(const std::vector<double>& state, const EpisodeBuffer& buffer,
                Rng& rng, ActMode mode) override;

  std::vector<double> task_embedding(const std::vector<double>& state,
                                     const EpisodeBuffer& buffer,
                                     Rng& rng) override;

  StepEval evaluate_actions(Graph& g,
                            const std::vector<const StepRecord*>& steps,
                            const EpisodeStore& store) override;

  bool sequential_minibatches() const override { return true; }

  const std::vector<double>& hidden() const { return hidden_; }

 private:
  Val gru_step(Graph& g, Val input, Val h) const;
  Val head_input(Graph& g, Val h, const Tensor& states);

  Parameter *wz_, *uz_, *bz_, *wr_, *ur_, *br_;
  Parameter *wn_, *un_, *bn_i_, *bn_h_;
  Parameter *phi2_w_, *phi2_b_;
  std::unique_ptr<GaussianHead> head_;

  std::vector<double> hidden_;
  std::vector<double> prev_action_;
  double prev_reward_ = 0.0;
};

/// kind: "htrmrl" | "flat" | "recurrent". Ablation variants come from the
/// config flags (state_concat, random_episode_windows).
std::unique_ptr<Policy> make_policy(const std::string& kind, PolicyConfig cfg,
                                    std::uint64_t seed);

}  // namespace hmeta
