#pragma once

#include <cstdint>
#include <deque>
#include <ostream>
#include <vector>

#include "hmeta/rng.hpp"
#include "hmeta/tensor.hpp"

namespace hmeta {

struct Transition {
  std::vector<double> state;
  std::vector<double> action;
  double reward = 0.0;
  bool done = false;
};

struct Episode {
  std::int64_t id = 0;
  std::vector<Transition> steps;
  bool sealed = false;
};

/// Anything that can resolve an episode id to its transitions. The live
/// ring buffer implements it for acting; the rollout collector keeps a
/// full archive so recorded batches stay resolvable after ring eviction.
class EpisodeStore {
 public:
  virtual const Episode* find(std::int64_t id) const = 0;
  virtual ~EpisodeStore() = default;
};

/// Ring of the most recent episodes for one task instance. The last entry
/// is the active episode until a done transition seals it; a new episode
/// opens on the next push and the oldest is evicted beyond capacity.
class EpisodeBuffer : public EpisodeStore {
 public:
  explicit EpisodeBuffer(std::int64_t capacity);

  void push(Transition t);
  void clear();

  const std::deque<Episode>& episodes() const { return episodes_; }
  std::int64_t capacity() const { return capacity_; }
  /// Id the next opened episode will get.
  std::int64_t next_id() const { return next_id_; }
  std::int64_t total_transitions() const;

  const Episode* find(std::int64_t id) const override;

 private:
  std::int64_t capacity_;
  std::int64_t next_id_ = 0;
  std::deque<Episode> episodes_;
};

/// One sampled window: len slots starting at `start` in the episode. When
/// tail is set the final slot is synthetic, holding the decision-point
/// state with zero action and reward, and only len-1 slots come from the
/// stored transitions.
struct WindowRef {
  std::int64_t episode_id = 0;
  std::int32_t start = 0;
  std::int32_t len = 0;
  bool tail = false;
};

/// K windows of up to S slots. The last window always ends at the agent's
/// current decision point. Slots are left padded to S with masked zeros
/// when materialized.
struct SequenceBatch {
  std::int64_t k = 0;
  std::int64_t s = 0;
  std::int64_t state_dim = 0;
  std::int64_t action_dim = 0;
  std::vector<WindowRef> windows;
  std::vector<double> tail_state;

  std::int64_t slot_dim() const { return state_dim + action_dim + 2; }
};

/// Window from each of the K most recent episodes (uniform start for full
/// episodes, whole episode when shorter than S); the current episode
/// contributes its suffix ending at current_state. With fewer than K
/// episodes stored, episodes are drawn with replacement.
SequenceBatch sample_batch(const EpisodeBuffer& buffer, std::int64_t k,
                           std::int64_t s, Rng& rng,
                           const std::vector<double>& current_state,
                           std::int64_t action_dim);

/// Ablation sampler: the first K-1 windows come from uniformly random
/// episodes with replacement regardless of how many are stored; the K-th
/// is still the current-episode suffix.
SequenceBatch sample_batch_random_episodes(const EpisodeBuffer& buffer,
                                           std::int64_t k, std::int64_t s,
                                           Rng& rng,
                                           const std::vector<double>& current_state,
                                           std::int64_t action_dim);

/// Expands a batch to [K,S,slot_dim] with its validity mask [K,S]. Slot
/// layout is [state, action, reward, done].
Tensor batch_inputs(const SequenceBatch& batch, const EpisodeStore& store,
                    Tensor* mask);

/// Expands many batches into one [sum K, S, slot_dim] block (row-major
/// concatenation) for batched training passes.
Tensor batch_inputs_many(const std::vector<const SequenceBatch*>& batches,
                         const EpisodeStore& store, Tensor* mask);

/// Flat-baseline context: the n-1 most recent transitions of the task
/// stream (crossing episode boundaries) plus the current-state slot,
/// left padded to n.
void recent_window(const EpisodeBuffer& buffer, std::int64_t n,
                   const std::vector<double>& current_state,
                   std::int64_t action_dim, Tensor* x, Tensor* mask);

/// Newline-delimited JSON dump of stored episodes for offline inspection.
void dump_trajectories(std::ostream& os, const std::deque<Episode>& episodes);

}  // namespace hmeta
