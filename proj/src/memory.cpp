#include "hmeta/memory.hpp"

#include <nlohmann/json.hpp>

#include "hmeta/errors.hpp"

namespace hmeta {

EpisodeBuffer::EpisodeBuffer(std::int64_t capacity) : capacity_(capacity) {
  if (capacity < 1) throw ContractError("buffer capacity must be >= 1");
}

void EpisodeBuffer::push(Transition t) {
  if (episodes_.empty() || episodes_.back().sealed) {
    episodes_.push_back(Episode{next_id_++, {}, false});
  }
  Episode& active = episodes_.back();
  const bool done = t.done;
  active.steps.push_back(std::move(t));
  if (done) active.sealed = true;
  while (static_cast<std::int64_t>(episodes_.size()) > capacity_)
    episodes_.pop_front();
}

void EpisodeBuffer::clear() {
  episodes_.clear();
  next_id_ = 0;
}

std::int64_t EpisodeBuffer::total_transitions() const {
  std::int64_t n = 0;
  for (const auto& e : episodes_) n += static_cast<std::int64_t>(e.steps.size());
  return n;
}

const Episode* EpisodeBuffer::find(std::int64_t id) const {
  for (const auto& e : episodes_)
    if (e.id == id) return &e;
  return nullptr;
}

namespace {

// virtual view of an episode: stored transitions plus, for the active one,
// the synthetic decision-point slot
struct VirtualEp {
  std::int64_t id;
  std::int64_t stored;  // transitions on record
  bool active;          // owns the synthetic tail slot
  std::int64_t len() const { return stored + (active ? 1 : 0); }
};

std::vector<VirtualEp> virtual_episodes(const EpisodeBuffer& buffer) {
  std::vector<VirtualEp> eps;
  for (const auto& e : buffer.episodes())
    eps.push_back({e.id, static_cast<std::int64_t>(e.steps.size()), false});
  if (eps.empty() || buffer.episodes().back().sealed) {
    eps.push_back({buffer.next_id(), 0, true});
  } else {
    eps.back().active = true;
  }
  return eps;
}

WindowRef random_window(const VirtualEp& ep, std::int64_t s, Rng& rng) {
  const std::int64_t len = ep.len();
  WindowRef w;
  w.episode_id = ep.id;
  if (len <= s) {
    w.start = 0;
    w.len = static_cast<std::int32_t>(len);
  } else {
    w.start = static_cast<std::int32_t>(rng.uniform_int(len - s + 1));
    w.len = static_cast<std::int32_t>(s);
  }
  // the synthetic slot sits at virtual index `stored`
  w.tail = ep.active && (w.start + w.len == ep.stored + 1);
  return w;
}

WindowRef suffix_window(const VirtualEp& ep, std::int64_t s) {
  const std::int64_t len = ep.len();
  WindowRef w;
  w.episode_id = ep.id;
  w.len = static_cast<std::int32_t>(len < s ? len : s);
  w.start = static_cast<std::int32_t>(len - w.len);
  w.tail = true;
  return w;
}

SequenceBatch sample_impl(const EpisodeBuffer& buffer, std::int64_t k,
                          std::int64_t s, Rng& rng,
                          const std::vector<double>& current_state,
                          std::int64_t action_dim, bool random_episodes) {
  if (k < 1 || s < 1) throw ContractError("sampler needs K >= 1 and S >= 1");
  if (current_state.empty()) throw ContractError("current state is empty");

  const std::vector<VirtualEp> eps = virtual_episodes(buffer);
  const std::int64_t avail = static_cast<std::int64_t>(eps.size());

  SequenceBatch batch;
  batch.k = k;
  batch.s = s;
  batch.state_dim = static_cast<std::int64_t>(current_state.size());
  batch.action_dim = action_dim;
  batch.tail_state = current_state;
  batch.windows.reserve(k);

  for (std::int64_t i = 0; i + 1 < k; ++i) {
    const VirtualEp* src;
    if (!random_episodes && avail >= k) {
      // one window from each of the K most recent, oldest first
      src = &eps[avail - k + i];
    } else {
      src = &eps[rng.uniform_int(static_cast<std::uint64_t>(avail))];
    }
    batch.windows.push_back(random_window(*src, s, rng));
  }
  batch.windows.push_back(suffix_window(eps.back(), s));
  return batch;
}

}  // namespace

SequenceBatch sample_batch(const EpisodeBuffer& buffer, std::int64_t k,
                           std::int64_t s, Rng& rng,
                           const std::vector<double>& current_state,
                           std::int64_t action_dim) {
  return sample_impl(buffer, k, s, rng, current_state, action_dim, false);
}

SequenceBatch sample_batch_random_episodes(const EpisodeBuffer& buffer,
                                           std::int64_t k, std::int64_t s,
                                           Rng& rng,
                                           const std::vector<double>& current_state,
                                           std::int64_t action_dim) {
  return sample_impl(buffer, k, s, rng, current_state, action_dim, true);
}

namespace {

void write_slot(double* dst, const std::vector<double>& state,
                const std::vector<double>& action, double reward, bool done,
                std::int64_t state_dim, std::int64_t action_dim) {
  std::int64_t j = 0;
  for (std::int64_t i = 0; i < state_dim; ++i) dst[j++] = state[i];
  for (std::int64_t i = 0; i < action_dim; ++i)
    dst[j++] = i < static_cast<std::int64_t>(action.size()) ? action[i] : 0.0;
  dst[j++] = reward;
  dst[j] = done ? 1.0 : 0.0;
}

void materialize_into(const SequenceBatch& batch, const EpisodeStore& store,
                      double* x, double* mask) {
  const std::int64_t s = batch.s;
  const std::int64_t dim = batch.slot_dim();
  static const std::vector<double> kNoAction;
  for (std::int64_t w = 0; w < batch.k; ++w) {
    const WindowRef& ref = batch.windows[w];
    const std::int64_t pad = s - ref.len;
    const std::int64_t stored_slots = ref.len - (ref.tail ? 1 : 0);
    const Episode* ep = nullptr;
    if (stored_slots > 0) {
      ep = store.find(ref.episode_id);
      if (!ep)
        throw ContractError("batch references unknown episode " +
                            std::to_string(ref.episode_id));
      if (ref.start + stored_slots > static_cast<std::int64_t>(ep->steps.size()))
        throw ContractError("window exceeds stored episode length");
    }
    for (std::int64_t t = 0; t < s; ++t) {
      double* dst = x + (w * s + t) * dim;
      if (t < pad) {
        for (std::int64_t j = 0; j < dim; ++j) dst[j] = 0.0;
        mask[w * s + t] = 0.0;
        continue;
      }
      mask[w * s + t] = 1.0;
      const std::int64_t slot = t - pad;  // 0..len-1 within the window
      if (ref.tail && slot == ref.len - 1) {
        write_slot(dst, batch.tail_state, kNoAction, 0.0, false,
                   batch.state_dim, batch.action_dim);
      } else {
        const Transition& tr = ep->steps[ref.start + slot];
        write_slot(dst, tr.state, tr.action, tr.reward, tr.done,
                   batch.state_dim, batch.action_dim);
      }
    }
  }
}

}  // namespace

Tensor batch_inputs(const SequenceBatch& batch, const EpisodeStore& store,
                    Tensor* mask) {
  Tensor x({batch.k, batch.s, batch.slot_dim()});
  Tensor m({batch.k, batch.s});
  materialize_into(batch, store, x.data(), m.data());
  if (mask) *mask = std::move(m);
  return x;
}

Tensor batch_inputs_many(const std::vector<const SequenceBatch*>& batches,
                         const EpisodeStore& store, Tensor* mask) {
  if (batches.empty()) throw ContractError("no batches to materialize");
  const std::int64_t k = batches[0]->k;
  const std::int64_t s = batches[0]->s;
  const std::int64_t dim = batches[0]->slot_dim();
  const std::int64_t m = static_cast<std::int64_t>(batches.size());
  Tensor x({m * k, s, dim});
  Tensor msk({m * k, s});
  for (std::int64_t i = 0; i < m; ++i) {
    const SequenceBatch& b = *batches[i];
    if (b.k != k || b.s != s || b.slot_dim() != dim)
      throw ShapeError("mixed batch shapes in one materialization");
    materialize_into(b, store, x.data() + i * k * s * dim,
                     msk.data() + i * k * s);
  }
  if (mask) *mask = std::move(msk);
  return x;
}

void recent_window(const EpisodeBuffer& buffer, std::int64_t n,
                   const std::vector<double>& current_state,
                   std::int64_t action_dim, Tensor* x, Tensor* mask) {
  if (n < 1) throw ContractError("recent_window needs n >= 1");
  const std::int64_t state_dim = static_cast<std::int64_t>(current_state.size());
  const std::int64_t dim = state_dim + action_dim + 2;
  *x = Tensor({1, n, dim});
  *mask = Tensor({1, n});

  // gather the last n-1 transitions, newest last
  std::vector<const Transition*> recent;
  for (auto ep = buffer.episodes().rbegin();
       ep != buffer.episodes().rend() &&
       static_cast<std::int64_t>(recent.size()) < n - 1;
       ++ep) {
    for (auto tr = ep->steps.rbegin();
         tr != ep->steps.rend() &&
         static_cast<std::int64_t>(recent.size()) < n - 1;
         ++tr) {
      recent.push_back(&*tr);
    }
  }
  const std::int64_t filled = static_cast<std::int64_t>(recent.size()) + 1;
  const std::int64_t pad = n - filled;
  static const std::vector<double> kNoAction;
  for (std::int64_t t = 0; t < n; ++t) {
    double* dst = x->data() + t * dim;
    if (t < pad) {
      for (std::int64_t j = 0; j < dim; ++j) dst[j] = 0.0;
      (*mask)[t] = 0.0;
    } else if (t == n - 1) {
      write_slot(dst, current_state, kNoAction, 0.0, false, state_dim, action_dim);
      (*mask)[t] = 1.0;
    } else {
      // recent[0] is the newest stored transition, placed just before the tail
      const Transition& tr = *recent[n - 2 - t];
      write_slot(dst, tr.state, tr.action, tr.reward, tr.done, state_dim, action_dim);
      (*mask)[t] = 1.0;
    }
  }
}

void dump_trajectories(std::ostream& os, const std::deque<Episode>& episodes) {
  for (const auto& ep : episodes) {
    for (std::size_t i = 0; i < ep.steps.size(); ++i) {
      const Transition& t = ep.steps[i];
      nlohmann::json row{{"episode", ep.id}, {"step", i},      {"state", t.state},
                         {"action", t.action}, {"reward", t.reward}, {"done", t.done}};
      os << row.dump() << "\n";
    }
  }
}

}  // namespace hmeta
