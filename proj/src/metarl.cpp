#include "hmeta/metarl.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <string>
#include <utility>

#include "hmeta/errors.hpp"

namespace hmeta {
namespace {

/// In-place Fisher-Yates driven by our own stream.
template <typename T>
void shuffle_vec(std::vector<T>& v, Rng& rng) {
  for (std::int64_t i = static_cast<std::int64_t>(v.size()) - 1; i > 0; --i) {
    std::int64_t j = rng.uniform_int(i + 1);
    std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
  }
}

Tensor column_from(const std::vector<double>& v) {
  Tensor t = Tensor::zeros({static_cast<std::int64_t>(v.size()), 1});
  std::copy(v.begin(), v.end(), t.data());
  return t;
}

double scalar_of(const Graph& g, Val v) { return g.value(v).values()[0]; }

}  // namespace

void TrainConfig::validate() const {
  auto positive = [](std::int64_t v, const char* what) {
    if (v < 1) throw ConfigError(std::string(what) + " must be positive");
  };
  positive(meta_steps, "meta_steps");
  positive(tasks_per_batch, "tasks_per_batch");
  positive(episodes_per_task, "episodes_per_task");
  positive(k, "k");
  positive(s, "s");
  positive(ppo_epochs, "ppo_epochs");
  positive(minibatch, "minibatch");
  if (!(clip_eps > 0.0 && clip_eps < 1.0))
    throw ConfigError("clip_eps must lie in (0,1)");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(grad_clip > 0.0)) throw ConfigError("grad_clip must be positive");
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0))
    throw ConfigError("gae_lambda must lie in [0,1]");
  if (value_coef < 0.0 || entropy_coef < 0.0)
    throw ConfigError("loss coefficients must be non-negative");
}

void ArchiveStore::add(Episode e) {
  auto [it, fresh] = by_id_.emplace(e.id, std::move(e));
  if (!fresh)
    throw ContractError("episode id " + std::to_string(it->first) +
                        " archived twice");
}

const Episode* ArchiveStore::find(std::int64_t id) const {
  auto it = by_id_.find(id);
  return it == by_id_.end() ? nullptr : &it->second;
}

std::int64_t RolloutBatch::total_steps() const {
  std::int64_t n = 0;
  for (const auto& t : tasks) n += static_cast<std::int64_t>(t.steps.size());
  return n;
}

std::vector<const StepRecord*> RolloutBatch::all_steps() const {
  std::vector<const StepRecord*> out;
  out.reserve(static_cast<std::size_t>(total_steps()));
  for (const auto& t : tasks)
    for (const auto& r : t.steps) out.push_back(&r);
  return out;
}

RolloutBatch collect_rollouts(Policy& policy, const TaskDistribution& dist,
                              const TrainConfig& cfg, Rng& rng) {
  cfg.validate();
  if (cfg.k != policy.config().k || cfg.s != policy.config().s)
    throw ConfigError("train config k/s must match the policy architecture");

  RolloutBatch out;
  out.tasks.reserve(static_cast<std::size_t>(cfg.tasks_per_batch));
  std::int64_t id_base = 0;
  for (std::int64_t t = 0; t < cfg.tasks_per_batch; ++t) {
    TaskSpec task = sample_task(dist, Split::kTrain, rng);
    PointMassEnv env(task, MDPSpaces{});
    EpisodeBuffer buffer(cfg.k);
    std::vector<Episode> sealed;
    policy.begin_task();

    TaskRollout tr;
    tr.task = task;
    for (std::int64_t ep = 0; ep < cfg.episodes_per_task; ++ep) {
      std::vector<double> state = env.reset(rng);
      double ret = 0.0, disc = 1.0;
      bool success = false;
      while (true) {
        ActOutput a = policy.act(state, buffer, rng, ActMode::kSample);
        StepResult sr = env.step(a.action.action);

        StepRecord rec;
        rec.state = state;
        rec.action = a.action.raw_action;
        rec.logp = a.action.logp;
        rec.value = a.value;
        rec.reward = sr.reward;
        rec.done = sr.done;
        rec.cond = std::move(a.cond);
        tr.steps.push_back(std::move(rec));

        buffer.push({state, a.action.action, sr.reward, sr.done});
        policy.observe_step(sr.state, a.action.action, sr.reward, sr.done);
        ret += disc * sr.reward;
        disc *= env.spaces().gamma;
        state = sr.state;
        if (sr.done) {
          success = sr.success;
          break;
        }
      }
      // the done push sealed the active episode; archive it before the
      // ring can evict it
      sealed.push_back(buffer.episodes().back());
      tr.episode_returns.push_back(ret);
      tr.episode_success.push_back(success);
    }

    // Buffer ids restart at zero for every task; shift this task's block
    // so the batch-wide archive stays collision-free.
    for (auto& rec : tr.steps)
      for (auto& w : rec.cond.seq.windows) w.episode_id += id_base;
    for (auto& e : sealed) {
      e.id += id_base;
      out.archive.add(std::move(e));
    }
    id_base += static_cast<std::int64_t>(sealed.size());
    out.tasks.push_back(std::move(tr));
  }
  return out;
}

void gae_episode(const std::vector<double>& rewards,
                 const std::vector<double>& values, double gamma,
                 double lambda, std::vector<double>* advantages,
                 std::vector<double>* returns) {
  if (rewards.empty() || rewards.size() != values.size())
    throw ContractError("gae needs matching non-empty reward/value arrays");
  const std::size_t n = rewards.size();
  advantages->assign(n, 0.0);
  returns->assign(n, 0.0);
  double acc = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    const double next_v = i + 1 < n ? values[i + 1] : 0.0;
    const double delta = rewards[i] + gamma * next_v - values[i];
    acc = delta + gamma * lambda * acc;
    (*advantages)[i] = acc;
    (*returns)[i] = acc + values[i];
  }
}

void compute_gae(RolloutBatch& batch, double gamma, double lambda) {
  if (batch.total_steps() == 0)
    throw ContractError("cannot compute advantages for an empty batch");

  for (auto& tr : batch.tasks) {
    std::size_t start = 0;
    for (std::size_t i = 0; i < tr.steps.size(); ++i) {
      if (!tr.steps[i].done && i + 1 < tr.steps.size()) continue;
      std::vector<double> rewards, values, adv, ret;
      for (std::size_t j = start; j <= i; ++j) {
        rewards.push_back(tr.steps[j].reward);
        values.push_back(tr.steps[j].value);
      }
      gae_episode(rewards, values, gamma, lambda, &adv, &ret);
      for (std::size_t j = start; j <= i; ++j) {
        tr.steps[j].advantage = adv[j - start];
        tr.steps[j].ret = ret[j - start];
      }
      start = i + 1;
    }
  }

  double mean = 0.0;
  const double n = static_cast<double>(batch.total_steps());
  for (const auto& tr : batch.tasks)
    for (const auto& r : tr.steps) mean += r.advantage;
  mean /= n;
  double var = 0.0;
  for (const auto& tr : batch.tasks)
    for (const auto& r : tr.steps) {
      const double d = r.advantage - mean;
      var += d * d;
    }
  const double std = std::sqrt(var / n);
  for (auto& tr : batch.tasks)
    for (auto& r : tr.steps) r.advantage = (r.advantage - mean) / (std + 1e-8);
  batch.advantages_ready = true;
}

Val build_ppo_loss(Graph& g, Policy& policy,
                   const std::vector<const StepRecord*>& steps,
                   const EpisodeStore& store, const TrainConfig& cfg,
                   PpoLossParts* parts) {
  if (steps.empty()) throw ContractError("ppo loss needs at least one step");
  StepEval ev = policy.evaluate_actions(g, steps, store);

  std::vector<double> old_lp, adv, ret;
  old_lp.reserve(steps.size());
  for (const StepRecord* r : steps) {
    old_lp.push_back(r->logp);
    adv.push_back(r->advantage);
    ret.push_back(r->ret);
  }
  Val c_old = g.constant(column_from(old_lp));
  Val c_adv = g.constant(column_from(adv));
  Val c_ret = g.constant(column_from(ret));

  Val ratio = g.exp(g.sub(ev.logp, c_old));
  Val surr_raw = g.mul(ratio, c_adv);
  Val surr_clip = g.mul(g.clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps),
                        c_adv);
  Val surrogate = g.mean_all(g.vmin(surr_raw, surr_clip));

  Val verr = g.sub(ev.value, c_ret);
  Val value_loss = g.mean_all(g.mul(verr, verr));
  Val entropy = g.mean_all(ev.entropy);

  Val total = g.add(g.neg(surrogate),
                    g.add(g.scale(value_loss, cfg.value_coef),
                          g.scale(entropy, -cfg.entropy_coef)));
  if (parts) {
    parts->surrogate = surrogate;
    parts->value_loss = value_loss;
    parts->entropy = entropy;
    parts->logp_mean = g.mean_all(ev.logp);
    parts->total = total;
  }
  return total;
}

namespace {

struct Segment {
  std::int64_t start = 0;
  std::int64_t len = 0;
};

/// Minibatch index plan for one epoch. Policies that replay state
/// sequentially get contiguous within-task segments in shuffled order;
/// everything else gets a flat shuffle cut into chunks.
std::vector<Segment> plan_minibatches(const RolloutBatch& batch,
                                      const TrainConfig& cfg, bool sequential,
                                      std::vector<std::int64_t>* flat_order,
                                      Rng& rng) {
  const std::int64_t n = batch.total_steps();
  std::vector<Segment> segs;
  if (sequential) {
    std::int64_t off = 0;
    for (const auto& tr : batch.tasks) {
      const std::int64_t len = static_cast<std::int64_t>(tr.steps.size());
      for (std::int64_t s = 0; s < len; s += cfg.minibatch)
        segs.push_back({off + s, std::min(cfg.minibatch, len - s)});
      off += len;
    }
    shuffle_vec(segs, rng);
    flat_order->clear();
  } else {
    flat_order->resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) (*flat_order)[i] = i;
    shuffle_vec(*flat_order, rng);
    for (std::int64_t s = 0; s < n; s += cfg.minibatch)
      segs.push_back({s, std::min(cfg.minibatch, n - s)});
  }
  return segs;
}

}  // namespace

PpoStats ppo_update(Policy& policy, const RolloutBatch& batch,
                    const TrainConfig& cfg, OptimState& optim, Rng& rng) {
  cfg.validate();
  if (!batch.advantages_ready)
    throw ContractError("advantages must be computed before a ppo update");
  const std::vector<const StepRecord*> flat = batch.all_steps();
  const bool sequential = policy.sequential_minibatches();

  PpoStats stats;
  for (std::int64_t epoch = 0; epoch < cfg.ppo_epochs; ++epoch) {
    std::vector<std::int64_t> order;
    std::vector<Segment> segs =
        plan_minibatches(batch, cfg, sequential, &order, rng);
    for (std::size_t si = 0; si < segs.size(); ++si) {
      const Segment& seg = segs[si];
      std::vector<const StepRecord*> mb;
      mb.reserve(static_cast<std::size_t>(seg.len));
      double old_lp_mean = 0.0;
      for (std::int64_t i = seg.start; i < seg.start + seg.len; ++i) {
        const StepRecord* r =
            sequential ? flat[static_cast<std::size_t>(i)]
                       : flat[static_cast<std::size_t>(order[i])];
        mb.push_back(r);
        old_lp_mean += r->logp;
      }
      old_lp_mean /= static_cast<double>(seg.len);

      Graph g;
      PpoLossParts parts;
      Val loss = build_ppo_loss(g, policy, mb, batch.archive, cfg, &parts);
      const double lv = scalar_of(g, loss);
      if (!std::isfinite(lv)) {
        throw NumericError(
            "ppo loss is non-finite at epoch " + std::to_string(epoch) +
            ", minibatch " + std::to_string(si) +
            " (surrogate " + std::to_string(scalar_of(g, parts.surrogate)) +
            ", value " + std::to_string(scalar_of(g, parts.value_loss)) +
            ", entropy " + std::to_string(scalar_of(g, parts.entropy)) + ")");
      }

      policy.params().zero_grads();
      g.backward(loss);
      stats.grad_norm += policy.params().grad_norm();
      policy.params().clip_grad_norm(cfg.grad_clip);
      adam_step(policy.params(), optim);

      stats.policy_loss += -scalar_of(g, parts.surrogate);
      stats.value_loss += scalar_of(g, parts.value_loss);
      stats.entropy += scalar_of(g, parts.entropy);
      stats.approx_kl += old_lp_mean - scalar_of(g, parts.logp_mean);
      ++stats.minibatches;
    }
  }
  const double m = static_cast<double>(stats.minibatches);
  stats.policy_loss /= m;
  stats.value_loss /= m;
  stats.entropy /= m;
  stats.approx_kl /= m;
  stats.grad_norm /= m;
  return stats;
}

AdaptResult adapt_and_eval(Policy& policy, const TaskSpec& task,
                           std::int64_t n_episodes, std::int64_t k,
                           std::int64_t s, Rng& rng) {
  if (n_episodes < 1) throw ConfigError("n_episodes must be positive");
  if (k != policy.config().k || s != policy.config().s)
    throw ConfigError("adaptation k/s must match the policy architecture");

  PointMassEnv env(task, MDPSpaces{});
  EpisodeBuffer buffer(k);
  policy.begin_task();
  AdaptResult out;
  for (std::int64_t ep = 0; ep < n_episodes; ++ep) {
    const ActMode mode =
        ep + 1 == n_episodes ? ActMode::kMean : ActMode::kSample;
    std::vector<double> state = env.reset(rng);
    double ret = 0.0, disc = 1.0;
    bool success = false;
    while (true) {
      ActOutput a = policy.act(state, buffer, rng, mode);
      StepResult sr = env.step(a.action.action);
      buffer.push({state, a.action.action, sr.reward, sr.done});
      policy.observe_step(sr.state, a.action.action, sr.reward, sr.done);
      ret += disc * sr.reward;
      disc *= env.spaces().gamma;
      state = sr.state;
      if (sr.done) {
        success = sr.success;
        break;
      }
    }
    out.success.push_back(success);
    out.disc_returns.push_back(ret);
  }
  return out;
}

namespace {

MetricsRow test_eval_row(Policy& policy, const TaskDistribution& dist,
                         const TrainConfig& tcfg, const MetaTrainOptions& opts,
                         Rng& rng, std::int64_t env_steps, double wall) {
  MetricsRow row;
  row.env_steps = env_steps;
  row.split = "test";
  row.task_family = dist.mln ? "all" : family_name(dist.ml1_family);
  row.wall_time = wall;
  double succ = 0.0, ret = 0.0;
  for (std::int64_t t = 0; t < opts.eval_tasks; ++t) {
    TaskSpec task = sample_task(dist, Split::kTest, rng);
    AdaptResult r = adapt_and_eval(policy, task, opts.eval_episodes, tcfg.k,
                                   tcfg.s, rng);
    succ += r.success.back() ? 1.0 : 0.0;
    ret += r.disc_returns.back();
  }
  row.success_rate = succ / static_cast<double>(opts.eval_tasks);
  row.mean_return = ret / static_cast<double>(opts.eval_tasks);
  return row;
}

}  // namespace

TrainResult meta_train(const std::string& policy_kind,
                       const PolicyConfig& pcfg, const TrainConfig& tcfg,
                       const TaskDistribution& dist,
                       const MetaTrainOptions& opts) {
  tcfg.validate();
  if (pcfg.k != tcfg.k || pcfg.s != tcfg.s)
    throw ConfigError("train config k/s must match the policy architecture");

  TrainResult res;
  std::unique_ptr<Policy> policy = make_policy(policy_kind, pcfg, tcfg.seed);
  Rng root(tcfg.seed);
  Rng collect_rng = root.split(1);
  Rng ppo_rng = root.split(2);
  Rng eval_rng = root.split(3);
  OptimState optim = make_optim_state(policy->params(), tcfg.lr);

  const MDPSpaces spaces{};
  // worst case for one batch; keeps env_steps <= meta_steps always
  const std::int64_t budget =
      tcfg.tasks_per_batch * tcfg.episodes_per_task * spaces.horizon;
  const auto t0 = std::chrono::steady_clock::now();
  const auto elapsed = [&t0] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
        .count();
  };

  std::int64_t next_eval = opts.eval_every;
  std::int64_t next_ckpt = opts.checkpoint_every;
  while (res.env_steps + budget <= tcfg.meta_steps) {
    RolloutBatch batch = collect_rollouts(*policy, dist, tcfg, collect_rng);
    res.env_steps += batch.total_steps();
    compute_gae(batch, spaces.gamma, tcfg.gae_lambda);
    PpoStats st = ppo_update(*policy, batch, tcfg, optim, ppo_rng);
    ++res.updates;

    MetricsRow row;
    row.env_steps = res.env_steps;
    row.split = "train";
    row.task_family = dist.mln ? "all" : family_name(dist.ml1_family);
    std::int64_t eps = 0;
    double succ = 0.0, ret = 0.0;
    for (const auto& tr : batch.tasks) {
      for (bool ok : tr.episode_success) succ += ok ? 1.0 : 0.0;
      for (double r : tr.episode_returns) ret += r;
      eps += static_cast<std::int64_t>(tr.episode_returns.size());
    }
    row.success_rate = succ / static_cast<double>(eps);
    row.mean_return = ret / static_cast<double>(eps);
    row.policy_loss = st.policy_loss;
    row.value_loss = st.value_loss;
    row.entropy = st.entropy;
    row.wall_time = elapsed();
    res.metrics.push_back(row);
    if (opts.on_metrics) opts.on_metrics(res.metrics.back());

    if (opts.eval_every > 0 && res.env_steps >= next_eval) {
      while (next_eval <= res.env_steps) next_eval += opts.eval_every;
      res.metrics.push_back(test_eval_row(*policy, dist, tcfg, opts, eval_rng,
                                          res.env_steps, elapsed()));
      if (opts.on_metrics) opts.on_metrics(res.metrics.back());
    }
    if (opts.checkpoint_every > 0 && opts.on_checkpoint &&
        res.env_steps >= next_ckpt) {
      while (next_ckpt <= res.env_steps) next_ckpt += opts.checkpoint_every;
      opts.on_checkpoint(*policy, res.env_steps);
    }
  }
  if (opts.on_checkpoint) opts.on_checkpoint(*policy, res.env_steps);
  res.policy = std::move(policy);
  return res;
}

void write_metrics_csv(std::ostream& os,
                       const std::vector<MetricsRow>& rows) {
  os << "env_steps,split,task_family,success_rate,mean_return,policy_loss,"
        "value_loss,entropy,wall_time\n";
  char buf[64];
  const auto put = [&os, &buf](double v, char sep) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    os << buf << sep;
  };
  for (const auto& r : rows) {
    os << r.env_steps << ',' << r.split << ',' << r.task_family << ',';
    put(r.success_rate, ',');
    put(r.mean_return, ',');
    put(r.policy_loss, ',');
    put(r.value_loss, ',');
    put(r.entropy, ',');
    put(r.wall_time, '\n');
  }
}

}  // namespace hmeta
