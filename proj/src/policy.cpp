#include "hmeta/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <utility>

#include "hmeta/errors.hpp"

namespace hmeta {
namespace {

constexpr double kLn2Pi = 1.8378770664093454836;

Tensor row_from(const std::vector<double>& v) {
  Tensor t = Tensor::zeros({1, static_cast<std::int64_t>(v.size())});
  std::copy(v.begin(), v.end(), t.data());
  return t;
}

/// logp of `actions` [M,n] under diag Gaussians (mu, exp(logsig)), as [M,1].
Val gaussian_logp(Graph& g, Val mu, Val logsig, Val actions, std::int64_t n) {
  std::int64_t m = g.shape(mu)[0];
  Val diff = g.sub(actions, mu);
  Val z = g.mul(diff, g.exp(g.scale(logsig, -1.0)));
  Val quad = g.sum_last(g.mul(z, z));  // sum_last drops the axis: [M]
  Val s = g.add(g.scale(quad, 0.5), g.sum_last(logsig));
  Val lp = g.add_scalar(g.neg(s), -0.5 * static_cast<double>(n) * kLn2Pi);
  return g.reshape(lp, {m, 1});
}

Val gaussian_entropy(Graph& g, Val logsig, std::int64_t n) {
  std::int64_t m = g.shape(logsig)[0];
  Val ent = g.add_scalar(g.sum_last(logsig),
                         0.5 * static_cast<double>(n) * (kLn2Pi + 1.0));
  return g.reshape(ent, {m, 1});
}

double logp_scalar(const std::vector<double>& a, const std::vector<double>& mu,
                   const std::vector<double>& sigma) {
  double quad = 0.0, logdet = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    double z = (a[j] - mu[j]) / sigma[j];
    quad += z * z;
    logdet += std::log(sigma[j]);
  }
  return -(0.5 * quad + logdet) -
         0.5 * static_cast<double>(a.size()) * kLn2Pi;
}

/// Draws (or takes the mean), clamps to the action box, fills in logp of
/// the raw sample.
GaussianAction finish_action(const Tensor& mu_row, const Tensor& logsig_row,
                             Rng& rng, ActMode mode) {
  std::int64_t n = mu_row.extent(1);
  GaussianAction out;
  out.mean.resize(n);
  out.sigma.resize(n);
  out.raw_action.resize(n);
  out.action.resize(n);
  for (std::int64_t j = 0; j < n; ++j) {
    out.mean[j] = mu_row.at(0, j);
    out.sigma[j] = std::exp(logsig_row.at(0, j));
    double raw = mode == ActMode::kSample
                     ? out.mean[j] + out.sigma[j] * rng.normal()
                     : out.mean[j];
    out.raw_action[j] = raw;
    out.action[j] = std::clamp(raw, -1.0, 1.0);
  }
  out.logp = logp_scalar(out.raw_action, out.mean, out.sigma);
  return out;
}

void check_state_width(const std::vector<double>& state, std::int64_t want) {
  if (static_cast<std::int64_t>(state.size()) != want) {
    throw ShapeError("state has " + std::to_string(state.size()) +
                     " entries, the state transform expects " +
                     std::to_string(want));
  }
}

/// Gathers recorded states/actions into [M,dim] blocks.
void gather_records(const std::vector<const StepRecord*>& steps,
                    std::int64_t state_dim, std::int64_t action_dim,
                    Tensor* states, Tensor* actions) {
  std::int64_t m = static_cast<std::int64_t>(steps.size());
  *states = Tensor::zeros({m, state_dim});
  *actions = Tensor::zeros({m, action_dim});
  for (std::int64_t i = 0; i < m; ++i) {
    const StepRecord& r = *steps[i];
    if (static_cast<std::int64_t>(r.state.size()) != state_dim ||
        static_cast<std::int64_t>(r.action.size()) != action_dim) {
      throw ContractError("step record widths do not match the policy");
    }
    for (std::int64_t j = 0; j < state_dim; ++j)
      states->at(i, j) = r.state[j];
    for (std::int64_t j = 0; j < action_dim; ++j)
      actions->at(i, j) = r.action[j];
  }
}

std::vector<double> read_row(const Tensor& t, std::int64_t i) {
  std::vector<double> out(t.extent(1));
  for (std::int64_t j = 0; j < t.extent(1); ++j) out[j] = t.at(i, j);
  return out;
}

}  // namespace

GaussianHead::GaussianHead(ParamRegistry& reg, const std::string& prefix,
                           std::int64_t in_dim, std::int64_t hidden,
                           std::int64_t action_dim, Rng& rng) {
  w1_ = &reg.create_linear_weight(prefix + ".hid.w", in_dim, hidden, rng);
  b1_ = &reg.create(prefix + ".hid.b", {hidden});
  mu_w_ = &reg.create_linear_weight(prefix + ".mu.w", hidden, action_dim, rng);
  mu_b_ = &reg.create(prefix + ".mu.b", {action_dim});
  sig_w_ =
      &reg.create_linear_weight(prefix + ".logsig.w", hidden, action_dim, rng);
  sig_b_ = &reg.create(prefix + ".logsig.b", {action_dim});
  vw1_ = &reg.create_linear_weight(prefix + ".val.hid.w", in_dim, hidden, rng);
  vb1_ = &reg.create(prefix + ".val.hid.b", {hidden});
  vw2_ = &reg.create_linear_weight(prefix + ".val.out.w", hidden, 1, rng);
  vb2_ = &reg.create(prefix + ".val.out.b", {1});
}

GaussianHead::Out GaussianHead::forward(Graph& g, Val input, double lo,
                                        double hi) const {
  Val h = g.tanh(g.add_bias(g.matmul(input, g.leaf(*w1_)), g.leaf(*b1_)));
  Val mu = g.add_bias(g.matmul(h, g.leaf(*mu_w_)), g.leaf(*mu_b_));
  Val logsig = g.clamp(
      g.add_bias(g.matmul(h, g.leaf(*sig_w_)), g.leaf(*sig_b_)), lo, hi);
  Val vh = g.tanh(g.add_bias(g.matmul(input, g.leaf(*vw1_)), g.leaf(*vb1_)));
  Val value = g.add_bias(g.matmul(vh, g.leaf(*vw2_)), g.leaf(*vb2_));
  return {mu, logsig, value};
}

Policy::Policy(PolicyConfig cfg) : cfg_(cfg) {
  if (cfg_.state_dim < 1 || cfg_.action_dim < 1 || cfg_.d_model < 1 ||
      cfg_.head_hidden < 1) {
    throw ConfigError("policy dimensions must be positive");
  }
  if (!(cfg_.logstd_lo < cfg_.logstd_hi)) {
    throw ConfigError("log-std clamp range is empty");
  }
}

void Policy::observe_step(const std::vector<double>&,
                          const std::vector<double>&, double, bool) {}

// ---------------------------------------------------------------------------
// hierarchical

HierarchicalPolicy::HierarchicalPolicy(PolicyConfig cfg, std::uint64_t seed)
    : Policy(cfg) {
  if (cfg_.k < 1 || cfg_.s < 1) {
    throw ConfigError("context needs k >= 1 episodes and windows of s >= 1");
  }
  Rng rng(seed);
  StackConfig c1;
  c1.input_dim = cfg_.slot_dim();
  c1.input_embed = true;
  c1.d_model = cfg_.d_model;
  c1.heads = cfg_.heads;
  c1.d_ff = cfg_.d_ff;
  c1.blocks = cfg_.blocks;
  c1.positional = true;
  c1.max_len = cfg_.s;
  t1_ = std::make_unique<EncoderStack>(reg_, "t1", c1, rng);

  StackConfig c2 = c1;
  c2.input_dim = cfg_.d_model;
  c2.input_embed = false;
  c2.blocks = cfg_.blocks_t2 > 0 ? cfg_.blocks_t2 : cfg_.blocks;
  c2.positional = false;  // episode order carries no signal
  c2.max_len = cfg_.k;
  t2_ = std::make_unique<EncoderStack>(reg_, "t2", c2, rng);

  phi2_w_ = &reg_.create_linear_weight("phi2.w", cfg_.state_dim, cfg_.d_model,
                                       rng);
  phi2_b_ = &reg_.create("phi2.b", {cfg_.d_model});

  std::int64_t head_in =
      cfg_.state_concat ? 2 * cfg_.d_model : cfg_.d_model;
  head_ = std::make_unique<GaussianHead>(reg_, "head", head_in,
                                         cfg_.head_hidden, cfg_.action_dim,
                                         rng);
  t1_->attn_counter = &attn_ops;
  t2_->attn_counter = &attn_ops;
}

Val HierarchicalPolicy::encode_contexts(
    Graph& g, const std::vector<const SequenceBatch*>& batches,
    const EpisodeStore& store) {
  for (const SequenceBatch* b : batches) {
    if (b->k != cfg_.k || b->s != cfg_.s) {
      throw ContractError("context batch shape does not match the policy");
    }
  }
  std::int64_t m = static_cast<std::int64_t>(batches.size());
  Tensor mask;
  Tensor x = batch_inputs_many(batches, store, &mask);  // [m*k, s, slot]
  Val z_seq = t1_->encode(g, g.constant(std::move(x)),
                          g.constant(std::move(mask)));
  Val grouped = g.reshape(z_seq, {m, cfg_.k, cfg_.d_model});
  Val all_valid = g.constant(Tensor::full({m, cfg_.k}, 1.0));
  return t2_->encode(g, grouped, all_valid);  // read out at the k-th slot
}

Val HierarchicalPolicy::head_input(Graph& g, Val z_task, const Tensor& states) {
  if (!cfg_.state_concat) return z_task;
  Val s = g.constant(states);
  Val phi = g.add_bias(g.matmul(s, g.leaf(*phi2_w_)), g.leaf(*phi2_b_));
  return g.concat_last(phi, z_task);
}

ActOutput HierarchicalPolicy::act(const std::vector<double>& state,
                                  const EpisodeBuffer& buffer, Rng& rng,
                                  ActMode mode) {
  check_state_width(state, cfg_.state_dim);
  SequenceBatch batch =
      cfg_.random_episode_windows
          ? sample_batch_random_episodes(buffer, cfg_.k, cfg_.s, rng, state,
                                         cfg_.action_dim)
          : sample_batch(buffer, cfg_.k, cfg_.s, rng, state, cfg_.action_dim);
  ActOutput out = act_on_batch(state, batch, buffer, rng, mode);
  out.cond.seq = std::move(batch);
  return out;
}

ActOutput HierarchicalPolicy::act_on_batch(const std::vector<double>& state,
                                           const SequenceBatch& batch,
                                           const EpisodeStore& store, Rng& rng,
                                           ActMode mode) {
  check_state_width(state, cfg_.state_dim);
  if (batch.tail_state != state) {
    throw ContractError("context batch does not end at the current state");
  }
  Graph g;
  std::vector<const SequenceBatch*> one{&batch};
  Val z = encode_contexts(g, one, store);
  Val input = head_input(g, z, row_from(state));
  GaussianHead::Out h = head_->forward(g, input, cfg_.logstd_lo,
                                       cfg_.logstd_hi);
  ActOutput out;
  out.action = finish_action(g.value(h.mu), g.value(h.logsig), rng, mode);
  out.value = g.value(h.value).at(0, 0);
  return out;
}

std::vector<double> HierarchicalPolicy::task_embedding(
    const std::vector<double>& state, const EpisodeBuffer& buffer, Rng& rng) {
  check_state_width(state, cfg_.state_dim);
  SequenceBatch batch =
      cfg_.random_episode_windows
          ? sample_batch_random_episodes(buffer, cfg_.k, cfg_.s, rng, state,
                                         cfg_.action_dim)
          : sample_batch(buffer, cfg_.k, cfg_.s, rng, state, cfg_.action_dim);
  return export_task_embedding(batch, buffer);
}

std::vector<double> HierarchicalPolicy::export_task_embedding(
    const SequenceBatch& batch, const EpisodeStore& store) {
  Graph g;
  std::vector<const SequenceBatch*> one{&batch};
  Val z = encode_contexts(g, one, store);
  return read_row(g.value(z), 0);
}

StepEval HierarchicalPolicy::evaluate_actions(
    Graph& g, const std::vector<const StepRecord*>& steps,
    const EpisodeStore& store) {
  if (steps.empty()) throw ContractError("evaluate_actions on zero steps");
  std::vector<const SequenceBatch*> batches;
  batches.reserve(steps.size());
  for (const StepRecord* r : steps) {
    if (r->cond.seq.k == 0) {
      throw ContractError("step record is missing its context batch");
    }
    batches.push_back(&r->cond.seq);
  }
  Tensor states, actions;
  gather_records(steps, cfg_.state_dim, cfg_.action_dim, &states, &actions);

  Val z = encode_contexts(g, batches, store);
  Val input = head_input(g, z, states);
  GaussianHead::Out h = head_->forward(g, input, cfg_.logstd_lo,
                                       cfg_.logstd_hi);
  StepEval ev;
  ev.logp = gaussian_logp(g, h.mu, h.logsig, g.constant(actions),
                          cfg_.action_dim);
  ev.entropy = gaussian_entropy(g, h.logsig, cfg_.action_dim);
  ev.value = h.value;
  return ev;
}

// ---------------------------------------------------------------------------
// flat baseline

FlatTransformerPolicy::FlatTransformerPolicy(PolicyConfig cfg,
                                             std::uint64_t seed)
    : Policy(cfg) {
  if (cfg_.flat_n < 1) throw ConfigError("flat context needs n >= 1");
  Rng rng(seed);
  StackConfig c;
  c.input_dim = cfg_.slot_dim();
  c.input_embed = true;
  c.d_model = cfg_.d_model;
  c.heads = cfg_.heads;
  c.d_ff = cfg_.d_ff;
  c.blocks = cfg_.blocks;
  c.positional = true;
  c.max_len = cfg_.flat_n;
  enc_ = std::make_unique<EncoderStack>(reg_, "enc", c, rng);
  // conditioned on the transformer output alone, so no state concat here
  head_ = std::make_unique<GaussianHead>(reg_, "head", cfg_.d_model,
                                         cfg_.head_hidden, cfg_.action_dim,
                                         rng);
  enc_->attn_counter = &attn_ops;
}

ActOutput FlatTransformerPolicy::act(const std::vector<double>& state,
                                     const EpisodeBuffer& buffer, Rng& rng,
                                     ActMode mode) {
  check_state_width(state, cfg_.state_dim);
  Tensor x, mask;
  recent_window(buffer, cfg_.flat_n, state, cfg_.action_dim, &x, &mask);
  ActOutput out = act_on_window(x, mask, rng, mode);
  out.cond.window_x = std::move(x);
  out.cond.window_mask = std::move(mask);
  return out;
}

ActOutput FlatTransformerPolicy::act_on_window(const Tensor& x,
                                               const Tensor& mask, Rng& rng,
                                               ActMode mode) {
  Graph g;
  Val z = enc_->encode(g, g.constant(x), g.constant(mask));  // [1,d]
  GaussianHead::Out h = head_->forward(g, z, cfg_.logstd_lo, cfg_.logstd_hi);
  ActOutput out;
  out.action = finish_action(g.value(h.mu), g.value(h.logsig), rng, mode);
  out.value = g.value(h.value).at(0, 0);
  return out;
}

std::vector<double> FlatTransformerPolicy::task_embedding(
    const std::vector<double>& state, const EpisodeBuffer& buffer, Rng&) {
  check_state_width(state, cfg_.state_dim);
  Tensor x, mask;
  recent_window(buffer, cfg_.flat_n, state, cfg_.action_dim, &x, &mask);
  Graph g;
  Val z = enc_->encode(g, g.constant(std::move(x)), g.constant(std::move(mask)));
  return read_row(g.value(z), 0);
}

StepEval FlatTransformerPolicy::evaluate_actions(
    Graph& g, const std::vector<const StepRecord*>& steps,
    const EpisodeStore&) {
  if (steps.empty()) throw ContractError("evaluate_actions on zero steps");
  std::int64_t m = static_cast<std::int64_t>(steps.size());
  std::int64_t n = cfg_.flat_n;
  std::int64_t dim = cfg_.slot_dim();
  Tensor x = Tensor::zeros({m, n, dim});
  Tensor mask = Tensor::zeros({m, n});
  for (std::int64_t i = 0; i < m; ++i) {
    const Conditioning& c = steps[i]->cond;
    if (c.window_x.shape() != std::vector<std::int64_t>{1, n, dim}) {
      throw ContractError("step record is missing its flat window");
    }
    std::memcpy(x.data() + i * n * dim, c.window_x.data(),
                sizeof(double) * static_cast<std::size_t>(n * dim));
    std::memcpy(mask.data() + i * n, c.window_mask.data(),
                sizeof(double) * static_cast<std::size_t>(n));
  }
  Tensor states, actions;
  gather_records(steps, cfg_.state_dim, cfg_.action_dim, &states, &actions);

  Val z = enc_->encode(g, g.constant(std::move(x)),
                       g.constant(std::move(mask)));
  GaussianHead::Out h = head_->forward(g, z, cfg_.logstd_lo, cfg_.logstd_hi);
  StepEval ev;
  ev.logp = gaussian_logp(g, h.mu, h.logsig, g.constant(actions),
                          cfg_.action_dim);
  ev.entropy = gaussian_entropy(g, h.logsig, cfg_.action_dim);
  ev.value = h.value;
  return ev;
}

// ---------------------------------------------------------------------------
// recurrent baseline

RecurrentPolicy::RecurrentPolicy(PolicyConfig cfg, std::uint64_t seed)
    : Policy(cfg) {
  if (cfg_.gru_hidden < 1) throw ConfigError("recurrent hidden size >= 1");
  Rng rng(seed);
  std::int64_t in = cfg_.state_dim + cfg_.action_dim + 1;
  std::int64_t hd = cfg_.gru_hidden;
  wz_ = &reg_.create_linear_weight("gru.wz", in, hd, rng);
  uz_ = &reg_.create_linear_weight("gru.uz", hd, hd, rng);
  bz_ = &reg_.create("gru.bz", {hd});
  wr_ = &reg_.create_linear_weight("gru.wr", in, hd, rng);
  ur_ = &reg_.create_linear_weight("gru.ur", hd, hd, rng);
  br_ = &reg_.create("gru.br", {hd});
  wn_ = &reg_.create_linear_weight("gru.wn", in, hd, rng);
  un_ = &reg_.create_linear_weight("gru.un", hd, hd, rng);
  bn_i_ = &reg_.create("gru.bn_i", {hd});
  bn_h_ = &reg_.create("gru.bn_h", {hd});
  phi2_w_ = &reg_.create_linear_weight("phi2.w", cfg_.state_dim, cfg_.d_model,
                                       rng);
  phi2_b_ = &reg_.create("phi2.b", {cfg_.d_model});
  head_ = std::make_unique<GaussianHead>(reg_, "head", hd + cfg_.d_model,
                                         cfg_.head_hidden, cfg_.action_dim,
                                         rng);
  begin_task();
}

void RecurrentPolicy::begin_task() {
  hidden_.assign(static_cast<std::size_t>(cfg_.gru_hidden), 0.0);
  prev_action_.assign(static_cast<std::size_t>(cfg_.action_dim), 0.0);
  prev_reward_ = 0.0;
}

void RecurrentPolicy::observe_step(const std::vector<double>&,
                                   const std::vector<double>& executed_action,
                                   double reward, bool) {
  // the stream keeps flowing across episode boundaries within a task
  prev_action_ = executed_action;
  prev_reward_ = reward;
}

Val RecurrentPolicy::gru_step(Graph& g, Val input, Val h) const {
  Val z = g.sigmoid(g.add_bias(
      g.add(g.matmul(input, g.leaf(*wz_)), g.matmul(h, g.leaf(*uz_))),
      g.leaf(*bz_)));
  Val r = g.sigmoid(g.add_bias(
      g.add(g.matmul(input, g.leaf(*wr_)), g.matmul(h, g.leaf(*ur_))),
      g.leaf(*br_)));
  Val n = g.tanh(g.add(
      g.add_bias(g.matmul(input, g.leaf(*wn_)), g.leaf(*bn_i_)),
      g.mul(r, g.add_bias(g.matmul(h, g.leaf(*un_)), g.leaf(*bn_h_)))));
  // h' = z*h + (1-z)*n
  return g.add(g.mul(z, h), g.mul(g.add_scalar(g.neg(z), 1.0), n));
}

Val RecurrentPolicy::head_input(Graph& g, Val h, const Tensor& states) {
  Val s = g.constant(states);
  Val phi = g.add_bias(g.matmul(s, g.leaf(*phi2_w_)), g.leaf(*phi2_b_));
  return g.concat_last(h, phi);
}

ActOutput RecurrentPolicy::act(const std::vector<double>& state,
                               const EpisodeBuffer&, Rng& rng, ActMode mode) {
  check_state_width(state, cfg_.state_dim);
  Conditioning cond;
  cond.hidden = hidden_;
  cond.prev_action = prev_action_;
  cond.prev_reward = prev_reward_;

  std::vector<double> in = state;
  in.insert(in.end(), prev_action_.begin(), prev_action_.end());
  in.push_back(prev_reward_);

  Graph g;
  Val h = gru_step(g, g.constant(row_from(in)), g.constant(row_from(hidden_)));
  Val input = head_input(g, h, row_from(state));
  GaussianHead::Out out = head_->forward(g, input, cfg_.logstd_lo,
                                         cfg_.logstd_hi);
  ActOutput res;
  res.action = finish_action(g.value(out.mu), g.value(out.logsig), rng, mode);
  res.value = g.value(out.value).at(0, 0);
  res.cond = std::move(cond);
  hidden_ = read_row(g.value(h), 0);  // commit the step
  return res;
}

std::vector<double> RecurrentPolicy::task_embedding(
    const std::vector<double>& state, const EpisodeBuffer&, Rng&) {
  check_state_width(state, cfg_.state_dim);
  std::vector<double> in = state;
  in.insert(in.end(), prev_action_.begin(), prev_action_.end());
  in.push_back(prev_reward_);
  Graph g;
  Val h = gru_step(g, g.constant(row_from(in)), g.constant(row_from(hidden_)));
  return read_row(g.value(h), 0);  // peek only, no commit
}

StepEval RecurrentPolicy::evaluate_actions(
    Graph& g, const std::vector<const StepRecord*>& steps,
    const EpisodeStore&) {
  if (steps.empty()) throw ContractError("evaluate_actions on zero steps");
  std::int64_t m = static_cast<std::int64_t>(steps.size());
  const Conditioning& first = steps[0]->cond;
  if (static_cast<std::int64_t>(first.hidden.size()) != cfg_.gru_hidden) {
    throw ContractError("step record is missing its hidden state");
  }

  // replay the recurrence from the recorded segment-initial hidden; the
  // segment must be one contiguous run within a single task
  Val h = g.constant(row_from(first.hidden));
  Val hall;
  for (std::int64_t i = 0; i < m; ++i) {
    const StepRecord& r = *steps[i];
    std::vector<double> in = r.state;
    in.insert(in.end(), r.cond.prev_action.begin(), r.cond.prev_action.end());
    in.push_back(r.cond.prev_reward);
    h = gru_step(g, g.constant(row_from(in)), h);
    hall = i == 0 ? h : g.concat_rows(hall, h);
  }

  Tensor states, actions;
  gather_records(steps, cfg_.state_dim, cfg_.action_dim, &states, &actions);
  Val input = head_input(g, hall, states);
  GaussianHead::Out out = head_->forward(g, input, cfg_.logstd_lo,
                                         cfg_.logstd_hi);
  StepEval ev;
  ev.logp = gaussian_logp(g, out.mu, out.logsig, g.constant(actions),
                          cfg_.action_dim);
  ev.entropy = gaussian_entropy(g, out.logsig, cfg_.action_dim);
  ev.value = out.value;
  return ev;
}

std::unique_ptr<Policy> make_policy(const std::string& kind, PolicyConfig cfg,
                                    std::uint64_t seed) {
  if (kind == "htrmrl") {
    return std::make_unique<HierarchicalPolicy>(cfg, seed);
  }
  if (kind == "flat") {
    return std::make_unique<FlatTransformerPolicy>(cfg, seed);
  }
  if (kind == "recurrent") {
    return std::make_unique<RecurrentPolicy>(cfg, seed);
  }
  throw ConfigError("unknown policy kind '" + kind + "'");
}

}  // namespace hmeta
