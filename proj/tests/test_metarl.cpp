#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "hmeta/envs.hpp"
#include "hmeta/errors.hpp"
#include "hmeta/metarl.hpp"
#include "hmeta/policy.hpp"
#include "hmeta/rng.hpp"

using namespace hmeta;

namespace {

PolicyConfig small_cfg() {
  PolicyConfig cfg;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.d_ff = 16;
  cfg.blocks = 1;
  cfg.k = 3;
  cfg.s = 2;
  cfg.flat_n = 3;
  cfg.gru_hidden = 8;
  cfg.head_hidden = 8;
  return cfg;
}

TrainConfig small_train(std::uint64_t seed) {
  TrainConfig t;
  t.meta_steps = 10'000;
  t.tasks_per_batch = 2;
  t.episodes_per_task = 2;
  t.k = 3;
  t.s = 2;
  t.ppo_epochs = 1;
  t.minibatch = 1024;
  t.lr = 1e-4;
  t.seed = seed;
  return t;
}

TaskDistribution reach_dist() {
  TaskDistribution d;
  d.mln = false;
  d.ml1_family = Family::kReach;
  return d;
}

std::uint64_t param_checksum(const ParamRegistry& reg) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& p : reg.all())
    for (double v : p->value.values()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      h ^= bits;
      h *= 1099511628211ULL;
    }
  return h;
}

/// Strips the trailing wall_time column from every csv line.
std::string drop_wall_time(const std::string& csv) {
  std::string out;
  std::istringstream in(csv);
  std::string line;
  while (std::getline(in, line)) {
    const auto cut = line.rfind(',');
    out += line.substr(0, cut);
    out += '\n';
  }
  return out;
}

}  // namespace

TEST_CASE("gae hand cases") {
  std::vector<double> adv, ret;

  gae_episode({1.0}, {0.0}, 1.0, 1.0, &adv, &ret);
  CHECK(adv == std::vector<double>{1.0});
  CHECK(ret == std::vector<double>{1.0});

  gae_episode({0.0, 0.0}, {0.0, 0.0}, 0.99, 0.95, &adv, &ret);
  CHECK(adv == std::vector<double>{0.0, 0.0});
  CHECK(ret == std::vector<double>{0.0, 0.0});

  // lambda zero collapses to one-step TD residuals
  gae_episode({1.0, 1.0, 1.0}, {0.0, 0.0, 0.0}, 0.5, 0.0, &adv, &ret);
  CHECK(adv == std::vector<double>{1.0, 1.0, 1.0});
  CHECK(ret == std::vector<double>{1.0, 1.0, 1.0});

  // full recursion worked by hand:
  //   deltas = [1 + .9*1 - .5, 0 + .9*.25 - 1, 2 - .25] = [1.4, -.775, 1.75]
  //   A2 = 1.75; A1 = -.775 + .72*1.75 = .485; A0 = 1.4 + .72*.485 = 1.7492
  gae_episode({1.0, 0.0, 2.0}, {0.5, 1.0, 0.25}, 0.9, 0.8, &adv, &ret);
  REQUIRE(adv.size() == 3);
  CHECK(adv[0] == doctest::Approx(1.7492).epsilon(1e-12));
  CHECK(adv[1] == doctest::Approx(0.485).epsilon(1e-12));
  CHECK(adv[2] == doctest::Approx(1.75).epsilon(1e-12));
  CHECK(ret[0] == doctest::Approx(2.2492).epsilon(1e-12));
  CHECK(ret[1] == doctest::Approx(1.485).epsilon(1e-12));
  CHECK(ret[2] == doctest::Approx(2.0).epsilon(1e-12));

  CHECK_THROWS_AS(gae_episode({}, {}, 0.99, 0.95, &adv, &ret), ContractError);
  CHECK_THROWS_AS(gae_episode({1.0}, {}, 0.99, 0.95, &adv, &ret),
                  ContractError);
}

TEST_CASE("train config validation") {
  TrainConfig t = small_train(0);
  CHECK_NOTHROW(t.validate());
  TrainConfig bad = t;
  bad.clip_eps = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = t;
  bad.clip_eps = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = t;
  bad.minibatch = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = t;
  bad.lr = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = t;
  bad.gae_lambda = 1.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("collect rollouts structure and accounting") {
  auto policy = make_policy("htrmrl", small_cfg(), 11);
  TrainConfig tcfg = small_train(11);
  Rng rng(101);
  RolloutBatch batch = collect_rollouts(*policy, reach_dist(), tcfg, rng);

  REQUIRE(batch.tasks.size() == 2);
  CHECK_FALSE(batch.advantages_ready);
  CHECK(batch.archive.size() == 4);  // every episode archived once

  std::int64_t id_base = 0;
  for (const auto& tr : batch.tasks) {
    REQUIRE(tr.episode_returns.size() == 2);
    REQUIRE(tr.episode_success.size() == 2);
    std::int64_t dones = 0;
    for (const auto& rec : tr.steps) dones += rec.done ? 1 : 0;
    CHECK(dones == 2);
    CHECK(tr.steps.back().done);

    // cold start: the first decision of a task can only see the episode
    // that is just beginning
    const auto& first = tr.steps.front().cond.seq;
    REQUIRE(first.windows.size() == 3);
    for (const auto& w : first.windows) {
      CHECK(w.episode_id == id_base);
      CHECK(w.tail);
    }

    // logged discounted returns match an independent backward fold
    const double gamma = MDPSpaces{}.gamma;
    std::size_t ep = 0, start = 0;
    for (std::size_t i = 0; i < tr.steps.size(); ++i) {
      if (!tr.steps[i].done) continue;
      double ret = 0.0;
      for (std::size_t j = i + 1; j-- > start;)
        ret = tr.steps[j].reward + gamma * ret;
      CHECK(std::abs(ret - tr.episode_returns[ep]) < 1e-10);
      start = i + 1;
      ++ep;
    }
    CHECK(ep == 2);
    id_base += 2;
  }

  CHECK(batch.total_steps() ==
        static_cast<std::int64_t>(batch.all_steps().size()));

  TrainConfig wrong = tcfg;
  wrong.k = 5;
  CHECK_THROWS_AS(collect_rollouts(*policy, reach_dist(), wrong, rng),
                  ConfigError);
}

TEST_CASE("single task single episode caps at the horizon") {
  auto policy = make_policy("flat", small_cfg(), 3);
  TrainConfig tcfg = small_train(3);
  tcfg.tasks_per_batch = 1;
  tcfg.episodes_per_task = 1;
  Rng rng(9);
  RolloutBatch batch = collect_rollouts(*policy, reach_dist(), tcfg, rng);
  REQUIRE(batch.tasks.size() == 1);
  const auto& steps = batch.tasks[0].steps;
  CHECK(steps.size() >= 1);
  CHECK(steps.size() <= 100);
  CHECK(steps.back().done);
}

TEST_CASE("collect rollouts is reproducible") {
  TrainConfig tcfg = small_train(21);
  tcfg.tasks_per_batch = 1;
  auto pa = make_policy("htrmrl", small_cfg(), 21);
  auto pb = make_policy("htrmrl", small_cfg(), 21);
  Rng ra(55), rb(55);
  RolloutBatch a = collect_rollouts(*pa, reach_dist(), tcfg, ra);
  RolloutBatch b = collect_rollouts(*pb, reach_dist(), tcfg, rb);
  REQUIRE(a.total_steps() == b.total_steps());
  auto sa = a.all_steps(), sb = b.all_steps();
  for (std::size_t i = 0; i < sa.size(); ++i) {
    CHECK(sa[i]->state == sb[i]->state);
    CHECK(sa[i]->action == sb[i]->action);
    CHECK(sa[i]->logp == sb[i]->logp);
    CHECK(sa[i]->value == sb[i]->value);
    CHECK(sa[i]->reward == sb[i]->reward);
  }
}

TEST_CASE("advantage normalization") {
  auto policy = make_policy("flat", small_cfg(), 5);
  TrainConfig tcfg = small_train(5);
  Rng rng(42);
  RolloutBatch batch = collect_rollouts(*policy, reach_dist(), tcfg, rng);

  OptimState optim = make_optim_state(policy->params(), tcfg.lr);
  Rng urng(1);
  CHECK_THROWS_AS(ppo_update(*policy, batch, tcfg, optim, urng),
                  ContractError);

  compute_gae(batch, MDPSpaces{}.gamma, tcfg.gae_lambda);
  CHECK(batch.advantages_ready);
  double mean = 0.0, var = 0.0;
  const double n = static_cast<double>(batch.total_steps());
  for (const StepRecord* r : batch.all_steps()) mean += r->advantage;
  mean /= n;
  for (const StepRecord* r : batch.all_steps())
    var += (r->advantage - mean) * (r->advantage - mean);
  CHECK(std::abs(mean) < 1e-8);
  CHECK(std::abs(std::sqrt(var / n) - 1.0) < 1e-6);

  RolloutBatch empty;
  CHECK_THROWS_AS(compute_gae(empty, 0.99, 0.95), ContractError);
}

TEST_CASE("stored log probs survive replay under collection weights") {
  for (const char* kind : {"htrmrl", "flat", "recurrent"}) {
    CAPTURE(kind);
    auto policy = make_policy(kind, small_cfg(), 31);
    TrainConfig tcfg = small_train(31);
    Rng rng(77);
    RolloutBatch batch = collect_rollouts(*policy, reach_dist(), tcfg, rng);
    for (const auto& tr : batch.tasks) {
      std::vector<const StepRecord*> ptrs;
      for (const auto& r : tr.steps) ptrs.push_back(&r);
      Graph g;
      StepEval ev = policy->evaluate_actions(g, ptrs, batch.archive);
      const Tensor& lp = g.value(ev.logp);
      double worst = 0.0;
      for (std::size_t i = 0; i < ptrs.size(); ++i)
        worst = std::max(worst, std::abs(lp.at(static_cast<std::int64_t>(i), 0) -
                                         ptrs[i]->logp));
      CHECK(worst < 1e-10);
    }
  }
}

TEST_CASE("surrogate equals mean advantage when the ratio is one") {
  auto policy = make_policy("flat", small_cfg(), 13);
  TrainConfig tcfg = small_train(13);
  Rng rng(5);
  RolloutBatch batch = collect_rollouts(*policy, reach_dist(), tcfg, rng);
  compute_gae(batch, MDPSpaces{}.gamma, tcfg.gae_lambda);

  auto ptrs = batch.all_steps();
  double mean_adv = 0.0;
  for (const StepRecord* r : ptrs) mean_adv += r->advantage;
  mean_adv /= static_cast<double>(ptrs.size());

  Graph g;
  PpoLossParts parts;
  build_ppo_loss(g, *policy, ptrs, batch.archive, tcfg, &parts);
  const double surr = g.value(parts.surrogate).values()[0];
  CHECK(std::abs(surr - mean_adv) < 1e-8);
}

TEST_CASE("clip algebra at ratio two") {
  auto policy = make_policy("flat", small_cfg(), 17);
  TrainConfig tcfg = small_train(17);
  tcfg.tasks_per_batch = 1;
  tcfg.episodes_per_task = 1;
  Rng rng(23);
  RolloutBatch batch = collect_rollouts(*policy, reach_dist(), tcfg, rng);

  std::vector<StepRecord> crafted = batch.tasks[0].steps;
  std::vector<const StepRecord*> ptrs;
  for (auto& r : crafted) ptrs.push_back(&r);

  // read the current log probs, then shift the stored ones so the
  // importance ratio comes out at exactly exp(ln 2) = 2
  {
    Graph g;
    StepEval ev = policy->evaluate_actions(g, ptrs, batch.archive);
    const Tensor& lp = g.value(ev.logp);
    for (std::size_t i = 0; i < crafted.size(); ++i) {
      crafted[i].logp =
          lp.at(static_cast<std::int64_t>(i), 0) - std::log(2.0);
      crafted[i].advantage = 1.0;
    }
  }
  {
    Graph g;
    PpoLossParts parts;
    build_ppo_loss(g, *policy, ptrs, batch.archive, tcfg, &parts);
    // min(2 * 1, clip(2 -> 1.2) * 1) = 1.2 per step
    CHECK(g.value(parts.surrogate).values()[0] ==
          doctest::Approx(1.2).epsilon(1e-12));
  }
  for (auto& r : crafted) r.advantage = -1.0;
  {
    Graph g;
    PpoLossParts parts;
    build_ppo_loss(g, *policy, ptrs, batch.archive, tcfg, &parts);
    // min(2 * -1, 1.2 * -1) keeps the unclipped branch
    CHECK(g.value(parts.surrogate).values()[0] ==
          doctest::Approx(-2.0).epsilon(1e-12));
  }
}

TEST_CASE("one small update descends on a fixed batch") {
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL, 4ULL, 5ULL}) {
    CAPTURE(seed);
    auto policy = make_policy("htrmrl", small_cfg(), seed);
    TrainConfig tcfg = small_train(seed);
    tcfg.tasks_per_batch = 1;
    Rng rng(900 + seed);
    RolloutBatch batch = collect_rollouts(*policy, reach_dist(), tcfg, rng);
    compute_gae(batch, MDPSpaces{}.gamma, tcfg.gae_lambda);
    auto ptrs = batch.all_steps();

    const auto loss_now = [&] {
      Graph g;
      return g.value(build_ppo_loss(g, *policy, ptrs, batch.archive, tcfg,
                                    nullptr))
          .values()[0];
    };
    const double before = loss_now();
    OptimState optim = make_optim_state(policy->params(), tcfg.lr);
    Rng urng(seed);
    ppo_update(*policy, batch, tcfg, optim, urng);
    const double after = loss_now();
    REQUIRE(std::isfinite(before));
    REQUIRE(std::isfinite(after));
    CHECK(after < before);
  }
}

TEST_CASE("ppo update bookkeeping") {
  auto policy = make_policy("flat", small_cfg(), 41);
  TrainConfig tcfg = small_train(41);
  tcfg.ppo_epochs = 2;
  tcfg.minibatch = 64;
  Rng rng(19);
  RolloutBatch batch = collect_rollouts(*policy, reach_dist(), tcfg, rng);
  compute_gae(batch, MDPSpaces{}.gamma, tcfg.gae_lambda);

  const std::int64_t n = batch.total_steps();
  const std::int64_t per_epoch = (n + tcfg.minibatch - 1) / tcfg.minibatch;
  const std::uint64_t before = param_checksum(policy->params());
  OptimState optim = make_optim_state(policy->params(), tcfg.lr);
  Rng urng(3);
  PpoStats st = ppo_update(*policy, batch, tcfg, optim, urng);
  CHECK(st.minibatches == 2 * per_epoch);
  CHECK(st.grad_norm > 0.0);
  CHECK(std::isfinite(st.approx_kl));
  CHECK(param_checksum(policy->params()) != before);
}

TEST_CASE("recurrent minibatches stay within task boundaries") {
  auto policy = make_policy("recurrent", small_cfg(), 43);
  TrainConfig tcfg = small_train(43);
  tcfg.ppo_epochs = 1;
  tcfg.minibatch = 150;  // forces a split inside each task
  Rng rng(29);
  RolloutBatch batch = collect_rollouts(*policy, reach_dist(), tcfg, rng);
  compute_gae(batch, MDPSpaces{}.gamma, tcfg.gae_lambda);

  std::int64_t want = 0;
  for (const auto& tr : batch.tasks) {
    const std::int64_t len = static_cast<std::int64_t>(tr.steps.size());
    want += (len + tcfg.minibatch - 1) / tcfg.minibatch;
  }
  OptimState optim = make_optim_state(policy->params(), tcfg.lr);
  Rng urng(4);
  PpoStats st = ppo_update(*policy, batch, tcfg, optim, urng);
  CHECK(st.minibatches == want);
}

TEST_CASE("non-finite loss aborts with diagnostics") {
  auto policy = make_policy("flat", small_cfg(), 47);
  TrainConfig tcfg = small_train(47);
  tcfg.tasks_per_batch = 1;
  Rng rng(31);
  RolloutBatch batch = collect_rollouts(*policy, reach_dist(), tcfg, rng);
  compute_gae(batch, MDPSpaces{}.gamma, tcfg.gae_lambda);

  policy->params().find("head.mu.w")->value.fill(
      std::numeric_limits<double>::quiet_NaN());
  OptimState optim = make_optim_state(policy->params(), tcfg.lr);
  Rng urng(5);
  CHECK_THROWS_AS(ppo_update(*policy, batch, tcfg, optim, urng), NumericError);
}

TEST_CASE("adaptation is gradient free") {
  auto policy = make_policy("htrmrl", small_cfg(), 53);
  Rng rng(61);
  TaskSpec task = sample_task(reach_dist(), Split::kTest, rng);

  const std::uint64_t before = param_checksum(policy->params());
  AdaptResult res = adapt_and_eval(*policy, task, 3, 3, 2, rng);
  CHECK(param_checksum(policy->params()) == before);
  CHECK(res.success.size() == 3);
  CHECK(res.disc_returns.size() == 3);
  for (double r : res.disc_returns) CHECK(std::isfinite(r));

  AdaptResult zero_shot = adapt_and_eval(*policy, task, 1, 3, 2, rng);
  CHECK(zero_shot.success.size() == 1);

  CHECK_THROWS_AS(adapt_and_eval(*policy, task, 2, 4, 2, rng), ConfigError);
  CHECK_THROWS_AS(adapt_and_eval(*policy, task, 0, 3, 2, rng), ConfigError);
}

TEST_CASE("meta train below one batch does nothing") {
  TrainConfig tcfg = small_train(59);
  tcfg.meta_steps = 100;  // one batch needs up to 400
  TrainResult res = meta_train("flat", small_cfg(), tcfg, reach_dist());
  CHECK(res.updates == 0);
  CHECK(res.env_steps == 0);
  CHECK(res.metrics.empty());
  REQUIRE(res.policy != nullptr);
}

TEST_CASE("meta train logs, checkpoints and reproduces") {
  TrainConfig tcfg = small_train(67);
  tcfg.meta_steps = 900;
  MetaTrainOptions opts;
  opts.eval_every = 300;
  opts.eval_tasks = 2;
  opts.eval_episodes = 2;
  opts.checkpoint_every = 400;
  std::vector<std::int64_t> ckpt_steps;
  opts.on_checkpoint = [&ckpt_steps](const Policy&, std::int64_t steps) {
    ckpt_steps.push_back(steps);
  };

  TrainResult a = meta_train("flat", small_cfg(), tcfg, reach_dist(), opts);
  CHECK(a.updates >= 1);
  CHECK(a.env_steps <= tcfg.meta_steps);
  REQUIRE(!a.metrics.empty());

  // one checkpoint per schedule crossing plus the final one
  REQUIRE(!ckpt_steps.empty());
  CHECK(ckpt_steps.back() == a.env_steps);

  std::int64_t last_train = 0, last_test = 0, last_any = 0;
  bool saw_test = false;
  for (const auto& row : a.metrics) {
    CHECK(row.env_steps >= last_any);
    last_any = row.env_steps;
    if (row.split == "train") {
      CHECK(row.env_steps > last_train);
      last_train = row.env_steps;
      CHECK(row.task_family == "reach");
    } else {
      REQUIRE(row.split == "test");
      CHECK(row.env_steps > last_test);
      last_test = row.env_steps;
      saw_test = true;
    }
    CHECK(row.success_rate >= 0.0);
    CHECK(row.success_rate <= 1.0);
    CHECK(std::isfinite(row.mean_return));
  }
  CHECK(saw_test);

  MetaTrainOptions opts_b = opts;
  opts_b.on_checkpoint = nullptr;
  TrainResult b = meta_train("flat", small_cfg(), tcfg, reach_dist(), opts_b);
  std::ostringstream csv_a, csv_b;
  write_metrics_csv(csv_a, a.metrics);
  write_metrics_csv(csv_b, b.metrics);
  CHECK(drop_wall_time(csv_a.str()) == drop_wall_time(csv_b.str()));
}

TEST_CASE("metrics csv header is stable") {
  std::ostringstream os;
  MetricsRow row;
  row.env_steps = 400;
  row.split = "train";
  row.task_family = "reach";
  row.success_rate = 0.25;
  write_metrics_csv(os, {row});
  std::istringstream in(os.str());
  std::string header, line;
  std::getline(in, header);
  CHECK(header ==
        "env_steps,split,task_family,success_rate,mean_return,policy_loss,"
        "value_loss,entropy,wall_time");
  std::getline(in, line);
  CHECK(line.substr(0, 22) == "400,train,reach,0.25,0");
}
