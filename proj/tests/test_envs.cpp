#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <limits>
#include <set>
#include <vector>

#include "hmeta/envs.hpp"
#include "hmeta/errors.hpp"
#include "hmeta/rng.hpp"

using namespace hmeta;

namespace {

double vnorm(const std::vector<double>& s) {
  return std::sqrt(s[4] * s[4] + s[5] * s[5]);
}

double edist(const std::array<double, 2>& a, const std::array<double, 2>& b) {
  return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) +
                   (a[1] - b[1]) * (a[1] - b[1]));
}

// runs the scripted controller to the end of one episode
bool oracle_episode(PointMassEnv& env, Rng& rng, double* min_speed_margin) {
  env.reset(rng);
  for (;;) {
    StepResult r = env.step(oracle_action(env));
    double margin = env.params().vmax - vnorm(r.state);
    if (min_speed_margin) *min_speed_margin = std::min(*min_speed_margin, margin);
    if (r.done) return r.success;
  }
}

double oracle_success_rate(Family family, int trials, std::uint64_t seed) {
  TaskDistribution dist;
  dist.mln = true;
  dist.train_families = {family};
  Rng rng(seed);
  int wins = 0;
  double margin = std::numeric_limits<double>::infinity();
  for (int i = 0; i < trials; ++i) {
    TaskSpec task = sample_task(dist, Split::kTrain, rng);
    PointMassEnv env(task, MDPSpaces{});
    if (oracle_episode(env, rng, &margin)) ++wins;
  }
  CHECK(margin >= -1e-12);  // physics sanity: |v| <= vmax on every step
  return static_cast<double>(wins) / trials;
}

}  // namespace

TEST_CASE("family names round-trip and bad values are rejected") {
  for (Family f : {Family::kReach, Family::kPush, Family::kPull,
                   Family::kAvoidReach, Family::kHold, Family::kReturn}) {
    CHECK(family_from_name(family_name(f)) == f);
  }
  CHECK_THROWS_AS(family_from_name("climb"), ConfigError);

  TaskSpec bad;
  bad.family = static_cast<Family>(99);
  CHECK_THROWS_AS(PointMassEnv(bad, MDPSpaces{}), ContractError);
}

TEST_CASE("reset: determinism, bounds, zero velocity") {
  TaskDistribution dist;
  Rng task_rng(7);
  TaskSpec task = sample_task(dist, Split::kTrain, task_rng);
  PointMassEnv env(task, MDPSpaces{});

  Rng a(42), b(42);
  std::vector<double> s1 = env.reset(a);
  std::vector<double> s2 = env.reset(b);
  CHECK(s1 == s2);

  Rng r(3);
  for (int i = 0; i < 10000; ++i) {
    std::vector<double> s = env.reset(r);
    double start_norm = std::sqrt(s[0] * s[0] + s[1] * s[1]);
    CHECK(start_norm <= 0.1 + 1e-12);
    CHECK(s[2] == task.object_start[0]);
    CHECK(s[3] == task.object_start[1]);
    CHECK(s[4] == 0.0);
    CHECK(s[5] == 0.0);
  }
}

TEST_CASE("observation never contains the goal") {
  // identical rng, two tasks differing only in the goal: the observation
  // cannot change, because the goal is not part of the layout
  TaskSpec t1;
  t1.family = Family::kReach;
  t1.goal = {0.5, 0.1};
  t1.object_start = {0.2, -0.3};
  TaskSpec t2 = t1;
  t2.goal = {-0.4, 0.6};

  PointMassEnv e1(t1, MDPSpaces{}), e2(t2, MDPSpaces{});
  Rng a(11), b(11);
  CHECK(e1.reset(a) == e2.reset(b));

  std::vector<double> act{0.3, -0.7};
  StepResult r1 = e1.step(act);
  StepResult r2 = e2.step(act);
  CHECK(r1.state == r2.state);   // same dynamics, goal only shapes reward
  CHECK(r1.reward != r2.reward);
}

TEST_CASE("zero action from rest leaves the agent stationary") {
  TaskSpec task;
  task.family = Family::kReach;
  task.goal = {0.4, 0.3};
  EnvParams p;
  p.start_radius = 0.0;  // agent exactly at the origin
  PointMassEnv env(task, MDPSpaces{}, p);
  Rng rng(1);
  std::vector<double> s0 = env.reset(rng);
  double expected = -0.5;  // -|start - goal| = -sqrt(0.16 + 0.09)
  for (int i = 0; i < 20; ++i) {
    StepResult r = env.step({0.0, 0.0});
    CHECK(r.state == s0);
    CHECK(r.reward == doctest::Approx(expected).epsilon(1e-12));
    CHECK(!r.done);
  }
}

TEST_CASE("REACH with agent already at the goal succeeds at step 1") {
  TaskSpec task;
  task.family = Family::kReach;
  task.goal = {0.0, 0.0};
  EnvParams p;
  p.start_radius = 0.0;
  PointMassEnv env(task, MDPSpaces{}, p);
  Rng rng(5);
  env.reset(rng);
  StepResult r = env.step({0.0, 0.0});
  CHECK(r.success);
  CHECK(r.done);
  CHECK(r.reward == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("actions outside the box are clamped, not rejected") {
  TaskSpec task;
  task.family = Family::kReach;
  task.goal = {0.5, 0.0};
  EnvParams p;
  p.start_radius = 0.0;
  PointMassEnv a(task, MDPSpaces{}, p), b(task, MDPSpaces{}, p);
  Rng r1(9), r2(9);
  a.reset(r1);
  b.reset(r2);
  StepResult ra = a.step({10.0, -3.0});
  StepResult rb = b.step({1.0, -1.0});
  CHECK(ra.state == rb.state);
  CHECK(ra.reward == rb.reward);
}

TEST_CASE("step contract errors") {
  TaskSpec task;
  task.family = Family::kReach;
  task.goal = {0.5, 0.0};
  PointMassEnv env(task, MDPSpaces{});
  CHECK_THROWS_AS(env.step({0.0, 0.0}), ContractError);  // before reset

  Rng rng(2);
  env.reset(rng);
  CHECK_THROWS_AS(env.step({0.0}), ContractError);
  CHECK_THROWS_AS(env.step({0.0, 0.0, 0.0}), ContractError);
  double nan = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(env.step({nan, 0.0}), NumericError);

  // drive to done, then stepping again must fail until reset
  for (int i = 0; i < 100; ++i) {
    StepResult r = env.step({0.0, 0.0});
    if (r.done) break;
  }
  CHECK_THROWS_AS(env.step({0.0, 0.0}), ContractError);
  env.reset(rng);
  CHECK_NOTHROW(env.step({0.0, 0.0}));
}

TEST_CASE("speed stays bounded under arbitrary action streams") {
  TaskDistribution dist;
  Rng task_rng(13);
  TaskSpec task = sample_task(dist, Split::kTrain, task_rng);
  PointMassEnv env(task, MDPSpaces{});
  Rng rng(17);
  env.reset(rng);
  for (int i = 0; i < 2000; ++i) {
    StepResult r = env.step({rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)});
    CHECK(vnorm(r.state) <= 1.0 + 1e-12);
    if (r.done) env.reset(rng);
  }
}

TEST_CASE("PUSH carry: object tracks the agent only within the grab radius") {
  TaskSpec task;
  task.family = Family::kPush;
  task.goal = {0.6, 0.0};
  task.object_start = {0.05, 0.0};  // inside the grab radius at reset
  EnvParams p;
  p.start_radius = 0.0;
  PointMassEnv env(task, MDPSpaces{}, p);
  Rng rng(4);
  env.reset(rng);
  StepResult r = env.step({1.0, 0.0});
  // v = 0.9 * 0.1 = 0.09, agent moves 0.009; the object shifts with it
  CHECK(r.state[0] == doctest::Approx(0.009).epsilon(1e-12));
  CHECK(r.state[2] == doctest::Approx(0.059).epsilon(1e-12));
  CHECK(edist({r.state[0], r.state[1]}, {r.state[2], r.state[3]}) ==
        doctest::Approx(0.05).epsilon(1e-9));

  task.object_start = {0.3, 0.0};  // out of reach: stays put
  PointMassEnv far(task, MDPSpaces{}, p);
  far.reset(rng);
  StepResult rf = far.step({1.0, 0.0});
  CHECK(rf.state[2] == 0.3);
  CHECK(rf.state[3] == 0.0);
}

TEST_CASE("AVOID-REACH pays -1 inside the forbidden disc") {
  TaskSpec task;
  task.family = Family::kAvoidReach;
  task.goal = {0.1, 0.0};
  task.avoid_center = {0.05, 0.0};  // origin is inside the disc (r=0.15)
  EnvParams p;
  p.start_radius = 0.0;
  PointMassEnv env(task, MDPSpaces{}, p);
  Rng rng(6);
  env.reset(rng);
  StepResult r = env.step({0.0, 0.0});
  CHECK(r.reward == doctest::Approx(-1.1).epsilon(1e-12));

  task.avoid_center = {0.5, 0.5};  // far away: plain REACH reward
  PointMassEnv clear(task, MDPSpaces{}, p);
  clear.reset(rng);
  CHECK(clear.step({0.0, 0.0}).reward == doctest::Approx(-0.1).epsilon(1e-12));
}

TEST_CASE("HOLD succeeds only at the horizon after a full final streak") {
  TaskSpec task;
  task.family = Family::kHold;
  task.goal = {0.0, 0.0};
  EnvParams p;
  p.start_radius = 0.0;  // parked inside the goal disc from the start
  PointMassEnv env(task, MDPSpaces{}, p);
  Rng rng(8);
  env.reset(rng);
  for (int i = 1; i <= 100; ++i) {
    StepResult r = env.step({0.0, 0.0});
    if (i < 100) {
      CHECK(!r.done);
      CHECK(!r.success);
    } else {
      CHECK(r.done);
      CHECK(r.success);
    }
  }

  task.goal = {0.5, 0.5};  // never enters the disc: horizon without success
  PointMassEnv miss(task, MDPSpaces{}, p);
  miss.reset(rng);
  StepResult last;
  for (int i = 0; i < 100; ++i) last = miss.step({0.0, 0.0});
  CHECK(last.done);
  CHECK(!last.success);
}

TEST_CASE("RETURN requires touching the goal before coming home") {
  TaskSpec task;
  task.family = Family::kReturn;
  task.goal = {0.3, 0.0};
  EnvParams p;
  p.start_radius = 0.0;
  PointMassEnv env(task, MDPSpaces{}, p);
  Rng rng(10);
  env.reset(rng);
  // sitting at the start forever: never touched the goal, never succeeds
  StepResult last;
  for (int i = 0; i < 100; ++i) {
    last = env.step({0.0, 0.0});
    CHECK(last.reward == doctest::Approx(-0.3).epsilon(1e-12));
    CHECK(!last.success);
  }
  CHECK(last.done);
  CHECK(!env.goal_touched());
}

TEST_CASE("sample_task: ML1 goal bins are disjoint between splits") {
  TaskDistribution dist;  // ML1 over REACH by default
  Rng rng(21);
  const double bin_width = 2.0 * 3.14159265358979323846 / 36.0;
  for (int i = 0; i < 100000; ++i) {
    Split split = (i % 2 == 0) ? Split::kTrain : Split::kTest;
    TaskSpec t = sample_task(dist, split, rng);
    CHECK(t.family == Family::kReach);
    double radius = std::sqrt(t.goal[0] * t.goal[0] + t.goal[1] * t.goal[1]);
    CHECK(radius >= 0.3);
    CHECK(radius <= 0.7);
    double angle = std::atan2(t.goal[1], t.goal[0]);
    if (angle < 0) angle += 2.0 * 3.14159265358979323846;
    int bin = static_cast<int>(angle / bin_width) % 36;
    if (split == Split::kTrain) {
      CHECK(bin % 2 == 0);
    } else {
      CHECK(bin % 2 == 1);
    }
  }
}

TEST_CASE("sample_task: MLn family sets never leak across splits") {
  TaskDistribution dist;
  dist.mln = true;
  Rng rng(22);
  std::set<Family> train_seen, test_seen;
  for (int i = 0; i < 100000; ++i) {
    train_seen.insert(sample_task(dist, Split::kTrain, rng).family);
    test_seen.insert(sample_task(dist, Split::kTest, rng).family);
  }
  CHECK(train_seen ==
        std::set<Family>{Family::kReach, Family::kPush, Family::kAvoidReach,
                         Family::kHold});
  CHECK(test_seen == std::set<Family>{Family::kPull, Family::kReturn});

  TaskDistribution empty;
  empty.mln = true;
  empty.test_families.clear();
  CHECK_THROWS_AS(sample_task(empty, Split::kTest, rng), ContractError);
}

TEST_CASE("sample_task: fixed seed reproduces the task sequence") {
  TaskDistribution dist;
  dist.mln = true;
  Rng a(33), b(33);
  for (int i = 0; i < 50; ++i) {
    TaskSpec ta = sample_task(dist, Split::kTrain, a);
    TaskSpec tb = sample_task(dist, Split::kTrain, b);
    CHECK(ta.family == tb.family);
    CHECK(ta.goal == tb.goal);
    CHECK(ta.object_start == tb.object_start);
    CHECK(ta.id == tb.id);
  }
}

TEST_CASE("PULL starts with the object beyond the goal") {
  TaskDistribution dist;
  dist.mln = true;
  Rng rng(44);
  for (int i = 0; i < 200; ++i) {
    TaskSpec t = sample_task(dist, Split::kTest, rng);
    if (t.family != Family::kPull) continue;
    CHECK(edist(t.object_start, t.goal) == doctest::Approx(0.2).epsilon(1e-9));
    double object_r = std::sqrt(t.object_start[0] * t.object_start[0] +
                                t.object_start[1] * t.object_start[1]);
    double goal_r =
        std::sqrt(t.goal[0] * t.goal[0] + t.goal[1] * t.goal[1]);
    CHECK(object_r > goal_r);  // beyond, along the same ray
  }
}

TEST_CASE("scripted oracles clear every family") {
  struct Row {
    Family family;
    double floor;
  };
  const Row rows[] = {
      {Family::kReach, 0.90},      {Family::kPush, 0.95},
      {Family::kPull, 0.90},       {Family::kAvoidReach, 0.90},
      {Family::kHold, 0.90},       {Family::kReturn, 0.90},
  };
  for (const Row& row : rows) {
    double rate = oracle_success_rate(row.family, 200, 1000 + static_cast<int>(row.family));
    std::printf("oracle %-12s success %.3f (floor %.2f)\n",
                family_name(row.family).c_str(), rate, row.floor);
    CHECK(rate >= row.floor);
  }
}
