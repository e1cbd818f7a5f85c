#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "hmeta/rng.hpp"

namespace hmeta {

enum class Family {
  kReach,
  kPush,
  kPull,
  kAvoidReach,
  kHold,
  kReturn,
};

std::string family_name(Family f);
Family family_from_name(const std::string& name);

/// Shared across every family so one policy fits all tasks.
struct MDPSpaces {
  std::int64_t state_dim = 6;   // agent xy, object xy, velocity xy
  std::int64_t action_dim = 2;  // force on agent, box [-1,1]^2
  double gamma = 0.99;
  std::int64_t horizon = 100;
};

/// Physics and scoring constants. Invented desk-scale values; the task
/// structure, not these numbers, carries the experiment.
struct EnvParams {
  double dt = 0.1;
  double damping = 0.9;
  double vmax = 1.0;
  double success_radius = 0.05;
  double grab_radius = 0.1;     // push/pull carry distance
  double start_radius = 0.1;    // agent reset disc
  double avoid_radius = 0.15;   // forbidden disc
  std::int64_t hold_steps = 10; // final steps required inside the goal disc
};

/// A sampled task. Hidden parameters never appear in observations.
struct TaskSpec {
  Family family = Family::kReach;
  std::uint64_t id = 0;
  std::array<double, 2> goal{0.0, 0.0};
  std::array<double, 2> object_start{0.0, 0.0};
  std::array<double, 2> avoid_center{0.0, 0.0};
};

enum class Split { kTrain, kTest };

/// ML1 mode: one family, goals split into disjoint angular bins.
/// MLn mode: disjoint family sets for train and test.
struct TaskDistribution {
  bool mln = false;
  Family ml1_family = Family::kReach;
  std::vector<Family> train_families{Family::kReach, Family::kPush,
                                     Family::kAvoidReach, Family::kHold};
  std::vector<Family> test_families{Family::kPull, Family::kReturn};
  double annulus_lo = 0.3;
  double annulus_hi = 0.7;
};

TaskSpec sample_task(const TaskDistribution& dist, Split split, Rng& rng);

struct StepResult {
  std::vector<double> state;
  double reward = 0.0;
  bool done = false;
  bool success = false;
};

class PointMassEnv {
 public:
  PointMassEnv(TaskSpec task, MDPSpaces spaces, EnvParams params = {});

  std::vector<double> reset(Rng& rng);
  StepResult step(const std::vector<double>& action);

  const TaskSpec& task() const { return task_; }
  const MDPSpaces& spaces() const { return spaces_; }
  const EnvParams& params() const { return params_; }
  std::int64_t steps_taken() const { return steps_; }

  // introspection for the scripted controllers and tests
  const std::array<double, 2>& agent() const { return agent_; }
  const std::array<double, 2>& object() const { return object_; }
  const std::array<double, 2>& velocity() const { return vel_; }
  const std::array<double, 2>& start() const { return start_; }
  bool goal_touched() const { return goal_touched_; }

 private:
  std::vector<double> observation() const;

  TaskSpec task_;
  MDPSpaces spaces_;
  EnvParams params_;
  std::array<double, 2> agent_{0, 0};
  std::array<double, 2> object_{0, 0};
  std::array<double, 2> vel_{0, 0};
  std::array<double, 2> start_{0, 0};
  std::int64_t steps_ = 0;
  bool goal_touched_ = false;     // RETURN phase flag
  std::int64_t hold_streak_ = 0;  // HOLD consecutive in-disc steps
  bool reset_called_ = false;
};

/// Hand-tuned controller with full task knowledge; validates that every
/// family is solvable within the horizon before any learning runs.
std::vector<double> oracle_action(const PointMassEnv& env);

}  // namespace hmeta
