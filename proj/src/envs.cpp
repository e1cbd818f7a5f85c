#include "hmeta/envs.hpp"

#include <algorithm>
#include <cmath>

#include "hmeta/errors.hpp"

namespace hmeta {
namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;
constexpr int kAngleBins = 36;  // 10 degree bins for the ML1 goal split

double norm2(const std::array<double, 2>& v) {
  return std::sqrt(v[0] * v[0] + v[1] * v[1]);
}

std::array<double, 2> diff(const std::array<double, 2>& a,
                           const std::array<double, 2>& b) {
  return {a[0] - b[0], a[1] - b[1]};
}

double dist2(const std::array<double, 2>& a, const std::array<double, 2>& b) {
  return norm2(diff(a, b));
}

}  // namespace

std::string family_name(Family f) {
  switch (f) {
    case Family::kReach: return "reach";
    case Family::kPush: return "push";
    case Family::kPull: return "pull";
    case Family::kAvoidReach: return "avoid-reach";
    case Family::kHold: return "hold";
    case Family::kReturn: return "return";
  }
  throw ContractError("unknown family enum value");
}

Family family_from_name(const std::string& name) {
  for (Family f : {Family::kReach, Family::kPush, Family::kPull,
                   Family::kAvoidReach, Family::kHold, Family::kReturn}) {
    if (family_name(f) == name) return f;
  }
  throw ConfigError("unknown task family '" + name + "'");
}

TaskSpec sample_task(const TaskDistribution& dist, Split split, Rng& rng) {
  if (!(dist.annulus_lo > 0.0) || !(dist.annulus_hi > dist.annulus_lo)) {
    throw ContractError("task annulus must satisfy 0 < lo < hi");
  }

  TaskSpec task;
  double angle = 0.0;
  if (dist.mln) {
    const auto& fams =
        split == Split::kTrain ? dist.train_families : dist.test_families;
    if (fams.empty()) throw ContractError("requested split has no families");
    task.family = fams[static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::uint64_t>(fams.size())))];
    angle = rng.uniform(0.0, kTwoPi);
  } else {
    task.family = dist.ml1_family;
    // disjoint angular bins: even bins train, odd bins test
    std::uint64_t half = rng.uniform_int(kAngleBins / 2);
    std::uint64_t bin = 2 * half + (split == Split::kTest ? 1 : 0);
    angle = (static_cast<double>(bin) + rng.uniform()) * (kTwoPi / kAngleBins);
  }

  double radius = rng.uniform(dist.annulus_lo, dist.annulus_hi);
  task.goal = {radius * std::cos(angle), radius * std::sin(angle)};
  task.avoid_center = {0.5 * task.goal[0], 0.5 * task.goal[1]};

  switch (task.family) {
    case Family::kPush:
      // halfway between the origin and the goal
      task.object_start = task.avoid_center;
      break;
    case Family::kPull: {
      // a little beyond the goal along its ray, so it must be dragged back
      double scale = (radius + 0.2) / radius;
      task.object_start = {scale * task.goal[0], scale * task.goal[1]};
      break;
    }
    default: {
      // decoy object, independent of the goal
      double da = rng.uniform(0.0, kTwoPi);
      double dr = rng.uniform(dist.annulus_lo, dist.annulus_hi);
      task.object_start = {dr * std::cos(da), dr * std::sin(da)};
      break;
    }
  }

  task.id = rng.next_u64();
  return task;
}

PointMassEnv::PointMassEnv(TaskSpec task, MDPSpaces spaces, EnvParams params)
    : task_(task), spaces_(spaces), params_(params) {
  if (spaces_.state_dim != 6 || spaces_.action_dim != 2) {
    throw ConfigError("point-mass tasks use 6-dim states and 2-dim actions");
  }
  if (spaces_.horizon < 1) throw ConfigError("horizon must be positive");
  family_name(task_.family);  // rejects out-of-range family values
}

std::vector<double> PointMassEnv::observation() const {
  return {agent_[0], agent_[1], object_[0], object_[1], vel_[0], vel_[1]};
}

std::vector<double> PointMassEnv::reset(Rng& rng) {
  double r = params_.start_radius * std::sqrt(rng.uniform());
  double a = rng.uniform(0.0, kTwoPi);
  agent_ = {r * std::cos(a), r * std::sin(a)};
  start_ = agent_;
  object_ = task_.object_start;
  vel_ = {0.0, 0.0};
  steps_ = 0;
  goal_touched_ = false;
  hold_streak_ = 0;
  reset_called_ = true;
  return observation();
}

StepResult PointMassEnv::step(const std::vector<double>& action) {
  if (!reset_called_) throw ContractError("step before reset");
  if (action.size() != 2) throw ContractError("action must have 2 entries");
  if (!std::isfinite(action[0]) || !std::isfinite(action[1])) {
    throw NumericError("non-finite action");
  }

  std::array<double, 2> a{std::clamp(action[0], -1.0, 1.0),
                          std::clamp(action[1], -1.0, 1.0)};

  bool carrying = (task_.family == Family::kPush ||
                   task_.family == Family::kPull) &&
                  dist2(agent_, object_) < params_.grab_radius;

  vel_[0] = params_.damping * (vel_[0] + a[0] * params_.dt);
  vel_[1] = params_.damping * (vel_[1] + a[1] * params_.dt);
  double speed = norm2(vel_);
  if (speed > params_.vmax) {
    vel_[0] *= params_.vmax / speed;
    vel_[1] *= params_.vmax / speed;
  }
  std::array<double, 2> delta{params_.dt * vel_[0], params_.dt * vel_[1]};
  agent_[0] += delta[0];
  agent_[1] += delta[1];
  if (carrying) {
    object_[0] += delta[0];
    object_[1] += delta[1];
  }

  ++steps_;

  double agent_goal = dist2(agent_, task_.goal);
  double object_goal = dist2(object_, task_.goal);
  double reward = 0.0;
  bool success = false;

  switch (task_.family) {
    case Family::kReach:
      reward = -agent_goal;
      success = agent_goal < params_.success_radius;
      break;
    case Family::kPush:
    case Family::kPull:
      reward = -object_goal;
      success = object_goal < params_.success_radius;
      break;
    case Family::kAvoidReach: {
      reward = -agent_goal;
      if (dist2(agent_, task_.avoid_center) < params_.avoid_radius) {
        reward -= 1.0;
      }
      success = agent_goal < params_.success_radius;
      break;
    }
    case Family::kHold: {
      reward = -agent_goal;
      if (agent_goal < params_.success_radius) {
        ++hold_streak_;
      } else {
        hold_streak_ = 0;
      }
      // only decided at the horizon: the last hold_steps steps must all
      // have stayed inside the goal disc
      success = steps_ >= spaces_.horizon && hold_streak_ >= params_.hold_steps;
      break;
    }
    case Family::kReturn: {
      if (!goal_touched_ && agent_goal < params_.success_radius) {
        goal_touched_ = true;
      }
      double agent_start = dist2(agent_, start_);
      reward = goal_touched_ ? -agent_start : -agent_goal;
      success = goal_touched_ && agent_start < params_.success_radius;
      break;
    }
  }

  bool done = success || steps_ >= spaces_.horizon;
  if (done) reset_called_ = false;  // require reset before further steps
  return {observation(), reward, done, success};
}

namespace {

// inverse of the integrator: pick the acceleration that tracks v_des
std::vector<double> steer(const PointMassEnv& env,
                          const std::array<double, 2>& target) {
  const EnvParams& p = env.params();
  std::array<double, 2> to = diff(target, env.agent());
  double dist = norm2(to);
  std::array<double, 2> v_des{0.0, 0.0};
  if (dist > 1e-12) {
    double speed = std::min(p.vmax, 4.0 * dist);
    v_des = {to[0] / dist * speed, to[1] / dist * speed};
  }
  const auto& v = env.velocity();
  double ax = (v_des[0] / p.damping - v[0]) / p.dt;
  double ay = (v_des[1] / p.damping - v[1]) / p.dt;
  return {std::clamp(ax, -1.0, 1.0), std::clamp(ay, -1.0, 1.0)};
}

std::array<double, 2> avoid_target(const PointMassEnv& env) {
  const TaskSpec& t = env.task();
  const EnvParams& p = env.params();
  std::array<double, 2> to_goal = diff(t.goal, env.agent());
  std::array<double, 2> from_c = diff(env.agent(), t.avoid_center);
  double dc = norm2(from_c);

  // trapped near or inside the disc: head straight out
  if (dc < p.avoid_radius + 0.03) {
    if (dc < 1e-9) return {t.avoid_center[0] + p.avoid_radius + 0.2,
                           t.avoid_center[1]};
    double s = (p.avoid_radius + 0.2) / dc;
    return {t.avoid_center[0] + from_c[0] * s,
            t.avoid_center[1] + from_c[1] * s};
  }

  // does the straight line to the goal pass through the padded disc?
  double seg = norm2(to_goal);
  if (seg < 1e-9) return t.goal;
  std::array<double, 2> dir{to_goal[0] / seg, to_goal[1] / seg};
  std::array<double, 2> to_c = diff(t.avoid_center, env.agent());
  double along = to_c[0] * dir[0] + to_c[1] * dir[1];
  double lateral = to_c[0] * dir[1] - to_c[1] * dir[0];
  double pad = p.avoid_radius + 0.02;
  if (along > 0.0 && along < seg && std::abs(lateral) < pad) {
    // detour waypoint beside the disc, on the side the agent already favors
    double side = lateral >= 0.0 ? -1.0 : 1.0;  // opposite of the center
    std::array<double, 2> perp{dir[1] * side, -dir[0] * side};
    double off = p.avoid_radius + 0.15;
    return {t.avoid_center[0] + perp[0] * off,
            t.avoid_center[1] + perp[1] * off};
  }
  return t.goal;
}

}  // namespace

std::vector<double> oracle_action(const PointMassEnv& env) {
  const TaskSpec& t = env.task();
  switch (t.family) {
    case Family::kReach:
    case Family::kHold:
      return steer(env, t.goal);
    case Family::kAvoidReach:
      return steer(env, avoid_target(env));
    case Family::kPush:
    case Family::kPull: {
      // same threshold the dynamics use: once inside, the offset is frozen
      // and chasing the object is a livelock, so steer the pair instead
      std::array<double, 2> offset = diff(env.object(), env.agent());
      if (norm2(offset) < env.params().grab_radius) {
        return steer(env, {t.goal[0] - offset[0], t.goal[1] - offset[1]});
      }
      return steer(env, env.object());
    }
    case Family::kReturn:
      return steer(env, env.goal_touched() ? env.start() : t.goal);
  }
  throw ContractError("unknown family enum value");
}

}  // namespace hmeta
