#include <cmath>
#include <cstring>
#include <stdexcept>
#include <vector>

#include "dalir/env.hpp"
#include "dalir/rng.hpp"
#include "doctest.h"

using namespace dalir;

namespace {

struct Rollout {
  bool success = false;
  bool wall_hit = false;
  int steps = 0;
  std::vector<float> actions;
};

Rollout run_expert(const Env& env, uint64_t seed) {
  Rollout r;
  EnvState s = env.reset(seed);
  std::vector<float> a(size_t(env.spec().action_dim));
  while (!s.done) {
    env.expert_action(s, a);
    r.actions.insert(r.actions.end(), a.begin(), a.end());
    env.step(s, a);
  }
  r.success = s.success;
  r.wall_hit = s.wall_hit;
  r.steps = s.t;
  return r;
}

}  // namespace

TEST_CASE("task table") {
  CHECK(all_tasks().size() == 3);
  for (Task t : all_tasks()) CHECK(task_from_name(task_name(t)) == t);
  CHECK_THROWS_AS(task_from_name("juggle"), std::invalid_argument);

  const TaskSpec& reach = task_spec(Task::reach);
  CHECK(reach.action_dim == 3);
  CHECK(reach.state_dim == 3);
  CHECK(reach.max_steps == 60);
  const TaskSpec& push = task_spec(Task::push_box);
  CHECK(push.action_dim == 3);
  CHECK(push.max_steps == 80);
  const TaskSpec& pick = task_spec(Task::pick_place_wall);
  CHECK(pick.action_dim == 4);
  CHECK(pick.state_dim == 4);
  CHECK(pick.max_steps == 100);
  CHECK(pick.step_z > 0.0f);
  for (Task t : all_tasks()) {
    CHECK(task_spec(t).num_points == 128);
    CHECK(task_spec(t).goal_radius > 0.0f);
    CHECK(task_spec(t).reward_floor < 0.0f);
  }
}

TEST_CASE("reset and observation are functions of the seed") {
  for (Task t : all_tasks()) {
    Env env(t);
    EnvState a = env.reset(101), b = env.reset(101);
    CHECK(std::memcmp(a.grip_pos, b.grip_pos, sizeof(a.grip_pos)) == 0);
    CHECK(std::memcmp(a.goal, b.goal, sizeof(a.goal)) == 0);
    CHECK(std::memcmp(a.object_pos, b.object_pos, sizeof(a.object_pos)) == 0);

    Observation oa = env.observe(a), ob = env.observe(b);
    CHECK(oa.points == ob.points);
    CHECK(oa.state == ob.state);
    CHECK(oa.points.size() == size_t(env.spec().num_points) * 3);
    CHECK(oa.state.size() == size_t(env.spec().state_dim));

    // stepping advances the observation stream even when nothing moves
    EnvState c = env.reset(101);
    std::vector<float> zero(size_t(env.spec().action_dim), 0.0f);
    env.step(c, zero);
    CHECK(env.observe(c).points != oa.points);

    bool any_diff = false;
    for (uint64_t s2 = 102; s2 < 106; ++s2) {
      EnvState d = env.reset(s2);
      any_diff = any_diff || std::memcmp(d.goal, a.goal, sizeof(a.goal)) != 0;
    }
    CHECK(any_diff);
  }
}

TEST_CASE("scripted expert is reliable on every task") {
  for (Task t : all_tasks()) {
    Env env(t);
    int succ = 0;
    long steps = 0;
    for (int i = 0; i < 100; ++i) {
      Rollout r = run_expert(env, Rng::substream(5000, task_name(t), uint64_t(i)).next_u64());
      succ += r.success ? 1 : 0;
      steps += r.steps;
      CHECK(!r.wall_hit);
    }
    INFO(task_name(t), " expert successes ", succ);
    CHECK(succ >= 99);
    CHECK(double(steps) / 100.0 < double(env.spec().max_steps));
  }
}

TEST_CASE("expert rollouts are reproducible") {
  for (Task t : all_tasks()) {
    Env env(t);
    Rollout r1 = run_expert(env, 77), r2 = run_expert(env, 77);
    CHECK(r1.actions == r2.actions);
    CHECK(r1.steps == r2.steps);
  }
}

TEST_CASE("observations stay inside the workspace") {
  for (Task t : all_tasks()) {
    Env env(t);
    const TaskSpec& spec = env.spec();
    EnvState s = env.reset(31);
    std::vector<float> a(size_t(spec.action_dim));
    for (int step = 0; step < 20 && !s.done; ++step) {
      Observation obs = env.observe(s);
      for (size_t i = 0; i < obs.points.size(); i += 3) {
        CHECK(obs.points[i + 0] >= spec.lo[0] - 0.06f);
        CHECK(obs.points[i + 0] <= spec.hi[0] + 0.06f);
        CHECK(obs.points[i + 1] >= spec.lo[1] - 0.06f);
        CHECK(obs.points[i + 1] <= spec.hi[1] + 0.06f);
        CHECK(obs.points[i + 2] >= spec.lo[2] - 0.01f);
        CHECK(obs.points[i + 2] <= spec.hi[2] + 0.06f);
      }
      env.expert_action(s, a);
      env.step(s, a);
    }
  }
}

TEST_CASE("actions are clipped and state stays bounded") {
  Env env(Task::reach);
  EnvState s = env.reset(1);
  float x0 = s.grip_pos[0];
  std::vector<float> big = {10.0f, 0.0f, 0.0f};
  env.step(s, big);
  CHECK(s.grip_pos[0] == doctest::Approx(std::min(1.0f, x0 + env.spec().step_xy)));

  for (int i = 0; i < 50 && !s.done; ++i) env.step(s, big);
  CHECK(s.grip_pos[0] <= 1.0f);
}

TEST_CASE("stepping a finished episode is an error") {
  Env env(Task::reach);
  EnvState s = env.reset(3);
  std::vector<float> a(3, 0.0f);
  while (!s.done) {
    env.expert_action(s, a);
    env.step(s, a);
  }
  CHECK_THROWS_AS(env.step(s, a), std::runtime_error);
  CHECK_THROWS_AS(env.step(s, std::vector<float>{1.0f}), std::runtime_error);
}

TEST_CASE("wrong action width is rejected") {
  Env env(Task::push_box);
  EnvState s = env.reset(5);
  CHECK_THROWS_AS(env.step(s, std::vector<float>{1.0f, 0.0f}), std::invalid_argument);
  std::vector<float> a(2);
  CHECK_THROWS_AS(env.expert_action(s, a), std::invalid_argument);
}

TEST_CASE("dense reward tracks goal distance on reach") {
  Env env(Task::reach);
  EnvState s = env.reset(9);
  std::vector<float> a(3);
  float prev = -1e9f;
  bool first = true;
  while (!s.done) {
    env.expert_action(s, a);
    env.step(s, a);
    CHECK(s.dense_reward >= env.spec().reward_floor);
    if (!first) CHECK(s.dense_reward >= prev - 1e-5f);
    prev = s.dense_reward;
    first = false;
  }
  CHECK(s.success);
  CHECK(s.dense_reward > 0.5f);  // success bonus dominates
}

TEST_CASE("wall blocks low carries and ends the episode") {
  Env env(Task::pick_place_wall);
  EnvState s = env.reset(21);

  SUBCASE("crossing low hits") {
    s.grip_pos[0] = 0.44f;
    s.grip_pos[1] = 0.5f;
    s.grip_pos[2] = 0.10f;
    std::vector<float> a = {1.0f, 0.0f, 0.0f, -1.0f};
    for (int i = 0; i < 4 && !s.done; ++i) env.step(s, a);
    CHECK(s.wall_hit);
    CHECK(s.done);
    CHECK(!s.success);
  }
  SUBCASE("crossing high clears") {
    s.grip_pos[0] = 0.44f;
    s.grip_pos[1] = 0.5f;
    s.grip_pos[2] = 0.30f;
    std::vector<float> a = {1.0f, 0.0f, 0.0f, -1.0f};
    for (int i = 0; i < 4 && !s.done; ++i) env.step(s, a);
    CHECK(!s.wall_hit);
    CHECK(s.grip_pos[0] > 0.5f);
  }
}

TEST_CASE("grasp requires proximity and closing") {
  Env env(Task::pick_place_wall);
  EnvState s = env.reset(33);
  // teleport the gripper to the grasp point
  s.grip_pos[0] = s.object_pos[0];
  s.grip_pos[1] = s.object_pos[1];
  s.grip_pos[2] = s.object_pos[2] + 0.03f;

  SUBCASE("closing nearby attaches and carrying moves the object") {
    std::vector<float> close = {0.0f, 0.0f, 0.0f, 1.0f};
    env.step(s, close);
    CHECK(s.attached);
    std::vector<float> lift = {0.0f, 0.0f, 1.0f, 1.0f};
    float z0 = s.object_pos[2];
    env.step(s, lift);
    CHECK(s.object_pos[2] > z0);
    std::vector<float> open = {0.0f, 0.0f, 0.0f, -1.0f};
    env.step(s, open);
    CHECK(!s.attached);
    CHECK(s.object_pos[2] == doctest::Approx(0.025f));
  }
  SUBCASE("closing far away does nothing") {
    s.grip_pos[0] = s.object_pos[0] + 0.2f;
    std::vector<float> close = {0.0f, 0.0f, 0.0f, 1.0f};
    env.step(s, close);
    CHECK(!s.attached);
  }
}

TEST_CASE("cloned states evolve independently") {
  Env env(Task::push_box);
  EnvState s = env.reset(13);
  EnvState c = clone_state(s);
  std::vector<float> a = {1.0f, 1.0f, 0.0f};
  env.step(s, a);
  CHECK(c.t == 0);
  CHECK(s.t == 1);
  CHECK(c.grip_pos[0] != s.grip_pos[0]);
  Observation oc = env.observe(c);
  CHECK(oc.points.size() == size_t(env.spec().num_points) * 3);
}
