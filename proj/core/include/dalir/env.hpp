#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dalir/rng.hpp"

namespace dalir {

enum class Task { reach, push_box, pick_place_wall };

std::string task_name(Task t);
Task task_from_name(const std::string& name);
const std::vector<Task>& all_tasks();

struct TaskSpec {
  Task task;
  int action_dim;
  int state_dim;
  int num_points;
  int max_steps;
  float step_xy;       // translation per unit action, xy
  float step_z;        // translation per unit action, z (pick only)
  float goal_radius;
  int grip_index;      // action channel held fixed by action-space rerankers
  float lo[3];
  float hi[3];
  float reward_floor;  // dense reward lower bound (-workspace diameter)
};

const TaskSpec& task_spec(Task t);

struct Observation {
  std::vector<float> points;  // num_points * 3, row-major xyz
  std::vector<float> state;   // state_dim
};

// Full episode state; copyable, so simulating a clone never touches the
// original. Observation sampling derives its stream from (seed, t).
struct EnvState {
  Task task;
  uint64_t seed = 0;
  int t = 0;
  bool done = false;
  bool success = false;
  bool wall_hit = false;
  float dense_reward = 0.0f;
  float grip_pos[3] = {0, 0, 0};
  float grip_closed = 0.0f;
  float object_pos[3] = {0, 0, 0};
  bool attached = false;
  float goal[3] = {0, 0, 0};
  float wall_x = 0, wall_y0 = 0, wall_y1 = 0, wall_h = 0;
};

class Env {
 public:
  explicit Env(Task task);
  const TaskSpec& spec() const { return spec_; }

  EnvState reset(uint64_t seed) const;
  // clips action to [-1,1], integrates one step, updates reward/done/success
  void step(EnvState& s, std::span<const float> action) const;
  Observation observe(const EnvState& s) const;
  // scripted proportional controller; writes action_dim values
  void expert_action(const EnvState& s, std::span<float> action) const;

 private:
  TaskSpec spec_;
};

inline EnvState clone_state(const EnvState& s) { return s; }

}  // namespace dalir
