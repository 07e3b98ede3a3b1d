#include "dalir/env.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <cstring>
#include <stdexcept>

namespace dalir {

namespace {

constexpr float kBoxHalf = 0.055f;
constexpr float kGripRadius = 0.035f;
constexpr float kPushExt = kBoxHalf + kGripRadius;
constexpr float kCubeHalf = 0.025f;
constexpr float kGraspOffset = 0.03f;   // object center hangs this far below gripper
constexpr float kGraspRadius = 0.035f;
constexpr float kWallHalfThick = 0.01f;
constexpr float kGripMarkerR = 0.025f;
constexpr float kGripMarkerZ = 0.06f;   // marker height for planar tasks

float clampf(float v, float lo, float hi) { return std::min(std::max(v, lo), hi); }

float dist2d(const float* a, const float* b) {
  float dx = a[0] - b[0], dy = a[1] - b[1];
  return std::sqrt(dx * dx + dy * dy);
}

float dist3d(const float* a, const float* b) {
  float dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

}  // namespace

std::string task_name(Task t) {
  switch (t) {
    case Task::reach: return "reach";
    case Task::push_box: return "push_box";
    case Task::pick_place_wall: return "pick_place_wall";
  }
  throw std::invalid_argument("unknown task enum");
}

Task task_from_name(const std::string& name) {
  if (name == "reach") return Task::reach;
  if (name == "push_box") return Task::push_box;
  if (name == "pick_place_wall") return Task::pick_place_wall;
  throw std::invalid_argument("unknown task: " + name);
}

const std::vector<Task>& all_tasks() {
  static const std::vector<Task> ts = {Task::reach, Task::push_box, Task::pick_place_wall};
  return ts;
}

const TaskSpec& task_spec(Task t) {
  static const TaskSpec reach{
      Task::reach, 3, 3, 128, 60, 0.05f, 0.0f, 0.08f, 2,
      {0, 0, 0}, {1, 1, 0.4f}, -1.5f};
  static const TaskSpec push{
      Task::push_box, 3, 3, 128, 80, 0.05f, 0.0f, 0.08f, 2,
      {0, 0, 0}, {1, 1, 0.4f}, -1.5f};
  static const TaskSpec pick{
      Task::pick_place_wall, 4, 4, 128, 100, 0.05f, 0.02f, 0.08f, 3,
      {0, 0, 0}, {1, 1, 0.4f}, -1.5f};
  switch (t) {
    case Task::reach: return reach;
    case Task::push_box: return push;
    case Task::pick_place_wall: return pick;
  }
  throw std::invalid_argument("unknown task enum");
}

Env::Env(Task task) : spec_(task_spec(task)) {}

EnvState Env::reset(uint64_t seed) const {
  Rng rng = Rng::substream(seed, "reset");
  EnvState s;
  s.task = spec_.task;
  s.seed = seed;
  switch (spec_.task) {
    case Task::reach: {
      s.goal[0] = float(rng.uniform(0.15, 0.85));
      s.goal[1] = float(rng.uniform(0.15, 0.85));
      s.goal[2] = 0.0f;
      do {
        s.grip_pos[0] = float(rng.uniform(0.15, 0.85));
        s.grip_pos[1] = float(rng.uniform(0.15, 0.85));
      } while (dist2d(s.grip_pos, s.goal) < 0.3f);
      s.grip_pos[2] = kGripMarkerZ;
      break;
    }
    case Task::push_box: {
      s.object_pos[0] = float(rng.uniform(0.35, 0.65));
      s.object_pos[1] = float(rng.uniform(0.35, 0.65));
      s.object_pos[2] = 0.04f;
      for (;;) {
        double th = rng.uniform(0.0, 2.0 * M_PI);
        double d = rng.uniform(0.25, 0.4);
        s.goal[0] = s.object_pos[0] + float(d * std::cos(th));
        s.goal[1] = s.object_pos[1] + float(d * std::sin(th));
        if (s.goal[0] > 0.12f && s.goal[0] < 0.88f && s.goal[1] > 0.12f && s.goal[1] < 0.88f) {
          break;
        }
      }
      s.goal[2] = 0.0f;
      float dirx = s.goal[0] - s.object_pos[0], diry = s.goal[1] - s.object_pos[1];
      float dn = std::sqrt(dirx * dirx + diry * diry);
      dirx /= dn;
      diry /= dn;
      for (;;) {
        float back = float(rng.uniform(0.16, 0.28));
        float side = float(rng.uniform(-0.12, 0.12));
        s.grip_pos[0] = s.object_pos[0] - dirx * back - diry * side;
        s.grip_pos[1] = s.object_pos[1] - diry * back + dirx * side;
        if (s.grip_pos[0] > 0.05f && s.grip_pos[0] < 0.95f && s.grip_pos[1] > 0.05f &&
            s.grip_pos[1] < 0.95f &&
            dist2d(s.grip_pos, s.object_pos) > kPushExt + 0.02f) {
          break;
        }
      }
      s.grip_pos[2] = kGripMarkerZ;
      break;
    }
    case Task::pick_place_wall: {
      s.object_pos[0] = float(rng.uniform(0.18, 0.35));
      s.object_pos[1] = float(rng.uniform(0.25, 0.75));
      s.object_pos[2] = kCubeHalf;
      s.goal[0] = float(rng.uniform(0.65, 0.82));
      s.goal[1] = float(rng.uniform(0.25, 0.75));
      s.goal[2] = kCubeHalf;
      s.wall_x = 0.5f;
      s.wall_y0 = 0.1f;
      s.wall_y1 = 0.9f;
      s.wall_h = 0.15f;
      s.grip_pos[0] = float(rng.uniform(0.12, 0.3));
      s.grip_pos[1] = float(rng.uniform(0.25, 0.75));
      s.grip_pos[2] = 0.15f;
      break;
    }
  }
  return s;
}

namespace {

// point-vs-wall penetration with an inflation margin
bool hits_wall(const EnvState& s, const float* p, float margin) {
  if (s.wall_h <= 0.0f) return false;
  return std::abs(p[0] - s.wall_x) <= kWallHalfThick + margin &&
         p[1] >= s.wall_y0 - margin && p[1] <= s.wall_y1 + margin &&
         p[2] <= s.wall_h + margin;
}

}  // namespace

void Env::step(EnvState& s, std::span<const float> action) const {
  if (s.done) throw std::runtime_error("step on finished episode");
  if (int(action.size()) != spec_.action_dim) {
    throw std::invalid_argument("action dim " + std::to_string(action.size()) + ", expected " +
                                std::to_string(spec_.action_dim));
  }
  float a[4] = {0, 0, 0, 0};
  for (int i = 0; i < spec_.action_dim; ++i) a[i] = clampf(action[i], -1.0f, 1.0f);

  switch (spec_.task) {
    case Task::reach: {
      s.grip_pos[0] = clampf(s.grip_pos[0] + a[0] * spec_.step_xy, 0.0f, 1.0f);
      s.grip_pos[1] = clampf(s.grip_pos[1] + a[1] * spec_.step_xy, 0.0f, 1.0f);
      float d = dist2d(s.grip_pos, s.goal);
      s.success = d <= spec_.goal_radius;
      s.dense_reward = -d + (s.success ? 1.0f : 0.0f);
      break;
    }
    case Task::push_box: {
      s.grip_pos[0] = clampf(s.grip_pos[0] + a[0] * spec_.step_xy, 0.0f, 1.0f);
      s.grip_pos[1] = clampf(s.grip_pos[1] + a[1] * spec_.step_xy, 0.0f, 1.0f);
      // kinematic push: resolve gripper/box overlap along the axis of least
      // penetration, box first, then gripper if the box is pinned
      for (int pass = 0; pass < 2; ++pass) {
        float dx = s.grip_pos[0] - s.object_pos[0];
        float dy = s.grip_pos[1] - s.object_pos[1];
        float px = kPushExt - std::abs(dx);
        float py = kPushExt - std::abs(dy);
        if (px <= 0.0f || py <= 0.0f) break;
        if (pass == 0) {
          if (px < py) {
            s.object_pos[0] -= (dx >= 0 ? px : -px);
          } else {
            s.object_pos[1] -= (dy >= 0 ? py : -py);
          }
          s.object_pos[0] = clampf(s.object_pos[0], kBoxHalf, 1.0f - kBoxHalf);
          s.object_pos[1] = clampf(s.object_pos[1], kBoxHalf, 1.0f - kBoxHalf);
        } else {
          if (px < py) {
            s.grip_pos[0] += (dx >= 0 ? px : -px);
          } else {
            s.grip_pos[1] += (dy >= 0 ? py : -py);
          }
          s.grip_pos[0] = clampf(s.grip_pos[0], 0.0f, 1.0f);
          s.grip_pos[1] = clampf(s.grip_pos[1], 0.0f, 1.0f);
        }
      }
      float d = dist2d(s.object_pos, s.goal);
      s.success = d <= spec_.goal_radius;
      s.dense_reward = -d + (s.success ? 1.0f : 0.0f);
      break;
    }
    case Task::pick_place_wall: {
      float prev[3] = {s.grip_pos[0], s.grip_pos[1], s.grip_pos[2]};
      s.grip_pos[0] = clampf(s.grip_pos[0] + a[0] * spec_.step_xy, 0.0f, 1.0f);
      s.grip_pos[1] = clampf(s.grip_pos[1] + a[1] * spec_.step_xy, 0.0f, 1.0f);
      s.grip_pos[2] = clampf(s.grip_pos[2] + a[2] * spec_.step_z, 0.035f, 0.38f);
      bool want_closed = a[3] > 0.0f;

      if (!s.attached && want_closed && !s.grip_closed) {
        float gp[3] = {s.object_pos[0], s.object_pos[1], s.object_pos[2] + kGraspOffset};
        if (dist3d(s.grip_pos, gp) <= kGraspRadius) s.attached = true;
      }
      if (s.attached && !want_closed) {
        s.attached = false;
        s.object_pos[2] = kCubeHalf;  // drops to the table
      }
      s.grip_closed = want_closed ? 1.0f : 0.0f;
      if (s.attached) {
        s.object_pos[0] = s.grip_pos[0];
        s.object_pos[1] = s.grip_pos[1];
        s.object_pos[2] = std::max(s.grip_pos[2] - kGraspOffset, kCubeHalf);
      }

      // swept collision: endpoint and midpoint of the gripper motion
      float mid[3] = {(prev[0] + s.grip_pos[0]) * 0.5f, (prev[1] + s.grip_pos[1]) * 0.5f,
                      (prev[2] + s.grip_pos[2]) * 0.5f};
      bool hit = hits_wall(s, s.grip_pos, 0.02f) || hits_wall(s, mid, 0.02f);
      if (s.attached) {
        float omid[3] = {mid[0], mid[1], std::max(mid[2] - kGraspOffset, kCubeHalf)};
        hit = hit || hits_wall(s, s.object_pos, kCubeHalf) || hits_wall(s, omid, kCubeHalf);
      }
      float d = dist3d(s.object_pos, s.goal);
      if (hit) {
        s.wall_hit = true;
        s.done = true;
        s.success = false;
        s.dense_reward = -d;
      } else {
        s.success = !s.attached && d <= spec_.goal_radius;
        s.dense_reward = -d + (s.success ? 1.0f : 0.0f);
      }
      break;
    }
  }

  s.t += 1;
  if (s.success || s.t >= spec_.max_steps) s.done = true;
}

namespace {

struct CloudWriter {
  std::vector<float>& pts;
  size_t at = 0;
  void put(float x, float y, float z) {
    pts[at++] = x;
    pts[at++] = y;
    pts[at++] = z;
  }
};

void sample_sphere(CloudWriter& w, Rng& rng, const float* c, float r, int n) {
  for (int i = 0; i < n; ++i) {
    double x, y, z, s;
    do {
      x = rng.normal();
      y = rng.normal();
      z = rng.normal();
      s = std::sqrt(x * x + y * y + z * z);
    } while (s < 1e-9);
    w.put(c[0] + float(r * x / s), c[1] + float(r * y / s),
          std::max(0.0f, c[2] + float(r * z / s)));
  }
}

void sample_disk(CloudWriter& w, Rng& rng, const float* c, float r, float z, int n) {
  for (int i = 0; i < n; ++i) {
    double rr = r * std::sqrt(rng.uniform());
    double th = rng.uniform(0.0, 2.0 * M_PI);
    w.put(c[0] + float(rr * std::cos(th)), c[1] + float(rr * std::sin(th)), z);
  }
}

// axis-aligned box surface: top plus four sides, area-weighted
void sample_box(CloudWriter& w, Rng& rng, const float* c, float hx, float hy, float hz, float z0,
                int n) {
  float a_top = 4 * hx * hy;
  float a_x = 2 * hy * (2 * hz);  // one face normal to x
  float a_y = 2 * hx * (2 * hz);
  float total = a_top + 2 * a_x + 2 * a_y;
  for (int i = 0; i < n; ++i) {
    double u = rng.uniform() * total;
    float x, y, z;
    if (u < a_top) {
      x = c[0] + float(rng.uniform(-hx, hx));
      y = c[1] + float(rng.uniform(-hy, hy));
      z = z0 + 2 * hz;
    } else if (u < a_top + a_x) {
      x = c[0] + hx;
      y = c[1] + float(rng.uniform(-hy, hy));
      z = z0 + float(rng.uniform(0.0, 2 * hz));
    } else if (u < a_top + 2 * a_x) {
      x = c[0] - hx;
      y = c[1] + float(rng.uniform(-hy, hy));
      z = z0 + float(rng.uniform(0.0, 2 * hz));
    } else if (u < a_top + 2 * a_x + a_y) {
      x = c[0] + float(rng.uniform(-hx, hx));
      y = c[1] + hy;
      z = z0 + float(rng.uniform(0.0, 2 * hz));
    } else {
      x = c[0] + float(rng.uniform(-hx, hx));
      y = c[1] - hy;
      z = z0 + float(rng.uniform(0.0, 2 * hz));
    }
    w.put(x, y, z);
  }
}

void sample_table(CloudWriter& w, Rng& rng, int n) {
  for (int i = 0; i < n; ++i) {
    w.put(float(rng.uniform()), float(rng.uniform()), 0.0f);
  }
}

}  // namespace

Observation Env::observe(const EnvState& s) const {
  Rng rng = Rng::substream(s.seed, "observe", uint64_t(s.t));
  Observation obs;
  obs.points.resize(size_t(spec_.num_points) * 3);
  CloudWriter w{obs.points};
  switch (spec_.task) {
    case Task::reach: {
      sample_sphere(w, rng, s.grip_pos, kGripMarkerR, 48);
      sample_disk(w, rng, s.goal, 0.04f, 0.005f, 48);
      sample_table(w, rng, 32);
      obs.state = {s.grip_pos[0], s.grip_pos[1], 0.0f};
      break;
    }
    case Task::push_box: {
      float bc[3] = {s.object_pos[0], s.object_pos[1], 0.0f};
      sample_box(w, rng, bc, kBoxHalf, kBoxHalf, 0.04f, 0.0f, 48);
      sample_disk(w, rng, s.goal, 0.04f, 0.005f, 32);
      sample_sphere(w, rng, s.grip_pos, kGripMarkerR, 32);
      sample_table(w, rng, 16);
      obs.state = {s.grip_pos[0], s.grip_pos[1], 0.0f};
      break;
    }
    case Task::pick_place_wall: {
      float oc[3] = {s.object_pos[0], s.object_pos[1], 0.0f};
      float z0 = s.object_pos[2] - kCubeHalf;
      sample_box(w, rng, oc, kCubeHalf, kCubeHalf, kCubeHalf, z0, 36);
      float wc[3] = {s.wall_x, (s.wall_y0 + s.wall_y1) * 0.5f, 0.0f};
      sample_box(w, rng, wc, kWallHalfThick, (s.wall_y1 - s.wall_y0) * 0.5f, s.wall_h * 0.5f,
                 0.0f, 36);
      sample_disk(w, rng, s.goal, 0.04f, 0.005f, 20);
      sample_sphere(w, rng, s.grip_pos, 0.02f, 24);
      sample_table(w, rng, 12);
      obs.state = {s.grip_pos[0], s.grip_pos[1], s.grip_pos[2], s.grip_closed};
      break;
    }
  }
  if (w.at != obs.points.size()) throw std::logic_error("point budget mismatch");
  return obs;
}

namespace {

void move_toward(const TaskSpec& spec, const float* from, const float* to, float* a, bool z_axis) {
  a[0] = clampf((to[0] - from[0]) / spec.step_xy, -1.0f, 1.0f);
  a[1] = clampf((to[1] - from[1]) / spec.step_xy, -1.0f, 1.0f);
  if (z_axis) a[2] = clampf((to[2] - from[2]) / spec.step_z, -1.0f, 1.0f);
}

}  // namespace

void Env::expert_action(const EnvState& s, std::span<float> action) const {
  if (int(action.size()) != spec_.action_dim) {
    throw std::invalid_argument("expert_action: bad action span");
  }
  std::fill(action.begin(), action.end(), 0.0f);
  switch (spec_.task) {
    case Task::reach: {
      move_toward(spec_, s.grip_pos, s.goal, action.data(), false);
      break;
    }
    case Task::push_box: {
      float dirx = s.goal[0] - s.object_pos[0];
      float diry = s.goal[1] - s.object_pos[1];
      float dn = std::sqrt(dirx * dirx + diry * diry);
      if (dn < 1e-6f) break;
      dirx /= dn;
      diry /= dn;
      float relx = s.grip_pos[0] - s.object_pos[0];
      float rely = s.grip_pos[1] - s.object_pos[1];
      // contact point sits opposite the goal direction; steer by angular error
      float theta = std::atan2(rely, relx);
      float want = std::atan2(-diry, -dirx);
      float dtheta = want - theta;
      constexpr float kPi = std::numbers::pi_v<float>;
      if (dtheta > kPi) dtheta -= 2 * kPi;
      if (dtheta < -kPi) dtheta += 2 * kPi;
      float target[2];
      if (std::abs(dtheta) < 0.5f) {
        // press slightly into the box so the contact resolve advances it
        target[0] = s.object_pos[0] - dirx * (kPushExt - 0.02f);
        target[1] = s.object_pos[1] - diry * (kPushExt - 0.02f);
      } else {
        // orbit at a clearance radius, rotating toward the contact point
        float turn = clampf(dtheta, -0.6f, 0.6f);
        float r = kPushExt + 0.05f;
        target[0] = s.object_pos[0] + r * std::cos(theta + turn);
        target[1] = s.object_pos[1] + r * std::sin(theta + turn);
      }
      float t3[3] = {target[0], target[1], 0.0f};
      move_toward(spec_, s.grip_pos, t3, action.data(), false);
      break;
    }
    case Task::pick_place_wall: {
      constexpr float kHoverZ = 0.12f;
      constexpr float kCarryZ = 0.26f;
      constexpr float kPlaceZ = 0.09f;
      float a[4] = {0, 0, 0, -1.0f};
      if (!s.attached) {
        float gx = s.object_pos[0], gy = s.object_pos[1];
        float grasp_z = s.object_pos[2] + kGraspOffset;
        float dxy = std::sqrt((s.grip_pos[0] - gx) * (s.grip_pos[0] - gx) +
                              (s.grip_pos[1] - gy) * (s.grip_pos[1] - gy));
        if (dxy > 0.012f) {
          float t[3] = {gx, gy, kHoverZ};
          move_toward(spec_, s.grip_pos, t, a, true);
        } else if (s.grip_pos[2] > grasp_z + 0.008f) {
          float t[3] = {gx, gy, grasp_z};
          move_toward(spec_, s.grip_pos, t, a, true);
        } else {
          float t[3] = {gx, gy, grasp_z};
          move_toward(spec_, s.grip_pos, t, a, true);
          a[3] = 1.0f;  // close at the grasp point
        }
      } else {
        a[3] = 1.0f;
        float dxg = std::abs(s.grip_pos[0] - s.goal[0]);
        float dyg = std::abs(s.grip_pos[1] - s.goal[1]);
        bool over_goal = dxg < 0.012f && dyg < 0.012f;
        if (!over_goal) {
          if (s.grip_pos[2] < kCarryZ - 0.008f) {
            float t[3] = {s.grip_pos[0], s.grip_pos[1], kCarryZ};
            move_toward(spec_, s.grip_pos, t, a, true);
          } else {
            float t[3] = {s.goal[0], s.goal[1], kCarryZ};
            move_toward(spec_, s.grip_pos, t, a, true);
          }
        } else if (s.grip_pos[2] > kPlaceZ + 0.008f) {
          float t[3] = {s.goal[0], s.goal[1], kPlaceZ};
          move_toward(spec_, s.grip_pos, t, a, true);
        } else {
          a[3] = -1.0f;  // release over the goal
        }
      }
      std::copy(a, a + 4, action.begin());
      break;
    }
  }
}

}  // namespace dalir
