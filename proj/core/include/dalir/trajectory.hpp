#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dalir/env.hpp"
#include "dalir/tensor.hpp"

namespace dalir {

enum class Quality : uint8_t { expert = 0, imperfect_success = 1, failed = 2 };

std::string quality_name(Quality q);

struct Trajectory {
  int T = 0;                   // steps taken; frames are t = 0..T
  int action_dim = 0;
  int num_points = 0;
  int state_dim = 0;
  std::vector<float> states;   // (T+1) * state_dim
  std::vector<float> clouds;   // (T+1) * num_points * 3
  std::vector<float> actions;  // T * action_dim
  std::vector<float> rewards;  // T
  uint8_t y_terminal = 0;
  Quality quality = Quality::failed;

  std::span<const float> state_at(int t) const;
  std::span<const float> cloud_at(int t) const;
  std::span<const float> action_at(int t) const;
};

struct Dataset {
  Task task = Task::reach;
  std::vector<Trajectory> trajs;
  uint64_t seed = 0;
  uint64_t config_hash = 0;
  std::string split;

  size_t count(Quality q) const;
  size_t total_frames() const;
  uint64_t content_hash() const;  // FNV-1a over the serialized byte stream
  void append(const Dataset& other);
};

struct DriftNoise {
  float rho = 0.9f;
  float sigma = 0.0f;
};

// Scripted expert rollouts; a demo that fails is retried with a fresh episode
// seed, up to 10 attempts each, then this throws.
Dataset collect_expert(Task task, int n, uint64_t seed);

// Expert corrupted by AR(1) drift noise a' = clip(a + d), d <- rho*d + eps.
// Quality is assigned from the simulator outcome.
Dataset collect_mixed(Task task, int n, uint64_t seed, DriftNoise noise);

// Trajectory file, little-endian:
//   magic "DALR-TRAJ" | version u32 | task name (u16 len + bytes) | count u32
//   per trajectory: T,A,P,state_dim u32 | y u8 | quality u8 |
//                   f32 blocks: states, clouds, actions, rewards
inline constexpr char kTrajMagic[9] = {'D', 'A', 'L', 'R', '-', 'T', 'R', 'A', 'J'};
inline constexpr uint32_t kTrajVersion = 1;

// writes <path> and a <path>.meta.json sidecar
void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

// Monte Carlo return targets y_t = gamma^(T-t) * y_T for t = 0..T
std::vector<float> mc_targets(const Trajectory& tr, float gamma);

struct ChunkRef {
  int traj = 0;
  int t = 0;
};

struct ChunkingConfig {
  int n_obs = 2;
  int chunk = 8;
};

// every chunk start t = 0..T-1 (optionally strided) in every trajectory
std::vector<ChunkRef> all_chunk_starts(const Dataset& ds, int stride = 1);

// Tensors gathered for a minibatch of chunk starts. Chunks that run past the
// end of an episode repeat the final action and are flagged padded; their
// future frame is the terminal frame.
struct ChunkBatch {
  Tensor cloud_prev;    // [B*P, 3]
  Tensor cloud_cur;     // [B*P, 3]
  Tensor state_prev;    // [B, state_dim]
  Tensor state_cur;     // [B, state_dim]
  Tensor chunk;         // [B, k*A]
  Tensor cloud_future;  // [B*P, 3]
  Tensor state_future;  // [B, state_dim]
  Tensor y;             // [B, 1]
  std::vector<uint8_t> padded;
};

ChunkBatch gather_chunk_batch(const Dataset& ds, std::span<const ChunkRef> refs,
                              const ChunkingConfig& cfg, float gamma);

}  // namespace dalir
