#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dalir/env.hpp"
#include "dalir/imagination.hpp"
#include "dalir/policy.hpp"

namespace dalir {

enum class RerankMethod {
  none,            // base policy, single clean sample
  latent,          // point-dropout candidates scored in latent imagination
  obs_noise,       // Gaussian coordinate noise candidates, same scoring
  random_shooting, // base chunk + action noise, accept best if it improves
  cem,             // iterative elite refitting around the base chunk
  mppi,            // exponentially weighted average of scored samples
  grad_ascent,     // backtracking gradient ascent on the scorer
  oracle           // candidates simulated in a cloned environment
};

std::string rerank_method_name(RerankMethod m);
RerankMethod rerank_method_from_name(const std::string& name);

struct RerankConfig {
  RerankMethod method = RerankMethod::latent;
  int n_cand = 32;
  float p_drop = 0.3f;
  float min_keep_frac = 0.1f;
  float sigma_a = 0.1f;
  float sigma_o = 0.01f;
  int cem_iters = 3;
  int cem_elites = 6;
  float mppi_beta = 20.0f;
  float mppi_beta_max = 1e4f;
  int ga_steps = 10;
  float ga_step_size = 0.05f;
  float ga_mu = 1.0f;
};

struct DecisionInfo {
  std::vector<float> scores;  // per-candidate selection scores
  int chosen = 0;
  float base_score = 0.0f;  // candidate 0 / unmodified chunk
  float exec_score = 0.0f;  // executed chunk
  double latency_ms = 0.0;
};

struct ChunkChoice {
  std::vector<float> chunk;  // chunk*action_dim
  DecisionInfo info;
};

// Survivor index list for stochastic point dropout: each point kept with
// probability 1-p_drop, redrawn until at least ceil(min_keep_frac*P) survive,
// then padded back to exactly P by resampling survivors with replacement.
// First n_kept entries are the survivors in original order.
struct DropoutDraw {
  std::vector<int> indices;  // length P
  int n_kept = 0;
};
DropoutDraw dropout_indices(int num_points, float p_drop, float min_keep_frac, Rng& rng);

// One reranked decision. `env`/`state` are only used by the oracle method.
ChunkChoice select_chunk(const Policy& policy, const Imagination* imag,
                         const RerankConfig& cfg, const Observation& obs_prev,
                         const Observation& obs_cur, uint64_t decision_seed,
                         const Env* env = nullptr, const EnvState* state = nullptr);

struct EpisodeResult {
  bool success = false;
  int steps = 0;
  float final_reward = 0.0f;
  std::vector<DecisionInfo> decisions;
};

// Receding-horizon rollout: select a chunk, execute all of it (or until the
// episode ends), repeat.
EpisodeResult run_episode(const Env& env, const Policy& policy, const Imagination* imag,
                          const RerankConfig& cfg, uint64_t episode_seed);

}  // namespace dalir
