#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dalir/env.hpp"
#include "dalir/tensor.hpp"
#include "dalir/trajectory.hpp"

namespace dalir {

struct EncoderConfig {
  int point_hidden = 224;  // per-point MLP width
  int cloud_feat = 64;
  int state_feat = 32;
  int obs_feat = 96;       // stacked-observation latent width
};

struct PolicyConfig {
  std::string backbone = "fm";  // "fm" or "dp"
  EncoderConfig enc;
  int head_hidden = 128;
  int chunk = 8;
  int n_obs = 2;
  int nfe = 4;              // flow matching Euler steps
  int diffusion_steps = 50;
  int ddim_steps = 10;
  int train_steps = 900;
  int batch = 32;
  float lr = 3e-4f;
  float weight_decay = 1e-6f;
};

// conditional optimal-transport flow construction
inline float ot_interpolate(float x0, float x1, float tau) {
  return (1.0f - tau) * x0 + tau * x1;
}
inline float ot_velocity_target(float x0, float x1) { return x1 - x0; }

// cosine noise schedule; returns alpha_bar[0..n] with alpha_bar[0] == 1
std::vector<double> ddpm_alpha_bars(int n);

// 16-dim sinusoidal embedding of a scalar in [0,1]
void time_embedding(float tau, std::span<float> out);
inline constexpr int kTimeEmbDim = 16;

// Generative action-chunk policy over stacked point-cloud observations.
// Chunks are sampled either with a flow-matching head (Euler integration) or
// a DDPM head with deterministic DDIM sampling; outputs clip to [-1,1].
// Trainable only on expert trajectories.
class Policy {
 public:
  Policy(Task task, PolicyConfig cfg, uint64_t seed);

  Task task() const { return task_; }
  const PolicyConfig& config() const { return cfg_; }
  ParamMap& params() { return params_; }
  const ParamMap& params() const { return params_; }
  int action_dim() const { return spec_.action_dim; }
  int chunk_width() const { return cfg_.chunk * spec_.action_dim; }

  // per-point features of [B*P, 3] clouds (pointwise MLP, pre-pool): [B*P, h]
  Tensor point_features(const Tensor& clouds) const;
  // single-frame feature [state_feat | cloud_feat]: [B, frame_dim]
  Tensor frame_features(const Tensor& clouds, const Tensor& states) const;
  // same, from already pooled point features (candidate fast path)
  Tensor frame_from_pooled(const Tensor& pooled, const Tensor& states) const;
  // two stacked frame features -> observation latent [B, obs_feat]
  Tensor obs_latent(const Tensor& prev_frame, const Tensor& cur_frame) const;
  int frame_dim() const { return cfg_.enc.state_feat + cfg_.enc.cloud_feat; }

  // samples one action chunk per latent row: [N, obs_feat] -> [N, chunk*A]
  Tensor sample_chunks(const Tensor& z, Rng& rng) const;

  // one optimizer step on a chunk batch; returns the loss
  float train_step(const ChunkBatch& batch, Rng& rng);

  // full training loop; throws unless every trajectory is expert quality
  void train(const Dataset& expert_data, uint64_t seed,
             const std::function<void(int, float)>& progress = {});

  void save(const std::string& path) const;
  void load(const std::string& path);

 private:
  Tensor head_forward(const Tensor& x, const Tensor& temb, const Tensor& z) const;
  Tensor encode_batch_latent(const ChunkBatch& b) const;

  Task task_;
  TaskSpec spec_;
  PolicyConfig cfg_;
  ParamMap params_;
  std::unique_ptr<AdamW> opt_;
  std::vector<double> alpha_bars_;
};

}  // namespace dalir
