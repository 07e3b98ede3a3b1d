#pragma once

#include <functional>
#include <memory>
#include <string>

#include "dalir/policy.hpp"

namespace dalir {

struct ImaginationConfig {
  EncoderConfig enc;     // mirrors the policy encoder so weights can be copied
  int wm_hidden = 32;
  int wm_layers = 2;
  int wm_heads = 2;
  int chunk = 8;
  float gamma = 0.99f;
  float lambda_wm = 1.0f;
  int scorer_hidden = 128;
  bool action_ablated = false;  // zero action tokens (diagnostic variant)
  int train_steps = 600;
  int batch = 32;
  float lr = 3e-4f;
  float weight_decay = 1e-4f;
};

// Latent world model and success scorer over s = [state feat | cloud feat].
// The world model is a small transformer over one latent token plus one token
// per action step; it predicts a residual, with a zero-initialized readout so
// the prediction starts at identity. The scorer maps latents to success
// logits and trains against discounted Monte Carlo targets. Both train
// jointly on mixed-quality data with a stop-gradient on the target latent.
class Imagination {
 public:
  Imagination(Task task, ImaginationConfig cfg, uint64_t seed);

  Task task() const { return task_; }
  const ImaginationConfig& config() const { return cfg_; }
  ParamMap& params() { return params_; }
  int latent_dim() const { return cfg_.enc.state_feat + cfg_.enc.cloud_feat; }

  // copies the policy's encoder weights (byte-exact); shapes must match
  void init_from_policy(const Policy& policy);

  Tensor point_features(const Tensor& clouds) const;
  Tensor encode_from_pooled(const Tensor& pooled, const Tensor& states) const;
  Tensor encode(const Tensor& clouds, const Tensor& states) const;  // [B,96]

  Tensor predict_delta(const Tensor& s, const Tensor& chunk) const;
  Tensor predict_next(const Tensor& s, const Tensor& chunk) const;
  Tensor score_logit(const Tensor& s) const;  // [B,1]

  struct StepLosses {
    float total, wm, score;
  };
  StepLosses train_step(const ChunkBatch& batch);
  void train(const Dataset& mixed_data, uint64_t seed,
             const std::function<void(int, const StepLosses&)>& progress = {});

  std::vector<Tensor> encoder_params() const;
  std::vector<Tensor> wm_params() const;
  std::vector<Tensor> scorer_params() const;

  void save(const std::string& path) const;
  void load(const std::string& path);

 private:
  Task task_;
  TaskSpec spec_;
  ImaginationConfig cfg_;
  ParamMap params_;
  std::unique_ptr<AdamW> opt_;
};

}  // namespace dalir
