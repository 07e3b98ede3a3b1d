#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "dalir/config.hpp"
#include "dalir/imagination.hpp"
#include "dalir/policy.hpp"
#include "dalir/rerank.hpp"
#include "dalir/trajectory.hpp"

namespace dalir {

// 95% Wilson score interval for a binomial proportion
void wilson_interval(int successes, int n, double& lo, double& hi);

struct CellResult {
  Task task = Task::reach;
  RerankMethod method = RerankMethod::none;
  int n_cand = 1;
  int seed_idx = 0;
  int episodes = 0;
  int successes = 0;
  double success_rate = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  double mean_steps = 0.0;
  double mean_decision_ms = 0.0;  // wall clock; kept out of hashed outputs
  uint64_t policy_hash = 0;
  uint64_t imag_hash = 0;
  uint64_t config_hash = 0;
};

// One (task, method, seed) evaluation cell. Episode seeds derive from
// (run_seed, task, seed_idx) only, so different methods see paired episodes.
CellResult eval_cell(const Env& env, const Policy& policy, const Imagination* imag,
                     const RerankConfig& rc, int episodes, uint64_t run_seed, int seed_idx);

// mean and across-seed standard deviation of success rates
void mean_sd(const std::vector<double>& xs, double& mean, double& sd);

// Datasets and trained models for one task. Generated artifacts are cached
// on disk keyed by a recipe hash; reruns with the same config reuse them.
struct FrozenSet;

struct TaskArtifacts {
  Task task = Task::reach;
  std::string dir;
  Dataset expert;
  Dataset mixed;
  Dataset holdout;
  std::shared_ptr<Policy> policy;
  std::shared_ptr<Imagination> imag;
  std::string policy_path;
  std::string imag_path;
  uint64_t policy_file_hash = 0;
  uint64_t imag_file_hash = 0;
  // lazily encoded chunk latents, shared across ablations
  mutable std::shared_ptr<FrozenSet> frozen_mixed_cache;
  mutable std::shared_ptr<FrozenSet> frozen_holdout_cache;
  mutable float frozen_gamma = -1.0f;
};

TaskArtifacts prepare_task_artifacts(const RunConfig& cfg, Task task, std::ostream* log,
                                     bool with_imagination = true);

// dataset generation only (no training); used by gen-data
void prepare_task_datasets(const RunConfig& cfg, Task task, std::ostream* log,
                           Dataset* expert = nullptr, Dataset* mixed = nullptr,
                           Dataset* holdout = nullptr);

struct LatencyRow {
  std::string backbone;
  std::string method;
  int n_cand = 1;
  double mean_ms = 0.0;
  double p50_ms = 0.0;
  double p95_ms = 0.0;
  double fps = 0.0;
};

// Warmed-up per-decision wall clock on recorded observation pairs:
// base (single clean sample) plus the latent reranker over an N_cand sweep,
// for both sampler backbones.
std::vector<LatencyRow> bench_latency(const RunConfig& cfg, const TaskArtifacts& art,
                                      std::ostream* log);

// Chunk-level training rows with precomputed (frozen) latents.
struct FrozenSet {
  int count = 0;
  int latent_dim = 0;
  int chunk_dim = 0;
  std::vector<float> s;         // count * latent_dim
  std::vector<float> s_future;  // count * latent_dim
  std::vector<float> chunk;     // count * chunk_dim
  std::vector<float> y;         // discounted terminal target
  std::vector<float> g;         // discounted dense return from t
  std::vector<int> traj;        // source trajectory index
};

FrozenSet encode_frozen(const Imagination& imag, const Dataset& ds, int max_trajs,
                        float gamma, int stride = 1);
// rows whose traj index lies in [lo, hi)
FrozenSet frozen_slice_by_traj(const FrozenSet& fs, int lo, int hi);

// memoized full-mixed / holdout latents for one artifact set
const FrozenSet& frozen_mixed(const TaskArtifacts& art, float gamma);
const FrozenSet& frozen_holdout(const TaskArtifacts& art, float gamma);

double frozen_wm_mse(const Imagination& imag, const FrozenSet& fs);
void train_wm_frozen(Imagination& imag, const FrozenSet& train, int steps, int batch,
                     float lr, float weight_decay, uint64_t seed);
// dense=false: BCE on discounted terminal targets; dense=true: MSE of the
// sigmoid against min-max-normalized discounted returns
void train_scorer_frozen(Imagination& imag, const FrozenSet& train, bool dense, int steps,
                         int batch, float lr, uint64_t seed);

// copies parameter values whose name starts with `prefix` (shapes must match)
void copy_params_prefix(ParamMap& dst, const ParamMap& src, const std::string& prefix);

struct DataScaleRow {
  int n_trajs = 0;
  int seed_idx = 0;
  double holdout_mse = 0.0;
};

struct DataScaleResult {
  std::vector<DataScaleRow> rows;
  std::vector<int> sizes;
  std::vector<double> mean_mse;  // per size
  std::vector<double> sd_mse;
  bool trend_ok = false;  // strictly decreasing, gaps > 3x across-seed sd
  uint64_t holdout_hash = 0;
};

DataScaleResult ablate_mixed_data(const RunConfig& cfg, const TaskArtifacts& art,
                                  std::ostream* log);

struct ActionCondRow {
  Task task = Task::reach;
  bool ablated = false;
  double holdout_mse = 0.0;
};

struct ActionCondResult {
  std::vector<ActionCondRow> rows;
  bool trend_ok = false;  // conditioned < ablated on every task, ratio <= 0.8
  double worst_ratio = 0.0;
};

ActionCondResult ablate_action_conditioning(const RunConfig& cfg,
                                            const std::vector<const TaskArtifacts*>& arts,
                                            std::ostream* log);

struct SupervisionRow {
  std::string mode;  // none | sparse | dense
  CellResult cell;
};

struct SupervisionResult {
  std::vector<SupervisionRow> rows;
  double mean_none = 0.0, mean_sparse = 0.0, mean_dense = 0.0;
  bool sparse_ok = false;  // sparse >= none + 2 points
  bool dense_ok = false;   // dense >= sparse - 2 points (soft)
};

SupervisionResult ablate_supervision(const RunConfig& cfg,
                                     const std::vector<const TaskArtifacts*>& arts,
                                     std::ostream* log);

struct VariationResult {
  std::vector<CellResult> cells;
  // per-method success means over tasks and seeds, aligned with `methods`
  std::vector<RerankMethod> methods;
  std::vector<double> means;
  bool ordering_ok = false;  // latent >= obs_noise >= none on average
};

VariationResult ablate_variation_target(const RunConfig& cfg,
                                        const std::vector<const TaskArtifacts*>& arts,
                                        std::ostream* log);

struct CandScaleResult {
  std::vector<CellResult> cells;  // latent reranker over the N_cand sweep
  std::vector<int> sweep;
  bool n4_ge_n1 = false;
};

CandScaleResult ablate_candidate_scaling(const RunConfig& cfg, const TaskArtifacts& art,
                                         std::ostream* log);

struct ScorerDiag {
  double auc = 0.0;               // terminal latents, success vs fail
  double mean_pearson = 0.0;      // score sequence vs MC targets, successful trajs
  int n_success = 0;
  int n_fail = 0;
  double mean_fail_score = 0.0;   // mean predicted score on failed trajs
};

ScorerDiag scorer_diagnostics(const Imagination& imag, const Dataset& holdout, float gamma);

// per-trajectory score sequence for plotting: sigmoid(C(s_t)) for t = 0..T
std::vector<float> score_sequence(const Imagination& imag, const Trajectory& tr);

}  // namespace dalir
