#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dalir/imagination.hpp"
#include "dalir/policy.hpp"
#include "dalir/rerank.hpp"

namespace dalir {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  int n_expert = 10;
  int n_mixed = 1000;
  int n_holdout = 150;
  float drift_rho = 0.9f;
  float drift_sigma = -1.0f;  // negative selects the per-task default
};

struct BenchConfig {
  int episodes = 100;
  int n_seeds = 3;
  int warmup_decisions = 10;
  int measure_decisions = 120;
};

// calibrated so mixed collection lands mid-range success per task
float default_drift_sigma(Task task);

struct RunConfig {
  uint64_t seed = 0;
  std::string out_dir = "artifacts";
  std::string task = "push_box";
  DataConfig data;
  PolicyConfig policy;
  ImaginationConfig imagination;
  RerankConfig rerank;
  BenchConfig bench;

  // strict parse: unknown keys or wrong types raise ConfigError
  static RunConfig from_json_text(const std::string& text);
  static RunConfig from_file(const std::string& path);
  std::string to_json_text() const;
  uint64_t config_hash() const;

  Task task_enum() const { return task_from_name(task); }
  float drift_sigma() const {
    return data.drift_sigma < 0 ? default_drift_sigma(task_enum()) : data.drift_sigma;
  }
  // widens models and budgets to the reference training scale
  void apply_paper_scale();
};

}  // namespace dalir
