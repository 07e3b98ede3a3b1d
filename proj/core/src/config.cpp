#include "dalir/config.hpp"

#include <fstream>
#include <sstream>

#include "dalir/rng.hpp"
#include "json.hpp"

namespace dalir {

using nlohmann::json;

float default_drift_sigma(Task task) {
  switch (task) {
    case Task::reach: return 1.0f;
    case Task::push_box: return 0.46f;
    case Task::pick_place_wall: return 0.095f;
  }
  throw std::runtime_error("unknown task");
}

namespace {

json encoder_to_json(const EncoderConfig& e) {
  return json{{"point_hidden", e.point_hidden},
              {"cloud_feat", e.cloud_feat},
              {"state_feat", e.state_feat},
              {"obs_feat", e.obs_feat}};
}

void encoder_from_json(const json& j, EncoderConfig& e) {
  e.point_hidden = j.at("point_hidden").get<int>();
  e.cloud_feat = j.at("cloud_feat").get<int>();
  e.state_feat = j.at("state_feat").get<int>();
  e.obs_feat = j.at("obs_feat").get<int>();
}

json run_to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  j["task"] = c.task;
  j["data"] = json{{"n_expert", c.data.n_expert},
                   {"n_mixed", c.data.n_mixed},
                   {"n_holdout", c.data.n_holdout},
                   {"drift_rho", c.data.drift_rho},
                   {"drift_sigma", c.data.drift_sigma}};
  j["policy"] = json{{"backbone", c.policy.backbone},
                     {"encoder", encoder_to_json(c.policy.enc)},
                     {"head_hidden", c.policy.head_hidden},
                     {"chunk", c.policy.chunk},
                     {"n_obs", c.policy.n_obs},
                     {"nfe", c.policy.nfe},
                     {"diffusion_steps", c.policy.diffusion_steps},
                     {"ddim_steps", c.policy.ddim_steps},
                     {"train_steps", c.policy.train_steps},
                     {"batch", c.policy.batch},
                     {"lr", c.policy.lr},
                     {"weight_decay", c.policy.weight_decay}};
  j["imagination"] = json{{"encoder", encoder_to_json(c.imagination.enc)},
                          {"wm_hidden", c.imagination.wm_hidden},
                          {"wm_layers", c.imagination.wm_layers},
                          {"wm_heads", c.imagination.wm_heads},
                          {"chunk", c.imagination.chunk},
                          {"gamma", c.imagination.gamma},
                          {"lambda_wm", c.imagination.lambda_wm},
                          {"scorer_hidden", c.imagination.scorer_hidden},
                          {"action_ablated", c.imagination.action_ablated},
                          {"train_steps", c.imagination.train_steps},
                          {"batch", c.imagination.batch},
                          {"lr", c.imagination.lr},
                          {"weight_decay", c.imagination.weight_decay}};
  j["rerank"] = json{{"method", std::string(rerank_method_name(c.rerank.method))},
                     {"n_cand", c.rerank.n_cand},
                     {"p_drop", c.rerank.p_drop},
                     {"min_keep_frac", c.rerank.min_keep_frac},
                     {"sigma_a", c.rerank.sigma_a},
                     {"sigma_o", c.rerank.sigma_o},
                     {"cem_iters", c.rerank.cem_iters},
                     {"cem_elites", c.rerank.cem_elites},
                     {"mppi_beta", c.rerank.mppi_beta},
                     {"ga_steps", c.rerank.ga_steps},
                     {"ga_step_size", c.rerank.ga_step_size}};
  j["bench"] = json{{"episodes", c.bench.episodes},
                    {"n_seeds", c.bench.n_seeds},
                    {"warmup_decisions", c.bench.warmup_decisions},
                    {"measure_decisions", c.bench.measure_decisions}};
  return j;
}

void check_known_keys(const json& user, const json& schema, const std::string& prefix) {
  for (auto it = user.begin(); it != user.end(); ++it) {
    std::string where = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!schema.contains(it.key())) throw ConfigError("unknown config key '" + where + "'");
    const json& ref = schema.at(it.key());
    if (ref.is_object()) {
      if (!it.value().is_object())
        throw ConfigError("config key '" + where + "' must be an object");
      check_known_keys(it.value(), ref, where);
    }
  }
}

template <typename T>
void read_into(const json& j, const char* key, T& out, const std::string& prefix) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + prefix + key + "' has the wrong type");
  }
}

}  // namespace

RunConfig RunConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config root must be a JSON object");

  RunConfig c;
  check_known_keys(j, run_to_json(c), "");

  read_into(j, "seed", c.seed, "");
  read_into(j, "out_dir", c.out_dir, "");
  read_into(j, "task", c.task, "");
  task_from_name(c.task);  // validates

  if (j.contains("data")) {
    const json& d = j.at("data");
    read_into(d, "n_expert", c.data.n_expert, "data.");
    read_into(d, "n_mixed", c.data.n_mixed, "data.");
    read_into(d, "n_holdout", c.data.n_holdout, "data.");
    read_into(d, "drift_rho", c.data.drift_rho, "data.");
    read_into(d, "drift_sigma", c.data.drift_sigma, "data.");
  }
  if (j.contains("policy")) {
    const json& p = j.at("policy");
    read_into(p, "backbone", c.policy.backbone, "policy.");
    if (c.policy.backbone != "fm" && c.policy.backbone != "dp")
      throw ConfigError("policy.backbone must be 'fm' or 'dp'");
    if (p.contains("encoder")) encoder_from_json(p.at("encoder"), c.policy.enc);
    read_into(p, "head_hidden", c.policy.head_hidden, "policy.");
    read_into(p, "chunk", c.policy.chunk, "policy.");
    read_into(p, "n_obs", c.policy.n_obs, "policy.");
    read_into(p, "nfe", c.policy.nfe, "policy.");
    read_into(p, "diffusion_steps", c.policy.diffusion_steps, "policy.");
    read_into(p, "ddim_steps", c.policy.ddim_steps, "policy.");
    read_into(p, "train_steps", c.policy.train_steps, "policy.");
    read_into(p, "batch", c.policy.batch, "policy.");
    read_into(p, "lr", c.policy.lr, "policy.");
    read_into(p, "weight_decay", c.policy.weight_decay, "policy.");
  }
  if (j.contains("imagination")) {
    const json& m = j.at("imagination");
    if (m.contains("encoder")) encoder_from_json(m.at("encoder"), c.imagination.enc);
    read_into(m, "wm_hidden", c.imagination.wm_hidden, "imagination.");
    read_into(m, "wm_layers", c.imagination.wm_layers, "imagination.");
    read_into(m, "wm_heads", c.imagination.wm_heads, "imagination.");
    read_into(m, "chunk", c.imagination.chunk, "imagination.");
    read_into(m, "gamma", c.imagination.gamma, "imagination.");
    read_into(m, "lambda_wm", c.imagination.lambda_wm, "imagination.");
    read_into(m, "scorer_hidden", c.imagination.scorer_hidden, "imagination.");
    read_into(m, "action_ablated", c.imagination.action_ablated, "imagination.");
    read_into(m, "train_steps", c.imagination.train_steps, "imagination.");
    read_into(m, "batch", c.imagination.batch, "imagination.");
    read_into(m, "lr", c.imagination.lr, "imagination.");
    read_into(m, "weight_decay", c.imagination.weight_decay, "imagination.");
  }
  if (j.contains("rerank")) {
    const json& r = j.at("rerank");
    if (r.contains("method")) {
      std::string name;
      read_into(r, "method", name, "rerank.");
      c.rerank.method = rerank_method_from_name(name);
    }
    read_into(r, "n_cand", c.rerank.n_cand, "rerank.");
    read_into(r, "p_drop", c.rerank.p_drop, "rerank.");
    read_into(r, "min_keep_frac", c.rerank.min_keep_frac, "rerank.");
    read_into(r, "sigma_a", c.rerank.sigma_a, "rerank.");
    read_into(r, "sigma_o", c.rerank.sigma_o, "rerank.");
    read_into(r, "cem_iters", c.rerank.cem_iters, "rerank.");
    read_into(r, "cem_elites", c.rerank.cem_elites, "rerank.");
    read_into(r, "mppi_beta", c.rerank.mppi_beta, "rerank.");
    read_into(r, "ga_steps", c.rerank.ga_steps, "rerank.");
    read_into(r, "ga_step_size", c.rerank.ga_step_size, "rerank.");
  }
  if (j.contains("bench")) {
    const json& b = j.at("bench");
    read_into(b, "episodes", c.bench.episodes, "bench.");
    read_into(b, "n_seeds", c.bench.n_seeds, "bench.");
    read_into(b, "warmup_decisions", c.bench.warmup_decisions, "bench.");
    read_into(b, "measure_decisions", c.bench.measure_decisions, "bench.");
  }

  if (c.data.n_expert < 1) throw ConfigError("data.n_expert must be >= 1");
  if (c.policy.chunk < 1) throw ConfigError("policy.chunk must be >= 1");
  if (c.policy.chunk != c.imagination.chunk)
    throw ConfigError("policy.chunk and imagination.chunk must match");
  if (c.rerank.n_cand < 1) throw ConfigError("rerank.n_cand must be >= 1");
  if (c.rerank.p_drop < 0 || c.rerank.p_drop >= 1)
    throw ConfigError("rerank.p_drop must be in [0, 1)");
  if (c.bench.episodes < 1) throw ConfigError("bench.episodes must be >= 1");
  return c;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

std::string RunConfig::to_json_text() const { return run_to_json(*this).dump(2); }

uint64_t RunConfig::config_hash() const {
  std::string canon = run_to_json(*this).dump();
  return fnv1a64(canon);
}

void RunConfig::apply_paper_scale() {
  policy.enc.point_hidden = 256;
  policy.enc.cloud_feat = 128;
  policy.enc.state_feat = 64;
  policy.enc.obs_feat = 192;
  policy.head_hidden = 512;
  policy.train_steps = 30000;
  policy.batch = 256;
  imagination.enc = policy.enc;
  imagination.wm_hidden = 256;
  imagination.wm_layers = 3;
  imagination.wm_heads = 4;
  imagination.scorer_hidden = 256;
  imagination.train_steps = 20000;
  imagination.batch = 256;
}

}  // namespace dalir
