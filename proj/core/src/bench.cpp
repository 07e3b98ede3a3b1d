#include "dalir/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <ostream>

#include "dalir/checkpoint.hpp"
#include "dalir/rng.hpp"
#include "json.hpp"

namespace dalir {

using nlohmann::json;
namespace fsys = std::filesystem;

void wilson_interval(int successes, int n, double& lo, double& hi) {
  if (n <= 0) {
    lo = 0.0;
    hi = 1.0;
    return;
  }
  const double z = 1.959963984540054;  // 97.5th normal percentile
  double p = double(successes) / n;
  double z2 = z * z;
  double denom = 1.0 + z2 / n;
  double center = (p + z2 / (2.0 * n)) / denom;
  double half = z * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / denom;
  lo = std::max(0.0, center - half);
  hi = std::min(1.0, center + half);
}

void mean_sd(const std::vector<double>& xs, double& mean, double& sd) {
  mean = 0.0;
  sd = 0.0;
  if (xs.empty()) return;
  for (double x : xs) mean += x;
  mean /= double(xs.size());
  if (xs.size() < 2) return;
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  sd = std::sqrt(ss / double(xs.size() - 1));
}

CellResult eval_cell(const Env& env, const Policy& policy, const Imagination* imag,
                     const RerankConfig& rc, int episodes, uint64_t run_seed, int seed_idx) {
  if (episodes < 1) throw std::runtime_error("eval needs at least one episode");
  CellResult r;
  r.task = policy.task();
  r.method = rc.method;
  r.n_cand = rc.n_cand;
  r.seed_idx = seed_idx;
  r.episodes = episodes;
  uint64_t cell =
      Rng::substream(run_seed, std::string("eval_") + task_name(policy.task()), uint64_t(seed_idx))
          .next_u64();
  double steps = 0.0, ms = 0.0;
  long decisions = 0;
  for (int e = 0; e < episodes; ++e) {
    uint64_t ep_seed = Rng::substream(cell, "episode", uint64_t(e)).next_u64();
    EpisodeResult res = run_episode(env, policy, imag, rc, ep_seed);
    if (res.success) r.successes++;
    steps += res.steps;
    for (const auto& d : res.decisions) {
      ms += d.latency_ms;
      decisions++;
    }
  }
  r.success_rate = double(r.successes) / episodes;
  wilson_interval(r.successes, episodes, r.ci_lo, r.ci_hi);
  r.mean_steps = steps / episodes;
  r.mean_decision_ms = decisions > 0 ? ms / double(decisions) : 0.0;
  return r;
}

namespace {

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)v);
  return buf;
}

uint64_t json_recipe_hash(const json& j) { return fnv1a64(j.dump()); }

void log_line(std::ostream* log, const std::string& s) {
  if (log) (*log) << s << std::endl;
}

bool try_load_cached_dataset(const std::string& path, uint64_t recipe, Dataset& out) {
  std::ifstream meta(path + ".meta.json");
  if (!meta) return false;
  try {
    json m = json::parse(meta);
    if (!m.contains("config_hash") || m["config_hash"].get<std::string>() != hex64(recipe))
      return false;
    Dataset ds = load_dataset(path);
    if (m.contains("content_hash") &&
        m["content_hash"].get<std::string>() != hex64(ds.content_hash()))
      return false;
    out = std::move(ds);
    return true;
  } catch (const std::exception&) {
    return false;
  }
}

bool model_cache_valid(const std::string& path, uint64_t recipe) {
  std::ifstream in(path + ".manifest.json");
  if (!in || !fsys::exists(path)) return false;
  json m;
  try {
    m = json::parse(in);
  } catch (const json::exception&) {
    return false;
  }
  return m.contains("recipe") && m["recipe"].get<std::string>() == hex64(recipe) &&
         m.contains("file") && m["file"].get<std::string>() == hex64(hash_file(path));
}

void write_model_manifest(const std::string& path, uint64_t recipe, const json& detail) {
  json m;
  m["recipe"] = hex64(recipe);
  m["file"] = hex64(hash_file(path));
  m["detail"] = detail;
  std::ofstream out(path + ".manifest.json");
  out << m.dump(2) << "\n";
}

float resolve_sigma(const RunConfig& cfg, Task task) {
  return cfg.data.drift_sigma < 0 ? default_drift_sigma(task) : cfg.data.drift_sigma;
}

}  // namespace

void prepare_task_datasets(const RunConfig& cfg, Task task, std::ostream* log, Dataset* expert,
                           Dataset* mixed, Dataset* holdout) {
  std::string dir = cfg.out_dir + "/" + task_name(task);
  fsys::create_directories(dir);
  uint64_t ts = Rng::substream(cfg.seed, task_name(task)).next_u64();
  float sigma = resolve_sigma(cfg, task);

  struct Part {
    const char* split;
    Dataset* out;
  };
  for (auto [split, out] : {Part{"expert", expert}, Part{"mixed", mixed}, Part{"holdout", holdout}}) {
    int n = std::string(split) == "expert"   ? cfg.data.n_expert
            : std::string(split) == "mixed" ? cfg.data.n_mixed
                                            : cfg.data.n_holdout;
    uint64_t seed = Rng::substream(ts, std::string("data_") + split).next_u64();
    json recipe = {{"task", task_name(task)}, {"split", split},    {"n", n},
                   {"seed", seed},            {"rho", cfg.data.drift_rho}, {"sigma", sigma}};
    if (std::string(split) == "expert") {
      recipe["rho"] = 0.0f;
      recipe["sigma"] = 0.0f;
    }
    uint64_t rh = json_recipe_hash(recipe);
    std::string path = dir + "/" + split + ".bin";
    Dataset ds;
    if (!try_load_cached_dataset(path, rh, ds)) {
      log_line(log, "[" + std::string(task_name(task)) + "] generating " + split + " data (" +
                        std::to_string(n) + " episodes)");
      ds = std::string(split) == "expert"
               ? collect_expert(task, n, seed)
               : collect_mixed(task, n, seed, DriftNoise{cfg.data.drift_rho, sigma});
      ds.config_hash = rh;
      ds.split = split;
      save_dataset(path, ds);
    } else {
      log_line(log, "[" + std::string(task_name(task)) + "] cached " + split + " data");
    }
    if (out) *out = std::move(ds);
  }
}

TaskArtifacts prepare_task_artifacts(const RunConfig& cfg, Task task, std::ostream* log,
                                     bool with_imagination) {
  TaskArtifacts art;
  art.task = task;
  art.dir = cfg.out_dir + "/" + task_name(task);
  prepare_task_datasets(cfg, task, log, &art.expert, &art.mixed, &art.holdout);

  json full = json::parse(cfg.to_json_text());
  uint64_t ts = Rng::substream(cfg.seed, task_name(task)).next_u64();

  uint64_t pseed = Rng::substream(ts, "policy").next_u64();
  json precipe = {{"task", task_name(task)},
                  {"policy", full["policy"]},
                  {"seed", pseed},
                  {"data", hex64(art.expert.content_hash())}};
  uint64_t prh = json_recipe_hash(precipe);
  art.policy_path = art.dir + "/policy_" + cfg.policy.backbone + ".ckpt";
  art.policy = std::make_shared<Policy>(task, cfg.policy, pseed);
  if (model_cache_valid(art.policy_path, prh)) {
    art.policy->load(art.policy_path);
    log_line(log, "[" + std::string(task_name(task)) + "] cached policy");
  } else {
    log_line(log, "[" + std::string(task_name(task)) + "] training policy (" +
                      std::to_string(cfg.policy.train_steps) + " steps)");
    uint64_t train_seed = Rng::substream(ts, "policy_train").next_u64();
    art.policy->train(art.expert, train_seed, [&](int step, float loss) {
      if (log && step % 300 == 0)
        (*log) << "  policy step " << step << " loss " << loss << std::endl;
    });
    art.policy->save(art.policy_path);
    write_model_manifest(art.policy_path, prh, precipe);
  }
  art.policy_file_hash = hash_file(art.policy_path);
  if (!with_imagination) return art;

  uint64_t iseed = Rng::substream(ts, "imagination").next_u64();
  json irecipe = {{"task", task_name(task)},
                  {"imagination", full["imagination"]},
                  {"seed", iseed},
                  {"data", hex64(art.mixed.content_hash())},
                  {"policy", hex64(art.policy_file_hash)}};
  uint64_t irh = json_recipe_hash(irecipe);
  art.imag_path = art.dir + "/imagination.ckpt";
  art.imag = std::make_shared<Imagination>(task, cfg.imagination, iseed);
  if (model_cache_valid(art.imag_path, irh)) {
    art.imag->load(art.imag_path);
    log_line(log, "[" + std::string(task_name(task)) + "] cached imagination");
  } else {
    log_line(log, "[" + std::string(task_name(task)) + "] training imagination (" +
                      std::to_string(cfg.imagination.train_steps) + " steps)");
    art.imag->init_from_policy(*art.policy);
    uint64_t train_seed = Rng::substream(ts, "imagination_train").next_u64();
    art.imag->train(art.mixed, train_seed, [&](int step, const Imagination::StepLosses& l) {
      if (log && step % 300 == 0)
        (*log) << "  imagination step " << step << " wm " << l.wm << " score " << l.score
               << std::endl;
    });
    art.imag->save(art.imag_path);
    write_model_manifest(art.imag_path, irh, irecipe);
  }
  art.imag_file_hash = hash_file(art.imag_path);
  return art;
}

std::vector<LatencyRow> bench_latency(const RunConfig& cfg, const TaskArtifacts& art,
                                      std::ostream* log) {
  Env env(art.task);
  int k = cfg.policy.chunk;
  int A = env.spec().action_dim;

  // decision inputs recorded from base-policy rollouts
  std::vector<std::pair<Observation, Observation>> pool;
  RerankConfig base;
  base.method = RerankMethod::none;
  base.n_cand = 1;
  uint64_t ls = Rng::substream(cfg.seed, "latency").next_u64();
  for (int e = 0; int(pool.size()) < 32 && e < 12; ++e) {
    EnvState s = env.reset(Rng::substream(ls, "episode", uint64_t(e)).next_u64());
    Observation prev = env.observe(s);
    Observation cur = prev;
    int decision = 0;
    while (!s.done && int(pool.size()) < 32) {
      pool.emplace_back(prev, cur);
      uint64_t dseed = Rng::substream(ls, "decide", uint64_t(decision++)).next_u64();
      ChunkChoice choice = select_chunk(*art.policy, art.imag.get(), base, prev, cur, dseed);
      for (int j = 0; j < k && !s.done; ++j) {
        env.step(s, std::span<const float>(choice.chunk.data() + size_t(j) * A, size_t(A)));
        prev = std::move(cur);
        cur = env.observe(s);
      }
    }
  }
  if (pool.empty()) throw std::runtime_error("latency bench collected no decision inputs");

  auto measure = [&](const Policy& pol, const RerankConfig& rc, const std::string& backbone) {
    std::vector<double> samples;
    samples.reserve(size_t(cfg.bench.measure_decisions));
    int total = cfg.bench.warmup_decisions + cfg.bench.measure_decisions;
    for (int i = 0; i < total; ++i) {
      const auto& [prev, cur] = pool[size_t(i) % pool.size()];
      uint64_t dseed = Rng::substream(ls, "measure", uint64_t(i)).next_u64();
      ChunkChoice choice = select_chunk(pol, art.imag.get(), rc, prev, cur, dseed);
      if (i >= cfg.bench.warmup_decisions) samples.push_back(choice.info.latency_ms);
    }
    std::sort(samples.begin(), samples.end());
    double sum = 0.0;
    for (double v : samples) sum += v;
    LatencyRow row;
    row.backbone = backbone;
    row.method = rerank_method_name(rc.method);
    row.n_cand = rc.n_cand;
    row.mean_ms = sum / double(samples.size());
    row.p50_ms = samples[samples.size() / 2];
    row.p95_ms = samples[size_t(double(samples.size() - 1) * 0.95)];
    row.fps = row.mean_ms > 0 ? 1000.0 / row.mean_ms : 0.0;
    log_line(log, "  " + backbone + " " + row.method + " n=" + std::to_string(row.n_cand) +
                      " mean " + std::to_string(row.mean_ms) + " ms");
    return row;
  };

  // the diffusion variant shares weights; only the sampler loop differs
  PolicyConfig dp_cfg = cfg.policy;
  dp_cfg.backbone = "dp";
  Policy dp(art.task, dp_cfg, 1);
  dp.load(art.policy_path);

  std::vector<LatencyRow> rows;
  for (const auto* bk : {"fm", "dp"}) {
    const Policy& pol = std::string(bk) == "fm" ? *art.policy : dp;
    rows.push_back(measure(pol, base, bk));
    for (int n : {1, 4, 8, 16, 32}) {
      RerankConfig rc = cfg.rerank;
      rc.method = RerankMethod::latent;
      rc.n_cand = n;
      rows.push_back(measure(pol, rc, bk));
    }
  }
  return rows;
}

FrozenSet encode_frozen(const Imagination& imag, const Dataset& ds, int max_trajs, float gamma,
                        int stride) {
  NoGrad ng;
  FrozenSet fs;
  fs.latent_dim = imag.latent_dim();
  int k = imag.config().chunk;
  int n_trajs = std::min<int>(max_trajs, int(ds.trajs.size()));
  if (stride < 1) stride = 1;
  for (int ti = 0; ti < n_trajs; ++ti) {
    const Trajectory& tr = ds.trajs[ti];
    int A = tr.action_dim;
    if (fs.chunk_dim == 0) fs.chunk_dim = k * A;
    int P = tr.num_points;
    Tensor clouds = Tensor::from({(tr.T + 1) * P, 3}, tr.clouds);
    Tensor states = Tensor::from({tr.T + 1, tr.state_dim}, tr.states);
    Tensor feats = imag.encode(clouds, states);
    const float* f = feats.data().data();
    int L = fs.latent_dim;

    std::vector<double> ret(size_t(tr.T) + 1, 0.0);
    for (int t = tr.T - 1; t >= 0; --t) ret[size_t(t)] = tr.rewards[size_t(t)] + gamma * ret[size_t(t) + 1];

    for (int t = 0; t < tr.T; t += stride) {
      fs.s.insert(fs.s.end(), f + size_t(t) * L, f + size_t(t + 1) * L);
      int fut = std::min(t + k, tr.T);
      fs.s_future.insert(fs.s_future.end(), f + size_t(fut) * L, f + size_t(fut + 1) * L);
      for (int j = 0; j < k; ++j) {
        auto a = tr.action_at(std::min(t + j, tr.T - 1));
        fs.chunk.insert(fs.chunk.end(), a.begin(), a.end());
      }
      fs.y.push_back(float(std::pow(double(gamma), double(tr.T - t)) * tr.y_terminal));
      fs.g.push_back(float(ret[size_t(t)]));
      fs.traj.push_back(ti);
      fs.count++;
    }
  }
  return fs;
}

FrozenSet frozen_slice_by_traj(const FrozenSet& fs, int lo, int hi) {
  FrozenSet out;
  out.latent_dim = fs.latent_dim;
  out.chunk_dim = fs.chunk_dim;
  for (int i = 0; i < fs.count; ++i) {
    if (fs.traj[size_t(i)] < lo || fs.traj[size_t(i)] >= hi) continue;
    size_t L = size_t(fs.latent_dim), C = size_t(fs.chunk_dim), si = size_t(i);
    out.s.insert(out.s.end(), fs.s.begin() + si * L, fs.s.begin() + (si + 1) * L);
    out.s_future.insert(out.s_future.end(), fs.s_future.begin() + si * L,
                        fs.s_future.begin() + (si + 1) * L);
    out.chunk.insert(out.chunk.end(), fs.chunk.begin() + si * C, fs.chunk.begin() + (si + 1) * C);
    out.y.push_back(fs.y[si]);
    out.g.push_back(fs.g[si]);
    out.traj.push_back(fs.traj[si]);
    out.count++;
  }
  return out;
}

const FrozenSet& frozen_mixed(const TaskArtifacts& art, float gamma) {
  if (!art.frozen_mixed_cache || art.frozen_gamma != gamma) {
    art.frozen_mixed_cache = std::make_shared<FrozenSet>(
        encode_frozen(*art.imag, art.mixed, int(art.mixed.trajs.size()), gamma));
    art.frozen_holdout_cache.reset();
    art.frozen_gamma = gamma;
  }
  return *art.frozen_mixed_cache;
}

const FrozenSet& frozen_holdout(const TaskArtifacts& art, float gamma) {
  if (!art.frozen_holdout_cache || art.frozen_gamma != gamma) {
    if (art.frozen_gamma != gamma) art.frozen_mixed_cache.reset();
    art.frozen_holdout_cache = std::make_shared<FrozenSet>(
        encode_frozen(*art.imag, art.holdout, int(art.holdout.trajs.size()), gamma));
    art.frozen_gamma = gamma;
  }
  return *art.frozen_holdout_cache;
}

namespace {

struct FrozenBatch {
  Tensor s, s_future, chunk, y, g;
};

FrozenBatch gather_frozen(const FrozenSet& fs, std::span<const int> idx) {
  int B = int(idx.size());
  size_t L = size_t(fs.latent_dim), C = size_t(fs.chunk_dim);
  std::vector<float> s(size_t(B) * L), fut(size_t(B) * L), ch(size_t(B) * C);
  std::vector<float> y(static_cast<size_t>(B)), g(static_cast<size_t>(B));
  for (int i = 0; i < B; ++i) {
    size_t r = size_t(idx[size_t(i)]);
    std::memcpy(&s[size_t(i) * L], &fs.s[r * L], L * sizeof(float));
    std::memcpy(&fut[size_t(i) * L], &fs.s_future[r * L], L * sizeof(float));
    std::memcpy(&ch[size_t(i) * C], &fs.chunk[r * C], C * sizeof(float));
    y[size_t(i)] = fs.y[r];
    g[size_t(i)] = fs.g[r];
  }
  FrozenBatch b;
  b.s = Tensor::from({B, fs.latent_dim}, s);
  b.s_future = Tensor::from({B, fs.latent_dim}, fut);
  b.chunk = Tensor::from({B, fs.chunk_dim}, ch);
  b.y = Tensor::from({B, 1}, y);
  b.g = Tensor::from({B, 1}, g);
  return b;
}

}  // namespace

double frozen_wm_mse(const Imagination& imag, const FrozenSet& fs) {
  if (fs.count == 0) throw std::runtime_error("empty latent set");
  NoGrad ng;
  double sum = 0.0;
  int done = 0;
  while (done < fs.count) {
    int B = std::min(512, fs.count - done);
    std::vector<int> idx(static_cast<size_t>(B));
    for (int i = 0; i < B; ++i) idx[size_t(i)] = done + i;
    FrozenBatch b = gather_frozen(fs, idx);
    Tensor pred = imag.predict_next(b.s, b.chunk);
    const float* p = pred.data().data();
    const float* f = b.s_future.data().data();
    for (size_t i = 0; i < pred.numel(); ++i) {
      double d = double(p[i]) - double(f[i]);
      sum += d * d;
    }
    done += B;
  }
  return sum / (double(fs.count) * double(fs.latent_dim));
}

void train_wm_frozen(Imagination& imag, const FrozenSet& train, int steps, int batch, float lr,
                     float weight_decay, uint64_t seed) {
  if (train.count == 0) throw std::runtime_error("empty latent set");
  AdamWConfig oc;
  oc.lr = lr;
  oc.weight_decay = weight_decay;
  AdamW opt(imag.wm_params(), oc);
  Rng rng = Rng::substream(seed, "wm_frozen");
  std::vector<int> idx(static_cast<size_t>(std::min(batch, train.count)));
  for (int step = 0; step < steps; ++step) {
    for (auto& i : idx) i = int(rng.below(uint64_t(train.count)));
    FrozenBatch b = gather_frozen(train, idx);
    Tensor loss = mse_loss(imag.predict_next(b.s, b.chunk), b.s_future);
    opt.zero_grad();
    backward(loss);
    opt.step();
  }
}

void train_scorer_frozen(Imagination& imag, const FrozenSet& train, bool dense, int steps,
                         int batch, float lr, uint64_t seed) {
  if (train.count == 0) throw std::runtime_error("empty latent set");
  AdamWConfig oc;
  oc.lr = lr;
  oc.weight_decay = 1e-4f;
  AdamW opt(imag.scorer_params(), oc);
  Rng rng = Rng::substream(seed, dense ? "scorer_dense" : "scorer_sparse");

  float g_lo = 0.0f, g_hi = 1.0f;
  if (dense) {
    g_lo = *std::min_element(train.g.begin(), train.g.end());
    g_hi = *std::max_element(train.g.begin(), train.g.end());
    if (g_hi <= g_lo) g_hi = g_lo + 1.0f;
  }

  std::vector<int> idx(static_cast<size_t>(std::min(batch, train.count)));
  for (int step = 0; step < steps; ++step) {
    for (auto& i : idx) i = int(rng.below(uint64_t(train.count)));
    FrozenBatch b = gather_frozen(train, idx);
    Tensor logit = imag.score_logit(b.s);
    Tensor loss;
    if (dense) {
      std::vector<float> t(idx.size());
      for (size_t i = 0; i < idx.size(); ++i)
        t[i] = (train.g[size_t(idx[i])] - g_lo) / (g_hi - g_lo);
      loss = mse_loss(sigmoid(logit), Tensor::from({int(idx.size()), 1}, t));
    } else {
      loss = bce_with_logits_loss(logit, b.y);
    }
    opt.zero_grad();
    backward(loss);
    opt.step();
  }
}

void copy_params_prefix(ParamMap& dst, const ParamMap& src, const std::string& prefix) {
  int copied = 0;
  for (const auto& [name, t] : src.items) {
    if (name.rfind(prefix, 0) != 0) continue;
    Tensor* d = dst.find(name);
    if (!d) throw std::runtime_error("missing destination parameter '" + name + "'");
    if (d->shape() != t.shape())
      throw std::runtime_error("shape mismatch copying parameter '" + name + "'");
    std::memcpy(d->mutable_data().data(), t.data().data(), t.numel() * sizeof(float));
    copied++;
  }
  if (copied == 0) throw std::runtime_error("no parameters matched prefix '" + prefix + "'");
}

namespace {
constexpr int kFrozenWmSteps = 600;
constexpr int kFrozenWmBatch = 128;
constexpr float kFrozenWmLr = 3e-4f;
constexpr int kFrozenScorerSteps = 900;
constexpr int kFrozenScorerBatch = 128;
constexpr float kFrozenScorerLr = 1e-4f;
}  // namespace

DataScaleResult ablate_mixed_data(const RunConfig& cfg, const TaskArtifacts& art,
                                  std::ostream* log) {
  DataScaleResult res;
  int n = int(art.mixed.trajs.size());
  res.sizes = {std::max(1, n / 10), std::max(2, n / 2), n};
  const FrozenSet& all = frozen_mixed(art, cfg.imagination.gamma);
  const FrozenSet& hold = frozen_holdout(art, cfg.imagination.gamma);
  res.holdout_hash = art.holdout.content_hash();

  for (int size : res.sizes) {
    FrozenSet slice = frozen_slice_by_traj(all, 0, size);
    std::vector<double> per_seed;
    for (int si = 0; si < cfg.bench.n_seeds; ++si) {
      uint64_t s =
          Rng::substream(cfg.seed, "wm_scale", uint64_t(size) * 100 + uint64_t(si)).next_u64();
      Imagination wm(art.task, cfg.imagination, s);
      copy_params_prefix(wm.params(), art.imag->params(), "enc/");
      train_wm_frozen(wm, slice, kFrozenWmSteps, kFrozenWmBatch, kFrozenWmLr,
                      cfg.imagination.weight_decay, s);
      double mse = frozen_wm_mse(wm, hold);
      res.rows.push_back({size, si, mse});
      per_seed.push_back(mse);
      log_line(log, "  mixed-data " + std::to_string(size) + " trajs seed " + std::to_string(si) +
                        " holdout mse " + std::to_string(mse));
    }
    double m, sd;
    mean_sd(per_seed, m, sd);
    res.mean_mse.push_back(m);
    res.sd_mse.push_back(sd);
  }

  res.trend_ok = true;
  for (size_t i = 0; i + 1 < res.mean_mse.size(); ++i) {
    double gap = res.mean_mse[i] - res.mean_mse[i + 1];
    double sd = std::max(res.sd_mse[i], res.sd_mse[i + 1]);
    if (!(gap > 0.0) || !(gap > 3.0 * sd)) res.trend_ok = false;
  }
  return res;
}

ActionCondResult ablate_action_conditioning(const RunConfig& cfg,
                                            const std::vector<const TaskArtifacts*>& arts,
                                            std::ostream* log) {
  ActionCondResult res;
  res.trend_ok = true;
  res.worst_ratio = 0.0;
  for (const TaskArtifacts* art : arts) {
    const FrozenSet& all = frozen_mixed(*art, cfg.imagination.gamma);
    int n = int(art->mixed.trajs.size());
    int split = std::max(1, n * 85 / 100);
    FrozenSet train = frozen_slice_by_traj(all, 0, split);
    FrozenSet hold = frozen_slice_by_traj(all, split, n);

    uint64_t s = Rng::substream(cfg.seed, "action_cond", uint64_t(art->task)).next_u64();
    double mse[2];
    for (int ablated = 0; ablated < 2; ++ablated) {
      ImaginationConfig ic = cfg.imagination;
      ic.action_ablated = ablated == 1;
      Imagination wm(art->task, ic, s);
      copy_params_prefix(wm.params(), art->imag->params(), "enc/");
      train_wm_frozen(wm, train, kFrozenWmSteps, kFrozenWmBatch, kFrozenWmLr,
                      cfg.imagination.weight_decay, s);
      mse[ablated] = frozen_wm_mse(wm, hold);
      res.rows.push_back({art->task, ablated == 1, mse[ablated]});
      log_line(log, std::string("  action-cond ") + task_name(art->task) +
                        (ablated ? " ablated " : " full ") + std::to_string(mse[ablated]));
    }
    double ratio = mse[0] / mse[1];
    res.worst_ratio = std::max(res.worst_ratio, ratio);
    if (!(mse[0] < mse[1]) || !(ratio <= 0.8)) res.trend_ok = false;
  }
  return res;
}

SupervisionResult ablate_supervision(const RunConfig& cfg,
                                     const std::vector<const TaskArtifacts*>& arts,
                                     std::ostream* log) {
  SupervisionResult res;
  std::vector<double> none_rates, sparse_rates, dense_rates;
  for (const TaskArtifacts* art : arts) {
    Env env(art->task);
    const FrozenSet& fs = frozen_mixed(*art, cfg.imagination.gamma);

    auto make_variant = [&](bool dense) {
      uint64_t s = Rng::substream(cfg.seed, dense ? "sup_dense" : "sup_sparse",
                                  uint64_t(art->task))
                       .next_u64();
      auto v = std::make_shared<Imagination>(art->task, cfg.imagination, s);
      copy_params_prefix(v->params(), art->imag->params(), "enc/");
      copy_params_prefix(v->params(), art->imag->params(), "wm/");
      train_scorer_frozen(*v, fs, dense, kFrozenScorerSteps, kFrozenScorerBatch, kFrozenScorerLr,
                          s);
      return v;
    };
    auto sparse = make_variant(false);
    auto dense = make_variant(true);
    log_line(log, std::string("  supervision scorers trained for ") + task_name(art->task));

    RerankConfig none_rc = cfg.rerank;
    none_rc.method = RerankMethod::none;
    none_rc.n_cand = 1;
    RerankConfig lat_rc = cfg.rerank;
    lat_rc.method = RerankMethod::latent;

    for (int si = 0; si < cfg.bench.n_seeds; ++si) {
      CellResult c0 = eval_cell(env, *art->policy, nullptr, none_rc, cfg.bench.episodes, cfg.seed, si);
      CellResult c1 =
          eval_cell(env, *art->policy, sparse.get(), lat_rc, cfg.bench.episodes, cfg.seed, si);
      CellResult c2 =
          eval_cell(env, *art->policy, dense.get(), lat_rc, cfg.bench.episodes, cfg.seed, si);
      res.rows.push_back({"none", c0});
      res.rows.push_back({"sparse", c1});
      res.rows.push_back({"dense", c2});
      none_rates.push_back(c0.success_rate);
      sparse_rates.push_back(c1.success_rate);
      dense_rates.push_back(c2.success_rate);
    }
  }
  double sd;
  mean_sd(none_rates, res.mean_none, sd);
  mean_sd(sparse_rates, res.mean_sparse, sd);
  mean_sd(dense_rates, res.mean_dense, sd);
  res.sparse_ok = res.mean_sparse >= res.mean_none + 0.02 - 1e-9;
  res.dense_ok = res.mean_dense >= res.mean_sparse - 0.02 - 1e-9;
  return res;
}

VariationResult ablate_variation_target(const RunConfig& cfg,
                                        const std::vector<const TaskArtifacts*>& arts,
                                        std::ostream* log) {
  VariationResult res;
  res.methods = {RerankMethod::none,         RerankMethod::random_shooting,
                 RerankMethod::cem,          RerankMethod::mppi,
                 RerankMethod::grad_ascent,  RerankMethod::obs_noise,
                 RerankMethod::latent};
  std::vector<std::vector<double>> rates(res.methods.size());
  for (const TaskArtifacts* art : arts) {
    Env env(art->task);
    for (size_t mi = 0; mi < res.methods.size(); ++mi) {
      RerankConfig rc = cfg.rerank;
      rc.method = res.methods[mi];
      if (rc.method == RerankMethod::none) rc.n_cand = 1;
      for (int si = 0; si < cfg.bench.n_seeds; ++si) {
        CellResult c =
            eval_cell(env, *art->policy, art->imag.get(), rc, cfg.bench.episodes, cfg.seed, si);
        c.policy_hash = art->policy_file_hash;
        c.imag_hash = art->imag_file_hash;
        res.cells.push_back(c);
        rates[mi].push_back(c.success_rate);
      }
      log_line(log, std::string("  variation ") + task_name(art->task) + " " +
                        rerank_method_name(res.methods[mi]) + " done");
    }
  }
  res.means.resize(res.methods.size());
  for (size_t mi = 0; mi < res.methods.size(); ++mi) {
    double sd;
    mean_sd(rates[mi], res.means[mi], sd);
  }
  auto mean_of = [&](RerankMethod m) {
    for (size_t i = 0; i < res.methods.size(); ++i)
      if (res.methods[i] == m) return res.means[i];
    return 0.0;
  };
  res.ordering_ok = mean_of(RerankMethod::latent) >= mean_of(RerankMethod::obs_noise) &&
                    mean_of(RerankMethod::obs_noise) >= mean_of(RerankMethod::none);
  return res;
}

CandScaleResult ablate_candidate_scaling(const RunConfig& cfg, const TaskArtifacts& art,
                                         std::ostream* log) {
  CandScaleResult res;
  res.sweep = {1, 4, 8, 16, 32};
  Env env(art.task);
  int s1 = 0, s4 = 0;
  for (int n : res.sweep) {
    RerankConfig rc = cfg.rerank;
    rc.method = RerankMethod::latent;
    rc.n_cand = n;
    for (int si = 0; si < cfg.bench.n_seeds; ++si) {
      CellResult c =
          eval_cell(env, *art.policy, art.imag.get(), rc, cfg.bench.episodes, cfg.seed, si);
      res.cells.push_back(c);
      if (n == 1) s1 += c.successes;
      if (n == 4) s4 += c.successes;
    }
    log_line(log, "  candidate sweep n=" + std::to_string(n) + " done");
  }
  res.n4_ge_n1 = s4 >= s1;
  return res;
}

std::vector<float> score_sequence(const Imagination& imag, const Trajectory& tr) {
  NoGrad ng;
  Tensor clouds = Tensor::from({(tr.T + 1) * tr.num_points, 3}, tr.clouds);
  Tensor states = Tensor::from({tr.T + 1, tr.state_dim}, tr.states);
  Tensor probs = sigmoid(imag.score_logit(imag.encode(clouds, states)));
  auto pd = probs.data();
  return std::vector<float>(pd.begin(), pd.end());
}

ScorerDiag scorer_diagnostics(const Imagination& imag, const Dataset& holdout, float gamma) {
  ScorerDiag d;
  std::vector<double> pos, neg;
  double r_sum = 0.0;
  int r_n = 0;
  double fail_sum = 0.0;
  for (const Trajectory& tr : holdout.trajs) {
    std::vector<float> seq = score_sequence(imag, tr);
    double term = seq[size_t(tr.T)];
    if (tr.y_terminal) {
      pos.push_back(term);
      d.n_success++;
      std::vector<float> tgt = mc_targets(tr, gamma);
      double mx = 0, my = 0;
      int n = int(seq.size());
      for (int i = 0; i < n; ++i) {
        mx += seq[size_t(i)];
        my += tgt[size_t(i)];
      }
      mx /= n;
      my /= n;
      double sxy = 0, sxx = 0, syy = 0;
      for (int i = 0; i < n; ++i) {
        double dx = seq[size_t(i)] - mx, dy = tgt[size_t(i)] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
      }
      if (sxx > 0 && syy > 0) {
        r_sum += sxy / std::sqrt(sxx * syy);
        r_n++;
      }
    } else {
      neg.push_back(term);
      d.n_fail++;
      double m = 0;
      for (float v : seq) m += v;
      fail_sum += m / double(seq.size());
    }
  }
  double pairs = 0.0, wins = 0.0;
  for (double p : pos)
    for (double q : neg) {
      pairs += 1.0;
      if (p > q)
        wins += 1.0;
      else if (p == q)
        wins += 0.5;
    }
  d.auc = pairs > 0 ? wins / pairs : 0.0;
  d.mean_pearson = r_n > 0 ? r_sum / r_n : 0.0;
  d.mean_fail_score = d.n_fail > 0 ? fail_sum / d.n_fail : 0.0;
  return d;
}

}  // namespace dalir
