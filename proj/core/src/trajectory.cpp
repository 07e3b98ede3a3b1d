#include "dalir/trajectory.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

static_assert(std::endian::native == std::endian::little,
              "trajectory serialization assumes a little-endian host");

namespace dalir {

std::string quality_name(Quality q) {
  switch (q) {
    case Quality::expert: return "expert";
    case Quality::imperfect_success: return "imperfect_success";
    case Quality::failed: return "failed";
  }
  throw std::invalid_argument("unknown quality enum");
}

std::span<const float> Trajectory::state_at(int t) const {
  return {states.data() + size_t(t) * state_dim, size_t(state_dim)};
}

std::span<const float> Trajectory::cloud_at(int t) const {
  return {clouds.data() + size_t(t) * num_points * 3, size_t(num_points) * 3};
}

std::span<const float> Trajectory::action_at(int t) const {
  return {actions.data() + size_t(t) * action_dim, size_t(action_dim)};
}

size_t Dataset::count(Quality q) const {
  size_t n = 0;
  for (const auto& tr : trajs) n += tr.quality == q;
  return n;
}

size_t Dataset::total_frames() const {
  size_t n = 0;
  for (const auto& tr : trajs) n += size_t(tr.T) + 1;
  return n;
}

void Dataset::append(const Dataset& other) {
  if (other.task != task) throw std::invalid_argument("cannot append datasets across tasks");
  trajs.insert(trajs.end(), other.trajs.begin(), other.trajs.end());
}

// ---- collection ----

namespace {

struct EpisodeRecord {
  Trajectory tr;
  bool success = false;
};

EpisodeRecord roll_episode(const Env& env, uint64_t ep_seed, const DriftNoise* noise,
                           uint64_t noise_seed) {
  const TaskSpec& spec = env.spec();
  EnvState s = env.reset(ep_seed);
  Rng nrng = Rng::substream(noise_seed, "drift");
  std::vector<float> drift(size_t(spec.action_dim), 0.0f);

  Trajectory tr;
  tr.action_dim = spec.action_dim;
  tr.num_points = spec.num_points;
  tr.state_dim = spec.state_dim;

  Observation obs = env.observe(s);
  tr.states.insert(tr.states.end(), obs.state.begin(), obs.state.end());
  tr.clouds.insert(tr.clouds.end(), obs.points.begin(), obs.points.end());

  std::vector<float> a(size_t(spec.action_dim));
  while (!s.done) {
    env.expert_action(s, a);
    if (noise) {
      for (int i = 0; i < spec.action_dim; ++i) {
        drift[i] = noise->rho * drift[i] + float(nrng.normal(0.0, double(noise->sigma)));
        a[i] = std::clamp(a[i] + drift[i], -1.0f, 1.0f);
      }
    }
    env.step(s, a);
    tr.actions.insert(tr.actions.end(), a.begin(), a.end());
    tr.rewards.push_back(s.dense_reward);
    obs = env.observe(s);
    tr.states.insert(tr.states.end(), obs.state.begin(), obs.state.end());
    tr.clouds.insert(tr.clouds.end(), obs.points.begin(), obs.points.end());
  }
  tr.T = s.t;
  tr.y_terminal = s.success ? 1 : 0;
  bool noiseless = !noise || noise->sigma == 0.0f;
  if (!s.success) {
    tr.quality = Quality::failed;
  } else {
    tr.quality = noiseless ? Quality::expert : Quality::imperfect_success;
  }
  return {std::move(tr), s.success};
}

}  // namespace

Dataset collect_expert(Task task, int n, uint64_t seed) {
  Env env(task);
  Dataset ds;
  ds.task = task;
  ds.seed = seed;
  uint64_t attempt = 0;
  for (int i = 0; i < n; ++i) {
    bool ok = false;
    for (int retry = 0; retry < 10; ++retry) {
      uint64_t ep_seed = Rng::substream(seed, "episode", attempt).next_u64();
      ++attempt;
      EpisodeRecord rec = roll_episode(env, ep_seed, nullptr, 0);
      if (rec.success) {
        ds.trajs.push_back(std::move(rec.tr));
        ok = true;
        break;
      }
    }
    if (!ok) {
      throw std::runtime_error("expert failed 10 consecutive episodes on task " +
                               task_name(task));
    }
  }
  return ds;
}

Dataset collect_mixed(Task task, int n, uint64_t seed, DriftNoise noise) {
  Env env(task);
  Dataset ds;
  ds.task = task;
  ds.seed = seed;
  for (int i = 0; i < n; ++i) {
    uint64_t ep_seed = Rng::substream(seed, "episode", uint64_t(i)).next_u64();
    uint64_t noise_seed = Rng::substream(seed, "episode_noise", uint64_t(i)).next_u64();
    EpisodeRecord rec = roll_episode(env, ep_seed, &noise, noise_seed);
    ds.trajs.push_back(std::move(rec.tr));
  }
  return ds;
}

// ---- serialization ----

namespace {

using Sink = std::function<void(const void*, size_t)>;

template <typename T>
void sput(const Sink& sink, T v) {
  sink(&v, sizeof(T));
}

void serialize_dataset(const Dataset& ds, const Sink& sink) {
  sink(kTrajMagic, sizeof(kTrajMagic));
  sput<uint32_t>(sink, kTrajVersion);
  std::string tn = task_name(ds.task);
  sput<uint16_t>(sink, uint16_t(tn.size()));
  sink(tn.data(), tn.size());
  sput<uint32_t>(sink, uint32_t(ds.trajs.size()));
  for (const auto& tr : ds.trajs) {
    sput<uint32_t>(sink, uint32_t(tr.T));
    sput<uint32_t>(sink, uint32_t(tr.action_dim));
    sput<uint32_t>(sink, uint32_t(tr.num_points));
    sput<uint32_t>(sink, uint32_t(tr.state_dim));
    sput<uint8_t>(sink, tr.y_terminal);
    sput<uint8_t>(sink, uint8_t(tr.quality));
    sink(tr.states.data(), tr.states.size() * sizeof(float));
    sink(tr.clouds.data(), tr.clouds.size() * sizeof(float));
    sink(tr.actions.data(), tr.actions.size() * sizeof(float));
    sink(tr.rewards.data(), tr.rewards.size() * sizeof(float));
  }
}

}  // namespace

uint64_t Dataset::content_hash() const {
  uint64_t h = 0xCBF29CE484222325ull;
  serialize_dataset(*this, [&h](const void* p, size_t n) { h = fnv1a64(p, n, h); });
  return h;
}

void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  serialize_dataset(ds, [&f](const void* p, size_t n) {
    f.write(static_cast<const char*>(p), std::streamsize(n));
  });
  if (!f) throw std::runtime_error("write failed: " + path);
  f.close();

  nlohmann::json meta;
  meta["task"] = task_name(ds.task);
  meta["count"] = ds.trajs.size();
  meta["expert"] = ds.count(Quality::expert);
  meta["imperfect_success"] = ds.count(Quality::imperfect_success);
  meta["failed"] = ds.count(Quality::failed);
  meta["frames"] = ds.total_frames();
  meta["seed"] = ds.seed;
  char hex[32];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(ds.config_hash));
  meta["config_hash"] = std::string(hex);
  meta["split"] = ds.split;
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(ds.content_hash()));
  meta["content_hash"] = std::string(hex);
  meta["format_version"] = kTrajVersion;
  std::ofstream mf(path + ".meta.json", std::ios::trunc);
  if (!mf) throw std::runtime_error("cannot open for write: " + path + ".meta.json");
  mf << meta.dump(2) << "\n";
}

Dataset load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open dataset: " + path);
  auto need = [&](void* p, size_t n) {
    f.read(static_cast<char*>(p), std::streamsize(n));
    if (!f) throw std::runtime_error("truncated dataset: " + path);
  };
  char magic[sizeof(kTrajMagic)];
  need(magic, sizeof(magic));
  if (std::memcmp(magic, kTrajMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("bad dataset magic: " + path);
  }
  uint32_t version;
  need(&version, 4);
  if (version != kTrajVersion) {
    throw std::runtime_error("unsupported dataset version " + std::to_string(version));
  }
  uint16_t tn_len;
  need(&tn_len, 2);
  std::string tn(tn_len, '\0');
  need(tn.data(), tn_len);
  Dataset ds;
  ds.task = task_from_name(tn);
  uint32_t count;
  need(&count, 4);
  const TaskSpec& spec = task_spec(ds.task);
  for (uint32_t i = 0; i < count; ++i) {
    Trajectory tr;
    uint32_t T, A, P, S;
    need(&T, 4);
    need(&A, 4);
    need(&P, 4);
    need(&S, 4);
    if (T == 0 || T > 100000 || int(A) != spec.action_dim || int(P) != spec.num_points ||
        int(S) != spec.state_dim) {
      throw std::runtime_error("corrupt trajectory header in: " + path);
    }
    tr.T = int(T);
    tr.action_dim = int(A);
    tr.num_points = int(P);
    tr.state_dim = int(S);
    uint8_t y, q;
    need(&y, 1);
    need(&q, 1);
    if (q > 2) throw std::runtime_error("corrupt quality tag in: " + path);
    tr.y_terminal = y;
    tr.quality = Quality(q);
    tr.states.resize(size_t(T + 1) * S);
    tr.clouds.resize(size_t(T + 1) * P * 3);
    tr.actions.resize(size_t(T) * A);
    tr.rewards.resize(T);
    need(tr.states.data(), tr.states.size() * sizeof(float));
    need(tr.clouds.data(), tr.clouds.size() * sizeof(float));
    need(tr.actions.data(), tr.actions.size() * sizeof(float));
    need(tr.rewards.data(), tr.rewards.size() * sizeof(float));
    ds.trajs.push_back(std::move(tr));
  }
  f.peek();
  if (!f.eof()) throw std::runtime_error("trailing bytes in dataset: " + path);
  return ds;
}

// ---- chunking ----

std::vector<float> mc_targets(const Trajectory& tr, float gamma) {
  std::vector<float> y(size_t(tr.T) + 1);
  for (int t = 0; t <= tr.T; ++t) {
    y[size_t(t)] = float(std::pow(double(gamma), double(tr.T - t))) * float(tr.y_terminal);
  }
  return y;
}

std::vector<ChunkRef> all_chunk_starts(const Dataset& ds, int stride) {
  if (stride < 1) throw std::invalid_argument("stride must be >= 1");
  std::vector<ChunkRef> out;
  for (int i = 0; i < int(ds.trajs.size()); ++i) {
    for (int t = 0; t < ds.trajs[size_t(i)].T; t += stride) out.push_back({i, t});
  }
  return out;
}

ChunkBatch gather_chunk_batch(const Dataset& ds, std::span<const ChunkRef> refs,
                              const ChunkingConfig& cfg, float gamma) {
  if (refs.empty()) throw std::invalid_argument("empty chunk batch");
  if (cfg.n_obs != 2) throw std::invalid_argument("only n_obs=2 is supported");
  const TaskSpec& spec = task_spec(ds.task);
  int B = int(refs.size());
  int P = spec.num_points, A = spec.action_dim, S = spec.state_dim, k = cfg.chunk;

  std::vector<float> cp(size_t(B) * P * 3), cc(size_t(B) * P * 3), cf(size_t(B) * P * 3);
  std::vector<float> sp(size_t(B) * S), sc(size_t(B) * S), sf(size_t(B) * S);
  std::vector<float> ch(size_t(B) * k * A), yv(static_cast<size_t>(B));
  std::vector<uint8_t> padded(size_t(B), 0);

  for (int b = 0; b < B; ++b) {
    const ChunkRef& r = refs[size_t(b)];
    const Trajectory& tr = ds.trajs.at(size_t(r.traj));
    if (r.t < 0 || r.t >= tr.T) throw std::out_of_range("chunk start out of range");
    int tprev = std::max(r.t - 1, 0);  // first frame duplicated at episode start
    auto copy_frame = [&](int t, float* cloud_dst, float* state_dst) {
      auto cl = tr.cloud_at(t);
      auto st = tr.state_at(t);
      std::memcpy(cloud_dst, cl.data(), cl.size() * sizeof(float));
      std::memcpy(state_dst, st.data(), st.size() * sizeof(float));
    };
    copy_frame(tprev, cp.data() + size_t(b) * P * 3, sp.data() + size_t(b) * S);
    copy_frame(r.t, cc.data() + size_t(b) * P * 3, sc.data() + size_t(b) * S);
    for (int j = 0; j < k; ++j) {
      int ta = r.t + j;
      if (ta >= tr.T) {
        ta = tr.T - 1;
        padded[size_t(b)] = 1;
      }
      auto av = tr.action_at(ta);
      std::memcpy(ch.data() + (size_t(b) * k + j) * A, av.data(), av.size() * sizeof(float));
    }
    int tf = std::min(r.t + k, tr.T);
    copy_frame(tf, cf.data() + size_t(b) * P * 3, sf.data() + size_t(b) * S);
    yv[size_t(b)] =
        float(std::pow(double(gamma), double(tr.T - r.t))) * float(tr.y_terminal);
  }

  ChunkBatch out;
  out.cloud_prev = Tensor::from({B * P, 3}, std::move(cp));
  out.cloud_cur = Tensor::from({B * P, 3}, std::move(cc));
  out.state_prev = Tensor::from({B, S}, std::move(sp));
  out.state_cur = Tensor::from({B, S}, std::move(sc));
  out.chunk = Tensor::from({B, k * A}, std::move(ch));
  out.cloud_future = Tensor::from({B * P, 3}, std::move(cf));
  out.state_future = Tensor::from({B, S}, std::move(sf));
  out.y = Tensor::from({B, 1}, std::move(yv));
  out.padded = std::move(padded);
  return out;
}

}  // namespace dalir
