#include "dalir/rerank.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace dalir {

std::string rerank_method_name(RerankMethod m) {
  switch (m) {
    case RerankMethod::none: return "none";
    case RerankMethod::latent: return "latent";
    case RerankMethod::obs_noise: return "obs_noise";
    case RerankMethod::random_shooting: return "random_shooting";
    case RerankMethod::cem: return "cem";
    case RerankMethod::mppi: return "mppi";
    case RerankMethod::grad_ascent: return "grad_ascent";
    case RerankMethod::oracle: return "oracle";
  }
  throw std::invalid_argument("unknown rerank method enum");
}

RerankMethod rerank_method_from_name(const std::string& name) {
  for (RerankMethod m :
       {RerankMethod::none, RerankMethod::latent, RerankMethod::obs_noise,
        RerankMethod::random_shooting, RerankMethod::cem, RerankMethod::mppi,
        RerankMethod::grad_ascent, RerankMethod::oracle}) {
    if (rerank_method_name(m) == name) return m;
  }
  throw std::invalid_argument("unknown rerank method: " + name);
}

DropoutDraw dropout_indices(int num_points, float p_drop, float min_keep_frac, Rng& rng) {
  if (p_drop < 0.0f || p_drop >= 1.0f) {
    throw std::invalid_argument("p_drop must be in [0,1)");
  }
  int min_keep = int(std::ceil(double(min_keep_frac) * num_points));
  min_keep = std::max(min_keep, 1);
  DropoutDraw draw;
  for (int attempt = 0;; ++attempt) {
    if (attempt >= 10000) {
      throw std::runtime_error("dropout_indices: min_keep_frac is unreachable at this p_drop");
    }
    draw.indices.clear();
    for (int i = 0; i < num_points; ++i) {
      if (!rng.bernoulli(double(p_drop))) draw.indices.push_back(i);
    }
    if (int(draw.indices.size()) >= min_keep) break;
  }
  draw.n_kept = int(draw.indices.size());
  while (int(draw.indices.size()) < num_points) {
    draw.indices.push_back(draw.indices[size_t(rng.below(uint64_t(draw.n_kept)))]);
  }
  return draw;
}

namespace {

Tensor tile_rows(const Tensor& row, int n) {
  int d = row.dim(-1);
  auto rv = row.data();
  std::vector<float> buf(size_t(n) * d);
  for (int i = 0; i < n; ++i) std::copy(rv.begin(), rv.end(), buf.begin() + size_t(i) * d);
  return Tensor::from({n, d}, std::move(buf));
}

Tensor obs_cloud(const Observation& o) {
  return Tensor::from({int(o.points.size() / 3), 3},
                      std::vector<float>(o.points.begin(), o.points.end()));
}

Tensor obs_state(const Observation& o) {
  return Tensor::from({1, int(o.state.size())},
                      std::vector<float>(o.state.begin(), o.state.end()));
}

int argmax_lowest(std::span<const float> v) {
  int best = 0;
  for (int i = 1; i < int(v.size()); ++i) {
    if (v[size_t(i)] > v[size_t(best)]) best = i;
  }
  return best;
}

// sigmoid(scorer(s + delta(s, chunk))) for each chunk row
std::vector<float> latent_scores(const Imagination& imag, const Tensor& s_row,
                                 const Tensor& chunks) {
  int n = chunks.dim(0);
  auto s = tile_rows(s_row, n);
  auto pred = imag.predict_next(s, chunks);
  auto p = sigmoid(imag.score_logit(pred));
  return std::vector<float>(p.data().begin(), p.data().end());
}

struct CommonCtx {
  Tensor prev_feat;  // [1, frame]
  Tensor s_row;      // [1, latent] imagination latent of the clean current obs
};

std::vector<float> sample_chunk_rows(const Policy& policy, const Tensor& z, Rng& rng, int row,
                                     std::vector<float>* all = nullptr) {
  Tensor chunks = policy.sample_chunks(z, rng);
  auto cd = chunks.data();
  int w = chunks.dim(1);
  if (all) all->assign(cd.begin(), cd.end());
  return std::vector<float>(cd.begin() + size_t(row) * w, cd.begin() + size_t(row + 1) * w);
}

}  // namespace

ChunkChoice select_chunk(const Policy& policy, const Imagination* imag, const RerankConfig& cfg,
                         const Observation& obs_prev, const Observation& obs_cur,
                         uint64_t decision_seed, const Env* env, const EnvState* state) {
  auto t0 = std::chrono::steady_clock::now();
  NoGrad ng;
  const RerankMethod m = cfg.method;
  bool needs_imag = m != RerankMethod::none && m != RerankMethod::oracle;
  if (needs_imag && !imag) {
    throw std::invalid_argument(rerank_method_name(m) + " reranking needs an imagination model");
  }
  if (m == RerankMethod::oracle && (!env || !state)) {
    throw std::invalid_argument("oracle reranking needs the environment and its state");
  }
  if (cfg.n_cand < 1) throw std::invalid_argument("n_cand must be >= 1");

  Rng rng_x0 = Rng::substream(decision_seed, "x0");
  Rng rng_pert = Rng::substream(decision_seed, "perturb");

  const int P = int(obs_cur.points.size() / 3);
  const int kA = policy.chunk_width();
  const int N = cfg.n_cand;

  Tensor cloud_prev = obs_cloud(obs_prev);
  Tensor state_prev = obs_state(obs_prev);
  Tensor cloud_cur = obs_cloud(obs_cur);
  Tensor state_cur = obs_state(obs_cur);

  Tensor prev_feat = policy.frame_features(cloud_prev, state_prev);

  ChunkChoice out;
  out.info.scores.clear();

  auto finish = [&](std::vector<float> chunk, DecisionInfo info) {
    auto t1 = std::chrono::steady_clock::now();
    info.latency_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    out.chunk = std::move(chunk);
    out.info = std::move(info);
    return out;
  };

  if (m == RerankMethod::none) {
    auto cur_feat = policy.frame_features(cloud_cur, state_cur);
    auto z = policy.obs_latent(prev_feat, cur_feat);
    DecisionInfo info;
    return finish(sample_chunk_rows(policy, z, rng_x0, 0), std::move(info));
  }

  if (m == RerankMethod::latent || m == RerankMethod::oracle || m == RerankMethod::obs_noise) {
    Tensor cur_frames;
    if (m == RerankMethod::obs_noise) {
      // candidate 0 clean, others with Gaussian coordinate noise
      std::vector<float> big(size_t(N) * P * 3);
      std::copy(obs_cur.points.begin(), obs_cur.points.end(), big.begin());
      for (int i = 1; i < N; ++i) {
        for (int j = 0; j < P * 3; ++j) {
          big[size_t(i) * P * 3 + j] =
              obs_cur.points[size_t(j)] + float(rng_pert.normal(0.0, double(cfg.sigma_o)));
        }
      }
      cur_frames = policy.frame_features(Tensor::from({N * P, 3}, std::move(big)),
                                         tile_rows(state_cur, N));
    } else {
      // dropout candidates reuse pointwise features: max over a survivor
      // subset equals encoding the dropped cloud
      Tensor fc = policy.point_features(cloud_cur);
      int h = fc.dim(1);
      std::vector<float> pooled(size_t(N) * h);
      for (int i = 0; i < N; ++i) {
        Tensor pr;
        if (i == 0) {
          pr = maxpool_groups(fc, P);
        } else {
          DropoutDraw draw = dropout_indices(P, cfg.p_drop, cfg.min_keep_frac, rng_pert);
          pr = rows_max(fc, draw.indices);
        }
        auto pv = pr.data();
        std::copy(pv.begin(), pv.end(), pooled.begin() + size_t(i) * h);
      }
      cur_frames =
          policy.frame_from_pooled(Tensor::from({N, h}, std::move(pooled)), tile_rows(state_cur, N));
    }
    auto z = policy.obs_latent(tile_rows(prev_feat, N), cur_frames);
    Tensor chunks = policy.sample_chunks(z, rng_x0);

    DecisionInfo info;
    if (m == RerankMethod::oracle) {
      info.scores.resize(size_t(N));
      auto cd = chunks.data();
      for (int i = 0; i < N; ++i) {
        EnvState sim = clone_state(*state);
        float last_r = 0.0f;
        bool succ = false;
        for (int j = 0; j < policy.config().chunk && !sim.done; ++j) {
          env->step(sim, std::span<const float>(cd.data() + size_t(i) * kA + j * env->spec().action_dim,
                                                size_t(env->spec().action_dim)));
          last_r = sim.dense_reward;
          succ = sim.success;
        }
        info.scores[size_t(i)] = (succ ? 1000.0f : 0.0f) + last_r;
      }
    } else {
      Tensor s_row = imag->encode(cloud_cur, state_cur);
      info.scores = latent_scores(*imag, s_row, chunks);
    }
    info.chosen = argmax_lowest(info.scores);
    info.base_score = info.scores[0];
    info.exec_score = info.scores[size_t(info.chosen)];
    auto cd = chunks.data();
    std::vector<float> chunk(cd.begin() + size_t(info.chosen) * kA,
                             cd.begin() + size_t(info.chosen + 1) * kA);
    return finish(std::move(chunk), std::move(info));
  }

  // action-space methods start from the clean base chunk
  auto cur_feat = policy.frame_features(cloud_cur, state_cur);
  auto z = policy.obs_latent(prev_feat, cur_feat);
  std::vector<float> a0 = sample_chunk_rows(policy, z, rng_x0, 0);
  Tensor s_row = imag->encode(cloud_cur, state_cur);
  const int A = policy.action_dim();
  const int gi = task_spec(policy.task()).grip_index;
  const int ksteps = policy.config().chunk;

  auto hold_grip = [&](std::vector<float>& c) {
    for (int j = 0; j < ksteps; ++j) c[size_t(j) * A + gi] = a0[size_t(j) * A + gi];
  };
  auto clip = [](std::vector<float>& c) {
    for (auto& v : c) v = std::clamp(v, -1.0f, 1.0f);
  };
  auto score_many = [&](const std::vector<float>& flat, int n) {
    return latent_scores(*imag, s_row, Tensor::from({n, kA}, flat));
  };

  if (m == RerankMethod::random_shooting || m == RerankMethod::mppi) {
    std::vector<float> cands(size_t(N) * kA);
    std::copy(a0.begin(), a0.end(), cands.begin());
    for (int i = 1; i < N; ++i) {
      std::vector<float> c(kA);
      for (int j = 0; j < kA; ++j) {
        c[size_t(j)] = a0[size_t(j)] + float(rng_pert.normal(0.0, double(cfg.sigma_a)));
      }
      hold_grip(c);
      clip(c);
      std::copy(c.begin(), c.end(), cands.begin() + size_t(i) * kA);
    }
    DecisionInfo info;
    info.scores = score_many(cands, N);
    info.base_score = info.scores[0];
    std::vector<float> chosen_chunk;
    if (m == RerankMethod::random_shooting) {
      int best = argmax_lowest(info.scores);
      info.chosen = info.scores[size_t(best)] > info.scores[0] ? best : 0;
      chosen_chunk.assign(cands.begin() + size_t(info.chosen) * kA,
                          cands.begin() + size_t(info.chosen + 1) * kA);
      info.exec_score = info.scores[size_t(info.chosen)];
    } else {
      // softmax(beta * score) average; very large beta degenerates to argmax
      std::vector<float> mix(size_t(kA), 0.0f);
      if (cfg.mppi_beta >= cfg.mppi_beta_max) {
        int best = argmax_lowest(info.scores);
        std::copy(cands.begin() + size_t(best) * kA, cands.begin() + size_t(best + 1) * kA,
                  mix.begin());
        info.chosen = best;
      } else {
        double mx = *std::max_element(info.scores.begin(), info.scores.end());
        double den = 0.0;
        std::vector<double> w(static_cast<size_t>(N));
        for (int i = 0; i < N; ++i) {
          w[size_t(i)] = std::exp(double(cfg.mppi_beta) * (double(info.scores[size_t(i)]) - mx));
          den += w[size_t(i)];
        }
        for (int i = 0; i < N; ++i) {
          double wi = w[size_t(i)] / den;
          for (int j = 0; j < kA; ++j) mix[size_t(j)] += float(wi * double(cands[size_t(i) * kA + j]));
        }
        info.chosen = argmax_lowest(info.scores);
      }
      hold_grip(mix);
      clip(mix);
      float mix_score = score_many(mix, 1)[0];
      if (mix_score > info.scores[0]) {
        chosen_chunk = mix;
        info.exec_score = mix_score;
      } else {
        chosen_chunk = a0;
        info.exec_score = info.scores[0];
      }
    }
    return finish(std::move(chosen_chunk), std::move(info));
  }

  if (m == RerankMethod::cem) {
    std::vector<float> mean = a0;
    std::vector<float> sigma(size_t(kA), cfg.sigma_a);
    for (int j = 0; j < ksteps; ++j) sigma[size_t(j) * A + gi] = 0.0f;
    int elites = std::clamp(cfg.cem_elites, 1, N);
    DecisionInfo info;
    for (int it = 0; it < cfg.cem_iters; ++it) {
      std::vector<float> cands(size_t(N) * kA);
      std::copy(mean.begin(), mean.end(), cands.begin());
      for (int i = 1; i < N; ++i) {
        std::vector<float> c(kA);
        for (int j = 0; j < kA; ++j) {
          c[size_t(j)] = mean[size_t(j)] + sigma[size_t(j)] * float(rng_pert.normal());
        }
        hold_grip(c);
        clip(c);
        std::copy(c.begin(), c.end(), cands.begin() + size_t(i) * kA);
      }
      auto scores = score_many(cands, N);
      std::vector<int> order(static_cast<size_t>(N));
      for (int i = 0; i < N; ++i) order[size_t(i)] = i;
      std::stable_sort(order.begin(), order.end(),
                       [&](int a, int b) { return scores[size_t(a)] > scores[size_t(b)]; });
      for (int j = 0; j < kA; ++j) {
        double mu = 0.0;
        for (int e = 0; e < elites; ++e) mu += cands[size_t(order[size_t(e)]) * kA + j];
        mu /= elites;
        double var = 0.0;
        for (int e = 0; e < elites; ++e) {
          double d = cands[size_t(order[size_t(e)]) * kA + j] - mu;
          var += d * d;
        }
        mean[size_t(j)] = float(mu);
        sigma[size_t(j)] = float(std::sqrt(var / elites));
      }
      hold_grip(mean);
      clip(mean);
      info.scores = scores;  // last iteration's population scores
    }
    float base_score = score_many(a0, 1)[0];
    float mean_score = score_many(mean, 1)[0];
    info.base_score = base_score;
    std::vector<float> chosen_chunk;
    if (mean_score > base_score) {
      chosen_chunk = mean;
      info.exec_score = mean_score;
      info.chosen = -1;  // refit mean, not a population member
    } else {
      chosen_chunk = a0;
      info.exec_score = base_score;
      info.chosen = 0;
    }
    return finish(std::move(chosen_chunk), std::move(info));
  }

  if (m == RerankMethod::grad_ascent) {
    std::vector<float> base = a0;
    float base_score = score_many(a0, 1)[0];
    Tensor a0_t = Tensor::from({1, kA}, std::vector<float>(a0.begin(), a0.end()));

    auto objective = [&](const std::vector<float>& c) {
      auto a = Tensor::from({1, kA}, std::vector<float>(c.begin(), c.end()));
      auto pred = imag->predict_next(s_row, a);
      auto p = sigmoid(imag->score_logit(pred));
      auto dev = sub(a, a0_t);
      return sub(mean_all(p), scale(sum_all(mul(dev, dev)), cfg.ga_mu)).item();
    };

    std::vector<float> cur = a0;
    float j_cur = objective(cur);
    for (int it = 0; it < cfg.ga_steps; ++it) {
      std::vector<float> grad(static_cast<size_t>(kA));
      {
        EnableGrad eg;
        Tensor leaf = Tensor::from({1, kA}, std::vector<float>(cur.begin(), cur.end()), true);
        auto pred = imag->predict_next(s_row, leaf);
        auto p = sigmoid(imag->score_logit(pred));
        auto dev = sub(leaf, a0_t);
        auto obj = sub(mean_all(p), scale(sum_all(mul(dev, dev)), cfg.ga_mu));
        backward(obj);
        auto g = leaf.grad();
        std::copy(g.begin(), g.end(), grad.begin());
      }
      float eta = cfg.ga_step_size;
      bool accepted = false;
      for (int half = 0; half < 5 && !accepted; ++half) {
        std::vector<float> prop(cur);
        for (int j = 0; j < kA; ++j) prop[size_t(j)] += eta * grad[size_t(j)];
        hold_grip(prop);
        clip(prop);
        float j_new = objective(prop);
        if (j_new > j_cur) {
          cur = std::move(prop);
          j_cur = j_new;
          accepted = true;
        }
        eta *= 0.5f;
      }
      if (!accepted) break;
    }
    DecisionInfo info;
    float cur_score = score_many(cur, 1)[0];
    info.base_score = base_score;
    info.scores = {base_score, cur_score};
    std::vector<float> chosen_chunk;
    if (cur_score > base_score) {
      chosen_chunk = cur;
      info.exec_score = cur_score;
      info.chosen = 1;
    } else {
      chosen_chunk = base;
      info.exec_score = base_score;
      info.chosen = 0;
    }
    return finish(std::move(chosen_chunk), std::move(info));
  }

  throw std::logic_error("unhandled rerank method");
}

EpisodeResult run_episode(const Env& env, const Policy& policy, const Imagination* imag,
                          const RerankConfig& cfg, uint64_t episode_seed) {
  EnvState s = env.reset(episode_seed);
  Observation prev = env.observe(s);
  Observation cur = prev;
  EpisodeResult result;
  int decision_idx = 0;
  const int k = policy.config().chunk;
  const int A = env.spec().action_dim;
  while (!s.done) {
    uint64_t dseed = Rng::substream(episode_seed, "decide", uint64_t(decision_idx)).next_u64();
    ChunkChoice choice = select_chunk(policy, imag, cfg, prev, cur, dseed, &env, &s);
    result.decisions.push_back(choice.info);
    for (int j = 0; j < k && !s.done; ++j) {
      env.step(s, std::span<const float>(choice.chunk.data() + size_t(j) * A, size_t(A)));
      prev = std::move(cur);
      cur = env.observe(s);
    }
    ++decision_idx;
  }
  result.success = s.success;
  result.steps = s.t;
  result.final_reward = s.dense_reward;
  return result;
}

}  // namespace dalir
