#include "dalir/policy.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "dalir/checkpoint.hpp"

namespace dalir {

std::vector<double> ddpm_alpha_bars(int n) {
  if (n < 1) throw std::invalid_argument("diffusion steps must be >= 1");
  constexpr double s = 0.008;
  auto f = [&](double x) {
    double c = std::cos((x + s) / (1.0 + s) * M_PI / 2.0);
    return c * c;
  };
  std::vector<double> ab(size_t(n) + 1);
  double f0 = f(0.0);
  ab[0] = 1.0;
  for (int i = 1; i <= n; ++i) ab[size_t(i)] = f(double(i) / double(n)) / f0;
  return ab;
}

void time_embedding(float tau, std::span<float> out) {
  if (out.size() != kTimeEmbDim) throw std::invalid_argument("time embedding must be 16-dim");
  for (int i = 0; i < kTimeEmbDim / 2; ++i) {
    double w = 2.0 * M_PI * double(1 << i);
    out[size_t(2 * i)] = float(std::sin(w * double(tau)));
    out[size_t(2 * i + 1)] = float(std::cos(w * double(tau)));
  }
}

namespace {

Tensor he_init(Shape shape, Rng& rng) {
  float fan_in = float(shape[0]);
  return Tensor::randn(shape, rng, std::sqrt(2.0f / fan_in), true);
}

Tensor out_init(Shape shape, Rng& rng) {
  float fan_in = float(shape[0]);
  return Tensor::randn(shape, rng, std::sqrt(1.0f / fan_in), true);
}

}  // namespace

Policy::Policy(Task task, PolicyConfig cfg, uint64_t seed)
    : task_(task), spec_(task_spec(task)), cfg_(cfg) {
  if (cfg_.backbone != "fm" && cfg_.backbone != "dp") {
    throw std::invalid_argument("policy backbone must be 'fm' or 'dp', got " + cfg_.backbone);
  }
  if (cfg_.n_obs != 2) throw std::invalid_argument("only n_obs=2 is supported");
  Rng rng = Rng::substream(seed, "policy_init");
  const auto& e = cfg_.enc;
  int h = e.point_hidden, S = spec_.state_dim;
  int kA = chunk_width();
  int in = kA + kTimeEmbDim + e.obs_feat;
  int H = cfg_.head_hidden;

  params_.add("enc/point/w1", he_init({3, h}, rng));
  params_.add("enc/point/b1", Tensor::zeros({h}, true));
  params_.add("enc/point/w2", he_init({h, h}, rng));
  params_.add("enc/point/b2", Tensor::zeros({h}, true));
  params_.add("enc/point/proj_w", out_init({h, e.cloud_feat}, rng));
  params_.add("enc/point/proj_b", Tensor::zeros({e.cloud_feat}, true));
  params_.add("enc/state/w1", he_init({S, e.state_feat}, rng));
  params_.add("enc/state/b1", Tensor::zeros({e.state_feat}, true));
  params_.add("enc/state/w2", out_init({e.state_feat, e.state_feat}, rng));
  params_.add("enc/state/b2", Tensor::zeros({e.state_feat}, true));
  params_.add("enc/stack/w", out_init({2 * frame_dim(), e.obs_feat}, rng));
  params_.add("enc/stack/b", Tensor::zeros({e.obs_feat}, true));
  params_.add("head/w1", he_init({in, H}, rng));
  params_.add("head/b1", Tensor::zeros({H}, true));
  params_.add("head/w2", he_init({H, H}, rng));
  params_.add("head/b2", Tensor::zeros({H}, true));
  params_.add("head/w3", out_init({H, kA}, rng));
  params_.add("head/b3", Tensor::zeros({kA}, true));

  opt_ = std::make_unique<AdamW>(
      params_.tensors(),
      AdamWConfig{cfg_.lr, 0.9f, 0.999f, 1e-8f, cfg_.weight_decay});
  alpha_bars_ = ddpm_alpha_bars(cfg_.diffusion_steps);
}

Tensor Policy::point_features(const Tensor& clouds) const {
  const auto* w1 = params_.find("enc/point/w1");
  auto h1 = gelu(linear(clouds, *w1, *params_.find("enc/point/b1")));
  return gelu(linear(h1, *params_.find("enc/point/w2"), *params_.find("enc/point/b2")));
}

Tensor Policy::frame_from_pooled(const Tensor& pooled, const Tensor& states) const {
  auto cloud_feat =
      linear(pooled, *params_.find("enc/point/proj_w"), *params_.find("enc/point/proj_b"));
  auto s1 = gelu(linear(states, *params_.find("enc/state/w1"), *params_.find("enc/state/b1")));
  auto state_feat = linear(s1, *params_.find("enc/state/w2"), *params_.find("enc/state/b2"));
  return concat_lastdim({state_feat, cloud_feat});
}

Tensor Policy::frame_features(const Tensor& clouds, const Tensor& states) const {
  int rows = clouds.dim(0);
  int b = states.dim(0);
  if (rows % b != 0) throw std::invalid_argument("cloud rows not a multiple of batch");
  auto feats = point_features(clouds);
  auto pooled = maxpool_groups(feats, rows / b);
  return frame_from_pooled(pooled, states);
}

Tensor Policy::obs_latent(const Tensor& prev_frame, const Tensor& cur_frame) const {
  auto cat = concat_lastdim({prev_frame, cur_frame});
  return linear(cat, *params_.find("enc/stack/w"), *params_.find("enc/stack/b"));
}

Tensor Policy::head_forward(const Tensor& x, const Tensor& temb, const Tensor& z) const {
  auto in = concat_lastdim({x, temb, z});
  auto h1 = gelu(linear(in, *params_.find("head/w1"), *params_.find("head/b1")));
  auto h2 = gelu(linear(h1, *params_.find("head/w2"), *params_.find("head/b2")));
  return linear(h2, *params_.find("head/w3"), *params_.find("head/b3"));
}

namespace {

Tensor tile_time_embedding(float tau, int rows) {
  std::vector<float> buf(size_t(rows) * kTimeEmbDim);
  float one[kTimeEmbDim];
  time_embedding(tau, one);
  for (int r = 0; r < rows; ++r) {
    std::copy(one, one + kTimeEmbDim, buf.begin() + size_t(r) * kTimeEmbDim);
  }
  return Tensor::from({rows, kTimeEmbDim}, std::move(buf));
}

Tensor clip_unit(const Tensor& x) {
  std::vector<float> v(x.data().begin(), x.data().end());
  for (auto& f : v) f = std::clamp(f, -1.0f, 1.0f);
  return Tensor::from(x.shape(), std::move(v));
}

}  // namespace

Tensor Policy::sample_chunks(const Tensor& z, Rng& rng) const {
  NoGrad ng;
  int N = z.dim(0);
  int kA = chunk_width();
  Tensor x = Tensor::randn({N, kA}, rng);
  if (cfg_.backbone == "fm") {
    float dt = 1.0f / float(cfg_.nfe);
    for (int i = 0; i < cfg_.nfe; ++i) {
      float tau = float(i) * dt;
      auto v = head_forward(x, tile_time_embedding(tau, N), z);
      x = add(x, scale(v, dt));
    }
    return clip_unit(x);
  }
  // DDIM over an evenly spaced subsequence of the training schedule
  int N_diff = cfg_.diffusion_steps;
  int S = std::min(cfg_.ddim_steps, N_diff);
  std::vector<int> sched(size_t(S) + 1);
  for (int j = 0; j <= S; ++j) {
    sched[size_t(j)] = int(std::lround(double(N_diff) * (1.0 - double(j) / double(S))));
  }
  sched.front() = N_diff;
  sched.back() = 0;
  for (int j = 0; j < S; ++j) {
    int hi = sched[size_t(j)], lo = sched[size_t(j) + 1];
    double ab_hi = alpha_bars_[size_t(hi)], ab_lo = alpha_bars_[size_t(lo)];
    auto eps = head_forward(x, tile_time_embedding(float(hi) / float(N_diff), N), z);
    auto x0est = scale(sub(x, scale(eps, float(std::sqrt(1.0 - ab_hi)))),
                       float(1.0 / std::sqrt(ab_hi)));
    x = add(scale(x0est, float(std::sqrt(ab_lo))),
            scale(eps, float(std::sqrt(1.0 - ab_lo))));
  }
  return clip_unit(x);
}

Tensor Policy::encode_batch_latent(const ChunkBatch& b) const {
  auto prev = frame_features(b.cloud_prev, b.state_prev);
  auto cur = frame_features(b.cloud_cur, b.state_cur);
  return obs_latent(prev, cur);
}

float Policy::train_step(const ChunkBatch& batch, Rng& rng) {
  int B = batch.chunk.dim(0);
  int kA = chunk_width();
  opt_->zero_grad();
  auto z = encode_batch_latent(batch);
  auto chunk_data = batch.chunk.data();

  Tensor loss;
  if (cfg_.backbone == "fm") {
    std::vector<float> xt(size_t(B) * kA), target(size_t(B) * kA),
        temb(size_t(B) * kTimeEmbDim);
    for (int b = 0; b < B; ++b) {
      float tau = float(rng.uniform());
      float emb[kTimeEmbDim];
      time_embedding(tau, emb);
      std::copy(emb, emb + kTimeEmbDim, temb.begin() + size_t(b) * kTimeEmbDim);
      for (int j = 0; j < kA; ++j) {
        float x1 = chunk_data[size_t(b) * kA + j];
        float x0 = float(rng.normal());
        xt[size_t(b) * kA + j] = ot_interpolate(x0, x1, tau);
        target[size_t(b) * kA + j] = ot_velocity_target(x0, x1);
      }
    }
    auto pred = head_forward(Tensor::from({B, kA}, std::move(xt)),
                             Tensor::from({B, kTimeEmbDim}, std::move(temb)), z);
    loss = mse_loss(pred, Tensor::from({B, kA}, std::move(target)));
  } else {
    int N_diff = cfg_.diffusion_steps;
    std::vector<float> xn(size_t(B) * kA), target(size_t(B) * kA),
        temb(size_t(B) * kTimeEmbDim);
    for (int b = 0; b < B; ++b) {
      int n = 1 + int(rng.below(uint64_t(N_diff)));
      double ab = alpha_bars_[size_t(n)];
      float emb[kTimeEmbDim];
      time_embedding(float(n) / float(N_diff), emb);
      std::copy(emb, emb + kTimeEmbDim, temb.begin() + size_t(b) * kTimeEmbDim);
      for (int j = 0; j < kA; ++j) {
        float x1 = chunk_data[size_t(b) * kA + j];
        float eps = float(rng.normal());
        xn[size_t(b) * kA + j] = float(std::sqrt(ab)) * x1 + float(std::sqrt(1.0 - ab)) * eps;
        target[size_t(b) * kA + j] = eps;
      }
    }
    auto pred = head_forward(Tensor::from({B, kA}, std::move(xn)),
                             Tensor::from({B, kTimeEmbDim}, std::move(temb)), z);
    loss = mse_loss(pred, Tensor::from({B, kA}, std::move(target)));
  }
  float lv = loss.item();
  backward(loss);
  opt_->step();
  return lv;
}

void Policy::train(const Dataset& expert_data, uint64_t seed,
                   const std::function<void(int, float)>& progress) {
  if (expert_data.task != task_) {
    throw std::invalid_argument("dataset task " + task_name(expert_data.task) +
                                " does not match policy task " + task_name(task_));
  }
  for (const auto& tr : expert_data.trajs) {
    if (tr.quality != Quality::expert) {
      throw std::runtime_error(
          "policy training requires expert-only data; found a trajectory with quality '" +
          quality_name(tr.quality) + "'");
    }
  }
  if (expert_data.trajs.empty()) throw std::invalid_argument("empty expert dataset");

  auto starts = all_chunk_starts(expert_data);
  Rng rng = Rng::substream(seed, "policy_train");
  ChunkingConfig ck{cfg_.n_obs, cfg_.chunk};
  size_t cursor = starts.size();
  std::vector<ChunkRef> order = starts;
  for (int step = 0; step < cfg_.train_steps; ++step) {
    std::vector<ChunkRef> refs;
    refs.reserve(size_t(cfg_.batch));
    for (int i = 0; i < cfg_.batch; ++i) {
      if (cursor >= order.size()) {
        for (size_t j = order.size(); j > 1; --j) {
          size_t pick = size_t(rng.below(j));
          std::swap(order[pick], order[j - 1]);
        }
        cursor = 0;
      }
      refs.push_back(order[cursor++]);
    }
    ChunkBatch batch = gather_chunk_batch(expert_data, refs, ck, 0.99f);
    float lv = train_step(batch, rng);
    if (progress) progress(step, lv);
  }
}

void Policy::save(const std::string& path) const {
  ParamMap out;
  for (const auto& [name, t] : params_.items) out.add(name, t);
  auto ps = opt_->params();
  for (size_t i = 0; i < ps.size(); ++i) {
    const std::string& name = params_.items[i].first;
    out.add("adam_m/" + name,
            Tensor::from(ps[i].shape(), opt_->moment1(i)));
    out.add("adam_v/" + name,
            Tensor::from(ps[i].shape(), opt_->moment2(i)));
  }
  out.add("adam/steps", Tensor::scalar(float(opt_->steps_done())));
  save_checkpoint(path, out);
}

void Policy::load(const std::string& path) {
  load_checkpoint_into(path, params_);
  ParamMap all = load_checkpoint(path);
  bool have_moments = true;
  for (const auto& [name, t] : params_.items) {
    if (!all.find("adam_m/" + name)) {
      have_moments = false;
      break;
    }
  }
  if (have_moments && all.find("adam/steps")) {
    for (size_t i = 0; i < params_.items.size(); ++i) {
      const std::string& name = params_.items[i].first;
      auto m = all.find("adam_m/" + name)->data();
      auto v = all.find("adam_v/" + name)->data();
      std::copy(m.begin(), m.end(), opt_->moment1(i).begin());
      std::copy(v.begin(), v.end(), opt_->moment2(i).begin());
    }
    opt_->set_steps_done(int64_t(all.find("adam/steps")->item()));
  }
}

}  // namespace dalir
