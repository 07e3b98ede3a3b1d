#include <cmath>
#include <cstring>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "dalir/policy.hpp"
#include "dalir/trajectory.hpp"
#include "doctest.h"

using namespace dalir;
namespace fs = std::filesystem;

namespace {

PolicyConfig tiny_cfg(const std::string& backbone) {
  PolicyConfig cfg;
  cfg.backbone = backbone;
  cfg.enc.point_hidden = 32;
  cfg.enc.cloud_feat = 16;
  cfg.enc.state_feat = 8;
  cfg.enc.obs_feat = 24;
  cfg.head_hidden = 32;
  cfg.train_steps = 60;
  cfg.batch = 8;
  return cfg;
}

void zero_head_output(Policy& p) {
  for (const char* name : {"head/w3", "head/b3"}) {
    Tensor* t = p.params().find(name);
    REQUIRE(t != nullptr);
    std::fill(t->mutable_data().begin(), t->mutable_data().end(), 0.0f);
  }
}

Tensor latent_for(const Env& env, const Policy& p, uint64_t seed) {
  EnvState s = env.reset(seed);
  Observation o = env.observe(s);
  Tensor cloud = Tensor::from({env.spec().num_points, 3}, o.points);
  Tensor state = Tensor::from({1, env.spec().state_dim}, o.state);
  Tensor f = p.frame_features(cloud, state);
  return p.obs_latent(f, f);
}

}  // namespace

TEST_CASE("flow construction endpoints") {
  CHECK(ot_interpolate(-0.3f, 0.8f, 0.0f) == -0.3f);
  CHECK(ot_interpolate(-0.3f, 0.8f, 1.0f) == 0.8f);
  CHECK(ot_interpolate(-0.3f, 0.8f, 0.5f) == doctest::Approx(0.25f));
  CHECK(ot_velocity_target(-0.3f, 0.8f) == doctest::Approx(1.1f));
}

TEST_CASE("noise schedule matches the cosine form") {
  int N = 50;
  auto ab = ddpm_alpha_bars(N);
  REQUIRE(ab.size() == size_t(N) + 1);
  CHECK(ab[0] == 1.0);
  constexpr double s = 0.008;
  double f0 = std::cos(s / (1.0 + s) * M_PI / 2.0);
  f0 *= f0;
  for (int i = 1; i <= N; ++i) {
    double c = std::cos((double(i) / N + s) / (1.0 + s) * M_PI / 2.0);
    CHECK(ab[size_t(i)] == doctest::Approx(c * c / f0).epsilon(1e-12));
    CHECK(ab[size_t(i)] < ab[size_t(i) - 1]);
    CHECK(ab[size_t(i)] >= 0.0);
  }
  CHECK_THROWS_AS(ddpm_alpha_bars(0), std::invalid_argument);
}

TEST_CASE("time embedding is sinusoidal and bounded") {
  float e[kTimeEmbDim];
  time_embedding(0.0f, e);
  for (int i = 0; i < kTimeEmbDim / 2; ++i) {
    CHECK(e[2 * i] == doctest::Approx(0.0));
    CHECK(e[2 * i + 1] == doctest::Approx(1.0));
  }
  time_embedding(0.37f, e);
  for (float v : e) {
    CHECK(v >= -1.0f);
    CHECK(v <= 1.0f);
  }
  CHECK(e[0] == doctest::Approx(std::sin(2.0 * M_PI * 0.37)).epsilon(1e-5));
  std::vector<float> short_buf(4);
  CHECK_THROWS_AS(time_embedding(0.1f, short_buf), std::invalid_argument);
}

TEST_CASE("config validation") {
  CHECK_THROWS_AS(Policy(Task::reach, [] (){ auto c = tiny_cfg("vae"); return c; }(), 1),
                  std::invalid_argument);
  auto c = tiny_cfg("fm");
  c.n_obs = 1;
  CHECK_THROWS_AS(Policy(Task::reach, c, 1), std::invalid_argument);
}

TEST_CASE("same seed builds identical policies") {
  Policy a(Task::reach, tiny_cfg("fm"), 5);
  Policy b(Task::reach, tiny_cfg("fm"), 5);
  Policy c(Task::reach, tiny_cfg("fm"), 6);
  REQUIRE(a.params().items.size() == b.params().items.size());
  bool all_eq = true, any_diff = false;
  for (size_t i = 0; i < a.params().items.size(); ++i) {
    const Tensor& ta = a.params().items[i].second;
    const Tensor& tb = b.params().items[i].second;
    const Tensor& tc = c.params().items[i].second;
    all_eq = all_eq && std::memcmp(ta.data().data(), tb.data().data(),
                                   ta.numel() * sizeof(float)) == 0;
    any_diff = any_diff || std::memcmp(ta.data().data(), tc.data().data(),
                                       ta.numel() * sizeof(float)) != 0;
  }
  CHECK(all_eq);
  CHECK(any_diff);
}

TEST_CASE("encoder paths agree and widths line up") {
  Env env(Task::push_box);
  Policy p(Task::push_box, tiny_cfg("fm"), 9);
  NoGrad ng;
  EnvState s = env.reset(4);
  Observation o = env.observe(s);
  int P = env.spec().num_points;
  Tensor cloud = Tensor::from({P, 3}, o.points);
  Tensor state = Tensor::from({1, env.spec().state_dim}, o.state);

  Tensor direct = p.frame_features(cloud, state);
  CHECK(direct.shape() == Shape{1, p.frame_dim()});

  Tensor feats = p.point_features(cloud);
  Tensor pooled = maxpool_groups(feats, P);
  Tensor viaPooled = p.frame_from_pooled(pooled, state);
  CHECK(std::memcmp(direct.data().data(), viaPooled.data().data(),
                    direct.numel() * sizeof(float)) == 0);

  Tensor z = p.obs_latent(direct, direct);
  CHECK(z.shape() == Shape{1, tiny_cfg("fm").enc.obs_feat});
}

TEST_CASE("zeroed readout gives closed-form samples") {
  Env env(Task::reach);

  SUBCASE("flow head integrates a zero field") {
    Policy p(Task::reach, tiny_cfg("fm"), 3);
    zero_head_output(p);
    Tensor z = latent_for(env, p, 2);
    Rng r1(99);
    Tensor got = p.sample_chunks(z, r1);
    Rng r2(99);
    Tensor want = Tensor::randn({1, p.chunk_width()}, r2);
    for (size_t i = 0; i < got.numel(); ++i) {
      CHECK(got.at(i) == std::clamp(want.at(i), -1.0f, 1.0f));
    }
  }
  SUBCASE("ddim with zero predicted noise rescales the seed draw") {
    auto cfg = tiny_cfg("dp");
    Policy p(Task::reach, cfg, 3);
    zero_head_output(p);
    Tensor z = latent_for(env, p, 2);
    Rng r1(99);
    Tensor got = p.sample_chunks(z, r1);
    Rng r2(99);
    Tensor seed_draw = Tensor::randn({1, p.chunk_width()}, r2);
    auto ab = ddpm_alpha_bars(cfg.diffusion_steps);
    // x0 estimate at every hop is x/sqrt(ab_hi) and re-noising adds nothing,
    // so the hops telescope to x / sqrt(ab at the first schedule node)
    double gain = 1.0 / std::sqrt(ab[size_t(cfg.diffusion_steps)]);
    for (size_t i = 0; i < got.numel(); ++i) {
      float want = std::clamp(float(double(seed_draw.at(i)) * gain), -1.0f, 1.0f);
      CHECK(got.at(i) == doctest::Approx(want).epsilon(1e-4));
    }
  }
}

TEST_CASE("sampling is deterministic given the rng stream") {
  Env env(Task::reach);
  for (const char* bk : {"fm", "dp"}) {
    Policy p(Task::reach, tiny_cfg(bk), 13);
    Tensor z = latent_for(env, p, 8);
    Rng r1(5), r2(5), r3(6);
    Tensor a = p.sample_chunks(z, r1);
    Tensor b = p.sample_chunks(z, r2);
    Tensor c = p.sample_chunks(z, r3);
    CHECK(std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0);
    bool differ = std::memcmp(a.data().data(), c.data().data(),
                              a.numel() * sizeof(float)) != 0;
    CHECK(differ);
    for (size_t i = 0; i < a.numel(); ++i) {
      CHECK(a.at(i) >= -1.0f);
      CHECK(a.at(i) <= 1.0f);
    }
  }
}

TEST_CASE("a candidate row samples the same alone or in a batch") {
  Env env(Task::reach);
  Policy p(Task::reach, tiny_cfg("fm"), 21);
  Tensor z1 = latent_for(env, p, 31);
  // a batch whose first row is z1: both rows identical makes the stream align
  Tensor z2 = concat_lastdim({z1});
  std::vector<float> two;
  auto zd = z1.data();
  two.insert(two.end(), zd.begin(), zd.end());
  two.insert(two.end(), zd.begin(), zd.end());
  Tensor zb = Tensor::from({2, z1.dim(1)}, two);

  Rng ra(7), rb(7);
  Tensor solo = p.sample_chunks(z1, ra);
  Tensor batch = p.sample_chunks(zb, rb);
  CHECK(std::memcmp(solo.data().data(), batch.data().data(),
                    solo.numel() * sizeof(float)) == 0);
}

TEST_CASE("training refuses anything but expert demonstrations") {
  Dataset mixed = collect_mixed(Task::reach, 6, 11, DriftNoise{0.9f, 1.0f});
  REQUIRE(mixed.count(Quality::failed) > 0);
  Policy p(Task::reach, tiny_cfg("fm"), 1);
  CHECK_THROWS_WITH_AS(p.train(mixed, 2), doctest::Contains("expert-only"),
                       std::runtime_error);

  // a single polluted trajectory in an otherwise clean set still trips it
  Dataset expert = collect_expert(Task::reach, 3, 12);
  Dataset polluted = expert;
  for (auto& tr : mixed.trajs) {
    if (tr.quality == Quality::imperfect_success) {
      polluted.trajs.push_back(tr);
      break;
    }
  }
  if (polluted.trajs.size() == 4) {
    CHECK_THROWS_AS(p.train(polluted, 2), std::runtime_error);
  }

  Dataset wrong_task = collect_expert(Task::push_box, 1, 13);
  CHECK_THROWS_AS(p.train(wrong_task, 2), std::invalid_argument);
  Dataset empty;
  empty.task = Task::reach;
  CHECK_THROWS_AS(p.train(empty, 2), std::invalid_argument);
}

TEST_CASE("training memorizes a single demonstration") {
  Dataset expert = collect_expert(Task::reach, 1, 17);
  const Trajectory& tr = expert.trajs[0];
  REQUIRE(tr.T >= 2);

  auto cfg = tiny_cfg("fm");
  cfg.chunk = 4;
  cfg.train_steps = 1500;
  cfg.batch = 16;
  cfg.lr = 1e-3f;
  Policy p(Task::reach, cfg, 23);

  auto chunk_error = [&](Policy& pol) {
    NoGrad ng;
    ChunkingConfig ck;
    ck.chunk = cfg.chunk;
    std::vector<ChunkRef> refs = {{0, 1}};
    ChunkBatch b = gather_chunk_batch(expert, refs, ck, 0.99f);
    Tensor prev = pol.frame_features(b.cloud_prev, b.state_prev);
    Tensor cur = pol.frame_features(b.cloud_cur, b.state_cur);
    Tensor z = pol.obs_latent(prev, cur);
    double err = 0;
    int reps = 8;
    for (int r = 0; r < reps; ++r) {
      Rng rng(100 + uint64_t(r));
      Tensor sample = pol.sample_chunks(z, rng);
      for (size_t i = 0; i < sample.numel(); ++i)
        err += std::abs(double(sample.at(i)) - double(b.chunk.at(i)));
    }
    return err / double(reps * b.chunk.numel());
  };

  double before = chunk_error(p);
  std::vector<float> losses;
  p.train(expert, 29, [&](int, float l) { losses.push_back(l); });
  REQUIRE(losses.size() == size_t(cfg.train_steps));
  double after = chunk_error(p);
  INFO("mean abs chunk error before ", before, " after ", after);
  CHECK(after < 0.3);
  CHECK(after < before * 0.6);

  // loss should come down over training as well
  double head = 0, tail = 0;
  for (int i = 0; i < 50; ++i) head += losses[size_t(i)];
  for (int i = 0; i < 50; ++i) tail += losses[losses.size() - 50 + size_t(i)];
  CHECK(tail < head);
}

TEST_CASE("checkpoints restore sampling behavior exactly") {
  fs::path dir = fs::temp_directory_path() / "dalir_policy_ckpt";
  fs::create_directories(dir);
  std::string path = (dir / "p.ckpt").string();

  Env env(Task::reach);
  auto cfg = tiny_cfg("fm");
  cfg.train_steps = 20;
  Policy p(Task::reach, cfg, 41);
  Dataset expert = collect_expert(Task::reach, 2, 43);
  p.train(expert, 44);
  p.save(path);

  Policy q(Task::reach, cfg, 999);  // different init, then overwritten by load
  q.load(path);
  Tensor z = latent_for(env, p, 3);
  Rng r1(1), r2(1);
  Tensor a = p.sample_chunks(z, r1);
  Tensor b = q.sample_chunks(z, r2);
  CHECK(std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0);

  auto wide = tiny_cfg("fm");
  wide.head_hidden = 48;
  Policy mismatched(Task::reach, wide, 1);
  CHECK_THROWS(mismatched.load(path));
  fs::remove_all(dir);
}
