#include <cmath>
#include <cstring>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "dalir/imagination.hpp"
#include "doctest.h"

using namespace dalir;
namespace fs = std::filesystem;

namespace {

EncoderConfig tiny_enc() {
  EncoderConfig e;
  e.point_hidden = 32;
  e.cloud_feat = 16;
  e.state_feat = 8;
  e.obs_feat = 24;
  return e;
}

ImaginationConfig tiny_cfg() {
  ImaginationConfig cfg;
  cfg.enc = tiny_enc();
  cfg.wm_hidden = 16;
  cfg.wm_layers = 1;
  cfg.wm_heads = 2;
  cfg.chunk = 4;
  cfg.scorer_hidden = 16;
  cfg.train_steps = 40;
  cfg.batch = 8;
  cfg.weight_decay = 0.0f;
  return cfg;
}

Tensor obs_latent_of(const Env& env, const Imagination& im, uint64_t seed) {
  EnvState s = env.reset(seed);
  Observation o = env.observe(s);
  Tensor cloud = Tensor::from({env.spec().num_points, 3}, o.points);
  Tensor state = Tensor::from({1, env.spec().state_dim}, o.state);
  return im.encode(cloud, state);
}

bool same_bytes(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("latent layout splits into state and cloud features") {
  Env env(Task::reach);
  Imagination im(Task::reach, tiny_cfg(), 3);
  NoGrad ng;
  CHECK(im.latent_dim() == 24);

  EnvState s = env.reset(6);
  Observation o = env.observe(s);
  int sd = env.spec().state_dim;
  Tensor cloud = Tensor::from({env.spec().num_points, 3}, o.points);
  Tensor state1 = Tensor::from({1, sd}, o.state);
  std::vector<float> st2 = o.state;
  st2[0] += 0.25f;
  Tensor state2 = Tensor::from({1, sd}, st2);

  Tensor z1 = im.encode(cloud, state1);
  Tensor z2 = im.encode(cloud, state2);
  REQUIRE(z1.shape() == Shape{1, 24});
  int sf = tiny_cfg().enc.state_feat;
  bool state_part_differs = false;
  for (int i = 0; i < sf; ++i) state_part_differs = state_part_differs || z1.at(i) != z2.at(i);
  CHECK(state_part_differs);
  for (size_t i = size_t(sf); i < z1.numel(); ++i) CHECK(z1.at(i) == z2.at(i));
}

TEST_CASE("encoder weights copy from the policy byte for byte") {
  PolicyConfig pc;
  pc.enc = tiny_enc();
  pc.head_hidden = 16;
  pc.chunk = 4;
  Policy p(Task::push_box, pc, 5);

  ImaginationConfig ic = tiny_cfg();
  Imagination im(Task::push_box, ic, 77);
  im.init_from_policy(p);

  for (auto& [name, t] : im.params().items) {
    if (name.rfind("enc/", 0) != 0) continue;
    const Tensor* src = p.params().find(name);
    REQUIRE(src != nullptr);
    CHECK(same_bytes(*src, t));
  }

  // shared weights mean shared frame features
  Env env(Task::push_box);
  NoGrad ng;
  EnvState s = env.reset(2);
  Observation o = env.observe(s);
  Tensor cloud = Tensor::from({env.spec().num_points, 3}, o.points);
  Tensor state = Tensor::from({1, env.spec().state_dim}, o.state);
  CHECK(same_bytes(p.frame_features(cloud, state), im.encode(cloud, state)));

  ImaginationConfig wrong = ic;
  wrong.enc.cloud_feat = 12;
  Imagination bad(Task::push_box, wrong, 1);
  CHECK_THROWS_AS(bad.init_from_policy(p), std::runtime_error);
}

TEST_CASE("fresh world model is the identity map") {
  Env env(Task::reach);
  Imagination im(Task::reach, tiny_cfg(), 9);
  NoGrad ng;
  Tensor z = obs_latent_of(env, im, 4);
  Rng rng(8);
  Tensor chunk = Tensor::randn({1, tiny_cfg().chunk * env.spec().action_dim}, rng);

  Tensor delta = im.predict_delta(z, chunk);
  for (size_t i = 0; i < delta.numel(); ++i) CHECK(delta.at(i) == 0.0f);
  CHECK(same_bytes(im.predict_next(z, chunk), z));

  CHECK_THROWS_AS(im.predict_delta(z, Tensor::zeros({1, 5})), std::invalid_argument);
}

TEST_CASE("action tokens steer the prediction unless ablated") {
  Env env(Task::reach);
  auto cfg = tiny_cfg();
  Imagination im(Task::reach, cfg, 11);
  // push the readout off zero so deltas are visible
  Rng wr(123);
  for (const char* name : {"wm/read_w2", "wm/read_b2"}) {
    auto d = im.params().find(name)->mutable_data();
    for (auto& v : d) v = float(wr.normal(0.0, 0.05));
  }
  NoGrad ng;
  Tensor z = obs_latent_of(env, im, 4);
  int kA = cfg.chunk * env.spec().action_dim;
  Tensor c1 = Tensor::full({1, kA}, 0.5f);
  Tensor c2 = Tensor::full({1, kA}, -0.5f);
  CHECK(!same_bytes(im.predict_delta(z, c1), im.predict_delta(z, c2)));

  auto abl_cfg = cfg;
  abl_cfg.action_ablated = true;
  Imagination abl(Task::reach, abl_cfg, 11);
  for (const char* name : {"wm/read_w2", "wm/read_b2"}) {
    auto src = im.params().find(name)->data();
    auto dst = abl.params().find(name)->mutable_data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  CHECK(same_bytes(abl.predict_delta(z, c1), abl.predict_delta(z, c2)));
}

TEST_CASE("parameter groups partition the model") {
  Imagination im(Task::reach, tiny_cfg(), 13);
  auto enc = im.encoder_params(), wm = im.wm_params(), sc = im.scorer_params();
  CHECK(enc.size() + wm.size() + sc.size() == im.params().items.size());
  CHECK(!enc.empty());
  CHECK(!wm.empty());
  CHECK(!sc.empty());
}

TEST_CASE("zero world-model weight trains the scorer alone") {
  Dataset mixed = collect_mixed(Task::reach, 6, 21, DriftNoise{0.9f, 1.0f});
  ChunkingConfig ck{2, tiny_cfg().chunk};
  auto refs = all_chunk_starts(mixed);
  REQUIRE(refs.size() >= 8);
  std::vector<ChunkRef> batch_refs(refs.begin(), refs.begin() + 8);
  ChunkBatch batch = gather_chunk_batch(mixed, batch_refs, ck, 0.99f);

  auto cfg = tiny_cfg();
  cfg.lambda_wm = 0.0f;
  Imagination im(Task::reach, cfg, 31);
  std::vector<std::vector<float>> wm_before;
  for (const Tensor& t : im.wm_params())
    wm_before.emplace_back(t.data().begin(), t.data().end());
  std::vector<float> enc_before(im.params().find("enc/point/w1")->data().begin(),
                                im.params().find("enc/point/w1")->data().end());

  auto losses = im.train_step(batch);
  CHECK(losses.total == doctest::Approx(losses.score));

  auto wm_now = im.wm_params();
  for (size_t i = 0; i < wm_now.size(); ++i) {
    CHECK(std::memcmp(wm_now[i].data().data(), wm_before[i].data(),
                      wm_before[i].size() * sizeof(float)) == 0);
  }
  // the scorer loss still reaches the encoder
  auto enc_now = im.params().find("enc/point/w1")->data();
  CHECK(std::memcmp(enc_now.data(), enc_before.data(), enc_before.size() * sizeof(float)) != 0);
}

TEST_CASE("joint training reduces both objectives") {
  Dataset mixed = collect_mixed(Task::reach, 10, 37, DriftNoise{0.9f, 1.0f});
  REQUIRE(mixed.count(Quality::imperfect_success) > 0);
  REQUIRE(mixed.count(Quality::failed) > 0);

  auto cfg = tiny_cfg();
  cfg.train_steps = 250;
  cfg.batch = 16;
  Imagination im(Task::reach, cfg, 41);
  std::vector<Imagination::StepLosses> hist;
  im.train(mixed, 43, [&](int, const Imagination::StepLosses& l) { hist.push_back(l); });
  REQUIRE(hist.size() == size_t(cfg.train_steps));

  auto mean_of = [&](size_t lo, size_t hi, auto f) {
    double s = 0;
    for (size_t i = lo; i < hi; ++i) s += f(hist[i]);
    return s / double(hi - lo);
  };
  double wm_head = mean_of(0, 30, [](auto& l) { return l.wm; });
  double wm_tail = mean_of(hist.size() - 30, hist.size(), [](auto& l) { return l.wm; });
  double sc_head = mean_of(0, 30, [](auto& l) { return l.score; });
  double sc_tail = mean_of(hist.size() - 30, hist.size(), [](auto& l) { return l.score; });
  INFO("wm ", wm_head, " -> ", wm_tail, "  score ", sc_head, " -> ", sc_tail);
  CHECK(wm_tail < wm_head);
  CHECK(sc_tail < sc_head);

  Dataset wrong = collect_expert(Task::push_box, 1, 3);
  CHECK_THROWS_AS(im.train(wrong, 1), std::invalid_argument);
  Dataset empty;
  empty.task = Task::reach;
  CHECK_THROWS_AS(im.train(empty, 1), std::invalid_argument);
}

TEST_CASE("checkpoints restore the full module") {
  fs::path dir = fs::temp_directory_path() / "dalir_imag_ckpt";
  fs::create_directories(dir);
  std::string path = (dir / "im.ckpt").string();

  Env env(Task::reach);
  auto cfg = tiny_cfg();
  cfg.train_steps = 30;
  Imagination a(Task::reach, cfg, 51);
  Dataset mixed = collect_mixed(Task::reach, 4, 53, DriftNoise{0.9f, 1.0f});
  a.train(mixed, 55);
  a.save(path);

  Imagination b(Task::reach, cfg, 999);
  b.load(path);
  NoGrad ng;
  Tensor z = obs_latent_of(env, a, 5);
  Rng rng(6);
  Tensor chunk = Tensor::randn({1, cfg.chunk * env.spec().action_dim}, rng);
  CHECK(same_bytes(a.predict_next(z, chunk), b.predict_next(z, chunk)));
  CHECK(same_bytes(a.score_logit(z), b.score_logit(z)));
  CHECK(same_bytes(obs_latent_of(env, a, 7), obs_latent_of(env, b, 7)));
  fs::remove_all(dir);
}

TEST_CASE("head split must divide the width") {
  auto cfg = tiny_cfg();
  cfg.wm_hidden = 15;
  CHECK_THROWS_AS(Imagination(Task::reach, cfg, 1), std::invalid_argument);
}
