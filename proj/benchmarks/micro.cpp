#include <benchmark/benchmark.h>

#include "dalir/imagination.hpp"
#include "dalir/policy.hpp"
#include "dalir/rerank.hpp"
#include "dalir/rng.hpp"

using namespace dalir;

static void BM_Matmul(benchmark::State& state) {
  int n = int(state.range(0));
  Rng rng = Rng::substream(1, "bench");
  Tensor a = Tensor::randn({n, n}, rng);
  Tensor b = Tensor::randn({n, n}, rng);
  NoGrad ng;
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * 2 * int64_t(n) * n * n);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

static void BM_FrameEncode(benchmark::State& state) {
  Policy p(Task::push_box, {}, 1);
  const TaskSpec& spec = task_spec(Task::push_box);
  Env env(Task::push_box);
  Observation obs = env.observe(env.reset(3));
  Tensor cloud = Tensor::from({spec.num_points, 3}, obs.points);
  Tensor st = Tensor::from({1, spec.state_dim}, obs.state);
  NoGrad ng;
  for (auto _ : state) benchmark::DoNotOptimize(p.frame_features(cloud, st));
}
BENCHMARK(BM_FrameEncode);

static void BM_SampleChunks(benchmark::State& state) {
  int n = int(state.range(0));
  Policy p(Task::push_box, {}, 1);
  Rng rng = Rng::substream(2, "bench");
  Tensor z = Tensor::randn({n, p.config().enc.obs_feat}, rng);
  NoGrad ng;
  for (auto _ : state) benchmark::DoNotOptimize(p.sample_chunks(z, rng));
}
BENCHMARK(BM_SampleChunks)->Arg(1)->Arg(32);

static void BM_WorldModel(benchmark::State& state) {
  int n = int(state.range(0));
  Imagination im(Task::push_box, {}, 1);
  Rng rng = Rng::substream(3, "bench");
  Tensor s = Tensor::randn({n, im.latent_dim()}, rng);
  Tensor chunk = Tensor::randn({n, im.config().chunk * 3}, rng);
  NoGrad ng;
  for (auto _ : state) benchmark::DoNotOptimize(im.predict_next(s, chunk));
}
BENCHMARK(BM_WorldModel)->Arg(1)->Arg(32);

static void BM_Decision(benchmark::State& state) {
  int n = int(state.range(0));
  Policy p(Task::push_box, {}, 1);
  Imagination im(Task::push_box, {}, 2);
  Env env(Task::push_box);
  Observation obs = env.observe(env.reset(5));
  RerankConfig rc;
  rc.method = n > 0 ? RerankMethod::latent : RerankMethod::none;
  rc.n_cand = n > 0 ? n : 1;
  uint64_t seed = 0;
  for (auto _ : state)
    benchmark::DoNotOptimize(select_chunk(p, &im, rc, obs, obs, seed++));
}
BENCHMARK(BM_Decision)->Arg(0)->Arg(1)->Arg(8)->Arg(32);

BENCHMARK_MAIN();
