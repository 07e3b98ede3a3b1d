#include "dalir/imagination.hpp"

#include <cmath>
#include <stdexcept>

#include "dalir/checkpoint.hpp"

namespace dalir {

namespace {

Tensor he_init(Shape shape, Rng& rng) {
  return Tensor::randn(shape, rng, std::sqrt(2.0f / float(shape[0])), true);
}

Tensor out_init(Shape shape, Rng& rng) {
  return Tensor::randn(shape, rng, std::sqrt(1.0f / float(shape[0])), true);
}

}  // namespace

Imagination::Imagination(Task task, ImaginationConfig cfg, uint64_t seed)
    : task_(task), spec_(task_spec(task)), cfg_(cfg) {
  if (cfg_.wm_hidden % cfg_.wm_heads != 0) {
    throw std::invalid_argument("wm_hidden must be divisible by wm_heads");
  }
  Rng rng = Rng::substream(seed, "imagination_init");
  const auto& e = cfg_.enc;
  int h = e.point_hidden, S = spec_.state_dim;
  int hid = cfg_.wm_hidden, k = cfg_.chunk, A = spec_.action_dim;
  int sd = latent_dim();

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

  params_.add("wm/s_tok_w", out_init({sd, hid}, rng));
  params_.add("wm/s_tok_b", Tensor::zeros({hid}, true));
  params_.add("wm/a_tok_w", out_init({A, hid}, rng));
  params_.add("wm/a_tok_b", Tensor::zeros({hid}, true));
  params_.add("wm/pos", Tensor::randn({k + 1, hid}, rng, 0.02f, true));
  for (int l = 0; l < cfg_.wm_layers; ++l) {
    std::string p = "wm/l" + std::to_string(l) + "/";
    params_.add(p + "ln1_g", Tensor::full({hid}, 1.0f, true));
    params_.add(p + "ln1_b", Tensor::zeros({hid}, true));
    params_.add(p + "qkv_w", out_init({hid, 3 * hid}, rng));
    params_.add(p + "qkv_b", Tensor::zeros({3 * hid}, true));
    params_.add(p + "attn_out_w", out_init({hid, hid}, rng));
    params_.add(p + "attn_out_b", Tensor::zeros({hid}, true));
    params_.add(p + "ln2_g", Tensor::full({hid}, 1.0f, true));
    params_.add(p + "ln2_b", Tensor::zeros({hid}, true));
    params_.add(p + "mlp_w1", he_init({hid, 2 * hid}, rng));
    params_.add(p + "mlp_b1", Tensor::zeros({2 * hid}, true));
    params_.add(p + "mlp_w2", out_init({2 * hid, hid}, rng));
    params_.add(p + "mlp_b2", Tensor::zeros({hid}, true));
  }
  params_.add("wm/lnf_g", Tensor::full({hid}, 1.0f, true));
  params_.add("wm/lnf_b", Tensor::zeros({hid}, true));
  params_.add("wm/read_w1", he_init({hid, hid}, rng));
  params_.add("wm/read_b1", Tensor::zeros({hid}, true));
  // zero-initialized readout: the world model starts as the identity map
  params_.add("wm/read_w2", Tensor::zeros({hid, sd}, true));
  params_.add("wm/read_b2", Tensor::zeros({sd}, true));

  int sh = cfg_.scorer_hidden;
  params_.add("scorer/w1", he_init({sd, sh}, rng));
  params_.add("scorer/b1", Tensor::zeros({sh}, true));
  params_.add("scorer/w2", he_init({sh, sh}, rng));
  params_.add("scorer/b2", Tensor::zeros({sh}, true));
  params_.add("scorer/w3", out_init({sh, 1}, rng));
  params_.add("scorer/b3", Tensor::zeros({1}, true));

  opt_ = std::make_unique<AdamW>(
      params_.tensors(), AdamWConfig{cfg_.lr, 0.9f, 0.999f, 1e-8f, cfg_.weight_decay});
}

void Imagination::init_from_policy(const Policy& policy) {
  for (auto& [name, t] : params_.items) {
    if (name.rfind("enc/", 0) != 0) continue;
    const Tensor* src = policy.params().find(name);
    if (!src) throw std::runtime_error("policy checkpoint lacks encoder parameter: " + name);
    if (src->shape() != t.shape()) {
      throw std::runtime_error("encoder shape mismatch on " + name + ": policy " +
                               shape_str(src->shape()) + " vs imagination " +
                               shape_str(t.shape()));
    }
    auto s = src->data();
    auto d = t.mutable_data();
    std::copy(s.begin(), s.end(), d.begin());
  }
}

Tensor Imagination::point_features(const Tensor& clouds) const {
  auto h1 = gelu(linear(clouds, *params_.find("enc/point/w1"), *params_.find("enc/point/b1")));
  return gelu(linear(h1, *params_.find("enc/point/w2"), *params_.find("enc/point/b2")));
}

Tensor Imagination::encode_from_pooled(const Tensor& pooled, const Tensor& states) const {
  auto cloud_feat =
      linear(pooled, *params_.find("enc/point/proj_w"), *params_.find("enc/point/proj_b"));
  auto s1 = gelu(linear(states, *params_.find("enc/state/w1"), *params_.find("enc/state/b1")));
  auto state_feat = linear(s1, *params_.find("enc/state/w2"), *params_.find("enc/state/b2"));
  return concat_lastdim({state_feat, cloud_feat});
}

Tensor Imagination::encode(const Tensor& clouds, const Tensor& states) const {
  int rows = clouds.dim(0);
  int b = states.dim(0);
  if (rows % b != 0) throw std::invalid_argument("cloud rows not a multiple of batch");
  auto pooled = maxpool_groups(point_features(clouds), rows / b);
  return encode_from_pooled(pooled, states);
}

Tensor Imagination::predict_delta(const Tensor& s, const Tensor& chunk) const {
  int B = s.dim(0);
  int hid = cfg_.wm_hidden, k = cfg_.chunk, A = spec_.action_dim;
  int T = k + 1, heads = cfg_.wm_heads, dh = hid / heads;
  if (chunk.shape() != Shape{B, k * A}) {
    throw std::invalid_argument("predict_delta: chunk must be [B, chunk*action_dim], got " +
                                shape_str(chunk.shape()));
  }

  auto s_tok = linear(s, *params_.find("wm/s_tok_w"), *params_.find("wm/s_tok_b"));
  auto a_tok =
      linear(reshape(chunk, {B * k, A}), *params_.find("wm/a_tok_w"), *params_.find("wm/a_tok_b"));
  if (cfg_.action_ablated) a_tok = scale(a_tok, 0.0f);
  auto x = reshape(concat_lastdim({s_tok, reshape(a_tok, {B, k * hid})}), {B, T, hid});
  x = add(x, *params_.find("wm/pos"));

  for (int l = 0; l < cfg_.wm_layers; ++l) {
    std::string p = "wm/l" + std::to_string(l) + "/";
    auto ln1 = layernorm(x, *params_.find(p + "ln1_g"), *params_.find(p + "ln1_b"));
    auto qkv = linear(ln1, *params_.find(p + "qkv_w"), *params_.find(p + "qkv_b"));
    std::vector<Tensor> ctx_heads;
    ctx_heads.reserve(size_t(heads));
    for (int hh = 0; hh < heads; ++hh) {
      auto q = slice_lastdim(qkv, hh * dh, dh);
      auto kk = slice_lastdim(qkv, hid + hh * dh, dh);
      auto v = slice_lastdim(qkv, 2 * hid + hh * dh, dh);
      auto att = softmax_lastdim(
          scale(matmul(q, transpose_last2(kk)), 1.0f / std::sqrt(float(dh))));
      ctx_heads.push_back(matmul(att, v));
    }
    auto ctx = concat_lastdim(ctx_heads);
    x = add(x, linear(ctx, *params_.find(p + "attn_out_w"), *params_.find(p + "attn_out_b")));
    auto ln2 = layernorm(x, *params_.find(p + "ln2_g"), *params_.find(p + "ln2_b"));
    auto m = gelu(linear(ln2, *params_.find(p + "mlp_w1"), *params_.find(p + "mlp_b1")));
    x = add(x, linear(m, *params_.find(p + "mlp_w2"), *params_.find(p + "mlp_b2")));
  }

  auto xf = layernorm(x, *params_.find("wm/lnf_g"), *params_.find("wm/lnf_b"));
  auto tok0 = slice_lastdim(reshape(xf, {B, T * hid}), 0, hid);
  auto r = gelu(linear(tok0, *params_.find("wm/read_w1"), *params_.find("wm/read_b1")));
  return linear(r, *params_.find("wm/read_w2"), *params_.find("wm/read_b2"));
}

Tensor Imagination::predict_next(const Tensor& s, const Tensor& chunk) const {
  return add(s, predict_delta(s, chunk));
}

Tensor Imagination::score_logit(const Tensor& s) const {
  auto h1 = gelu(linear(s, *params_.find("scorer/w1"), *params_.find("scorer/b1")));
  auto h2 = gelu(linear(h1, *params_.find("scorer/w2"), *params_.find("scorer/b2")));
  return linear(h2, *params_.find("scorer/w3"), *params_.find("scorer/b3"));
}

Imagination::StepLosses Imagination::train_step(const ChunkBatch& batch) {
  opt_->zero_grad();
  auto s_t = encode(batch.cloud_cur, batch.state_cur);
  auto s_future = detach(encode(batch.cloud_future, batch.state_future));
  auto pred = predict_next(s_t, batch.chunk);
  auto l_wm = mse_loss(pred, s_future);
  auto logit = score_logit(s_t);
  auto l_score = bce_with_logits_loss(logit, batch.y);
  auto loss = add(scale(l_wm, cfg_.lambda_wm), l_score);
  StepLosses out{loss.item(), l_wm.item(), l_score.item()};
  backward(loss);
  opt_->step();
  return out;
}

void Imagination::train(const Dataset& mixed_data, uint64_t seed,
                        const std::function<void(int, const StepLosses&)>& progress) {
  if (mixed_data.task != task_) {
    throw std::invalid_argument("dataset task does not match imagination task");
  }
  if (mixed_data.trajs.empty()) throw std::invalid_argument("empty dataset");
  auto starts = all_chunk_starts(mixed_data);
  Rng rng = Rng::substream(seed, "imagination_train");
  ChunkingConfig ck{2, cfg_.chunk};
  std::vector<ChunkRef> order = starts;
  size_t cursor = order.size();
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
    ChunkBatch batch = gather_chunk_batch(mixed_data, refs, ck, cfg_.gamma);
    StepLosses ls = train_step(batch);
    if (progress) progress(step, ls);
  }
}

namespace {

std::vector<Tensor> collect_prefixed(const ParamMap& params, const std::string& prefix) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : params.items) {
    if (name.rfind(prefix, 0) == 0) out.push_back(t);
  }
  return out;
}

}  // namespace

std::vector<Tensor> Imagination::encoder_params() const { return collect_prefixed(params_, "enc/"); }
std::vector<Tensor> Imagination::wm_params() const { return collect_prefixed(params_, "wm/"); }
std::vector<Tensor> Imagination::scorer_params() const {
  return collect_prefixed(params_, "scorer/");
}

void Imagination::save(const std::string& path) const {
  ParamMap out;
  for (const auto& [name, t] : params_.items) out.add(name, t);
  auto ps = opt_->params();
  for (size_t i = 0; i < ps.size(); ++i) {
    const std::string& name = params_.items[i].first;
    out.add("adam_m/" + name, Tensor::from(ps[i].shape(), opt_->moment1(i)));
    out.add("adam_v/" + name, Tensor::from(ps[i].shape(), opt_->moment2(i)));
  }
  out.add("adam/steps", Tensor::scalar(float(opt_->steps_done())));
  save_checkpoint(path, out);
}

void Imagination::load(const std::string& path) { load_checkpoint_into(path, params_); }

}  // namespace dalir
