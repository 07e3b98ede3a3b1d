#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dalir/rng.hpp"

namespace dalir {

using Shape = std::vector<int>;

size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense row-major f32 tensor with reverse-mode autodiff. Ops on tensors that
// require grad record parents and a backprop closure; backward() runs the
// closures in reverse topological order and then releases the graph, so a
// second backward through the same nodes is an error. Reductions accumulate
// in f64.
class Tensor {
 public:
  struct Node {
    Shape shape;
    std::vector<float> value;
    std::vector<float> grad;  // allocated during backward, kept on leaves
    bool requires_grad = false;
    bool released = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;
  };

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float v, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<float> data, bool requires_grad = false);
  static Tensor scalar(float v, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, float stddev = 1.0f, bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const;
  int dim(int i) const;
  int rank() const { return int(shape().size()); }
  size_t numel() const;

  std::span<const float> data() const;
  std::span<float> mutable_data();  // leaves only (no recorded parents)
  float item() const;               // single-element tensors
  float at(size_t i) const;

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const float> grad() const;
  std::span<float> grad_mutable();
  void zero_grad();
  void accumulate_grad(std::span<const float> g);

  std::shared_ptr<Node> node() const { return n_; }
  static Tensor wrap(std::shared_ptr<Node> n) {
    Tensor t;
    t.n_ = std::move(n);
    return t;
  }

 private:
  std::shared_ptr<Node> n_;
};

// Runs reverse-mode accumulation from a scalar loss, then releases the graph.
void backward(const Tensor& loss);

// While alive, ops do not record parents or backprop closures (inference mode).
class NoGrad {
 public:
  NoGrad();
  ~NoGrad();
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  bool prev_;
};

// Re-enables recording inside an enclosing NoGrad scope.
class EnableGrad {
 public:
  EnableGrad();
  ~EnableGrad();
  EnableGrad(const EnableGrad&) = delete;
  EnableGrad& operator=(const EnableGrad&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

// ---- ops ----
// Binary ops accept equal shapes, a scalar rhs, or a rhs whose shape is a
// suffix of the lhs shape (broadcast over leading dims).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor add_scalar(const Tensor& a, float s);

// [m,k]x[k,n], [B,m,k]x[B,k,n], or [B,m,k]x[k,n]
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);  // tanh approximation
Tensor sigmoid(const Tensor& x);
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);
Tensor softmax_lastdim(const Tensor& x);

Tensor mse_loss(const Tensor& pred, const Tensor& target);
Tensor bce_with_logits_loss(const Tensor& logits, const Tensor& targets);

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

Tensor concat_lastdim(const std::vector<Tensor>& parts);
Tensor slice_lastdim(const Tensor& x, int start, int len);
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose_last2(const Tensor& x);
// rows of x grouped in blocks of group_rows, max over each block:
// [G*group_rows, h] -> [G, h]
Tensor maxpool_groups(const Tensor& x, int group_rows);
Tensor detach(const Tensor& x);

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// max over a subset of rows of a [P, h] feature matrix; equals encoding the
// corresponding sub-cloud through a pointwise network followed by max-pool
Tensor rows_max(const Tensor& feats, std::span<const int> rows);

// ---- optimizer ----
struct AdamWConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.0f;
};

// Decoupled weight decay, bias-corrected moments. step() consumes grads that
// backward() populated; calling it with a grad missing is an error.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWConfig cfg);
  void step();
  void zero_grad();
  int64_t steps_done() const { return t_; }
  AdamWConfig& config() { return cfg_; }
  std::span<const Tensor> params() const { return params_; }
  std::vector<float>& moment1(size_t i) { return m_[i]; }
  std::vector<float>& moment2(size_t i) { return v_[i]; }
  void set_steps_done(int64_t t) { t_ = t; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<float>> m_, v_;
  AdamWConfig cfg_;
  int64_t t_ = 0;
};

// ---- parameter registry ----
struct ParamMap {
  std::vector<std::pair<std::string, Tensor>> items;

  Tensor& add(const std::string& name, Tensor t);
  Tensor* find(const std::string& name);
  const Tensor* find(const std::string& name) const;
  std::vector<Tensor> tensors() const;
  size_t total_params() const;
  // prefixes every name: merge("policy", other) adds "policy/<name>"
  void merge(const std::string& prefix, const ParamMap& other);
};

int tensor_threads();  // DALIR_THREADS, read once, default 1

}  // namespace dalir
