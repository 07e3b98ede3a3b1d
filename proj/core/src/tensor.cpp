#include "dalir/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <thread>
#include <unordered_set>

namespace dalir {

size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (int d : s) {
    if (d <= 0) throw std::invalid_argument("shape dims must be positive");
    n *= size_t(d);
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

int tensor_threads() {
  static int n = [] {
    const char* e = std::getenv("DALIR_THREADS");
    if (!e) return 1;
    int v = std::atoi(e);
    return std::clamp(v, 1, 64);
  }();
  return n;
}

namespace {
thread_local bool g_grad_enabled = true;
}

NoGrad::NoGrad() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGrad::~NoGrad() { g_grad_enabled = prev_; }
EnableGrad::EnableGrad() : prev_(g_grad_enabled) { g_grad_enabled = true; }
EnableGrad::~EnableGrad() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

namespace {

using Node = Tensor::Node;

void check_finite(const std::vector<float>& v, const char* op) {
  for (float x : v) {
    if (!std::isfinite(x)) {
      throw std::runtime_error(std::string("non-finite value produced by op '") + op + "'");
    }
  }
}

std::shared_ptr<Node> new_node(Shape shape, std::vector<float> value) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  return n;
}

void ensure_grad(Node& n) {
  if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0f);
}

// Builds an op node. Parents and backprop are recorded only when some parent
// requires grad; otherwise the result is a plain value node.
Tensor make_op(const char* name, Shape shape, std::vector<float> value,
               std::vector<Tensor> parents, std::function<void(Node&)> bp) {
  check_finite(value, name);
  auto n = new_node(std::move(shape), std::move(value));
  bool rg = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) rg = rg || p.requires_grad();
  }
  if (rg) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backprop = std::move(bp);
  }
  return Tensor::wrap(std::move(n));
}

// Splits [0,m) into ranges when DALIR_THREADS > 1. Rows are computed
// independently, so results are bit-identical for any thread count.
template <typename F>
void parallel_rows(int m, F&& fn) {
  int nt = tensor_threads();
  if (nt <= 1 || m < 4 * nt) {
    fn(0, m);
    return;
  }
  std::vector<std::thread> ts;
  int chunk = (m + nt - 1) / nt;
  for (int t = 0; t < nt; ++t) {
    int lo = t * chunk, hi = std::min(m, lo + chunk);
    if (lo >= hi) break;
    ts.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  for (auto& t : ts) t.join();
}

// C[m,n] = A[m,k] * B[k,n]; per-row f64 accumulator. The k loop is unrolled
// by 4 with the four multiply-adds applied to each buf[j] in ascending k
// order, so sums match the plain loop bit for bit while the accumulator row
// stays in registers longer.
void mm_nn(const float* A, const float* B, float* C, int m, int k, int n, bool acc) {
  parallel_rows(m, [=](int i0, int i1) {
    std::vector<double> buf(static_cast<size_t>(n));
    for (int i = i0; i < i1; ++i) {
      std::fill(buf.begin(), buf.end(), 0.0);
      const float* a = A + size_t(i) * k;
      int kk = 0;
      for (; kk + 4 <= k; kk += 4) {
        double a0 = a[kk], a1 = a[kk + 1], a2 = a[kk + 2], a3 = a[kk + 3];
        const float* b0 = B + size_t(kk) * n;
        const float* b1 = b0 + n;
        const float* b2 = b1 + n;
        const float* b3 = b2 + n;
        for (int j = 0; j < n; ++j) {
          double t = buf[j];
          t += a0 * double(b0[j]);
          t += a1 * double(b1[j]);
          t += a2 * double(b2[j]);
          t += a3 * double(b3[j]);
          buf[j] = t;
        }
      }
      for (; kk < k; ++kk) {
        double av = a[kk];
        const float* b = B + size_t(kk) * n;
        for (int j = 0; j < n; ++j) buf[j] += av * double(b[j]);
      }
      float* c = C + size_t(i) * n;
      if (acc) {
        for (int j = 0; j < n; ++j) c[j] += float(buf[j]);
      } else {
        for (int j = 0; j < n; ++j) c[j] = float(buf[j]);
      }
    }
  });
}

// C[m,n] = A[m,k] * B[n,k]^T; B is staged transposed so the inner loop runs
// over independent contiguous accumulators (same per-element sum order as a
// direct dot product, so results match it bit for bit)
void mm_nt(const float* A, const float* B, float* C, int m, int k, int n, bool acc) {
  std::vector<float> bt(size_t(k) * n);
  for (int j = 0; j < n; ++j) {
    for (int kk = 0; kk < k; ++kk) bt[size_t(kk) * n + j] = B[size_t(j) * k + kk];
  }
  mm_nn(A, bt.data(), C, m, k, n, acc);
}

// C[k,n] = A[m,k]^T * B[m,n]; parallel over k columns of A so each output
// row is owned by one thread (deterministic for any thread count)
void mm_tn(const float* A, const float* B, float* C, int m, int k, int n, bool acc) {
  parallel_rows(k, [=](int i0, int i1) {
    std::vector<double> buf(size_t(i1 - i0) * n, 0.0);
    for (int r = 0; r < m; ++r) {
      const float* arow = A + size_t(r) * k;
      const float* b = B + size_t(r) * n;
      for (int i = i0; i < i1; ++i) {
        double av = arow[i];
        double* row = buf.data() + size_t(i - i0) * n;
        for (int j = 0; j < n; ++j) row[j] += av * double(b[j]);
      }
    }
    for (int i = i0; i < i1; ++i) {
      float* c = C + size_t(i) * n;
      const double* row = buf.data() + size_t(i - i0) * n;
      if (acc) {
        for (int j = 0; j < n; ++j) c[j] += float(row[j]);
      } else {
        for (int j = 0; j < n; ++j) c[j] = float(row[j]);
      }
    }
  });
}

enum class BCast { same, scalar, suffix };

BCast bcast_kind(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return BCast::same;
  if (shape_numel(b) == 1) return BCast::scalar;
  if (b.size() < a.size() &&
      std::equal(b.begin(), b.end(), a.end() - std::ptrdiff_t(b.size()))) {
    return BCast::suffix;
  }
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a) +
                              " vs " + shape_str(b));
}

}  // namespace

// ---- Tensor basics ----

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  size_t n = shape_numel(shape);
  auto node = new_node(std::move(shape), std::vector<float>(n, 0.0f));
  node->requires_grad = requires_grad;
  return wrap(std::move(node));
}

Tensor Tensor::full(Shape shape, float v, bool requires_grad) {
  size_t n = shape_numel(shape);
  auto node = new_node(std::move(shape), std::vector<float>(n, v));
  node->requires_grad = requires_grad;
  return wrap(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<float> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw std::invalid_argument("Tensor::from: data size " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  }
  auto node = new_node(std::move(shape), std::move(data));
  node->requires_grad = requires_grad;
  return wrap(std::move(node));
}

Tensor Tensor::scalar(float v, bool requires_grad) { return full({1}, v, requires_grad); }

Tensor Tensor::randn(Shape shape, Rng& rng, float stddev, bool requires_grad) {
  size_t n = shape_numel(shape);
  std::vector<float> d(n);
  for (auto& x : d) x = float(rng.normal() * stddev);
  auto node = new_node(std::move(shape), std::move(d));
  node->requires_grad = requires_grad;
  return wrap(std::move(node));
}

const Shape& Tensor::shape() const {
  if (!n_) throw std::runtime_error("empty tensor");
  return n_->shape;
}

int Tensor::dim(int i) const {
  const auto& s = shape();
  if (i < 0) i += int(s.size());
  if (i < 0 || i >= int(s.size())) throw std::out_of_range("Tensor::dim index");
  return s[size_t(i)];
}

size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const float> Tensor::data() const {
  if (!n_) throw std::runtime_error("empty tensor");
  return n_->value;
}

std::span<float> Tensor::mutable_data() {
  if (!n_) throw std::runtime_error("empty tensor");
  if (!n_->parents.empty() || n_->backprop) {
    throw std::runtime_error("mutable_data is only valid on leaf tensors");
  }
  return n_->value;
}

float Tensor::item() const {
  if (numel() != 1) throw std::runtime_error("item() requires a single-element tensor");
  return n_->value[0];
}

float Tensor::at(size_t i) const {
  if (i >= numel()) throw std::out_of_range("Tensor::at");
  return n_->value[i];
}

bool Tensor::requires_grad() const { return n_ && n_->requires_grad; }

bool Tensor::has_grad() const { return n_ && n_->grad.size() == n_->value.size(); }

std::span<const float> Tensor::grad() const {
  if (!has_grad()) throw std::runtime_error("gradient not populated");
  return n_->grad;
}

std::span<float> Tensor::grad_mutable() {
  if (!n_) throw std::runtime_error("empty tensor");
  ensure_grad(*n_);
  return n_->grad;
}

void Tensor::zero_grad() {
  if (n_ && !n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), 0.0f);
}

void Tensor::accumulate_grad(std::span<const float> g) {
  if (!n_) throw std::runtime_error("empty tensor");
  if (g.size() != n_->value.size()) throw std::invalid_argument("grad size mismatch");
  ensure_grad(*n_);
  for (size_t i = 0; i < g.size(); ++i) n_->grad[i] += g[i];
}

// ---- backward ----

void backward(const Tensor& loss) {
  auto root = loss.node();
  if (!root) throw std::runtime_error("backward on empty tensor");
  if (shape_numel(root->shape) != 1) {
    throw std::runtime_error("backward requires a scalar loss, got " + shape_str(root->shape));
  }
  if (root->released) {
    throw std::runtime_error("backward called on a released graph; re-run forward first");
  }
  if (!root->requires_grad) {
    throw std::runtime_error("backward on a tensor that does not require grad");
  }

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  struct Frame {
    Node* n;
    size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({root.get(), 0});
  seen.insert(root.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      Node* p = f.n->parents[f.next++].get();
      if (p->released) {
        throw std::runtime_error("backward through a released graph; re-run forward first");
      }
      if (seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  ensure_grad(*root);
  root->grad[0] = 1.0f;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->backprop) continue;
    ensure_grad(*n);
    n->backprop(*n);
  }

  // release: interior nodes drop their edges and scratch grads; leaves keep
  // accumulated grads for the optimizer
  for (Node* n : order) {
    if (n->backprop) {
      n->backprop = nullptr;
      n->parents.clear();
      n->released = true;
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

// ---- elementwise / broadcast ----

namespace {

template <typename FwdFn, typename BwdA, typename BwdB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, FwdFn fwd, BwdA bwd_a,
                 BwdB bwd_b) {
  BCast k = bcast_kind(a.shape(), b.shape(), name);
  size_t na = a.numel(), nb = b.numel();
  std::vector<float> out(na);
  auto av = a.data();
  auto bv = b.data();
  if (k == BCast::same) {
    for (size_t i = 0; i < na; ++i) out[i] = fwd(av[i], bv[i]);
  } else if (k == BCast::scalar) {
    float s = bv[0];
    for (size_t i = 0; i < na; ++i) out[i] = fwd(av[i], s);
  } else {
    for (size_t i = 0; i < na; ++i) out[i] = fwd(av[i], bv[i % nb]);
  }
  return make_op(name, a.shape(), std::move(out), {a, b},
                 [k, na, nb, bwd_a, bwd_b](Node& self) {
                   Node* pa = self.parents[0].get();
                   Node* pb = self.parents[1].get();
                   if (pa->requires_grad) {
                     ensure_grad(*pa);
                     for (size_t i = 0; i < na; ++i) {
                       size_t bi = (k == BCast::same) ? i : (k == BCast::scalar ? 0 : i % nb);
                       pa->grad[i] += bwd_a(self.grad[i], pa->value[i], pb->value[bi]);
                     }
                   }
                   if (pb->requires_grad) {
                     ensure_grad(*pb);
                     // f64 accumulation per output slot of the broadcast reduce
                     std::vector<double> acc(nb, 0.0);
                     for (size_t i = 0; i < na; ++i) {
                       size_t bi = (k == BCast::same) ? i : (k == BCast::scalar ? 0 : i % nb);
                       acc[bi] += bwd_b(self.grad[i], pa->value[i], pb->value[bi]);
                     }
                     for (size_t i = 0; i < nb; ++i) pb->grad[i] += float(acc[i]);
                   }
                 });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](float x, float y) { return x + y; },
      [](float g, float, float) { return g; }, [](float g, float, float) { return double(g); });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](float x, float y) { return x - y; },
      [](float g, float, float) { return g; }, [](float g, float, float) { return -double(g); });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](float x, float y) { return x * y; },
      [](float g, float, float y) { return g * y; },
      [](float g, float x, float) { return double(g) * double(x); });
}

Tensor scale(const Tensor& a, float s) {
  size_t n = a.numel();
  std::vector<float> out(n);
  auto av = a.data();
  for (size_t i = 0; i < n; ++i) out[i] = av[i] * s;
  return make_op("scale", a.shape(), std::move(out), {a}, [s, n](Node& self) {
    Node* pa = self.parents[0].get();
    if (!pa->requires_grad) return;
    ensure_grad(*pa);
    for (size_t i = 0; i < n; ++i) pa->grad[i] += self.grad[i] * s;
  });
}

Tensor add_scalar(const Tensor& a, float s) {
  size_t n = a.numel();
  std::vector<float> out(n);
  auto av = a.data();
  for (size_t i = 0; i < n; ++i) out[i] = av[i] + s;
  return make_op("add_scalar", a.shape(), std::move(out), {a}, [n](Node& self) {
    Node* pa = self.parents[0].get();
    if (!pa->requires_grad) return;
    ensure_grad(*pa);
    for (size_t i = 0; i < n; ++i) pa->grad[i] += self.grad[i];
  });
}

// ---- matmul ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  int ra = int(sa.size()), rb = int(sb.size());

  auto bad = [&] {
    return std::invalid_argument("matmul: unsupported shapes " + shape_str(sa) + " x " +
                                 shape_str(sb));
  };

  if (ra == 2 && rb == 2) {
    int m = sa[0], k = sa[1], k2 = sb[0], n = sb[1];
    if (k != k2) throw bad();
    std::vector<float> out(size_t(m) * n);
    mm_nn(a.data().data(), b.data().data(), out.data(), m, k, n, false);
    return make_op("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
      Node* pa = self.parents[0].get();
      Node* pb = self.parents[1].get();
      if (pa->requires_grad) {
        ensure_grad(*pa);
        mm_nt(self.grad.data(), pb->value.data(), pa->grad.data(), m, n, k, true);
      }
      if (pb->requires_grad) {
        ensure_grad(*pb);
        mm_tn(pa->value.data(), self.grad.data(), pb->grad.data(), m, k, n, true);
      }
    });
  }

  if (ra == 3 && rb == 3) {
    int B = sa[0], m = sa[1], k = sa[2];
    if (sb[0] != B || sb[1] != k) throw bad();
    int n = sb[2];
    std::vector<float> out(size_t(B) * m * n);
    for (int bb = 0; bb < B; ++bb) {
      mm_nn(a.data().data() + size_t(bb) * m * k, b.data().data() + size_t(bb) * k * n,
            out.data() + size_t(bb) * m * n, m, k, n, false);
    }
    return make_op("matmul", {B, m, n}, std::move(out), {a, b}, [B, m, k, n](Node& self) {
      Node* pa = self.parents[0].get();
      Node* pb = self.parents[1].get();
      for (int bb = 0; bb < B; ++bb) {
        const float* g = self.grad.data() + size_t(bb) * m * n;
        if (pa->requires_grad) {
          ensure_grad(*pa);
          mm_nt(g, pb->value.data() + size_t(bb) * k * n,
                pa->grad.data() + size_t(bb) * m * k, m, n, k, true);
        }
        if (pb->requires_grad) {
          ensure_grad(*pb);
          mm_tn(pa->value.data() + size_t(bb) * m * k, g,
                pb->grad.data() + size_t(bb) * k * n, m, k, n, true);
        }
      }
    });
  }

  if (ra == 3 && rb == 2) {
    int B = sa[0], m = sa[1], k = sa[2];
    if (sb[0] != k) throw bad();
    int n = sb[1];
    std::vector<float> out(size_t(B) * m * n);
    mm_nn(a.data().data(), b.data().data(), out.data(), B * m, k, n, false);
    return make_op("matmul", {B, m, n}, std::move(out), {a, b}, [B, m, k, n](Node& self) {
      Node* pa = self.parents[0].get();
      Node* pb = self.parents[1].get();
      if (pa->requires_grad) {
        ensure_grad(*pa);
        mm_nt(self.grad.data(), pb->value.data(), pa->grad.data(), B * m, n, k, true);
      }
      if (pb->requires_grad) {
        ensure_grad(*pb);
        mm_tn(pa->value.data(), self.grad.data(), pb->grad.data(), B * m, k, n, true);
      }
    });
  }

  throw bad();
}

// ---- activations ----

Tensor relu(const Tensor& x) {
  size_t n = x.numel();
  std::vector<float> out(n);
  auto xv = x.data();
  for (size_t i = 0; i < n; ++i) out[i] = xv[i] > 0.0f ? xv[i] : 0.0f;
  return make_op("relu", x.shape(), std::move(out), {x}, [n](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    ensure_grad(*p);
    for (size_t i = 0; i < n; ++i) {
      if (p->value[i] > 0.0f) p->grad[i] += self.grad[i];
    }
  });
}

namespace {
constexpr float kGeluC = 0.79788456f;  // sqrt(2/pi)
constexpr float kGeluA = 0.044715f;

// rational tanh approximation (Eigen's float kernel): x*P(x^2)/Q(x^2) on
// [-9,9], clamped outside; within a few ulps of tanhf, and plain arithmetic
// so the surrounding loops vectorize
inline float fast_tanhf(float x) {
  constexpr float a1 = 4.89352455891786e-03f, a3 = 6.37261928875436e-04f,
                  a5 = 1.48572235717979e-05f, a7 = 5.12229709037114e-08f,
                  a9 = -8.60467152213735e-11f, a11 = 2.00018790482477e-13f,
                  a13 = -2.76076847742355e-16f;
  constexpr float b0 = 4.89352518554385e-03f, b2 = 2.26843463243900e-03f,
                  b4 = 1.18534705686654e-04f, b6 = 1.19825839466702e-06f;
  x = x < -9.0f ? -9.0f : (x > 9.0f ? 9.0f : x);
  float x2 = x * x;
  float p = a13;
  p = p * x2 + a11;
  p = p * x2 + a9;
  p = p * x2 + a7;
  p = p * x2 + a5;
  p = p * x2 + a3;
  p = p * x2 + a1;
  p = p * x;
  float q = b6;
  q = q * x2 + b4;
  q = q * x2 + b2;
  q = q * x2 + b0;
  return p / q;
}
}  // namespace

Tensor gelu(const Tensor& x) {
  size_t n = x.numel();
  std::vector<float> out(n);
  auto xv = x.data();
  for (size_t i = 0; i < n; ++i) {
    float v = xv[i];
    float u = kGeluC * (v + kGeluA * v * v * v);
    out[i] = 0.5f * v * (1.0f + fast_tanhf(u));
  }
  return make_op("gelu", x.shape(), std::move(out), {x}, [n](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    ensure_grad(*p);
    for (size_t i = 0; i < n; ++i) {
      float v = p->value[i];
      float u = kGeluC * (v + kGeluA * v * v * v);
      float t = fast_tanhf(u);
      float du = kGeluC * (1.0f + 3.0f * kGeluA * v * v);
      float d = 0.5f * (1.0f + t) + 0.5f * v * (1.0f - t * t) * du;
      p->grad[i] += self.grad[i] * d;
    }
  });
}

Tensor sigmoid(const Tensor& x) {
  size_t n = x.numel();
  std::vector<float> out(n);
  auto xv = x.data();
  for (size_t i = 0; i < n; ++i) out[i] = float(1.0 / (1.0 + std::exp(-double(xv[i]))));
  return make_op("sigmoid", x.shape(), std::move(out), {x}, [n](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    ensure_grad(*p);
    for (size_t i = 0; i < n; ++i) {
      float y = self.value[i];
      p->grad[i] += self.grad[i] * y * (1.0f - y);
    }
  });
}

// ---- layernorm / softmax ----

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  const Shape& s = x.shape();
  int n = s.back();
  if (gamma.shape() != Shape{n} || beta.shape() != Shape{n}) {
    throw std::invalid_argument("layernorm: gamma/beta must have shape [" + std::to_string(n) +
                                "]");
  }
  size_t rows = x.numel() / size_t(n);
  std::vector<float> out(x.numel());
  auto mu = std::make_shared<std::vector<float>>(rows);
  auto rstd = std::make_shared<std::vector<float>>(rows);
  auto xv = x.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  for (size_t r = 0; r < rows; ++r) {
    const float* row = xv.data() + r * n;
    double m = 0.0;
    for (int j = 0; j < n; ++j) m += row[j];
    m /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      double d = row[j] - m;
      var += d * d;
    }
    var /= n;
    double rs = 1.0 / std::sqrt(var + double(eps));
    (*mu)[r] = float(m);
    (*rstd)[r] = float(rs);
    float* o = out.data() + r * n;
    for (int j = 0; j < n; ++j) o[j] = float((double(row[j]) - m) * rs) * gv[j] + bv[j];
  }
  return make_op("layernorm", s, std::move(out), {x, gamma, beta},
                 [rows, n, mu, rstd](Node& self) {
                   Node* px = self.parents[0].get();
                   Node* pg = self.parents[1].get();
                   Node* pb = self.parents[2].get();
                   std::vector<double> dgamma(n, 0.0), dbeta(n, 0.0);
                   for (size_t r = 0; r < rows; ++r) {
                     const float* xrow = px->value.data() + r * n;
                     const float* grow = self.grad.data() + r * n;
                     float m = (*mu)[r], rs = (*rstd)[r];
                     double s1 = 0.0, s2 = 0.0;
                     for (int j = 0; j < n; ++j) {
                       double xh = (double(xrow[j]) - m) * rs;
                       double dyg = double(grow[j]) * pg->value[j];
                       s1 += dyg;
                       s2 += dyg * xh;
                       dgamma[j] += double(grow[j]) * xh;
                       dbeta[j] += grow[j];
                     }
                     if (px->requires_grad) {
                       ensure_grad(*px);
                       float* dx = px->grad.data() + r * n;
                       s1 /= n;
                       s2 /= n;
                       for (int j = 0; j < n; ++j) {
                         double xh = (double(xrow[j]) - m) * rs;
                         double dyg = double(grow[j]) * pg->value[j];
                         dx[j] += float((dyg - s1 - xh * s2) * rs);
                       }
                     }
                   }
                   if (pg->requires_grad) {
                     ensure_grad(*pg);
                     for (int j = 0; j < n; ++j) pg->grad[j] += float(dgamma[j]);
                   }
                   if (pb->requires_grad) {
                     ensure_grad(*pb);
                     for (int j = 0; j < n; ++j) pb->grad[j] += float(dbeta[j]);
                   }
                 });
}

Tensor softmax_lastdim(const Tensor& x) {
  const Shape& s = x.shape();
  int n = s.back();
  size_t rows = x.numel() / size_t(n);
  std::vector<float> out(x.numel());
  auto xv = x.data();
  for (size_t r = 0; r < rows; ++r) {
    const float* row = xv.data() + r * n;
    float* o = out.data() + r * n;
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, double(row[j]));
    double den = 0.0;
    for (int j = 0; j < n; ++j) den += std::exp(double(row[j]) - mx);
    for (int j = 0; j < n; ++j) o[j] = float(std::exp(double(row[j]) - mx) / den);
  }
  return make_op("softmax", s, std::move(out), {x}, [rows, n](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    ensure_grad(*p);
    for (size_t r = 0; r < rows; ++r) {
      const float* y = self.value.data() + r * n;
      const float* dy = self.grad.data() + r * n;
      float* dx = p->grad.data() + r * n;
      double dot = 0.0;
      for (int j = 0; j < n; ++j) dot += double(dy[j]) * double(y[j]);
      for (int j = 0; j < n; ++j) dx[j] += float(double(y[j]) * (double(dy[j]) - dot));
    }
  });
}

// ---- losses ----

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw std::invalid_argument("mse_loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
                                shape_str(target.shape()));
  }
  size_t n = pred.numel();
  auto pv = pred.data();
  auto tv = target.data();
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double d = double(pv[i]) - double(tv[i]);
    acc += d * d;
  }
  float loss = float(acc / double(n));
  return make_op("mse_loss", {1}, {loss}, {pred, target}, [n](Node& self) {
    Node* pp = self.parents[0].get();
    Node* pt = self.parents[1].get();
    float g = self.grad[0];
    float c = 2.0f / float(n);
    if (pp->requires_grad) ensure_grad(*pp);
    if (pt->requires_grad) ensure_grad(*pt);
    for (size_t i = 0; i < n; ++i) {
      float d = (pp->value[i] - pt->value[i]) * c * g;
      if (pp->requires_grad) pp->grad[i] += d;
      if (pt->requires_grad) pt->grad[i] -= d;
    }
  });
}

Tensor bce_with_logits_loss(const Tensor& logits, const Tensor& targets) {
  if (logits.shape() != targets.shape()) {
    throw std::invalid_argument("bce_with_logits_loss: shape mismatch");
  }
  size_t n = logits.numel();
  auto zv = logits.data();
  auto yv = targets.data();
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double z = zv[i], y = yv[i];
    acc += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  float loss = float(acc / double(n));
  return make_op("bce_with_logits_loss", {1}, {loss}, {logits, targets}, [n](Node& self) {
    Node* pz = self.parents[0].get();
    Node* py = self.parents[1].get();
    float g = self.grad[0];
    float c = g / float(n);
    if (pz->requires_grad) {
      ensure_grad(*pz);
      for (size_t i = 0; i < n; ++i) {
        double sz = 1.0 / (1.0 + std::exp(-double(pz->value[i])));
        pz->grad[i] += float((sz - double(py->value[i]))) * c;
      }
    }
    if (py->requires_grad) {
      ensure_grad(*py);
      for (size_t i = 0; i < n; ++i) py->grad[i] += -pz->value[i] * c;
    }
  });
}

Tensor sum_all(const Tensor& x) {
  size_t n = x.numel();
  auto xv = x.data();
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) acc += xv[i];
  return make_op("sum_all", {1}, {float(acc)}, {x}, [n](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    ensure_grad(*p);
    float g = self.grad[0];
    for (size_t i = 0; i < n; ++i) p->grad[i] += g;
  });
}

Tensor mean_all(const Tensor& x) {
  size_t n = x.numel();
  auto xv = x.data();
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) acc += xv[i];
  return make_op("mean_all", {1}, {float(acc / double(n))}, {x}, [n](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    ensure_grad(*p);
    float g = self.grad[0] / float(n);
    for (size_t i = 0; i < n; ++i) p->grad[i] += g;
  });
}

// ---- shape ops ----

Tensor concat_lastdim(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_lastdim: no inputs");
  Shape lead = parts[0].shape();
  lead.pop_back();
  int total = 0;
  std::vector<int> widths;
  for (const auto& p : parts) {
    Shape l = p.shape();
    int w = l.back();
    l.pop_back();
    if (l != lead) {
      throw std::invalid_argument("concat_lastdim: leading dims differ");
    }
    widths.push_back(w);
    total += w;
  }
  size_t rows = 1;
  for (int d : lead) rows *= size_t(d);
  Shape out_shape = lead;
  out_shape.push_back(total);
  std::vector<float> out(rows * size_t(total));
  int off = 0;
  for (size_t pi = 0; pi < parts.size(); ++pi) {
    int w = widths[pi];
    auto pv = parts[pi].data();
    for (size_t r = 0; r < rows; ++r) {
      std::memcpy(out.data() + r * total + off, pv.data() + r * w, size_t(w) * sizeof(float));
    }
    off += w;
  }
  std::vector<Tensor> ps = parts;
  return make_op("concat_lastdim", std::move(out_shape), std::move(out), std::move(ps),
                 [rows, total, widths](Node& self) {
                   int off = 0;
                   for (size_t pi = 0; pi < self.parents.size(); ++pi) {
                     Node* p = self.parents[pi].get();
                     int w = widths[pi];
                     if (p->requires_grad) {
                       ensure_grad(*p);
                       for (size_t r = 0; r < rows; ++r) {
                         const float* g = self.grad.data() + r * total + off;
                         float* pg = p->grad.data() + r * w;
                         for (int j = 0; j < w; ++j) pg[j] += g[j];
                       }
                     }
                     off += w;
                   }
                 });
}

Tensor slice_lastdim(const Tensor& x, int start, int len) {
  const Shape& s = x.shape();
  int n = s.back();
  if (start < 0 || len <= 0 || start + len > n) {
    throw std::invalid_argument("slice_lastdim: range [" + std::to_string(start) + "," +
                                std::to_string(start + len) + ") out of width " +
                                std::to_string(n));
  }
  size_t rows = x.numel() / size_t(n);
  Shape out_shape = s;
  out_shape.back() = len;
  std::vector<float> out(rows * size_t(len));
  auto xv = x.data();
  for (size_t r = 0; r < rows; ++r) {
    std::memcpy(out.data() + r * len, xv.data() + r * n + start, size_t(len) * sizeof(float));
  }
  return make_op("slice_lastdim", std::move(out_shape), std::move(out), {x},
                 [rows, n, start, len](Node& self) {
                   Node* p = self.parents[0].get();
                   if (!p->requires_grad) return;
                   ensure_grad(*p);
                   for (size_t r = 0; r < rows; ++r) {
                     const float* g = self.grad.data() + r * len;
                     float* pg = p->grad.data() + r * n + start;
                     for (int j = 0; j < len; ++j) pg[j] += g[j];
                   }
                 });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw std::invalid_argument("reshape: numel mismatch " + shape_str(x.shape()) + " -> " +
                                shape_str(shape));
  }
  std::vector<float> out(x.data().begin(), x.data().end());
  return make_op("reshape", std::move(shape), std::move(out), {x}, [](Node& self) {
    Node* p = self.parents[0].get();
    if (!p->requires_grad) return;
    ensure_grad(*p);
    for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
  });
}

Tensor transpose_last2(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.size() < 2) throw std::invalid_argument("transpose_last2 requires rank >= 2");
  int m = s[s.size() - 2], n = s[s.size() - 1];
  size_t batch = x.numel() / (size_t(m) * n);
  Shape out_shape = s;
  std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
  std::vector<float> out(x.numel());
  auto xv = x.data();
  for (size_t b = 0; b < batch; ++b) {
    const float* src = xv.data() + b * size_t(m) * n;
    float* dst = out.data() + b * size_t(m) * n;
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) dst[size_t(j) * m + i] = src[size_t(i) * n + j];
    }
  }
  return make_op("transpose_last2", std::move(out_shape), std::move(out), {x},
                 [batch, m, n](Node& self) {
                   Node* p = self.parents[0].get();
                   if (!p->requires_grad) return;
                   ensure_grad(*p);
                   for (size_t b = 0; b < batch; ++b) {
                     const float* g = self.grad.data() + b * size_t(m) * n;
                     float* pg = p->grad.data() + b * size_t(m) * n;
                     for (int j = 0; j < n; ++j) {
                       for (int i = 0; i < m; ++i) pg[size_t(i) * n + j] += g[size_t(j) * m + i];
                     }
                   }
                 });
}

Tensor maxpool_groups(const Tensor& x, int group_rows) {
  const Shape& s = x.shape();
  if (s.size() != 2) throw std::invalid_argument("maxpool_groups requires [rows, h]");
  int rows = s[0], h = s[1];
  if (group_rows <= 0 || rows % group_rows != 0) {
    throw std::invalid_argument("maxpool_groups: rows not divisible by group");
  }
  int groups = rows / group_rows;
  std::vector<float> out(size_t(groups) * h);
  auto idx = std::make_shared<std::vector<int32_t>>(size_t(groups) * h);
  auto xv = x.data();
  for (int g = 0; g < groups; ++g) {
    const float* base = xv.data() + size_t(g) * group_rows * h;
    float* o = out.data() + size_t(g) * h;
    int32_t* ix = idx->data() + size_t(g) * h;
    for (int j = 0; j < h; ++j) {
      float best = base[j];
      int32_t bi = 0;
      for (int r = 1; r < group_rows; ++r) {
        float v = base[size_t(r) * h + j];
        if (v > best) {
          best = v;
          bi = r;
        }
      }
      o[j] = best;
      ix[j] = bi;
    }
  }
  return make_op("maxpool_groups", {groups, h}, std::move(out), {x},
                 [groups, group_rows, h, idx](Node& self) {
                   Node* p = self.parents[0].get();
                   if (!p->requires_grad) return;
                   ensure_grad(*p);
                   for (int g = 0; g < groups; ++g) {
                     const float* gr = self.grad.data() + size_t(g) * h;
                     const int32_t* ix = idx->data() + size_t(g) * h;
                     float* pg = p->grad.data() + size_t(g) * group_rows * h;
                     for (int j = 0; j < h; ++j) pg[size_t(ix[j]) * h + j] += gr[j];
                   }
                 });
}

Tensor detach(const Tensor& x) {
  std::vector<float> v(x.data().begin(), x.data().end());
  auto n = new_node(x.shape(), std::move(v));
  return Tensor::wrap(std::move(n));
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add(matmul(x, w), b);
}

Tensor rows_max(const Tensor& feats, std::span<const int> rows) {
  if (feats.requires_grad() && g_grad_enabled) {
    throw std::runtime_error("rows_max is inference-only");
  }
  const Shape& s = feats.shape();
  if (s.size() != 2) throw std::invalid_argument("rows_max requires [P, h]");
  int P = s[0], h = s[1];
  if (rows.empty()) throw std::invalid_argument("rows_max: empty row set");
  std::vector<float> out(static_cast<size_t>(h));
  auto fv = feats.data();
  {
    int r0 = rows[0];
    if (r0 < 0 || r0 >= P) throw std::out_of_range("rows_max row index");
    std::memcpy(out.data(), fv.data() + size_t(r0) * h, size_t(h) * sizeof(float));
  }
  for (size_t i = 1; i < rows.size(); ++i) {
    int r = rows[i];
    if (r < 0 || r >= P) throw std::out_of_range("rows_max row index");
    const float* row = fv.data() + size_t(r) * h;
    for (int j = 0; j < h; ++j) {
      if (row[j] > out[j]) out[j] = row[j];
    }
  }
  return Tensor::from({1, h}, std::move(out));
}

// ---- optimizer ----

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].requires_grad()) {
      throw std::invalid_argument("AdamW: parameter " + std::to_string(i) +
                                  " does not require grad");
    }
    m_[i].assign(params_[i].numel(), 0.0f);
    v_[i].assign(params_[i].numel(), 0.0f);
  }
}

void AdamW::step() {
  ++t_;
  double bc1 = 1.0 - std::pow(double(cfg_.beta1), double(t_));
  double bc2 = 1.0 - std::pow(double(cfg_.beta2), double(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) {
      throw std::runtime_error("AdamW::step: gradient not populated for parameter " +
                               std::to_string(i));
    }
    auto pv = p.node()->value.data();
    auto gv = p.node()->grad.data();
    auto* m = m_[i].data();
    auto* v = v_[i].data();
    size_t n = p.numel();
    for (size_t j = 0; j < n; ++j) {
      double g = gv[j];
      m[j] = float(cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g);
      v[j] = float(cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g);
      double mhat = m[j] / bc1;
      double vhat = v[j] / bc2;
      double upd = mhat / (std::sqrt(vhat) + double(cfg_.eps));
      pv[j] = float(pv[j] - double(cfg_.lr) * double(cfg_.weight_decay) * pv[j] -
                    double(cfg_.lr) * upd);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

// ---- ParamMap ----

Tensor& ParamMap::add(const std::string& name, Tensor t) {
  if (find(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  items.emplace_back(name, std::move(t));
  return items.back().second;
}

Tensor* ParamMap::find(const std::string& name) {
  for (auto& [k, v] : items) {
    if (k == name) return &v;
  }
  return nullptr;
}

const Tensor* ParamMap::find(const std::string& name) const {
  for (const auto& [k, v] : items) {
    if (k == name) return &v;
  }
  return nullptr;
}

std::vector<Tensor> ParamMap::tensors() const {
  std::vector<Tensor> out;
  out.reserve(items.size());
  for (const auto& [k, v] : items) out.push_back(v);
  return out;
}

size_t ParamMap::total_params() const {
  size_t n = 0;
  for (const auto& [k, v] : items) n += v.numel();
  return n;
}

void ParamMap::merge(const std::string& prefix, const ParamMap& other) {
  for (const auto& [k, v] : other.items) add(prefix + "/" + k, v);
}

}  // namespace dalir
