#pragma once

#include <atomic>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dt/common.hpp"
#include "dt/gemm.hpp"
#include "dt/rng.hpp"
#include "dt/tensor.hpp"

// Define-by-run reverse-mode autodiff on dense tensors. Graphs are built per
// forward pass and freed when the last Var goes out of scope. Creation order
// is a valid topological order, so backward() just replays nodes by
// descending id.

namespace dt {
namespace ad {

inline std::atomic<int64_t>& node_counter() {
  static std::atomic<int64_t> c{0};
  return c;
}

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first use
  bool needs_grad = false;
  int64_t id = 0;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backprop;

  void ensure_grad() {
    if (grad.numel() != value.numel()) grad = Tensor<T>(value.shape);
  }
  void add_grad(size_t i, T g) { grad.data[i] += g; }
};

template <class T>
using Var = std::shared_ptr<Node<T>>;

template <class T>
Var<T> constant(Tensor<T> v) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(v);
  n->id = node_counter()++;
  return n;
}

template <class T>
Var<T> scalar(T v) {
  return constant(Tensor<T>({1}, std::vector<T>{v}));
}

// Leaf with gradient accumulation; model parameters.
template <class T>
Var<T> param(Tensor<T> v) {
  auto n = constant(std::move(v));
  n->needs_grad = true;
  n->ensure_grad();
  return n;
}

template <class T>
Var<T> detach(const Var<T>& x) {
  return constant(Tensor<T>(x->value));
}

template <class T, class... Parents>
Var<T> make_op(Tensor<T> value, std::function<void(Node<T>&)> fn, Parents... parents) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->id = node_counter()++;
  bool need = false;
  (void)std::initializer_list<int>{(n->parents.push_back(parents), need |= parents->needs_grad, 0)...};
  if (need) {
    n->needs_grad = true;
    n->backprop = std::move(fn);
  }
  return n;
}

template <class T>
void backward(const Var<T>& loss) {
  require(loss->value.numel() == 1, "backward expects a scalar loss");
  if (!loss->needs_grad) return;
  // Collect the subgraph that needs gradients.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<Node<T>*> stack{loss.get()};
  seen.insert(loss.get());
  while (!stack.empty()) {
    Node<T>* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& p : n->parents) {
      if (p->needs_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(), [](Node<T>* a, Node<T>* b) { return a->id > b->id; });
  for (Node<T>* n : order) {
    if (n != loss.get()) {
      n->ensure_grad();
      if (n->backprop) n->grad.fill(T(0));  // interior nodes; leaves keep accumulating
    }
  }
  // Interior grads must be zeroed before the sweep, leaves accumulate across
  // backward calls until the optimizer clears them. The loop above zeroes only
  // nodes that own a backprop fn; fresh interior nodes start zeroed anyway.
  loss->ensure_grad();
  loss->grad.fill(T(0));
  loss->grad.data[0] = T(1);
  for (Node<T>* n : order)
    if (n->backprop) n->backprop(*n);
}

// ---- elementwise binary ----

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require(a->value.same_shape(b->value), "add: shape mismatch");
  Tensor<T> out(a->value.shape);
  for (size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] + b->value[i];
  return make_op<T>(std::move(out),
                    [](Node<T>& n) {
                      auto &pa = *n.parents[0], &pb = *n.parents[1];
                      if (pa.needs_grad) {
                        pa.ensure_grad();
                        for (size_t i = 0; i < n.grad.numel(); ++i) pa.grad[i] += n.grad[i];
                      }
                      if (pb.needs_grad) {
                        pb.ensure_grad();
                        for (size_t i = 0; i < n.grad.numel(); ++i) pb.grad[i] += n.grad[i];
                      }
                    },
                    a, b);
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require(a->value.same_shape(b->value), "sub: shape mismatch");
  Tensor<T> out(a->value.shape);
  for (size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] - b->value[i];
  return make_op<T>(std::move(out),
                    [](Node<T>& n) {
                      auto &pa = *n.parents[0], &pb = *n.parents[1];
                      if (pa.needs_grad) {
                        pa.ensure_grad();
                        for (size_t i = 0; i < n.grad.numel(); ++i) pa.grad[i] += n.grad[i];
                      }
                      if (pb.needs_grad) {
                        pb.ensure_grad();
                        for (size_t i = 0; i < n.grad.numel(); ++i) pb.grad[i] -= n.grad[i];
                      }
                    },
                    a, b);
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require(a->value.same_shape(b->value), "mul: shape mismatch");
  Tensor<T> out(a->value.shape);
  for (size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * b->value[i];
  return make_op<T>(std::move(out),
                    [](Node<T>& n) {
                      auto &pa = *n.parents[0], &pb = *n.parents[1];
                      if (pa.needs_grad) {
                        pa.ensure_grad();
                        for (size_t i = 0; i < n.grad.numel(); ++i) pa.grad[i] += n.grad[i] * pb.value[i];
                      }
                      if (pb.needs_grad) {
                        pb.ensure_grad();
                        for (size_t i = 0; i < n.grad.numel(); ++i) pb.grad[i] += n.grad[i] * pa.value[i];
                      }
                    },
                    a, b);
}

template <class T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  require(a->value.same_shape(b->value), "div: shape mismatch");
  Tensor<T> out(a->value.shape);
  for (size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] / b->value[i];
  return make_op<T>(std::move(out),
                    [](Node<T>& n) {
                      auto &pa = *n.parents[0], &pb = *n.parents[1];
                      if (pa.needs_grad) {
                        pa.ensure_grad();
                        for (size_t i = 0; i < n.grad.numel(); ++i) pa.grad[i] += n.grad[i] / pb.value[i];
                      }
                      if (pb.needs_grad) {
                        pb.ensure_grad();
                        for (size_t i = 0; i < n.grad.numel(); ++i)
                          pb.grad[i] -= n.grad[i] * pa.value[i] / (pb.value[i] * pb.value[i]);
                      }
                    },
                    a, b);
}

// ---- scalar / unary ----

template <class T>
Var<T> add_scalar(const Var<T>& a, T c) {
  Tensor<T> out(a->value.shape);
  for (size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] + c;
  return make_op<T>(std::move(out),
                    [](Node<T>& n) {
                      auto& pa = *n.parents[0];
                      pa.ensure_grad();
                      for (size_t i = 0; i < n.grad.numel(); ++i) pa.grad[i] += n.grad[i];
                    },
                    a);
}

template <class T>
Var<T> mul_scalar(const Var<T>& a, T c) {
  Tensor<T> out(a->value.shape);
  for (size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * c;
  return make_op<T>(std::move(out),
                    [c](Node<T>& n) {
                      auto& pa = *n.parents[0];
                      pa.ensure_grad();
                      for (size_t i = 0; i < n.grad.numel(); ++i) pa.grad[i] += n.grad[i] * c;
                    },
                    a);
}

template <class T>
Var<T> neg(const Var<T>& a) {
  return mul_scalar(a, T(-1));
}

template <class T>
Var<T> exp_v(const Var<T>& a) {
  Tensor<T> out(a->value.shape);
  for (size_t i = 0; i < out.numel(); ++i) out[i] = std::exp(a->value[i]);
  return make_op<T>(std::move(out),
                    [](Node<T>& n) {
                      auto& pa = *n.parents[0];
                      pa.ensure_grad();
                      for (size_t i = 0; i < n.grad.numel(); ++i) pa.grad[i] += n.grad[i] * n.value[i];
                    },
                    a);
}

template <class T>
Var<T> log_v(const Var<T>& a) {
  Tensor<T> out(a->value.shape);
  for (size_t i = 0; i < out.numel(); ++i) out[i] = std::log(a->value[i]);
  return make_op<T>(std::move(out),
                    [](Node<T>& n) {
                      auto& pa = *n.parents[0];
                      pa.ensure_grad();
                      for (size_t i = 0; i < n.grad.numel(); ++i) pa.grad[i] += n.grad[i] / pa.value[i];
                    },
                    a);
}

// Gradient is zero where the input was clipped.
template <class T>
Var<T> clamp_v(const Var<T>& a, T lo, T hi) {
  Tensor<T> out(a->value.shape);
  for (size_t i = 0; i < out.numel(); ++i) out[i] = std::min(hi, std::max(lo, a->value[i]));
  return make_op<T>(std::move(out),
                    [lo, hi](Node<T>& n) {
                      auto& pa = *n.parents[0];
                      pa.ensure_grad();
                      for (size_t i = 0; i < n.grad.numel(); ++i)
                        if (pa.value[i] > lo && pa.value[i] < hi) pa.grad[i] += n.grad[i];
                    },
                    a);
}

// Subgradient 0 at the origin.
template <class T>
Var<T> abs_v(const Var<T>& a) {
  Tensor<T> out(a->value.shape);
  for (size_t i = 0; i < out.numel(); ++i) out[i] = std::abs(a->value[i]);
  return make_op<T>(std::move(out),
                    [](Node<T>& n) {
                      auto& pa = *n.parents[0];
                      pa.ensure_grad();
                      for (size_t i = 0; i < n.grad.numel(); ++i) {
                        if (pa.value[i] > T(0))
                          pa.grad[i] += n.grad[i];
                        else if (pa.value[i] < T(0))
                          pa.grad[i] -= n.grad[i];
                      }
                    },
                    a);
}

template <class T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out(a->value.shape);
  for (size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] > T(0) ? a->value[i] : T(0);
  return make_op<T>(std::move(out),
                    [](Node<T>& n) {
                      auto& pa = *n.parents[0];
                      pa.ensure_grad();
                      for (size_t i = 0; i < n.grad.numel(); ++i)
                        if (pa.value[i] > T(0)) pa.grad[i] += n.grad[i];
                    },
                    a);
}

template <class T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
  Tensor<T> out(a->value.shape);
  for (size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] > T(0) ? a->value[i] : slope * a->value[i];
  return make_op<T>(std::move(out),
                    [slope](Node<T>& n) {
                      auto& pa = *n.parents[0];
                      pa.ensure_grad();
                      for (size_t i = 0; i < n.grad.numel(); ++i)
                        pa.grad[i] += n.grad[i] * (pa.value[i] > T(0) ? T(1) : slope);
                    },
                    a);
}

template <class T>
Var<T> tanh_v(const Var<T>& a) {
  Tensor<T> out(a->value.shape);
  for (size_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(a->value[i]);
  return make_op<T>(std::move(out),
                    [](Node<T>& n) {
                      auto& pa = *n.parents[0];
                      pa.ensure_grad();
                      for (size_t i = 0; i < n.grad.numel(); ++i)
                        pa.grad[i] += n.grad[i] * (T(1) - n.value[i] * n.value[i]);
                    },
                    a);
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out(a->value.shape);
  for (size_t i = 0; i < out.numel(); ++i) out[i] = T(1) / (T(1) + std::exp(-a->value[i]));
  return make_op<T>(std::move(out),
                    [](Node<T>& n) {
                      auto& pa = *n.parents[0];
                      pa.ensure_grad();
                      for (size_t i = 0; i < n.grad.numel(); ++i)
                        pa.grad[i] += n.grad[i] * n.value[i] * (T(1) - n.value[i]);
                    },
                    a);
}

// ---- reductions ----

template <class T>
Var<T> sum_all(const Var<T>& a) {
  Tensor<T> out({1});
  T acc = T(0);
  for (size_t i = 0; i < a->value.numel(); ++i) acc += a->value[i];
  out[0] = acc;
  return make_op<T>(std::move(out),
                    [](Node<T>& n) {
                      auto& pa = *n.parents[0];
                      pa.ensure_grad();
                      T g = n.grad[0];
                      for (size_t i = 0; i < pa.grad.numel(); ++i) pa.grad[i] += g;
                    },
                    a);
}

template <class T>
Var<T> mean_all(const Var<T>& a) {
  return mul_scalar(sum_all(a), T(1) / T(a->value.numel()));
}

// [N,C,H,W] -> [C]
template <class T>
Var<T> sum_nhw(const Var<T>& a) {
  require(a->value.shape.size() == 4, "sum_nhw expects NCHW");
  int N = a->value.dim(0), C = a->value.dim(1), HW = a->value.dim(2) * a->value.dim(3);
  Tensor<T> out({C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T* src = a->value.ptr() + (size_t(n) * C + c) * HW;
      T acc = T(0);
      for (int i = 0; i < HW; ++i) acc += src[i];
      out[size_t(c)] += acc;
    }
  return make_op<T>(std::move(out),
                    [N, C, HW](Node<T>& n) {
                      auto& pa = *n.parents[0];
                      pa.ensure_grad();
                      for (int b = 0; b < N; ++b)
                        for (int c = 0; c < C; ++c) {
                          T g = n.grad[size_t(c)];
                          T* dst = pa.grad.ptr() + (size_t(b) * C + c) * HW;
                          for (int i = 0; i < HW; ++i) dst[i] += g;
                        }
                    },
                    a);
}

// [N,C,H,W] -> [N,1,H,W]
template <class T>
Var<T> sum_c(const Var<T>& a) {
  require(a->value.shape.size() == 4, "sum_c expects NCHW");
  int N = a->value.dim(0), C = a->value.dim(1), H = a->value.dim(2), W = a->value.dim(3);
  int HW = H * W;
  Tensor<T> out({N, 1, H, W});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T* src = a->value.ptr() + (size_t(n) * C + c) * HW;
      T* dst = out.ptr() + size_t(n) * HW;
      for (int i = 0; i < HW; ++i) dst[i] += src[i];
    }
  return make_op<T>(std::move(out),
                    [N, C, HW](Node<T>& n) {
                      auto& pa = *n.parents[0];
                      pa.ensure_grad();
                      for (int b = 0; b < N; ++b)
                        for (int c = 0; c < C; ++c) {
                          const T* g = n.grad.ptr() + size_t(b) * HW;
                          T* dst = pa.grad.ptr() + (size_t(b) * C + c) * HW;
                          for (int i = 0; i < HW; ++i) dst[i] += g[i];
                        }
                    },
                    a);
}

// [N,1,H,W] (or [N,C,H,W]) -> [N], mean over everything but the batch axis.
template <class T>
Var<T> mean_per_sample(const Var<T>& a) {
  require(a->value.shape.size() == 4, "mean_per_sample expects NCHW");
  int N = a->value.dim(0);
  size_t M = a->value.numel() / size_t(N);
  Tensor<T> out({N});
  for (int n = 0; n < N; ++n) {
    const T* src = a->value.ptr() + size_t(n) * M;
    T acc = T(0);
    for (size_t i = 0; i < M; ++i) acc += src[i];
    out[size_t(n)] = acc / T(M);
  }
  return make_op<T>(std::move(out),
                    [N, M](Node<T>& n) {
                      auto& pa = *n.parents[0];
                      pa.ensure_grad();
                      for (int b = 0; b < N; ++b) {
                        T g = n.grad[size_t(b)] / T(M);
                        T* dst = pa.grad.ptr() + size_t(b) * M;
                        for (size_t i = 0; i < M; ++i) dst[i] += g;
                      }
                    },
                    a);
}

// <a, w> with constant weights; a is [N].
template <class T>
Var<T> dot_const(const Var<T>& a, const std::vector<T>& w) {
  require(a->value.numel() == w.size(), "dot_const: weight count mismatch");
  Tensor<T> out({1});
  T acc = T(0);
  for (size_t i = 0; i < w.size(); ++i) acc += a->value[i] * w[i];
  out[0] = acc;
  return make_op<T>(std::move(out),
                    [w](Node<T>& n) {
                      auto& pa = *n.parents[0];
                      pa.ensure_grad();
                      for (size_t i = 0; i < w.size(); ++i) pa.grad[i] += n.grad[0] * w[i];
                    },
                    a);
}

}  // namespace ad
}  // namespace dt
