/*
 * Copyright 2026 The swinct Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

/// @file tensor.hpp
/// @brief Reverse-mode autodiff tensor.
///
/// A Tensor is a shared handle to a graph node holding a dense row-major
/// value buffer, an optional gradient buffer, and a backward closure that
/// scatters the node's gradient into its parents. Calling backward() on a
/// scalar output runs the closures in reverse topological order. Gradients
/// accumulate across calls; callers zero them explicitly.

#pragma once

#include <functional>
#include <memory>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

#include "swinct/common.hpp"

namespace swinct {

/// Thread-local switch consulted when ops decide whether to record
/// backward closures. Disabled inside NoGradGuard scopes.
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_enabled_flag(); }

/// RAII scope that disables graph recording (inference / data paths).
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_enabled_flag()) { grad_enabled_flag() = false; }
  ~NoGradGuard() { grad_enabled_flag() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
struct TensorNode {
  static_assert(std::is_floating_point_v<T>,
                "TensorNode requires float or double");

  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // lazily sized; empty means all-zero
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  std::size_t numel() const { return value.size(); }

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  using node_type = TensorNode<T>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }

  static Tensor ones(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(1), requires_grad);
  }

  static Tensor full(Shape shape, T fill, bool requires_grad = false) {
    auto n = std::make_shared<node_type>();
    std::size_t count = shape_numel(shape);
    n->shape = std::move(shape);
    n->value.assign(count, fill);
    n->requires_grad = requires_grad && grad_enabled();
    return Tensor(std::move(n));
  }

  static Tensor from(Shape shape, std::vector<T> value,
                     bool requires_grad = false) {
    if (shape_numel(shape) != value.size())
      throw usage_error("Tensor::from: shape " + shape_str(shape) +
                        " does not match " + std::to_string(value.size()) +
                        " values");
    auto n = std::make_shared<node_type>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->requires_grad = requires_grad && grad_enabled();
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }

  const Shape& shape() const { return require().shape; }
  std::size_t rank() const { return require().shape.size(); }
  std::size_t dim(std::size_t i) const { return require().shape.at(i); }
  std::size_t numel() const { return require().numel(); }

  std::vector<T>& values() { return require().value; }
  const std::vector<T>& values() const { return require().value; }
  T* data() { return require().value.data(); }
  const T* data() const { return require().value.data(); }

  /// Gradient buffer, materialized as zeros on first access.
  const std::vector<T>& grad() const {
    require().ensure_grad();
    return require().grad;
  }
  T* grad_data() {
    require().ensure_grad();
    return require().grad.data();
  }

  bool requires_grad() const { return require().requires_grad; }

  /// Marks a leaf as trainable. Interior nodes get the flag from their
  /// inputs when the op is recorded, not from this.
  Tensor& set_requires_grad(bool flag) {
    require().requires_grad = flag;
    return *this;
  }

  T item() const {
    if (numel() != 1)
      throw usage_error("Tensor::item: expected 1 element, tensor has " +
                        std::to_string(numel()));
    return require().value[0];
  }

  void zero_grad() {
    auto& n = require();
    if (!n.grad.empty()) std::fill(n.grad.begin(), n.grad.end(), T(0));
  }

  /// Copy of the value with no graph attached.
  Tensor detach() const {
    auto& n = require();
    return from(n.shape, n.value, false);
  }

  /// Backward from a scalar output with seed gradient 1.
  void backward(bool retain_graph = false) {
    if (numel() != 1)
      throw usage_error(
          "Tensor::backward: implicit seed needs a scalar output, shape is " +
          shape_str(shape()));
    backward(std::vector<T>(1, T(1)), retain_graph);
  }

  /// Backward seeded with dL/d(this). Closures run in reverse topological
  /// order; unless retain_graph, each node's closure and parent links are
  /// released right after it runs so activation memory is returned early.
  void backward(const std::vector<T>& seed, bool retain_graph = false) {
    auto& root = require();
    if (!root.requires_grad)
      throw usage_error("Tensor::backward: output does not require grad");
    if (seed.size() != root.numel())
      throw usage_error("Tensor::backward: seed has " +
                        std::to_string(seed.size()) + " elements, output has " +
                        std::to_string(root.numel()));

    std::vector<std::shared_ptr<node_type>> order;
    topo_order(node_, order);

    root.ensure_grad();
    for (std::size_t i = 0; i < seed.size(); ++i) root.grad[i] += seed[i];

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      node_type& n = **it;
      if (n.backward_fn) n.backward_fn(n);
      if (!retain_graph) {
        n.backward_fn = nullptr;
        n.parents.clear();
      }
    }
  }

  const std::shared_ptr<node_type>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<node_type> n) : node_(std::move(n)) {}

  node_type& require() const {
    if (!node_) throw usage_error("operation on empty tensor");
    return *node_;
  }

  /// Iterative post-order DFS over grad-requiring nodes. Keeps shared
  /// ownership of every visited node so freeing edges mid-backward cannot
  /// drop a node that still has to run.
  static void topo_order(const std::shared_ptr<node_type>& start,
                         std::vector<std::shared_ptr<node_type>>& order) {
    struct Frame {
      std::shared_ptr<node_type> n;
      std::size_t next;
    };
    std::unordered_set<node_type*> visited;
    std::vector<Frame> stack;
    visited.insert(start.get());
    stack.push_back({start, 0});
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next < f.n->parents.size()) {
        auto p = f.n->parents[f.next++];
        if (p->requires_grad && visited.insert(p.get()).second)
          stack.push_back({std::move(p), 0});
      } else {
        order.push_back(std::move(f.n));
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<node_type> node_;

  template <typename U>
  friend Tensor<U> make_op(Shape, std::vector<U>, std::vector<Tensor<U>>,
                           std::function<void(TensorNode<U>&)>);
};

/// Builds an op result. When recording is on and any input requires grad,
/// the node keeps parent links and the backward closure; otherwise the
/// result is a detached constant. The closure receives the output node and
/// must accumulate (+=) into each grad-requiring parent it captured.
template <typename T>
Tensor<T> make_op(Shape shape, std::vector<T> value,
                  std::vector<Tensor<T>> parents,
                  std::function<void(TensorNode<T>&)> backward) {
  auto out = Tensor<T>::from(std::move(shape), std::move(value));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& p : parents) any = any || (p.defined() && p.requires_grad());
  if (!any) return out;
  auto& n = *out.node();
  n.requires_grad = true;
  n.parents.reserve(parents.size());
  for (const auto& p : parents)
    if (p.defined()) n.parents.push_back(p.node());
  n.backward_fn = std::move(backward);
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic. Shapes must match exactly; broadcasting variants
// that the model needs (bias rows, per-sample scales) are dedicated ops.
// ---------------------------------------------------------------------------

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                      const char* what) {
  if (a.shape() != b.shape())
    throw usage_error(std::string(what) + ": shape mismatch " +
                      shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "add");
  std::vector<T> v(a.numel());
  const T* pa = a.data();
  const T* pb = b.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = pa[i] + pb[i];
  auto an = a.node();
  auto bn = b.node();
  return make_op<T>(a.shape(), std::move(v), {a, b},
                    [an, bn](TensorNode<T>& out) {
                      if (an->requires_grad) {
                        an->ensure_grad();
                        for (std::size_t i = 0; i < out.grad.size(); ++i)
                          an->grad[i] += out.grad[i];
                      }
                      if (bn->requires_grad) {
                        bn->ensure_grad();
                        for (std::size_t i = 0; i < out.grad.size(); ++i)
                          bn->grad[i] += out.grad[i];
                      }
                    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "sub");
  std::vector<T> v(a.numel());
  const T* pa = a.data();
  const T* pb = b.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = pa[i] - pb[i];
  auto an = a.node();
  auto bn = b.node();
  return make_op<T>(a.shape(), std::move(v), {a, b},
                    [an, bn](TensorNode<T>& out) {
                      if (an->requires_grad) {
                        an->ensure_grad();
                        for (std::size_t i = 0; i < out.grad.size(); ++i)
                          an->grad[i] += out.grad[i];
                      }
                      if (bn->requires_grad) {
                        bn->ensure_grad();
                        for (std::size_t i = 0; i < out.grad.size(); ++i)
                          bn->grad[i] -= out.grad[i];
                      }
                    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "mul");
  std::vector<T> v(a.numel());
  const T* pa = a.data();
  const T* pb = b.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = pa[i] * pb[i];
  auto an = a.node();
  auto bn = b.node();
  return make_op<T>(a.shape(), std::move(v), {a, b},
                    [an, bn](TensorNode<T>& out) {
                      if (an->requires_grad) {
                        an->ensure_grad();
                        for (std::size_t i = 0; i < out.grad.size(); ++i)
                          an->grad[i] += out.grad[i] * bn->value[i];
                      }
                      if (bn->requires_grad) {
                        bn->ensure_grad();
                        for (std::size_t i = 0; i < out.grad.size(); ++i)
                          bn->grad[i] += out.grad[i] * an->value[i];
                      }
                    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> v(a.numel());
  const T* pa = a.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = pa[i] * s;
  auto an = a.node();
  return make_op<T>(a.shape(), std::move(v), {a},
                    [an, s](TensorNode<T>& out) {
                      if (!an->requires_grad) return;
                      an->ensure_grad();
                      for (std::size_t i = 0; i < out.grad.size(); ++i)
                        an->grad[i] += out.grad[i] * s;
                    });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  std::vector<T> v(a.numel());
  const T* pa = a.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = pa[i] + s;
  auto an = a.node();
  return make_op<T>(a.shape(), std::move(v), {a},
                    [an](TensorNode<T>& out) {
                      if (!an->requires_grad) return;
                      an->ensure_grad();
                      for (std::size_t i = 0; i < out.grad.size(); ++i)
                        an->grad[i] += out.grad[i];
                    });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return scale(a, T(-1));
}

/// Sum of all elements, scalar result.
template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = T(0);
  const T* pa = a.data();
  for (std::size_t i = 0; i < a.numel(); ++i) total += pa[i];
  auto an = a.node();
  return make_op<T>({1}, {total}, {a}, [an](TensorNode<T>& out) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    T g = out.grad[0];
    for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, b);
}
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return sub(a, b);
}
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
  return mul(a, b);
}
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, T s) {
  return scale(a, s);
}
template <typename T>
Tensor<T> operator*(T s, const Tensor<T>& a) {
  return scale(a, s);
}

}  // namespace swinct
