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

/// @file ops.hpp
/// @brief Differentiable operations on Tensor.
///
/// Matrix products are delegated to Eigen; everything else is plain loops.
/// Every op that records a backward closure follows the same contract:
/// read the output gradient, accumulate (+=) into each parent that
/// requires grad, touch nothing else.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <vector>

#include <Eigen/Core>

#include "swinct/tensor.hpp"

namespace swinct {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using MapConst = Eigen::Map<const RowMat<T>>;

/// C(m,n) = op(A) * op(B), or += when accumulate. A and B are row-major
/// with inner dimension k.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n,
          std::size_t k, const T* A, const T* B, T* C, bool accumulate) {
  MapConst<T> a(A, static_cast<Eigen::Index>(trans_a ? k : m),
                static_cast<Eigen::Index>(trans_a ? m : k));
  MapConst<T> b(B, static_cast<Eigen::Index>(trans_b ? n : k),
                static_cast<Eigen::Index>(trans_b ? k : n));
  MapMat<T> c(C, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  if (!accumulate) {
    if (!trans_a && !trans_b)
      c.noalias() = a * b;
    else if (trans_a && !trans_b)
      c.noalias() = a.transpose() * b;
    else if (!trans_a && trans_b)
      c.noalias() = a * b.transpose();
    else
      c.noalias() = a.transpose() * b.transpose();
  } else {
    if (!trans_a && !trans_b)
      c.noalias() += a * b;
    else if (trans_a && !trans_b)
      c.noalias() += a.transpose() * b;
    else if (!trans_a && trans_b)
      c.noalias() += a * b.transpose();
    else
      c.noalias() += a.transpose() * b.transpose();
  }
}

inline std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

/// Strict 2D product: [m,k] x [k,n] -> [m,n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw usage_error("matmul: expected rank-2 operands, got " +
                      shape_str(a.shape()) + " x " + shape_str(b.shape()));
  if (a.dim(1) != b.dim(0))
    throw usage_error("matmul: inner dimensions differ, " +
                      shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> v(m * n);
  detail::gemm(false, false, m, n, k, a.data(), b.data(), v.data(), false);
  auto an = a.node();
  auto bn = b.node();
  return make_op<T>({m, n}, std::move(v), {a, b},
                    [an, bn, m, k, n](TensorNode<T>& out) {
                      if (an->requires_grad) {
                        an->ensure_grad();
                        detail::gemm(false, true, m, k, n, out.grad.data(),
                                     bn->value.data(), an->grad.data(), true);
                      }
                      if (bn->requires_grad) {
                        bn->ensure_grad();
                        detail::gemm(true, false, k, n, m, an->value.data(),
                                     out.grad.data(), bn->grad.data(), true);
                      }
                    });
}

/// Batched product: [B,m,k] x [B,k,n] -> [B,m,n]. With trans_b, the second
/// operand is [B,n,k] and each batch computes A_i * B_i^T.
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool trans_b = false) {
  if (a.rank() != 3 || b.rank() != 3)
    throw usage_error("bmm: expected rank-3 operands, got " +
                      shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  std::size_t n = trans_b ? b.dim(1) : b.dim(2);
  std::size_t bk = trans_b ? b.dim(2) : b.dim(1);
  if (b.dim(0) != batch || bk != k)
    throw usage_error("bmm: incompatible shapes " + shape_str(a.shape()) +
                      " x " + shape_str(b.shape()) +
                      (trans_b ? " (trans_b)" : ""));
  std::vector<T> v(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i)
    detail::gemm(false, trans_b, m, n, k, a.data() + i * m * k,
                 b.data() + i * k * n, v.data() + i * m * n, false);
  auto an = a.node();
  auto bn = b.node();
  return make_op<T>(
      {batch, m, n}, std::move(v), {a, b},
      [an, bn, batch, m, k, n, trans_b](TensorNode<T>& out) {
        for (std::size_t i = 0; i < batch; ++i) {
          const T* g = out.grad.data() + i * m * n;
          if (an->requires_grad) {
            an->ensure_grad();
            // dA = dC * op(B): B is [k,n] plain, [n,k] when trans_b.
            detail::gemm(false, !trans_b, m, k, n, g,
                         bn->value.data() + i * k * n,
                         an->grad.data() + i * m * k, true);
          }
          if (bn->requires_grad) {
            bn->ensure_grad();
            if (!trans_b)
              detail::gemm(true, false, k, n, m, an->value.data() + i * m * k,
                           g, bn->grad.data() + i * k * n, true);
            else
              // dB = dC^T * A for C = A * B^T, B is [n,k].
              detail::gemm(true, false, n, k, m, g,
                           an->value.data() + i * m * k,
                           bn->grad.data() + i * k * n, true);
          }
        }
      });
}

/// Affine map over the last axis: x [..., in] x w [in, out] + b [out].
/// Bias is optional (pass an empty Tensor to skip).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (w.rank() != 2)
    throw usage_error("linear: weight must be rank-2, got " +
                      shape_str(w.shape()));
  std::size_t in = w.dim(0), out_f = w.dim(1);
  if (x.rank() < 1 || x.shape().back() != in)
    throw usage_error("linear: input " + shape_str(x.shape()) +
                      " does not end in " + std::to_string(in));
  if (b.defined() && (b.rank() != 1 || b.dim(0) != out_f))
    throw usage_error("linear: bias must be [" + std::to_string(out_f) + "]");
  std::size_t rows = x.numel() / in;
  std::vector<T> v(rows * out_f);
  detail::gemm(false, false, rows, out_f, in, x.data(), w.data(), v.data(),
               false);
  if (b.defined()) {
    const T* pb = b.data();
    for (std::size_t r = 0; r < rows; ++r) {
      T* pv = v.data() + r * out_f;
      for (std::size_t j = 0; j < out_f; ++j) pv[j] += pb[j];
    }
  }
  Shape oshape = x.shape();
  oshape.back() = out_f;
  auto xn = x.node();
  auto wn = w.node();
  auto bn = b.defined() ? b.node() : nullptr;
  std::vector<Tensor<T>> parents = b.defined()
                                       ? std::vector<Tensor<T>>{x, w, b}
                                       : std::vector<Tensor<T>>{x, w};
  return make_op<T>(
      std::move(oshape), std::move(v), std::move(parents),
      [xn, wn, bn, rows, in, out_f](TensorNode<T>& out) {
        if (xn->requires_grad) {
          xn->ensure_grad();
          detail::gemm(false, true, rows, in, out_f, out.grad.data(),
                       wn->value.data(), xn->grad.data(), true);
        }
        if (wn->requires_grad) {
          wn->ensure_grad();
          detail::gemm(true, false, in, out_f, rows, xn->value.data(),
                       out.grad.data(), wn->grad.data(), true);
        }
        if (bn && bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            const T* g = out.grad.data() + r * out_f;
            for (std::size_t j = 0; j < out_f; ++j) bn->grad[j] += g[j];
          }
        }
      });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w) {
  return linear(x, w, Tensor<T>());
}

// ---------------------------------------------------------------------------
// Normalization and activations
// ---------------------------------------------------------------------------

/// Softmax over the last axis, max-subtracted for stability.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  std::size_t cols = x.shape().back();
  std::size_t rows = x.numel() / cols;
  std::vector<T> v(x.numel());
  const T* px = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = px + r * cols;
    T* out = v.data() + r * cols;
    T mx = in[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, in[j]);
    T denom = T(0);
    for (std::size_t j = 0; j < cols; ++j) {
      out[j] = std::exp(in[j] - mx);
      denom += out[j];
    }
    T inv = T(1) / denom;
    for (std::size_t j = 0; j < cols; ++j) out[j] *= inv;
  }
  auto xn = x.node();
  return make_op<T>(x.shape(), std::move(v), {x},
                    [xn, rows, cols](TensorNode<T>& out) {
                      if (!xn->requires_grad) return;
                      xn->ensure_grad();
                      for (std::size_t r = 0; r < rows; ++r) {
                        const T* p = out.value.data() + r * cols;
                        const T* g = out.grad.data() + r * cols;
                        T dot = T(0);
                        for (std::size_t j = 0; j < cols; ++j)
                          dot += g[j] * p[j];
                        T* gx = xn->grad.data() + r * cols;
                        for (std::size_t j = 0; j < cols; ++j)
                          gx[j] += p[j] * (g[j] - dot);
                      }
                    });
}

/// LayerNorm over the last axis with population variance.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5)) {
  std::size_t cols = x.shape().back();
  if (gamma.numel() != cols || beta.numel() != cols)
    throw usage_error("layer_norm: gamma/beta must have " +
                      std::to_string(cols) + " elements");
  std::size_t rows = x.numel() / cols;
  std::vector<T> v(x.numel());
  // inv_std per row is needed again in backward; stash alongside mean.
  auto stats = std::make_shared<std::vector<T>>(rows * 2);
  const T* px = x.data();
  const T* pg = gamma.data();
  const T* pb = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = px + r * cols;
    T mu = T(0);
    for (std::size_t j = 0; j < cols; ++j) mu += in[j];
    mu /= static_cast<T>(cols);
    T var = T(0);
    for (std::size_t j = 0; j < cols; ++j) {
      T d = in[j] - mu;
      var += d * d;
    }
    var /= static_cast<T>(cols);
    T inv_std = T(1) / std::sqrt(var + eps);
    (*stats)[r * 2] = mu;
    (*stats)[r * 2 + 1] = inv_std;
    T* out = v.data() + r * cols;
    for (std::size_t j = 0; j < cols; ++j)
      out[j] = (in[j] - mu) * inv_std * pg[j] + pb[j];
  }
  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  return make_op<T>(
      x.shape(), std::move(v), {x, gamma, beta},
      [xn, gn, bn, stats, rows, cols](TensorNode<T>& out) {
        std::vector<T> xhat(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          T mu = (*stats)[r * 2];
          T inv_std = (*stats)[r * 2 + 1];
          const T* in = xn->value.data() + r * cols;
          const T* g = out.grad.data() + r * cols;
          for (std::size_t j = 0; j < cols; ++j)
            xhat[j] = (in[j] - mu) * inv_std;
          if (gn->requires_grad) {
            gn->ensure_grad();
            for (std::size_t j = 0; j < cols; ++j)
              gn->grad[j] += g[j] * xhat[j];
          }
          if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t j = 0; j < cols; ++j) bn->grad[j] += g[j];
          }
          if (xn->requires_grad) {
            xn->ensure_grad();
            // dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
            T sum_dxh = T(0);
            T sum_dxh_xh = T(0);
            const T* pgam = gn->value.data();
            for (std::size_t j = 0; j < cols; ++j) {
              T dxh = g[j] * pgam[j];
              sum_dxh += dxh;
              sum_dxh_xh += dxh * xhat[j];
            }
            T inv_n = T(1) / static_cast<T>(cols);
            T* gx = xn->grad.data() + r * cols;
            for (std::size_t j = 0; j < cols; ++j) {
              T dxh = g[j] * pgam[j];
              gx[j] += inv_std *
                       (dxh - inv_n * sum_dxh - xhat[j] * inv_n * sum_dxh_xh);
            }
          }
        }
      });
}

/// GELU, tanh approximation:
/// 0.5 x (1 + tanh(c0 (x + c1 x^3))).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  static constexpr double c0 = 0.7978845608028654;  // sqrt(2/pi)
  static constexpr double c1 = 0.044715;
  std::vector<T> v(x.numel());
  const T* px = x.data();
  for (std::size_t i = 0; i < v.size(); ++i) {
    double xd = static_cast<double>(px[i]);
    double t = std::tanh(c0 * (xd + c1 * xd * xd * xd));
    v[i] = static_cast<T>(0.5 * xd * (1.0 + t));
  }
  auto xn = x.node();
  return make_op<T>(x.shape(), std::move(v), {x}, [xn](TensorNode<T>& out) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < out.grad.size(); ++i) {
      double xd = static_cast<double>(xn->value[i]);
      double u = c0 * (xd + c1 * xd * xd * xd);
      double t = std::tanh(u);
      double du = c0 * (1.0 + 3.0 * c1 * xd * xd);
      double d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du;
      xn->grad[i] += out.grad[i] * static_cast<T>(d);
    }
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> v(x.numel());
  const T* px = x.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = px[i] > T(0) ? px[i] : T(0);
  auto xn = x.node();
  return make_op<T>(x.shape(), std::move(v), {x}, [xn](TensorNode<T>& out) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < out.grad.size(); ++i)
      if (xn->value[i] > T(0)) xn->grad[i] += out.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Layout ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw usage_error("reshape: " + shape_str(x.shape()) + " to " +
                      shape_str(shape) + " changes element count");
  std::vector<T> v = x.values();
  auto xn = x.node();
  return make_op<T>(std::move(shape), std::move(v), {x},
                    [xn](TensorNode<T>& out) {
                      if (!xn->requires_grad) return;
                      xn->ensure_grad();
                      for (std::size_t i = 0; i < out.grad.size(); ++i)
                        xn->grad[i] += out.grad[i];
                    });
}

/// General axis permutation: out axis d is input axis perm[d].
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const Shape& ishape = x.shape();
  if (perm.size() != ishape.size())
    throw usage_error("permute: perm rank " + std::to_string(perm.size()) +
                      " vs tensor rank " + std::to_string(ishape.size()));
  std::vector<bool> seen(perm.size(), false);
  Shape oshape(perm.size());
  for (std::size_t d = 0; d < perm.size(); ++d) {
    if (perm[d] >= perm.size() || seen[perm[d]])
      throw usage_error("permute: invalid permutation");
    seen[perm[d]] = true;
    oshape[d] = ishape[perm[d]];
  }
  auto istr = detail::strides_of(ishape);
  auto ostr = detail::strides_of(oshape);
  // src stride per output axis, so a single odometer walk covers the copy.
  std::vector<std::size_t> sstr(perm.size());
  for (std::size_t d = 0; d < perm.size(); ++d) sstr[d] = istr[perm[d]];
  std::size_t n = x.numel();
  std::size_t rank = oshape.size();
  std::vector<T> v(n);
  const T* px = x.data();
  {
    std::vector<std::size_t> coord(rank, 0);
    std::size_t src = 0;
    for (std::size_t i = 0; i < n; ++i) {
      v[i] = px[src];
      for (std::size_t d = rank; d-- > 0;) {
        src += sstr[d];
        if (++coord[d] < oshape[d]) break;
        coord[d] = 0;
        src -= sstr[d] * oshape[d];
      }
    }
  }
  auto xn = x.node();
  return make_op<T>(
      std::move(oshape), std::move(v), {x},
      [xn, sstr, n, rank](TensorNode<T>& out) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        std::vector<std::size_t> coord(rank, 0);
        std::size_t src = 0;
        for (std::size_t i = 0; i < n; ++i) {
          xn->grad[src] += out.grad[i];
          for (std::size_t d = rank; d-- > 0;) {
            src += sstr[d];
            if (++coord[d] < out.shape[d]) break;
            coord[d] = 0;
            src -= sstr[d] * out.shape[d];
          }
        }
      });
}

/// Cyclic shift of the two spatial axes of [B,H,W,C]:
/// out[b,r,c] = in[b, (r - sh) mod H, (c - sw) mod W].
template <typename T>
Tensor<T> roll_hw(const Tensor<T>& x, std::ptrdiff_t sh, std::ptrdiff_t sw) {
  if (x.rank() != 4)
    throw usage_error("roll_hw: expected [B,H,W,C], got " +
                      shape_str(x.shape()));
  std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  auto wrap = [](std::ptrdiff_t i, std::size_t n) {
    std::ptrdiff_t m = i % static_cast<std::ptrdiff_t>(n);
    if (m < 0) m += static_cast<std::ptrdiff_t>(n);
    return static_cast<std::size_t>(m);
  };
  std::vector<T> v(x.numel());
  const T* px = x.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t r = 0; r < H; ++r) {
      std::size_t sr = wrap(static_cast<std::ptrdiff_t>(r) - sh, H);
      for (std::size_t c = 0; c < W; ++c) {
        std::size_t sc = wrap(static_cast<std::ptrdiff_t>(c) - sw, W);
        const T* sp = px + ((b * H + sr) * W + sc) * C;
        T* dp = v.data() + ((b * H + r) * W + c) * C;
        std::copy(sp, sp + C, dp);
      }
    }
  auto xn = x.node();
  return make_op<T>(
      x.shape(), std::move(v), {x},
      [xn, B, H, W, C, sh, sw, wrap](TensorNode<T>& out) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t r = 0; r < H; ++r) {
            std::size_t sr = wrap(static_cast<std::ptrdiff_t>(r) - sh, H);
            for (std::size_t c = 0; c < W; ++c) {
              std::size_t sc = wrap(static_cast<std::ptrdiff_t>(c) - sw, W);
              T* gs = xn->grad.data() + ((b * H + sr) * W + sc) * C;
              const T* go = out.grad.data() + ((b * H + r) * W + c) * C;
              for (std::size_t j = 0; j < C; ++j) gs[j] += go[j];
            }
          }
      });
}

/// Zero-pads the bottom and right of [B,H,W,C].
template <typename T>
Tensor<T> pad_hw(const Tensor<T>& x, std::size_t pad_b, std::size_t pad_r) {
  if (x.rank() != 4)
    throw usage_error("pad_hw: expected [B,H,W,C], got " +
                      shape_str(x.shape()));
  std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  std::size_t Ho = H + pad_b, Wo = W + pad_r;
  std::vector<T> v(B * Ho * Wo * C, T(0));
  const T* px = x.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t r = 0; r < H; ++r)
      std::copy(px + (b * H + r) * W * C, px + (b * H + r + 1) * W * C,
                v.data() + ((b * Ho + r) * Wo) * C);
  auto xn = x.node();
  return make_op<T>({B, Ho, Wo, C}, std::move(v), {x},
                    [xn, B, H, W, C, Ho, Wo](TensorNode<T>& out) {
                      if (!xn->requires_grad) return;
                      xn->ensure_grad();
                      for (std::size_t b = 0; b < B; ++b)
                        for (std::size_t r = 0; r < H; ++r) {
                          const T* g = out.grad.data() + ((b * Ho + r) * Wo) * C;
                          T* gx = xn->grad.data() + (b * H + r) * W * C;
                          for (std::size_t j = 0; j < W * C; ++j)
                            gx[j] += g[j];
                        }
                    });
}

/// Keeps the top-left H x W region of [B,Hp,Wp,C] (inverse of pad_hw).
template <typename T>
Tensor<T> crop_hw(const Tensor<T>& x, std::size_t H, std::size_t W) {
  if (x.rank() != 4)
    throw usage_error("crop_hw: expected [B,H,W,C], got " +
                      shape_str(x.shape()));
  std::size_t B = x.dim(0), Hp = x.dim(1), Wp = x.dim(2), C = x.dim(3);
  if (H > Hp || W > Wp)
    throw usage_error("crop_hw: crop larger than input");
  std::vector<T> v(B * H * W * C);
  const T* px = x.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t r = 0; r < H; ++r)
      std::copy(px + ((b * Hp + r) * Wp) * C, px + ((b * Hp + r) * Wp + W) * C,
                v.data() + (b * H + r) * W * C);
  auto xn = x.node();
  return make_op<T>({B, H, W, C}, std::move(v), {x},
                    [xn, B, H, W, C, Hp, Wp](TensorNode<T>& out) {
                      if (!xn->requires_grad) return;
                      xn->ensure_grad();
                      for (std::size_t b = 0; b < B; ++b)
                        for (std::size_t r = 0; r < H; ++r) {
                          const T* g = out.grad.data() + (b * H + r) * W * C;
                          T* gx = xn->grad.data() + ((b * Hp + r) * Wp) * C;
                          for (std::size_t j = 0; j < W * C; ++j)
                            gx[j] += g[j];
                        }
                    });
}

/// Concatenation along an axis; all other dimensions must agree.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw usage_error("concat: no inputs");
  const Shape& first = xs[0].shape();
  if (axis >= first.size()) throw usage_error("concat: axis out of range");
  Shape oshape = first;
  for (std::size_t i = 1; i < xs.size(); ++i) {
    const Shape& s = xs[i].shape();
    if (s.size() != first.size())
      throw usage_error("concat: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d)
      if (d != axis && s[d] != first[d])
        throw usage_error("concat: shape mismatch at axis " +
                          std::to_string(d));
    oshape[axis] += s[axis];
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  std::size_t ochunk = oshape[axis] * inner;
  std::vector<T> v(shape_numel(oshape));
  std::size_t off = 0;
  std::vector<std::size_t> offsets(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    offsets[i] = off;
    std::size_t chunk = xs[i].dim(axis) * inner;
    const T* px = xs[i].data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(px + o * chunk, px + (o + 1) * chunk,
                v.data() + o * ochunk + off);
    off += chunk;
  }
  std::vector<std::shared_ptr<TensorNode<T>>> nodes;
  for (const auto& x : xs) nodes.push_back(x.node());
  return make_op<T>(
      std::move(oshape), std::move(v), xs,
      [nodes, offsets, outer, inner, ochunk, axis](TensorNode<T>& out) {
        for (std::size_t i = 0; i < nodes.size(); ++i) {
          auto& p = *nodes[i];
          if (!p.requires_grad) continue;
          p.ensure_grad();
          std::size_t chunk = p.shape[axis] * inner;
          for (std::size_t o = 0; o < outer; ++o) {
            const T* g = out.grad.data() + o * ochunk + offsets[i];
            T* gp = p.grad.data() + o * chunk;
            for (std::size_t j = 0; j < chunk; ++j) gp[j] += g[j];
          }
        }
      });
}

/// Contiguous slice [start, start+len) along an axis.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start,
                std::size_t len) {
  const Shape& ishape = x.shape();
  if (axis >= ishape.size()) throw usage_error("slice: axis out of range");
  if (start + len > ishape[axis])
    throw usage_error("slice: [" + std::to_string(start) + "," +
                      std::to_string(start + len) + ") exceeds axis size " +
                      std::to_string(ishape[axis]));
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= ishape[d];
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < ishape.size(); ++d) inner *= ishape[d];
  Shape oshape = ishape;
  oshape[axis] = len;
  std::size_t ichunk = ishape[axis] * inner;
  std::size_t ochunk = len * inner;
  std::vector<T> v(outer * ochunk);
  const T* px = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy(px + o * ichunk + start * inner,
              px + o * ichunk + (start + len) * inner, v.data() + o * ochunk);
  auto xn = x.node();
  return make_op<T>(std::move(oshape), std::move(v), {x},
                    [xn, outer, inner, ichunk, ochunk, start](
                        TensorNode<T>& out) {
                      if (!xn->requires_grad) return;
                      xn->ensure_grad();
                      for (std::size_t o = 0; o < outer; ++o) {
                        const T* g = out.grad.data() + o * ochunk;
                        T* gx = xn->grad.data() + o * ichunk + start * inner;
                        for (std::size_t j = 0; j < ochunk; ++j) gx[j] += g[j];
                      }
                    });
}

// ---------------------------------------------------------------------------
// Broadcast-style ops used by attention and regularization
// ---------------------------------------------------------------------------

/// a [..., suffix] + b [suffix]: b repeats over the leading axes. The
/// attention bias [nH,M2,M2] is added to scores [B*nW,nH,M2,M2] this way.
template <typename T>
Tensor<T> add_trailing(const Tensor<T>& a, const Tensor<T>& b) {
  if (b.rank() > a.rank())
    throw usage_error("add_trailing: rhs rank exceeds lhs rank");
  std::size_t off = a.rank() - b.rank();
  for (std::size_t d = 0; d < b.rank(); ++d)
    if (a.dim(off + d) != b.dim(d))
      throw usage_error("add_trailing: trailing shape mismatch " +
                        shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::size_t n = b.numel();
  std::vector<T> v(a.numel());
  const T* pa = a.data();
  const T* pb = b.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = pa[i] + pb[i % n];
  auto an = a.node();
  auto bn = b.node();
  return make_op<T>(a.shape(), std::move(v), {a, b},
                    [an, bn, n](TensorNode<T>& out) {
                      if (an->requires_grad) {
                        an->ensure_grad();
                        for (std::size_t i = 0; i < out.grad.size(); ++i)
                          an->grad[i] += out.grad[i];
                      }
                      if (bn->requires_grad) {
                        bn->ensure_grad();
                        for (std::size_t i = 0; i < out.grad.size(); ++i)
                          bn->grad[i % n] += out.grad[i];
                      }
                    });
}

/// scores [B*nW, nH, M2, M2] + mask [nW, M2, M2], broadcasting the mask over
/// batch and heads; row block i uses mask window i % nW. The mask is a
/// constant, no gradient flows into it.
template <typename T>
Tensor<T> add_window_mask(const Tensor<T>& scores, const Tensor<T>& mask) {
  if (scores.rank() != 4 || mask.rank() != 3)
    throw usage_error("add_window_mask: expected scores [B*nW,nH,M2,M2] and "
                      "mask [nW,M2,M2]");
  std::size_t rows = scores.dim(0), heads = scores.dim(1);
  std::size_t m2 = scores.dim(2);
  std::size_t nw = mask.dim(0);
  if (scores.dim(3) != m2 || mask.dim(1) != m2 || mask.dim(2) != m2 ||
      rows % nw != 0)
    throw usage_error("add_window_mask: incompatible shapes " +
                      shape_str(scores.shape()) + " and " +
                      shape_str(mask.shape()));
  std::vector<T> v(scores.numel());
  const T* ps = scores.data();
  const T* pm = mask.data();
  std::size_t block = m2 * m2;
  for (std::size_t b = 0; b < rows; ++b) {
    const T* mw = pm + (b % nw) * block;
    for (std::size_t h = 0; h < heads; ++h) {
      const T* in = ps + (b * heads + h) * block;
      T* out = v.data() + (b * heads + h) * block;
      for (std::size_t j = 0; j < block; ++j) out[j] = in[j] + mw[j];
    }
  }
  auto sn = scores.node();
  return make_op<T>(scores.shape(), std::move(v), {scores},
                    [sn](TensorNode<T>& out) {
                      if (!sn->requires_grad) return;
                      sn->ensure_grad();
                      for (std::size_t i = 0; i < out.grad.size(); ++i)
                        sn->grad[i] += out.grad[i];
                    });
}

/// Per-sample scaling of the leading axis (stochastic depth keep factors).
template <typename T>
Tensor<T> scale_leading(const Tensor<T>& x, std::vector<T> factors) {
  if (x.rank() < 1 || x.dim(0) != factors.size())
    throw usage_error("scale_leading: need one factor per leading row");
  std::size_t chunk = x.numel() / factors.size();
  std::vector<T> v(x.numel());
  const T* px = x.data();
  for (std::size_t b = 0; b < factors.size(); ++b) {
    T f = factors[b];
    const T* in = px + b * chunk;
    T* out = v.data() + b * chunk;
    for (std::size_t j = 0; j < chunk; ++j) out[j] = in[j] * f;
  }
  auto xn = x.node();
  return make_op<T>(x.shape(), std::move(v), {x},
                    [xn, factors, chunk](TensorNode<T>& out) {
                      if (!xn->requires_grad) return;
                      xn->ensure_grad();
                      for (std::size_t b = 0; b < factors.size(); ++b) {
                        T f = factors[b];
                        const T* g = out.grad.data() + b * chunk;
                        T* gx = xn->grad.data() + b * chunk;
                        for (std::size_t j = 0; j < chunk; ++j)
                          gx[j] += g[j] * f;
                      }
                    });
}

/// out[i] = table[idx[i]] for a [R,C] table; backward scatter-adds. This is
/// how the relative position bias table turns into per-pair biases.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table,
                      const std::vector<std::size_t>& idx) {
  if (table.rank() != 2)
    throw usage_error("gather_rows: table must be [rows, cols]");
  std::size_t rows = table.dim(0), cols = table.dim(1);
  for (std::size_t i : idx)
    if (i >= rows)
      throw usage_error("gather_rows: index " + std::to_string(i) +
                        " out of range for " + std::to_string(rows) + " rows");
  std::vector<T> v(idx.size() * cols);
  const T* pt = table.data();
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(pt + idx[i] * cols, pt + (idx[i] + 1) * cols,
              v.data() + i * cols);
  auto tn = table.node();
  return make_op<T>({idx.size(), cols}, std::move(v), {table},
                    [tn, idx, cols](TensorNode<T>& out) {
                      if (!tn->requires_grad) return;
                      tn->ensure_grad();
                      for (std::size_t i = 0; i < idx.size(); ++i) {
                        const T* g = out.grad.data() + i * cols;
                        T* gt = tn->grad.data() + idx[i] * cols;
                        for (std::size_t j = 0; j < cols; ++j) gt[j] += g[j];
                      }
                    });
}

// ---------------------------------------------------------------------------
// Reductions over one axis
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_axis(const Tensor<T>& x, std::size_t axis) {
  const Shape& ishape = x.shape();
  if (axis >= ishape.size()) throw usage_error("sum_axis: axis out of range");
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= ishape[d];
  std::size_t n = ishape[axis];
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < ishape.size(); ++d) inner *= ishape[d];
  Shape oshape;
  for (std::size_t d = 0; d < ishape.size(); ++d)
    if (d != axis) oshape.push_back(ishape[d]);
  if (oshape.empty()) oshape.push_back(1);
  std::vector<T> v(outer * inner, T(0));
  const T* px = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < n; ++i) {
      const T* in = px + (o * n + i) * inner;
      T* out = v.data() + o * inner;
      for (std::size_t j = 0; j < inner; ++j) out[j] += in[j];
    }
  auto xn = x.node();
  return make_op<T>(std::move(oshape), std::move(v), {x},
                    [xn, outer, n, inner](TensorNode<T>& out) {
                      if (!xn->requires_grad) return;
                      xn->ensure_grad();
                      for (std::size_t o = 0; o < outer; ++o)
                        for (std::size_t i = 0; i < n; ++i) {
                          const T* g = out.grad.data() + o * inner;
                          T* gx = xn->grad.data() + (o * n + i) * inner;
                          for (std::size_t j = 0; j < inner; ++j)
                            gx[j] += g[j];
                        }
                    });
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis) {
  return scale(sum_axis(x, axis), T(1) / static_cast<T>(x.dim(axis)));
}

// ---------------------------------------------------------------------------
// Convolution and resampling (channels-last)
// ---------------------------------------------------------------------------

/// 3x3 convolution on [B,H,W,Cin], stride 1, zero pad 1 (same spatial size).
/// Weights are [3,3,Cin,Cout], bias [Cout]. Lowered to im2col + GEMM.
template <typename T>
Tensor<T> conv2d_3x3(const Tensor<T>& x, const Tensor<T>& w,
                     const Tensor<T>& b) {
  if (x.rank() != 4) throw usage_error("conv2d_3x3: input must be [B,H,W,C]");
  if (w.rank() != 4 || w.dim(0) != 3 || w.dim(1) != 3)
    throw usage_error("conv2d_3x3: weight must be [3,3,Cin,Cout]");
  std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), Cin = x.dim(3);
  if (w.dim(2) != Cin)
    throw usage_error("conv2d_3x3: weight Cin " + std::to_string(w.dim(2)) +
                      " vs input C " + std::to_string(Cin));
  std::size_t Cout = w.dim(3);
  if (b.defined() && b.numel() != Cout)
    throw usage_error("conv2d_3x3: bias must have Cout elements");

  std::size_t rows = B * H * W;
  std::size_t K = 9 * Cin;
  auto im2col = [B, H, W, Cin, K](const T* src, T* col) {
    for (std::size_t bb = 0; bb < B; ++bb)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx) {
          T* row = col + ((bb * H + y) * W + xx) * K;
          for (std::size_t ky = 0; ky < 3; ++ky) {
            std::ptrdiff_t sy =
                static_cast<std::ptrdiff_t>(y) + static_cast<std::ptrdiff_t>(ky) - 1;
            for (std::size_t kx = 0; kx < 3; ++kx) {
              std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx) +
                                  static_cast<std::ptrdiff_t>(kx) - 1;
              T* dst = row + (ky * 3 + kx) * Cin;
              if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H) || sx < 0 ||
                  sx >= static_cast<std::ptrdiff_t>(W)) {
                std::fill(dst, dst + Cin, T(0));
              } else {
                const T* s = src + ((bb * H + static_cast<std::size_t>(sy)) * W +
                                    static_cast<std::size_t>(sx)) *
                                       Cin;
                std::copy(s, s + Cin, dst);
              }
            }
          }
        }
  };

  std::vector<T> col(rows * K);
  im2col(x.data(), col.data());
  std::vector<T> v(rows * Cout);
  detail::gemm(false, false, rows, Cout, K, col.data(), w.data(), v.data(),
               false);
  if (b.defined()) {
    const T* pb = b.data();
    for (std::size_t r = 0; r < rows; ++r) {
      T* pv = v.data() + r * Cout;
      for (std::size_t j = 0; j < Cout; ++j) pv[j] += pb[j];
    }
  }
  auto xn = x.node();
  auto wn = w.node();
  auto bn = b.defined() ? b.node() : nullptr;
  std::vector<Tensor<T>> parents = b.defined()
                                       ? std::vector<Tensor<T>>{x, w, b}
                                       : std::vector<Tensor<T>>{x, w};
  return make_op<T>(
      {B, H, W, Cout}, std::move(v), std::move(parents),
      [xn, wn, bn, im2col, B, H, W, Cin, Cout, rows, K](TensorNode<T>& out) {
        // The column matrix is rebuilt here instead of being kept alive
        // through the whole graph.
        if (wn->requires_grad) {
          wn->ensure_grad();
          std::vector<T> col(rows * K);
          im2col(xn->value.data(), col.data());
          detail::gemm(true, false, K, Cout, rows, col.data(), out.grad.data(),
                       wn->grad.data(), true);
        }
        if (bn && bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            const T* g = out.grad.data() + r * Cout;
            for (std::size_t j = 0; j < Cout; ++j) bn->grad[j] += g[j];
          }
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          std::vector<T> dcol(rows * K);
          detail::gemm(false, true, rows, K, Cout, out.grad.data(),
                       wn->value.data(), dcol.data(), false);
          // col2im: scatter each column row back over the 3x3 taps.
          for (std::size_t bb = 0; bb < B; ++bb)
            for (std::size_t y = 0; y < H; ++y)
              for (std::size_t xx = 0; xx < W; ++xx) {
                const T* row = dcol.data() + ((bb * H + y) * W + xx) * K;
                for (std::size_t ky = 0; ky < 3; ++ky) {
                  std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) +
                                      static_cast<std::ptrdiff_t>(ky) - 1;
                  if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
                  for (std::size_t kx = 0; kx < 3; ++kx) {
                    std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx) +
                                        static_cast<std::ptrdiff_t>(kx) - 1;
                    if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(W))
                      continue;
                    const T* g = row + (ky * 3 + kx) * Cin;
                    T* gx = xn->grad.data() +
                            ((bb * H + static_cast<std::size_t>(sy)) * W +
                             static_cast<std::size_t>(sx)) *
                                Cin;
                    for (std::size_t j = 0; j < Cin; ++j) gx[j] += g[j];
                  }
                }
              }
        }
      });
}

/// Integer-factor nearest upsampling of [B,H,W,C].
template <typename T>
Tensor<T> upsample_nearest(const Tensor<T>& x, std::size_t factor) {
  if (x.rank() != 4)
    throw usage_error("upsample_nearest: input must be [B,H,W,C]");
  if (factor == 0) throw usage_error("upsample_nearest: factor must be >= 1");
  std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  std::size_t Ho = H * factor, Wo = W * factor;
  std::vector<T> v(B * Ho * Wo * C);
  const T* px = x.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t r = 0; r < Ho; ++r)
      for (std::size_t c = 0; c < Wo; ++c) {
        const T* s = px + ((b * H + r / factor) * W + c / factor) * C;
        T* d = v.data() + ((b * Ho + r) * Wo + c) * C;
        std::copy(s, s + C, d);
      }
  auto xn = x.node();
  return make_op<T>({B, Ho, Wo, C}, std::move(v), {x},
                    [xn, B, H, W, C, Ho, Wo, factor](TensorNode<T>& out) {
                      if (!xn->requires_grad) return;
                      xn->ensure_grad();
                      for (std::size_t b = 0; b < B; ++b)
                        for (std::size_t r = 0; r < Ho; ++r)
                          for (std::size_t c = 0; c < Wo; ++c) {
                            T* gs = xn->grad.data() +
                                    ((b * H + r / factor) * W + c / factor) * C;
                            const T* g = out.grad.data() +
                                         ((b * Ho + r) * Wo + c) * C;
                            for (std::size_t j = 0; j < C; ++j) gs[j] += g[j];
                          }
                    });
}

/// Integer-factor bilinear upsampling of [B,H,W,C], half-pixel centers
/// (align_corners = false semantics).
template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, std::size_t factor) {
  if (x.rank() != 4)
    throw usage_error("upsample_bilinear: input must be [B,H,W,C]");
  if (factor == 0) throw usage_error("upsample_bilinear: factor must be >= 1");
  std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  std::size_t Ho = H * factor, Wo = W * factor;

  // Per output row/col: two source indices and the blend weight.
  struct Tap {
    std::size_t lo, hi;
    T w_hi;
  };
  auto make_taps = [factor](std::size_t n_out, std::size_t n_in) {
    std::vector<Tap> taps(n_out);
    for (std::size_t i = 0; i < n_out; ++i) {
      double src = (static_cast<double>(i) + 0.5) / static_cast<double>(factor) - 0.5;
      if (src < 0) src = 0;
      double limit = static_cast<double>(n_in - 1);
      if (src > limit) src = limit;
      std::size_t lo = static_cast<std::size_t>(src);
      std::size_t hi = std::min(lo + 1, n_in - 1);
      taps[i] = {lo, hi, static_cast<T>(src - static_cast<double>(lo))};
    }
    return taps;
  };
  auto rt = make_taps(Ho, H);
  auto ct = make_taps(Wo, W);

  std::vector<T> v(B * Ho * Wo * C);
  const T* px = x.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t r = 0; r < Ho; ++r) {
      T wr = rt[r].w_hi;
      for (std::size_t c = 0; c < Wo; ++c) {
        T wc = ct[c].w_hi;
        const T* p00 = px + ((b * H + rt[r].lo) * W + ct[c].lo) * C;
        const T* p01 = px + ((b * H + rt[r].lo) * W + ct[c].hi) * C;
        const T* p10 = px + ((b * H + rt[r].hi) * W + ct[c].lo) * C;
        const T* p11 = px + ((b * H + rt[r].hi) * W + ct[c].hi) * C;
        T* d = v.data() + ((b * Ho + r) * Wo + c) * C;
        for (std::size_t j = 0; j < C; ++j)
          d[j] = (T(1) - wr) * ((T(1) - wc) * p00[j] + wc * p01[j]) +
                 wr * ((T(1) - wc) * p10[j] + wc * p11[j]);
      }
    }
  auto xn = x.node();
  return make_op<T>(
      {B, Ho, Wo, C}, std::move(v), {x},
      [xn, B, H, W, C, Ho, Wo, rt, ct](TensorNode<T>& out) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t r = 0; r < Ho; ++r) {
            T wr = rt[r].w_hi;
            for (std::size_t c = 0; c < Wo; ++c) {
              T wc = ct[c].w_hi;
              const T* g = out.grad.data() + ((b * Ho + r) * Wo + c) * C;
              T* g00 = xn->grad.data() + ((b * H + rt[r].lo) * W + ct[c].lo) * C;
              T* g01 = xn->grad.data() + ((b * H + rt[r].lo) * W + ct[c].hi) * C;
              T* g10 = xn->grad.data() + ((b * H + rt[r].hi) * W + ct[c].lo) * C;
              T* g11 = xn->grad.data() + ((b * H + rt[r].hi) * W + ct[c].hi) * C;
              for (std::size_t j = 0; j < C; ++j) {
                g00[j] += g[j] * (T(1) - wr) * (T(1) - wc);
                g01[j] += g[j] * (T(1) - wr) * wc;
                g10[j] += g[j] * wr * (T(1) - wc);
                g11[j] += g[j] * wr * wc;
              }
            }
          }
      });
}

// ---------------------------------------------------------------------------
// Losses (fused with softmax for stability)
// ---------------------------------------------------------------------------

/// Mean cross entropy of logits [N,K] against integer labels. The backward
/// is the closed form (softmax - onehot) / N.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits,
                                const std::vector<std::size_t>& labels) {
  if (logits.rank() != 2)
    throw usage_error("softmax_cross_entropy: logits must be [N,K]");
  std::size_t N = logits.dim(0), K = logits.dim(1);
  if (labels.size() != N)
    throw usage_error("softmax_cross_entropy: " + std::to_string(labels.size()) +
                      " labels for " + std::to_string(N) + " rows");
  for (std::size_t y : labels)
    if (y >= K)
      throw data_error("softmax_cross_entropy: label " + std::to_string(y) +
                       " out of range for " + std::to_string(K) + " classes");
  auto probs = std::make_shared<std::vector<T>>(N * K);
  const T* pl = logits.data();
  T loss = T(0);
  for (std::size_t r = 0; r < N; ++r) {
    const T* in = pl + r * K;
    T* p = probs->data() + r * K;
    T mx = in[0];
    for (std::size_t j = 1; j < K; ++j) mx = std::max(mx, in[j]);
    T denom = T(0);
    for (std::size_t j = 0; j < K; ++j) {
      p[j] = std::exp(in[j] - mx);
      denom += p[j];
    }
    T inv = T(1) / denom;
    for (std::size_t j = 0; j < K; ++j) p[j] *= inv;
    loss -= std::log(std::max(p[labels[r]], std::numeric_limits<T>::min()));
  }
  loss /= static_cast<T>(N);
  auto ln = logits.node();
  return make_op<T>({1}, {loss}, {logits},
                    [ln, probs, labels, N, K](TensorNode<T>& out) {
                      if (!ln->requires_grad) return;
                      ln->ensure_grad();
                      T g = out.grad[0] / static_cast<T>(N);
                      for (std::size_t r = 0; r < N; ++r) {
                        const T* p = probs->data() + r * K;
                        T* gl = ln->grad.data() + r * K;
                        for (std::size_t j = 0; j < K; ++j)
                          gl[j] += g * p[j];
                        gl[labels[r]] -= g;
                      }
                    });
}

/// Label value that marks pixels excluded from the segmentation loss.
inline constexpr int kIgnoreLabel = 255;

/// Mean per-pixel cross entropy of logits [B,H,W,K] against labels [B*H*W]
/// (row-major), skipping kIgnoreLabel pixels. A batch with no labeled pixel
/// has no defined loss and is rejected.
template <typename T>
Tensor<T> pixel_cross_entropy(const Tensor<T>& logits,
                              const std::vector<int>& labels) {
  if (logits.rank() != 4)
    throw usage_error("pixel_cross_entropy: logits must be [B,H,W,K]");
  std::size_t K = logits.dim(3);
  std::size_t N = logits.numel() / K;
  if (labels.size() != N)
    throw usage_error("pixel_cross_entropy: " + std::to_string(labels.size()) +
                      " labels for " + std::to_string(N) + " pixels");
  auto probs = std::make_shared<std::vector<T>>(N * K);
  const T* pl = logits.data();
  T loss = T(0);
  std::size_t valid = 0;
  for (std::size_t r = 0; r < N; ++r) {
    const T* in = pl + r * K;
    T* p = probs->data() + r * K;
    T mx = in[0];
    for (std::size_t j = 1; j < K; ++j) mx = std::max(mx, in[j]);
    T denom = T(0);
    for (std::size_t j = 0; j < K; ++j) {
      p[j] = std::exp(in[j] - mx);
      denom += p[j];
    }
    T inv = T(1) / denom;
    for (std::size_t j = 0; j < K; ++j) p[j] *= inv;
    int y = labels[r];
    if (y == kIgnoreLabel) continue;
    if (y < 0 || static_cast<std::size_t>(y) >= K)
      throw data_error("pixel_cross_entropy: label " + std::to_string(y) +
                       " out of range for " + std::to_string(K) + " classes");
    loss -= std::log(std::max(p[static_cast<std::size_t>(y)],
                              std::numeric_limits<T>::min()));
    ++valid;
  }
  if (valid == 0)
    throw data_error("pixel_cross_entropy: every pixel carries the ignore "
                     "label");
  loss /= static_cast<T>(valid);
  auto ln = logits.node();
  return make_op<T>({1}, {loss}, {logits},
                    [ln, probs, labels, N, K, valid](TensorNode<T>& out) {
                      if (!ln->requires_grad) return;
                      ln->ensure_grad();
                      T g = out.grad[0] / static_cast<T>(valid);
                      for (std::size_t r = 0; r < N; ++r) {
                        int y = labels[r];
                        if (y == kIgnoreLabel) continue;
                        const T* p = probs->data() + r * K;
                        T* gl = ln->grad.data() + r * K;
                        for (std::size_t j = 0; j < K; ++j)
                          gl[j] += g * p[j];
                        gl[static_cast<std::size_t>(y)] -= g;
                      }
                    });
}

}  // namespace swinct
