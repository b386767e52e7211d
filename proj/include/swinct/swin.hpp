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

/// @file swin.hpp
/// @brief Swin backbone: patch embed/merge, window machinery, shift masks,
/// relative-position-biased window attention, and the 4-stage hierarchy.
///
/// Token layout is channels-last throughout: grids are [B, H*W, D] with
/// tokens row-major over (H, W), windows are [B*nW, M*M, D] with windows
/// row-major over the window grid and tokens row-major inside each window.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "swinct/ops.hpp"
#include "swinct/rng.hpp"
#include "swinct/tensor.hpp"

namespace swinct {

/// Additive mask value for blocked attention pairs. Finite (not -inf) so
/// softmax gradients stay defined; post-softmax leakage is below 1e-6.
inline constexpr double kMaskNeg = -100.0;

/// Region label given to zero-padded tokens so they never exchange
/// attention with real tokens.
inline constexpr int kPadRegion = 99;

/// Half-window displacement used by SW-MSA blocks.
inline std::size_t shift_size(std::size_t window_size) {
  if (window_size < 1)
    throw usage_error("shift_size: window_size must be >= 1");
  return window_size / 2;
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct SwinConfig {
  std::size_t img_size = 224;
  std::size_t patch_size = 4;
  std::size_t in_channels = 3;
  std::size_t embed_dim = 96;
  std::array<std::size_t, 4> depths{2, 2, 6, 2};
  std::array<std::size_t, 4> num_heads{3, 6, 12, 24};
  std::size_t window_size = 7;
  std::size_t mlp_ratio = 4;
  double drop_path_rate = 0.0;
  std::string variant = "custom";

  std::size_t patch_grid() const { return img_size / patch_size; }
  std::size_t stage_dim(std::size_t i) const { return embed_dim << i; }
  std::size_t stage_res(std::size_t i) const { return patch_grid() >> i; }
  std::size_t total_blocks() const {
    return depths[0] + depths[1] + depths[2] + depths[3];
  }

  void validate() const {
    if (patch_size < 1) throw usage_error("config: patch_size must be >= 1");
    if (img_size % patch_size != 0)
      throw usage_error("config: img_size " + std::to_string(img_size) +
                        " not divisible by patch_size " +
                        std::to_string(patch_size));
    // three patch merges halve the grid, so it must split 4 ways cleanly
    if (patch_grid() % 4 != 0 || patch_grid() / 4 < 1)
      throw usage_error("config: patch grid " + std::to_string(patch_grid()) +
                        " must be a positive multiple of 4");
    if (in_channels < 1) throw usage_error("config: in_channels must be >= 1");
    if (embed_dim < 1) throw usage_error("config: embed_dim must be >= 1");
    if (window_size < 1) throw usage_error("config: window_size must be >= 1");
    if (mlp_ratio < 1) throw usage_error("config: mlp_ratio must be >= 1");
    if (!(drop_path_rate >= 0.0 && drop_path_rate < 1.0))
      throw usage_error("config: drop_path_rate must be in [0, 1)");
    for (std::size_t i = 0; i < 4; ++i) {
      if (depths[i] == 0 || depths[i] % 2 != 0)
        throw usage_error("config: depths[" + std::to_string(i) +
                          "] must be a positive even count (W-MSA/SW-MSA "
                          "pairs)");
      if (num_heads[i] == 0 || stage_dim(i) % num_heads[i] != 0)
        throw usage_error("config: stage dim " +
                          std::to_string(stage_dim(i)) +
                          " not divisible by num_heads[" + std::to_string(i) +
                          "] = " + std::to_string(num_heads[i]));
    }
  }

  static SwinConfig swin_t() {
    SwinConfig c;
    c.embed_dim = 96;
    c.depths = {2, 2, 6, 2};
    c.num_heads = {3, 6, 12, 24};
    c.variant = "swin-t";
    return c;
  }
  static SwinConfig swin_s() {
    SwinConfig c;
    c.embed_dim = 96;
    c.depths = {2, 2, 18, 2};
    c.num_heads = {3, 6, 12, 24};
    c.variant = "swin-s";
    return c;
  }
  static SwinConfig swin_b() {
    SwinConfig c;
    c.embed_dim = 128;
    c.depths = {2, 2, 18, 2};
    c.num_heads = {4, 8, 16, 32};
    c.variant = "swin-b";
    return c;
  }
  /// Swin-B at 384 input; window 12 keeps every stage resolution an exact
  /// multiple of the window.
  static SwinConfig swin_b_384() {
    SwinConfig c = swin_b();
    c.img_size = 384;
    c.window_size = 12;
    c.variant = "swin-b-384";
    return c;
  }
  static SwinConfig by_name(const std::string& name) {
    if (name == "swin-t") return swin_t();
    if (name == "swin-s") return swin_s();
    if (name == "swin-b") return swin_b();
    if (name == "swin-b-384") return swin_b_384();
    throw usage_error("unknown variant '" + name +
                      "' (expected swin-t, swin-s, swin-b, swin-b-384)");
  }
};

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// A batch of token grids: data is [B, height*width, dim], row-major tokens.
template <typename T>
struct TokenGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t dim = 0;
  Tensor<T> data;

  std::size_t batch() const { return data.dim(0); }
  void check_consistent() const {
    if (!data.defined() || data.rank() != 3 ||
        data.dim(1) != height * width || data.dim(2) != dim)
      throw usage_error("TokenGrid: data " + shape_str(data.shape()) +
                        " does not match " + std::to_string(height) + "x" +
                        std::to_string(width) + "x" + std::to_string(dim));
  }
};

/// Blocked-pair mask for one window layout. mask[w,i,j] is 0 where tokens
/// i and j of window w share a region, kMaskNeg otherwise.
template <typename T>
struct AttentionMask {
  std::size_t window_rows = 0;
  std::size_t window_cols = 0;
  Tensor<T> mask;                 // [nW, M*M, M*M], constant
  std::vector<int> region_labels; // padded-grid labels, row-major
};

/// Learnable per-head bias over relative in-window offsets.
template <typename T>
struct RelativePositionBias {
  std::size_t window = 0;
  Tensor<T> table;                 // [(2M-1)^2, heads]
  std::vector<std::size_t> index;  // M^2 * M^2 table rows
};

/// Table row for a token pair: offsets are biased into [0, 2M-2] and mixed
/// base (2M-1).
inline std::vector<std::size_t> relative_position_index(std::size_t M) {
  std::size_t m2 = M * M;
  std::vector<std::size_t> index(m2 * m2);
  for (std::size_t i = 0; i < m2; ++i) {
    std::ptrdiff_t ri = static_cast<std::ptrdiff_t>(i / M);
    std::ptrdiff_t ci = static_cast<std::ptrdiff_t>(i % M);
    for (std::size_t j = 0; j < m2; ++j) {
      std::ptrdiff_t rj = static_cast<std::ptrdiff_t>(j / M);
      std::ptrdiff_t cj = static_cast<std::ptrdiff_t>(j % M);
      std::size_t dr = static_cast<std::size_t>(ri - rj + static_cast<std::ptrdiff_t>(M) - 1);
      std::size_t dc = static_cast<std::size_t>(ci - cj + static_cast<std::ptrdiff_t>(M) - 1);
      index[i * m2 + j] = dr * (2 * M - 1) + dc;
    }
  }
  return index;
}

// ---------------------------------------------------------------------------
// Window partition / reverse
// ---------------------------------------------------------------------------

/// [B, h, w, D] -> [B*nW, M*M, D]; windows row-major over the window grid.
template <typename T>
Tensor<T> window_partition(const Tensor<T>& x, std::size_t M) {
  if (x.rank() != 4)
    throw usage_error("window_partition: expected [B,H,W,D], got " +
                      shape_str(x.shape()));
  std::size_t B = x.dim(0), h = x.dim(1), w = x.dim(2), D = x.dim(3);
  if (M == 0 || h % M != 0 || w % M != 0)
    throw usage_error("window_partition: grid " + std::to_string(h) + "x" +
                      std::to_string(w) + " not divisible by window " +
                      std::to_string(M));
  auto r = reshape(x, {B, h / M, M, w / M, M, D});
  auto p = permute(r, {0, 1, 3, 2, 4, 5});
  return reshape(p, {B * (h / M) * (w / M), M * M, D});
}

/// Inverse of window_partition.
template <typename T>
Tensor<T> window_reverse(const Tensor<T>& windows, std::size_t B,
                         std::size_t h, std::size_t w, std::size_t M) {
  if (windows.rank() != 3)
    throw usage_error("window_reverse: expected [B*nW,M*M,D], got " +
                      shape_str(windows.shape()));
  if (M == 0 || h % M != 0 || w % M != 0)
    throw usage_error("window_reverse: grid not divisible by window");
  std::size_t nw = (h / M) * (w / M);
  if (windows.dim(0) != B * nw || windows.dim(1) != M * M)
    throw usage_error("window_reverse: window count " +
                      std::to_string(windows.dim(0)) + " does not match " +
                      std::to_string(B) + " x " + std::to_string(nw));
  std::size_t D = windows.dim(2);
  auto r = reshape(windows, {B, h / M, w / M, M, M, D});
  auto p = permute(r, {0, 1, 3, 2, 4, 5});
  return reshape(p, {B, h, w, D});
}

// ---------------------------------------------------------------------------
// Shift-mask construction
// ---------------------------------------------------------------------------

namespace detail {

/// Band id of a post-shift coordinate. The three bands [0, n-M),
/// [n-M, n-s), [n-s, n) separate the tokens that wrapped around during the
/// cyclic shift (last band) from those that did not; the first boundary
/// always falls on a window edge, so within any single window at most two
/// bands meet and equal band means equal wrap status.
inline int shift_band(std::size_t pos, std::size_t n, std::size_t M,
                      std::size_t s) {
  if (pos < n - M) return 0;
  if (pos < n - s) return 1;
  return 2;
}

/// Mask tensor from a labeled (padded) grid.
template <typename T>
AttentionMask<T> mask_from_labels(std::vector<int> labels, std::size_t h,
                                  std::size_t w, std::size_t M) {
  std::size_t wr = h / M, wc = w / M;
  std::size_t m2 = M * M;
  std::vector<T> mv(wr * wc * m2 * m2);
  for (std::size_t wy = 0; wy < wr; ++wy)
    for (std::size_t wx = 0; wx < wc; ++wx) {
      std::size_t widx = wy * wc + wx;
      // labels of this window's tokens, row-major
      std::vector<int> local(m2);
      for (std::size_t r = 0; r < M; ++r)
        for (std::size_t c = 0; c < M; ++c)
          local[r * M + c] = labels[(wy * M + r) * w + (wx * M + c)];
      T* out = mv.data() + widx * m2 * m2;
      for (std::size_t i = 0; i < m2; ++i)
        for (std::size_t j = 0; j < m2; ++j)
          out[i * m2 + j] =
              local[i] == local[j] ? T(0) : static_cast<T>(kMaskNeg);
    }
  AttentionMask<T> am;
  am.window_rows = wr;
  am.window_cols = wc;
  am.mask = Tensor<T>::from({wr * wc, m2, m2}, std::move(mv));
  am.region_labels = std::move(labels);
  return am;
}

}  // namespace detail

/// Mask for a cyclically shifted window layout on an exactly divisible
/// grid. Tokens are labeled by the product of row and column bands with
/// boundaries [0, h-M), [h-M, h-s), [h-s, h); the bands are expressed in
/// post-shift coordinates, so equal label within a window is exactly "same
/// contiguous region of the unshifted grid".
template <typename T>
AttentionMask<T> build_shift_mask(std::size_t h, std::size_t w, std::size_t M,
                                  std::size_t s) {
  if (M == 0 || h % M != 0 || w % M != 0)
    throw usage_error("build_shift_mask: grid " + std::to_string(h) + "x" +
                      std::to_string(w) + " not divisible by window " +
                      std::to_string(M));
  if (s >= M)
    throw usage_error("build_shift_mask: shift " + std::to_string(s) +
                      " must be < window " + std::to_string(M));
  std::vector<int> labels(h * w);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      labels[r * w + c] = detail::shift_band(r, h, M, s) * 3 +
                          detail::shift_band(c, w, M, s);
  return detail::mask_from_labels<T>(std::move(labels), h, w, M);
}

/// Mask for one block on a possibly non-divisible grid: the grid is padded
/// bottom/right to (hp, wp), pad tokens get their own region, and shift
/// bands are applied when s > 0. Returns nothing when no mask is needed
/// (unshifted and exactly divisible).
template <typename T>
std::optional<AttentionMask<T>> build_block_mask(std::size_t h, std::size_t w,
                                                 std::size_t M,
                                                 std::size_t s) {
  if (M == 0) throw usage_error("build_block_mask: window must be >= 1");
  if (s >= M)
    throw usage_error("build_block_mask: shift " + std::to_string(s) +
                      " must be < window " + std::to_string(M));
  std::size_t hp = (h + M - 1) / M * M;
  std::size_t wp = (w + M - 1) / M * M;
  if (hp == h && wp == w && s == 0) return std::nullopt;
  std::vector<int> labels(hp * wp);
  for (std::size_t r = 0; r < hp; ++r)
    for (std::size_t c = 0; c < wp; ++c) {
      // post-shift (r, c) came from pre-shift ((r+s) mod hp, (c+s) mod wp)
      std::size_t orig_r = (r + s) % hp;
      std::size_t orig_c = (c + s) % wp;
      if (orig_r >= h || orig_c >= w) {
        labels[r * wp + c] = kPadRegion;
      } else if (s == 0) {
        labels[r * wp + c] = 0;
      } else {
        labels[r * wp + c] = detail::shift_band(r, hp, M, s) * 3 +
                             detail::shift_band(c, wp, M, s);
      }
    }
  return detail::mask_from_labels<T>(std::move(labels), hp, wp, M);
}

// ---------------------------------------------------------------------------
// Parameter registry
// ---------------------------------------------------------------------------

/// Ordered name -> tensor registry. Registration order is the canonical
/// parameter order used by optimizers and checkpoints.
template <typename T>
class ParamStore {
 public:
  Tensor<T> add(const std::string& name, Tensor<T> t) {
    if (by_name_.count(name))
      throw usage_error("ParamStore: duplicate parameter '" + name + "'");
    t.set_requires_grad(true);
    by_name_[name] = items_.size();
    items_.emplace_back(name, t);
    return t;
  }

  Tensor<T>* find(const std::string& name) {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : &items_[it->second].second;
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& items() const {
    return items_;
  }
  std::size_t size() const { return items_.size(); }

  std::size_t count_elements() const {
    std::size_t n = 0;
    for (const auto& [name, t] : items_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : items_) t.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> items_;
  std::unordered_map<std::string, std::size_t> by_name_;
};

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

namespace init {

/// Truncated normal (sigma 0.02, clipped at 2 sigma) for weights.
template <typename T>
Tensor<T> trunc_normal(Shape shape, Rng& rng, double sigma = 0.02) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.truncated_normal(sigma));
  return Tensor<T>::from(std::move(shape), std::move(v));
}

}  // namespace init

template <typename T>
struct LinearLayer {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out] or undefined

  LinearLayer() = default;
  LinearLayer(ParamStore<T>& ps, const std::string& prefix, std::size_t in,
              std::size_t out, bool with_bias, Rng& rng) {
    weight = ps.add(prefix + ".weight", init::trunc_normal<T>({in, out}, rng));
    if (with_bias) bias = ps.add(prefix + ".bias", Tensor<T>::zeros({out}));
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return bias.defined() ? linear(x, weight, bias) : linear(x, weight);
  }
};

template <typename T>
struct LayerNormLayer {
  Tensor<T> gamma;
  Tensor<T> beta;

  LayerNormLayer() = default;
  LayerNormLayer(ParamStore<T>& ps, const std::string& prefix,
                 std::size_t dim) {
    gamma = ps.add(prefix + ".gamma", Tensor<T>::ones({dim}));
    beta = ps.add(prefix + ".beta", Tensor<T>::zeros({dim}));
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return layer_norm(x, gamma, beta);
  }
};

/// Multi-head attention inside M x M windows with a learnable relative
/// position bias per head. Input is [B*nW, M*M, D].
template <typename T>
struct WindowAttentionLayer {
  std::size_t dim = 0;
  std::size_t heads = 0;
  std::size_t window = 0;
  LinearLayer<T> qkv;   // D -> 3D
  LinearLayer<T> proj;  // D -> D
  Tensor<T> relpos_table;
  std::vector<std::size_t> relpos_index;

  WindowAttentionLayer() = default;
  WindowAttentionLayer(ParamStore<T>& ps, const std::string& prefix,
                       std::size_t dim_, std::size_t heads_,
                       std::size_t window_, Rng& rng)
      : dim(dim_), heads(heads_), window(window_) {
    if (heads == 0 || dim % heads != 0)
      throw usage_error("window_attention: dim " + std::to_string(dim) +
                        " not divisible by heads " + std::to_string(heads));
    qkv = LinearLayer<T>(ps, prefix + ".qkv", dim, 3 * dim, true, rng);
    proj = LinearLayer<T>(ps, prefix + ".proj", dim, dim, true, rng);
    std::size_t span = 2 * window - 1;
    relpos_table =
        ps.add(prefix + ".relpos.table", Tensor<T>::zeros({span * span, heads}));
    relpos_index = relative_position_index(window);
  }

  /// Bias arranged as [heads, M*M, M*M] for add_trailing onto scores.
  Tensor<T> bias_tensor() const {
    std::size_t m2 = window * window;
    auto rows = gather_rows(relpos_table, relpos_index);  // [m2*m2, heads]
    return permute(reshape(rows, {m2, m2, heads}), {2, 0, 1});
  }

  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& mask) const {
    if (x.rank() != 3 || x.dim(2) != dim)
      throw usage_error("window_attention: expected [B*nW,M*M," +
                        std::to_string(dim) + "], got " +
                        shape_str(x.shape()));
    std::size_t bnw = x.dim(0);
    std::size_t m2 = x.dim(1);
    if (m2 != window * window)
      throw usage_error("window_attention: token count " + std::to_string(m2) +
                        " does not match window " + std::to_string(window));
    if (mask.defined() && bnw % mask.dim(0) != 0)
      throw usage_error("window_attention: rows " + std::to_string(bnw) +
                        " not a multiple of mask windows " +
                        std::to_string(mask.dim(0)));
    std::size_t hd = dim / heads;

    auto qkv_out = qkv.forward(x);  // [bnw, m2, 3D]
    auto split = permute(reshape(qkv_out, {bnw, m2, 3, heads, hd}),
                         {2, 0, 3, 1, 4});  // [3, bnw, heads, m2, hd]
    auto q = reshape(slice(split, 0, 0, 1), {bnw * heads, m2, hd});
    auto k = reshape(slice(split, 0, 1, 1), {bnw * heads, m2, hd});
    auto v = reshape(slice(split, 0, 2, 1), {bnw * heads, m2, hd});
    q = scale(q, static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd))));

    auto scores = reshape(bmm(q, k, true), {bnw, heads, m2, m2});
    scores = add_trailing(scores, bias_tensor());
    if (mask.defined()) scores = add_window_mask(scores, mask);
    auto attn = softmax(scores);

    auto ctx = bmm(reshape(attn, {bnw * heads, m2, m2}), v);
    auto merged = reshape(permute(reshape(ctx, {bnw, heads, m2, hd}),
                                  {0, 2, 1, 3}),
                          {bnw, m2, dim});
    return proj.forward(merged);
  }
};

/// One transformer block: (S)W-MSA + MLP, both pre-normed residual branches
/// under stochastic depth. Shifted variants roll by -s, attend with the
/// region mask, and roll back.
template <typename T>
struct SwinBlockLayer {
  std::size_t res_h = 0, res_w = 0, dim = 0;
  std::size_t window = 0, shift = 0;
  std::size_t pad_h = 0, pad_w = 0;  // padded grid (equals res when exact)
  double drop_path = 0.0;
  LayerNormLayer<T> norm1, norm2;
  WindowAttentionLayer<T> attn;
  LinearLayer<T> fc1, fc2;
  Tensor<T> mask;  // undefined when the block needs none

  SwinBlockLayer() = default;
  SwinBlockLayer(ParamStore<T>& ps, const std::string& prefix,
                 std::size_t res_h_, std::size_t res_w_, std::size_t dim_,
                 std::size_t heads, std::size_t window_, bool shifted,
                 std::size_t mlp_ratio, double drop_path_, Rng& rng)
      : res_h(res_h_), res_w(res_w_), dim(dim_), drop_path(drop_path_) {
    // window shrinks to the resolution when the grid is smaller; such a
    // stage has a single window and shifting would be a no-op
    window = std::min({window_, res_h, res_w});
    shift = shifted && window < std::min(res_h, res_w) ? shift_size(window) : 0;
    pad_h = (res_h + window - 1) / window * window;
    pad_w = (res_w + window - 1) / window * window;
    norm1 = LayerNormLayer<T>(ps, prefix + ".norm1", dim);
    attn = WindowAttentionLayer<T>(ps, prefix + ".attn", dim, heads, window,
                                   rng);
    norm2 = LayerNormLayer<T>(ps, prefix + ".norm2", dim);
    fc1 = LinearLayer<T>(ps, prefix + ".mlp.fc1", dim, mlp_ratio * dim, true,
                         rng);
    fc2 = LinearLayer<T>(ps, prefix + ".mlp.fc2", mlp_ratio * dim, dim, true,
                         rng);
    auto m = build_block_mask<T>(res_h, res_w, window, shift);
    if (m) mask = m->mask;
  }

  /// Residual branch under stochastic depth: identity at eval; per-sample
  /// drop with 1/(1-p) rescale of kept samples at training.
  Tensor<T> apply_drop_path(const Tensor<T>& branch, bool training,
                            Rng* rng) const {
    if (!training || drop_path <= 0.0) return branch;
    if (!rng)
      throw usage_error("swin_block: training forward needs a drop-path rng");
    std::vector<T> factors(branch.dim(0));
    T keep_scale = static_cast<T>(1.0 / (1.0 - drop_path));
    for (auto& f : factors)
      f = rng->uniform01() < drop_path ? T(0) : keep_scale;
    return scale_leading(branch, std::move(factors));
  }

  Tensor<T> forward(const Tensor<T>& x, bool training, Rng* rng) const {
    if (x.rank() != 3 || x.dim(1) != res_h * res_w || x.dim(2) != dim)
      throw usage_error("swin_block: expected [B," +
                        std::to_string(res_h * res_w) + "," +
                        std::to_string(dim) + "], got " +
                        shape_str(x.shape()));
    std::size_t B = x.dim(0);

    auto y = norm1.forward(x);
    y = reshape(y, {B, res_h, res_w, dim});
    if (pad_h != res_h || pad_w != res_w)
      y = pad_hw(y, pad_h - res_h, pad_w - res_w);
    if (shift > 0)
      y = roll_hw(y, -static_cast<std::ptrdiff_t>(shift),
                  -static_cast<std::ptrdiff_t>(shift));
    y = window_partition(y, window);
    y = attn.forward(y, mask);
    y = window_reverse(y, B, pad_h, pad_w, window);
    if (shift > 0)
      y = roll_hw(y, static_cast<std::ptrdiff_t>(shift),
                  static_cast<std::ptrdiff_t>(shift));
    if (pad_h != res_h || pad_w != res_w) y = crop_hw(y, res_h, res_w);
    y = reshape(y, {B, res_h * res_w, dim});
    auto z = add(x, apply_drop_path(y, training, rng));

    auto m = fc2.forward(gelu(fc1.forward(norm2.forward(z))));
    return add(z, apply_drop_path(m, training, rng));
  }
};

/// 4x4 patches flattened to 48 values, linearly embedded, then normed.
template <typename T>
struct PatchEmbedLayer {
  std::size_t patch = 4, in_channels = 3, dim = 0;
  LinearLayer<T> proj;
  LayerNormLayer<T> norm;

  PatchEmbedLayer() = default;
  PatchEmbedLayer(ParamStore<T>& ps, const std::string& prefix,
                  std::size_t patch_, std::size_t in_channels_,
                  std::size_t dim_, Rng& rng)
      : patch(patch_), in_channels(in_channels_), dim(dim_) {
    proj = LinearLayer<T>(ps, prefix + ".proj",
                          patch * patch * in_channels, dim, true, rng);
    norm = LayerNormLayer<T>(ps, prefix + ".norm", dim);
  }

  TokenGrid<T> forward(const Tensor<T>& image) const {
    if (image.rank() != 4 || image.dim(3) != in_channels)
      throw usage_error("patch_embed: expected [B,H,W," +
                        std::to_string(in_channels) + "], got " +
                        shape_str(image.shape()));
    std::size_t B = image.dim(0), H = image.dim(1), W = image.dim(2);
    if (H % patch != 0 || W % patch != 0)
      throw usage_error("patch_embed: image " + std::to_string(H) + "x" +
                        std::to_string(W) + " not divisible by patch " +
                        std::to_string(patch));
    std::size_t gh = H / patch, gw = W / patch;
    auto r = reshape(image, {B, gh, patch, gw, patch, in_channels});
    auto p = permute(r, {0, 1, 3, 2, 4, 5});
    auto tokens = reshape(p, {B, gh * gw, patch * patch * in_channels});
    TokenGrid<T> grid;
    grid.height = gh;
    grid.width = gw;
    grid.dim = dim;
    grid.data = norm.forward(proj.forward(tokens));
    return grid;
  }
};

/// 2x2 neighborhood concat (TL, BL, TR, BR), layer norm on 4D, then a
/// bias-free 4D -> 2D reduction.
template <typename T>
struct PatchMergeLayer {
  std::size_t dim = 0;
  LayerNormLayer<T> norm;
  LinearLayer<T> reduction;

  PatchMergeLayer() = default;
  PatchMergeLayer(ParamStore<T>& ps, const std::string& prefix,
                  std::size_t dim_, Rng& rng)
      : dim(dim_) {
    norm = LayerNormLayer<T>(ps, prefix + ".norm", 4 * dim);
    reduction =
        LinearLayer<T>(ps, prefix + ".reduction", 4 * dim, 2 * dim, false, rng);
  }

  TokenGrid<T> forward(const TokenGrid<T>& grid) const {
    grid.check_consistent();
    if (grid.dim != dim)
      throw usage_error("patch_merge: dim mismatch");
    if (grid.height % 2 != 0 || grid.width % 2 != 0)
      throw usage_error("patch_merge: grid " + std::to_string(grid.height) +
                        "x" + std::to_string(grid.width) + " must be even");
    std::size_t B = grid.batch();
    std::size_t ho = grid.height / 2, wo = grid.width / 2;
    auto r = reshape(grid.data, {B, ho, 2, wo, 2, dim});
    // concat order (TL, BL, TR, BR): sub-col major, sub-row minor
    auto p = permute(r, {0, 1, 3, 4, 2, 5});
    auto cat = reshape(p, {B, ho * wo, 4 * dim});
    TokenGrid<T> out;
    out.height = ho;
    out.width = wo;
    out.dim = 2 * dim;
    out.data = reduction.forward(norm.forward(cat));
    return out;
  }
};

// ---------------------------------------------------------------------------
// Full backbone
// ---------------------------------------------------------------------------

template <typename T>
struct SwinStage {
  std::vector<SwinBlockLayer<T>> blocks;
  std::optional<PatchMergeLayer<T>> downsample;
};

template <typename T>
class SwinModel {
 public:
  explicit SwinModel(const SwinConfig& cfg, std::uint64_t seed = 0)
      : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(seed, "model-init"));
    embed_ = PatchEmbedLayer<T>(params_, "patch_embed", cfg_.patch_size,
                                cfg_.in_channels, cfg_.embed_dim, rng);
    std::size_t total = cfg_.total_blocks();
    std::size_t block_index = 0;
    for (std::size_t st = 0; st < 4; ++st) {
      SwinStage<T> stage;
      std::size_t res = cfg_.stage_res(st);
      std::size_t dim = cfg_.stage_dim(st);
      for (std::size_t b = 0; b < cfg_.depths[st]; ++b) {
        // stochastic depth deepens linearly across the whole model
        double rate = total > 1 ? cfg_.drop_path_rate *
                                      static_cast<double>(block_index) /
                                      static_cast<double>(total - 1)
                                : 0.0;
        stage.blocks.emplace_back(
            params_,
            "stages." + std::to_string(st) + ".blocks." + std::to_string(b),
            res, res, dim, cfg_.num_heads[st], cfg_.window_size,
            /*shifted=*/b % 2 == 1, cfg_.mlp_ratio, rate, rng);
        ++block_index;
      }
      if (st < 3)
        stage.downsample = PatchMergeLayer<T>(
            params_, "stages." + std::to_string(st) + ".downsample", dim, rng);
      stages_.push_back(std::move(stage));
    }
  }

  const SwinConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  /// Features after each stage's blocks (pre-merge): resolutions
  /// grid/2^i and dims C*2^i.
  std::vector<TokenGrid<T>> forward_backbone(const Tensor<T>& images,
                                             bool training = false,
                                             Rng* drop_rng = nullptr) const {
    if (images.rank() != 4 || images.dim(1) != cfg_.img_size ||
        images.dim(2) != cfg_.img_size || images.dim(3) != cfg_.in_channels)
      throw usage_error("forward_backbone: expected [B," +
                        std::to_string(cfg_.img_size) + "," +
                        std::to_string(cfg_.img_size) + "," +
                        std::to_string(cfg_.in_channels) + "], got " +
                        shape_str(images.shape()));
    std::vector<TokenGrid<T>> features;
    TokenGrid<T> grid = embed_.forward(images);
    for (std::size_t st = 0; st < 4; ++st) {
      for (const auto& block : stages_[st].blocks)
        grid.data = block.forward(grid.data, training, drop_rng);
      features.push_back(grid);
      if (stages_[st].downsample)
        grid = stages_[st].downsample->forward(grid);
    }
    return features;
  }

  const PatchEmbedLayer<T>& embed() const { return embed_; }
  const std::vector<SwinStage<T>>& stages() const { return stages_; }

 private:
  SwinConfig cfg_;
  ParamStore<T> params_;
  PatchEmbedLayer<T> embed_;
  std::vector<SwinStage<T>> stages_;
};

}  // namespace swinct
