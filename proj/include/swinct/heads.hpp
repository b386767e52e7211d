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

#ifndef SWINCT_HEADS_HPP_
#define SWINCT_HEADS_HPP_

/// Task heads on top of the backbone: a global-average-pooled linear
/// classifier and an FPN-style segmentation decoder. Both emit logits;
/// softmax lives in the losses and the explicit predict paths.

#include <cstddef>
#include <string>
#include <vector>

#include "swinct/ops.hpp"
#include "swinct/swin.hpp"

namespace swinct {

/// Linear classifier over the mean token of the normalized final stage.
template <typename T>
struct ClassifierHead {
  std::size_t dim = 0;
  std::size_t num_classes = 0;
  LayerNormLayer<T> norm;
  LinearLayer<T> fc;

  ClassifierHead() = default;
  ClassifierHead(ParamStore<T>& ps, const std::string& prefix,
                 std::size_t dim_, std::size_t num_classes_, Rng& rng)
      : dim(dim_), num_classes(num_classes_) {
    if (num_classes < 2)
      throw usage_error("classifier: need at least 2 classes, got " +
                        std::to_string(num_classes));
    norm = LayerNormLayer<T>(ps, prefix + ".norm", dim);
    fc = LinearLayer<T>(ps, prefix + ".fc", dim, num_classes, true, rng);
  }

  /// [B, K] logits from the final TokenGrid.
  Tensor<T> forward(const TokenGrid<T>& grid) const {
    grid.check_consistent();
    if (grid.dim != dim)
      throw usage_error("classifier: feature dim " + std::to_string(grid.dim) +
                        " does not match head dim " + std::to_string(dim));
    return fc.forward(mean_axis(norm.forward(grid.data), 1));
  }

  /// Softmaxed class probabilities, [B, K].
  Tensor<T> predict_probs(const TokenGrid<T>& grid) const {
    return softmax(forward(grid));
  }
};

/// Simplified FPN-style decoder: per-stage lateral projections to a shared
/// width, nearest upsampling to the first stage's grid, sum fusion, one 3x3
/// convolution, bilinear upsampling back to pixel resolution, then a
/// per-pixel linear classifier. No pyramid pooling.
template <typename T>
struct SegDecoder {
  std::size_t decoder_dim = 0;
  std::size_t num_classes = 0;
  std::size_t patch = 4;  // grid-to-pixel upsample factor
  std::vector<std::size_t> stage_dims;
  std::vector<LinearLayer<T>> laterals;
  Tensor<T> fuse_weight, fuse_bias;
  LinearLayer<T> classifier;

  SegDecoder() = default;
  SegDecoder(ParamStore<T>& ps, const std::string& prefix,
             std::vector<std::size_t> stage_dims_, std::size_t patch_,
             std::size_t decoder_dim_, std::size_t num_classes_, Rng& rng)
      : decoder_dim(decoder_dim_),
        num_classes(num_classes_),
        patch(patch_),
        stage_dims(std::move(stage_dims_)) {
    if (num_classes < 2)
      throw usage_error("seg_decoder: need at least 2 classes, got " +
                        std::to_string(num_classes));
    if (stage_dims.size() != 4)
      throw usage_error("seg_decoder: expected 4 stage dims");
    for (std::size_t i = 0; i < 4; ++i)
      laterals.emplace_back(ps, prefix + ".laterals." + std::to_string(i),
                            stage_dims[i], decoder_dim, true, rng);
    fuse_weight = ps.add(
        prefix + ".fuse.weight",
        init::trunc_normal<T>({3, 3, decoder_dim, decoder_dim}, rng));
    fuse_bias =
        ps.add(prefix + ".fuse.bias", Tensor<T>::zeros({decoder_dim}));
    classifier = LinearLayer<T>(ps, prefix + ".classifier", decoder_dim,
                                num_classes, true, rng);
  }

  /// [B, H, W, K] per-pixel logits at input-image resolution.
  Tensor<T> forward(const std::vector<TokenGrid<T>>& feats) const {
    if (feats.size() != 4)
      throw usage_error("seg_decoder: expected 4 feature grids, got " +
                        std::to_string(feats.size()));
    for (std::size_t i = 0; i < 4; ++i) {
      feats[i].check_consistent();
      if (feats[i].dim != stage_dims[i])
        throw usage_error("seg_decoder: stage " + std::to_string(i) + " dim " +
                          std::to_string(feats[i].dim) + ", expected " +
                          std::to_string(stage_dims[i]));
    }
    std::size_t B = feats[0].batch();
    std::size_t bh = feats[0].height, bw = feats[0].width;

    Tensor<T> fused;
    for (std::size_t i = 0; i < 4; ++i) {
      std::size_t h = feats[i].height, w = feats[i].width;
      if (h == 0 || bh % h != 0 || w == 0 || bw % w != 0 || bh / h != bw / w)
        throw usage_error("seg_decoder: stage " + std::to_string(i) +
                          " grid " + std::to_string(h) + "x" +
                          std::to_string(w) + " does not divide " +
                          std::to_string(bh) + "x" + std::to_string(bw));
      auto y = reshape(laterals[i].forward(feats[i].data),
                       {B, h, w, decoder_dim});
      if (h != bh) y = upsample_nearest(y, bh / h);
      fused = i == 0 ? y : add(fused, y);
    }
    auto z = gelu(conv2d_3x3(fused, fuse_weight, fuse_bias));
    z = upsample_bilinear(z, patch);
    std::size_t H = bh * patch, W = bw * patch;
    auto logits =
        classifier.forward(reshape(z, {B, H * W, decoder_dim}));
    return reshape(logits, {B, H, W, num_classes});
  }

  /// Argmax class per pixel, [B*H*W] row-major.
  std::vector<int> predict_mask(const std::vector<TokenGrid<T>>& feats) const {
    NoGradGuard guard;
    auto logits = forward(feats);
    std::size_t K = num_classes, N = logits.numel() / K;
    std::vector<int> out(N);
    const T* p = logits.data();
    for (std::size_t r = 0; r < N; ++r) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < K; ++j)
        if (p[r * K + j] > p[r * K + best]) best = j;
      out[r] = static_cast<int>(best);
    }
    return out;
  }
};

}  // namespace swinct

#endif  // SWINCT_HEADS_HPP_
