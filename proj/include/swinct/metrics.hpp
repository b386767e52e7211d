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

#ifndef SWINCT_METRICS_HPP_
#define SWINCT_METRICS_HPP_

/// Evaluation metrics and the analytic parameter/FLOP model.
///
/// FLOPs convention: 1 multiply-accumulate = 1 FLOP. Published model-size
/// tables use the same scale; doubling conventions exist, so comparisons
/// must normalize first. Only linear / matmul / convolution MACs count;
/// norms, softmax, activations, and resampling are excluded.

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "swinct/heads.hpp"
#include "swinct/swin.hpp"
#include "swinct/tensor.hpp"

namespace swinct {

// ---------------------------------------------------------------------------
// Confusion matrix
// ---------------------------------------------------------------------------

/// counts[i*k + j] = samples of true class i predicted as j. Accumulation is
/// associative, so shard-parallel partial matrices merge by addition.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t k) : k_(k), counts_(k * k, 0) {
    if (k < 2) throw usage_error("confusion_matrix: need at least 2 classes");
  }

  std::size_t classes() const { return k_; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const {
    return counts_[truth * k_ + pred];
  }
  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }

  /// Adds (pred, label) pairs; pairs whose label is kIgnoreLabel are skipped.
  void accumulate(const std::vector<int>& preds,
                  const std::vector<int>& labels) {
    if (preds.size() != labels.size())
      throw usage_error("confusion_matrix: " + std::to_string(preds.size()) +
                        " predictions for " + std::to_string(labels.size()) +
                        " labels");
    for (std::size_t i = 0; i < preds.size(); ++i) {
      int y = labels[i];
      if (y == kIgnoreLabel) continue;
      int p = preds[i];
      if (y < 0 || static_cast<std::size_t>(y) >= k_ || p < 0 ||
          static_cast<std::size_t>(p) >= k_)
        throw data_error("confusion_matrix: pair (" + std::to_string(p) +
                         "," + std::to_string(y) + ") out of range for " +
                         std::to_string(k_) + " classes");
      ++counts_[static_cast<std::size_t>(y) * k_ +
                static_cast<std::size_t>(p)];
    }
  }

  void merge(const ConfusionMatrix& other) {
    if (other.k_ != k_)
      throw usage_error("confusion_matrix: cannot merge " +
                        std::to_string(other.k_) + " classes into " +
                        std::to_string(k_));
    for (std::size_t i = 0; i < counts_.size(); ++i)
      counts_[i] += other.counts_[i];
  }

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

// ---------------------------------------------------------------------------
// Classification and segmentation metrics
// ---------------------------------------------------------------------------

/// Fraction of rows whose label ranks among the k most probable classes.
/// Ties rank the lower class index first; k larger than the class count
/// clamps to it.
template <typename T>
double top_k_accuracy(const Tensor<T>& probs,
                      const std::vector<std::size_t>& labels, std::size_t k) {
  if (probs.rank() != 2)
    throw usage_error("top_k_accuracy: probs must be [N,M]");
  if (k == 0) throw usage_error("top_k_accuracy: k must be positive");
  std::size_t n = probs.dim(0), m = probs.dim(1);
  if (labels.size() != n)
    throw usage_error("top_k_accuracy: " + std::to_string(labels.size()) +
                      " labels for " + std::to_string(n) + " rows");
  k = std::min(k, m);
  std::size_t hits = 0;
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t y = labels[r];
    if (y >= m)
      throw data_error("top_k_accuracy: label " + std::to_string(y) +
                       " out of range for " + std::to_string(m) + " classes");
    const T* p = probs.data() + r * m;
    std::size_t ahead = 0;
    for (std::size_t j = 0; j < m; ++j)
      if (p[j] > p[y] || (p[j] == p[y] && j < y)) ++ahead;
    if (ahead < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

struct IouResult {
  std::vector<double> per_class;  // NaN for classes absent on both sides
  double miou = 0.0;
};

/// Per-class intersection over union from the confusion matrix. Classes
/// never seen in ground truth nor predictions have an undefined IoU (NaN)
/// and are excluded from the mean; when every class is present this is the
/// plain 1/k average.
inline IouResult miou(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw usage_error("miou: empty confusion matrix");
  std::size_t k = cm.classes();
  IouResult res;
  res.per_class.assign(k, std::numeric_limits<double>::quiet_NaN());
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < k; ++c) {
    std::uint64_t inter = cm.at(c, c), row = 0, col = 0;
    for (std::size_t j = 0; j < k; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    std::uint64_t uni = row + col - inter;
    if (uni == 0) continue;
    res.per_class[c] =
        static_cast<double>(inter) / static_cast<double>(uni);
    sum += res.per_class[c];
    ++present;
  }
  res.miou = sum / static_cast<double>(present);
  return res;
}

struct AccResult {
  double macc = 0.0;  // mean per-class recall over classes with ground truth
  double aacc = 0.0;  // overall accuracy, trace / total
};

inline AccResult macc_aacc(const ConfusionMatrix& cm) {
  std::uint64_t total = cm.total();
  if (total == 0) throw usage_error("macc_aacc: empty confusion matrix");
  std::size_t k = cm.classes();
  std::uint64_t trace = 0;
  double recall_sum = 0.0;
  std::size_t with_truth = 0;
  for (std::size_t c = 0; c < k; ++c) {
    trace += cm.at(c, c);
    std::uint64_t row = 0;
    for (std::size_t j = 0; j < k; ++j) row += cm.at(c, j);
    if (row == 0) continue;
    recall_sum += static_cast<double>(cm.at(c, c)) / static_cast<double>(row);
    ++with_truth;
  }
  AccResult res;
  res.aacc = static_cast<double>(trace) / static_cast<double>(total);
  res.macc = recall_sum / static_cast<double>(with_truth);
  return res;
}

// ---------------------------------------------------------------------------
// Attention complexity and the whole-model cost report
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint64_t checked_u64(unsigned __int128 v, const char* what) {
  if (v > std::numeric_limits<std::uint64_t>::max())
    throw numeric_error(std::string(what) + ": count overflows 64 bits");
  return static_cast<std::uint64_t>(v);
}

}  // namespace detail

/// Global multi-head self-attention cost: 4hwC^2 + 2(hw)^2 C MACs.
inline std::uint64_t flops_msa(std::uint64_t h, std::uint64_t w,
                               std::uint64_t c) {
  if (h == 0 || w == 0 || c == 0)
    throw usage_error("flops_msa: dimensions must be positive");
  unsigned __int128 hw = static_cast<unsigned __int128>(h) * w;
  unsigned __int128 v = 4 * hw * c * c + 2 * hw * hw * c;
  return detail::checked_u64(v, "flops_msa");
}

/// Windowed attention cost: 4hwC^2 + 2M^2 hwC MACs, linear in hw.
inline std::uint64_t flops_wmsa(std::uint64_t h, std::uint64_t w,
                                std::uint64_t c, std::uint64_t m) {
  if (h == 0 || w == 0 || c == 0 || m == 0)
    throw usage_error("flops_wmsa: dimensions must be positive");
  if (h % m != 0 || w % m != 0)
    throw usage_error("flops_wmsa: window " + std::to_string(m) +
                      " does not divide " + std::to_string(h) + "x" +
                      std::to_string(w));
  unsigned __int128 hw = static_cast<unsigned __int128>(h) * w;
  unsigned __int128 v = 4 * hw * c * c + 2 * (m * m) * hw * c;
  return detail::checked_u64(v, "flops_wmsa");
}

enum class HeadKind { none, classifier, segmentation };

inline constexpr std::size_t kDefaultDecoderDim = 256;

struct ModuleCost {
  std::string name;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};

struct ComplexityReport {
  std::vector<ModuleCost> modules;
  std::uint64_t params_total = 0;
  std::uint64_t macs_total = 0;
};

/// Analytic parameter and MAC counts for a backbone plus head at a given
/// square input resolution. Parameter counts match a constructed model
/// exactly; MACs cover linear/matmul/conv work only.
inline ComplexityReport count_model(const SwinConfig& cfg, HeadKind head,
                                    std::size_t num_classes,
                                    std::size_t resolution,
                                    std::size_t decoder_dim =
                                        kDefaultDecoderDim) {
  if (cfg.depths.size() != 4 || cfg.num_heads.size() != 4)
    throw usage_error("count_model: config needs 4 stages");
  if (cfg.patch_size == 0 || resolution % cfg.patch_size != 0)
    throw usage_error("count_model: resolution " + std::to_string(resolution) +
                      " not divisible by patch " +
                      std::to_string(cfg.patch_size));
  using u128 = unsigned __int128;
  ComplexityReport rep;
  std::size_t grid = resolution / cfg.patch_size;
  std::size_t in_patch = cfg.patch_size * cfg.patch_size * 3;
  std::size_t c = cfg.embed_dim;

  {
    ModuleCost m{"patch_embed", 0, 0};
    m.params = static_cast<std::uint64_t>(in_patch) * c + c + 2 * c;
    m.macs = detail::checked_u64(
        static_cast<u128>(grid) * grid * in_patch * c, "count_model");
    rep.modules.push_back(m);
  }

  std::size_t res = grid;
  std::size_t dim = c;
  for (std::size_t st = 0; st < 4; ++st) {
    // zero-depth stages are skipped entirely, downsample included; the
    // degenerate all-zero config is just the embedding plus the head
    if (cfg.depths[st] == 0) continue;
    ModuleCost m{"stages." + std::to_string(st), 0, 0};
    std::size_t window = std::min(cfg.window_size, res);
    std::size_t padded = (res + window - 1) / window * window;
    std::size_t span = 2 * window - 1;
    u128 attn_tokens = static_cast<u128>(padded) * padded;
    u128 tokens = static_cast<u128>(res) * res;
    u128 block_params = 0, block_macs = 0;
    block_params += 2 * dim;                                    // norm1
    block_params += static_cast<u128>(dim) * 3 * dim + 3 * dim;  // qkv
    block_params += static_cast<u128>(dim) * dim + dim;          // proj
    block_params += static_cast<u128>(span) * span * cfg.num_heads[st];
    block_params += 2 * dim;                                     // norm2
    std::size_t hidden = cfg.mlp_ratio * dim;
    block_params += static_cast<u128>(dim) * hidden + hidden;    // fc1
    block_params += static_cast<u128>(hidden) * dim + dim;       // fc2
    block_macs += attn_tokens * dim * (4 * dim);                 // qkv + proj
    block_macs += 2 * attn_tokens * (window * window) * dim;     // scores+ctx
    block_macs += 2 * tokens * dim * hidden;                     // mlp
    m.params = detail::checked_u64(block_params * cfg.depths[st],
                                   "count_model");
    m.macs = detail::checked_u64(block_macs * cfg.depths[st], "count_model");
    rep.modules.push_back(m);

    if (st < 3) {
      ModuleCost d{"downsample." + std::to_string(st), 0, 0};
      d.params = static_cast<std::uint64_t>(4 * dim) * (2 * dim) + 8 * dim;
      d.macs = detail::checked_u64(
          (tokens / 4) * (4 * dim) * (2 * dim), "count_model");
      rep.modules.push_back(d);
      res /= 2;
      dim *= 2;
    }
  }

  if (head == HeadKind::classifier) {
    ModuleCost m{"head", 0, 0};
    m.params = 2 * dim + static_cast<std::uint64_t>(dim) * num_classes +
               num_classes;
    m.macs = static_cast<std::uint64_t>(dim) * num_classes;
    rep.modules.push_back(m);
  } else if (head == HeadKind::segmentation) {
    ModuleCost m{"decoder", 0, 0};
    std::size_t base = grid;
    u128 params = 0, macs = 0;
    std::size_t sdim = c, sres = grid;
    for (std::size_t st = 0; st < 4; ++st) {
      params += static_cast<u128>(sdim) * decoder_dim + decoder_dim;
      macs += static_cast<u128>(sres) * sres * sdim * decoder_dim;
      if (st < 3) {
        sres /= 2;
        sdim *= 2;
      }
    }
    params += static_cast<u128>(9) * decoder_dim * decoder_dim + decoder_dim;
    macs += static_cast<u128>(base) * base * 9 * decoder_dim * decoder_dim;
    params += static_cast<u128>(decoder_dim) * num_classes + num_classes;
    macs += static_cast<u128>(resolution) * resolution * decoder_dim *
            num_classes;
    m.params = detail::checked_u64(params, "count_model");
    m.macs = detail::checked_u64(macs, "count_model");
    rep.modules.push_back(m);
  }

  u128 pt = 0, mt = 0;
  for (const auto& m : rep.modules) {
    pt += m.params;
    mt += m.macs;
  }
  rep.params_total = detail::checked_u64(pt, "count_model");
  rep.macs_total = detail::checked_u64(mt, "count_model");
  return rep;
}

}  // namespace swinct

#endif  // SWINCT_METRICS_HPP_
