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

#ifndef SWINCT_PIPELINE_HPP_
#define SWINCT_PIPELINE_HPP_

/// Dataset construction: nodule-centered 48x48x48 crops, tri-axial slicing,
/// seeded augmentation, positive expansion, negative subsampling, leak-free
/// split assembly, and a procedural phantom generator for end-to-end runs.
/// Every stage is a pure function of its inputs and a seed.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "swinct/rng.hpp"
#include "swinct/tensor.hpp"
#include "swinct/tensor_io.hpp"
#include "swinct/volume.hpp"

namespace swinct {

// ---------------------------------------------------------------------------
// HU windowing
// ---------------------------------------------------------------------------

/// Standard lung display window, mapped linearly onto [0,1].
inline constexpr double kHuWindowLo = -1000.0;
inline constexpr double kHuWindowHi = 400.0;

inline float hu_to_unit(std::int16_t hu) {
  double v = (static_cast<double>(hu) - kHuWindowLo) /
             (kHuWindowHi - kHuWindowLo);
  return static_cast<float>(std::clamp(v, 0.0, 1.0));
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

struct Provenance {
  std::string volume_id;
  char axis = 'z';        // slicing direction
  std::size_t index = 0;  // slice index along that axis
  std::string aug;        // empty for unaugmented slices
};

/// One 2D training example. Classification records carry only a label;
/// segmentation records also carry a binary pixel mask.
struct SliceRecord {
  Tensor<float> image;             // [H,W,3], values in [0,1]
  int label = 0;                   // 0 = non-nodule, 1 = nodule
  std::vector<std::uint8_t> mask;  // empty, or H*W values in {0,1}
  Provenance prov;

  std::size_t height() const { return image.dim(0); }
  std::size_t width() const { return image.dim(1); }
};

// ---------------------------------------------------------------------------
// Cropping and slicing
// ---------------------------------------------------------------------------

inline constexpr std::size_t kCropSize = 48;
inline constexpr std::int16_t kAirHu = -1000;

/// Cube of `size` voxels per side centered on the annotation; voxels outside
/// the volume read as air.
inline Volume crop_nodule(const Volume& vol, const NoduleAnnotation& ann,
                          std::size_t size = kCropSize) {
  Volume cube;
  cube.id = vol.id;
  cube.spacing = vol.spacing;
  cube.depth = cube.height = cube.width = size;
  cube.voxels.assign(size * size * size, kAirHu);
  std::int64_t half = static_cast<std::int64_t>(size) / 2;
  std::array<std::int64_t, 3> lo{ann.center_zyx[0] - half,
                                 ann.center_zyx[1] - half,
                                 ann.center_zyx[2] - half};
  std::array<std::int64_t, 3> dims{static_cast<std::int64_t>(vol.depth),
                                   static_cast<std::int64_t>(vol.height),
                                   static_cast<std::int64_t>(vol.width)};
  for (std::size_t z = 0; z < size; ++z) {
    std::int64_t sz = lo[0] + static_cast<std::int64_t>(z);
    if (sz < 0 || sz >= dims[0]) continue;
    for (std::size_t y = 0; y < size; ++y) {
      std::int64_t sy = lo[1] + static_cast<std::int64_t>(y);
      if (sy < 0 || sy >= dims[1]) continue;
      for (std::size_t x = 0; x < size; ++x) {
        std::int64_t sx = lo[2] + static_cast<std::int64_t>(x);
        if (sx < 0 || sx >= dims[2]) continue;
        cube.at(z, y, x) = vol.at(static_cast<std::size_t>(sz),
                                  static_cast<std::size_t>(sy),
                                  static_cast<std::size_t>(sx));
      }
    }
  }
  return cube;
}

/// Same geometry as crop_nodule for a voxel mask; outside reads as 0.
inline std::vector<std::uint8_t> crop_mask(const Volume& vol,
                                           const std::vector<std::uint8_t>& m,
                                           const NoduleAnnotation& ann,
                                           std::size_t size = kCropSize) {
  if (m.size() != vol.numel())
    throw data_error("crop_mask: mask has " + std::to_string(m.size()) +
                     " voxels, volume " + std::to_string(vol.numel()));
  std::vector<std::uint8_t> cube(size * size * size, 0);
  std::int64_t half = static_cast<std::int64_t>(size) / 2;
  for (std::size_t z = 0; z < size; ++z) {
    std::int64_t sz = ann.center_zyx[0] - half + static_cast<std::int64_t>(z);
    if (sz < 0 || sz >= static_cast<std::int64_t>(vol.depth)) continue;
    for (std::size_t y = 0; y < size; ++y) {
      std::int64_t sy =
          ann.center_zyx[1] - half + static_cast<std::int64_t>(y);
      if (sy < 0 || sy >= static_cast<std::int64_t>(vol.height)) continue;
      for (std::size_t x = 0; x < size; ++x) {
        std::int64_t sx =
            ann.center_zyx[2] - half + static_cast<std::int64_t>(x);
        if (sx < 0 || sx >= static_cast<std::int64_t>(vol.width)) continue;
        cube[(z * size + y) * size + x] =
            m[(static_cast<std::size_t>(sz) * vol.height +
               static_cast<std::size_t>(sy)) *
                  vol.width +
              static_cast<std::size_t>(sx)];
      }
    }
  }
  return cube;
}

namespace detail {

inline SliceRecord make_slice(const Volume& vol,
                              const std::vector<std::uint8_t>* mask,
                              char axis, std::size_t index, std::size_t h,
                              std::size_t w, int label) {
  SliceRecord rec;
  rec.prov = {vol.id, axis, index, ""};
  rec.label = label;
  std::vector<float> img(h * w * 3);
  if (mask) rec.mask.assign(h * w, 0);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      std::size_t z, y, x;
      if (axis == 'z') {
        z = index; y = r; x = c;
      } else if (axis == 'y') {
        z = r; y = index; x = c;
      } else {
        z = r; y = c; x = index;
      }
      float v = hu_to_unit(vol.at(z, y, x));
      float* px = img.data() + (r * w + c) * 3;
      px[0] = px[1] = px[2] = v;
      if (mask)
        rec.mask[r * w + c] =
            (*mask)[(z * vol.height + y) * vol.width + x] ? 1 : 0;
    }
  rec.image = Tensor<float>::from({h, w, 3}, std::move(img));
  return rec;
}

}  // namespace detail

/// One slice per index per axis, in z, y, x axis order. With a mask, only
/// slices that contain at least one nodule pixel are kept, labeled 1, and
/// carry their mask plane; without one, every slice is emitted with `label`.
inline std::vector<SliceRecord> slice_triaxial(
    const Volume& vol, const std::vector<std::uint8_t>* mask = nullptr,
    int label = 0) {
  vol.validate();
  if (mask && mask->size() != vol.numel())
    throw data_error("slice_triaxial: mask has " +
                     std::to_string(mask->size()) + " voxels, volume " +
                     std::to_string(vol.numel()));
  std::vector<SliceRecord> out;
  auto emit = [&](char axis, std::size_t count, std::size_t h,
                  std::size_t w) {
    for (std::size_t i = 0; i < count; ++i) {
      SliceRecord rec = detail::make_slice(vol, mask, axis, i, h, w, label);
      if (mask) {
        bool any = std::any_of(rec.mask.begin(), rec.mask.end(),
                               [](std::uint8_t v) { return v != 0; });
        if (!any) continue;
        rec.label = 1;
      }
      out.push_back(std::move(rec));
    }
  };
  emit('z', vol.depth, vol.height, vol.width);
  emit('y', vol.height, vol.depth, vol.width);
  emit('x', vol.width, vol.depth, vol.height);
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// A concrete, reproducible augmentation. Quarter turns and flips are exact
/// array permutations; angle/scale/shift resample with border fill; the
/// photometric terms touch the image only.
struct AugmentPlan {
  int quarter_turns = 0;  // clockwise, 0..3
  bool flip_h = false;
  bool flip_v = false;
  double angle_deg = 0.0;   // small-angle rotation
  double scale = 1.0;       // zoom about the center, crop/pad back
  int shift_y = 0;          // integer translation, fill at borders
  int shift_x = 0;
  double brightness = 0.0;  // additive, image only
  double contrast = 1.0;    // multiplicative about mid-gray, image only

  bool needs_resample() const {
    return angle_deg != 0.0 || scale != 1.0 || shift_y != 0 || shift_x != 0;
  }

  static AugmentPlan sample(Rng& rng, std::size_t extent) {
    AugmentPlan p;
    p.quarter_turns = static_cast<int>(rng.below(4));
    p.flip_h = rng.below(2) == 1;
    p.flip_v = rng.below(2) == 1;
    if (rng.below(2) == 1) p.angle_deg = rng.uniform(-15.0, 15.0);
    if (rng.below(2) == 1) p.scale = rng.uniform(0.5, 2.0);
    if (rng.below(2) == 1) {
      std::int64_t span = static_cast<std::int64_t>(extent / 8);
      p.shift_y = static_cast<int>(
          rng.uniform(-static_cast<double>(span), static_cast<double>(span)));
      p.shift_x = static_cast<int>(
          rng.uniform(-static_cast<double>(span), static_cast<double>(span)));
    }
    if (rng.below(2) == 1) p.brightness = rng.uniform(-0.1, 0.1);
    if (rng.below(2) == 1) p.contrast = rng.uniform(0.8, 1.25);
    return p;
  }
};

namespace detail {

template <typename T>
void rot90_cw(std::vector<T>& buf, std::size_t& h, std::size_t& w,
              std::size_t ch) {
  std::vector<T> out(buf.size());
  // out[y][x] = in[h-1-x][y], output is w x h
  for (std::size_t y = 0; y < w; ++y)
    for (std::size_t x = 0; x < h; ++x)
      for (std::size_t c = 0; c < ch; ++c)
        out[(y * h + x) * ch + c] = buf[((h - 1 - x) * w + y) * ch + c];
  buf = std::move(out);
  std::swap(h, w);
}

template <typename T>
void flip_horizontal(std::vector<T>& buf, std::size_t h, std::size_t w,
                     std::size_t ch) {
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w / 2; ++x)
      for (std::size_t c = 0; c < ch; ++c)
        std::swap(buf[(y * w + x) * ch + c],
                  buf[(y * w + (w - 1 - x)) * ch + c]);
}

template <typename T>
void flip_vertical(std::vector<T>& buf, std::size_t h, std::size_t w,
                   std::size_t ch) {
  for (std::size_t y = 0; y < h / 2; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < ch; ++c)
        std::swap(buf[(y * w + x) * ch + c],
                  buf[((h - 1 - y) * w + x) * ch + c]);
}

}  // namespace detail

inline SliceRecord augment(const SliceRecord& rec, const AugmentPlan& plan) {
  std::size_t h = rec.height(), w = rec.width();
  std::vector<float> img(rec.image.values());
  std::vector<std::uint8_t> mask = rec.mask;
  bool has_mask = !mask.empty();

  for (int k = 0; k < plan.quarter_turns % 4; ++k) {
    std::size_t mh = h, mw = w;
    detail::rot90_cw(img, h, w, 3);
    if (has_mask) detail::rot90_cw(mask, mh, mw, 1);
  }
  if (plan.flip_h) {
    detail::flip_horizontal(img, h, w, 3);
    if (has_mask) detail::flip_horizontal(mask, h, w, 1);
  }
  if (plan.flip_v) {
    detail::flip_vertical(img, h, w, 3);
    if (has_mask) detail::flip_vertical(mask, h, w, 1);
  }

  if (plan.needs_resample()) {
    double theta = plan.angle_deg * 3.14159265358979323846 / 180.0;
    double cos_t = std::cos(-theta), sin_t = std::sin(-theta);
    double cy = (static_cast<double>(h) - 1) / 2.0;
    double cx = (static_cast<double>(w) - 1) / 2.0;
    std::vector<float> rimg(img.size(), 0.0f);
    std::vector<std::uint8_t> rmask(mask.size(), 0);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double dy = (static_cast<double>(y) - cy - plan.shift_y) / plan.scale;
        double dx = (static_cast<double>(x) - cx - plan.shift_x) / plan.scale;
        double sy = cos_t * dy - sin_t * dx + cy;
        double sx = sin_t * dy + cos_t * dx + cx;
        if (sy < 0 || sy > static_cast<double>(h - 1) || sx < 0 ||
            sx > static_cast<double>(w - 1))
          continue;  // border fill stays 0
        std::size_t y0 = static_cast<std::size_t>(sy);
        std::size_t x0 = static_cast<std::size_t>(sx);
        std::size_t y1 = std::min(y0 + 1, h - 1);
        std::size_t x1 = std::min(x0 + 1, w - 1);
        double fy = sy - static_cast<double>(y0);
        double fx = sx - static_cast<double>(x0);
        for (std::size_t c = 0; c < 3; ++c) {
          double v00 = img[(y0 * w + x0) * 3 + c];
          double v01 = img[(y0 * w + x1) * 3 + c];
          double v10 = img[(y1 * w + x0) * 3 + c];
          double v11 = img[(y1 * w + x1) * 3 + c];
          rimg[(y * w + x) * 3 + c] = static_cast<float>(
              (1 - fy) * ((1 - fx) * v00 + fx * v01) +
              fy * ((1 - fx) * v10 + fx * v11));
        }
        if (has_mask)
          rmask[y * w + x] =
              mask[static_cast<std::size_t>(std::lround(sy)) * w +
                   static_cast<std::size_t>(std::lround(sx))];
      }
    img = std::move(rimg);
    mask = std::move(rmask);
  }

  if (plan.brightness != 0.0 || plan.contrast != 1.0)
    for (auto& v : img)
      v = static_cast<float>(std::clamp(
          (static_cast<double>(v) - 0.5) * plan.contrast + 0.5 +
              plan.brightness,
          0.0, 1.0));

  SliceRecord out;
  out.image = Tensor<float>::from({h, w, 3}, std::move(img));
  out.label = rec.label;
  out.mask = std::move(mask);
  out.prov = rec.prov;
  return out;
}

/// Each input yields `factor` records: the original plus factor-1 seeded
/// augmentations tagged aug1..aug{factor-1}. Order is stable.
inline std::vector<SliceRecord> expand_positives(
    const std::vector<SliceRecord>& records, std::size_t factor,
    std::uint64_t seed) {
  if (factor < 1) throw usage_error("expand_positives: factor must be >= 1");
  std::vector<SliceRecord> out;
  out.reserve(records.size() * factor);
  for (std::size_t i = 0; i < records.size(); ++i) {
    out.push_back(records[i]);
    for (std::size_t k = 1; k < factor; ++k) {
      Rng rng(derive_seed(derive_seed(seed, "expand", i), "variant", k));
      auto plan = AugmentPlan::sample(
          rng, std::min(records[i].height(), records[i].width()));
      auto rec = augment(records[i], plan);
      rec.prov.aug = "aug" + std::to_string(k);
      out.push_back(std::move(rec));
    }
  }
  return out;
}

/// Uniform sample without replacement of round(fraction * N) records,
/// original order preserved.
inline std::vector<SliceRecord> subsample_negatives(
    const std::vector<SliceRecord>& records, double fraction,
    std::uint64_t seed) {
  if (!(fraction > 0.0) || fraction > 1.0)
    throw usage_error("subsample_negatives: fraction must be in (0, 1]");
  std::size_t n = records.size();
  std::size_t m = static_cast<std::size_t>(
      std::llround(fraction * static_cast<double>(n)));
  m = std::min(m, n);
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(derive_seed(seed, "subsample-negatives"));
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t j = i + rng.below(n - i);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(m);
  std::sort(idx.begin(), idx.end());
  std::vector<SliceRecord> out;
  out.reserve(m);
  for (std::size_t i : idx) out.push_back(records[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Split assembly
// ---------------------------------------------------------------------------

/// Positive-to-negative ratios per split.
inline constexpr double kTrainPosNeg = 6.0;
inline constexpr double kValPosNeg = 1.2;
inline constexpr double kTestPosNeg = 1.0;

/// Index-based split over an implied record list; for classification the
/// list is positives followed by negatives.
struct SplitManifest {
  std::uint64_t seed = 0;
  std::string kind;
  std::array<double, 3> declared{0, 0, 0};
  std::vector<std::size_t> train, val, test;
};

namespace detail {

/// Largest-remainder rounding of total * fractions; parts sum to total.
inline std::array<std::size_t, 3> largest_remainder(
    std::size_t total, const std::array<double, 3>& fractions) {
  std::array<std::size_t, 3> parts{};
  std::array<double, 3> rem{};
  std::size_t used = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    double exact = static_cast<double>(total) * fractions[i];
    parts[i] = static_cast<std::size_t>(exact);
    rem[i] = exact - static_cast<double>(parts[i]);
    used += parts[i];
  }
  while (used < total) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < 3; ++i)
      if (rem[i] > rem[best]) best = i;
    ++parts[best];
    rem[best] = -1;
    ++used;
  }
  return parts;
}

}  // namespace detail

/// Splits positives 0..P-1 and negatives P..P+N-1 into train/val/test.
/// Volumes never cross splits; within each split, negatives are sampled to
/// the declared positive:negative ratio. `fractions` allocates positives.
inline SplitManifest build_splits_classification(
    const std::vector<SliceRecord>& pos, const std::vector<SliceRecord>& neg,
    std::uint64_t seed,
    const std::array<double, 3>& fractions = {0.7, 0.1, 0.2}) {
  SplitManifest man;
  man.seed = seed;
  man.kind = "classification";
  man.declared = {kTrainPosNeg, kValPosNeg, kTestPosNeg};

  struct Group {
    std::vector<std::size_t> pos, neg;
  };
  std::map<std::string, Group> groups;
  for (std::size_t i = 0; i < pos.size(); ++i)
    groups[pos[i].prov.volume_id].pos.push_back(i);
  for (std::size_t i = 0; i < neg.size(); ++i)
    groups[neg[i].prov.volume_id].neg.push_back(pos.size() + i);

  std::vector<std::string> keys;
  for (const auto& [k, g] : groups) keys.push_back(k);
  Rng rng(derive_seed(seed, "split-classification"));
  rng.shuffle(keys);

  auto targets = detail::largest_remainder(pos.size(), fractions);
  std::array<std::vector<std::size_t>, 3> split_pos, split_neg;
  std::array<std::size_t, 3> have_pos{0, 0, 0};

  // volumes with positives go where positive demand is largest, biggest first
  std::vector<std::string> with_pos, without_pos;
  for (const auto& k : keys)
    (groups[k].pos.empty() ? without_pos : with_pos).push_back(k);
  std::stable_sort(with_pos.begin(), with_pos.end(),
                   [&](const std::string& a, const std::string& b) {
                     return groups[a].pos.size() > groups[b].pos.size();
                   });
  for (const auto& k : with_pos) {
    std::size_t best = 0;
    double best_deficit = -1e300;
    for (std::size_t s = 0; s < 3; ++s) {
      double deficit = static_cast<double>(targets[s]) -
                       static_cast<double>(have_pos[s]);
      if (deficit > best_deficit) {
        best_deficit = deficit;
        best = s;
      }
    }
    auto& g = groups[k];
    for (auto i : g.pos) split_pos[best].push_back(i);
    for (auto i : g.neg) split_neg[best].push_back(i);
    have_pos[best] += g.pos.size();
  }

  // negative-only volumes go where negative demand is largest
  std::array<double, 3> ratio{kTrainPosNeg, kValPosNeg, kTestPosNeg};
  std::array<std::size_t, 3> need_neg;
  for (std::size_t s = 0; s < 3; ++s)
    need_neg[s] = static_cast<std::size_t>(std::llround(
        static_cast<double>(have_pos[s]) / ratio[s]));
  for (const auto& k : without_pos) {
    std::size_t best = 0;
    double best_deficit = -1e300;
    for (std::size_t s = 0; s < 3; ++s) {
      double deficit = static_cast<double>(need_neg[s]) -
                       static_cast<double>(split_neg[s].size());
      if (deficit > best_deficit) {
        best_deficit = deficit;
        best = s;
      }
    }
    for (auto i : groups[k].neg) split_neg[best].push_back(i);
  }

  // sample each split's negatives down to its ratio
  std::array<std::vector<std::size_t>*, 3> out{&man.train, &man.val,
                                               &man.test};
  const char* names[] = {"train", "val", "test"};
  for (std::size_t s = 0; s < 3; ++s) {
    if (split_neg[s].size() < need_neg[s]) {
      double achievable =
          split_neg[s].empty()
              ? std::numeric_limits<double>::infinity()
              : static_cast<double>(have_pos[s]) /
                    static_cast<double>(split_neg[s].size());
      throw data_error(std::string("build_splits: split ") + names[s] +
                       " needs " + std::to_string(need_neg[s]) +
                       " negatives for a " + format_double(ratio[s]) +
                       ":1 ratio but only " +
                       std::to_string(split_neg[s].size()) +
                       " are available (best achievable " +
                       format_double(achievable) + ":1)");
    }
    std::sort(split_pos[s].begin(), split_pos[s].end());
    std::sort(split_neg[s].begin(), split_neg[s].end());
    Rng srng(derive_seed(seed, "split-neg-sample", s));
    for (std::size_t i = 0; i < need_neg[s]; ++i) {
      std::size_t j = i + srng.below(split_neg[s].size() - i);
      std::swap(split_neg[s][i], split_neg[s][j]);
    }
    split_neg[s].resize(need_neg[s]);
    std::sort(split_neg[s].begin(), split_neg[s].end());
    *out[s] = split_pos[s];
    out[s]->insert(out[s]->end(), split_neg[s].begin(), split_neg[s].end());
  }
  return man;
}

/// 8:1:1 split by record count. With the leakage guard (default), whole
/// volumes are assigned greedily and the ratio is honored as closely as the
/// volume granularity permits; paper_splits ignores volume identity and
/// hits the declared counts within one record.
inline SplitManifest build_splits_segmentation(
    const std::vector<SliceRecord>& records, std::uint64_t seed,
    bool paper_splits = false,
    const std::array<double, 3>& fractions = {0.8, 0.1, 0.1}) {
  if (records.size() < 10)
    throw data_error("build_splits: need at least 10 records, got " +
                     std::to_string(records.size()));
  SplitManifest man;
  man.seed = seed;
  man.kind = "segmentation";
  man.declared = {fractions[0], fractions[1], fractions[2]};
  auto targets = detail::largest_remainder(records.size(), fractions);
  std::array<std::vector<std::size_t>*, 3> out{&man.train, &man.val,
                                               &man.test};
  Rng rng(derive_seed(seed, "split-segmentation"));

  if (paper_splits) {
    std::vector<std::size_t> idx(records.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    rng.shuffle(idx);
    std::size_t at = 0;
    for (std::size_t s = 0; s < 3; ++s) {
      out[s]->assign(idx.begin() + static_cast<std::ptrdiff_t>(at),
                     idx.begin() + static_cast<std::ptrdiff_t>(at + targets[s]));
      std::sort(out[s]->begin(), out[s]->end());
      at += targets[s];
    }
    return man;
  }

  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < records.size(); ++i)
    groups[records[i].prov.volume_id].push_back(i);
  std::vector<std::string> keys;
  for (const auto& [k, g] : groups) keys.push_back(k);
  rng.shuffle(keys);
  std::stable_sort(keys.begin(), keys.end(),
                   [&](const std::string& a, const std::string& b) {
                     return groups[a].size() > groups[b].size();
                   });
  for (const auto& k : keys) {
    std::size_t best = 0;
    double best_deficit = -1e300;
    for (std::size_t s = 0; s < 3; ++s) {
      double deficit = static_cast<double>(targets[s]) -
                       static_cast<double>(out[s]->size());
      if (deficit > best_deficit) {
        best_deficit = deficit;
        best = s;
      }
    }
    for (auto i : groups[k]) out[best]->push_back(i);
  }
  for (std::size_t s = 0; s < 3; ++s) std::sort(out[s]->begin(), out[s]->end());
  return man;
}

// ---------------------------------------------------------------------------
// Phantom generator
// ---------------------------------------------------------------------------

/// Lung-like noise volumes around -700 HU, optionally carrying one bright
/// sphere of soft-tissue density near +50 HU. The mask marks sphere voxels.
struct PhantomVolume {
  Volume volume;
  std::vector<std::uint8_t> mask;
  std::optional<NoduleAnnotation> nodule;
};

inline std::vector<PhantomVolume> make_phantom(std::uint64_t seed,
                                               std::size_t n_volumes,
                                               std::size_t size = 64,
                                               double nodule_prob = 0.5) {
  if (size < 16) throw usage_error("make_phantom: size must be >= 16");
  std::vector<PhantomVolume> out;
  out.reserve(n_volumes);
  Rng base(seed);
  for (std::size_t i = 0; i < n_volumes; ++i) {
    Rng rng = base.child("phantom-volume", i);
    PhantomVolume pv;
    char idbuf[32];
    std::snprintf(idbuf, sizeof idbuf, "phantom-%04zu", i);
    pv.volume.id = idbuf;
    pv.volume.depth = pv.volume.height = pv.volume.width = size;
    pv.volume.voxels.resize(size * size * size);
    pv.mask.assign(size * size * size, 0);
    for (auto& v : pv.volume.voxels)
      v = static_cast<std::int16_t>(
          std::lround(std::clamp(-700.0 + rng.normal() * 50.0, -1024.0,
                                 3071.0)));
    if (rng.uniform01() < nodule_prob) {
      double radius = rng.uniform(3.0, 8.0);
      std::int64_t margin = static_cast<std::int64_t>(std::ceil(radius)) + 2;
      auto place = [&] {
        return static_cast<std::int64_t>(margin) +
               static_cast<std::int64_t>(rng.below(
                   size - 2 * static_cast<std::size_t>(margin)));
      };
      std::array<std::int64_t, 3> c{place(), place(), place()};
      double r2 = radius * radius;
      for (std::int64_t z = c[0] - margin; z <= c[0] + margin; ++z)
        for (std::int64_t y = c[1] - margin; y <= c[1] + margin; ++y)
          for (std::int64_t x = c[2] - margin; x <= c[2] + margin; ++x) {
            double dz = static_cast<double>(z - c[0]);
            double dy = static_cast<double>(y - c[1]);
            double dx = static_cast<double>(x - c[2]);
            if (dz * dz + dy * dy + dx * dx > r2) continue;
            std::size_t at =
                (static_cast<std::size_t>(z) * size +
                 static_cast<std::size_t>(y)) *
                    size +
                static_cast<std::size_t>(x);
            pv.volume.voxels[at] = static_cast<std::int16_t>(
                std::lround(std::clamp(50.0 + rng.normal() * 20.0, -1024.0,
                                       3071.0)));
            pv.mask[at] = 1;
          }
      NoduleAnnotation ann;
      ann.volume_id = pv.volume.id;
      ann.center_zyx = c;
      ann.diameter_mm = 2.0 * radius;
      pv.nodule = ann;
    }
    out.push_back(std::move(pv));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bicubic resize (Catmull-Rom), dataset preparation only
// ---------------------------------------------------------------------------

namespace detail {

inline double catmull_rom(double t) {
  t = std::abs(t);
  if (t <= 1.0) return 1.5 * t * t * t - 2.5 * t * t + 1.0;
  if (t < 2.0) return -0.5 * t * t * t + 2.5 * t * t - 4.0 * t + 2.0;
  return 0.0;
}

}  // namespace detail

/// Half-pixel-centered bicubic resize of [H,W,C]; taps clamp at edges and
/// the result is clamped back to [0,1].
inline Tensor<float> resize_bicubic(const Tensor<float>& img, std::size_t oh,
                                    std::size_t ow) {
  if (img.rank() != 3) throw usage_error("resize_bicubic: image must be 3D");
  if (oh == 0 || ow == 0)
    throw usage_error("resize_bicubic: output dims must be positive");
  std::size_t h = img.dim(0), w = img.dim(1), ch = img.dim(2);
  struct Taps {
    std::array<std::size_t, 4> at;
    std::array<double, 4> weight;
  };
  auto make_taps = [](std::size_t in, std::size_t outn) {
    std::vector<Taps> taps(outn);
    double scale = static_cast<double>(in) / static_cast<double>(outn);
    for (std::size_t o = 0; o < outn; ++o) {
      double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
      double base = std::floor(src);
      double f = src - base;
      for (int k = -1; k <= 2; ++k) {
        std::int64_t p = static_cast<std::int64_t>(base) + k;
        p = std::clamp<std::int64_t>(p, 0, static_cast<std::int64_t>(in) - 1);
        taps[o].at[static_cast<std::size_t>(k + 1)] =
            static_cast<std::size_t>(p);
        taps[o].weight[static_cast<std::size_t>(k + 1)] =
            detail::catmull_rom(static_cast<double>(k) - f);
      }
    }
    return taps;
  };
  auto rt = make_taps(h, oh);
  auto ct = make_taps(w, ow);
  std::vector<float> out(oh * ow * ch);
  const float* src = img.data();
  for (std::size_t r = 0; r < oh; ++r)
    for (std::size_t c = 0; c < ow; ++c)
      for (std::size_t d = 0; d < ch; ++d) {
        double acc = 0.0;
        for (std::size_t i = 0; i < 4; ++i)
          for (std::size_t j = 0; j < 4; ++j)
            acc += rt[r].weight[i] * ct[c].weight[j] *
                   static_cast<double>(
                       src[(rt[r].at[i] * w + ct[c].at[j]) * ch + d]);
        out[(r * ow + c) * ch + d] =
            static_cast<float>(std::clamp(acc, 0.0, 1.0));
      }
  return Tensor<float>::from({oh, ow, ch}, std::move(out));
}

// ---------------------------------------------------------------------------
// Content-addressed slice store and dataset manifest
// ---------------------------------------------------------------------------

struct DatasetEntry {
  std::string image_file;
  std::string mask_file;  // empty when the record has no mask
  int label = 0;
  Provenance prov;
};

struct DatasetManifest {
  std::string kind;
  std::uint64_t seed = 0;
  std::array<double, 3> ratios{0, 0, 0};
  std::size_t img_size = 0;  // post-resize slice extent, 0 = native
  std::vector<DatasetEntry> train, val, test;
};

namespace detail {

inline std::string hash_name(const std::string& bytes, const char* suffix) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a(bytes)));
  return std::string(buf) + suffix;
}

}  // namespace detail

/// Writes the record's tensors under dir (names derived from content) and
/// returns the manifest entry pointing at them.
inline DatasetEntry store_slice(const std::string& dir,
                                const SliceRecord& rec) {
  DatasetEntry e;
  e.label = rec.label;
  e.prov = rec.prov;
  std::string img = encode_swt<float>(rec.image.shape(), rec.image.values());
  e.image_file = detail::hash_name(img, ".swt");
  atomic_write_file(dir + "/" + e.image_file, img);
  if (!rec.mask.empty()) {
    std::string m =
        encode_swt<std::uint8_t>({rec.height(), rec.width()}, rec.mask);
    e.mask_file = detail::hash_name(m, ".mask.swt");
    atomic_write_file(dir + "/" + e.mask_file, m);
  }
  return e;
}

inline SliceRecord load_slice(const std::string& dir, const DatasetEntry& e) {
  SliceRecord rec;
  rec.label = e.label;
  rec.prov = e.prov;
  SwtTensor img = read_swt(dir + "/" + e.image_file);
  if (img.shape.size() != 3 || img.shape[2] != 3)
    throw data_error("slice " + e.image_file + ": expected [H,W,3], got " +
                     shape_str(img.shape));
  rec.image = Tensor<float>::from(img.shape, img.as<float>());
  if (!e.mask_file.empty()) {
    SwtTensor m = read_swt(dir + "/" + e.mask_file);
    if (m.shape.size() != 2 || m.shape[0] != rec.height() ||
        m.shape[1] != rec.width())
      throw data_error("mask " + e.mask_file + ": shape " +
                       shape_str(m.shape) + " does not match image");
    rec.mask = m.as<std::uint8_t>();
  }
  return rec;
}

inline nlohmann::json manifest_to_json(const DatasetManifest& man) {
  nlohmann::json j;
  j["kind"] = man.kind;
  j["seed"] = man.seed;
  j["ratios"] = {man.ratios[0], man.ratios[1], man.ratios[2]};
  j["img_size"] = man.img_size;
  j["hu_window"] = {kHuWindowLo, kHuWindowHi};
  auto dump = [&](const std::vector<DatasetEntry>& list) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& e : list) {
      nlohmann::json r;
      r["image"] = e.image_file;
      if (!e.mask_file.empty()) r["mask"] = e.mask_file;
      r["label"] = e.label;
      r["volume_id"] = e.prov.volume_id;
      r["axis"] = std::string(1, e.prov.axis);
      r["index"] = e.prov.index;
      if (!e.prov.aug.empty()) r["aug"] = e.prov.aug;
      arr.push_back(std::move(r));
    }
    return arr;
  };
  j["splits"]["train"] = dump(man.train);
  j["splits"]["val"] = dump(man.val);
  j["splits"]["test"] = dump(man.test);
  return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest man;
  try {
    man.kind = j.at("kind").get<std::string>();
    man.seed = j.at("seed").get<std::uint64_t>();
    for (std::size_t i = 0; i < 3; ++i)
      man.ratios[i] = j.at("ratios").at(i).get<double>();
    man.img_size = j.value("img_size", std::size_t{0});
    auto parse = [&](const nlohmann::json& arr) {
      std::vector<DatasetEntry> list;
      for (const auto& r : arr) {
        DatasetEntry e;
        e.image_file = r.at("image").get<std::string>();
        e.mask_file = r.value("mask", std::string());
        e.label = r.at("label").get<int>();
        e.prov.volume_id = r.at("volume_id").get<std::string>();
        std::string axis = r.at("axis").get<std::string>();
        if (axis.size() != 1) throw data_error("manifest: bad axis");
        e.prov.axis = axis[0];
        e.prov.index = r.at("index").get<std::size_t>();
        e.prov.aug = r.value("aug", std::string());
        list.push_back(std::move(e));
      }
      return list;
    };
    man.train = parse(j.at("splits").at("train"));
    man.val = parse(j.at("splits").at("val"));
    man.test = parse(j.at("splits").at("test"));
  } catch (const nlohmann::json::exception& e) {
    throw data_error(std::string("manifest: ") + e.what());
  }
  return man;
}

inline void write_manifest(const std::string& path,
                           const DatasetManifest& man) {
  atomic_write_file(path, manifest_to_json(man).dump(2) + "\n");
}

inline DatasetManifest read_manifest(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw data_error("manifest " + path + ": " + e.what());
  }
  return manifest_from_json(j);
}

}  // namespace swinct

#endif  // SWINCT_PIPELINE_HPP_
