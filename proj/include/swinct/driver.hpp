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

#ifndef SWINCT_DRIVER_HPP_
#define SWINCT_DRIVER_HPP_

/// End-to-end orchestration behind the command-line tool: dataset
/// preparation from volumes (real or phantom), training a backbone + head on
/// a prepared dataset, checkpoint evaluation, and curve plotting. Everything
/// here is a pure function of (inputs, seed); the only nondeterminism in the
/// whole binary is benchmark timing.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "swinct/checkpoint.hpp"
#include "swinct/heads.hpp"
#include "swinct/metrics.hpp"
#include "swinct/ops.hpp"
#include "swinct/pipeline.hpp"
#include "swinct/runconfig.hpp"
#include "swinct/swin.hpp"
#include "swinct/train.hpp"
#include "swinct/volume.hpp"

namespace swinct {

// ---------------------------------------------------------------------------
// Volume sources
// ---------------------------------------------------------------------------

/// A batch of input volumes with annotations and (optionally) voxel masks.
/// `masks` is parallel to `volumes`; entries are empty when absent.
struct VolumeSet {
  std::vector<Volume> volumes;
  std::vector<std::vector<std::uint8_t>> masks;
  std::vector<NoduleAnnotation> annotations;
  bool has_masks = false;
};

inline VolumeSet phantom_volume_set(std::uint64_t seed, std::size_t n_volumes,
                                    std::size_t size, double nodule_prob) {
  VolumeSet set;
  set.has_masks = true;
  for (auto& pv : make_phantom(seed, n_volumes, size, nodule_prob)) {
    set.volumes.push_back(std::move(pv.volume));
    set.masks.push_back(std::move(pv.mask));
    if (pv.nodule) set.annotations.push_back(std::move(*pv.nodule));
  }
  return set;
}

/// Reads every .swv under volumes_dir (sorted by filename), the annotation
/// JSONL when given, and per-volume mask volumes of matching filenames under
/// masks_dir. Mask voxels are binarized: nonzero means nodule.
inline VolumeSet load_volume_set(const std::string& volumes_dir,
                                 const std::string& annotations_path,
                                 const std::string& masks_dir = "") {
  namespace fs = std::filesystem;
  VolumeSet set;
  if (!fs::is_directory(volumes_dir))
    throw data_error("volumes: not a directory: " + volumes_dir);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(volumes_dir))
    if (e.path().extension() == ".swv") files.push_back(e.path());
  if (files.empty())
    throw data_error("volumes: no .swv files under " + volumes_dir);
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    set.volumes.push_back(load_volume(f.string()));
    if (!masks_dir.empty()) {
      Volume mv = load_volume((fs::path(masks_dir) / f.filename()).string());
      const Volume& vol = set.volumes.back();
      if (mv.depth != vol.depth || mv.height != vol.height ||
          mv.width != vol.width)
        throw data_error("mask " + mv.id + ": dims (" +
                         std::to_string(mv.depth) + "," +
                         std::to_string(mv.height) + "," +
                         std::to_string(mv.width) + ") do not match volume " +
                         vol.id);
      std::vector<std::uint8_t> m(mv.voxels.size());
      for (std::size_t i = 0; i < m.size(); ++i) m[i] = mv.voxels[i] ? 1 : 0;
      set.masks.push_back(std::move(m));
    } else {
      set.masks.emplace_back();
    }
  }
  set.has_masks = !masks_dir.empty();
  if (!annotations_path.empty())
    set.annotations = load_annotations(annotations_path);
  return set;
}

// ---------------------------------------------------------------------------
// Dataset preparation
// ---------------------------------------------------------------------------

namespace detail {

/// Runs fn(0..n-1) across the worker pool; each index owns its output slot,
/// so results are identical to the sequential order regardless of pool size.
template <typename Fn>
void parallel_for_indexed(std::size_t n, Fn fn) {
  unsigned workers = worker_threads();
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      fn(i);
    }
  };
  std::vector<std::thread> pool;
  for (unsigned w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
}

inline std::vector<std::uint8_t> resize_mask_nearest(
    const std::vector<std::uint8_t>& mask, std::size_t h, std::size_t w,
    std::size_t oh, std::size_t ow) {
  std::vector<std::uint8_t> out(oh * ow);
  for (std::size_t oy = 0; oy < oh; ++oy) {
    std::size_t iy = std::min<std::size_t>(
        h - 1, static_cast<std::size_t>((oy + 0.5) * h / oh));
    for (std::size_t ox = 0; ox < ow; ++ox) {
      std::size_t ix = std::min<std::size_t>(
          w - 1, static_cast<std::size_t>((ox + 0.5) * w / ow));
      out[oy * ow + ox] = mask[iy * w + ix];
    }
  }
  return out;
}

inline void resize_records(std::vector<SliceRecord>& recs, std::size_t size) {
  if (size == 0) return;
  parallel_for_indexed(recs.size(), [&](std::size_t i) {
    SliceRecord& rec = recs[i];
    if (rec.height() == size && rec.width() == size) return;
    if (!rec.mask.empty())
      rec.mask = resize_mask_nearest(rec.mask, rec.height(), rec.width(), size,
                                     size);
    rec.image = resize_bicubic(rec.image, size, size);
  });
}

/// The three orthogonal slices through `center`, cut from a cube cropped
/// around it. Provenance keeps the volume-frame center coordinate so two
/// crops from one volume stay distinguishable.
inline void push_center_slices(const Volume& vol,
                               const std::array<std::int64_t, 3>& center,
                               std::size_t crop, int label,
                               std::vector<SliceRecord>& out) {
  NoduleAnnotation at;
  at.volume_id = vol.id;
  at.center_zyx = center;
  Volume cube = crop_nodule(vol, at, crop);
  std::size_t mid = crop / 2;
  const char axes[3] = {'z', 'y', 'x'};
  for (int a = 0; a < 3; ++a) {
    SliceRecord rec =
        detail::make_slice(cube, nullptr, axes[a], mid, crop, crop, label);
    rec.prov.index = static_cast<std::size_t>(center[a]);
    out.push_back(std::move(rec));
  }
}

}  // namespace detail

/// A negative crop is usable only when its cube keeps clear of every
/// annotated nodule. The nodule is a sphere whose voxel radius comes from
/// the diameter over the finest axis spacing (worst case); annotations
/// without a diameter get half the crop side. Center-distance margins are
/// not enough here: a center far away along one axis can still put the
/// nodule straight through a central slice plane.
inline bool crop_clear_of_nodules(const std::array<std::int64_t, 3>& center,
                                  std::size_t crop, const Volume& vol,
                                  const std::vector<const NoduleAnnotation*>&
                                      anns) {
  std::int64_t half = static_cast<std::int64_t>(crop) / 2;
  for (const auto* ann : anns) {
    double r;
    if (ann->diameter_mm) {
      float finest = std::min({vol.spacing[0], vol.spacing[1],
                               vol.spacing[2]});
      r = (*ann->diameter_mm / 2.0) / static_cast<double>(finest);
    } else {
      r = static_cast<double>(crop) / 2.0;
    }
    double d2 = 0;
    for (int a = 0; a < 3; ++a) {
      double lo = static_cast<double>(center[a] - half);
      double hi = lo + static_cast<double>(crop) - 1.0;
      double q = static_cast<double>(ann->center_zyx[a]);
      double d = std::max({0.0, lo - q, q - hi});
      d2 += d * d;
    }
    if (d2 <= r * r) return false;
  }
  return true;
}

struct PrepareResult {
  DatasetManifest manifest;
  nlohmann::json report;
};

/// Builds a dataset directory from volumes: slices under <out>/slices,
/// manifest.json, and report.json with per-split counts and achieved ratios.
/// The manifest is written last, so an interrupted run never looks complete.
inline PrepareResult prepare_dataset(const VolumeSet& set,
                                     const PrepareOptions& opt,
                                     const std::string& out_dir) {
  if (set.volumes.empty()) throw data_error("prepare: no input volumes");
  if (opt.task != "classification" && opt.task != "segmentation")
    throw usage_error("prepare: task must be classification or segmentation");
  bool seg = opt.task == "segmentation";
  if (opt.crop < 2) throw usage_error("prepare: crop must be >= 2");

  std::map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < set.volumes.size(); ++i) {
    if (!by_id.emplace(set.volumes[i].id, i).second)
      throw data_error("prepare: duplicate volume id " + set.volumes[i].id);
  }
  std::map<std::string, std::vector<const NoduleAnnotation*>> nodules;
  for (const auto& ann : set.annotations) {
    auto it = by_id.find(ann.volume_id);
    if (it == by_id.end())
      throw data_error("prepare: annotation references unknown volume " +
                       ann.volume_id);
    validate_annotation(set.volumes[it->second], ann);
    nodules[ann.volume_id].push_back(&ann);
  }

  std::vector<SliceRecord> pos, neg;
  if (seg) {
    if (!set.has_masks)
      throw data_error("prepare: segmentation needs voxel masks");
    for (std::size_t i = 0; i < set.volumes.size(); ++i) {
      auto recs = slice_triaxial(set.volumes[i], &set.masks[i]);
      for (auto& r : recs) pos.push_back(std::move(r));
    }
    if (pos.empty())
      throw data_error("prepare: no slice contains a nodule pixel");
  } else {
    for (const auto& ann : set.annotations)
      detail::push_center_slices(set.volumes[by_id[ann.volume_id]],
                                 ann.center_zyx, opt.crop, 1, pos);
    static const std::vector<const NoduleAnnotation*> kNoNodules;
    for (std::size_t vi = 0; vi < set.volumes.size(); ++vi) {
      const Volume& vol = set.volumes[vi];
      auto it = nodules.find(vol.id);
      const auto& near = it == nodules.end() ? kNoNodules : it->second;
      Rng rng(derive_seed(opt.seed, "negative-crop", vi));
      for (std::size_t k = 0; k < opt.neg_per_volume; ++k) {
        for (int attempt = 0; attempt < 200; ++attempt) {
          std::array<std::int64_t, 3> c{
              static_cast<std::int64_t>(rng.below(vol.depth)),
              static_cast<std::int64_t>(rng.below(vol.height)),
              static_cast<std::int64_t>(rng.below(vol.width))};
          if (!crop_clear_of_nodules(c, opt.crop, vol, near)) continue;
          detail::push_center_slices(vol, c, opt.crop, 0, neg);
          break;
        }
      }
    }
  }

  if (opt.expand > 1) pos = expand_positives(pos, opt.expand, opt.seed);
  if (!seg && opt.neg_fraction < 1.0)
    neg = subsample_negatives(neg, opt.neg_fraction, opt.seed);
  detail::resize_records(pos, opt.img_size);
  detail::resize_records(neg, opt.img_size);

  std::array<double, 3> fractions = opt.ratio;
  if (fractions[0] + fractions[1] + fractions[2] <= 0)
    fractions = seg ? std::array<double, 3>{0.8, 0.1, 0.1}
                    : std::array<double, 3>{0.7, 0.1, 0.2};
  SplitManifest sm =
      seg ? build_splits_segmentation(pos, opt.seed, opt.paper_splits,
                                      fractions)
          : build_splits_classification(pos, neg, opt.seed, fractions);

  // The split indexes positives then negatives; store only referenced
  // records (classification samples the negative pool per split).
  auto record_at = [&](std::size_t u) -> const SliceRecord& {
    return u < pos.size() ? pos[u] : neg[u - pos.size()];
  };
  std::vector<std::size_t> wanted;
  for (const auto* list : {&sm.train, &sm.val, &sm.test})
    wanted.insert(wanted.end(), list->begin(), list->end());

  struct Encoded {
    std::string image_name, image_bytes, mask_name, mask_bytes;
  };
  std::vector<Encoded> enc(wanted.size());
  detail::parallel_for_indexed(wanted.size(), [&](std::size_t i) {
    const SliceRecord& rec = record_at(wanted[i]);
    Encoded& e = enc[i];
    e.image_bytes = encode_swt<float>(rec.image.shape(), rec.image.values());
    e.image_name = detail::hash_name(e.image_bytes, ".swt");
    if (!rec.mask.empty()) {
      e.mask_bytes =
          encode_swt<std::uint8_t>({rec.height(), rec.width()}, rec.mask);
      e.mask_name = detail::hash_name(e.mask_bytes, ".mask.swt");
    }
  });

  std::string slices_dir = out_dir + "/slices";
  std::filesystem::create_directories(slices_dir);
  std::set<std::string> written;
  for (const auto& e : enc) {
    if (written.insert(e.image_name).second)
      atomic_write_file(slices_dir + "/" + e.image_name, e.image_bytes);
    if (!e.mask_name.empty() && written.insert(e.mask_name).second)
      atomic_write_file(slices_dir + "/" + e.mask_name, e.mask_bytes);
  }

  PrepareResult out;
  out.manifest.kind = opt.task;
  out.manifest.seed = opt.seed;
  out.manifest.ratios = sm.declared;
  out.manifest.img_size = opt.img_size;
  std::size_t at = 0;
  auto take = [&](const std::vector<std::size_t>& idx,
                  std::vector<DatasetEntry>& dst) {
    for (std::size_t u : idx) {
      const SliceRecord& rec = record_at(u);
      DatasetEntry e;
      e.image_file = enc[at].image_name;
      e.mask_file = enc[at].mask_name;
      e.label = rec.label;
      e.prov = rec.prov;
      dst.push_back(std::move(e));
      ++at;
    }
  };
  take(sm.train, out.manifest.train);
  take(sm.val, out.manifest.val);
  take(sm.test, out.manifest.test);

  nlohmann::json rep;
  rep["task"] = opt.task;
  rep["seed"] = opt.seed;
  rep["volumes"] = set.volumes.size();
  rep["annotations"] = set.annotations.size();
  rep["img_size"] = opt.img_size;
  rep["expand"] = opt.expand;
  // declared ratios are pos:neg per split for classification and split
  // fractions for segmentation, mirroring the manifest
  rep["ratios_declared"] = sm.declared;
  if (seg) rep["paper_splits"] = opt.paper_splits;
  if (!seg) {
    rep["positive_fractions"] = fractions;
    rep["crop"] = opt.crop;
    rep["positive_pool"] = pos.size();
    rep["negative_pool"] = neg.size();
  } else {
    rep["records"] = pos.size();
  }
  const char* names[3] = {"train", "val", "test"};
  const std::vector<DatasetEntry>* lists[3] = {
      &out.manifest.train, &out.manifest.val, &out.manifest.test};
  std::size_t total = wanted.size();
  for (int s = 0; s < 3; ++s) {
    nlohmann::json js;
    std::size_t p = 0;
    std::set<std::string> vols;
    for (const auto& e : *lists[s]) {
      if (e.label == 1) ++p;
      vols.insert(e.prov.volume_id);
    }
    js["records"] = lists[s]->size();
    js["volumes"] = vols.size();
    if (!seg) {
      std::size_t n = lists[s]->size() - p;
      js["positives"] = p;
      js["negatives"] = n;
      if (n > 0)
        js["pos_neg_achieved"] =
            static_cast<double>(p) / static_cast<double>(n);
    } else if (total > 0) {
      js["fraction_achieved"] =
          static_cast<double>(lists[s]->size()) / static_cast<double>(total);
    }
    rep["splits"][names[s]] = std::move(js);
  }
  out.report = rep;

  atomic_write_file(out_dir + "/report.json", rep.dump(2) + "\n");
  write_manifest(out_dir + "/manifest.json", out.manifest);
  return out;
}

// ---------------------------------------------------------------------------
// Curve plotting
// ---------------------------------------------------------------------------

/// Standalone SVG line plot of (step, value) points. Pure string assembly
/// with fixed formatting, so identical curves render to identical bytes.
inline std::string render_curve_svg(
    const std::string& title, const std::string& y_label,
    const std::vector<std::pair<double, double>>& pts) {
  const double kW = 720, kH = 440;
  const double kL = 70, kR = 700, kT = 40, kB = 390;
  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  if (!pts.empty()) {
    xmin = xmax = pts[0].first;
    ymin = ymax = pts[0].second;
    for (const auto& [x, y] : pts) {
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  }
  if (xmax <= xmin) xmax = xmin + 1;
  double pad = (ymax - ymin) * 0.05;
  if (pad <= 0) pad = std::abs(ymax) * 0.05 + 1e-9;
  ymin -= pad;
  ymax += pad;
  auto sx = [&](double x) { return kL + (x - xmin) / (xmax - xmin) * (kR - kL); };
  auto sy = [&](double y) { return kB - (y - ymin) / (ymax - ymin) * (kB - kT); };

  char buf[256];
  std::string svg;
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" "
                "height=\"%.0f\" viewBox=\"0 0 %.0f %.0f\">\n",
                kW, kH, kW, kH);
  svg += buf;
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "<g font-family=\"sans-serif\" font-size=\"13\" fill=\"#333\">\n";
  std::snprintf(buf, sizeof buf,
                "<text x=\"%.0f\" y=\"24\" text-anchor=\"middle\" "
                "font-size=\"16\">%s</text>\n",
                (kL + kR) / 2, title.c_str());
  svg += buf;
  for (int t = 0; t <= 4; ++t) {
    double fx = xmin + (xmax - xmin) * t / 4.0;
    double fy = ymin + (ymax - ymin) * t / 4.0;
    double gx = sx(fx), gy = sy(fy);
    std::snprintf(buf, sizeof buf,
                  "<line x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\" "
                  "stroke=\"#dddddd\"/>\n",
                  gx, kT, gx, kB);
    svg += buf;
    std::snprintf(buf, sizeof buf,
                  "<line x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\" "
                  "stroke=\"#dddddd\"/>\n",
                  kL, gy, kR, gy);
    svg += buf;
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%.2f\" y=\"%.2f\" text-anchor=\"middle\">%.6g"
                  "</text>\n",
                  gx, kB + 20, fx);
    svg += buf;
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%.2f\" y=\"%.2f\" text-anchor=\"end\">%.6g"
                  "</text>\n",
                  kL - 8, gy + 4, fy);
    svg += buf;
  }
  std::snprintf(buf, sizeof buf,
                "<line x1=\"%.0f\" y1=\"%.0f\" x2=\"%.0f\" y2=\"%.0f\" "
                "stroke=\"#444444\"/>\n",
                kL, kB, kR, kB);
  svg += buf;
  std::snprintf(buf, sizeof buf,
                "<line x1=\"%.0f\" y1=\"%.0f\" x2=\"%.0f\" y2=\"%.0f\" "
                "stroke=\"#444444\"/>\n",
                kL, kT, kL, kB);
  svg += buf;
  std::snprintf(buf, sizeof buf,
                "<text x=\"%.0f\" y=\"%.0f\" text-anchor=\"middle\">step"
                "</text>\n",
                (kL + kR) / 2, kH - 8);
  svg += buf;
  std::snprintf(buf, sizeof buf,
                "<text x=\"%.0f\" y=\"%.0f\">%s</text>\n", 8.0, kT - 10,
                y_label.c_str());
  svg += buf;
  if (!pts.empty()) {
    std::string path = "M";
    for (std::size_t i = 0; i < pts.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%s%.2f,%.2f", i ? " L" : "",
                    sx(pts[i].first), sy(pts[i].second));
      path += buf;
    }
    svg += "<path d=\"" + path +
           "\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\"/>\n";
    if (pts.size() == 1) {
      std::snprintf(buf, sizeof buf,
                    "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"3\" "
                    "fill=\"#1f77b4\"/>\n",
                    sx(pts[0].first), sy(pts[0].second));
      svg += buf;
    }
  }
  svg += "</g>\n</svg>\n";
  return svg;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainSpec {
  SwinConfig model;   // img_size 0 = take the dataset's slice extent
  std::size_t num_classes = 2;
  std::size_t decoder_dim = kDefaultDecoderDim;
  Recipe recipe;
  std::uint64_t seed = 0;
  std::string precision = "f32";  // f32 | f64
  std::string init_dir;           // warm-start checkpoint, "" = fresh
  bool curves = false;            // also emit SVG plots
};

struct TrainOutcome {
  TrainResult result;
  std::string csv;    // exact bytes of the curve CSV
  std::string task;
  std::vector<std::string> files;  // artifacts written under out_dir
};

namespace detail {

template <typename T>
const char* precision_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

inline std::vector<SliceRecord> load_entries(
    const std::string& data_dir, const std::vector<DatasetEntry>& entries) {
  std::vector<SliceRecord> out(entries.size());
  std::string dir = data_dir + "/slices";
  parallel_for_indexed(entries.size(), [&](std::size_t i) {
    out[i] = load_slice(dir, entries[i]);
  });
  return out;
}

// Slices are stored HU-windowed to [0,1]; the model sees them centered to
// [-1,1]. Centering matters: flat low-contrast patches embed as near-parallel
// vectors whose scale the first layer norm erases, so an uncentered uniform
// region is almost invisible to the backbone at initialization.
template <typename T>
Tensor<T> batch_images(const std::vector<SliceRecord>& recs,
                       const std::vector<std::size_t>& idx, std::size_t size) {
  std::vector<T> buf;
  buf.reserve(idx.size() * size * size * 3);
  for (std::size_t i : idx) {
    const SliceRecord& rec = recs[i];
    if (rec.height() != size || rec.width() != size)
      throw data_error("batch: slice " + rec.prov.volume_id + " is " +
                       std::to_string(rec.height()) + "x" +
                       std::to_string(rec.width()) + ", expected " +
                       std::to_string(size));
    for (float v : rec.image.values())
      buf.push_back(static_cast<T>(2.0f * v - 1.0f));
  }
  return Tensor<T>::from({idx.size(), size, size, 3}, std::move(buf));
}

inline std::vector<std::size_t> batch_class_labels(
    const std::vector<SliceRecord>& recs, const std::vector<std::size_t>& idx,
    std::size_t num_classes) {
  std::vector<std::size_t> labels;
  labels.reserve(idx.size());
  for (std::size_t i : idx) {
    int y = recs[i].label;
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
      throw data_error("batch: label " + std::to_string(y) +
                       " out of range for " + std::to_string(num_classes) +
                       " classes");
    labels.push_back(static_cast<std::size_t>(y));
  }
  return labels;
}

inline std::vector<int> batch_pixel_labels(
    const std::vector<SliceRecord>& recs,
    const std::vector<std::size_t>& idx) {
  std::vector<int> labels;
  for (std::size_t i : idx) {
    const SliceRecord& rec = recs[i];
    if (rec.mask.size() != rec.height() * rec.width())
      throw data_error("batch: record from " + rec.prov.volume_id +
                       " carries no pixel mask");
    for (std::uint8_t v : rec.mask) labels.push_back(static_cast<int>(v));
  }
  return labels;
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  std::size_t k = logits.dim(logits.rank() - 1);
  std::size_t n = logits.numel() / k;
  std::vector<int> out(n);
  const T* p = logits.data();
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (p[r * k + j] > p[r * k + best]) best = j;
    out[r] = static_cast<int>(best);
  }
  return out;
}

inline std::vector<std::vector<std::size_t>> chunk_indices(std::size_t n,
                                                           std::size_t batch) {
  std::vector<std::vector<std::size_t>> chunks;
  for (std::size_t at = 0; at < n; at += batch) {
    std::vector<std::size_t> c;
    for (std::size_t i = at; i < std::min(n, at + batch); ++i) c.push_back(i);
    chunks.push_back(std::move(c));
  }
  return chunks;
}

template <typename T>
TrainOutcome train_impl(const DatasetManifest& man, const std::string& data_dir,
                        const TrainSpec& spec, const std::string& out_dir) {
  bool seg = man.kind == "segmentation";
  auto train_recs = load_entries(data_dir, man.train);
  auto val_recs = load_entries(data_dir, man.val);
  if (train_recs.empty())
    throw data_error("train: dataset has no training records");
  std::size_t S = train_recs[0].height();
  if (train_recs[0].width() != S)
    throw data_error("train: slices must be square, got " +
                     std::to_string(S) + "x" +
                     std::to_string(train_recs[0].width()));

  SwinConfig cfg = spec.model;
  if (cfg.img_size == 0) cfg.img_size = S;
  if (cfg.img_size != S)
    throw usage_error("train: model img_size " + std::to_string(cfg.img_size) +
                      " but dataset slices are " + std::to_string(S));
  // the recipe owns the stochastic-depth rate during training
  cfg.drop_path_rate = spec.recipe.drop_path;
  cfg.validate();
  std::size_t K = spec.num_classes;

  SwinModel<T> model(cfg, spec.seed);
  Rng head_rng(derive_seed(spec.seed, "head-init"));
  ClassifierHead<T> cls;
  SegDecoder<T> dec;
  if (seg)
    dec = SegDecoder<T>(model.params(), "head",
                        {cfg.stage_dim(0), cfg.stage_dim(1), cfg.stage_dim(2),
                         cfg.stage_dim(3)},
                        cfg.patch_size, spec.decoder_dim, K, head_rng);
  else
    cls = ClassifierHead<T>(model.params(), "head", cfg.stage_dim(3), K,
                            head_rng);

  auto params = model.params().items();  // handles share the model's storage
  if (!spec.init_dir.empty()) load_checkpoint(spec.init_dir, params);
  AdamW<T> opt(params, spec.recipe.weight_decay);

  TrainOutcome outcome;
  outcome.task = man.kind;

  TrainHooks<T> hooks;
  hooks.batch_loss = [&](const std::vector<std::size_t>& idx,
                         Rng* drop) -> Tensor<T> {
    auto images = batch_images<T>(train_recs, idx, S);
    auto feats = model.forward_backbone(images, /*training=*/true, drop);
    if (seg)
      return pixel_cross_entropy(dec.forward(feats),
                                 batch_pixel_labels(train_recs, idx));
    return softmax_cross_entropy(cls.forward(feats.back()),
                                 batch_class_labels(train_recs, idx, K));
  };

  std::vector<std::string> cols;
  if (!val_recs.empty()) {
    cols = seg ? std::vector<std::string>{"val_miou", "val_macc", "val_aacc"}
               : std::vector<std::string>{"val_top1", "val_top5"};
    hooks.select_metric = seg ? "val_miou" : "val_top1";
    hooks.evaluate = [&]() -> std::map<std::string, double> {
      NoGradGuard guard;
      auto chunks = chunk_indices(val_recs.size(), spec.recipe.batch_size);
      if (seg) {
        ConfusionMatrix cm(K);
        for (const auto& c : chunks) {
          auto feats = model.forward_backbone(batch_images<T>(val_recs, c, S),
                                              false, nullptr);
          cm.accumulate(argmax_rows(dec.forward(feats)),
                        batch_pixel_labels(val_recs, c));
        }
        auto iou = miou(cm);
        auto acc = macc_aacc(cm);
        return {{"val_miou", iou.miou},
                {"val_macc", acc.macc},
                {"val_aacc", acc.aacc}};
      }
      double top1 = 0, top5 = 0;
      for (const auto& c : chunks) {
        auto feats = model.forward_backbone(batch_images<T>(val_recs, c, S),
                                            false, nullptr);
        auto probs = softmax(cls.forward(feats.back()));
        auto labels = batch_class_labels(val_recs, c, K);
        double w = static_cast<double>(c.size());
        top1 += top_k_accuracy(probs, labels, 1) * w;
        top5 += top_k_accuracy(probs, labels, 5) * w;
      }
      double n = static_cast<double>(val_recs.size());
      return {{"val_top1", top1 / n}, {"val_top5", top5 / n}};
    };
  }

  std::set<std::string> noted;
  hooks.checkpoint = [&](const std::string& tag, std::size_t step) {
    nlohmann::json extra;
    extra["step"] = step;
    extra["task"] = man.kind;
    extra["precision"] = precision_name<T>();
    extra["num_classes"] = K;
    extra["decoder_dim"] = spec.decoder_dim;
    extra["model"] = swin_config_to_json(cfg);
    std::string dir = out_dir + "/checkpoint-" + tag;
    save_checkpoint(dir, params, extra);
    if (noted.insert(dir).second) outcome.files.push_back(dir);
  };

  std::ostringstream csv;
  outcome.result = run_recipe(opt, train_recs.size(), spec.recipe, hooks,
                              spec.seed, &csv, cols);
  outcome.csv = csv.str();
  atomic_write_file(out_dir + "/curves.csv", outcome.csv);
  outcome.files.push_back(out_dir + "/curves.csv");

  if (spec.curves) {
    std::vector<std::pair<double, double>> loss;
    for (const auto& p : outcome.result.curve)
      loss.emplace_back(static_cast<double>(p.step + 1), p.train_loss);
    std::string f = out_dir + "/curve-train_loss.svg";
    atomic_write_file(f, render_curve_svg("training loss", "loss", loss));
    outcome.files.push_back(f);
    for (const auto& col : cols) {
      std::vector<std::pair<double, double>> pts;
      for (const auto& p : outcome.result.curve) {
        auto it = p.val.find(col);
        if (it != p.val.end())
          pts.emplace_back(static_cast<double>(p.step + 1), it->second);
      }
      f = out_dir + "/curve-" + col + ".svg";
      atomic_write_file(f, render_curve_svg(col, col, pts));
      outcome.files.push_back(f);
    }
  }
  return outcome;
}

}  // namespace detail

inline TrainOutcome train_on_dataset(const std::string& data_dir,
                                     const TrainSpec& spec,
                                     const std::string& out_dir) {
  DatasetManifest man = read_manifest(data_dir + "/manifest.json");
  if (spec.precision == "f64")
    return detail::train_impl<double>(man, data_dir, spec, out_dir);
  if (spec.precision == "f32")
    return detail::train_impl<float>(man, data_dir, spec, out_dir);
  throw usage_error("train: precision must be f32 or f64");
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
nlohmann::json eval_impl(const DatasetManifest& man,
                         const std::string& data_dir,
                         const std::string& ckpt_dir, const SwinConfig& cfg,
                         std::size_t K, std::size_t decoder_dim,
                         const std::vector<DatasetEntry>& entries,
                         const std::string& split) {
  bool seg = man.kind == "segmentation";
  SwinModel<T> model(cfg, 0);
  Rng head_rng(derive_seed(0, "head-init"));
  ClassifierHead<T> cls;
  SegDecoder<T> dec;
  if (seg)
    dec = SegDecoder<T>(model.params(), "head",
                        {cfg.stage_dim(0), cfg.stage_dim(1), cfg.stage_dim(2),
                         cfg.stage_dim(3)},
                        cfg.patch_size, decoder_dim, K, head_rng);
  else
    cls = ClassifierHead<T>(model.params(), "head", cfg.stage_dim(3), K,
                            head_rng);
  auto params = model.params().items();
  load_checkpoint(ckpt_dir, params);

  auto recs = load_entries(data_dir, entries);
  NoGradGuard guard;
  ConfusionMatrix cm(K);
  double top1 = 0, top5 = 0;
  std::size_t units = 0;
  for (const auto& c : chunk_indices(recs.size(), 8)) {
    auto feats = model.forward_backbone(
        batch_images<T>(recs, c, cfg.img_size), false, nullptr);
    if (seg) {
      auto logits = dec.forward(feats);  // [B,H,W,K]
      auto probs =
          softmax(reshape(logits, {logits.numel() / K, K}));
      auto ints = batch_pixel_labels(recs, c);
      std::vector<std::size_t> labels(ints.begin(), ints.end());
      double w = static_cast<double>(labels.size());
      top1 += top_k_accuracy(probs, labels, 1) * w;
      top5 += top_k_accuracy(probs, labels, 5) * w;
      cm.accumulate(argmax_rows(logits), ints);
      units += labels.size();
    } else {
      auto logits = cls.forward(feats.back());
      auto probs = softmax(logits);
      auto labels = batch_class_labels(recs, c, K);
      double w = static_cast<double>(c.size());
      top1 += top_k_accuracy(probs, labels, 1) * w;
      top5 += top_k_accuracy(probs, labels, 5) * w;
      std::vector<int> ints(labels.begin(), labels.end());
      cm.accumulate(argmax_rows(logits), ints);
      units += c.size();
    }
  }

  auto iou = miou(cm);
  auto acc = macc_aacc(cm);
  auto rep = count_model(
      cfg, seg ? HeadKind::segmentation : HeadKind::classifier, K,
      cfg.img_size, decoder_dim);

  nlohmann::json j;
  j["task"] = man.kind;
  j["split"] = split;
  j["samples"] = entries.size();
  j["evaluated"] = units;  // records for classification, pixels for masks
  j["top1"] = top1 / static_cast<double>(units);
  j["top5"] = top5 / static_cast<double>(units);
  j["miou"] = iou.miou;
  j["macc"] = acc.macc;
  j["aacc"] = acc.aacc;
  j["per_class_iou"] = iou.per_class;
  j["params"] = rep.params_total;
  j["flops"] = rep.macs_total;  // one multiply-accumulate per FLOP
  return j;
}

}  // namespace detail

/// Rebuilds the model recorded in the checkpoint, loads its weights, and
/// scores one split of a prepared dataset. The report carries every metric
/// key for both tasks; for segmentation the top-k rows rank pixel classes.
inline nlohmann::json evaluate_checkpoint(const std::string& data_dir,
                                          const std::string& ckpt_dir,
                                          const std::string& split = "test") {
  DatasetManifest man = read_manifest(data_dir + "/manifest.json");
  const std::vector<DatasetEntry>* entries = nullptr;
  if (split == "train") entries = &man.train;
  else if (split == "val") entries = &man.val;
  else if (split == "test") entries = &man.test;
  else
    throw usage_error("eval: split must be train, val, or test, got \"" +
                      split + "\"");
  if (entries->empty())
    throw data_error("eval: split \"" + split + "\" is empty");

  CheckpointInfo info = read_checkpoint_manifest(ckpt_dir);
  if (!info.extra.contains("model") || !info.extra.contains("task"))
    throw data_error("checkpoint " + ckpt_dir +
                     ": manifest lacks model metadata");
  SwinConfig cfg =
      swin_config_from_json(info.extra.at("model"), "checkpoint model");
  std::string task = info.extra.at("task").get<std::string>();
  if (task != man.kind)
    throw data_error("eval: checkpoint was trained for " + task +
                     " but the dataset kind is " + man.kind);
  std::size_t K = info.extra.value("num_classes", std::size_t{2});
  std::size_t dd = info.extra.value("decoder_dim", kDefaultDecoderDim);
  std::string prec = info.extra.value("precision", "f32");
  if (prec == "f64")
    return detail::eval_impl<double>(man, data_dir, ckpt_dir, cfg, K, dd,
                                     *entries, split);
  return detail::eval_impl<float>(man, data_dir, ckpt_dir, cfg, K, dd,
                                  *entries, split);
}

}  // namespace swinct

#endif  // SWINCT_DRIVER_HPP_
