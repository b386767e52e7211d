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

#ifndef SWINCT_RUNCONFIG_HPP_
#define SWINCT_RUNCONFIG_HPP_

/// Run configuration shared by the command-line tools: one JSON document
/// covering the model, the task head, the training recipe, and the dataset
/// pipeline. Parsing is strict: every key is type-checked and unknown keys
/// are rejected, so a typo never silently falls back to a default.

#include <array>
#include <cstdint>
#include <initializer_list>
#include <string>

#include <json.hpp>

#include "swinct/common.hpp"
#include "swinct/metrics.hpp"
#include "swinct/pipeline.hpp"
#include "swinct/swin.hpp"
#include "swinct/train.hpp"

namespace swinct {

/// Task head selection. `kind` follows the dataset kind when left empty.
struct HeadSpec {
  HeadKind kind = HeadKind::classifier;
  std::size_t num_classes = 2;
  std::size_t decoder_dim = kDefaultDecoderDim;
};

/// Dataset-construction options for the prepare command.
struct PrepareOptions {
  std::string task = "classification";
  std::uint64_t seed = 0;
  std::size_t phantom = 0;       // synthesize this many volumes when > 0
  std::size_t phantom_size = 64;
  double nodule_prob = 0.5;
  std::string volumes;           // directory of .swv files (real mode)
  std::string annotations;       // JSONL nodule annotations (real mode)
  std::string masks;             // directory of .swv voxel masks
  std::size_t crop = kCropSize;  // nodule cube side, classification
  std::size_t img_size = 0;      // resize slices to this extent, 0 = native
  std::size_t expand = 1;        // records per positive slice
  double neg_fraction = 1.0;     // negative-pool subsample, classification
  std::size_t neg_per_volume = 2;  // candidate negative crops per volume
  std::array<double, 3> ratio{0, 0, 0};  // zeros = task default
  bool paper_splits = false;     // slice-level splits, no leakage guard
};

/// Everything a command needs, assembled from a config file plus flag
/// overrides. `model.img_size == 0` means "not stated": train fills it from
/// the dataset, count falls back to 224.
struct RunConfig {
  RunConfig() { model.img_size = 0; }

  std::uint64_t seed = 0;
  std::string out;
  std::string precision = "f32";  // training scalar type: f32 | f64
  SwinConfig model;
  HeadSpec head;
  bool head_kind_set = false;
  Recipe recipe;
  PrepareOptions pipeline;
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j,
                                const std::string& where,
                                std::initializer_list<const char*> allowed) {
  if (!j.is_object())
    throw usage_error("config: " + where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (const char* a : allowed)
      if (key == a) {
        known = true;
        break;
      }
    if (!known)
      throw usage_error("config: unknown key \"" + key + "\" in " + where);
  }
}

inline std::uint64_t cfg_u64(const nlohmann::json& j, const std::string& where,
                             const char* key, std::uint64_t fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_number_unsigned())
    throw usage_error("config: " + where + "." + key +
                      " must be a nonnegative integer");
  return v.get<std::uint64_t>();
}

inline double cfg_double(const nlohmann::json& j, const std::string& where,
                         const char* key, double fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_number())
    throw usage_error("config: " + where + "." + key + " must be a number");
  return v.get<double>();
}

inline bool cfg_bool(const nlohmann::json& j, const std::string& where,
                     const char* key, bool fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_boolean())
    throw usage_error("config: " + where + "." + key + " must be a boolean");
  return v.get<bool>();
}

inline std::string cfg_string(const nlohmann::json& j,
                              const std::string& where, const char* key,
                              const std::string& fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_string())
    throw usage_error("config: " + where + "." + key + " must be a string");
  return v.get<std::string>();
}

template <std::size_t N>
std::array<std::size_t, N> cfg_size_array(const nlohmann::json& j,
                                          const std::string& where,
                                          const char* key,
                                          std::array<std::size_t, N> fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_array() || v.size() != N)
    throw usage_error("config: " + where + "." + key + " must be an array of " +
                      std::to_string(N) + " integers");
  std::array<std::size_t, N> out{};
  for (std::size_t i = 0; i < N; ++i) {
    if (!v[i].is_number_unsigned())
      throw usage_error("config: " + where + "." + key +
                        " entries must be nonnegative integers");
    out[i] = v[i].get<std::size_t>();
  }
  return out;
}

}  // namespace detail

inline SwinConfig swin_variant(const std::string& name) {
  if (name == "swin-t") return SwinConfig::swin_t();
  if (name == "swin-s") return SwinConfig::swin_s();
  if (name == "swin-b") return SwinConfig::swin_b();
  if (name == "swin-b-384") return SwinConfig::swin_b_384();
  if (name == "custom") return SwinConfig{};
  throw usage_error("unknown variant \"" + name +
                    "\" (expected swin-t, swin-s, swin-b, swin-b-384)");
}

inline ScheduleKind schedule_kind(const std::string& name) {
  if (name == "cosine") return ScheduleKind::cosine;
  if (name == "linear") return ScheduleKind::linear;
  if (name == "constant") return ScheduleKind::constant;
  throw usage_error("unknown schedule \"" + name +
                    "\" (expected cosine, linear, constant)");
}

inline HeadKind head_kind(const std::string& name) {
  if (name == "none") return HeadKind::none;
  if (name == "classifier") return HeadKind::classifier;
  if (name == "segmentation") return HeadKind::segmentation;
  throw usage_error("unknown head \"" + name +
                    "\" (expected none, classifier, segmentation)");
}

inline SwinConfig swin_config_from_json(const nlohmann::json& j,
                                        const std::string& where = "model") {
  detail::reject_unknown_keys(
      j, where,
      {"variant", "img_size", "patch_size", "in_channels", "embed_dim",
       "depths", "num_heads", "window_size", "mlp_ratio", "drop_path_rate"});
  SwinConfig cfg;
  cfg.img_size = 0;  // unset until data or flags pin it
  if (j.contains("variant")) {
    cfg = swin_variant(detail::cfg_string(j, where, "variant", "custom"));
    if (cfg.variant == "custom") cfg.img_size = 0;
  }
  cfg.img_size = detail::cfg_u64(j, where, "img_size", cfg.img_size);
  cfg.patch_size = detail::cfg_u64(j, where, "patch_size", cfg.patch_size);
  cfg.in_channels = detail::cfg_u64(j, where, "in_channels", cfg.in_channels);
  cfg.embed_dim = detail::cfg_u64(j, where, "embed_dim", cfg.embed_dim);
  cfg.depths = detail::cfg_size_array<4>(j, where, "depths", cfg.depths);
  cfg.num_heads =
      detail::cfg_size_array<4>(j, where, "num_heads", cfg.num_heads);
  cfg.window_size = detail::cfg_u64(j, where, "window_size", cfg.window_size);
  cfg.mlp_ratio = detail::cfg_u64(j, where, "mlp_ratio", cfg.mlp_ratio);
  cfg.drop_path_rate =
      detail::cfg_double(j, where, "drop_path_rate", cfg.drop_path_rate);
  if (!j.contains("variant")) cfg.variant = "custom";
  return cfg;
}

inline nlohmann::json swin_config_to_json(const SwinConfig& cfg) {
  nlohmann::json j;
  j["variant"] = cfg.variant;
  j["img_size"] = cfg.img_size;
  j["patch_size"] = cfg.patch_size;
  j["in_channels"] = cfg.in_channels;
  j["embed_dim"] = cfg.embed_dim;
  j["depths"] = cfg.depths;
  j["num_heads"] = cfg.num_heads;
  j["window_size"] = cfg.window_size;
  j["mlp_ratio"] = cfg.mlp_ratio;
  j["drop_path_rate"] = cfg.drop_path_rate;
  return j;
}

inline Recipe recipe_from_json(const nlohmann::json& j,
                               const std::string& where = "recipe") {
  detail::reject_unknown_keys(
      j, where,
      {"name", "epochs", "warmup_epochs", "iterations", "warmup_iterations",
       "batch_size", "lr", "min_lr", "weight_decay", "schedule", "drop_path",
       "use_ema", "ema_decay", "clip_norm", "eval_every"});
  Recipe r;
  if (j.contains("name"))
    r = recipe_by_name(detail::cfg_string(j, where, "name", ""));
  r.epochs = detail::cfg_u64(j, where, "epochs", r.epochs);
  r.warmup_epochs = detail::cfg_u64(j, where, "warmup_epochs", r.warmup_epochs);
  r.iterations = detail::cfg_u64(j, where, "iterations", r.iterations);
  r.warmup_iterations =
      detail::cfg_u64(j, where, "warmup_iterations", r.warmup_iterations);
  r.batch_size = detail::cfg_u64(j, where, "batch_size", r.batch_size);
  r.lr = detail::cfg_double(j, where, "lr", r.lr);
  r.min_lr = detail::cfg_double(j, where, "min_lr", r.min_lr);
  r.weight_decay = detail::cfg_double(j, where, "weight_decay", r.weight_decay);
  if (j.contains("schedule"))
    r.schedule = schedule_kind(detail::cfg_string(j, where, "schedule", ""));
  r.drop_path = detail::cfg_double(j, where, "drop_path", r.drop_path);
  r.use_ema = detail::cfg_bool(j, where, "use_ema", r.use_ema);
  r.ema_decay = detail::cfg_double(j, where, "ema_decay", r.ema_decay);
  r.clip_norm = detail::cfg_double(j, where, "clip_norm", r.clip_norm);
  r.eval_every = detail::cfg_u64(j, where, "eval_every", r.eval_every);
  // both-zero epochs/iterations means "from flags"; leave for Recipe::validate
  return r;
}

/// Parses "a:b:c" (or "a,b,c") proportions and normalizes them to fractions.
inline std::array<double, 3> parse_ratio(const std::string& text) {
  std::array<double, 3> parts{};
  std::size_t pos = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    std::size_t end = text.find_first_of(":,", pos);
    std::string tok = text.substr(pos, end == std::string::npos
                                           ? std::string::npos
                                           : end - pos);
    char* stop = nullptr;
    parts[i] = std::strtod(tok.c_str(), &stop);
    if (stop == tok.c_str() || *stop != '\0' || !(parts[i] >= 0))
      throw usage_error("ratio: bad component \"" + tok + "\" in \"" + text +
                        "\"");
    if (i < 2) {
      if (end == std::string::npos)
        throw usage_error("ratio: expected three components in \"" + text +
                          "\"");
      pos = end + 1;
    } else if (end != std::string::npos) {
      throw usage_error("ratio: expected three components in \"" + text +
                        "\"");
    }
  }
  double sum = parts[0] + parts[1] + parts[2];
  if (!(sum > 0)) throw usage_error("ratio: components sum to zero");
  for (auto& p : parts) p /= sum;
  return parts;
}

inline PrepareOptions prepare_options_from_json(
    const nlohmann::json& j, const std::string& where = "pipeline") {
  detail::reject_unknown_keys(
      j, where,
      {"task", "phantom", "phantom_size", "nodule_prob", "volumes",
       "annotations", "masks", "crop", "img_size", "expand", "neg_fraction",
       "neg_per_volume", "ratio", "paper_splits"});
  PrepareOptions p;
  p.task = detail::cfg_string(j, where, "task", p.task);
  if (p.task != "classification" && p.task != "segmentation")
    throw usage_error("config: " + where + ".task must be classification or "
                      "segmentation");
  p.phantom = detail::cfg_u64(j, where, "phantom", p.phantom);
  p.phantom_size = detail::cfg_u64(j, where, "phantom_size", p.phantom_size);
  p.nodule_prob = detail::cfg_double(j, where, "nodule_prob", p.nodule_prob);
  p.volumes = detail::cfg_string(j, where, "volumes", p.volumes);
  p.annotations = detail::cfg_string(j, where, "annotations", p.annotations);
  p.masks = detail::cfg_string(j, where, "masks", p.masks);
  p.crop = detail::cfg_u64(j, where, "crop", p.crop);
  p.img_size = detail::cfg_u64(j, where, "img_size", p.img_size);
  p.expand = detail::cfg_u64(j, where, "expand", p.expand);
  p.neg_fraction = detail::cfg_double(j, where, "neg_fraction", p.neg_fraction);
  p.neg_per_volume =
      detail::cfg_u64(j, where, "neg_per_volume", p.neg_per_volume);
  if (j.contains("ratio")) {
    const auto& v = j.at("ratio");
    if (v.is_string()) {
      p.ratio = parse_ratio(v.get<std::string>());
    } else if (v.is_array() && v.size() == 3) {
      double sum = 0;
      for (std::size_t i = 0; i < 3; ++i) {
        if (!v[i].is_number() || v[i].get<double>() < 0)
          throw usage_error("config: " + where +
                            ".ratio entries must be nonnegative numbers");
        p.ratio[i] = v[i].get<double>();
        sum += p.ratio[i];
      }
      if (!(sum > 0))
        throw usage_error("config: " + where + ".ratio sums to zero");
      for (auto& r : p.ratio) r /= sum;
    } else {
      throw usage_error("config: " + where +
                        ".ratio must be \"a:b:c\" or an array of 3 numbers");
    }
  }
  p.paper_splits = detail::cfg_bool(j, where, "paper_splits", p.paper_splits);
  return p;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(
      j, "top level",
      {"seed", "out", "precision", "model", "head", "recipe", "pipeline"});
  RunConfig rc;
  rc.seed = detail::cfg_u64(j, "top level", "seed", rc.seed);
  rc.out = detail::cfg_string(j, "top level", "out", rc.out);
  rc.precision = detail::cfg_string(j, "top level", "precision", rc.precision);
  if (rc.precision != "f32" && rc.precision != "f64")
    throw usage_error("config: precision must be f32 or f64");
  if (j.contains("model")) rc.model = swin_config_from_json(j.at("model"));
  if (j.contains("head")) {
    const auto& h = j.at("head");
    detail::reject_unknown_keys(h, "head",
                                {"kind", "num_classes", "decoder_dim"});
    if (h.contains("kind")) {
      rc.head.kind = head_kind(detail::cfg_string(h, "head", "kind", ""));
      rc.head_kind_set = true;
    }
    rc.head.num_classes =
        detail::cfg_u64(h, "head", "num_classes", rc.head.num_classes);
    rc.head.decoder_dim =
        detail::cfg_u64(h, "head", "decoder_dim", rc.head.decoder_dim);
  }
  if (j.contains("recipe")) rc.recipe = recipe_from_json(j.at("recipe"));
  if (j.contains("pipeline"))
    rc.pipeline = prepare_options_from_json(j.at("pipeline"));
  return rc;
}

/// Loads and validates a config file. Malformed JSON and schema violations
/// are both usage errors: the config is part of the command line.
inline RunConfig load_run_config(const std::string& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const data_error& e) {
    throw usage_error(std::string("config: ") + e.what());
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw usage_error("config " + path + ": " + e.what());
  }
  try {
    return run_config_from_json(j);
  } catch (const usage_error& e) {
    throw usage_error(std::string(e.what()) + " (in " + path + ")");
  }
}

}  // namespace swinct

#endif  // SWINCT_RUNCONFIG_HPP_
