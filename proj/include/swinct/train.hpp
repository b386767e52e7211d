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

#ifndef SWINCT_TRAIN_HPP_
#define SWINCT_TRAIN_HPP_

/// Training engine: AdamW with decoupled decay, warmup schedules, parameter
/// EMA, and a seeded training loop shared by the three recipes. The loop is
/// deliberately generic: it sees the dataset as an index range and drives
/// caller-supplied batch-loss and evaluation closures, so the same mechanics
/// train the real models and the toy oracles in the tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "swinct/common.hpp"
#include "swinct/rng.hpp"
#include "swinct/tensor.hpp"

namespace swinct {

// ---------------------------------------------------------------------------
// Learning-rate schedules
// ---------------------------------------------------------------------------

enum class ScheduleKind { cosine, linear, constant };

struct Schedule {
  ScheduleKind kind = ScheduleKind::cosine;
  double base_lr = 1e-3;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;
  double min_lr = 0.0;

  void validate() const {
    if (warmup_steps > total_steps)
      throw usage_error("Schedule: warmup_steps exceeds total_steps");
    if (base_lr < 0 || min_lr < 0)
      throw usage_error("Schedule: learning rates must be nonnegative");
  }
};

/// Warmup ramps linearly from 0 to base_lr; afterwards tau in [0,1] tracks
/// progress toward total_steps and decays per the schedule kind.
inline double lr_at(const Schedule& s, std::size_t step) {
  s.validate();
  if (step > s.total_steps)
    throw usage_error("lr_at: step " + std::to_string(step) +
                      " beyond total_steps " + std::to_string(s.total_steps));
  if (step < s.warmup_steps)
    return s.base_lr * static_cast<double>(step) /
           static_cast<double>(s.warmup_steps);
  if (s.total_steps == s.warmup_steps) return s.base_lr;
  double tau = static_cast<double>(step - s.warmup_steps) /
               static_cast<double>(s.total_steps - s.warmup_steps);
  switch (s.kind) {
    case ScheduleKind::cosine:
      return s.min_lr + (s.base_lr - s.min_lr) *
                            (1.0 + std::cos(3.14159265358979323846 * tau)) /
                            2.0;
    case ScheduleKind::linear:
      return s.base_lr + (s.min_lr - s.base_lr) * tau;
    case ScheduleKind::constant:
      return s.base_lr;
  }
  throw usage_error("lr_at: unknown schedule kind");
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

/// Bias-corrected Adam plus decoupled weight decay: the decay term
/// theta <- theta - lr*wd*theta never passes through the moments, so the
/// loss surface cannot influence it.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<std::pair<std::string, Tensor<T>>> params,
        double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8)
      : params_(std::move(params)),
        weight_decay_(weight_decay),
        beta1_(beta1),
        beta2_(beta2),
        eps_(eps) {
    if (weight_decay_ < 0) throw usage_error("AdamW: negative weight decay");
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i].second.numel(), 0.0);
      v_[i].assign(params_[i].second.numel(), 0.0);
    }
  }

  std::size_t step_count() const { return step_; }

  /// One update from the gradients currently stored on the parameters.
  void step(double lr) {
    ++step_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    for (std::size_t p = 0; p < params_.size(); ++p) {
      auto& [name, tensor] = params_[p];
      const std::vector<T>& g = tensor.grad();
      std::vector<T>& w = tensor.values();
      for (std::size_t i = 0; i < w.size(); ++i) {
        double gi = static_cast<double>(g[i]);
        if (!std::isfinite(gi))
          throw numeric_error("adamw: non-finite gradient in parameter '" +
                              name + "' at step " + std::to_string(step_));
        m_[p][i] = beta1_ * m_[p][i] + (1.0 - beta1_) * gi;
        v_[p][i] = beta2_ * v_[p][i] + (1.0 - beta2_) * gi * gi;
        double update = lr * (m_[p][i] / bc1) /
                        (std::sqrt(v_[p][i] / bc2) + eps_);
        double decay = lr * weight_decay_ * static_cast<double>(w[i]);
        w[i] = static_cast<T>(static_cast<double>(w[i]) - update - decay);
      }
    }
  }

  void zero_grad() {
    for (auto& [name, tensor] : params_) tensor.zero_grad();
  }

  /// Global L2 clipping; returns the pre-clip norm. A max_norm of 0 is off.
  double clip_grad_norm(double max_norm) {
    double sq = 0.0;
    for (auto& [name, tensor] : params_)
      for (T g : tensor.grad()) sq += static_cast<double>(g) * g;
    double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
      T scale = static_cast<T>(max_norm / norm);
      for (auto& [name, tensor] : params_) {
        T* g = tensor.grad_data();
        for (std::size_t i = 0; i < tensor.numel(); ++i) g[i] *= scale;
      }
    }
    return norm;
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& params() const {
    return params_;
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> params_;
  std::vector<std::vector<double>> m_, v_;
  double weight_decay_, beta1_, beta2_, eps_;
  std::size_t step_ = 0;
};

// ---------------------------------------------------------------------------
// EMA
// ---------------------------------------------------------------------------

template <typename T>
class Ema {
 public:
  Ema(std::vector<std::pair<std::string, Tensor<T>>> params, double decay)
      : params_(std::move(params)), decay_(decay) {
    if (decay_ < 0 || decay_ > 1)
      throw usage_error("Ema: decay must lie in [0, 1]");
    shadow_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto& v = params_[i].second.values();
      shadow_[i].assign(v.begin(), v.end());
    }
  }

  void update() {
    for (std::size_t p = 0; p < params_.size(); ++p) {
      const auto& v = params_[p].second.values();
      for (std::size_t i = 0; i < v.size(); ++i)
        shadow_[p][i] = decay_ * shadow_[p][i] +
                        (1.0 - decay_) * static_cast<double>(v[i]);
    }
  }

  const std::vector<double>& shadow(std::size_t param_index) const {
    return shadow_.at(param_index);
  }

  /// Overwrites the live parameters with the shadow copies.
  void apply_to_params() {
    for (std::size_t p = 0; p < params_.size(); ++p) {
      auto& v = params_[p].second.values();
      for (std::size_t i = 0; i < v.size(); ++i)
        v[i] = static_cast<T>(shadow_[p][i]);
    }
  }

  /// Exchanges shadow and live values; calling twice restores both. Used to
  /// evaluate with averaged weights without losing the training state.
  void swap_with_params() {
    for (std::size_t p = 0; p < params_.size(); ++p) {
      auto& v = params_[p].second.values();
      for (std::size_t i = 0; i < v.size(); ++i) {
        double s = shadow_[p][i];
        shadow_[p][i] = static_cast<double>(v[i]);
        v[i] = static_cast<T>(s);
      }
    }
  }

  double decay() const { return decay_; }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> params_;
  std::vector<std::vector<double>> shadow_;
  double decay_;
};

// ---------------------------------------------------------------------------
// Recipes
// ---------------------------------------------------------------------------

/// One named training configuration. Epoch-driven recipes leave iterations
/// at 0 and vice versa; schedules always operate on steps, with epochs
/// converted at ceil(N / batch) steps per epoch.
struct Recipe {
  std::string name;
  double lr = 1e-3;
  double weight_decay = 0.05;
  double min_lr = 0.0;
  ScheduleKind schedule = ScheduleKind::cosine;
  std::size_t epochs = 0;
  std::size_t warmup_epochs = 0;
  std::size_t iterations = 0;
  std::size_t warmup_iterations = 0;
  std::size_t batch_size = 1;
  double drop_path = 0.0;
  bool use_ema = false;
  double ema_decay = 0.9999;
  double clip_norm = 0.0;        // 0 = reproduce divergence rather than hide it
  std::size_t eval_every = 0;    // steps between evaluations; 0 = each epoch

  void validate() const {
    if (batch_size == 0) throw usage_error("Recipe: batch_size must be positive");
    if ((epochs == 0) == (iterations == 0))
      throw usage_error(
          "Recipe: exactly one of epochs or iterations must be positive");
    if (lr <= 0) throw usage_error("Recipe: lr must be positive");
    if (weight_decay < 0) throw usage_error("Recipe: negative weight decay");
    if (drop_path < 0 || drop_path >= 1)
      throw usage_error("Recipe: drop_path must lie in [0, 1)");
  }
};

/// 300-epoch classification run: 20-epoch linear warmup into cosine decay,
/// batch 28, lr 1e-3, weight decay 0.05.
inline Recipe regular_recipe() {
  Recipe r;
  r.name = "regular";
  r.lr = 1e-3;
  r.weight_decay = 0.05;
  r.schedule = ScheduleKind::cosine;
  r.epochs = 300;
  r.warmup_epochs = 20;
  r.batch_size = 28;
  r.drop_path = 0.1;
  return r;
}

/// 30-epoch fine-tune from a checkpoint: 5-epoch warmup into a constant
/// 1e-5 learning rate with a vanishing 1e-8 weight decay.
inline Recipe finetune_recipe() {
  Recipe r;
  r.name = "finetune";
  r.lr = 1e-5;
  r.weight_decay = 1e-8;
  r.schedule = ScheduleKind::constant;
  r.epochs = 30;
  r.warmup_epochs = 5;
  r.batch_size = 28;
  r.drop_path = 0.1;
  return r;
}

/// Iteration-driven segmentation run: 40k steps, 1500-step warmup, linear
/// decay from 1e-4, weight decay 0.01, stochastic depth 0.2.
inline Recipe segmentation_recipe() {
  Recipe r;
  r.name = "segmentation";
  r.lr = 1e-4;
  r.weight_decay = 0.01;
  r.schedule = ScheduleKind::linear;
  r.iterations = 40000;
  r.warmup_iterations = 1500;
  r.batch_size = 8;
  r.drop_path = 0.2;
  r.eval_every = 500;
  return r;
}

inline Recipe recipe_by_name(const std::string& name) {
  if (name == "regular") return regular_recipe();
  if (name == "finetune") return finetune_recipe();
  if (name == "segmentation") return segmentation_recipe();
  throw usage_error("unknown recipe '" + name +
                    "' (expected regular, finetune, or segmentation)");
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Caller-supplied hooks. batch_loss must run the model in training mode on
/// the given dataset indices and return a scalar loss tensor with the graph
/// attached; evaluate returns named validation metrics.
template <typename T>
struct TrainHooks {
  std::function<Tensor<T>(const std::vector<std::size_t>&, Rng*)> batch_loss;
  std::function<std::map<std::string, double>()> evaluate;
  std::function<void(const std::string&, std::size_t)> checkpoint;
  std::string select_metric;  // metric that defines "best"; default: first
};

struct CurvePoint {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0;
  double train_loss = 0;
  std::map<std::string, double> val;  // filled on evaluation steps
};

struct TrainResult {
  std::vector<CurvePoint> curve;
  double best_metric = 0;
  std::size_t best_step = 0;
  bool has_best = false;
  std::size_t steps_run = 0;
};

namespace detail {

inline std::string csv_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_csv_row(std::ostream* csv, const CurvePoint& pt,
                          const std::vector<std::string>& val_columns) {
  if (!csv) return;
  *csv << pt.step << ',' << pt.epoch << ',' << csv_double(pt.lr) << ','
       << csv_double(pt.train_loss);
  for (const auto& col : val_columns) {
    *csv << ',';
    auto it = pt.val.find(col);
    if (it != pt.val.end()) *csv << csv_double(it->second);
  }
  *csv << '\n';
}

}  // namespace detail

/// Runs a recipe over a dataset of `dataset_size` examples. Training
/// shuffles indices per epoch with a seed-derived stream and drops the final
/// incomplete batch; schedules are sized on ceil(N/batch) steps per epoch.
/// A non-finite loss halts immediately with the step and value named, since
/// that failure mode is diagnostic (exploding gradients), not recoverable.
template <typename T>
TrainResult run_recipe(AdamW<T>& opt, std::size_t dataset_size,
                       const Recipe& recipe, const TrainHooks<T>& hooks,
                       std::uint64_t seed, std::ostream* csv = nullptr,
                       const std::vector<std::string>& val_columns = {}) {
  recipe.validate();
  if (dataset_size == 0) throw usage_error("run_recipe: empty dataset");
  if (!hooks.batch_loss) throw usage_error("run_recipe: batch_loss not set");
  if (dataset_size < recipe.batch_size)
    throw usage_error("run_recipe: batch size " +
                      std::to_string(recipe.batch_size) +
                      " exceeds dataset size " + std::to_string(dataset_size));

  std::size_t steps_per_epoch =
      (dataset_size + recipe.batch_size - 1) / recipe.batch_size;
  std::size_t full_batches = dataset_size / recipe.batch_size;
  Schedule sched;
  sched.kind = recipe.schedule;
  sched.base_lr = recipe.lr;
  sched.min_lr = recipe.min_lr;
  if (recipe.epochs > 0) {
    sched.total_steps = recipe.epochs * steps_per_epoch;
    sched.warmup_steps = recipe.warmup_epochs * steps_per_epoch;
  } else {
    sched.total_steps = recipe.iterations;
    sched.warmup_steps = recipe.warmup_iterations;
  }
  sched.validate();

  for (const auto& [name, tensor] : opt.params()) {
    Tensor<T> handle = tensor;  // handles share the node
    handle.set_requires_grad(true);
  }

  Ema<T> ema(opt.params(), recipe.ema_decay);
  Rng drop_rng(derive_seed(seed, "droppath"));
  std::size_t total_steps =
      recipe.epochs > 0 ? recipe.epochs * full_batches : recipe.iterations;

  if (csv) {
    *csv << "step,epoch,lr,train_loss";
    for (const auto& col : val_columns) *csv << ',' << col;
    *csv << '\n';
  }

  TrainResult result;
  std::vector<std::size_t> order(dataset_size);
  for (std::size_t i = 0; i < dataset_size; ++i) order[i] = i;
  std::size_t cursor = dataset_size;  // forces a shuffle on first use
  std::size_t pass = 0;

  auto next_batch = [&]() {
    if (cursor + recipe.batch_size > dataset_size) {
      Rng shuffle_rng(derive_seed(seed, "shuffle", pass++));
      shuffle_rng.shuffle(order);
      cursor = 0;
    }
    std::vector<std::size_t> batch(order.begin() +
                                       static_cast<std::ptrdiff_t>(cursor),
                                   order.begin() + static_cast<std::ptrdiff_t>(
                                                       cursor +
                                                       recipe.batch_size));
    cursor += recipe.batch_size;
    return batch;
  };

  auto run_eval = [&](CurvePoint& pt, std::size_t step) {
    if (!hooks.evaluate) return;
    if (recipe.use_ema) ema.swap_with_params();
    pt.val = hooks.evaluate();
    if (recipe.use_ema) ema.swap_with_params();
    if (pt.val.empty()) return;
    const std::string& key = hooks.select_metric.empty()
                                 ? pt.val.begin()->first
                                 : hooks.select_metric;
    auto it = pt.val.find(key);
    if (it == pt.val.end())
      throw usage_error("run_recipe: evaluate() did not produce metric '" +
                        key + "'");
    if (!result.has_best || it->second > result.best_metric) {
      result.has_best = true;
      result.best_metric = it->second;
      result.best_step = step;
      if (hooks.checkpoint) hooks.checkpoint("best", step);
    }
  };

  for (std::size_t step = 0; step < total_steps; ++step) {
    // schedule position: iteration recipes use the raw step; epoch recipes
    // are scaled so dropped tail batches do not stall the decay
    std::size_t sched_step =
        recipe.epochs > 0
            ? (step / full_batches) * steps_per_epoch + (step % full_batches)
            : step;
    double lr = lr_at(sched, std::min(sched_step, sched.total_steps));

    auto batch = next_batch();
    opt.zero_grad();
    Tensor<T> loss = hooks.batch_loss(
        batch, recipe.drop_path > 0 ? &drop_rng : nullptr);
    if (loss.numel() != 1)
      throw usage_error("run_recipe: batch_loss must return a scalar");
    double loss_v = static_cast<double>(loss.values()[0]);
    if (!std::isfinite(loss_v))
      throw numeric_error(
          "run_recipe: loss became non-finite (" + detail::csv_double(loss_v) +
          ") at step " + std::to_string(step) +
          "; gradients have exploded. Lower the learning rate or enable "
          "clip_norm to continue past this point.");
    loss.backward();
    if (recipe.clip_norm > 0) opt.clip_grad_norm(recipe.clip_norm);
    opt.step(lr);
    if (recipe.use_ema) ema.update();

    CurvePoint pt;
    pt.step = step;
    pt.epoch = recipe.epochs > 0 ? step / full_batches : step / steps_per_epoch;
    pt.lr = lr;
    pt.train_loss = loss_v;

    bool eval_now;
    if (recipe.eval_every > 0)
      eval_now = (step + 1) % recipe.eval_every == 0 || step + 1 == total_steps;
    else
      eval_now = recipe.epochs > 0
                     ? (step + 1) % full_batches == 0
                     : step + 1 == total_steps;
    if (eval_now) run_eval(pt, step);

    detail::write_csv_row(csv, pt, val_columns);
    result.curve.push_back(std::move(pt));
    ++result.steps_run;
  }

  if (hooks.checkpoint) hooks.checkpoint("last", total_steps);
  if (recipe.use_ema) ema.apply_to_params();
  return result;
}

}  // namespace swinct

#endif  // SWINCT_TRAIN_HPP_
