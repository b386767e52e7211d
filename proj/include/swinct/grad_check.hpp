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

/// @file grad_check.hpp
/// @brief Central-difference verification of backward passes.

#pragma once

#include <cmath>
#include <functional>
#include <unordered_set>
#include <vector>

#include "swinct/rng.hpp"
#include "swinct/tensor.hpp"

namespace swinct {

/// Compares analytic gradients against central differences for every
/// element of every listed parameter. `make_loss` must rebuild the scalar
/// loss from the parameters' current values on each call and must be
/// deterministic. Returns the worst relative error
///   |analytic - numeric| / max(|analytic|, |numeric|, floor),
/// where the floor keeps near-zero gradients from blowing up the ratio.
template <typename T>
double max_rel_grad_error(const std::function<Tensor<T>()>& make_loss,
                          std::vector<Tensor<T>> params, T eps = T(1e-5),
                          double floor = 1e-3) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  Tensor<T> loss = make_loss();
  loss.backward();
  std::vector<std::vector<T>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p.grad());

  double worst = 0.0;
  NoGradGuard guard;  // numeric passes need values only
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    for (std::size_t i = 0; i < p.numel(); ++i) {
      T saved = p.data()[i];
      p.data()[i] = saved + eps;
      double fp = static_cast<double>(make_loss().item());
      p.data()[i] = saved - eps;
      double fm = static_cast<double>(make_loss().item());
      p.data()[i] = saved;
      double numeric = (fp - fm) / (2.0 * static_cast<double>(eps));
      double ana = static_cast<double>(analytic[pi][i]);
      double denom = std::max({std::abs(ana), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(ana - numeric) / denom);
    }
  }
  return worst;
}

/// Same check over a random subset of elements per parameter; exhaustive
/// differencing is infeasible for whole models.
template <typename T>
double max_rel_grad_error_sampled(const std::function<Tensor<T>()>& make_loss,
                                  std::vector<Tensor<T>> params,
                                  std::size_t samples_per_param, Rng& rng,
                                  T eps = T(1e-5), double floor = 1e-3) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  Tensor<T> loss = make_loss();
  loss.backward();
  std::vector<std::vector<T>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p.grad());

  double worst = 0.0;
  NoGradGuard guard;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    std::unordered_set<std::size_t> picked;
    std::size_t want = std::min<std::size_t>(samples_per_param, p.numel());
    while (picked.size() < want)
      picked.insert(static_cast<std::size_t>(rng.below(p.numel())));
    for (std::size_t i : picked) {
      T saved = p.data()[i];
      p.data()[i] = saved + eps;
      double fp = static_cast<double>(make_loss().item());
      p.data()[i] = saved - eps;
      double fm = static_cast<double>(make_loss().item());
      p.data()[i] = saved;
      double numeric = (fp - fm) / (2.0 * static_cast<double>(eps));
      double ana = static_cast<double>(analytic[pi][i]);
      double denom = std::max({std::abs(ana), std::abs(numeric), floor});
      worst = std::max(worst, std::abs(ana - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace swinct
