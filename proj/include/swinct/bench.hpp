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

#ifndef SWINCT_BENCH_HPP_
#define SWINCT_BENCH_HPP_

/// Wall-clock comparison of windowed vs global attention. Only the
/// attention-matrix term is timed (scores, softmax, weighted values); the
/// qkv/proj projections are linear in tokens for both variants and would
/// dilute the scaling contrast this benchmark exists to show. Global
/// attention streams over query blocks so memory stays linear even where
/// time is quadratic.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "swinct/metrics.hpp"
#include "swinct/ops.hpp"
#include "swinct/rng.hpp"

namespace swinct {

struct BenchRow {
  std::size_t side = 0;    // feature map is side x side
  std::size_t tokens = 0;  // side^2
  double windowed_ms = 0;
  double global_ms = 0;
  std::uint64_t analytic_wmsa = 0;  // flops_wmsa at this size
  std::uint64_t analytic_msa = 0;   // flops_msa at this size
};

struct BenchResult {
  std::vector<BenchRow> rows;
  double windowed_slope = 0;  // log time vs log tokens
  double global_slope = 0;
  std::size_t dim = 0;
  std::size_t window = 0;
};

namespace detail {

inline void softmax_rows_inplace(float* s, std::size_t rows,
                                 std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    float* row = s + r * cols;
    float mx = row[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    float z = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      row[c] = std::exp(row[c] - mx);
      z += row[c];
    }
    float inv = 1.0f / z;
    for (std::size_t c = 0; c < cols; ++c) row[c] *= inv;
  }
}

/// One pass of the windowed attention-matrix term over all windows.
inline void windowed_attention_pass(const std::vector<float>& q,
                                    const std::vector<float>& k,
                                    const std::vector<float>& v,
                                    std::size_t side, std::size_t dim,
                                    std::size_t window, float scale,
                                    std::vector<float>& scores,
                                    std::vector<float>& win_q,
                                    std::vector<float>& win_k,
                                    std::vector<float>& win_v,
                                    std::vector<float>& out) {
  std::size_t m2 = window * window;
  std::size_t per_row = side * dim;
  for (std::size_t wr = 0; wr < side; wr += window)
    for (std::size_t wc = 0; wc < side; wc += window) {
      for (std::size_t r = 0; r < window; ++r) {
        const float* qs = q.data() + (wr + r) * per_row + wc * dim;
        const float* ks = k.data() + (wr + r) * per_row + wc * dim;
        const float* vs = v.data() + (wr + r) * per_row + wc * dim;
        std::copy(qs, qs + window * dim, win_q.data() + r * window * dim);
        std::copy(ks, ks + window * dim, win_k.data() + r * window * dim);
        std::copy(vs, vs + window * dim, win_v.data() + r * window * dim);
      }
      gemm<float>(false, true, m2, m2, dim, win_q.data(), win_k.data(),
                  scores.data(), false);
      for (auto& s : scores) s *= scale;
      softmax_rows_inplace(scores.data(), m2, m2);
      gemm<float>(false, false, m2, dim, m2, scores.data(), win_v.data(),
                  out.data(), false);
    }
}

/// One pass of the global attention-matrix term, streamed by query blocks.
inline void global_attention_pass(const std::vector<float>& q,
                                  const std::vector<float>& k,
                                  const std::vector<float>& v,
                                  std::size_t tokens, std::size_t dim,
                                  float scale, std::size_t block,
                                  std::vector<float>& scores,
                                  std::vector<float>& out) {
  for (std::size_t at = 0; at < tokens; at += block) {
    std::size_t rows = std::min(block, tokens - at);
    gemm<float>(false, true, rows, tokens, dim, q.data() + at * dim, k.data(),
                scores.data(), false);
    for (std::size_t i = 0; i < rows * tokens; ++i) scores[i] *= scale;
    softmax_rows_inplace(scores.data(), rows, tokens);
    gemm<float>(false, false, rows, dim, tokens, scores.data(), v.data(),
                out.data() + at * dim, false);
  }
}

/// Repeats fn until at least min_ms of wall time accumulates; returns the
/// per-call milliseconds.
template <typename Fn>
double time_per_call_ms(Fn&& fn, double min_ms) {
  using clock = std::chrono::steady_clock;
  fn();  // warm caches and the allocator before measuring
  std::size_t reps = 1;
  for (;;) {
    auto t0 = clock::now();
    for (std::size_t i = 0; i < reps; ++i) fn();
    double ms = std::chrono::duration<double, std::milli>(clock::now() - t0)
                    .count();
    if (ms >= min_ms || reps >= 1u << 20) return ms / static_cast<double>(reps);
    reps *= 2;
  }
}

inline double fit_loglog_slope(const std::vector<double>& xs,
                               const std::vector<double>& ys) {
  double mx = 0, my = 0;
  std::size_t n = xs.size();
  std::vector<double> lx(n), ly(n);
  for (std::size_t i = 0; i < n; ++i) {
    lx[i] = std::log(xs[i]);
    ly[i] = std::log(ys[i]);
    mx += lx[i];
    my += ly[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double cov = 0, var = 0;
  for (std::size_t i = 0; i < n; ++i) {
    cov += (lx[i] - mx) * (ly[i] - my);
    var += (lx[i] - mx) * (lx[i] - mx);
  }
  return cov / var;
}

}  // namespace detail

/// Sweeps square feature maps and times both attention variants at fixed
/// dim and window. Needs at least four sizes for a meaningful slope fit;
/// sides must be positive multiples of the window.
inline BenchResult bench_attention(const std::vector<std::size_t>& sides,
                                   std::size_t dim = 96,
                                   std::size_t window = 7,
                                   std::uint64_t seed = 0,
                                   double min_sample_ms = 25.0) {
  if (sides.size() < 4)
    throw usage_error("bench_attention: need at least 4 sweep points, got " +
                      std::to_string(sides.size()));
  if (dim == 0 || window == 0)
    throw usage_error("bench_attention: dim and window must be positive");
  for (std::size_t s : sides)
    if (s == 0 || s % window != 0)
      throw usage_error("bench_attention: side " + std::to_string(s) +
                        " is not a positive multiple of window " +
                        std::to_string(window));

  BenchResult result;
  result.dim = dim;
  result.window = window;
  float scale = 1.0f / std::sqrt(static_cast<float>(dim));
  std::size_t m2 = window * window;

  for (std::size_t side : sides) {
    std::size_t tokens = side * side;
    Rng rng(derive_seed(seed, "bench", side));
    std::vector<float> q(tokens * dim), k(tokens * dim), v(tokens * dim);
    for (auto* buf : {&q, &k, &v})
      for (auto& x : *buf) x = static_cast<float>(rng.normal());

    std::vector<float> win_scores(m2 * m2), win_q(m2 * dim), win_k(m2 * dim),
        win_v(m2 * dim), win_out(m2 * dim);
    std::size_t block = std::min<std::size_t>(256, tokens);
    std::vector<float> glob_scores(block * tokens), glob_out(tokens * dim);

    BenchRow row;
    row.side = side;
    row.tokens = tokens;
    row.windowed_ms = detail::time_per_call_ms(
        [&] {
          detail::windowed_attention_pass(q, k, v, side, dim, window, scale,
                                          win_scores, win_q, win_k, win_v,
                                          win_out);
        },
        min_sample_ms);
    row.global_ms = detail::time_per_call_ms(
        [&] {
          detail::global_attention_pass(q, k, v, tokens, dim, scale, block,
                                        glob_scores, glob_out);
        },
        min_sample_ms);
    row.analytic_wmsa = flops_wmsa(side, side, dim, window);
    row.analytic_msa = flops_msa(side, side, dim);
    result.rows.push_back(row);
  }

  std::vector<double> toks, wt, gt;
  for (const auto& row : result.rows) {
    toks.push_back(static_cast<double>(row.tokens));
    wt.push_back(row.windowed_ms);
    gt.push_back(row.global_ms);
  }
  result.windowed_slope = detail::fit_loglog_slope(toks, wt);
  result.global_slope = detail::fit_loglog_slope(toks, gt);
  return result;
}

/// CSV rendering used by the command-line tool and kept here so tests can
/// pin the schema.
inline std::string bench_csv(const BenchResult& r) {
  std::string out =
      "side,tokens,windowed_ms,global_ms,analytic_wmsa_flops,analytic_msa_"
      "flops\n";
  char line[160];
  for (const auto& row : r.rows) {
    std::snprintf(line, sizeof line, "%zu,%zu,%.6f,%.6f,%llu,%llu\n",
                  row.side, row.tokens, row.windowed_ms, row.global_ms,
                  static_cast<unsigned long long>(row.analytic_wmsa),
                  static_cast<unsigned long long>(row.analytic_msa));
    out += line;
  }
  return out;
}

}  // namespace swinct

#endif  // SWINCT_BENCH_HPP_
