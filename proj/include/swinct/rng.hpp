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

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "swinct/common.hpp"

namespace swinct {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

/// Deterministic RNG. mt19937_64 supplies the bit stream (its output is
/// pinned by the standard); all real-valued transforms are hand-rolled here
/// because std::*_distribution is implementation-defined and would break
/// bit-reproducibility across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed), seed_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform01() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Unbiased integer in [0, n) via rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw usage_error("Rng::below: n must be positive");
    std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                          std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal, Box-Muller. One spare value is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform01();
    double u2 = uniform01();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Normal(0, sigma) truncated to [-2 sigma, 2 sigma] by rejection.
  double truncated_normal(double sigma) {
    double x;
    do {
      x = normal();
    } while (x < -2.0 || x > 2.0);
    return x * sigma;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// Independent child stream. Derivation uses only the construction seed,
  /// so the order in which children are taken does not matter.
  Rng child(const std::string& tag, std::uint64_t index = 0) const {
    std::uint64_t s = seed_ ^ fnv1a(tag) ^
                      (index * 0xff51afd7ed558ccdull + 0x2545f4914f6cdd1dull);
    return Rng(splitmix64(s));
  }

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Stable 64-bit seed for a (seed, tag, index) triple.
inline std::uint64_t derive_seed(std::uint64_t seed, const std::string& tag,
                                 std::uint64_t index = 0) {
  std::uint64_t s = seed ^ fnv1a(tag) ^ (index * 0xff51afd7ed558ccdull + 0x2545f4914f6cdd1dull);
  return splitmix64(s);
}

}  // namespace swinct
