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

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace swinct {

// Error hierarchy. The CLI maps these onto exit codes:
//   usage_error -> 2, data_error/format_error -> 3, numeric_error -> 4,
//   anything else -> 5.
class error : public std::runtime_error {
 public:
  explicit error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Bad arguments, bad configuration, shape mismatches.
class usage_error : public error {
 public:
  explicit usage_error(const std::string& msg) : error(msg) {}
};

/// Invalid input data: labels out of range, infeasible split ratios, ...
class data_error : public error {
 public:
  explicit data_error(const std::string& msg) : error(msg) {}
};

/// Malformed files (bad magic, truncation). Carries a byte offset when known.
class format_error : public data_error {
 public:
  explicit format_error(const std::string& msg) : data_error(msg) {}
  format_error(const std::string& msg, std::uint64_t byte_offset)
      : data_error(msg + " (byte offset " + std::to_string(byte_offset) + ")"),
        offset_(byte_offset) {}
  std::uint64_t byte_offset() const { return offset_; }

 private:
  std::uint64_t offset_ = 0;
};

/// Non-finite values where finite ones are required (NaN-loss halt).
class numeric_error : public error {
 public:
  explicit numeric_error(const std::string& msg) : error(msg) {}
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  out += "]";
  return out;
}

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw usage_error(msg);
}

// Shortest round-trip-exact decimal text for floats; keeps CSV logs and JSON
// reports bit-reproducible across runs.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string format_float(float v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

/// Writes `bytes` to `path` atomically (temp file in the same directory, then
/// rename). A killed process never leaves a half-written file behind.
inline void atomic_write_file(const std::filesystem::path& path,
                              const std::string& bytes) {
  namespace fs = std::filesystem;
  fs::path dir = path.parent_path();
  if (!dir.empty()) fs::create_directories(dir);
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw data_error("cannot open for writing: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw data_error("short write: " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Worker-pool width: hardware concurrency capped by SWINCT_THREADS.
inline unsigned worker_threads() {
  unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("SWINCT_THREADS")) {
    char* end = nullptr;
    unsigned long cap = std::strtoul(env, &end, 10);
    if (end != env && cap >= 1) hw = std::min<unsigned long>(hw, cap);
  }
  return hw;
}

// FNV-1a, used for content-addressed slice filenames and seed derivation.
inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t h = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s) {
  return fnv1a(s.data(), s.size());
}

}  // namespace swinct
