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

/// @file tensor_io.hpp
/// @brief SWT1 tensor container.
///
/// Layout, all little-endian:
///   bytes 0..3   magic "SWT1" (53 57 54 31)
///   byte  4      dtype: 0 = float32, 1 = float64, 2 = int16, 3 = uint8
///   byte  5      rank
///   then rank x u32 dims, then the row-major payload.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <variant>
#include <vector>

#include "swinct/common.hpp"

namespace swinct {

static_assert(std::endian::native == std::endian::little,
              "SWT1/SWV1 serialization assumes a little-endian host");

enum class Dtype : std::uint8_t { f32 = 0, f64 = 1, i16 = 2, u8 = 3 };

inline const char* dtype_name(Dtype d) {
  switch (d) {
    case Dtype::f32: return "float32";
    case Dtype::f64: return "float64";
    case Dtype::i16: return "int16";
    case Dtype::u8: return "uint8";
  }
  return "unknown";
}

namespace detail {
template <typename T>
struct dtype_of;
template <>
struct dtype_of<float> {
  static constexpr Dtype value = Dtype::f32;
};
template <>
struct dtype_of<double> {
  static constexpr Dtype value = Dtype::f64;
};
template <>
struct dtype_of<std::int16_t> {
  static constexpr Dtype value = Dtype::i16;
};
template <>
struct dtype_of<std::uint8_t> {
  static constexpr Dtype value = Dtype::u8;
};
}  // namespace detail

/// A deserialized SWT1 tensor of any supported element type.
struct SwtTensor {
  Dtype dtype = Dtype::f32;
  Shape shape;
  std::variant<std::vector<float>, std::vector<double>,
               std::vector<std::int16_t>, std::vector<std::uint8_t>>
      data;

  std::size_t numel() const { return shape_numel(shape); }

  template <typename T>
  const std::vector<T>& as() const {
    if (detail::dtype_of<T>::value != dtype)
      throw data_error(std::string("SWT1 tensor holds ") + dtype_name(dtype) +
                       ", requested " +
                       dtype_name(detail::dtype_of<T>::value));
    return std::get<std::vector<T>>(data);
  }
};

template <typename T>
std::string encode_swt(const Shape& shape, const std::vector<T>& values) {
  if (shape_numel(shape) != values.size())
    throw usage_error("encode_swt: shape " + shape_str(shape) +
                      " does not match " + std::to_string(values.size()) +
                      " values");
  if (shape.size() > 255) throw usage_error("encode_swt: rank exceeds 255");
  for (std::size_t d : shape)
    if (d > 0xffffffffull)
      throw usage_error("encode_swt: dimension exceeds uint32 range");
  std::string out;
  out.reserve(6 + 4 * shape.size() + sizeof(T) * values.size());
  out.append("SWT1", 4);
  out.push_back(static_cast<char>(detail::dtype_of<T>::value));
  out.push_back(static_cast<char>(shape.size()));
  for (std::size_t d : shape) {
    std::uint32_t v = static_cast<std::uint32_t>(d);
    out.append(reinterpret_cast<const char*>(&v), 4);
  }
  out.append(reinterpret_cast<const char*>(values.data()),
             sizeof(T) * values.size());
  return out;
}

template <typename T>
void write_swt(const std::string& path, const Shape& shape,
               const std::vector<T>& values) {
  atomic_write_file(path, encode_swt(shape, values));
}

inline SwtTensor decode_swt(const std::string& bytes,
                            const std::string& origin = "<memory>") {
  auto fail = [&](std::size_t offset, const std::string& msg) -> void {
    throw format_error(origin + ": " + msg, offset);
  };
  if (bytes.size() < 6) fail(bytes.size(), "truncated SWT1 header");
  if (bytes.compare(0, 4, "SWT1") != 0) fail(0, "bad magic, expected SWT1");
  std::uint8_t dt = static_cast<std::uint8_t>(bytes[4]);
  if (dt > 3)
    fail(4, "unknown dtype code " + std::to_string(dt));
  std::uint8_t rank = static_cast<std::uint8_t>(bytes[5]);
  std::size_t off = 6;
  if (bytes.size() < off + 4ull * rank)
    fail(bytes.size(), "truncated dimension list");
  Shape shape(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    std::uint32_t v;
    std::memcpy(&v, bytes.data() + off, 4);
    shape[d] = v;
    off += 4;
  }
  std::size_t count = shape_numel(shape);
  SwtTensor t;
  t.dtype = static_cast<Dtype>(dt);
  t.shape = std::move(shape);
  auto read_payload = [&](auto tag) {
    using T = decltype(tag);
    std::size_t want = count * sizeof(T);
    if (bytes.size() != off + want)
      fail(bytes.size(), "payload size " + std::to_string(bytes.size() - off) +
                             " bytes, expected " + std::to_string(want));
    std::vector<T> v(count);
    std::memcpy(v.data(), bytes.data() + off, want);
    t.data = std::move(v);
  };
  switch (t.dtype) {
    case Dtype::f32: read_payload(float{}); break;
    case Dtype::f64: read_payload(double{}); break;
    case Dtype::i16: read_payload(std::int16_t{}); break;
    case Dtype::u8: read_payload(std::uint8_t{}); break;
  }
  return t;
}

inline SwtTensor read_swt(const std::string& path) {
  return decode_swt(read_file(path), path);
}

}  // namespace swinct
