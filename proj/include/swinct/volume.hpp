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

#ifndef SWINCT_VOLUME_HPP_
#define SWINCT_VOLUME_HPP_

/// CT volumes in Hounsfield-like int16 units and their nodule annotations.
///
/// Volume file "SWV1": magic 53 57 56 31, u8 dtype (1 = int16), u8 rank = 3,
/// three u32 LE dims (depth, height, width), three f32 LE spacings (z, y, x),
/// then row-major int16 LE voxels.
///
/// Annotations travel as JSON lines, one nodule per line:
///   {"volume_id": "...", "center_zyx": [z, y, x], "diameter_mm": 6.5|null}

#include <array>
#include <cstdint>
#include <cstring>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "swinct/common.hpp"
#include "swinct/tensor_io.hpp"

namespace swinct {

struct Volume {
  std::string id;
  std::size_t depth = 0, height = 0, width = 0;
  std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};  // (z, y, x) mm per voxel
  std::vector<std::int16_t> voxels;                // row-major [z][y][x]

  std::size_t numel() const { return depth * height * width; }
  std::int16_t at(std::size_t z, std::size_t y, std::size_t x) const {
    return voxels[(z * height + y) * width + x];
  }
  std::int16_t& at(std::size_t z, std::size_t y, std::size_t x) {
    return voxels[(z * height + y) * width + x];
  }

  void validate() const {
    if (depth == 0 || height == 0 || width == 0)
      throw data_error("volume " + id + ": dimensions must all be positive");
    for (float s : spacing)
      if (!(s > 0.0f))
        throw data_error("volume " + id + ": spacing must be positive");
    if (voxels.size() != numel())
      throw data_error("volume " + id + ": voxel count " +
                       std::to_string(voxels.size()) + " does not match " +
                       std::to_string(numel()));
  }
};

struct NoduleAnnotation {
  std::string volume_id;
  std::array<std::int64_t, 3> center_zyx{0, 0, 0};
  std::optional<double> diameter_mm;
};

/// Center must index an existing voxel of its volume.
inline void validate_annotation(const Volume& vol,
                                const NoduleAnnotation& ann) {
  const auto& c = ann.center_zyx;
  if (c[0] < 0 || c[1] < 0 || c[2] < 0 ||
      static_cast<std::size_t>(c[0]) >= vol.depth ||
      static_cast<std::size_t>(c[1]) >= vol.height ||
      static_cast<std::size_t>(c[2]) >= vol.width)
    throw data_error("annotation for " + ann.volume_id + ": center (" +
                     std::to_string(c[0]) + "," + std::to_string(c[1]) + "," +
                     std::to_string(c[2]) + ") outside volume " +
                     std::to_string(vol.depth) + "x" +
                     std::to_string(vol.height) + "x" +
                     std::to_string(vol.width));
}

// ---------------------------------------------------------------------------
// SWV1 encoding
// ---------------------------------------------------------------------------

namespace detail {
inline constexpr std::size_t kSwvHeaderSize = 4 + 1 + 1 + 12 + 12;
}

inline std::string encode_swv(const Volume& vol) {
  vol.validate();
  std::string out;
  out.reserve(detail::kSwvHeaderSize + vol.voxels.size() * 2);
  out += "SWV1";
  out.push_back(static_cast<char>(1));  // dtype int16
  out.push_back(static_cast<char>(3));  // rank
  auto put_u32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i)
      out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  for (std::size_t d : {vol.depth, vol.height, vol.width}) {
    if (d > std::numeric_limits<std::uint32_t>::max())
      throw data_error("volume " + vol.id + ": dimension " +
                       std::to_string(d) + " exceeds the format limit");
    put_u32(static_cast<std::uint32_t>(d));
  }
  for (float s : vol.spacing) {
    std::uint32_t bits;
    std::memcpy(&bits, &s, 4);
    put_u32(bits);
  }
  std::size_t base = out.size();
  out.resize(base + vol.voxels.size() * 2);
  std::memcpy(out.data() + base, vol.voxels.data(), vol.voxels.size() * 2);
  return out;
}

inline Volume decode_swv(const std::string& bytes, const std::string& id) {
  using detail::kSwvHeaderSize;
  if (bytes.size() < kSwvHeaderSize)
    throw format_error("SWV1: truncated header, " +
                           std::to_string(bytes.size()) + " of " +
                           std::to_string(kSwvHeaderSize) + " bytes",
                       bytes.size());
  if (bytes.compare(0, 4, "SWV1") != 0)
    throw format_error("SWV1: bad magic", 0);
  if (static_cast<unsigned char>(bytes[4]) != 1)
    throw format_error("SWV1: unsupported dtype " +
                           std::to_string(static_cast<unsigned>(
                               static_cast<unsigned char>(bytes[4]))),
                       4);
  if (static_cast<unsigned char>(bytes[5]) != 3)
    throw format_error("SWV1: rank must be 3, got " +
                           std::to_string(static_cast<unsigned>(
                               static_cast<unsigned char>(bytes[5]))),
                       5);
  auto get_u32 = [&](std::size_t off) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(
               static_cast<unsigned char>(bytes[off + i]))
           << (8 * i);
    return v;
  };
  Volume vol;
  vol.id = id;
  vol.depth = get_u32(6);
  vol.height = get_u32(10);
  vol.width = get_u32(14);
  unsigned __int128 n = static_cast<unsigned __int128>(vol.depth) *
                        vol.height * vol.width;
  if (vol.depth == 0 || vol.height == 0 || vol.width == 0)
    throw format_error("SWV1: zero dimension", 6);
  if (n > (std::numeric_limits<std::size_t>::max() -
           kSwvHeaderSize) / 2)
    throw format_error("SWV1: dimension product overflows", 6);
  for (int i = 0; i < 3; ++i) {
    std::uint32_t bits = get_u32(18 + 4 * static_cast<std::size_t>(i));
    float s;
    std::memcpy(&s, &bits, 4);
    vol.spacing[static_cast<std::size_t>(i)] = s;
    if (!(s > 0.0f) || !std::isfinite(s))
      throw format_error("SWV1: spacing must be positive and finite",
                         18 + 4 * static_cast<std::size_t>(i));
  }
  std::size_t payload = static_cast<std::size_t>(n) * 2;
  if (bytes.size() != kSwvHeaderSize + payload)
    throw format_error("SWV1: payload is " +
                           std::to_string(bytes.size() - kSwvHeaderSize) +
                           " bytes, header promises " +
                           std::to_string(payload),
                       kSwvHeaderSize);
  vol.voxels.resize(static_cast<std::size_t>(n));
  std::memcpy(vol.voxels.data(), bytes.data() + kSwvHeaderSize, payload);
  return vol;
}

inline std::string path_stem(const std::string& path) {
  std::size_t slash = path.find_last_of("/\\");
  std::string name = slash == std::string::npos ? path : path.substr(slash + 1);
  std::size_t dot = name.find_last_of('.');
  return dot == std::string::npos ? name : name.substr(0, dot);
}

inline Volume load_volume(const std::string& path) {
  return decode_swv(read_file(path), path_stem(path));
}

inline void write_volume(const std::string& path, const Volume& vol) {
  atomic_write_file(path, encode_swv(vol));
}

// ---------------------------------------------------------------------------
// Annotations (JSON lines)
// ---------------------------------------------------------------------------

inline std::vector<NoduleAnnotation> parse_annotations(
    const std::string& text) {
  std::vector<NoduleAnnotation> out;
  std::size_t line_no = 0, pos = 0;
  while (pos <= text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    std::string line = text.substr(pos, eol - pos);
    pos = eol + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw data_error("annotations line " + std::to_string(line_no) + ": " +
                       e.what());
    }
    NoduleAnnotation ann;
    if (!j.contains("volume_id") || !j["volume_id"].is_string() ||
        !j.contains("center_zyx") || !j["center_zyx"].is_array() ||
        j["center_zyx"].size() != 3)
      throw data_error("annotations line " + std::to_string(line_no) +
                       ": need volume_id and center_zyx[3]");
    ann.volume_id = j["volume_id"].get<std::string>();
    for (std::size_t i = 0; i < 3; ++i) {
      if (!j["center_zyx"][i].is_number_integer())
        throw data_error("annotations line " + std::to_string(line_no) +
                         ": center_zyx must hold integers");
      ann.center_zyx[i] = j["center_zyx"][i].get<std::int64_t>();
    }
    if (j.contains("diameter_mm") && !j["diameter_mm"].is_null())
      ann.diameter_mm = j["diameter_mm"].get<double>();
    out.push_back(std::move(ann));
  }
  return out;
}

inline std::vector<NoduleAnnotation> load_annotations(
    const std::string& path) {
  return parse_annotations(read_file(path));
}

inline std::string encode_annotations(
    const std::vector<NoduleAnnotation>& anns) {
  std::string out;
  for (const auto& ann : anns) {
    nlohmann::json j;
    j["volume_id"] = ann.volume_id;
    j["center_zyx"] = {ann.center_zyx[0], ann.center_zyx[1],
                       ann.center_zyx[2]};
    j["diameter_mm"] =
        ann.diameter_mm ? nlohmann::json(*ann.diameter_mm)
                        : nlohmann::json(nullptr);
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline void write_annotations(const std::string& path,
                              const std::vector<NoduleAnnotation>& anns) {
  atomic_write_file(path, encode_annotations(anns));
}

}  // namespace swinct

#endif  // SWINCT_VOLUME_HPP_
