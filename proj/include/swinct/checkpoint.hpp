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

#ifndef SWINCT_CHECKPOINT_HPP_
#define SWINCT_CHECKPOINT_HPP_

/// Checkpoints are a directory: manifest.json naming every parameter plus
/// one SWT1 tensor file per parameter. Loading matches by name and reports
/// the full diff (missing, unexpected, shape conflicts) on any mismatch.

#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "swinct/common.hpp"
#include "swinct/tensor.hpp"
#include "swinct/tensor_io.hpp"

namespace swinct {

inline constexpr const char* kCheckpointManifest = "manifest.json";

template <typename T>
void save_checkpoint(
    const std::string& dir,
    const std::vector<std::pair<std::string, Tensor<T>>>& params,
    const nlohmann::json& extra = nlohmann::json::object()) {
  std::filesystem::create_directories(dir);
  nlohmann::json man;
  man["format"] = "swinct-checkpoint";
  man["version"] = 1;
  man["extra"] = extra;
  nlohmann::json list = nlohmann::json::array();
  std::size_t idx = 0;
  for (const auto& [name, t] : params) {
    char file[32];
    std::snprintf(file, sizeof file, "p%05zu.swt", idx++);
    write_swt<T>(dir + "/" + file, t.shape(), t.values());
    nlohmann::json entry;
    entry["name"] = name;
    entry["file"] = file;
    entry["shape"] = t.shape();
    list.push_back(std::move(entry));
  }
  man["params"] = std::move(list);
  atomic_write_file(dir + "/" + kCheckpointManifest, man.dump(2) + "\n");
}

struct CheckpointInfo {
  nlohmann::json extra;
  std::vector<std::pair<std::string, std::string>> files;  // name -> file
  std::vector<Shape> shapes;
};

inline CheckpointInfo read_checkpoint_manifest(const std::string& dir) {
  nlohmann::json man;
  try {
    man = nlohmann::json::parse(
        read_file(dir + "/" + kCheckpointManifest));
  } catch (const nlohmann::json::exception& e) {
    throw data_error("checkpoint " + dir + ": " + e.what());
  }
  CheckpointInfo info;
  try {
    if (man.at("format").get<std::string>() != "swinct-checkpoint")
      throw data_error("checkpoint " + dir + ": not a checkpoint manifest");
    info.extra = man.value("extra", nlohmann::json::object());
    for (const auto& entry : man.at("params")) {
      info.files.emplace_back(entry.at("name").get<std::string>(),
                              entry.at("file").get<std::string>());
      info.shapes.push_back(entry.at("shape").get<Shape>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw data_error("checkpoint " + dir + ": " + e.what());
  }
  return info;
}

/// Loads a checkpoint into an existing parameter list. The checkpoint must
/// carry exactly the model's parameters with matching shapes; any deviation
/// raises a data error listing every missing, unexpected, and reshaped name.
template <typename T>
void load_checkpoint(const std::string& dir,
                     std::vector<std::pair<std::string, Tensor<T>>>& params) {
  CheckpointInfo info = read_checkpoint_manifest(dir);
  std::map<std::string, std::size_t> in_ckpt;
  for (std::size_t i = 0; i < info.files.size(); ++i)
    in_ckpt[info.files[i].first] = i;

  std::string missing, unexpected, reshaped;
  std::map<std::string, std::size_t> wanted;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& name = params[i].first;
    wanted[name] = i;
    auto it = in_ckpt.find(name);
    if (it == in_ckpt.end()) {
      missing += (missing.empty() ? "" : ", ") + name;
    } else if (info.shapes[it->second] != params[i].second.shape()) {
      reshaped += (reshaped.empty() ? "" : ", ") + name + " (checkpoint " +
                  shape_str(info.shapes[it->second]) + ", model " +
                  shape_str(params[i].second.shape()) + ")";
    }
  }
  for (const auto& [name, file] : info.files)
    if (!wanted.count(name))
      unexpected += (unexpected.empty() ? "" : ", ") + name;

  if (!missing.empty() || !unexpected.empty() || !reshaped.empty()) {
    std::string msg = "checkpoint " + dir + " does not match the model:";
    if (!missing.empty()) msg += " missing [" + missing + "];";
    if (!unexpected.empty()) msg += " unexpected [" + unexpected + "];";
    if (!reshaped.empty()) msg += " shape conflicts [" + reshaped + "];";
    throw data_error(msg);
  }

  for (auto& [name, tensor] : params) {
    const auto& file = info.files[in_ckpt[name]].second;
    SwtTensor raw = read_swt(dir + "/" + file);
    if (raw.shape != tensor.shape())
      throw data_error("checkpoint " + dir + ": " + file + " holds shape " +
                       shape_str(raw.shape) + " but the manifest promised " +
                       shape_str(tensor.shape()));
    tensor.values() = raw.as<T>();
  }
}

}  // namespace swinct

#endif  // SWINCT_CHECKPOINT_HPP_
