// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "sentinel/tensor.hpp"

namespace sentinel {

// Tensor container file: a UTF-8 JSON header, a single '\0' separator, then
// raw little-endian float32 blobs, row-major, in directory order. The header
// carries a magic string, free-form metadata, and the named-tensor directory
// with byte offsets into the blob section. Adapters, dataset caches, and
// detector models all use this one format.
inline constexpr const char* kContainerMagic = "adapter-sentinel-container-v1";

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Container {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const Tensor* find(const std::string& name) const {
    for (const auto& nt : tensors)
      if (nt.name == name) return &nt.tensor;
    return nullptr;
  }

  const Tensor& require(const std::string& name) const;
};

void save_container(const std::filesystem::path& path, const Container& c);
Container load_container(const std::filesystem::path& path);

}  // namespace sentinel
