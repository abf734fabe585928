#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "abdkit/tensor.hpp"

namespace abdkit::ad {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

struct TensorBlob {
    std::vector<NamedTensor> tensors;
    nlohmann::json meta = nlohmann::json::object();
};

/// Layout: "ABDT" magic, u32 LE manifest length, JSON manifest
/// {"tensors":[{"name","shape","dtype":"float32"}], "meta":{...}}, then the
/// tensors' little-endian float32 payloads in manifest order.
void save_blob(const std::filesystem::path& path, const TensorBlob& blob);
TensorBlob load_blob(const std::filesystem::path& path);

}  // namespace abdkit::ad
