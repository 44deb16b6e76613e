#pragma once

#include <string>

#include "lwm/tensor.hpp"

#include "json.hpp"

namespace lwm {

// .ltck tensor archive: magic "LTCK", u32 version, u64 header length, header
// JSON {"meta":{...},"tensors":[{"name","shape","dtype":"f64"},...]}, then the
// raw little-endian f64 payloads in listed order. Writes are atomic
// (temp file + rename).
void save_checkpoint(const std::string& path, const ParamStore& store,
                     const nlohmann::json& meta = nlohmann::json::object());

// Loads into an existing store; every archive tensor must match a registered
// parameter's shape. Returns the meta object.
nlohmann::json load_checkpoint(const std::string& path, ParamStore& store);

// Raw variants for non-parameter tensors (grids, tokens).
void save_tensors(const std::string& path,
                  const std::vector<std::pair<std::string, Tensor>>& tensors,
                  const nlohmann::json& meta = nlohmann::json::object());
nlohmann::json load_tensors(const std::string& path,
                            std::vector<std::pair<std::string, Tensor>>& out);

} // namespace lwm
