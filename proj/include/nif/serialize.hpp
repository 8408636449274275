#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "nif/tensor.hpp"

namespace nif {

inline constexpr uint32_t kCheckpointFormatVersion = 1;

// A checkpoint is a JSON header plus named double tensors.
//
// File layout (little-endian):
//   8 bytes  magic "NIFDCKPT"
//   u32      format version
//   u64      header length in bytes
//   header   UTF-8 JSON: {"meta": {...}, "tensors": [{"name", "shape", "offset"}]}
//   payload  concatenated float64 tensor data; offsets are in elements
struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, Tensor> tensors;

  // Tensors whose names start with `prefix`, with the prefix removed.
  std::map<std::string, Tensor> with_prefix(const std::string& prefix) const;
  void put_all(const std::string& prefix, const std::map<std::string, Tensor>& values);
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace nif
