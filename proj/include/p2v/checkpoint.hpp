#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "p2v/tensor.hpp"

namespace p2v {

// Bit-exact binary container of named tensors plus a JSON metadata block
// (config snapshot, step, epoch, RNG states, mode). Little-endian
// throughout; save -> load -> save is byte-identical.
struct Checkpoint {
  static constexpr uint32_t kFormatVersion = 1;

  uint32_t version = kFormatVersion;
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;

  void add(const std::string& name, const Tensor& tensor);
  const Tensor* find(const std::string& name) const;
};

void checkpoint_save(const Checkpoint& checkpoint, const std::string& path);
// Throws DataError on a bad magic, unsupported version, or truncation.
Checkpoint checkpoint_load(const std::string& path);

}  // namespace p2v
