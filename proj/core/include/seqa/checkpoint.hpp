#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "seqa/error.hpp"
#include "seqa/tensor.hpp"

namespace seqa::ckpt {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Single-file model container: a 4-byte little-endian header length, a JSON
/// header (kind, model config, registry hash, tensor names/shapes), then all
/// tensor data concatenated as little-endian doubles in header order.
struct Checkpoint {
  std::string kind;         // "sqa" or "se"
  std::string config_json;  // model config as a JSON object
  std::uint64_t registry_hash = 0;
  std::vector<NamedTensor> tensors;

  bool has(const std::string& name) const;
  const Tensor& at(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace seqa::ckpt
