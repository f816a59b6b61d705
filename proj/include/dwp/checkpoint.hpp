#pragma once

// Checkpoint container: magic "DWPC", u32 version, u32 blob count, then per
// blob u16 name-length + name + u8 rank + rank x u32 dims + f32 data, then a
// u32-length-prefixed JSON metadata block. Little-endian throughout.
// load(save(x)) == x bit-exactly; writes are atomic (temp + rename).

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dwp/tensor.hpp"

namespace dwp {

struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  // Insertion-ordered parameter blobs.
  std::vector<std::string> order;
  std::map<std::string, Tensor<float>> blobs;
  std::string metadata_json = "{}";

  void put(const std::string& name, Tensor<float> t) {
    if (!blobs.count(name)) order.push_back(name);
    blobs[name] = std::move(t);
  }

  const Tensor<float>& get(const std::string& name) const {
    auto it = blobs.find(name);
    if (it == blobs.end()) throw FormatError("checkpoint: missing blob '" + name + "'");
    return it->second;
  }

  bool has(const std::string& name) const { return blobs.count(name) != 0; }
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace dwp
