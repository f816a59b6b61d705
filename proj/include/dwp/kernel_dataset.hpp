#pragma once

// Kernel dataset binary format: magic "DWPK", u32 version=1, u32 N, u16 H,
// u16 W, u16 pad=0, then N*H*W little-endian f32. Provenance travels in a
// JSON sidecar <path>.meta.json.

#include <cstdint>
#include <string>

#include "dwp/checkpoint.hpp"
#include "dwp/tensor.hpp"

namespace dwp {

struct KernelDatasetMeta {
  std::string source_model_id;
  std::int64_t layer_index = 0;
  std::string prune_rule;  // empty until pruned
  double prune_threshold = 0.0;
  std::uint64_t seed = 0;
};

struct KernelDataset {
  Tensor<float> kernels;  // (N, H, W)
  KernelDatasetMeta meta;

  std::int64_t size() const { return kernels.defined() ? kernels.dim(0) : 0; }
  std::int64_t height() const { return kernels.dim(1); }
  std::int64_t width() const { return kernels.dim(2); }
};

// Preamble size in bytes: magic(4) + version(4) + N(4) + H(2) + W(2) + pad(2).
inline constexpr std::int64_t kKernelFileHeaderBytes = 18;

void save_kernels(const KernelDataset& ds, const std::string& path);
KernelDataset load_kernels(const std::string& path);

// Drops kernels whose L2 norm falls below threshold_factor x median norm.
// Records the rule and the realized absolute threshold in meta. Throws if
// nothing survives.
KernelDataset prune_small_norm(const KernelDataset& ds, double threshold_factor = 0.1);

// Flattens the (filters x channels) kernels of one conv layer from each
// checkpointed model into an (N,H,W) dataset, in model order.
KernelDataset harvest_kernels(const std::vector<Checkpoint>& models, std::int64_t layer_index);

}  // namespace dwp
