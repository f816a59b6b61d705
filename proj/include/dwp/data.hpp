#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dwp/rng.hpp"
#include "dwp/tensor.hpp"

namespace dwp {

struct LabeledDataset {
  Tensor<float> images;  // (N, C, H, W), pixels in [0, 1]
  std::vector<std::int64_t> labels;
  std::int64_t classes = 0;

  std::int64_t size() const { return images.defined() ? images.dim(0) : 0; }

  LabeledDataset subset(const std::vector<std::int64_t>& indices) const;
  // First n examples (after any external shuffling).
  LabeledDataset head(std::int64_t n) const;
};

// Parses the big-endian IDX pair (images magic 0x00000803, labels magic
// 0x00000801); pixels scaled by 1/255.
LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path);

// Synthetic class-conditional stroke glyphs, an offline stand-in for the
// MNIST/notMNIST pair. Two disjoint glyph alphabets (A and B) play the roles
// of source and target domain.
struct SynthSpec {
  std::int64_t classes = 10;
  std::int64_t count = 1000;
  char alphabet = 'A';  // 'A' or 'B'
  double noise = 0.08;
};

LabeledDataset synth_dataset(const SynthSpec& spec, std::uint64_t seed);

}  // namespace dwp
