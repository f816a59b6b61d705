#pragma once

// Source-model pipeline: train deterministic source networks with L2
// regularization, persist them, and harvest/prune their conv kernels into
// datasets for prior training.

#include <stdexcept>
#include <string>
#include <vector>

#include "dwp/checkpoint.hpp"
#include "dwp/kernel_dataset.hpp"
#include "dwp/vi.hpp"

namespace dwp {

template <class T>
void network_to_checkpoint(Network<T>& net, Checkpoint& ckpt) {
  for (auto& np : net.named_params()) ckpt.put(np.name, np.var.value().template cast<float>());
}

// Loads parameters by name into an already-built network of the same spec.
template <class T>
void network_from_checkpoint(Network<T>& net, const Checkpoint& ckpt) {
  for (auto& np : net.named_params()) {
    const auto& blob = ckpt.get(np.name);
    if (blob.shape() != np.var.value().shape())
      throw FormatError("network_from_checkpoint: shape mismatch for " + np.name);
    np.var.value() = blob.template cast<T>();
  }
}

struct SourceTrainConfig {
  double l2 = 1e-3;
  std::int64_t epochs = 100;
  std::int64_t batch_size = 128;
  double lr = 1e-3;
  double width_scale = 1.0;
  std::uint64_t seed = 0;
};

struct SourceTrainResult {
  Network<float> net;
  std::vector<MetricsRow> trace;
};

// Cross-entropy + l2*||W||^2 on the source architecture; epochs == 0 returns
// the seeded initialization untouched.
inline SourceTrainResult train_source_model(const LabeledDataset& data,
                                            const SourceTrainConfig& cfg) {
  if (cfg.l2 < 0.0) throw std::invalid_argument("train_source_model: l2 must be >= 0");
  SourceTrainResult res;
  RngStream rng(cfg.seed);
  res.net = build_network<float>(source_model_spec(cfg.width_scale),
                                 NetworkMode::deterministic, rng);
  if (cfg.epochs == 0) return res;
  DetTrainConfig t;
  t.epochs = cfg.epochs;
  t.batch_size = cfg.batch_size;
  t.lr = cfg.lr;
  t.l2 = cfg.l2;
  t.seed = cfg.seed;
  LabeledDataset none;
  res.trace = train_deterministic(data, none, res.net, t);
  return res;
}

}  // namespace dwp
