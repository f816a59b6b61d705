#pragma once

// Experiment drivers: JSON-configured grids over (train size, prior, init
// mode, width scale, seed) producing deterministic CSV/JSON outputs, plus
// weight-initialization modes and export helpers for prior samples and
// latent embeddings.

#include <cstdint>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "dwp/kernel_dataset.hpp"
#include "dwp/pipeline.hpp"
#include "dwp/vae.hpp"
#include "dwp/vi.hpp"

namespace dwp {

// Invalid or inconsistent configuration; mapped to CLI exit code 2.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

enum class InitMode { xavier, filters, dwp };
InitMode init_mode_from_string(const std::string& s);
std::string to_string(InitMode m);

struct DataSpec {
  std::string kind = "synthetic";  // "synthetic" | "idx"
  // synthetic
  std::int64_t classes = 10;
  std::int64_t train_count = 1000;
  std::int64_t test_count = 500;
  std::string alphabet = "B";
  double noise = 0.08;
  // idx
  std::string train_images, train_labels, test_images, test_labels;
};

struct GapSpec {
  std::int64_t K = 25;
  std::int64_t draws = 200;
  std::int64_t batch = 64;
};

struct ExperimentConfig {
  std::string experiment;  // classification | features | convergence | gap
  DataSpec data;
  std::vector<std::int64_t> train_sizes = {100, 500, 1000, 5000};
  std::vector<std::string> priors = {"standard_normal", "log_uniform", "dwp"};
  std::vector<std::string> init_modes = {"xavier", "filters", "dwp"};
  std::vector<double> width_scales = {0.125, 0.25, 0.5, 1.0};
  double width_scale = 0.25;  // single scale (classification/convergence/gap)
  std::vector<std::uint64_t> seeds;
  std::int64_t epochs = 10;
  double lr = 1e-3;
  std::int64_t batch_size = 128;
  double l2 = 1e-3;  // train-source only
  double kl_weight = 1.0;
  std::string eval = "mean";  // mean | mc
  std::int64_t eval_samples = 16;
  std::map<std::int64_t, std::string> decoder_files;  // kernel size -> checkpoint
  std::map<std::int64_t, std::string> kernel_files;   // kernel size -> .dwpk
  GapSpec gap;
};

// Strict parse: unknown keys at any level are rejected.
ExperimentConfig parse_experiment_config(const std::string& json_text);

// Resolves a relative dataset path against $DWP_DATA_DIR when the file is
// not found as given.
std::string resolve_data_path(const std::string& path);

// Checks that every referenced file exists (after DWP_DATA_DIR resolution)
// and that the grid is runnable for the configured experiment.
void validate_experiment_config(const ExperimentConfig& cfg);

ExperimentConfig load_experiment_config(const std::string& path);

// In-memory resources the drivers need; loaded from the config's file
// references or assembled directly in tests.
struct ExperimentResources {
  std::map<std::int64_t, std::shared_ptr<KernelDecoder<float>>> decoders;
  // Matching trained encoders, used to warm-start VI reverse models.
  std::map<std::int64_t, std::shared_ptr<KernelEncoder<float>>> encoders;
  std::map<std::int64_t, KernelDataset> kernels;
};

ExperimentResources load_resources(const ExperimentConfig& cfg);

LabeledDataset load_train_data(const ExperimentConfig& cfg);
LabeledDataset load_test_data(const ExperimentConfig& cfg);

// Replaces conv kernels in-place. xavier redraws U(-a, a); filters draws
// from the matching-size kernel dataset without replacement (with
// replacement when the dataset is too small); dwp draws from the decoder.
void init_weights(Network<float>& net, InitMode mode,
                  const ExperimentResources& res, std::uint64_t seed);

// Human-readable description of the planned grid (used by --dry-run).
std::string plan_grid(const ExperimentConfig& cfg);

// Drivers return their full output (CSV with header, or JSON) as a string;
// callers decide where to write it. All are pure functions of
// (config, resources): reruns produce identical bytes.
std::string run_classification(const ExperimentConfig& cfg, const ExperimentResources& res);
std::string run_random_features(const ExperimentConfig& cfg, const ExperimentResources& res);
std::string run_convergence(const ExperimentConfig& cfg, const ExperimentResources& res);
std::string run_gap(const ExperimentConfig& cfg, const ExperimentResources& res);

// Draws n kernels from the prior and writes <path> (.dwpk binary) plus
// <path>.csv with header idx,w0,w1,...
void export_prior_samples(KernelDecoder<float>& decoder, std::int64_t n,
                          std::uint64_t seed, const std::string& path);

// Latent means of each kernel; writes CSV with header idx,z0,z1,...
void export_embeddings(KernelEncoder<float>& encoder, const KernelDataset& ds,
                       const std::string& path);

}  // namespace dwp
