#include "dwp/kernel_dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>

#include "json.hpp"

namespace dwp {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

nlohmann::json meta_to_json(const KernelDatasetMeta& m) {
  return {{"source_model_id", m.source_model_id},
          {"layer_index", m.layer_index},
          {"prune_rule", m.prune_rule},
          {"prune_threshold", m.prune_threshold},
          {"seed", m.seed}};
}

KernelDatasetMeta meta_from_json(const nlohmann::json& j) {
  KernelDatasetMeta m;
  m.source_model_id = j.value("source_model_id", "");
  m.layer_index = j.value("layer_index", std::int64_t(0));
  m.prune_rule = j.value("prune_rule", "");
  m.prune_threshold = j.value("prune_threshold", 0.0);
  m.seed = j.value("seed", std::uint64_t(0));
  return m;
}

}  // namespace

void save_kernels(const KernelDataset& ds, const std::string& path) {
  if (ds.kernels.rank() != 3) throw FormatError("save_kernels: kernels must be (N,H,W)");
  const std::string tmp = path + ".tmp";
  {
    FilePtr f(std::fopen(tmp.c_str(), "wb"));
    if (!f) throw FormatError("save_kernels: cannot open '" + tmp + "'");
    auto put = [&](const void* p, std::size_t n) {
      if (std::fwrite(p, 1, n, f.get()) != n) throw FormatError("save_kernels: short write");
    };
    const std::uint32_t version = 1;
    const std::uint32_t n = static_cast<std::uint32_t>(ds.kernels.dim(0));
    const std::uint16_t h = static_cast<std::uint16_t>(ds.kernels.dim(1));
    const std::uint16_t w = static_cast<std::uint16_t>(ds.kernels.dim(2));
    const std::uint16_t pad = 0;
    put("DWPK", 4);
    put(&version, 4);
    put(&n, 4);
    put(&h, 2);
    put(&w, 2);
    put(&pad, 2);
    put(ds.kernels.data(), sizeof(float) * static_cast<std::size_t>(ds.kernels.numel()));
  }
  std::filesystem::rename(tmp, path);
  std::ofstream meta(path + ".meta.json");
  meta << meta_to_json(ds.meta).dump(2) << "\n";
}

KernelDataset load_kernels(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw FormatError("load_kernels: cannot open '" + path + "'");
  auto get = [&](void* p, std::size_t n, const char* what) {
    if (std::fread(p, 1, n, f.get()) != n)
      throw FormatError(std::string("load_kernels: truncated file reading ") + what);
  };
  char magic[4];
  get(magic, 4, "magic");
  if (std::memcmp(magic, "DWPK", 4) != 0) throw FormatError("load_kernels: bad magic");
  std::uint32_t version, n;
  std::uint16_t h, w, pad;
  get(&version, 4, "version");
  if (version != 1) throw FormatError("load_kernels: unsupported version " + std::to_string(version));
  get(&n, 4, "N");
  get(&h, 2, "H");
  get(&w, 2, "W");
  get(&pad, 2, "pad");
  if (n == 0 || h == 0 || w == 0) throw FormatError("load_kernels: empty dataset");
  std::vector<float> data(static_cast<std::size_t>(n) * h * w);
  get(data.data(), sizeof(float) * data.size(), "kernel data");
  KernelDataset ds;
  ds.kernels = Tensor<float>::from({n, h, w}, std::move(data));
  const std::string meta_path = path + ".meta.json";
  if (std::filesystem::exists(meta_path)) {
    std::ifstream in(meta_path);
    nlohmann::json j;
    in >> j;
    ds.meta = meta_from_json(j);
  }
  return ds;
}

KernelDataset prune_small_norm(const KernelDataset& ds, double threshold_factor) {
  const std::int64_t n = ds.size();
  const std::int64_t d = ds.height() * ds.width();
  std::vector<double> norms(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double v = ds.kernels[i * d + j];
      s += v * v;
    }
    norms[static_cast<std::size_t>(i)] = std::sqrt(s);
  }
  std::vector<double> sorted = norms;
  std::sort(sorted.begin(), sorted.end());
  const double median = (n % 2 == 1)
                            ? sorted[static_cast<std::size_t>(n / 2)]
                            : 0.5 * (sorted[static_cast<std::size_t>(n / 2 - 1)] +
                                     sorted[static_cast<std::size_t>(n / 2)]);
  const double threshold = threshold_factor * median;
  std::vector<float> kept;
  std::int64_t kept_n = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    if (norms[static_cast<std::size_t>(i)] >= threshold) {
      kept.insert(kept.end(), ds.kernels.data() + i * d, ds.kernels.data() + (i + 1) * d);
      ++kept_n;
    }
  }
  if (kept_n == 0) throw std::runtime_error("prune_small_norm: all kernels pruned (degenerate dataset)");
  KernelDataset out;
  out.kernels = Tensor<float>::from({kept_n, ds.height(), ds.width()}, std::move(kept));
  out.meta = ds.meta;
  out.meta.prune_rule = "l2_norm < " + std::to_string(threshold_factor) + " * median";
  out.meta.prune_threshold = threshold;
  return out;
}

KernelDataset harvest_kernels(const std::vector<Checkpoint>& models, std::int64_t layer_index) {
  if (models.empty()) throw std::invalid_argument("harvest_kernels: no models");
  std::vector<float> data;
  std::int64_t h = -1, w = -1, total = 0;
  for (const auto& ckpt : models) {
    // The layer_index-th rank-4 ".weight"/".theta" blob, in checkpoint order.
    const Tensor<float>* kernel = nullptr;
    std::int64_t conv_seen = 0;
    for (const auto& name : ckpt.order) {
      const auto& t = ckpt.blobs.at(name);
      const bool is_kernel = t.rank() == 4 && (name.ends_with(".weight") || name.ends_with(".theta"));
      if (!is_kernel) continue;
      if (conv_seen == layer_index) {
        kernel = &t;
        break;
      }
      ++conv_seen;
    }
    if (!kernel)
      throw FormatError("harvest_kernels: checkpoint has no conv layer " +
                        std::to_string(layer_index));
    const std::int64_t kh = kernel->dim(2), kw = kernel->dim(3);
    if (h < 0) {
      h = kh;
      w = kw;
    } else if (h != kh || w != kw) {
      throw ShapeError("harvest_kernels: kernel shape mismatch across models");
    }
    data.insert(data.end(), kernel->data(), kernel->data() + kernel->numel());
    total += kernel->dim(0) * kernel->dim(1);
  }
  KernelDataset ds;
  ds.kernels = Tensor<float>::from({total, h, w}, std::move(data));
  ds.meta.layer_index = layer_index;
  return ds;
}

}  // namespace dwp
