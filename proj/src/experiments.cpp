#include "dwp/experiments.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace dwp {

namespace fs = std::filesystem;
using nlohmann::json;

InitMode init_mode_from_string(const std::string& s) {
  if (s == "xavier") return InitMode::xavier;
  if (s == "filters") return InitMode::filters;
  if (s == "dwp") return InitMode::dwp;
  throw ConfigError("unknown init mode: " + s);
}

std::string to_string(InitMode m) {
  switch (m) {
    case InitMode::xavier: return "xavier";
    case InitMode::filters: return "filters";
    case InitMode::dwp: return "dwp";
  }
  return "?";
}

namespace {

void require_keys(const json& j, const std::set<std::string>& allowed,
                  const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (auto& [key, value] : j.items())
    if (!allowed.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
}

std::map<std::int64_t, std::string> parse_path_map(const json& j, const std::string& where) {
  std::map<std::int64_t, std::string> out;
  if (!j.is_object()) throw ConfigError(where + ": expected an object of kernel-size -> path");
  for (auto& [key, value] : j.items()) {
    std::size_t pos = 0;
    std::int64_t k = 0;
    try {
      k = std::stoll(key, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != key.size() || k <= 0)
      throw ConfigError(where + ": key '" + key + "' is not a kernel size");
    if (!value.is_string()) throw ConfigError(where + "." + key + ": expected a path string");
    out[k] = value.get<std::string>();
  }
  return out;
}

std::string csv_double(double v) {
  std::ostringstream out;
  out.precision(10);
  out << v;
  return out.str();
}

// Classifier over the configured data shape at the given width scale.
NetworkSpec classifier_spec(const LabeledDataset& data, double width_scale) {
  NetworkSpec s = mnist_classifier_spec(width_scale);
  s.in_channels = data.images.dim(1);
  s.in_h = data.images.dim(2);
  s.in_w = data.images.dim(3);
  s.layers.back() = LayerSpec::linear_(data.classes);
  return s;
}

PredictMode eval_mode(const ExperimentConfig& cfg) {
  return cfg.eval == "mc" ? PredictMode::mc : PredictMode::mean;
}

// Per-cell RNG: an independent stream derived from the cell's seed and its
// grid position, so cell order never affects results.
RngStream cell_stream(std::uint64_t seed, std::int64_t cell_index) {
  return RngStream(seed).derive(static_cast<std::uint64_t>(cell_index) + 1);
}

std::vector<std::shared_ptr<KernelDecoder<float>>> decoder_list(
    const ExperimentResources& res) {
  std::vector<std::shared_ptr<KernelDecoder<float>>> out;
  for (auto& [k, d] : res.decoders) out.push_back(d);
  return out;
}

std::vector<std::shared_ptr<KernelEncoder<float>>> encoder_list(
    const ExperimentResources& res) {
  std::vector<std::shared_ptr<KernelEncoder<float>>> out;
  for (auto& [k, e] : res.encoders) out.push_back(e);
  return out;
}

// Kernel sizes appearing in a classifier at any width (fixed by the architecture).
std::vector<std::int64_t> classifier_kernel_sizes() { return {7, 5}; }

std::map<std::int64_t, std::shared_ptr<const GaussianMlPrior>> fit_priors(
    const ExperimentResources& res) {
  std::map<std::int64_t, std::shared_ptr<const GaussianMlPrior>> out;
  for (auto& [k, ds] : res.kernels)
    out[k] = std::make_shared<const GaussianMlPrior>(fit_gaussian_ml(ds.kernels));
  return out;
}

void attach_gaussian_priors(
    ViModel<float>& model,
    const std::map<std::int64_t, std::shared_ptr<const GaussianMlPrior>>& by_size) {
  auto layers = model.net.bayes_layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto it = by_size.find(layers[i]->kernel_size());
    if (it == by_size.end())
      throw ConfigError("no kernel dataset to fit a gaussian_ml prior for size " +
                        std::to_string(layers[i]->kernel_size()));
    model.priors[i].gaussian = it->second;
  }
}

Tensor<float> dataset_images(const LabeledDataset& d, std::int64_t count) {
  std::vector<std::int64_t> ident(static_cast<std::size_t>(d.size()));
  for (std::int64_t i = 0; i < d.size(); ++i) ident[static_cast<std::size_t>(i)] = i;
  return detail::gather_images<float>(d, ident, 0, count);
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << text;
}

std::string matrix_csv(const Tensor<float>& m, const std::string& col_prefix) {
  std::ostringstream out;
  out.precision(10);
  const std::int64_t n = m.dim(0);
  const std::int64_t d = m.numel() / std::max<std::int64_t>(n, 1);
  out << "idx";
  for (std::int64_t j = 0; j < d; ++j) out << "," << col_prefix << j;
  out << "\n";
  for (std::int64_t i = 0; i < n; ++i) {
    out << i;
    for (std::int64_t j = 0; j < d; ++j) out << "," << m[i * d + j];
    out << "\n";
  }
  return out.str();
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  require_keys(j, {"experiment", "data", "train_sizes", "priors", "init_modes",
                   "width_scales", "width_scale", "seeds", "epochs", "lr", "batch_size",
                   "l2", "kl_weight", "eval", "eval_samples", "decoders", "kernels", "gap"},
               "config");
  ExperimentConfig cfg;
  try {
    cfg.experiment = j.value("experiment", "");
    if (j.contains("data")) {
      const json& d = j["data"];
      require_keys(d, {"kind", "classes", "train_count", "test_count", "alphabet", "noise",
                       "train_images", "train_labels", "test_images", "test_labels"},
                   "config.data");
      cfg.data.kind = d.value("kind", cfg.data.kind);
      cfg.data.classes = d.value("classes", cfg.data.classes);
      cfg.data.train_count = d.value("train_count", cfg.data.train_count);
      cfg.data.test_count = d.value("test_count", cfg.data.test_count);
      cfg.data.alphabet = d.value("alphabet", cfg.data.alphabet);
      cfg.data.noise = d.value("noise", cfg.data.noise);
      cfg.data.train_images = d.value("train_images", "");
      cfg.data.train_labels = d.value("train_labels", "");
      cfg.data.test_images = d.value("test_images", "");
      cfg.data.test_labels = d.value("test_labels", "");
    }
    if (j.contains("train_sizes"))
      cfg.train_sizes = j["train_sizes"].get<std::vector<std::int64_t>>();
    if (j.contains("priors")) cfg.priors = j["priors"].get<std::vector<std::string>>();
    if (j.contains("init_modes"))
      cfg.init_modes = j["init_modes"].get<std::vector<std::string>>();
    if (j.contains("width_scales"))
      cfg.width_scales = j["width_scales"].get<std::vector<double>>();
    cfg.width_scale = j.value("width_scale", cfg.width_scale);
    if (j.contains("seeds")) cfg.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.lr = j.value("lr", cfg.lr);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.l2 = j.value("l2", cfg.l2);
    cfg.kl_weight = j.value("kl_weight", cfg.kl_weight);
    cfg.eval = j.value("eval", cfg.eval);
    cfg.eval_samples = j.value("eval_samples", cfg.eval_samples);
    if (j.contains("decoders")) cfg.decoder_files = parse_path_map(j["decoders"], "config.decoders");
    if (j.contains("kernels")) cfg.kernel_files = parse_path_map(j["kernels"], "config.kernels");
    if (j.contains("gap")) {
      const json& g = j["gap"];
      require_keys(g, {"K", "draws", "batch"}, "config.gap");
      cfg.gap.K = g.value("K", cfg.gap.K);
      cfg.gap.draws = g.value("draws", cfg.gap.draws);
      cfg.gap.batch = g.value("batch", cfg.gap.batch);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config field has the wrong type: ") + e.what());
  }
  return cfg;
}

std::string resolve_data_path(const std::string& path) {
  if (path.empty() || fs::exists(path)) return path;
  if (const char* root = std::getenv("DWP_DATA_DIR")) {
    const fs::path candidate = fs::path(root) / path;
    if (fs::exists(candidate)) return candidate.string();
  }
  return path;
}

namespace {

void require_file(const std::string& path, const std::string& what) {
  const std::string resolved = resolve_data_path(path);
  if (!fs::exists(resolved))
    throw ConfigError(what + ": file not found: '" + path + "'");
}

bool contains(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

}  // namespace

void validate_experiment_config(const ExperimentConfig& cfg) {
  static const std::set<std::string> kinds = {"classification", "features", "convergence",
                                              "gap"};
  if (!kinds.count(cfg.experiment))
    throw ConfigError("unknown experiment '" + cfg.experiment + "'");
  if (cfg.seeds.empty()) throw ConfigError("seeds must be non-empty");
  if (cfg.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(cfg.lr > 0)) throw ConfigError("lr must be > 0");
  if (cfg.kl_weight < 0) throw ConfigError("kl_weight must be >= 0");
  if (cfg.eval != "mean" && cfg.eval != "mc")
    throw ConfigError("eval must be 'mean' or 'mc'");
  if (cfg.eval_samples < 1) throw ConfigError("eval_samples must be >= 1");
  if (!(cfg.width_scale > 0)) throw ConfigError("width_scale must be > 0");
  for (double k : cfg.width_scales)
    if (!(k > 0)) throw ConfigError("width_scales entries must be > 0");
  for (const auto& p : cfg.priors) {
    try {
      (void)prior_kind_from_string(p);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  for (const auto& m : cfg.init_modes) (void)init_mode_from_string(m);

  if (cfg.data.kind == "synthetic") {
    if (cfg.data.classes < 2) throw ConfigError("data.classes must be >= 2");
    if (cfg.data.train_count < 1 || cfg.data.test_count < 1)
      throw ConfigError("data counts must be >= 1");
    if (cfg.data.alphabet != "A" && cfg.data.alphabet != "B")
      throw ConfigError("data.alphabet must be 'A' or 'B'");
  } else if (cfg.data.kind == "idx") {
    require_file(cfg.data.train_images, "data.train_images");
    require_file(cfg.data.train_labels, "data.train_labels");
    require_file(cfg.data.test_images, "data.test_images");
    require_file(cfg.data.test_labels, "data.test_labels");
  } else {
    throw ConfigError("data.kind must be 'synthetic' or 'idx'");
  }

  if (cfg.experiment == "classification") {
    if (cfg.train_sizes.empty()) throw ConfigError("train_sizes must be non-empty");
    for (auto ts : cfg.train_sizes)
      if (ts < 1) throw ConfigError("train_sizes entries must be >= 1");
    if (cfg.data.kind == "synthetic")
      for (auto ts : cfg.train_sizes)
        if (ts > cfg.data.train_count)
          throw ConfigError("train_sizes entry exceeds data.train_count");
    if (cfg.priors.empty()) throw ConfigError("priors must be non-empty");
  }
  if (cfg.experiment == "features" || cfg.experiment == "convergence") {
    if (cfg.init_modes.empty()) throw ConfigError("init_modes must be non-empty");
    if (cfg.experiment == "features" && cfg.width_scales.empty())
      throw ConfigError("width_scales must be non-empty");
  }
  if (cfg.experiment == "gap") {
    if (cfg.gap.K < 1 || cfg.gap.draws < 1 || cfg.gap.batch < 1)
      throw ConfigError("gap.K, gap.draws, gap.batch must be >= 1");
  }

  const bool needs_decoders =
      ((cfg.experiment == "classification" || cfg.experiment == "gap") &&
       (contains(cfg.priors, "dwp") || cfg.experiment == "gap")) ||
      ((cfg.experiment == "features" || cfg.experiment == "convergence") &&
       contains(cfg.init_modes, "dwp"));
  const bool needs_kernels =
      (cfg.experiment == "classification" && contains(cfg.priors, "gaussian_ml")) ||
      ((cfg.experiment == "features" || cfg.experiment == "convergence") &&
       contains(cfg.init_modes, "filters"));
  if (needs_decoders)
    for (std::int64_t k : classifier_kernel_sizes()) {
      auto it = cfg.decoder_files.find(k);
      if (it == cfg.decoder_files.end())
        throw ConfigError("decoders." + std::to_string(k) + " is required");
      require_file(it->second, "decoders." + std::to_string(k));
    }
  if (needs_kernels)
    for (std::int64_t k : classifier_kernel_sizes()) {
      auto it = cfg.kernel_files.find(k);
      if (it == cfg.kernel_files.end())
        throw ConfigError("kernels." + std::to_string(k) + " is required");
      require_file(it->second, "kernels." + std::to_string(k));
    }
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  ExperimentConfig cfg = parse_experiment_config(buf.str());
  validate_experiment_config(cfg);
  return cfg;
}

ExperimentResources load_resources(const ExperimentConfig& cfg) {
  ExperimentResources res;
  for (auto& [k, path] : cfg.decoder_files) {
    Checkpoint ckpt = load_checkpoint(resolve_data_path(path));
    std::int64_t z = default_z_dim(k);
    try {
      json meta = json::parse(ckpt.metadata_json);
      z = meta.value("z_dim", z);
    } catch (const json::parse_error&) {
      // metadata is advisory; fall back to the default latent size
    }
    VaeModel<float> vm = vae_from_checkpoint<float>(ckpt, k, z);
    res.decoders[k] = vm.decoder;
    res.encoders[k] = vm.encoder;
  }
  for (auto& [k, path] : cfg.kernel_files) {
    KernelDataset ds = load_kernels(resolve_data_path(path));
    if (ds.height() != k || ds.width() != k)
      throw ConfigError("kernels." + std::to_string(k) + ": file holds " +
                        std::to_string(ds.height()) + "x" + std::to_string(ds.width()) +
                        " kernels");
    res.kernels[k] = std::move(ds);
  }
  return res;
}

LabeledDataset load_train_data(const ExperimentConfig& cfg) {
  if (cfg.data.kind == "idx")
    return load_idx(resolve_data_path(cfg.data.train_images),
                    resolve_data_path(cfg.data.train_labels));
  SynthSpec s;
  s.classes = cfg.data.classes;
  s.count = cfg.data.train_count;
  s.alphabet = cfg.data.alphabet[0];
  s.noise = cfg.data.noise;
  return synth_dataset(s, 1);
}

LabeledDataset load_test_data(const ExperimentConfig& cfg) {
  if (cfg.data.kind == "idx")
    return load_idx(resolve_data_path(cfg.data.test_images),
                    resolve_data_path(cfg.data.test_labels));
  SynthSpec s;
  s.classes = cfg.data.classes;
  s.count = cfg.data.test_count;
  s.alphabet = cfg.data.alphabet[0];
  s.noise = cfg.data.noise;
  return synth_dataset(s, 2);
}

void init_weights(Network<float>& net, InitMode mode, const ExperimentResources& res,
                  std::uint64_t seed) {
  RngStream rng(seed);
  auto fill = [&](Var<float>& w) {
    const std::int64_t out_ch = w.value().dim(0), in_ch = w.value().dim(1);
    const std::int64_t k = w.value().dim(2);
    const std::int64_t need = out_ch * in_ch;
    const std::int64_t d = k * k;
    if (mode == InitMode::xavier) {
      w.value() = xavier_uniform<float>(w.value().shape(), in_ch * d, out_ch * d, rng);
      return;
    }
    if (mode == InitMode::filters) {
      auto it = res.kernels.find(k);
      if (it == res.kernels.end())
        throw ConfigError("filters init: no kernel dataset for size " + std::to_string(k));
      const KernelDataset& ds = it->second;
      const std::int64_t n = ds.size();
      std::vector<std::int64_t> pick(static_cast<std::size_t>(need));
      if (n >= need) {
        // Without replacement: partial Fisher-Yates over the dataset indices.
        std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
        for (std::int64_t i = 0; i < need; ++i) {
          const std::int64_t j =
              i + static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(n - i)));
          std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
          pick[static_cast<std::size_t>(i)] = idx[static_cast<std::size_t>(i)];
        }
      } else {
        for (std::int64_t i = 0; i < need; ++i)
          pick[static_cast<std::size_t>(i)] =
              static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(n)));
      }
      for (std::int64_t i = 0; i < need; ++i)
        for (std::int64_t j = 0; j < d; ++j)
          w.value()[i * d + j] = ds.kernels[pick[static_cast<std::size_t>(i)] * d + j];
      return;
    }
    auto it = res.decoders.find(k);
    if (it == res.decoders.end())
      throw ConfigError("dwp init: no prior decoder for size " + std::to_string(k));
    // Decoder means only: the logvar head extrapolates poorly far from the
    // training manifold, and observation noise at that scale swamps the
    // kernel structure the init is meant to transfer.
    Tensor<float> s = sample_kernels(*it->second, need, rng, /*means_only=*/true);
    for (std::int64_t i = 0; i < need * d; ++i) w.value()[i] = s[i];
  };
  for (auto* c : net.conv_layers()) fill(c->weight);
  for (auto* b : net.bayes_layers()) fill(b->theta);
}

std::string plan_grid(const ExperimentConfig& cfg) {
  std::ostringstream out;
  out << "experiment: " << cfg.experiment << "\n";
  out << "data: " << cfg.data.kind << "\n";
  std::int64_t cells = 0;
  auto list = [&](const char* name, auto const& v) {
    out << name << ":";
    for (auto& x : v) out << " " << x;
    out << "\n";
  };
  if (cfg.experiment == "classification") {
    list("train_sizes", cfg.train_sizes);
    list("priors", cfg.priors);
    list("seeds", cfg.seeds);
    cells = static_cast<std::int64_t>(cfg.train_sizes.size() * cfg.priors.size() *
                                      cfg.seeds.size());
  } else if (cfg.experiment == "features") {
    list("width_scales", cfg.width_scales);
    list("init_modes", cfg.init_modes);
    list("seeds", cfg.seeds);
    cells = static_cast<std::int64_t>(cfg.width_scales.size() * cfg.init_modes.size() *
                                      cfg.seeds.size());
  } else if (cfg.experiment == "convergence") {
    list("init_modes", cfg.init_modes);
    list("seeds", cfg.seeds);
    cells = static_cast<std::int64_t>(cfg.init_modes.size() * cfg.seeds.size());
  } else {
    list("seeds", cfg.seeds);
    cells = static_cast<std::int64_t>(cfg.seeds.size());
  }
  out << "epochs: " << cfg.epochs << "\n";
  out << "cells: " << cells << "\n";
  return out.str();
}

std::string run_classification(const ExperimentConfig& cfg, const ExperimentResources& res) {
  const LabeledDataset pool = load_train_data(cfg);
  const LabeledDataset test = load_test_data(cfg);
  const auto decs = decoder_list(res);
  const auto encs = encoder_list(res);
  std::map<std::int64_t, std::shared_ptr<const GaussianMlPrior>> gaussians;
  if (contains(cfg.priors, "gaussian_ml")) gaussians = fit_priors(res);

  std::ostringstream csv;
  csv << "train_size,prior,seed,test_acc\n";
  std::int64_t cell = 0;
  for (std::int64_t ts : cfg.train_sizes) {
    const LabeledDataset train = pool.head(std::min<std::int64_t>(ts, pool.size()));
    for (const auto& prior : cfg.priors) {
      const PriorKind kind = prior_kind_from_string(prior);
      for (std::uint64_t seed : cfg.seeds) {
        RngStream rng = cell_stream(seed, cell);
        ViModel<float> model =
            build_vi_model<float>(classifier_spec(pool, cfg.width_scale), kind, decs, rng,
                                  encs);
        if (kind == PriorKind::gaussian_ml) attach_gaussian_priors(model, gaussians);
        ViTrainConfig tc;
        tc.epochs = cfg.epochs;
        tc.batch_size = cfg.batch_size;
        tc.lr = cfg.lr;
        tc.kl_weight = cfg.kl_weight;
        tc.seed = rng.next_u64();
        tc.eval_every = 0;
        train_vi(train, LabeledDataset{}, model, tc);
        RngStream erng = rng.derive(999);
        const double acc =
            accuracy(model.net, test, eval_mode(cfg), cfg.eval_samples, erng);
        csv << ts << "," << prior << "," << seed << "," << csv_double(acc) << "\n";
        ++cell;
      }
    }
  }
  return csv.str();
}

std::string run_random_features(const ExperimentConfig& cfg, const ExperimentResources& res) {
  const LabeledDataset train = load_train_data(cfg);
  const LabeledDataset test = load_test_data(cfg);
  std::ostringstream csv;
  csv << "k,init,seed,test_acc\n";
  std::int64_t cell = 0;
  for (double k : cfg.width_scales) {
    for (const auto& init : cfg.init_modes) {
      const InitMode mode = init_mode_from_string(init);
      for (std::uint64_t seed : cfg.seeds) {
        RngStream rng = cell_stream(seed, cell);
        Network<float> net =
            build_network<float>(classifier_spec(train, k), NetworkMode::deterministic, rng);
        init_weights(net, mode, res, rng.next_u64());
        net.set_conv_trainable(false);
        DetTrainConfig dc;
        dc.epochs = cfg.epochs;
        dc.batch_size = cfg.batch_size;
        dc.lr = cfg.lr;
        dc.seed = rng.next_u64();
        dc.eval_every = 0;
        train_deterministic(train, LabeledDataset{}, net, dc);
        RngStream erng = rng.derive(999);
        const double acc = accuracy(net, test, PredictMode::mean, 1, erng);
        csv << csv_double(k) << "," << init << "," << seed << "," << csv_double(acc) << "\n";
        ++cell;
      }
    }
  }
  return csv.str();
}

std::string run_convergence(const ExperimentConfig& cfg, const ExperimentResources& res) {
  const LabeledDataset train = load_train_data(cfg);
  const LabeledDataset test = load_test_data(cfg);
  std::ostringstream csv;
  csv << "step,init,seed,metric\n";
  std::int64_t cell = 0;
  for (const auto& init : cfg.init_modes) {
    const InitMode mode = init_mode_from_string(init);
    for (std::uint64_t seed : cfg.seeds) {
      RngStream rng = cell_stream(seed, cell);
      Network<float> net = build_network<float>(classifier_spec(train, cfg.width_scale),
                                                NetworkMode::deterministic, rng);
      init_weights(net, mode, res, rng.next_u64());
      DetTrainConfig dc;
      dc.epochs = cfg.epochs;
      dc.batch_size = cfg.batch_size;
      dc.lr = cfg.lr;
      dc.seed = rng.next_u64();
      dc.eval_every = 1;
      auto trace = train_deterministic(train, test, net, dc);
      for (const auto& row : trace)
        csv << row.step << "," << init << "," << seed << "," << csv_double(row.test_acc)
            << "\n";
      ++cell;
    }
  }
  return csv.str();
}

std::string run_gap(const ExperimentConfig& cfg, const ExperimentResources& res) {
  const LabeledDataset train = load_train_data(cfg);
  const LabeledDataset test = load_test_data(cfg);
  const auto decs = decoder_list(res);
  const auto encs = encoder_list(res);
  json out = json::array();
  std::int64_t cell = 0;
  for (std::uint64_t seed : cfg.seeds) {
    RngStream rng = cell_stream(seed, cell);
    ViModel<float> model = build_vi_model<float>(classifier_spec(train, cfg.width_scale),
                                                 PriorKind::dwp, decs, rng, encs);
    ViTrainConfig tc;
    tc.epochs = cfg.epochs;
    tc.batch_size = cfg.batch_size;
    tc.lr = cfg.lr;
    tc.kl_weight = cfg.kl_weight;
    tc.seed = rng.next_u64();
    tc.eval_every = 0;
    train_vi(train, LabeledDataset{}, model, tc);

    const std::int64_t count = std::min<std::int64_t>(cfg.gap.batch, test.size());
    Tensor<float> x = dataset_images(test, count);
    std::vector<std::int64_t> y(test.labels.begin(),
                                test.labels.begin() + static_cast<std::size_t>(count));
    RngStream grng = rng.derive(999);
    GapReport g = gap_report(model, x, y, train.size(), cfg.gap.K, cfg.gap.draws, grng);
    json rec;
    rec["seed"] = seed;
    rec["K"] = g.K;
    rec["aux"] = {{"mean", g.aux.mean}, {"se", g.aux.se}, {"draws", g.aux.draws}};
    rec["aux_prior"] = {{"mean", g.aux_prior.mean}, {"se", g.aux_prior.se},
                        {"draws", g.aux_prior.draws}};
    rec["iwae"] = {{"mean", g.iwae.mean}, {"se", g.iwae.se}, {"draws", g.iwae.draws}};
    rec["gap_lower_bound"] = g.gap_lower_bound;
    rec["ordering_ok"] =
        (g.iwae.mean >= g.aux.mean - 3 * (g.iwae.se + g.aux.se)) &&
        (g.aux.mean >= g.aux_prior.mean - 3 * (g.aux.se + g.aux_prior.se));
    out.push_back(rec);
    ++cell;
  }
  return out.dump(2) + "\n";
}

void export_prior_samples(KernelDecoder<float>& decoder, std::int64_t n,
                          std::uint64_t seed, const std::string& path) {
  RngStream rng(seed);
  KernelDataset ds;
  ds.kernels = sample_kernels(decoder, n, rng);
  ds.meta.source_model_id = "prior-samples";
  ds.meta.seed = seed;
  save_kernels(ds, path);
  write_text_file(path + ".csv",
                  matrix_csv(ds.kernels.reshaped({n, decoder.ksize() * decoder.ksize()}), "w"));
}

void export_embeddings(KernelEncoder<float>& encoder, const KernelDataset& ds,
                       const std::string& path) {
  Tensor<float> emb = embed_kernels(encoder, ds.kernels);
  write_text_file(path, matrix_csv(emb, "z"));
}

}  // namespace dwp
