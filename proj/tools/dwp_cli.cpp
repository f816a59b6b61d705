// Command-line front end for the full pipeline: train source models, harvest
// and prune their kernels, train kernel-space priors, run variational
// inference, and drive the experiment grids.
//
// Exit codes: 0 success, 2 configuration error, 3 numerical divergence.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dwp/experiments.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dwp;

namespace {

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  std::string out = ".";
  bool dry_run = false;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "Path to a JSON config file")->required();
  sub->add_option("--seed", c.seed, "Master seed (u64)");
  sub->add_option("--out", c.out, "Output directory");
  sub->add_flag("--dry-run", c.dry_run, "Validate the config and print the plan");
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
}

void require_keys(const json& j, const std::set<std::string>& allowed,
                  const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (auto& [key, value] : j.items())
    if (!allowed.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
}

void ensure_out_dir(const Common& c) {
  if (!c.out.empty()) fs::create_directories(c.out);
}

std::string out_path(const Common& c, const std::string& name) {
  return (fs::path(c.out) / name).string();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << text;
}

std::string require_existing(const std::string& path, const std::string& what) {
  const std::string resolved = resolve_data_path(path);
  if (!fs::exists(resolved)) throw ConfigError(what + ": file not found: '" + path + "'");
  return resolved;
}

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::ostringstream out;
  out.precision(10);
  out << "step,epoch,elbo,data_term,kl_bound,train_acc,test_acc,lr\n";
  for (const auto& r : rows)
    out << r.step << "," << r.epoch << "," << r.aux_elbo << "," << r.data_term << ","
        << r.kl_bound_term << "," << r.train_acc << "," << r.test_acc << "," << r.lr << "\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// Subcommand bodies
// ---------------------------------------------------------------------------

int cmd_train_source(const Common& c) {
  ExperimentConfig cfg = parse_experiment_config([&] {
    std::ifstream in(c.config);
    if (!in) throw ConfigError("cannot open config file '" + c.config + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
  }());
  if (c.dry_run) {
    std::cout << "train-source: width_scale " << cfg.width_scale << ", epochs " << cfg.epochs
              << ", l2 " << cfg.l2 << ", seed " << c.seed << "\n";
    return 0;
  }
  ensure_out_dir(c);
  LabeledDataset data = load_train_data(cfg);
  SourceTrainConfig sc;
  sc.l2 = cfg.l2;
  sc.epochs = cfg.epochs;
  sc.batch_size = cfg.batch_size;
  sc.lr = cfg.lr;
  sc.width_scale = cfg.width_scale;
  sc.seed = c.seed;
  SourceTrainResult res = train_source_model(data, sc);
  Checkpoint ckpt;
  network_to_checkpoint(res.net, ckpt);
  json meta = {{"kind", "source"}, {"width_scale", cfg.width_scale}, {"seed", c.seed}};
  ckpt.metadata_json = meta.dump();
  const std::string path = out_path(c, "source_seed" + std::to_string(c.seed) + ".ckpt");
  save_checkpoint(ckpt, path);
  write_file(out_path(c, "source_seed" + std::to_string(c.seed) + "_metrics.csv"),
             metrics_csv(res.trace));
  std::cout << path << "\n";
  return 0;
}

int cmd_harvest(const Common& c) {
  json j = read_json(c.config);
  require_keys(j, {"checkpoints", "layer_index"}, "config");
  if (!j.contains("checkpoints")) throw ConfigError("config: 'checkpoints' is required");
  std::vector<std::string> paths;
  try {
    paths = j["checkpoints"].get<std::vector<std::string>>();
  } catch (const json::exception&) {
    throw ConfigError("config.checkpoints: expected an array of paths");
  }
  const std::int64_t layer = j.value("layer_index", std::int64_t(0));
  if (paths.empty()) throw ConfigError("config.checkpoints must be non-empty");
  if (c.dry_run) {
    std::cout << "harvest: " << paths.size() << " checkpoints, layer " << layer << "\n";
    return 0;
  }
  std::vector<Checkpoint> models;
  std::string ids;
  for (const auto& p : paths) {
    models.push_back(load_checkpoint(require_existing(p, "checkpoint")));
    if (!ids.empty()) ids += ";";
    ids += fs::path(p).filename().string();
  }
  KernelDataset ds = harvest_kernels(models, layer);
  ds.meta.source_model_id = ids;
  ensure_out_dir(c);
  const std::string path = out_path(c, "harvest_layer" + std::to_string(layer) + ".dwpk");
  save_kernels(ds, path);
  std::cout << path << " (" << ds.size() << " kernels " << ds.height() << "x" << ds.width()
            << ")\n";
  return 0;
}

int cmd_prune(const Common& c) {
  json j = read_json(c.config);
  require_keys(j, {"input", "threshold_factor"}, "config");
  if (!j.contains("input")) throw ConfigError("config: 'input' is required");
  const std::string input = j["input"].get<std::string>();
  const double factor = j.value("threshold_factor", 0.1);
  if (!(factor >= 0)) throw ConfigError("config.threshold_factor must be >= 0");
  if (c.dry_run) {
    std::cout << "prune: " << input << " at " << factor << " x median norm\n";
    return 0;
  }
  KernelDataset ds = load_kernels(require_existing(input, "config.input"));
  KernelDataset pruned = prune_small_norm(ds, factor);
  ensure_out_dir(c);
  const std::string path = out_path(c, "pruned.dwpk");
  save_kernels(pruned, path);
  std::cout << path << " (" << pruned.size() << " of " << ds.size() << " kernels kept)\n";
  return 0;
}

int cmd_train_prior(const Common& c) {
  json j = read_json(c.config);
  require_keys(j, {"kernels", "ksize", "z_dim", "epochs", "batch_size", "lr", "val_fraction"},
               "config");
  if (!j.contains("kernels") || !j.contains("ksize"))
    throw ConfigError("config: 'kernels' and 'ksize' are required");
  const std::string input = j["kernels"].get<std::string>();
  const std::int64_t ksize = j["ksize"].get<std::int64_t>();
  if (ksize < 1) throw ConfigError("config.ksize must be >= 1");
  const std::int64_t z_dim = j.value("z_dim", default_z_dim(ksize));
  VaeTrainConfig vc;
  vc.epochs = j.value("epochs", vc.epochs);
  vc.batch_size = j.value("batch_size", vc.batch_size);
  vc.lr = j.value("lr", vc.lr);
  vc.val_fraction = j.value("val_fraction", vc.val_fraction);
  vc.seed = c.seed;
  if (c.dry_run) {
    std::cout << "train-prior: " << ksize << "x" << ksize << " z_dim " << z_dim << ", epochs "
              << vc.epochs << ", seed " << c.seed << "\n";
    return 0;
  }
  KernelDataset ds = load_kernels(require_existing(input, "config.kernels"));
  if (ds.height() != ksize || ds.width() != ksize)
    throw ConfigError("config.ksize does not match the kernel file (" +
                      std::to_string(ds.height()) + "x" + std::to_string(ds.width()) + ")");
  VaeTrainResult<float> res = train_vae(ds.kernels, ksize, z_dim, vc);
  Checkpoint ckpt;
  vae_to_checkpoint(res.model, ckpt);
  json meta = {{"kind", "vae"}, {"ksize", ksize}, {"z_dim", z_dim}, {"seed", c.seed},
               {"best_val_elbo", res.best_val_elbo}};
  ckpt.metadata_json = meta.dump();
  ensure_out_dir(c);
  const std::string path = out_path(c, "prior_" + std::to_string(ksize) + "x" +
                                           std::to_string(ksize) + ".ckpt");
  save_checkpoint(ckpt, path);
  std::ostringstream curve;
  curve.precision(10);
  curve << "epoch,train_elbo,val_elbo\n";
  for (const auto& p : res.curve)
    curve << p.epoch << "," << p.train_elbo << "," << p.val_elbo << "\n";
  write_file(path + ".curve.csv", curve.str());
  std::cout << path << " (best val ELBO " << res.best_val_elbo << ")\n";
  return 0;
}

// vi-train accepts the experiment-config schema without requiring the
// "experiment" field; the first prior / train size in the lists is used.
ExperimentConfig load_experiment_config_for_vi(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  ExperimentConfig cfg = parse_experiment_config(buf.str());
  if (cfg.experiment.empty()) cfg.experiment = "classification";
  if (cfg.seeds.empty()) cfg.seeds = {0};
  validate_experiment_config(cfg);
  return cfg;
}

int cmd_vi_train(const Common& c) {
  ExperimentConfig cfg = load_experiment_config_for_vi(c.config);
  const PriorKind kind = prior_kind_from_string(cfg.priors.at(0));
  if (c.dry_run) {
    std::cout << "vi-train: prior " << cfg.priors.at(0) << ", width_scale " << cfg.width_scale
              << ", epochs " << cfg.epochs << ", seed " << c.seed << "\n";
    return 0;
  }
  ExperimentResources res = load_resources(cfg);
  LabeledDataset pool = load_train_data(cfg);
  LabeledDataset test = load_test_data(cfg);
  LabeledDataset train =
      pool.head(std::min<std::int64_t>(cfg.train_sizes.at(0), pool.size()));

  RngStream rng(c.seed);
  std::vector<std::shared_ptr<KernelDecoder<float>>> decs;
  for (auto& [k, d] : res.decoders) decs.push_back(d);
  std::vector<std::shared_ptr<KernelEncoder<float>>> encs;
  for (auto& [k, e] : res.encoders) encs.push_back(e);
  NetworkSpec spec = mnist_classifier_spec(cfg.width_scale);
  spec.in_channels = pool.images.dim(1);
  spec.in_h = pool.images.dim(2);
  spec.in_w = pool.images.dim(3);
  spec.layers.back() = LayerSpec::linear_(pool.classes);
  ViModel<float> model = build_vi_model<float>(spec, kind, decs, rng, encs);
  if (kind == PriorKind::gaussian_ml) {
    auto layers = model.net.bayes_layers();
    for (std::size_t i = 0; i < layers.size(); ++i) {
      auto it = res.kernels.find(layers[i]->kernel_size());
      if (it == res.kernels.end())
        throw ConfigError("gaussian_ml prior needs kernels." +
                          std::to_string(layers[i]->kernel_size()));
      model.priors[i].gaussian =
          std::make_shared<const GaussianMlPrior>(fit_gaussian_ml(it->second.kernels));
    }
  }
  ViTrainConfig tc;
  tc.epochs = cfg.epochs;
  tc.batch_size = cfg.batch_size;
  tc.lr = cfg.lr;
  tc.kl_weight = cfg.kl_weight;
  tc.seed = rng.next_u64();
  auto trace = train_vi(train, test, model, tc);
  ensure_out_dir(c);
  write_file(out_path(c, "vi_metrics.csv"), metrics_csv(trace));
  Checkpoint ckpt;
  network_to_checkpoint(model.net, ckpt);
  json meta = {{"kind", "vi"}, {"prior", cfg.priors.at(0)},
               {"width_scale", cfg.width_scale}, {"seed", c.seed}};
  ckpt.metadata_json = meta.dump();
  save_checkpoint(ckpt, out_path(c, "vi_model.ckpt"));
  std::cout << out_path(c, "vi_metrics.csv") << "\n";
  return 0;
}

int cmd_experiment(const Common& c, const std::string& kind) {
  ExperimentConfig cfg = load_experiment_config(c.config);
  if (cfg.experiment != kind)
    throw ConfigError("config.experiment is '" + cfg.experiment + "' but the subcommand runs '" +
                      kind + "'");
  if (c.dry_run) {
    std::cout << plan_grid(cfg);
    return 0;
  }
  ExperimentResources res = load_resources(cfg);
  ensure_out_dir(c);
  std::string path;
  if (kind == "classification") {
    path = out_path(c, "classification.csv");
    write_file(path, run_classification(cfg, res));
  } else if (kind == "features") {
    path = out_path(c, "features.csv");
    write_file(path, run_random_features(cfg, res));
  } else if (kind == "convergence") {
    path = out_path(c, "convergence.csv");
    write_file(path, run_convergence(cfg, res));
  } else {
    path = out_path(c, "gap.json");
    write_file(path, run_gap(cfg, res));
  }
  std::cout << path << "\n";
  return 0;
}

int cmd_sample_prior(const Common& c) {
  json j = read_json(c.config);
  require_keys(j, {"decoder", "ksize", "z_dim", "count"}, "config");
  if (!j.contains("decoder") || !j.contains("ksize"))
    throw ConfigError("config: 'decoder' and 'ksize' are required");
  const std::string path = j["decoder"].get<std::string>();
  const std::int64_t ksize = j["ksize"].get<std::int64_t>();
  const std::int64_t count = j.value("count", std::int64_t(64));
  if (count < 1) throw ConfigError("config.count must be >= 1");
  if (c.dry_run) {
    std::cout << "sample-prior: " << count << " samples from " << path << ", seed " << c.seed
              << "\n";
    return 0;
  }
  Checkpoint ckpt = load_checkpoint(require_existing(path, "config.decoder"));
  std::int64_t z = j.value("z_dim", default_z_dim(ksize));
  VaeModel<float> vm = vae_from_checkpoint<float>(ckpt, ksize, z);
  ensure_out_dir(c);
  const std::string out = out_path(c, "prior_samples.dwpk");
  export_prior_samples(*vm.decoder, count, c.seed, out);
  std::cout << out << "\n";
  return 0;
}

int cmd_embed(const Common& c) {
  json j = read_json(c.config);
  require_keys(j, {"vae", "ksize", "z_dim", "kernels"}, "config");
  if (!j.contains("vae") || !j.contains("ksize") || !j.contains("kernels"))
    throw ConfigError("config: 'vae', 'ksize' and 'kernels' are required");
  const std::string vae_path = j["vae"].get<std::string>();
  const std::string kernels_path = j["kernels"].get<std::string>();
  const std::int64_t ksize = j["ksize"].get<std::int64_t>();
  if (c.dry_run) {
    std::cout << "embed: " << kernels_path << " through " << vae_path << "\n";
    return 0;
  }
  Checkpoint ckpt = load_checkpoint(require_existing(vae_path, "config.vae"));
  std::int64_t z = j.value("z_dim", default_z_dim(ksize));
  VaeModel<float> vm = vae_from_checkpoint<float>(ckpt, ksize, z);
  KernelDataset ds = load_kernels(require_existing(kernels_path, "config.kernels"));
  if (ds.height() != ksize || ds.width() != ksize)
    throw ConfigError("config.ksize does not match the kernel file");
  ensure_out_dir(c);
  const std::string out = out_path(c, "embeddings.csv");
  export_embeddings(*vm.encoder, ds, out);
  std::cout << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian conv nets with kernel-space VAE priors"};
  app.require_subcommand(1);

  struct Sub {
    const char* name;
    const char* help;
    int (*fn)(const Common&);
  };
  static const std::vector<Sub> subs = {
      {"train-source", "Train a deterministic source model with L2", cmd_train_source},
      {"harvest", "Collect conv kernels from source checkpoints", cmd_harvest},
      {"prune", "Drop kernels with small L2 norm", cmd_prune},
      {"train-prior", "Train a kernel VAE on a kernel dataset", cmd_train_prior},
      {"vi-train", "Variational inference on a classifier", cmd_vi_train},
      {"sample-prior", "Draw kernels from a trained prior", cmd_sample_prior},
      {"embed", "Project kernels into the prior's latent space", cmd_embed},
  };
  static const std::vector<std::pair<const char*, const char*>> experiments = {
      {"classify-exp", "classification"},
      {"features-exp", "features"},
      {"convergence-exp", "convergence"},
      {"gap", "gap"},
  };

  std::vector<Common> commons(subs.size() + experiments.size());
  std::vector<std::function<int()>> actions;
  std::vector<CLI::App*> apps;
  std::size_t ci = 0;
  for (const auto& s : subs) {
    CLI::App* sub = app.add_subcommand(s.name, s.help);
    add_common(sub, commons[ci]);
    Common* cm = &commons[ci];
    auto fn = s.fn;
    actions.push_back([fn, cm] { return fn(*cm); });
    apps.push_back(sub);
    ++ci;
  }
  for (const auto& [name, kind] : experiments) {
    CLI::App* sub = app.add_subcommand(name, std::string("Run the ") + kind + " experiment");
    add_common(sub, commons[ci]);
    Common* cm = &commons[ci];
    std::string k = kind;
    actions.push_back([cm, k] { return cmd_experiment(*cm, k); });
    apps.push_back(sub);
    ++ci;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    for (std::size_t i = 0; i < apps.size(); ++i)
      if (apps[i]->parsed()) return actions[i]();
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical divergence: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
