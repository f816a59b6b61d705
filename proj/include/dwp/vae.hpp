#pragma once

// Per-layer kernel VAEs that define the implicit weight prior: convolutional
// encoder/decoder pairs over 7x7 and 5x5 kernels, ELU-separated, with
// factorized-Gaussian heads and a standard-normal latent prior.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "dwp/adam.hpp"
#include "dwp/checkpoint.hpp"
#include "dwp/layers.hpp"

namespace dwp {

// Encoder-shaped network mapping a batch of kernels (N,1,H,W) to a Gaussian
// over z-space: (mean, logvar), each (N, z_dim). Also reused as the VI
// reverse model r(z|w).
template <class T>
class KernelEncoder {
 public:
  KernelEncoder(std::int64_t ksize, std::int64_t z_dim, RngStream& rng)
      : ksize_(ksize), z_dim_(z_dim) {
    if (ksize == 7) {
      convs_.push_back(std::make_unique<Conv2dLayer<T>>(1, 32, 3, 1, 0, rng));
      convs_.push_back(std::make_unique<Conv2dLayer<T>>(32, 64, 3, 1, 0, rng));
      convs_.push_back(std::make_unique<Conv2dLayer<T>>(64, 64, 3, 1, 0, rng));
      head_ch_ = 64;
    } else if (ksize == 5) {
      convs_.push_back(std::make_unique<Conv2dLayer<T>>(1, 64, 3, 1, 1, rng));
      convs_.push_back(std::make_unique<Conv2dLayer<T>>(64, 64, 3, 1, 1, rng));
      convs_.push_back(std::make_unique<Conv2dLayer<T>>(64, 128, 3, 1, 0, rng));
      convs_.push_back(std::make_unique<Conv2dLayer<T>>(128, 128, 3, 1, 0, rng));
      head_ch_ = 128;
    } else {
      throw std::invalid_argument("KernelEncoder: unsupported kernel size " +
                                  std::to_string(ksize));
    }
    head_mean_ = std::make_unique<Conv2dLayer<T>>(head_ch_, z_dim, 1, 1, 0, rng);
    head_logvar_ = std::make_unique<Conv2dLayer<T>>(head_ch_, z_dim, 1, 1, 0, rng);
  }

  // (N,1,H,W) -> mean (N,z), logvar (N,z) with logvar clamped to [-7, 7].
  std::pair<Var<T>, Var<T>> forward(const Var<T>& x) {
    ForwardCtx<T> ctx;
    Var<T> h = x;
    for (auto& c : convs_) h = elu(c->forward(h, ctx));
    const std::int64_t n = h.value().dim(0);
    Var<T> m = reshape(head_mean_->forward(h, ctx), {n, z_dim_});
    Var<T> lv = clamp_v(reshape(head_logvar_->forward(h, ctx), {n, z_dim_}), T(-7), T(7));
    return {m, lv};
  }

  void collect(std::vector<NamedParam<T>>& out, const std::string& prefix) {
    for (std::size_t i = 0; i < convs_.size(); ++i)
      convs_[i]->collect(out, prefix + ".conv" + std::to_string(i));
    head_mean_->collect(out, prefix + ".mean");
    head_logvar_->collect(out, prefix + ".logvar");
  }

  std::vector<Var<T>> params() {
    std::vector<NamedParam<T>> named;
    collect(named, "enc");
    std::vector<Var<T>> out;
    for (auto& np : named) out.push_back(np.var);
    return out;
  }

  std::int64_t param_count() {
    std::int64_t n = 0;
    for (auto& p : params()) n += p.value().numel();
    return n;
  }

  void set_trainable(bool trainable) {
    for (auto& p : params()) p.node()->requires_grad = trainable;
  }

  std::int64_t ksize() const { return ksize_; }
  std::int64_t z_dim() const { return z_dim_; }

 private:
  std::int64_t ksize_, z_dim_, head_ch_;
  std::vector<std::unique_ptr<Conv2dLayer<T>>> convs_;
  std::unique_ptr<Conv2dLayer<T>> head_mean_, head_logvar_;
};

// Decoder mapping z (N, z_dim) to a factorized Gaussian over kernels:
// mean (N,1,H,W), logvar (N,1,H,W) clamped to [-7, 7].
template <class T>
class KernelDecoder {
 public:
  using scalar_type = T;

  KernelDecoder(std::int64_t ksize, std::int64_t z_dim, RngStream& rng)
      : ksize_(ksize), z_dim_(z_dim) {
    if (ksize == 7) {
      stack_.push_back(std::make_unique<ConvTranspose2dLayer<T>>(z_dim, 64, 3, 1, 0, rng));
      stack_.push_back(std::make_unique<ConvTranspose2dLayer<T>>(64, 64, 3, 1, 0, rng));
      stack_.push_back(std::make_unique<ConvTranspose2dLayer<T>>(64, 32, 3, 1, 0, rng));
      head_ch_ = 32;
    } else if (ksize == 5) {
      stack_.push_back(std::make_unique<Conv2dLayer<T>>(z_dim, 128, 1, 1, 0, rng));
      stack_.push_back(std::make_unique<ConvTranspose2dLayer<T>>(128, 128, 3, 1, 0, rng));
      stack_.push_back(std::make_unique<ConvTranspose2dLayer<T>>(128, 128, 3, 1, 0, rng));
      stack_.push_back(std::make_unique<Conv2dLayer<T>>(128, 64, 1, 1, 0, rng));
      head_ch_ = 64;
    } else {
      throw std::invalid_argument("KernelDecoder: unsupported kernel size " +
                                  std::to_string(ksize));
    }
    head_mean_ = std::make_unique<Conv2dLayer<T>>(head_ch_, 1, 1, 1, 0, rng);
    head_logvar_ = std::make_unique<Conv2dLayer<T>>(head_ch_, 1, 1, 1, 0, rng);
  }

  std::pair<Var<T>, Var<T>> forward(const Var<T>& z) {
    ForwardCtx<T> ctx;
    const std::int64_t n = z.value().dim(0);
    Var<T> h = reshape(z, {n, z_dim_, 1, 1});
    for (auto& l : stack_) h = elu(l->forward(h, ctx));
    Var<T> m = head_mean_->forward(h, ctx);
    Var<T> lv = clamp_v(head_logvar_->forward(h, ctx), T(-7), T(7));
    return {m, lv};
  }

  void collect(std::vector<NamedParam<T>>& out, const std::string& prefix) {
    for (std::size_t i = 0; i < stack_.size(); ++i)
      stack_[i]->collect(out, prefix + ".stack" + std::to_string(i));
    head_mean_->collect(out, prefix + ".mean");
    head_logvar_->collect(out, prefix + ".logvar");
  }

  std::vector<Var<T>> params() {
    std::vector<NamedParam<T>> named;
    collect(named, "dec");
    std::vector<Var<T>> out;
    for (auto& np : named) out.push_back(np.var);
    return out;
  }

  std::int64_t param_count() {
    std::int64_t n = 0;
    for (auto& p : params()) n += p.value().numel();
    return n;
  }

  void set_trainable(bool trainable) {
    for (auto& p : params()) p.node()->requires_grad = trainable;
  }

  std::int64_t ksize() const { return ksize_; }
  std::int64_t z_dim() const { return z_dim_; }

 private:
  std::int64_t ksize_, z_dim_, head_ch_;
  std::vector<std::unique_ptr<Layer<T>>> stack_;
  std::unique_ptr<Conv2dLayer<T>> head_mean_, head_logvar_;
};

template <class T>
struct VaeModel {
  std::shared_ptr<KernelEncoder<T>> encoder;
  std::shared_ptr<KernelDecoder<T>> decoder;
  std::int64_t ksize = 0, z_dim = 0;

  std::vector<Var<T>> params() {
    auto out = encoder->params();
    for (auto& p : decoder->params()) out.push_back(p);
    return out;
  }

  std::vector<NamedParam<T>> named_params() {
    std::vector<NamedParam<T>> out;
    encoder->collect(out, "enc");
    decoder->collect(out, "dec");
    return out;
  }

  // Freezing the prior: decoder parameters become immutable for VI.
  void freeze_decoder() { decoder->set_trainable(false); }
};

inline std::int64_t default_z_dim(std::int64_t ksize) { return ksize == 7 ? 2 : 4; }

template <class T>
VaeModel<T> build_vae(std::int64_t ksize, std::int64_t z_dim, RngStream& rng) {
  VaeModel<T> m;
  m.ksize = ksize;
  m.z_dim = z_dim;
  m.encoder = std::make_shared<KernelEncoder<T>>(ksize, z_dim, rng);
  m.decoder = std::make_shared<KernelDecoder<T>>(ksize, z_dim, rng);
  return m;
}

template <class T>
struct VaeElbo {
  Var<T> total;   // batch-mean ELBO (to maximize)
  double recon;   // batch-mean reconstruction term
  double kl;      // batch-mean KL(q(z|w) || N(0,I))
  Var<T> mu, lv;  // encoder heads for the batch, (n, z_dim)
};

// Per-kernel ELBO: E_q(z|w)[log p(w|z)] - KL(q(z|w) || N(0,I)), one
// reparametrized reconstruction sample; returns the batch mean.
template <class T>
VaeElbo<T> vae_elbo(const Var<T>& batch, VaeModel<T>& model, RngStream& rng,
                    T kl_scale = T(1)) {
  const std::int64_t n = batch.value().dim(0);
  if (n == 0) throw std::invalid_argument("vae_elbo: empty batch");
  auto [mu, lv] = model.encoder->forward(batch);
  Var<T> eps(Tensor<T>::randn(mu.value().shape(), rng));
  Var<T> z = add(mu, mul(exp_v(affine(lv, T(0.5), T(0))), eps));
  auto [wm, wlv] = model.decoder->forward(z);
  Var<T> recon = gaussian_log_prob_sum(batch, wm, wlv);
  Var<T> kl = kl_q_standard_normal_terms(mu, lv);
  Var<T> total =
      affine(sub(recon, affine(kl, kl_scale, T(0))), T(1) / static_cast<T>(n), T(0));
  return {total, recon.item() / static_cast<T>(n), kl.item() / static_cast<T>(n), mu, lv};
}

// KL(N(mu, exp(lv)) || N(0,I)) summed over all elements.
template <class T>
Var<T> kl_q_standard_normal_terms(const Var<T>& mu, const Var<T>& lv) {
  Var<T> t = add(affine(exp_v(lv), T(0.5), T(-0.5)), affine(mul(mu, mu), T(0.5), T(0)));
  return sum(add(t, affine(lv, T(-0.5), T(0))));
}

struct VaeTrainConfig {
  std::int64_t epochs = 300;
  std::int64_t batch_size = 256;
  double lr = 1e-3;          // linear decay to 0 over all steps
  double val_fraction = 0.1; // checkpoint selection split
  bool standardize = false;  // optional per-dataset standardization, off by default
  // Weight of the aggregate-posterior moment penalty. The per-example ELBO
  // tolerates an off-center, under-dispersed latent cloud (the decoder just
  // learns the offset), but everything that consumes p(z) = N(0,I) — prior
  // sampling and the VI reverse-model bound — then decodes mostly
  // off-manifold z. The penalty pulls the batch moments of q(z) toward the
  // prior's without changing the reported ELBO.
  double moment_match = 10.0;
  // KL warm-up: scale the KL term by min(1, (epoch+1)/kl_warmup_epochs)
  // during training. Small kernel datasets otherwise drive early posterior
  // collapse — the encoder noise saturates before the decoder learns to use
  // the latent, leaving most latent dimensions dead.
  std::int64_t kl_warmup_epochs = 0;
  std::uint64_t seed = 0;
};

struct VaeTrainCurvePoint {
  std::int64_t epoch;
  double train_elbo;
  double val_elbo;
};

template <class T>
struct VaeTrainResult {
  VaeModel<T> model;
  std::vector<VaeTrainCurvePoint> curve;
  double best_val_elbo;
};

// Trains a kernel VAE with Adam and linear lr decay; keeps the parameters of
// the best validation-ELBO epoch.
template <class T>
VaeTrainResult<T> train_vae(const Tensor<T>& kernels, std::int64_t ksize, std::int64_t z_dim,
                            const VaeTrainConfig& cfg) {
  const std::int64_t n = kernels.dim(0);
  if (n < cfg.batch_size && n < 2)
    throw std::invalid_argument("train_vae: dataset smaller than a batch");
  const std::int64_t h = kernels.dim(1), w = kernels.dim(2);
  RngStream rng(cfg.seed);
  RngStream init_rng = rng.derive(1);
  VaeTrainResult<T> res;
  res.model = build_vae<T>(ksize, z_dim, init_rng);
  res.best_val_elbo = -1e300;

  Tensor<T> data = kernels;
  if (cfg.standardize) {
    double m = 0, s = 0;
    for (std::int64_t i = 0; i < data.numel(); ++i) m += data[i];
    m /= static_cast<double>(data.numel());
    for (std::int64_t i = 0; i < data.numel(); ++i) s += (data[i] - m) * (data[i] - m);
    s = std::sqrt(s / static_cast<double>(data.numel())) + 1e-12;
    for (std::int64_t i = 0; i < data.numel(); ++i)
      data[i] = static_cast<T>((data[i] - m) / s);
  }

  // Permute once, split off the validation tail.
  std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
  RngStream shuffle_rng = rng.derive(2);
  for (std::int64_t i = n - 1; i > 0; --i)
    std::swap(perm[static_cast<std::size_t>(i)],
              perm[static_cast<std::size_t>(shuffle_rng.next_below(
                  static_cast<std::uint64_t>(i + 1)))]);
  std::int64_t n_val = static_cast<std::int64_t>(cfg.val_fraction * static_cast<double>(n));
  if (n_val < 1) n_val = 1;
  const std::int64_t n_train = n - n_val;
  if (n_train < 1) throw std::invalid_argument("train_vae: dataset too small for split");

  auto gather = [&](std::int64_t from, std::int64_t count) {
    Tensor<T> out({count, 1, h, w});
    for (std::int64_t i = 0; i < count; ++i)
      for (std::int64_t j = 0; j < h * w; ++j)
        out[i * h * w + j] = data[perm[static_cast<std::size_t>(from + i)] * h * w + j];
    return out;
  };
  Tensor<T> val = gather(n_train, n_val);

  const std::int64_t bsz = std::min<std::int64_t>(cfg.batch_size, n_train);
  const std::int64_t steps_per_epoch = (n_train + bsz - 1) / bsz;
  Adam<T> opt(AdamConfig{.lr = cfg.lr, .decay_horizon = cfg.epochs * steps_per_epoch});
  auto params = res.model.params();

  std::vector<Tensor<T>> best;
  RngStream step_rng = rng.derive(3);
  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_elbo = 0.0;
    std::int64_t seen = 0;
    for (std::int64_t s = 0; s < steps_per_epoch; ++s) {
      const std::int64_t from = s * bsz;
      const std::int64_t count = std::min(bsz, n_train - from);
      Var<T> batch(gather(from, count));
      opt.zero_grad(params);
      const T kl_scale =
          cfg.kl_warmup_epochs > 0
              ? std::min(T(1), static_cast<T>(epoch + 1) /
                                   static_cast<T>(cfg.kl_warmup_epochs))
              : T(1);
      VaeElbo<T> e = vae_elbo(batch, res.model, step_rng, kl_scale);
      if (!std::isfinite(static_cast<double>(e.total.item())))
        throw NumericalError("train_vae: ELBO diverged at epoch " + std::to_string(epoch));
      Var<T> loss = neg(e.total);
      if (cfg.moment_match > 0 && count > 1) {
        const T invn = T(1) / static_cast<T>(count);
        Tensor<T> row({1, count}), col({count, 1});
        for (std::int64_t i = 0; i < count; ++i) row[i] = col[i] = T(1);
        Var<T> ones_row(row), ones_col(col);
        Var<T> cm = affine(matmul(ones_row, e.mu), invn, T(0));  // batch mean, (1,z)
        Var<T> centered = sub(e.mu, matmul(ones_col, cm));
        Var<T> cvar = affine(matmul(ones_row, mul(centered, centered)), invn, T(0));
        Var<T> avar = affine(matmul(ones_row, exp_v(e.lv)), invn, T(0));
        Var<T> excess = affine(add(cvar, avar), T(1), T(-1));  // aggregate var - 1
        Var<T> pen = add(sum(mul(cm, cm)), sum(mul(excess, excess)));
        loss = add(loss, affine(pen, static_cast<T>(cfg.moment_match), T(0)));
      }
      backward(loss);
      opt.step(params);
      epoch_elbo += static_cast<double>(e.total.item()) * static_cast<double>(count);
      seen += count;
    }
    double val_elbo;
    {
      NoGradGuard ng;
      RngStream val_rng = rng.derive(1000 + static_cast<std::uint64_t>(epoch));
      Var<T> vb(val);
      val_elbo = static_cast<double>(vae_elbo(vb, res.model, val_rng).total.item());
    }
    res.curve.push_back({epoch, epoch_elbo / static_cast<double>(seen), val_elbo});
    if (val_elbo > res.best_val_elbo) {
      res.best_val_elbo = val_elbo;
      best.clear();
      for (auto& p : params) best.push_back(p.value());
    }
  }
  if (!best.empty())
    for (std::size_t i = 0; i < params.size(); ++i) params[i].value() = best[i];
  return res;
}

// Draws n kernels from the implicit prior: z ~ N(0,I), w ~ N(mu(z), sigma^2(z)).
// If `means_only` is set, returns mu(z) instead of samples. Generic over the
// decoder type; anything exposing forward/ksize/z_dim works.
template <class Dec, class T = typename Dec::scalar_type>
Tensor<T> sample_kernels(Dec& decoder, std::int64_t n, RngStream& rng,
                         bool means_only = false) {
  const std::int64_t hk = decoder.ksize();
  if (n == 0) return Tensor<T>();
  NoGradGuard ng;
  Var<T> z(Tensor<T>::randn({n, decoder.z_dim()}, rng));
  auto [m, lv] = decoder.forward(z);
  Tensor<T> out({n, hk, hk});
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = means_only ? m.value()[i]
                        : m.value()[i] + std::exp(lv.value()[i] / T(2)) *
                                             static_cast<T>(rng.next_normal());
  return out;
}

// Latent means per kernel, (N, z_dim); CSV-exportable for scatter plots.
template <class T>
Tensor<T> embed_kernels(KernelEncoder<T>& encoder, const Tensor<T>& kernels) {
  NoGradGuard ng;
  const std::int64_t n = kernels.dim(0);
  Var<T> x(kernels.reshaped({n, 1, kernels.dim(1), kernels.dim(2)}));
  auto [m, lv] = encoder.forward(x);
  return m.value();
}

// ---------------------------------------------------------------------------
// Checkpoint plumbing
// ---------------------------------------------------------------------------

template <class T>
void vae_to_checkpoint(VaeModel<T>& model, Checkpoint& ckpt) {
  for (auto& np : model.named_params()) ckpt.put(np.name, np.var.value().template cast<float>());
  ckpt.metadata_json = std::string("{\"kind\":\"vae\",\"ksize\":") + std::to_string(model.ksize) +
                       ",\"z_dim\":" + std::to_string(model.z_dim) + "}";
}

template <class T>
VaeModel<T> vae_from_checkpoint(const Checkpoint& ckpt, std::int64_t ksize, std::int64_t z_dim) {
  RngStream rng(0);
  VaeModel<T> m = build_vae<T>(ksize, z_dim, rng);
  for (auto& np : m.named_params()) {
    const auto& blob = ckpt.get(np.name);
    if (blob.shape() != np.var.value().shape())
      throw FormatError("vae_from_checkpoint: shape mismatch for " + np.name);
    np.var.value() = blob.template cast<T>();
  }
  return m;
}

}  // namespace dwp
