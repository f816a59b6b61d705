#pragma once

// Stochastic variational inference for Bayesian conv nets. Supports explicit
// priors with closed-form KL (standard normal, log-uniform, fitted Gaussian)
// and the implicit deep weight prior, optimized through the auxiliary lower
// bound with trainable reverse models: per layer,
//   L_aux = L_D + H(q) - sum_ij KL(r(z|w_ij) || N(0,I)) + sum_ij log p(w_ij|z_ij),
// with w ~ q and z ~ r reparametrized, entropy and latent KL in closed form.
// Also provides the importance-weighted (IWAE) bound used to report how far
// the auxiliary bound sits from the marginal ELBO.

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "dwp/adam.hpp"
#include "dwp/data.hpp"
#include "dwp/layers.hpp"
#include "dwp/priors.hpp"
#include "dwp/vae.hpp"

namespace dwp {

enum class PriorKind { standard_normal, log_uniform, gaussian_ml, dwp };

inline PriorKind prior_kind_from_string(const std::string& s) {
  if (s == "standard_normal") return PriorKind::standard_normal;
  if (s == "log_uniform") return PriorKind::log_uniform;
  if (s == "gaussian_ml") return PriorKind::gaussian_ml;
  if (s == "dwp") return PriorKind::dwp;
  throw std::invalid_argument("unknown prior kind: " + s);
}

inline std::string to_string(PriorKind k) {
  switch (k) {
    case PriorKind::standard_normal: return "standard_normal";
    case PriorKind::log_uniform: return "log_uniform";
    case PriorKind::gaussian_ml: return "gaussian_ml";
    case PriorKind::dwp: return "dwp";
  }
  return "?";
}

// Prior attached to one Bayesian conv layer. For the dwp kind the decoder is
// frozen (the prior is fixed during inference) and the reverse model is the
// trainable part of the bound.
template <class T>
struct LayerPrior {
  PriorKind kind = PriorKind::standard_normal;
  std::shared_ptr<const GaussianMlPrior> gaussian;   // gaussian_ml
  std::shared_ptr<KernelDecoder<T>> decoder;         // dwp, frozen
  std::shared_ptr<KernelEncoder<T>> reverse;         // dwp, trainable psi
};

template <class T>
struct ViModel {
  Network<T> net;  // built in bayesian mode
  std::vector<LayerPrior<T>> priors;  // one per bayes layer, forward order

  std::vector<Var<T>> trainable_params() {
    auto out = net.params();
    for (auto& lp : priors)
      if (lp.kind == PriorKind::dwp)
        for (auto& p : lp.reverse->params()) out.push_back(p);
    return out;
  }
};

// Attaches priors to every Bayesian layer. For dwp, `decoders` must hold one
// frozen decoder per kernel size present in the network; reverse models are
// created fresh (one per layer, shared across that layer's kernels).
template <class T>
ViModel<T> build_vi_model(const NetworkSpec& spec, PriorKind kind,
                          const std::vector<std::shared_ptr<KernelDecoder<T>>>& decoders,
                          RngStream& rng,
                          const std::vector<std::shared_ptr<KernelEncoder<T>>>& reverse_inits = {}) {
  ViModel<T> m;
  m.net = build_network<T>(spec, NetworkMode::bayesian, rng);
  for (auto* layer : m.net.bayes_layers()) {
    LayerPrior<T> lp;
    lp.kind = kind;
    if (kind == PriorKind::dwp) {
      const std::int64_t k = layer->kernel_size();
      for (const auto& d : decoders)
        if (d->ksize() == k) lp.decoder = d;
      if (!lp.decoder)
        throw std::invalid_argument("build_vi_model: no prior decoder for kernel size " +
                                    std::to_string(k));
      lp.decoder->set_trainable(false);
      lp.reverse = std::make_shared<KernelEncoder<T>>(k, lp.decoder->z_dim(), rng);
      // Warm-start the reverse model from the prior's trained encoder when
      // one is supplied; each layer still trains its own copy. A fresh
      // random reverse model wastes most of a short VI run relearning the
      // latent map.
      for (const auto& e : reverse_inits) {
        if (!e || e->ksize() != k) continue;
        std::vector<NamedParam<T>> src, dst;
        e->collect(src, "r");
        lp.reverse->collect(dst, "r");
        for (std::size_t i = 0; i < src.size(); ++i)
          dst[i].var.value() = src[i].var.value();
        break;
      }
      // Initialize the variational means with draws from the prior so the
      // approximate posterior starts on the prior's kernel manifold instead
      // of an unstructured random point.
      Tensor<T> init = sample_kernels(*lp.decoder, layer->kernel_count(), rng,
                                      /*means_only=*/true);
      layer->theta.value() = init.reshaped(layer->theta.value().shape());
    }
    m.priors.push_back(std::move(lp));
  }
  return m;
}

template <class T>
struct AuxElboEstimate {
  Var<T> total;          // L_D - kl_weight * D_KL_bound (to maximize)
  double data_term = 0;  // minibatch-rescaled log-likelihood
  double kl_bound = 0;   // sum over layers of the (bounded) KL term
  // dwp-layer breakdown, summed over layers:
  double entropy = 0, kl_r = 0, recon = 0;
};

template <class T>
struct AuxConfig {
  double kl_weight = 1.0;
  ForwardMode data_mode = ForwardMode::local_reparam;
};

// Kernels of one layer, sampled from q and flattened to (O*C, 1, k, k).
template <class T>
Var<T> sample_layer_kernels(BayesConv2dLayer<T>& layer, RngStream& rng) {
  Var<T> w = sample_weights(layer.theta, layer.rho, rng);
  const auto& s = layer.theta.value().shape();
  return reshape(w, {s[0] * s[1], 1, s[2], s[3]});
}

// Standard-normal log-density summed over all elements.
template <class T>
Var<T> std_normal_log_prob_sum(const Var<T>& z) {
  const T c = static_cast<T>(-0.5 * kLog2Pi);
  return sum(affine(mul(z, z), T(-0.5), c));
}

// One stochastic estimate of the auxiliary bound with gradients attached.
// N_total is the dataset size behind the minibatch (data-term rescaling).
template <class T>
AuxElboEstimate<T> aux_elbo_step(const Var<T>& x, const std::vector<std::int64_t>& y,
                                 ViModel<T>& model, std::int64_t N_total, RngStream& rng,
                                 const AuxConfig<T>& cfg = {}) {
  AuxElboEstimate<T> est;
  ForwardCtx<T> ctx{cfg.data_mode, &rng};
  Var<T> logits = model.net.forward(x, ctx);
  const T scale = static_cast<T>(N_total) / static_cast<T>(x.value().dim(0));
  Var<T> data = affine(neg(cross_entropy_sum(logits, y)), scale, T(0));
  est.data_term = static_cast<double>(data.item());

  Var<T> bound_sum;  // sum over layers of the bound's prior-dependent part
  bool have = false;
  auto layers = model.net.bayes_layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto* layer = layers[l];
    auto& lp = model.priors[l];
    Var<T> term;
    switch (lp.kind) {
      case PriorKind::standard_normal:
        term = neg(kl_q_standard_normal(layer->theta, layer->rho));
        est.kl_bound += -static_cast<double>(term.item());
        break;
      case PriorKind::log_uniform:
        term = neg(kl_q_log_uniform_approx(layer->theta, layer->rho));
        est.kl_bound += -static_cast<double>(term.item());
        break;
      case PriorKind::gaussian_ml:
        term = neg(kl_q_gaussian_ml(layer->theta, layer->rho, lp.gaussian));
        est.kl_bound += -static_cast<double>(term.item());
        break;
      case PriorKind::dwp: {
        Var<T> w = sample_layer_kernels(*layer, rng);
        auto [mz, lz] = lp.reverse->forward(w);
        Var<T> epsz(Tensor<T>::randn(mz.value().shape(), rng));
        Var<T> z = add(mz, mul(exp_v(affine(lz, T(0.5), T(0))), epsz));
        auto [mw, lw] = lp.decoder->forward(z);
        Var<T> h = entropy_q(layer->rho);
        Var<T> klr = kl_q_standard_normal_terms(mz, lz);
        Var<T> rec = gaussian_log_prob_sum(w, mw, lw);
        term = add(h, add(neg(klr), rec));
        est.entropy += static_cast<double>(h.item());
        est.kl_r += static_cast<double>(klr.item());
        est.recon += static_cast<double>(rec.item());
        est.kl_bound += -static_cast<double>(term.item());
        break;
      }
    }
    bound_sum = have ? add(bound_sum, term) : term;
    have = true;
  }

  est.total = have ? add(data, affine(bound_sum, static_cast<T>(cfg.kl_weight), T(0))) : data;
  const double tv = static_cast<double>(est.total.item());
  if (!std::isfinite(tv))
    throw NumericalError("aux_elbo_step: non-finite estimate (data=" +
                         std::to_string(est.data_term) + " kl_bound=" +
                         std::to_string(est.kl_bound) + " entropy=" +
                         std::to_string(est.entropy) + " kl_r=" + std::to_string(est.kl_r) +
                         " recon=" + std::to_string(est.recon) + ")");
  return est;
}

namespace detail {

template <class T>
Tensor<T> gather_images(const LabeledDataset& d, const std::vector<std::int64_t>& perm,
                        std::int64_t from, std::int64_t count) {
  const std::int64_t c = d.images.dim(1), h = d.images.dim(2), w = d.images.dim(3);
  const std::int64_t px = c * h * w;
  Tensor<T> out({count, c, h, w});
  for (std::int64_t i = 0; i < count; ++i) {
    const std::int64_t src = perm[static_cast<std::size_t>(from + i)];
    for (std::int64_t j = 0; j < px; ++j)
      out[i * px + j] = static_cast<T>(d.images[src * px + j]);
  }
  return out;
}

inline void shuffle_perm(std::vector<std::int64_t>& perm, RngStream& rng) {
  for (std::int64_t i = static_cast<std::int64_t>(perm.size()) - 1; i > 0; --i)
    std::swap(perm[static_cast<std::size_t>(i)],
              perm[static_cast<std::size_t>(rng.next_below(static_cast<std::uint64_t>(i + 1)))]);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Prediction and accuracy
// ---------------------------------------------------------------------------

enum class PredictMode { mean, mc };

template <class T>
void softmax_rows_inplace(Tensor<T>& t) {
  const std::int64_t n = t.dim(0), c = t.dim(1);
  for (std::int64_t i = 0; i < n; ++i) {
    T hi = t[i * c];
    for (std::int64_t j = 1; j < c; ++j) hi = std::max(hi, t[i * c + j]);
    T zsum = T(0);
    for (std::int64_t j = 0; j < c; ++j) {
      t[i * c + j] = std::exp(t[i * c + j] - hi);
      zsum += t[i * c + j];
    }
    for (std::int64_t j = 0; j < c; ++j) t[i * c + j] /= zsum;
  }
}

// Class probabilities. mean: one pass with posterior means; mc: softmax
// averaged over `samples` weight draws.
template <class T>
Tensor<T> predict(Network<T>& net, const Tensor<T>& x, PredictMode mode,
                  std::int64_t samples, RngStream& rng) {
  NoGradGuard ng;
  if (mode == PredictMode::mean) {
    ForwardCtx<T> ctx{ForwardMode::mean, nullptr};
    Tensor<T> probs = net.forward(Var<T>(x), ctx).value();
    softmax_rows_inplace(probs);
    return probs;
  }
  Tensor<T> acc;
  for (std::int64_t s = 0; s < samples; ++s) {
    ForwardCtx<T> ctx{ForwardMode::weight_sample, &rng};
    Tensor<T> probs = net.forward(Var<T>(x), ctx).value();
    softmax_rows_inplace(probs);
    if (s == 0)
      acc = probs;
    else
      for (std::int64_t i = 0; i < acc.numel(); ++i) acc[i] += probs[i];
  }
  for (std::int64_t i = 0; i < acc.numel(); ++i) acc[i] /= static_cast<T>(samples);
  return acc;
}

template <class T>
double accuracy(Network<T>& net, const LabeledDataset& data, PredictMode mode,
                std::int64_t samples, RngStream& rng, std::int64_t eval_batch = 256) {
  const std::int64_t n = data.size();
  std::int64_t correct = 0;
  std::vector<std::int64_t> ident(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) ident[static_cast<std::size_t>(i)] = i;
  for (std::int64_t from = 0; from < n; from += eval_batch) {
    const std::int64_t count = std::min(eval_batch, n - from);
    Tensor<T> xb = detail::gather_images<T>(data, ident, from, count);
    Tensor<T> probs = predict(net, xb, mode, samples, rng);
    const std::int64_t c = probs.dim(1);
    for (std::int64_t i = 0; i < count; ++i) {
      std::int64_t best = 0;
      for (std::int64_t j = 1; j < c; ++j)
        if (probs[i * c + j] > probs[i * c + best]) best = j;
      if (best == data.labels[static_cast<std::size_t>(from + i)]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

struct MetricsRow {
  std::int64_t step = 0, epoch = 0;
  double aux_elbo = 0, data_term = 0, kl_bound_term = 0;
  double train_acc = 0, test_acc = 0, lr = 0;
};

struct ViTrainConfig {
  std::int64_t epochs = 50;
  std::int64_t batch_size = 128;
  double lr = 1e-3;
  bool lr_decay = true;  // linear to 0
  double kl_weight = 1.0;
  std::uint64_t seed = 0;
  std::int64_t eval_every = 1;  // epochs between accuracy evaluations
};

// Runs Adam on the negated auxiliary bound (or the exact ELBO for explicit
// priors). Returns one metrics row per epoch.
template <class T>
std::vector<MetricsRow> train_vi(const LabeledDataset& train, const LabeledDataset& test,
                                 ViModel<T>& model, const ViTrainConfig& cfg) {
  const std::int64_t n = train.size();
  if (n == 0) throw std::invalid_argument("train_vi: empty training set");
  RngStream root(cfg.seed);
  RngStream shuffle_rng = root.derive(1);
  RngStream step_rng = root.derive(2);
  RngStream eval_rng = root.derive(3);

  auto params = model.trainable_params();
  const std::int64_t bsz = std::min<std::int64_t>(cfg.batch_size, n);
  const std::int64_t steps_per_epoch = (n + bsz - 1) / bsz;
  Adam<T> opt(AdamConfig{.lr = cfg.lr,
                         .decay_horizon = cfg.lr_decay ? cfg.epochs * steps_per_epoch : 0});
  AuxConfig<T> aux;
  aux.kl_weight = cfg.kl_weight;

  std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;

  std::vector<MetricsRow> trace;
  std::int64_t step = 0;
  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    detail::shuffle_perm(perm, shuffle_rng);
    double ep_elbo = 0, ep_data = 0, ep_kl = 0;
    for (std::int64_t s = 0; s < steps_per_epoch; ++s) {
      const std::int64_t from = s * bsz;
      const std::int64_t count = std::min(bsz, n - from);
      Var<T> xb(detail::gather_images<T>(train, perm, from, count));
      std::vector<std::int64_t> yb(static_cast<std::size_t>(count));
      for (std::int64_t i = 0; i < count; ++i)
        yb[static_cast<std::size_t>(i)] =
            train.labels[static_cast<std::size_t>(perm[static_cast<std::size_t>(from + i)])];
      opt.zero_grad(params);
      auto est = aux_elbo_step(xb, yb, model, n, step_rng, aux);
      backward(neg(est.total));
      opt.step(params);
      model.net.after_step();
      ++step;
      ep_elbo += static_cast<double>(est.total.item());
      ep_data += est.data_term;
      ep_kl += est.kl_bound;
    }
    MetricsRow row;
    row.step = step;
    row.epoch = epoch;
    row.aux_elbo = ep_elbo / static_cast<double>(steps_per_epoch);
    row.data_term = ep_data / static_cast<double>(steps_per_epoch);
    row.kl_bound_term = ep_kl / static_cast<double>(steps_per_epoch);
    row.lr = opt.current_lr();
    if (cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs - 1)) {
      row.train_acc = accuracy(model.net, train, PredictMode::mean, 1, eval_rng);
      row.test_acc = test.size() > 0
                         ? accuracy(model.net, test, PredictMode::mean, 1, eval_rng)
                         : 0.0;
    }
    trace.push_back(row);
  }
  return trace;
}

struct DetTrainConfig {
  std::int64_t epochs = 10;
  std::int64_t batch_size = 128;
  double lr = 1e-3;
  bool lr_decay = true;
  double l2 = 0.0;  // lambda * ||W||^2 over all parameters
  std::uint64_t seed = 0;
  std::int64_t eval_every = 1;
};

// Plain maximum-likelihood training (mean cross-entropy + optional L2),
// used for source models, random-feature baselines, and as the degenerate
// limit of VI. Metrics rows reuse aux_elbo for the (negated) loss.
template <class T>
std::vector<MetricsRow> train_deterministic(const LabeledDataset& train,
                                            const LabeledDataset& test, Network<T>& net,
                                            const DetTrainConfig& cfg) {
  const std::int64_t n = train.size();
  if (n == 0) throw std::invalid_argument("train_deterministic: empty training set");
  RngStream root(cfg.seed);
  RngStream shuffle_rng = root.derive(1);
  RngStream eval_rng = root.derive(3);

  auto params = net.params();
  const std::int64_t bsz = std::min<std::int64_t>(cfg.batch_size, n);
  const std::int64_t steps_per_epoch = (n + bsz - 1) / bsz;
  Adam<T> opt(AdamConfig{.lr = cfg.lr,
                         .decay_horizon = cfg.lr_decay ? cfg.epochs * steps_per_epoch : 0});

  std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;

  std::vector<MetricsRow> trace;
  std::int64_t step = 0;
  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    detail::shuffle_perm(perm, shuffle_rng);
    double ep_loss = 0;
    for (std::int64_t s = 0; s < steps_per_epoch; ++s) {
      const std::int64_t from = s * bsz;
      const std::int64_t count = std::min(bsz, n - from);
      Var<T> xb(detail::gather_images<T>(train, perm, from, count));
      std::vector<std::int64_t> yb(static_cast<std::size_t>(count));
      for (std::int64_t i = 0; i < count; ++i)
        yb[static_cast<std::size_t>(i)] =
            train.labels[static_cast<std::size_t>(perm[static_cast<std::size_t>(from + i)])];
      opt.zero_grad(params);
      ForwardCtx<T> ctx{ForwardMode::deterministic, nullptr};
      Var<T> loss = affine(cross_entropy_sum(net.forward(xb, ctx), yb),
                           T(1) / static_cast<T>(count), T(0));
      if (cfg.l2 > 0.0) {
        Var<T> reg;
        bool have = false;
        for (auto& p : params) {
          Var<T> sq = sum(mul(p, p));
          reg = have ? add(reg, sq) : sq;
          have = true;
        }
        loss = add(loss, affine(reg, static_cast<T>(cfg.l2), T(0)));
      }
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv))
        throw NumericalError("train_deterministic: non-finite loss at step " +
                             std::to_string(step));
      backward(loss);
      opt.step(params);
      ++step;
      ep_loss += lv;
    }
    MetricsRow row;
    row.step = step;
    row.epoch = epoch;
    row.aux_elbo = -ep_loss / static_cast<double>(steps_per_epoch);
    row.data_term = row.aux_elbo;
    row.lr = opt.current_lr();
    if (cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs - 1)) {
      row.train_acc = accuracy(net, train, PredictMode::mean, 1, eval_rng);
      row.test_acc = test.size() > 0
                         ? accuracy(net, test, PredictMode::mean, 1, eval_rng)
                         : 0.0;
    }
    trace.push_back(row);
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Bound evaluation: auxiliary vs importance-weighted
// ---------------------------------------------------------------------------

struct BoundEstimate {
  double mean = 0, se = 0;
  std::int64_t draws = 0;
};

namespace detail {

inline BoundEstimate summarize(const std::vector<double>& vals) {
  BoundEstimate b;
  b.draws = static_cast<std::int64_t>(vals.size());
  for (double v : vals) b.mean += v;
  b.mean /= static_cast<double>(b.draws);
  double s2 = 0;
  for (double v : vals) s2 += (v - b.mean) * (v - b.mean);
  if (b.draws > 1)
    b.se = std::sqrt(s2 / static_cast<double>(b.draws - 1) / static_cast<double>(b.draws));
  return b;
}

// Minibatch-rescaled log-likelihood under one weight sample.
template <class T>
double data_term_sample(ViModel<T>& model, const Tensor<T>& x,
                        const std::vector<std::int64_t>& y, std::int64_t N_total,
                        RngStream& rng) {
  ForwardCtx<T> ctx{ForwardMode::weight_sample, &rng};
  Var<T> logits = model.net.forward(Var<T>(x), ctx);
  const T scale = static_cast<T>(N_total) / static_cast<T>(x.dim(0));
  return static_cast<double>(scale) * -static_cast<double>(cross_entropy_sum(logits, y).item());
}

}  // namespace detail

// Evaluation-only estimate of the auxiliary bound; if `r_is_prior` is set,
// the reverse model is replaced by the latent prior N(0,I) (the untrained-r
// baseline: KL(r||p) vanishes and z is drawn from the prior).
template <class T>
BoundEstimate aux_bound_eval(ViModel<T>& model, const Tensor<T>& x,
                             const std::vector<std::int64_t>& y, std::int64_t N_total,
                             std::int64_t n_draws, RngStream& rng, bool r_is_prior = false) {
  NoGradGuard ng;
  std::vector<double> vals;
  vals.reserve(static_cast<std::size_t>(n_draws));
  auto layers = model.net.bayes_layers();
  for (std::int64_t d = 0; d < n_draws; ++d) {
    double v = detail::data_term_sample(model, x, y, N_total, rng);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto* layer = layers[l];
      auto& lp = model.priors[l];
      if (lp.kind != PriorKind::dwp)
        throw std::invalid_argument("aux_bound_eval: dwp priors only");
      Var<T> w = sample_layer_kernels(*layer, rng);
      Var<T> z, klr;
      if (r_is_prior) {
        z = Var<T>(Tensor<T>::randn({w.value().dim(0), lp.decoder->z_dim()}, rng));
        klr = Var<T>(Tensor<T>::scalar(T(0)));
      } else {
        auto [mz, lz] = lp.reverse->forward(w);
        Var<T> epsz(Tensor<T>::randn(mz.value().shape(), rng));
        z = add(mz, mul(exp_v(affine(lz, T(0.5), T(0))), epsz));
        klr = kl_q_standard_normal_terms(mz, lz);
      }
      auto [mw, lw] = lp.decoder->forward(z);
      v += static_cast<double>(entropy_q(layer->rho).item()) -
           static_cast<double>(klr.item()) +
           static_cast<double>(gaussian_log_prob_sum(w, mw, lw).item());
    }
    vals.push_back(v);
  }
  return detail::summarize(vals);
}

// Importance-weighted bound with K inner samples from r per kernel:
//   L_D + H(q) + sum_ij E log( (1/K) sum_k p(w|z_k) p(z_k) / r(z_k|w) ),
// log-sum-exp stabilized; n_outer independent replicates give the SE.
template <class T>
BoundEstimate iwae_bound(ViModel<T>& model, const Tensor<T>& x,
                         const std::vector<std::int64_t>& y, std::int64_t N_total,
                         std::int64_t K, std::int64_t n_outer, RngStream& rng) {
  if (K < 1) throw std::invalid_argument("iwae_bound: K must be >= 1");
  NoGradGuard ng;
  std::vector<double> vals;
  vals.reserve(static_cast<std::size_t>(n_outer));
  auto layers = model.net.bayes_layers();
  for (std::int64_t d = 0; d < n_outer; ++d) {
    double v = detail::data_term_sample(model, x, y, N_total, rng);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto* layer = layers[l];
      auto& lp = model.priors[l];
      if (lp.kind != PriorKind::dwp)
        throw std::invalid_argument("iwae_bound: dwp priors only");
      v += static_cast<double>(entropy_q(layer->rho).item());

      Var<T> w = sample_layer_kernels(*layer, rng);
      const std::int64_t nk = w.value().dim(0);
      auto [mz, lz] = lp.reverse->forward(w);
      const std::int64_t zd = lp.decoder->z_dim();
      const std::int64_t px = w.value().dim(2) * w.value().dim(3);
      // log-ratio matrix (nk, K), filled one inner sample at a time.
      std::vector<double> lr(static_cast<std::size_t>(nk * K));
      for (std::int64_t k = 0; k < K; ++k) {
        Var<T> epsz(Tensor<T>::randn(mz.value().shape(), rng));
        Var<T> z = add(mz, mul(exp_v(affine(lz, T(0.5), T(0))), epsz));
        auto [mw, lw] = lp.decoder->forward(z);
        for (std::int64_t i = 0; i < nk; ++i) {
          double log_p_w = 0, log_pz = 0, log_rz = 0;
          for (std::int64_t j = 0; j < px; ++j) {
            const double diff = static_cast<double>(w.value()[i * px + j]) -
                                static_cast<double>(mw.value()[i * px + j]);
            const double lv = static_cast<double>(lw.value()[i * px + j]);
            log_p_w += -0.5 * (kLog2Pi + lv + diff * diff * std::exp(-lv));
          }
          for (std::int64_t j = 0; j < zd; ++j) {
            const double zv = static_cast<double>(z.value()[i * zd + j]);
            const double mzv = static_cast<double>(mz.value()[i * zd + j]);
            const double lzv = static_cast<double>(lz.value()[i * zd + j]);
            log_pz += -0.5 * (kLog2Pi + zv * zv);
            log_rz += -0.5 * (kLog2Pi + lzv + (zv - mzv) * (zv - mzv) * std::exp(-lzv));
          }
          lr[static_cast<std::size_t>(i * K + k)] = log_p_w + log_pz - log_rz;
        }
      }
      for (std::int64_t i = 0; i < nk; ++i) {
        double hi = lr[static_cast<std::size_t>(i * K)];
        for (std::int64_t k = 1; k < K; ++k)
          hi = std::max(hi, lr[static_cast<std::size_t>(i * K + k)]);
        double acc = 0;
        for (std::int64_t k = 0; k < K; ++k)
          acc += std::exp(lr[static_cast<std::size_t>(i * K + k)] - hi);
        v += hi + std::log(acc / static_cast<double>(K));
      }
    }
    vals.push_back(v);
  }
  return detail::summarize(vals);
}

struct GapReport {
  BoundEstimate aux;        // learned reverse models
  BoundEstimate aux_prior;  // r replaced by the latent prior
  BoundEstimate iwae;
  std::int64_t K = 0;
  double gap_lower_bound = 0;  // iwae.mean - aux.mean
};

template <class T>
GapReport gap_report(ViModel<T>& model, const Tensor<T>& x, const std::vector<std::int64_t>& y,
                     std::int64_t N_total, std::int64_t K, std::int64_t n_outer,
                     RngStream& rng) {
  GapReport g;
  g.K = K;
  g.aux = aux_bound_eval(model, x, y, N_total, n_outer, rng, /*r_is_prior=*/false);
  g.aux_prior = aux_bound_eval(model, x, y, N_total, n_outer, rng, /*r_is_prior=*/true);
  g.iwae = iwae_bound(model, x, y, N_total, K, n_outer, rng);
  g.gap_lower_bound = g.iwae.mean - g.aux.mean;
  return g;
}

}  // namespace dwp
