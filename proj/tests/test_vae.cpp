#include <cmath>
#include <cstdio>

#include "doctest.h"
#include "dwp/vae.hpp"

using namespace dwp;

namespace {
constexpr double kLog2PiD = 1.8378770664093454835606594728112;

Tensor<float> gaussian_kernels(std::int64_t n, std::int64_t k, double sigma,
                               std::uint64_t seed) {
  RngStream rng(seed);
  Tensor<float> t({n, k, k});
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<float>(sigma * rng.next_normal());
  return t;
}
}  // namespace

TEST_CASE("kernel VAE parameter counts match the reference architectures") {
  RngStream rng(7);
  auto v7 = build_vae<float>(7, 2, rng);
  CHECK(v7.encoder->param_count() == 56004);
  CHECK(v7.decoder->param_count() == 56674);
  auto v5 = build_vae<float>(5, 4, rng);
  CHECK(v5.encoder->param_count() == 260040);
  CHECK(v5.decoder->param_count() == 304194);
  CHECK(default_z_dim(7) == 2);
  CHECK(default_z_dim(5) == 4);
  CHECK_THROWS(build_vae<float>(3, 2, rng));
}

TEST_CASE("encoder and decoder output shapes") {
  RngStream rng(11);
  for (std::int64_t k : {5, 7}) {
    auto v = build_vae<float>(k, default_z_dim(k), rng);
    Var<float> x(Tensor<float>::randn({6, 1, k, k}, rng));
    auto [mu, lv] = v.encoder->forward(x);
    CHECK(mu.value().shape() == Shape{6, default_z_dim(k)});
    CHECK(lv.value().shape() == Shape{6, default_z_dim(k)});
    for (std::int64_t i = 0; i < lv.value().numel(); ++i) {
      CHECK(lv.value()[i] >= -7.0f);
      CHECK(lv.value()[i] <= 7.0f);
    }
    Var<float> z(Tensor<float>::randn({6, default_z_dim(k)}, rng));
    auto [wm, wlv] = v.decoder->forward(z);
    CHECK(wm.value().shape() == Shape{6, 1, k, k});
    CHECK(wlv.value().shape() == Shape{6, 1, k, k});
  }
}

TEST_CASE("Gaussian log-density helper against a direct computation") {
  // Zero residual with unit variance integrates to the normalizer alone.
  Var<double> x(Tensor<double>::full({2, 1, 7, 7}, 0.3));
  Var<double> lv0(Tensor<double>::zeros({2, 1, 7, 7}));
  const double lp = gaussian_log_prob_sum(x, x, lv0).item();
  CHECK(lp == doctest::Approx(-0.5 * 98 * kLog2PiD).epsilon(1e-12));

  RngStream rng(3);
  Tensor<double> xv = Tensor<double>::randn({4, 1, 5, 5}, rng);
  Tensor<double> mv = Tensor<double>::randn({4, 1, 5, 5}, rng);
  Tensor<double> lvv = Tensor<double>::randn({4, 1, 5, 5}, rng);
  double want = 0.0;
  for (std::int64_t i = 0; i < xv.numel(); ++i) {
    const double d = xv[i] - mv[i];
    want += -0.5 * (kLog2PiD + lvv[i] + d * d * std::exp(-lvv[i]));
  }
  const double got =
      gaussian_log_prob_sum(Var<double>(xv), Var<double>(mv), Var<double>(lvv)).item();
  CHECK(got == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("latent KL term: closed form against elementwise formula") {
  Var<double> mu0(Tensor<double>::zeros({3, 2}));
  Var<double> lv0(Tensor<double>::zeros({3, 2}));
  CHECK(kl_q_standard_normal_terms(mu0, lv0).item() == doctest::Approx(0.0).epsilon(1e-14));

  RngStream rng(5);
  Tensor<double> mu = Tensor<double>::randn({8, 4}, rng);
  Tensor<double> lv = Tensor<double>::randn({8, 4}, rng);
  double want = 0.0;
  for (std::int64_t i = 0; i < mu.numel(); ++i)
    want += 0.5 * (std::exp(lv[i]) + mu[i] * mu[i] - 1.0 - lv[i]);
  CHECK(kl_q_standard_normal_terms(Var<double>(mu), Var<double>(lv)).item() ==
        doctest::Approx(want).epsilon(1e-12));
  CHECK(want > 0.0);
}

TEST_CASE("ELBO evaluation is finite, seeded, and differentiable in all parameters") {
  RngStream init(21);
  auto model = build_vae<float>(7, 2, init);
  Tensor<float> ks = gaussian_kernels(16, 7, 0.5, 99);
  Var<float> batch(ks.reshaped({16, 1, 7, 7}));

  RngStream a(42), b(42), c(43);
  auto e1 = vae_elbo(batch, model, a);
  auto e2 = vae_elbo(batch, model, b);
  auto e3 = vae_elbo(batch, model, c);
  CHECK(std::isfinite(static_cast<double>(e1.total.item())));
  CHECK(e1.total.item() == e2.total.item());
  CHECK(e1.total.item() != e3.total.item());
  CHECK(e1.kl >= 0.0);
  CHECK(e1.total.item() == doctest::Approx(e1.recon - e1.kl).epsilon(1e-4));

  auto params = model.params();
  for (auto& p : params) p.zero_grad();
  backward(neg(e1.total));
  std::size_t nonzero = 0;
  for (auto& p : params) {
    REQUIRE(p.node()->grad.numel() == p.value().numel());
    for (std::int64_t i = 0; i < p.node()->grad.numel(); ++i)
      if (p.node()->grad[i] != 0.0f) {
        ++nonzero;
        break;
      }
  }
  CHECK(nonzero == params.size());
}

TEST_CASE("training on unit Gaussian noise reaches the analytic log-density") {
  // For i.i.d. N(0,1) pixels the best attainable per-kernel ELBO equals the
  // true log-density, -49/2 * (log 2pi + 1) ~ -69.53 nats; the bound must
  // approach it from below.
  const double truth = -24.5 * (kLog2PiD + 1.0);
  Tensor<float> ks = gaussian_kernels(512, 7, 1.0, 2024);
  VaeTrainConfig cfg;
  cfg.epochs = 30;
  cfg.batch_size = 128;
  cfg.lr = 1e-3;
  cfg.seed = 17;
  auto res = train_vae(ks, 7, 2, cfg);
  REQUIRE(res.curve.size() == 30);
  CHECK(res.best_val_elbo > truth - 3.0);
  CHECK(res.best_val_elbo < truth + 1.5);
  CHECK(res.best_val_elbo >= res.curve.front().val_elbo);
}

TEST_CASE("training aborts with a numerical error on corrupt data") {
  Tensor<float> ks = gaussian_kernels(64, 7, 1.0, 5);
  ks[10] = std::numeric_limits<float>::quiet_NaN();
  VaeTrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 64;
  cfg.seed = 1;
  CHECK_THROWS_AS(train_vae(ks, 7, 2, cfg), NumericalError);
}

TEST_CASE("prior sampler: shapes, determinism, and sampling noise") {
  RngStream init(31);
  auto model = build_vae<float>(5, 4, init);
  RngStream s1(77), s2(77);
  Tensor<float> a = sample_kernels(*model.decoder, 32, s1);
  Tensor<float> b = sample_kernels(*model.decoder, 32, s2);
  CHECK(a.shape() == Shape{32, 5, 5});
  CHECK(a.all_finite());
  for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);

  RngStream s3(77);
  Tensor<float> means = sample_kernels(*model.decoder, 32, s3, /*means_only=*/true);
  double diff = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i)
    diff += std::abs(static_cast<double>(a[i] - means[i]));
  CHECK(diff > 0.0);  // observation noise is present in samples
  CHECK(sample_kernels(*model.decoder, 0, s3).numel() == 0);
}

TEST_CASE("embeddings are the encoder means and are deterministic") {
  RngStream init(13);
  auto model = build_vae<float>(7, 2, init);
  Tensor<float> ks = gaussian_kernels(24, 7, 0.7, 8);
  Tensor<float> e1 = embed_kernels(*model.encoder, ks);
  Tensor<float> e2 = embed_kernels(*model.encoder, ks);
  CHECK(e1.shape() == Shape{24, 2});
  for (std::int64_t i = 0; i < e1.numel(); ++i) CHECK(e1[i] == e2[i]);

  Var<float> x(ks.reshaped({24, 1, 7, 7}));
  auto [mu, lv] = model.encoder->forward(x);
  for (std::int64_t i = 0; i < e1.numel(); ++i) CHECK(e1[i] == mu.value()[i]);
}

TEST_CASE("VAE checkpoint round-trip reproduces sampler output bit for bit") {
  RngStream init(41);
  auto model = build_vae<float>(7, 2, init);
  Checkpoint ckpt;
  vae_to_checkpoint(model, ckpt);
  const std::string path = "vae_roundtrip.dwpc";
  save_checkpoint(ckpt, path);
  Checkpoint back = load_checkpoint(path);
  auto model2 = vae_from_checkpoint<float>(back, 7, 2);
  std::remove(path.c_str());

  RngStream s1(5), s2(5);
  Tensor<float> a = sample_kernels(*model.decoder, 16, s1);
  Tensor<float> b = sample_kernels(*model2.decoder, 16, s2);
  for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
  CHECK(back.metadata_json.find("\"ksize\":7") != std::string::npos);
}

TEST_CASE("freezing the decoder stops gradient flow into it") {
  RngStream init(3);
  auto model = build_vae<float>(7, 2, init);
  model.freeze_decoder();
  Tensor<float> ks = gaussian_kernels(8, 7, 1.0, 2);
  Var<float> batch(ks.reshaped({8, 1, 7, 7}));
  RngStream rng(4);
  auto e = vae_elbo(batch, model, rng);
  for (auto& p : model.params()) p.zero_grad();
  backward(neg(e.total));
  for (auto& p : model.decoder->params()) CHECK(p.node()->grad.numel() == 0);
  bool enc_has_grad = false;
  for (auto& p : model.encoder->params())
    if (p.node()->grad.numel() > 0) enc_has_grad = true;
  CHECK(enc_has_grad);
}

namespace {
// Minimal 1-d linear-Gaussian VAE used as a conjugate oracle: every quantity
// (ELBO, marginal likelihood) has a closed form we can compare against.
struct Linear1dVae {
  Var<double> a, be, re;  // encoder: q(z|x) = N(a*x + be, exp(re))
  Var<double> c, d, rd;   // decoder: p(x|z) = N(c*z + d, exp(rd))
  Var<double> zero_w;     // frozen zero weight used to broadcast scalars

  explicit Linear1dVae(RngStream& rng)
      : a(Tensor<double>::from({1, 1}, {0.5 * rng.next_normal()}), true),
        be(Tensor<double>::from({1}, {0.0}), true),
        re(Tensor<double>::from({1}, {0.0}), true),
        c(Tensor<double>::from({1, 1}, {0.5 * rng.next_normal()}), true),
        d(Tensor<double>::from({1}, {0.0}), true),
        rd(Tensor<double>::from({1}, {0.0}), true),
        zero_w(Tensor<double>::zeros({1, 1}), false) {}

  std::vector<Var<double>> params() { return {a, be, re, c, d, rd}; }

  // One-sample reparametrized ELBO estimate, averaged over the batch.
  Var<double> elbo(const Var<double>& x, RngStream& rng) {
    const std::int64_t n = x.value().dim(0);
    Var<double> mu_z = linear(x, a, be);
    Var<double> lv_z = linear(x, zero_w, re);
    Var<double> eps(Tensor<double>::randn({n, 1}, rng));
    Var<double> z = add(mu_z, mul(exp_v(affine(lv_z, 0.5, 0.0)), eps));
    Var<double> mu_x = linear(z, c, d);
    Var<double> lv_x = linear(x, zero_w, rd);
    Var<double> total = sub(gaussian_log_prob_sum(x, mu_x, lv_x),
                            kl_q_standard_normal_terms(mu_z, lv_z));
    return affine(total, 1.0 / static_cast<double>(n), 0.0);
  }

  // Closed-form per-batch ELBO (reconstruction expectation is analytic).
  double elbo_exact(const Tensor<double>& x) const {
    const double av = a.value()[0], bev = be.value()[0], rev = re.value()[0];
    const double cv = c.value()[0], dv = d.value()[0], rdv = rd.value()[0];
    double total = 0.0;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      const double mz = av * x[i] + bev, vz = std::exp(rev);
      const double resid = x[i] - cv * mz - dv;
      const double recon =
          -0.5 * (kLog2PiD + rdv + (resid * resid + cv * cv * vz) * std::exp(-rdv));
      const double kl = 0.5 * (vz + mz * mz - 1.0 - rev);
      total += recon - kl;
    }
    return total / static_cast<double>(x.numel());
  }

  // Exact marginal log-likelihood: x ~ N(d, c^2 + exp(rd)).
  double marginal_loglik(const Tensor<double>& x) const {
    const double cv = c.value()[0], dv = d.value()[0];
    const double var = cv * cv + std::exp(rd.value()[0]);
    double total = 0.0;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      const double r = x[i] - dv;
      total += -0.5 * (kLog2PiD + std::log(var) + r * r / var);
    }
    return total / static_cast<double>(x.numel());
  }
};
}  // namespace

TEST_CASE("linear-Gaussian VAE: trained ELBO reaches the analytic log-likelihood") {
  const std::int64_t n = 4000;
  RngStream data_rng(55);
  Tensor<double> x({n, 1});
  double mean = 0.0, var = 0.0;
  for (std::int64_t i = 0; i < n; ++i) x[i] = 0.5 + 0.8 * data_rng.next_normal();
  for (std::int64_t i = 0; i < n; ++i) mean += x[i];
  mean /= static_cast<double>(n);
  for (std::int64_t i = 0; i < n; ++i) var += (x[i] - mean) * (x[i] - mean);
  var /= static_cast<double>(n);
  // Best attainable average log-likelihood for any Gaussian family fit.
  const double best = -0.5 * (kLog2PiD + std::log(var) + 1.0);

  RngStream rng(7);
  Linear1dVae m(rng);
  auto params = m.params();
  Adam<double> opt(AdamConfig{.lr = 0.01});
  Var<double> xv(x);
  for (int step = 0; step < 2500; ++step) {
    // The single-sample estimate is a lower bound in expectation; the exact
    // ELBO must never exceed the exact marginal likelihood.
    if (step % 250 == 0)
      CHECK(m.elbo_exact(x) <= m.marginal_loglik(x) + 1e-6);
    opt.zero_grad(params);
    backward(neg(m.elbo(xv, rng)));
    opt.step(params);
  }
  const double final_elbo = m.elbo_exact(x);
  CHECK(final_elbo <= m.marginal_loglik(x) + 1e-6);
  CHECK(std::abs(final_elbo - best) < 0.1);
}

namespace {
// Known-weights linear decoder: w = A z + b + diag(exp(lv/2)) eps over a 2x2
// kernel, so the marginal covariance A A^T + diag(exp(lv)) is analytic.
struct LinearTestDecoder {
  using scalar_type = double;
  Tensor<double> A;   // (4, 3)
  Tensor<double> b;   // (4)
  Tensor<double> lv;  // (4)

  std::int64_t ksize() const { return 2; }
  std::int64_t z_dim() const { return 3; }

  std::pair<Var<double>, Var<double>> forward(const Var<double>& z) const {
    const std::int64_t n = z.value().dim(0);
    Tensor<double> m({n, 1, 2, 2}), l({n, 1, 2, 2});
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t p = 0; p < 4; ++p) {
        double acc = b[p];
        for (std::int64_t k = 0; k < 3; ++k) acc += A[p * 3 + k] * z.value()[i * 3 + k];
        m[i * 4 + p] = acc;
        l[i * 4 + p] = lv[p];
      }
    return {Var<double>(std::move(m)), Var<double>(std::move(l))};
  }
};
}  // namespace

TEST_CASE("sampler covariance matches the analytic marginal of a linear decoder") {
  LinearTestDecoder dec;
  RngStream wrng(9);
  dec.A = Tensor<double>::randn({4, 3}, wrng);
  dec.b = Tensor<double>::from({4}, {0.1, -0.2, 0.3, 0.0});
  dec.lv = Tensor<double>::from({4}, {-2.0, -1.5, -2.5, -1.0});
  // Analytic covariance of w.
  double want[4][4];
  for (int p = 0; p < 4; ++p)
    for (int q = 0; q < 4; ++q) {
      double acc = 0.0;
      for (int k = 0; k < 3; ++k) acc += dec.A[p * 3 + k] * dec.A[q * 3 + k];
      if (p == q) acc += std::exp(dec.lv[p]);
      want[p][q] = acc;
    }

  const std::int64_t n = 200000;
  RngStream srng(123);
  Tensor<double> s = sample_kernels(dec, n, srng);
  double mu[4] = {0, 0, 0, 0};
  for (std::int64_t i = 0; i < n; ++i)
    for (int p = 0; p < 4; ++p) mu[p] += s[i * 4 + p];
  for (int p = 0; p < 4; ++p) mu[p] /= static_cast<double>(n);
  for (int p = 0; p < 4; ++p) CHECK(std::abs(mu[p] - dec.b[p]) < 0.02);
  for (int p = 0; p < 4; ++p)
    for (int q = 0; q < 4; ++q) {
      double acc = 0.0;
      for (std::int64_t i = 0; i < n; ++i)
        acc += (s[i * 4 + p] - mu[p]) * (s[i * 4 + q] - mu[q]);
      acc /= static_cast<double>(n);
      CHECK(std::abs(acc - want[p][q]) < 0.05 * std::max(1.0, std::abs(want[p][q])));
    }
}

TEST_CASE("training smoke run and seed determinism") {
  RngStream g(77);
  Tensor<float> ks({200, 7, 7});
  for (std::int64_t i = 0; i < ks.numel(); ++i)
    ks[i] = static_cast<float>(0.4 * g.next_normal());
  VaeTrainConfig cfg;
  cfg.epochs = 10;
  cfg.batch_size = 64;
  cfg.seed = 3;
  auto r1 = train_vae(ks, 7, 2, cfg);
  CHECK(r1.curve.back().train_elbo > r1.curve.front().train_elbo);

  auto r2 = train_vae(ks, 7, 2, cfg);
  auto p1 = r1.model.params();
  auto p2 = r2.model.params();
  REQUIRE(p1.size() == p2.size());
  for (std::size_t i = 0; i < p1.size(); ++i)
    for (std::int64_t j = 0; j < p1[i].value().numel(); ++j)
      CHECK(p1[i].value()[j] == p2[i].value()[j]);
}

TEST_CASE("decoder samples of a trained mixture model recover the mixture mean") {
  // Kernels drawn from an even two-component mixture with means +0.3 and -0.3.
  RngStream g(2026);
  Tensor<float> ks({512, 7, 7});
  for (std::int64_t i = 0; i < 512; ++i) {
    const double center = (i % 2 == 0) ? 0.3 : -0.3;
    for (std::int64_t j = 0; j < 49; ++j)
      ks[i * 49 + j] = static_cast<float>(center + 0.1 * g.next_normal());
  }
  VaeTrainConfig cfg;
  cfg.epochs = 100;
  cfg.batch_size = 64;
  cfg.seed = 12;
  auto res = train_vae(ks, 7, 2, cfg);
  RngStream srng(4);
  Tensor<float> s = sample_kernels(*res.model.decoder, 4000, srng);
  double mean = 0.0;
  for (std::int64_t i = 0; i < s.numel(); ++i) mean += s[i];
  mean /= static_cast<double>(s.numel());
  CHECK(std::abs(mean - 0.0) < 0.05);
}

TEST_CASE("embeddings separate two well-spread kernel clusters") {
  RngStream g(31);
  Tensor<float> ks({256, 7, 7});
  for (std::int64_t i = 0; i < 256; ++i) {
    const double center = (i < 128) ? 0.5 : -0.5;
    for (std::int64_t j = 0; j < 49; ++j)
      ks[i * 49 + j] = static_cast<float>(center + 0.05 * g.next_normal());
  }
  VaeTrainConfig cfg;
  cfg.epochs = 15;
  cfg.batch_size = 128;
  cfg.seed = 6;
  auto res = train_vae(ks, 7, 2, cfg);
  Tensor<float> e = embed_kernels(*res.model.encoder, ks);
  double c0[2] = {0, 0}, c1[2] = {0, 0};
  for (std::int64_t i = 0; i < 256; ++i)
    for (int d = 0; d < 2; ++d)
      (i < 128 ? c0[d] : c1[d]) += e[i * 2 + d] / 128.0;
  double between = std::hypot(c0[0] - c1[0], c0[1] - c1[1]);
  double within = 0.0;
  for (std::int64_t i = 0; i < 256; ++i) {
    const double* c = i < 128 ? c0 : c1;
    within += std::hypot(e[i * 2] - c[0], e[i * 2 + 1] - c[1]) / 256.0;
  }
  CHECK(between > within);
}

TEST_CASE("decoder stays finite for any latent with norm up to 10") {
  RngStream init(47);
  auto model = build_vae<float>(7, 2, init);
  NoGradGuard ng;
  Tensor<float> z({8, 2});
  z[0] = 10.0f;  // axis-aligned and diagonal extremes, rest zero
  z[3] = -10.0f;
  z[4] = 7.07f;
  z[5] = 7.07f;
  z[6] = -7.07f;
  z[7] = 7.07f;
  auto [m, lv] = model.decoder->forward(Var<float>(z));
  CHECK(m.value().all_finite());
  CHECK(lv.value().all_finite());
  for (std::int64_t i = 0; i < lv.value().numel(); ++i) {
    CHECK(lv.value()[i] >= -7.0f);
    CHECK(lv.value()[i] <= 7.0f);
  }
}
