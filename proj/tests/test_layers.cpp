#include <cmath>

#include "doctest.h"
#include "dwp/layers.hpp"

using namespace dwp;

namespace {
constexpr double kLog2PiD = 1.8378770664093454835606594728112;
}

TEST_CASE("weight sampler: vanishing variance, mean, and Monte Carlo centering") {
  RngStream rng(1);
  Var<double> theta(Tensor<double>::from({2, 2}, {0.3, -0.7, 1.2, 0.0}));
  Var<double> rho_tiny(Tensor<double>::full({2, 2}, -20.0));
  Var<double> w = sample_weights(theta, rho_tiny, rng);
  for (std::int64_t i = 0; i < 4; ++i)
    CHECK(std::abs(w.value()[i] - theta.value()[i]) < 1e-4);

  // sigma = 0.5; sample mean of W - theta over 1e5 draws within 4 SE of 0.
  const double sigma = 0.5;
  Var<double> th1(Tensor<double>::scalar(0.3));
  Var<double> rho1(Tensor<double>::scalar(2.0 * std::log(sigma)));
  const std::int64_t n = 100000;
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i)
    acc += sample_weights(th1, rho1, rng).value()[0] - 0.3;
  const double se = sigma / std::sqrt(static_cast<double>(n));
  CHECK(std::abs(acc / static_cast<double>(n)) < 4.0 * se);
}

TEST_CASE("entropy: closed form, monotonicity, and Monte Carlo agreement") {
  Var<double> r0(Tensor<double>::scalar(0.0));
  CHECK(entropy_q(r0).item() == doctest::Approx(0.5 * (std::log(2 * M_PI) + 1.0)).epsilon(1e-9));
  Var<double> r2(Tensor<double>::scalar(2.0 * std::log(2.0)));
  CHECK(entropy_q(r2).item() ==
        doctest::Approx(0.5 * (std::log(2 * M_PI) + 1.0) + std::log(2.0)).epsilon(1e-9));

  // Strictly increasing in every coordinate.
  Tensor<double> rv = Tensor<double>::from({3}, {-1.0, 0.5, 2.0});
  const double base = entropy_q(Var<double>(rv)).item();
  for (std::int64_t i = 0; i < 3; ++i) {
    Tensor<double> bumped = rv;
    bumped[i] += 0.1;
    CHECK(entropy_q(Var<double>(bumped)).item() > base);
  }

  // -E[log q] over 1e5 samples matches H within 3 SE. For N(mu, s^2),
  // -log q(w) = 0.5*(log 2pi s^2 + z^2) with z standard; var = 0.5.
  RngStream rng(9);
  const double mu = -0.4, rho = 0.8, s = std::exp(rho / 2);
  const std::int64_t n = 100000;
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double w = mu + s * rng.next_normal();
    acc += 0.5 * (kLog2PiD + rho + (w - mu) * (w - mu) / (s * s));
  }
  const double h = entropy_q(Var<double>(Tensor<double>::scalar(rho))).item();
  const double se = std::sqrt(0.5 / static_cast<double>(n));
  CHECK(std::abs(acc / static_cast<double>(n) - h) < 3.0 * se);
}

TEST_CASE("local reparametrization: deterministic limit and zero input") {
  RngStream rng(3);
  BayesConv2dLayer<double> layer(1, 2, 3, 1, 0, rng);
  for (std::int64_t i = 0; i < layer.rho.value().numel(); ++i) layer.rho.value()[i] = -20.0;

  Var<double> x(Tensor<double>::randn({1, 1, 6, 6}, rng));
  ForwardCtx<double> det{ForwardMode::deterministic, nullptr};
  RngStream eps(5);
  ForwardCtx<double> lr{ForwardMode::local_reparam, &eps};
  Var<double> a = layer.forward(x, det);
  Var<double> b = layer.forward(x, lr);
  for (std::int64_t i = 0; i < a.value().numel(); ++i)
    CHECK(std::abs(a.value()[i] - b.value()[i]) < 1e-3);

  // Zero input: mean and variance both vanish, output is eps * sqrt(1e-8).
  for (std::int64_t i = 0; i < layer.rho.value().numel(); ++i) layer.rho.value()[i] = 1.0;
  Var<double> z(Tensor<double>::zeros({1, 1, 6, 6}));
  RngStream eps2(7);
  ForwardCtx<double> lr2{ForwardMode::local_reparam, &eps2};
  Var<double> out = layer.forward(z, lr2);
  RngStream eps2_replay(7);
  Tensor<double> noise = Tensor<double>::randn(out.value().shape(), eps2_replay);
  for (std::int64_t i = 0; i < out.value().numel(); ++i)
    CHECK(out.value()[i] == doctest::Approx(noise[i] * 1e-4).epsilon(1e-12));
}

TEST_CASE("local reparametrization matches the weight-space sampler in distribution") {
  RngStream rng(17);
  BayesConv2dLayer<double> layer(1, 1, 3, 1, 0, rng);
  for (std::int64_t i = 0; i < layer.rho.value().numel(); ++i)
    layer.rho.value()[i] = -2.0 + 0.2 * static_cast<double>(i % 5);
  Var<double> x(Tensor<double>::randn({1, 1, 4, 4}, rng));

  // Analytic per-location moments.
  ForwardCtx<double> det{ForwardMode::deterministic, nullptr};
  NoGradGuard ng;
  Tensor<double> m = layer.forward(x, det).value();
  Tensor<double> x2 = x.value();
  for (std::int64_t i = 0; i < x2.numel(); ++i) x2[i] *= x2[i];
  Tensor<double> expr = layer.rho.value();
  for (std::int64_t i = 0; i < expr.numel(); ++i) expr[i] = std::exp(expr[i]);
  Tensor<double> v = conv::forward(x2, expr, layer.stride, layer.pad);

  const std::int64_t draws = 10000;
  const std::int64_t cells = m.numel();
  std::vector<double> mu_a(cells, 0), m2_a(cells, 0), mu_b(cells, 0), m2_b(cells, 0);
  RngStream ra(100), rb(200);
  for (std::int64_t t = 0; t < draws; ++t) {
    ForwardCtx<double> ca{ForwardMode::local_reparam, &ra};
    ForwardCtx<double> cb{ForwardMode::weight_sample, &rb};
    Tensor<double> oa = layer.forward(x, ca).value();
    Tensor<double> ob = layer.forward(x, cb).value();
    for (std::int64_t i = 0; i < cells; ++i) {
      mu_a[static_cast<std::size_t>(i)] += oa[i];
      m2_a[static_cast<std::size_t>(i)] += oa[i] * oa[i];
      mu_b[static_cast<std::size_t>(i)] += ob[i];
      m2_b[static_cast<std::size_t>(i)] += ob[i] * ob[i];
    }
  }
  for (std::int64_t i = 0; i < cells; ++i) {
    const auto s = static_cast<std::size_t>(i);
    const double n = static_cast<double>(draws);
    const double ma = mu_a[s] / n, mb = mu_b[s] / n;
    const double va = m2_a[s] / n - ma * ma, vb = m2_b[s] / n - mb * mb;
    const double sd = std::sqrt(v[i]);
    const double se_mean = sd / std::sqrt(n);
    const double se_var = v[i] * std::sqrt(2.0 / n);
    CHECK(std::abs(ma - m[i]) < 5.0 * se_mean);
    CHECK(std::abs(mb - m[i]) < 5.0 * se_mean);
    CHECK(std::abs(va - v[i]) < 5.0 * se_var);
    CHECK(std::abs(vb - v[i]) < 5.0 * se_var);
  }
}

TEST_CASE("network construction: parameter counts and width scaling") {
  RngStream rng(21);
  auto det = build_network<float>(mnist_classifier_spec(), NetworkMode::deterministic, rng);
  CHECK(det.param_count() == 115658);

  auto bay = build_network<float>(mnist_classifier_spec(), NetworkMode::bayesian, rng);
  // Variational rho doubles each conv kernel tensor; biases and the linear
  // layer stay point estimates.
  const std::int64_t conv_kernel_params = 32 * 1 * 7 * 7 + 128 * 32 * 5 * 5;
  CHECK(bay.param_count() == 115658 + conv_kernel_params);
  CHECK(bay.bayes_layers().size() == 2);

  auto quarter = build_network<float>(mnist_classifier_spec(0.25), NetworkMode::deterministic, rng);
  auto convs = quarter.conv_layers();
  REQUIRE(convs.size() == 2);
  CHECK(convs[0]->weight.value().dim(0) == 8);
  CHECK(convs[1]->weight.value().dim(0) == 32);

  NetworkSpec s;
  s.width_scale = 1.0 / 64.0;
  CHECK(s.scaled_filters(32) == 1);  // floor at one filter
}

TEST_CASE("bayesian network at rho=-20 reproduces deterministic logits") {
  RngStream rng(33);
  auto det = build_network<double>(mnist_classifier_spec(0.25), NetworkMode::deterministic, rng);
  RngStream rng2(99);
  auto bay = build_network<double>(mnist_classifier_spec(0.25), NetworkMode::bayesian, rng2);

  // Copy deterministic weights into the posterior means.
  auto dp = det.named_params();
  auto bp = bay.named_params();
  REQUIRE(dp.size() == 6);
  REQUIRE(bp.size() == 8);
  for (auto& np : bp) {
    std::string want = np.name;
    auto pos = want.find(".theta");
    if (pos != std::string::npos) want.replace(pos, 6, ".weight");
    if (want.find(".rho") != std::string::npos) continue;
    for (auto& d : dp)
      if (d.name == want) np.var.value() = d.var.value();
  }
  for (auto* b : bay.bayes_layers())
    for (std::int64_t i = 0; i < b->rho.value().numel(); ++i) b->rho.value()[i] = -20.0;

  RngStream data(5);
  Var<double> x(Tensor<double>::randn({2, 1, 28, 28}, data));
  ForwardCtx<double> dctx{ForwardMode::deterministic, nullptr};
  RngStream eps(6);
  ForwardCtx<double> sctx{ForwardMode::weight_sample, &eps};
  Tensor<double> a = det.forward(x, dctx).value();
  Tensor<double> b = bay.forward(x, sctx).value();
  REQUIRE(a.numel() == b.numel());
  for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a[i] - b[i]) < 1e-3);
}

TEST_CASE("rho is clamped to its range after an optimizer step") {
  RngStream rng(2);
  BayesConv2dLayer<float> layer(1, 1, 3, 1, 0, rng);
  layer.rho.value()[0] = -50.0f;
  layer.rho.value()[1] = 50.0f;
  layer.after_step();
  CHECK(layer.rho.value()[0] == -20.0f);
  CHECK(layer.rho.value()[1] == 5.0f);
  for (std::int64_t i = 2; i < layer.rho.value().numel(); ++i)
    CHECK(layer.rho.value()[i] == -6.0f);  // untouched values keep their init
}

TEST_CASE("network rejects inconsistent layer chains") {
  RngStream rng(4);
  NetworkSpec s;
  s.layers = {LayerSpec::flat(), LayerSpec::conv2d(4, 3)};
  CHECK_THROWS_AS(build_network<float>(s, NetworkMode::deterministic, rng), ShapeError);
}
