#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <stdexcept>
#include <vector>

#include "dwp/autodiff.hpp"

namespace dwp {

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// KL(q(w|theta,rho) || N(0, I)) summed over elements:
// sum 0.5*(exp(rho) + theta^2 - 1 - rho).
template <class T>
Var<T> kl_q_standard_normal(const Var<T>& theta, const Var<T>& rho) {
  require_same_shape("kl_q_standard_normal", theta.value(), rho.value());
  Var<T> t = add(affine(exp_v(rho), T(0.5), T(-0.5)), affine(mul(theta, theta), T(0.5), T(0)));
  return sum(add(t, affine(rho, T(-0.5), T(0))));
}

// log alpha = rho - log(max(theta^2, guard^2)); custom op so the guard has a
// well-defined gradient. Logs once per call when the guard fires.
template <class T>
Var<T> log_alpha(const Var<T>& theta, const Var<T>& rho, T guard = T(1e-8)) {
  require_same_shape("log_alpha", theta.value(), rho.value());
  Tensor<T> v = rho.value();
  std::int64_t clamped = 0;
  for (std::int64_t i = 0; i < v.numel(); ++i) {
    T a = std::abs(theta.value()[i]);
    if (a < guard) {
      a = guard;
      ++clamped;
    }
    v[i] -= T(2) * std::log(a);
  }
  if (clamped > 0)
    std::fprintf(stderr, "[dwp] log_alpha: clamped %lld near-zero theta values\n",
                 static_cast<long long>(clamped));
  return make_op<T>("log_alpha", std::move(v), {theta, rho}, [guard](Node<T>& n) {
    if (n.parents[0]->requires_grad) {
      auto& g = n.parents[0]->ensure_grad();
      auto& tv = n.parents[0]->value;
      for (std::int64_t i = 0; i < g.numel(); ++i) {
        T t = tv[i];
        if (std::abs(t) < guard) t = t >= T(0) ? guard : -guard;
        g[i] += n.grad[i] * (T(-2) / t);
      }
    }
    if (n.parents[1]->requires_grad) detail::accumulate(n.parents[1]->ensure_grad(), n.grad);
  });
}

// Sigmoid-polynomial approximation of KL(q || log-uniform), summed over
// elements; constants from the variational-dropout literature. Additive
// constant fixed so KL -> 0 as alpha -> inf.
template <class T>
Var<T> kl_q_log_uniform_approx(const Var<T>& theta, const Var<T>& rho) {
  constexpr double k1 = 0.63576, k2 = 1.87320, k3 = 1.48695;
  Var<T> la = log_alpha(theta, rho);
  Var<T> s = sigmoid_v(affine(la, static_cast<T>(k3), static_cast<T>(k2)));
  Var<T> t = add(affine(s, static_cast<T>(-k1), static_cast<T>(k1)),
                 affine(softplus_v(affine(la, T(-1), T(0))), T(0.5), T(0)));
  return sum(t);
}

// ---------------------------------------------------------------------------
// Multivariate Gaussian baseline prior (closed-form ML fit over kernels)
// ---------------------------------------------------------------------------

struct GaussianMlPrior {
  std::int64_t dim = 0;           // H*W
  std::vector<double> mu;         // dim
  std::vector<double> cov;        // dim x dim, row-major (after jitter)
  std::vector<double> chol;       // lower-triangular Cholesky factor
  std::vector<double> inv;        // cov^-1
  double logdet = 0.0;
  double jitter = 0.0;
};

// Lower-triangular Cholesky; throws if the matrix is not positive definite.
inline std::vector<double> cholesky(const std::vector<double>& a, std::int64_t d) {
  std::vector<double> l(static_cast<std::size_t>(d * d), 0.0);
  for (std::int64_t i = 0; i < d; ++i) {
    for (std::int64_t j = 0; j <= i; ++j) {
      double s = a[i * d + j];
      for (std::int64_t k = 0; k < j; ++k) s -= l[i * d + k] * l[j * d + k];
      if (i == j) {
        if (s <= 0.0) throw NumericalError("cholesky: matrix not positive definite");
        l[i * d + i] = std::sqrt(s);
      } else {
        l[i * d + j] = s / l[j * d + j];
      }
    }
  }
  return l;
}

inline std::vector<double> chol_inverse(const std::vector<double>& l, std::int64_t d) {
  // inv = L^-T L^-1 computed column by column via two triangular solves.
  std::vector<double> inv(static_cast<std::size_t>(d * d));
  std::vector<double> y(static_cast<std::size_t>(d));
  for (std::int64_t c = 0; c < d; ++c) {
    for (std::int64_t i = 0; i < d; ++i) {
      double s = (i == c) ? 1.0 : 0.0;
      for (std::int64_t k = 0; k < i; ++k) s -= l[i * d + k] * y[k];
      y[i] = s / l[i * d + i];
    }
    for (std::int64_t i = d - 1; i >= 0; --i) {
      double s = y[i];
      for (std::int64_t k = i + 1; k < d; ++k) s -= l[k * d + i] * inv[k * d + c];
      inv[i * d + c] = s / l[i * d + i];
    }
  }
  return inv;
}

// Closed-form ML fit over flattened kernels: mu = sample mean, Sigma = biased
// sample covariance + jitter*I with jitter = 1e-6 * trace / dim.
template <class T>
GaussianMlPrior fit_gaussian_ml(const Tensor<T>& kernels) {
  if (kernels.rank() != 3) throw ShapeError("fit_gaussian_ml: expected (N,H,W) kernels");
  const std::int64_t n = kernels.dim(0);
  const std::int64_t d = kernels.dim(1) * kernels.dim(2);
  if (n < 2) throw std::invalid_argument("fit_gaussian_ml: need at least 2 kernels");
  GaussianMlPrior p;
  p.dim = d;
  p.mu.assign(static_cast<std::size_t>(d), 0.0);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < d; ++j) p.mu[j] += static_cast<double>(kernels[i * d + j]);
  for (auto& m : p.mu) m /= static_cast<double>(n);
  p.cov.assign(static_cast<std::size_t>(d * d), 0.0);
  std::vector<double> c(static_cast<std::size_t>(d));
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < d; ++j) c[j] = static_cast<double>(kernels[i * d + j]) - p.mu[j];
    for (std::int64_t a = 0; a < d; ++a)
      for (std::int64_t b = 0; b < d; ++b) p.cov[a * d + b] += c[a] * c[b];
  }
  for (auto& v : p.cov) v /= static_cast<double>(n);
  double trace = 0.0;
  for (std::int64_t a = 0; a < d; ++a) trace += p.cov[a * d + a];
  p.jitter = 1e-6 * trace / static_cast<double>(d);
  if (p.jitter <= 0.0) p.jitter = 1e-12;
  for (std::int64_t a = 0; a < d; ++a) p.cov[a * d + a] += p.jitter;
  p.chol = cholesky(p.cov, d);
  p.inv = chol_inverse(p.chol, d);
  p.logdet = 0.0;
  for (std::int64_t a = 0; a < d; ++a) p.logdet += 2.0 * std::log(p.chol[a * d + a]);
  return p;
}

// Exact Gaussian log-density via Cholesky solve.
inline double log_prob_gaussian_full(const std::vector<double>& w, const GaussianMlPrior& p) {
  const std::int64_t d = p.dim;
  if (static_cast<std::int64_t>(w.size()) != d)
    throw ShapeError("log_prob_gaussian_full: dimension mismatch");
  std::vector<double> y(static_cast<std::size_t>(d));
  for (std::int64_t i = 0; i < d; ++i) {
    double s = w[i] - p.mu[i];
    for (std::int64_t k = 0; k < i; ++k) s -= p.chol[i * d + k] * y[k];
    y[i] = s / p.chol[i * d + i];
  }
  double quad = 0.0;
  for (auto v : y) quad += v * v;
  return -0.5 * (static_cast<double>(d) * kLog2Pi + p.logdet + quad);
}

// Closed-form KL(q || N(mu, Sigma)) for the diagonal Gaussian posterior of one
// Bayesian conv layer against a full-covariance prior, summed over kernels:
//   0.5 * [logdet Sigma - sum rho - d + sum_d inv_dd exp(rho_d)
//          + (theta_k - mu)^T Sigma^-1 (theta_k - mu)]  per kernel k.
// Differentiable in theta and rho; the prior is a fixed constant.
template <class T>
Var<T> kl_q_gaussian_ml(const Var<T>& theta, const Var<T>& rho,
                        std::shared_ptr<const GaussianMlPrior> prior) {
  require_same_shape("kl_q_gaussian_ml", theta.value(), rho.value());
  const std::int64_t d = prior->dim;
  const std::int64_t nk = theta.value().numel() / d;
  if (nk * d != theta.value().numel())
    throw ShapeError("kl_q_gaussian_ml: layer size not divisible by prior dim");
  double total = 0.0;
  std::vector<double> c(static_cast<std::size_t>(d)), sc(static_cast<std::size_t>(d));
  for (std::int64_t k = 0; k < nk; ++k) {
    double acc = prior->logdet - static_cast<double>(d);
    for (std::int64_t j = 0; j < d; ++j) {
      const double r = static_cast<double>(rho.value()[k * d + j]);
      acc += prior->inv[j * d + j] * std::exp(r) - r;
      c[j] = static_cast<double>(theta.value()[k * d + j]) - prior->mu[j];
    }
    for (std::int64_t a = 0; a < d; ++a) {
      double s = 0.0;
      for (std::int64_t b = 0; b < d; ++b) s += prior->inv[a * d + b] * c[b];
      acc += s * c[a];
    }
    total += 0.5 * acc;
  }
  return make_op<T>("kl_q_gaussian_ml", Tensor<T>::scalar(static_cast<T>(total)), {theta, rho},
                    [prior, d, nk](Node<T>& n) {
                      const T go = n.grad[0];
                      auto& tv = n.parents[0]->value;
                      auto& rv = n.parents[1]->value;
                      std::vector<double> c(static_cast<std::size_t>(d));
                      for (std::int64_t k = 0; k < nk; ++k) {
                        for (std::int64_t j = 0; j < d; ++j)
                          c[j] = static_cast<double>(tv[k * d + j]) - prior->mu[j];
                        if (n.parents[0]->requires_grad) {
                          auto& g = n.parents[0]->ensure_grad();
                          for (std::int64_t a = 0; a < d; ++a) {
                            double s = 0.0;
                            for (std::int64_t b = 0; b < d; ++b)
                              s += prior->inv[a * d + b] * c[b];
                            g[k * d + a] += go * static_cast<T>(s);
                          }
                        }
                        if (n.parents[1]->requires_grad) {
                          auto& g = n.parents[1]->ensure_grad();
                          for (std::int64_t j = 0; j < d; ++j)
                            g[k * d + j] +=
                                go * static_cast<T>(
                                         0.5 * (prior->inv[j * d + j] *
                                                    std::exp(static_cast<double>(rv[k * d + j])) -
                                                1.0));
                        }
                      }
                    });
}

}  // namespace dwp
