#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dwp/autodiff.hpp"
#include "dwp/tensor.hpp"

namespace dwp {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Linear learning rate decay from lr to 0 over this many steps; 0 disables.
  std::int64_t decay_horizon = 0;
};

// Adam with bias correction. Moment tensors are created lazily to match the
// parameter shapes handed to step().
template <class T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  std::int64_t step_count() const { return step_; }

  double current_lr() const {
    if (cfg_.decay_horizon <= 0) return cfg_.lr;
    double f = 1.0 - static_cast<double>(step_) / static_cast<double>(cfg_.decay_horizon);
    return cfg_.lr * (f > 0.0 ? f : 0.0);
  }

  void step(std::vector<Var<T>>& params) {
    if (m_.empty()) {
      for (auto& p : params) {
        m_.push_back(Tensor<T>::zeros(p.value().shape()));
        v_.push_back(Tensor<T>::zeros(p.value().shape()));
      }
    }
    const double lr = current_lr();
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      auto& p = params[pi];
      if (!p.has_grad()) continue;
      auto& g = p.grad();
      auto& m = m_[pi];
      auto& v = v_[pi];
      for (std::int64_t i = 0; i < g.numel(); ++i) {
        const double gi = static_cast<double>(g[i]);
        m[i] = static_cast<T>(cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi);
        v[i] = static_cast<T>(cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi);
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p.value()[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
  }

  void zero_grad(std::vector<Var<T>>& params) {
    for (auto& p : params) p.zero_grad();
  }

 private:
  AdamConfig cfg_;
  std::int64_t step_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

}  // namespace dwp
