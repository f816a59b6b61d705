#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "dwp/autodiff.hpp"
#include "dwp/rng.hpp"

namespace dwp {

enum class ForwardMode {
  deterministic,   // plain point-estimate layers
  local_reparam,   // Bayesian conv samples pre-activations (training)
  mean,            // Bayesian conv at the posterior mean (eps = 0)
  weight_sample,   // Bayesian conv samples whole kernels
};

template <class T>
struct ForwardCtx {
  ForwardMode mode = ForwardMode::deterministic;
  RngStream* rng = nullptr;  // required for the stochastic modes
};

template <class T>
struct NamedParam {
  std::string name;
  Var<T> var;
};

inline double xavier_bound(std::int64_t fan_in, std::int64_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

template <class T>
Tensor<T> xavier_uniform(Shape shape, std::int64_t fan_in, std::int64_t fan_out,
                         RngStream& rng) {
  const double a = xavier_bound(fan_in, fan_out);
  Tensor<T> t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<T>(rng.next_uniform(-a, a));
  return t;
}

// W = theta + exp(rho/2) * eps with eps ~ N(0, I); differentiable in theta, rho.
template <class T>
Var<T> sample_weights(const Var<T>& theta, const Var<T>& rho, RngStream& rng) {
  require_same_shape("sample_weights", theta.value(), rho.value());
  Var<T> eps(Tensor<T>::randn(theta.value().shape(), rng));
  return add(theta, mul(exp_v(affine(rho, T(0.5), T(0))), eps));
}

// Entropy of the fully-factorized Gaussian posterior: sum of 0.5*(log 2pi + 1 + rho).
template <class T>
Var<T> entropy_q(const Var<T>& rho) {
  const T c = static_cast<T>(0.5 * (std::log(2.0 * 3.14159265358979323846) + 1.0));
  return affine(sum(rho), T(0.5), c * static_cast<T>(rho.value().numel()));
}

template <class T>
struct Layer {
  virtual ~Layer() = default;
  virtual Var<T> forward(const Var<T>& x, ForwardCtx<T>& ctx) = 0;
  virtual void collect(std::vector<NamedParam<T>>& out, const std::string& prefix) = 0;
  virtual void after_step() {}
};

template <class T>
struct Conv2dLayer final : Layer<T> {
  Var<T> weight, bias;
  std::int64_t stride, pad;

  Conv2dLayer(std::int64_t in_ch, std::int64_t out_ch, std::int64_t k, std::int64_t stride_,
              std::int64_t pad_, RngStream& rng)
      : stride(stride_), pad(pad_) {
    weight = Var<T>(xavier_uniform<T>({out_ch, in_ch, k, k}, in_ch * k * k, out_ch * k * k, rng),
                    true);
    bias = Var<T>(Tensor<T>::zeros({out_ch}), true);
  }

  Var<T> forward(const Var<T>& x, ForwardCtx<T>&) override {
    return add_channel_bias(conv2d(x, weight, stride, pad), bias);
  }

  void collect(std::vector<NamedParam<T>>& out, const std::string& prefix) override {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

// Bayesian convolution with fully-factorized Gaussian posterior in additive
// parameterization (free log-variance rho). Kernels are variational, the
// bias stays a point estimate.
template <class T>
struct BayesConv2dLayer final : Layer<T> {
  Var<T> theta, rho, bias;
  std::int64_t stride, pad;
  static constexpr double kRhoInit = -6.0;
  static constexpr double kRhoMin = -20.0;
  static constexpr double kRhoMax = 5.0;
  static constexpr double kVarFloor = 1e-8;

  BayesConv2dLayer(std::int64_t in_ch, std::int64_t out_ch, std::int64_t k, std::int64_t stride_,
                   std::int64_t pad_, RngStream& rng)
      : stride(stride_), pad(pad_) {
    theta = Var<T>(xavier_uniform<T>({out_ch, in_ch, k, k}, in_ch * k * k, out_ch * k * k, rng),
                   true);
    rho = Var<T>(Tensor<T>::full({out_ch, in_ch, k, k}, static_cast<T>(kRhoInit)), true);
    bias = Var<T>(Tensor<T>::zeros({out_ch}), true);
  }

  std::int64_t kernel_size() const { return theta.value().dim(2); }
  std::int64_t kernel_count() const { return theta.value().dim(0) * theta.value().dim(1); }

  Var<T> forward(const Var<T>& x, ForwardCtx<T>& ctx) override {
    switch (ctx.mode) {
      case ForwardMode::deterministic:
      case ForwardMode::mean:
        return add_channel_bias(conv2d(x, theta, stride, pad), bias);
      case ForwardMode::weight_sample: {
        Var<T> w = sample_weights(theta, rho, *ctx.rng);
        return add_channel_bias(conv2d(x, w, stride, pad), bias);
      }
      case ForwardMode::local_reparam: {
        Var<T> m = conv2d(x, theta, stride, pad);
        Var<T> x2 = mul(x, x);
        Var<T> v = conv2d(x2, exp_v(rho), stride, pad);
        Var<T> eps(Tensor<T>::randn(m.value().shape(), *ctx.rng));
        Var<T> std_ = sqrt_v(affine(v, T(1), static_cast<T>(kVarFloor)));
        return add_channel_bias(add(m, mul(std_, eps)), bias);
      }
    }
    throw std::logic_error("BayesConv2dLayer: bad mode");
  }

  void collect(std::vector<NamedParam<T>>& out, const std::string& prefix) override {
    out.push_back({prefix + ".theta", theta});
    out.push_back({prefix + ".rho", rho});
    out.push_back({prefix + ".bias", bias});
  }

  void after_step() override {
    auto& r = rho.value();
    for (std::int64_t i = 0; i < r.numel(); ++i) {
      if (r[i] < static_cast<T>(kRhoMin)) r[i] = static_cast<T>(kRhoMin);
      if (r[i] > static_cast<T>(kRhoMax)) r[i] = static_cast<T>(kRhoMax);
    }
  }
};

// Transposed convolution; weight layout (Cin, Cout, k, k).
template <class T>
struct ConvTranspose2dLayer final : Layer<T> {
  Var<T> weight, bias;
  std::int64_t stride, pad;

  ConvTranspose2dLayer(std::int64_t in_ch, std::int64_t out_ch, std::int64_t k,
                       std::int64_t stride_, std::int64_t pad_, RngStream& rng)
      : stride(stride_), pad(pad_) {
    weight = Var<T>(xavier_uniform<T>({in_ch, out_ch, k, k}, in_ch * k * k, out_ch * k * k, rng),
                    true);
    bias = Var<T>(Tensor<T>::zeros({out_ch}), true);
  }

  Var<T> forward(const Var<T>& x, ForwardCtx<T>&) override {
    return add_channel_bias(conv_transpose2d(x, weight, stride, pad), bias);
  }

  void collect(std::vector<NamedParam<T>>& out, const std::string& prefix) override {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

// Summed factorized-Gaussian log-density of x under (mean, logvar):
// sum of -0.5 * (log 2pi + logvar + (x - mean)^2 * exp(-logvar)).
template <class T>
Var<T> gaussian_log_prob_sum(const Var<T>& x, const Var<T>& mean, const Var<T>& logvar) {
  Var<T> d = sub(x, mean);
  Var<T> quad = mul(mul(d, d), exp_v(affine(logvar, T(-1), T(0))));
  const T c = static_cast<T>(-0.5 * 1.8378770664093454835606594728112);
  return sum(affine(add(logvar, quad), T(-0.5), c));
}

template <class T>
struct LinearLayer final : Layer<T> {
  Var<T> weight, bias;

  LinearLayer(std::int64_t in, std::int64_t out, RngStream& rng) {
    weight = Var<T>(xavier_uniform<T>({out, in}, in, out, rng), true);
    bias = Var<T>(Tensor<T>::zeros({out}), true);
  }

  Var<T> forward(const Var<T>& x, ForwardCtx<T>&) override { return linear(x, weight, bias); }

  void collect(std::vector<NamedParam<T>>& out, const std::string& prefix) override {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

template <class T>
struct MaxPoolLayer final : Layer<T> {
  Var<T> forward(const Var<T>& x, ForwardCtx<T>&) override { return maxpool2x2(x); }
  void collect(std::vector<NamedParam<T>>&, const std::string&) override {}
};

template <class T>
struct LeakyReluLayer final : Layer<T> {
  T slope;
  explicit LeakyReluLayer(T slope_) : slope(slope_) {}
  Var<T> forward(const Var<T>& x, ForwardCtx<T>&) override { return leaky_relu(x, slope); }
  void collect(std::vector<NamedParam<T>>&, const std::string&) override {}
};

template <class T>
struct EluLayer final : Layer<T> {
  Var<T> forward(const Var<T>& x, ForwardCtx<T>&) override { return elu(x); }
  void collect(std::vector<NamedParam<T>>&, const std::string&) override {}
};

template <class T>
struct FlattenLayer final : Layer<T> {
  Var<T> forward(const Var<T>& x, ForwardCtx<T>&) override {
    const auto& s = x.value().shape();
    std::int64_t rest = 1;
    for (std::size_t i = 1; i < s.size(); ++i) rest *= s[i];
    return reshape(x, {s[0], rest});
  }
  void collect(std::vector<NamedParam<T>>&, const std::string&) override {}
};

// ---------------------------------------------------------------------------
// Network specification and builder
// ---------------------------------------------------------------------------

struct LayerSpec {
  enum class Kind { conv, maxpool, leaky_relu, elu, flatten, linear };
  Kind kind;
  std::int64_t filters = 0;  // conv
  std::int64_t ksize = 0;    // conv
  std::int64_t stride = 1;
  std::int64_t pad = 0;
  std::int64_t units = 0;  // linear
  double slope = 0.01;

  static LayerSpec conv2d(std::int64_t filters, std::int64_t ksize, std::int64_t stride = 1,
                          std::int64_t pad = 0) {
    return {Kind::conv, filters, ksize, stride, pad, 0, 0.01};
  }
  static LayerSpec maxpool2() { return {Kind::maxpool, 0, 0, 2, 0, 0, 0.01}; }
  static LayerSpec lrelu(double slope = 0.01) {
    return {Kind::leaky_relu, 0, 0, 1, 0, 0, slope};
  }
  static LayerSpec elu_() { return {Kind::elu, 0, 0, 1, 0, 0, 0.01}; }
  static LayerSpec flat() { return {Kind::flatten, 0, 0, 1, 0, 0, 0.01}; }
  static LayerSpec linear_(std::int64_t units) {
    return {Kind::linear, 0, 0, 1, 0, units, 0.01};
  }
};

struct NetworkSpec {
  std::vector<LayerSpec> layers;
  // Input (C,H,W).
  std::int64_t in_channels = 1, in_h = 28, in_w = 28;
  // Width-scale factor applied to conv filter counts, rounded, floored at 1.
  double width_scale = 1.0;

  std::int64_t scaled_filters(std::int64_t f) const {
    auto s = static_cast<std::int64_t>(std::llround(width_scale * static_cast<double>(f)));
    return s < 1 ? 1 : s;
  }
};

// MNIST-scale classifier: conv 32@7x7, lrelu, maxpool, conv 128@5x5, lrelu,
// maxpool, flatten, linear 10.
inline NetworkSpec mnist_classifier_spec(double width_scale = 1.0) {
  NetworkSpec s;
  s.width_scale = width_scale;
  s.layers = {LayerSpec::conv2d(32, 7), LayerSpec::lrelu(),  LayerSpec::maxpool2(),
              LayerSpec::conv2d(128, 5), LayerSpec::lrelu(), LayerSpec::maxpool2(),
              LayerSpec::flat(),         LayerSpec::linear_(10)};
  return s;
}

// Source architecture: conv 256@7x7, lrelu, maxpool, conv 512@5x5, lrelu,
// maxpool, flatten, linear 10. Desk-scale runs use width_scale < 1.
inline NetworkSpec source_model_spec(double width_scale = 1.0) {
  NetworkSpec s;
  s.width_scale = width_scale;
  s.layers = {LayerSpec::conv2d(256, 7), LayerSpec::lrelu(),  LayerSpec::maxpool2(),
              LayerSpec::conv2d(512, 5), LayerSpec::lrelu(),  LayerSpec::maxpool2(),
              LayerSpec::flat(),         LayerSpec::linear_(10)};
  return s;
}

enum class NetworkMode { deterministic, bayesian };

template <class T>
class Network {
 public:
  Var<T> forward(const Var<T>& x, ForwardCtx<T> ctx) {
    Var<T> h = x;
    for (auto& l : layers_) h = l->forward(h, ctx);
    return h;
  }

  std::vector<NamedParam<T>> named_params() {
    std::vector<NamedParam<T>> out;
    for (std::size_t i = 0; i < layers_.size(); ++i)
      layers_[i]->collect(out, "l" + std::to_string(i));
    return out;
  }

  std::vector<Var<T>> params() {
    std::vector<Var<T>> out;
    for (auto& np : named_params()) out.push_back(np.var);
    return out;
  }

  std::int64_t param_count() {
    std::int64_t n = 0;
    for (auto& p : params()) n += p.value().numel();
    return n;
  }

  void after_step() {
    for (auto& l : layers_) l->after_step();
  }

  std::vector<BayesConv2dLayer<T>*> bayes_layers() {
    std::vector<BayesConv2dLayer<T>*> out;
    for (auto& l : layers_)
      if (auto* b = dynamic_cast<BayesConv2dLayer<T>*>(l.get())) out.push_back(b);
    return out;
  }

  std::vector<Conv2dLayer<T>*> conv_layers() {
    std::vector<Conv2dLayer<T>*> out;
    for (auto& l : layers_)
      if (auto* c = dynamic_cast<Conv2dLayer<T>*>(l.get())) out.push_back(c);
    return out;
  }

  void set_conv_trainable(bool trainable) {
    for (auto* c : conv_layers()) {
      c->weight.node()->requires_grad = trainable;
      c->bias.node()->requires_grad = trainable;
    }
  }

  std::vector<std::unique_ptr<Layer<T>>>& layers() { return layers_; }

  // Index (within forward order) of each conv-ish layer, for checkpoint names.
  std::vector<std::size_t> layer_indices() const {
    std::vector<std::size_t> idx(layers_.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return idx;
  }

 private:
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

template <class T>
Network<T> build_network(const NetworkSpec& spec, NetworkMode mode, RngStream& rng) {
  Network<T> net;
  std::int64_t c = spec.in_channels, h = spec.in_h, w = spec.in_w;
  bool flat = false;
  std::int64_t feat = 0;
  for (const auto& ls : spec.layers) {
    switch (ls.kind) {
      case LayerSpec::Kind::conv: {
        if (flat) throw ShapeError("build_network: conv after flatten");
        const std::int64_t f = spec.scaled_filters(ls.filters);
        if (mode == NetworkMode::bayesian)
          net.layers().push_back(
              std::make_unique<BayesConv2dLayer<T>>(c, f, ls.ksize, ls.stride, ls.pad, rng));
        else
          net.layers().push_back(
              std::make_unique<Conv2dLayer<T>>(c, f, ls.ksize, ls.stride, ls.pad, rng));
        h = kernels::conv_out_extent(h, ls.ksize, ls.stride, ls.pad);
        w = kernels::conv_out_extent(w, ls.ksize, ls.stride, ls.pad);
        if (h <= 0 || w <= 0) throw ShapeError("build_network: conv output collapsed");
        c = f;
        break;
      }
      case LayerSpec::Kind::maxpool:
        net.layers().push_back(std::make_unique<MaxPoolLayer<T>>());
        h /= 2;
        w /= 2;
        break;
      case LayerSpec::Kind::leaky_relu:
        net.layers().push_back(std::make_unique<LeakyReluLayer<T>>(static_cast<T>(ls.slope)));
        break;
      case LayerSpec::Kind::elu:
        net.layers().push_back(std::make_unique<EluLayer<T>>());
        break;
      case LayerSpec::Kind::flatten:
        net.layers().push_back(std::make_unique<FlattenLayer<T>>());
        feat = c * h * w;
        flat = true;
        break;
      case LayerSpec::Kind::linear:
        if (!flat) throw ShapeError("build_network: linear before flatten");
        net.layers().push_back(std::make_unique<LinearLayer<T>>(feat, ls.units, rng));
        feat = ls.units;
        break;
    }
  }
  return net;
}

}  // namespace dwp
