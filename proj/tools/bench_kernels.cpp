// Compares the serial reference kernels against the OpenMP variants on the
// shapes that dominate training, and checks they agree bit-for-bit.
#include <chrono>
#include <cstdio>
#include <vector>

#include "dwp/autodiff.hpp"
#include "dwp/kernels.hpp"
#include "dwp/rng.hpp"
#include "dwp/tensor.hpp"

using namespace dwp;

namespace {

double time_ms(const std::function<void()>& fn, int reps) {
  auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) fn();
  auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

}  // namespace

int main() {
  RngStream rng(7);
  struct Case {
    const char* name;
    std::int64_t m, k, n;
  };
  const Case cases[] = {
      {"gemm 32x49x484 (conv1 fwd)", 32, 49, 484},
      {"gemm 64x800x49 (conv2 fwd)", 64, 800, 49},
      {"gemm 128x1152x9 (decoder)", 128, 1152, 9},
      {"gemm 256x256x256", 256, 256, 256},
  };
  std::printf("%-28s %10s %10s %8s\n", "case", "serial ms", "omp ms", "match");
  for (const auto& c : cases) {
    Tensor<float> a = Tensor<float>::randn({c.m, c.k}, rng);
    Tensor<float> b = Tensor<float>::randn({c.k, c.n}, rng);
    Tensor<float> out_s({c.m, c.n}), out_p({c.m, c.n});
    kernels::backend() = kernels::Backend::serial;
    double ts = time_ms([&] { kernels::gemm_nn(c.m, c.k, c.n, a.data(), b.data(), out_s.data()); }, 20);
    kernels::backend() = kernels::Backend::openmp;
    double tp = time_ms([&] { kernels::gemm_nn(c.m, c.k, c.n, a.data(), b.data(), out_p.data()); }, 20);
    bool match = true;
    for (std::int64_t i = 0; i < out_s.numel() && match; ++i) match = out_s[i] == out_p[i];
    std::printf("%-28s %10.3f %10.3f %8s\n", c.name, ts, tp, match ? "yes" : "NO");
  }

  // conv2d round trip at classifier shapes
  Tensor<float> x = Tensor<float>::randn({16, 1, 28, 28}, rng);
  Tensor<float> k = Tensor<float>::randn({32, 1, 7, 7}, rng);
  kernels::backend() = kernels::Backend::serial;
  double ts = time_ms([&] { conv::forward(x, k, 1, 0); }, 10);
  Tensor<float> ys = conv::forward(x, k, 1, 0);
  kernels::backend() = kernels::Backend::openmp;
  double tp = time_ms([&] { conv::forward(x, k, 1, 0); }, 10);
  Tensor<float> yp = conv::forward(x, k, 1, 0);
  bool match = true;
  for (std::int64_t i = 0; i < ys.numel() && match; ++i) match = ys[i] == yp[i];
  std::printf("%-28s %10.3f %10.3f %8s\n", "conv2d 16x1x28x28 k7 O32", ts, tp, match ? "yes" : "NO");
  return 0;
}
