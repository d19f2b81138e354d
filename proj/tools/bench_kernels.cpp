// Serial reference vs OpenMP kernel comparison: checks agreement, then times
// both over representative convolution shapes.
#include <chrono>
#include <functional>
#include <cstdio>
#include <vector>

#if defined(_OPENMP)
#include <omp.h>
#endif

#include "repdet/reference.hpp"
#include "repdet/tensor.hpp"

using namespace repdet;

namespace {

struct Case {
  const char* name;
  int n, ic, hw, oc, k, stride, pad, groups;
};

double time_ms(const std::function<void()>& fn, int iters) {
  fn();  // warm-up
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < iters; ++i) fn();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / iters;
}

}  // namespace

int main() {
#if defined(_OPENMP)
  std::printf("openmp threads: %d\n", omp_get_max_threads());
#else
  std::printf("openmp: not enabled (serial build)\n");
#endif

  const Case cases[] = {
      {"stem 3x3/2", 1, 3, 128, 16, 3, 2, 1, 1},
      {"mid 3x3", 1, 64, 32, 64, 3, 1, 1, 1},
      {"deep 3x3", 1, 128, 16, 128, 3, 1, 1, 1},
      {"pointwise", 1, 256, 16, 128, 1, 1, 0, 1},
      {"grouped", 1, 64, 32, 64, 3, 1, 1, 4},
      {"batch8 3x3", 8, 32, 32, 32, 3, 1, 1, 1},
  };

  std::printf("%-12s %10s %10s %8s %12s\n", "case", "serial ms", "omp ms", "speedup",
              "max|diff|");
  SplitMix64 rng(0xbe7c4);
  for (const Case& c : cases) {
    TensorF x = random_tensor<float>({c.n, c.ic, c.hw, c.hw}, rng);
    ConvSpec<float> spec;
    spec.in_channels = c.ic;
    spec.out_channels = c.oc;
    spec.kernel = c.k;
    spec.stride = c.stride;
    spec.padding = c.pad;
    spec.groups = c.groups;
    spec.weight = random_tensor<float>({c.oc, c.ic / c.groups, c.k, c.k}, rng, 0.2);

    TensorF serial_out = reference::conv2d_naive(x, spec);
    TensorF omp_out = conv2d(x, spec);
    const double diff = max_abs_diff(serial_out, omp_out);

    const double serial_ms = time_ms([&] { (void)reference::conv2d_naive(x, spec); }, 5);
    const double omp_ms = time_ms([&] { (void)conv2d(x, spec); }, 5);
    std::printf("%-12s %10.3f %10.3f %7.2fx %12.3g\n", c.name, serial_ms, omp_ms,
                serial_ms / omp_ms, diff);
    if (diff > 1e-4) {
      std::printf("kernel mismatch above tolerance\n");
      return 1;
    }
  }
  return 0;
}
