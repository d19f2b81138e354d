#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "repdet/errors.hpp"
#include "repdet/rng.hpp"

namespace repdet {

struct Shape {
  int n = 1, c = 1, h = 1, w = 1;
  int64_t total() const { return int64_t(n) * c * h * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

// Dense NCHW tensor. Value-semantic: ops below are pure functions returning
// fresh tensors, so concurrent forwards over shared inputs are safe.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0));

  Shape shape;
  std::vector<T> v;

  int64_t size() const { return int64_t(v.size()); }
  T* data() { return v.data(); }
  const T* data() const { return v.data(); }

  int64_t idx(int n, int c, int h, int w) const {
    return ((int64_t(n) * shape.c + c) * shape.h + h) * shape.w + w;
  }
  T& at(int n, int c, int h, int w) { return v[idx(n, c, h, w)]; }
  const T& at(int n, int c, int h, int w) const { return v[idx(n, c, h, w)]; }

  bool all_finite() const;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <typename To, typename From>
Tensor<To> astype(const Tensor<From>& t) {
  Tensor<To> out(t.shape);
  for (int64_t i = 0; i < t.size(); ++i) out.v[size_t(i)] = To(t.v[size_t(i)]);
  return out;
}

enum class ActKind { relu, lrelu, silu };

struct ActSpec {
  ActKind kind = ActKind::relu;
  double slope = 0.1;  // lrelu only, must be in (0,1)
};

const char* act_name(ActKind k);
ActKind act_from_name(const std::string& name);

// 2D convolution descriptor (square kernel, symmetric zero padding).
// Cross-correlation convention, no kernel flip.
template <typename T>
struct ConvSpec {
  int in_channels = 1;
  int out_channels = 1;
  int kernel = 3;
  int stride = 1;
  int padding = 0;
  int groups = 1;
  Tensor<T> weight;        // (out, in/groups, k, k)
  std::vector<T> bias;     // per out-channel; empty means no bias

  void validate() const;
};

template <typename T>
struct BatchNormParams {
  std::vector<T> gamma, beta, running_mean, running_var;
  T epsilon = T(1e-5);

  int channels() const { return int(gamma.size()); }
  void validate() const;
};

int conv_out_dim(int in, int kernel, int stride, int padding);

// Production kernels (OpenMP-parallel over batch x out-channel).
// Accumulation order per output element is fixed, so results do not
// depend on the thread count.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvSpec<T>& spec);

template <typename T>
Tensor<T> batch_norm_infer(const Tensor<T>& x, const BatchNormParams<T>& bn);

template <typename T>
Tensor<T> activation(ActKind kind, const Tensor<T>& x, double slope = 0.1);

template <typename T>
Tensor<T> upsample2x_nearest(const Tensor<T>& x);

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

// [c0, c1) of the channel axis; inverse of concat for matching splits.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int c0, int c1);

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, int kernel, int stride, int padding);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> random_tensor(Shape s, SplitMix64& rng, double stddev = 1.0);

}  // namespace repdet
