#include "repdet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace repdet {

std::string Shape::str() const {
  return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
         std::to_string(w) + ")";
}

template <typename T>
Tensor<T>::Tensor(Shape s, T fill) : shape(s) {
  if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1)
    throw ShapeError("tensor dims must be >= 1, got " + s.str());
  v.assign(size_t(s.total()), fill);
}

template <typename T>
bool Tensor<T>::all_finite() const {
  for (T x : v)
    if (!std::isfinite(double(x))) return false;
  return true;
}

const char* act_name(ActKind k) {
  switch (k) {
    case ActKind::relu: return "relu";
    case ActKind::lrelu: return "lrelu";
    case ActKind::silu: return "silu";
  }
  return "relu";
}

ActKind act_from_name(const std::string& name) {
  if (name == "relu") return ActKind::relu;
  if (name == "lrelu") return ActKind::lrelu;
  if (name == "silu") return ActKind::silu;
  throw Error(Errc::model, "unknown activation kind '" + name + "'");
}

template <typename T>
void ConvSpec<T>::validate() const {
  if (in_channels < 1 || out_channels < 1 || kernel < 1 || stride < 1 || groups < 1)
    throw ShapeError("conv spec fields must be positive");
  if (padding < 0) throw ShapeError("conv padding must be >= 0");
  if (in_channels % groups != 0)
    throw ShapeError("in_channels " + std::to_string(in_channels) + " not divisible by groups " +
                     std::to_string(groups));
  if (out_channels % groups != 0)
    throw ShapeError("out_channels " + std::to_string(out_channels) + " not divisible by groups " +
                     std::to_string(groups));
  Shape expect{out_channels, in_channels / groups, kernel, kernel};
  if (!(weight.shape == expect))
    throw ShapeError("conv weight shape " + weight.shape.str() + " != expected " + expect.str());
  if (!bias.empty() && int(bias.size()) != out_channels)
    throw ShapeError("conv bias length " + std::to_string(bias.size()) + " != out_channels " +
                     std::to_string(out_channels));
}

template <typename T>
void BatchNormParams<T>::validate() const {
  size_t c = gamma.size();
  if (c == 0 || beta.size() != c || running_mean.size() != c || running_var.size() != c)
    throw ShapeError("batch-norm vectors must share one nonzero length");
  if (!(epsilon > T(0))) throw ShapeError("batch-norm epsilon must be > 0");
  for (T v : running_var)
    if (v < T(0)) throw ShapeError("batch-norm running_var must be >= 0");
}

int conv_out_dim(int in, int kernel, int stride, int padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvSpec<T>& spec) {
  spec.validate();
  if (x.shape.c != spec.in_channels)
    throw ShapeError("conv2d: input channels " + std::to_string(x.shape.c) +
                     " != spec.in_channels " + std::to_string(spec.in_channels));
  const int oh_dim = conv_out_dim(x.shape.h, spec.kernel, spec.stride, spec.padding);
  const int ow_dim = conv_out_dim(x.shape.w, spec.kernel, spec.stride, spec.padding);
  if (oh_dim < 1 || ow_dim < 1)
    throw ShapeError("conv2d: spatial dims " + x.shape.str() + " smaller than kernel extent k=" +
                     std::to_string(spec.kernel) + " pad=" + std::to_string(spec.padding));

  Tensor<T> y({x.shape.n, spec.out_channels, oh_dim, ow_dim});
  const int icpg = spec.in_channels / spec.groups;
  const int ocpg = spec.out_channels / spec.groups;
  const int k = spec.kernel;
  const int H = x.shape.h, W = x.shape.w;
  const T* wptr = spec.weight.data();

#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < x.shape.n; ++n) {
    for (int oc = 0; oc < spec.out_channels; ++oc) {
      const int g = oc / ocpg;
      const int ic0 = g * icpg;
      const T b = spec.bias.empty() ? T(0) : spec.bias[size_t(oc)];
      for (int oh = 0; oh < oh_dim; ++oh) {
        const int ih0 = oh * spec.stride - spec.padding;
        const int kh_lo = std::max(0, -ih0);
        const int kh_hi = std::min(k, H - ih0);
        for (int ow = 0; ow < ow_dim; ++ow) {
          const int iw0 = ow * spec.stride - spec.padding;
          const int kw_lo = std::max(0, -iw0);
          const int kw_hi = std::min(k, W - iw0);
          T acc = b;
          for (int ic = 0; ic < icpg; ++ic) {
            const T* wrow = wptr + ((int64_t(oc) * icpg + ic) * k) * k;
            for (int kh = kh_lo; kh < kh_hi; ++kh) {
              const T* xrow = x.data() + x.idx(n, ic0 + ic, ih0 + kh, iw0 + kw_lo);
              const T* wk = wrow + int64_t(kh) * k + kw_lo;
              for (int kw = 0; kw < kw_hi - kw_lo; ++kw) acc += xrow[kw] * wk[kw];
            }
          }
          y.at(n, oc, oh, ow) = acc;
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> batch_norm_infer(const Tensor<T>& x, const BatchNormParams<T>& bn) {
  bn.validate();
  if (x.shape.c != bn.channels())
    throw ShapeError("batch_norm_infer: input channels " + std::to_string(x.shape.c) +
                     " != param channels " + std::to_string(bn.channels()));
  // y = gamma*(x-mean)/sqrt(var+eps) + beta, folded to one scale/shift pair.
  std::vector<T> scale(size_t(bn.channels())), shift(size_t(bn.channels()));
  for (int c = 0; c < bn.channels(); ++c) {
    T s = bn.gamma[size_t(c)] / std::sqrt(bn.running_var[size_t(c)] + bn.epsilon);
    scale[size_t(c)] = s;
    shift[size_t(c)] = bn.beta[size_t(c)] - s * bn.running_mean[size_t(c)];
  }
  Tensor<T> y(x.shape);
  const int64_t hw = int64_t(x.shape.h) * x.shape.w;
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < x.shape.n; ++n) {
    for (int c = 0; c < x.shape.c; ++c) {
      const T* src = x.data() + x.idx(n, c, 0, 0);
      T* dst = y.data() + y.idx(n, c, 0, 0);
      const T s = scale[size_t(c)], b = shift[size_t(c)];
      for (int64_t i = 0; i < hw; ++i) dst[i] = s * src[i] + b;
    }
  }
  return y;
}

template <typename T>
Tensor<T> activation(ActKind kind, const Tensor<T>& x, double slope) {
  if (kind == ActKind::lrelu && !(slope > 0.0 && slope < 1.0))
    throw Error(Errc::model, "lrelu slope must lie in (0,1)");
  Tensor<T> y(x.shape);
  const int64_t total = x.size();
  const T sl = T(slope);
  switch (kind) {
    case ActKind::relu:
#pragma omp parallel for schedule(static)
      for (int64_t i = 0; i < total; ++i) y.v[size_t(i)] = std::max(T(0), x.v[size_t(i)]);
      break;
    case ActKind::lrelu:
#pragma omp parallel for schedule(static)
      for (int64_t i = 0; i < total; ++i) {
        T v = x.v[size_t(i)];
        y.v[size_t(i)] = v > T(0) ? v : sl * v;
      }
      break;
    case ActKind::silu:
#pragma omp parallel for schedule(static)
      for (int64_t i = 0; i < total; ++i) {
        T v = x.v[size_t(i)];
        y.v[size_t(i)] = v / (T(1) + std::exp(-v));
      }
      break;
  }
  return y;
}

template <typename T>
Tensor<T> upsample2x_nearest(const Tensor<T>& x) {
  Tensor<T> y({x.shape.n, x.shape.c, x.shape.h * 2, x.shape.w * 2});
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < x.shape.n; ++n)
    for (int c = 0; c < x.shape.c; ++c)
      for (int h = 0; h < y.shape.h; ++h)
        for (int w = 0; w < y.shape.w; ++w) y.at(n, c, h, w) = x.at(n, c, h / 2, w / 2);
  return y;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape.n != b.shape.n || a.shape.h != b.shape.h || a.shape.w != b.shape.w)
    throw ShapeError("concat_channels: N/H/W mismatch " + a.shape.str() + " vs " + b.shape.str());
  Tensor<T> y({a.shape.n, a.shape.c + b.shape.c, a.shape.h, a.shape.w});
  const int64_t hw = int64_t(a.shape.h) * a.shape.w;
  for (int n = 0; n < a.shape.n; ++n) {
    for (int c = 0; c < a.shape.c; ++c)
      std::copy_n(a.data() + a.idx(n, c, 0, 0), hw, y.data() + y.idx(n, c, 0, 0));
    for (int c = 0; c < b.shape.c; ++c)
      std::copy_n(b.data() + b.idx(n, c, 0, 0), hw, y.data() + y.idx(n, a.shape.c + c, 0, 0));
  }
  return y;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int c0, int c1) {
  if (c0 < 0 || c1 <= c0 || c1 > x.shape.c)
    throw ShapeError("slice_channels: bad range [" + std::to_string(c0) + "," +
                     std::to_string(c1) + ") for " + x.shape.str());
  Tensor<T> y({x.shape.n, c1 - c0, x.shape.h, x.shape.w});
  const int64_t hw = int64_t(x.shape.h) * x.shape.w;
  for (int n = 0; n < x.shape.n; ++n)
    for (int c = c0; c < c1; ++c)
      std::copy_n(x.data() + x.idx(n, c, 0, 0), hw, y.data() + y.idx(n, c - c0, 0, 0));
  return y;
}

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, int kernel, int stride, int padding) {
  const int oh_dim = conv_out_dim(x.shape.h, kernel, stride, padding);
  const int ow_dim = conv_out_dim(x.shape.w, kernel, stride, padding);
  if (oh_dim < 1 || ow_dim < 1) throw ShapeError("maxpool2d: window larger than padded input");
  Tensor<T> y({x.shape.n, x.shape.c, oh_dim, ow_dim});
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < x.shape.n; ++n) {
    for (int c = 0; c < x.shape.c; ++c) {
      for (int oh = 0; oh < oh_dim; ++oh) {
        for (int ow = 0; ow < ow_dim; ++ow) {
          T best = -std::numeric_limits<T>::infinity();
          for (int kh = 0; kh < kernel; ++kh) {
            const int ih = oh * stride - padding + kh;
            if (ih < 0 || ih >= x.shape.h) continue;
            for (int kw = 0; kw < kernel; ++kw) {
              const int iw = ow * stride - padding + kw;
              if (iw < 0 || iw >= x.shape.w) continue;
              best = std::max(best, x.at(n, c, ih, iw));
            }
          }
          y.at(n, c, oh, ow) = best;
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape == b.shape))
    throw ShapeError("add: shape mismatch " + a.shape.str() + " vs " + b.shape.str());
  Tensor<T> y(a.shape);
  const int64_t total = a.size();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < total; ++i) y.v[size_t(i)] = a.v[size_t(i)] + b.v[size_t(i)];
  return y;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape == b.shape))
    throw ShapeError("max_abs_diff: shape mismatch " + a.shape.str() + " vs " + b.shape.str());
  double m = 0;
  for (int64_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(double(a.v[size_t(i)]) - double(b.v[size_t(i)])));
  return m;
}

template <typename T>
Tensor<T> random_tensor(Shape s, SplitMix64& rng, double stddev) {
  Tensor<T> t(s);
  for (auto& x : t.v) x = T(rng.normal(0.0, stddev));
  return t;
}

#define REPDET_INSTANTIATE(T)                                                             \
  template class Tensor<T>;                                                               \
  template struct ConvSpec<T>;                                                            \
  template struct BatchNormParams<T>;                                                     \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const ConvSpec<T>&);                     \
  template Tensor<T> batch_norm_infer<T>(const Tensor<T>&, const BatchNormParams<T>&);    \
  template Tensor<T> activation<T>(ActKind, const Tensor<T>&, double);                    \
  template Tensor<T> upsample2x_nearest<T>(const Tensor<T>&);                             \
  template Tensor<T> concat_channels<T>(const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> slice_channels<T>(const Tensor<T>&, int, int);                       \
  template Tensor<T> maxpool2d<T>(const Tensor<T>&, int, int, int);                       \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                          \
  template double max_abs_diff<T>(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> random_tensor<T>(Shape, SplitMix64&, double);

REPDET_INSTANTIATE(float)
REPDET_INSTANTIATE(double)
#undef REPDET_INSTANTIATE

template Tensor<float> astype<float, double>(const Tensor<double>&);
template Tensor<double> astype<double, float>(const Tensor<float>&);

}  // namespace repdet
