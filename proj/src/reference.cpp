#include "repdet/reference.hpp"

#include <cmath>

namespace repdet::reference {

template <typename T>
Tensor<T> conv2d_naive(const Tensor<T>& x, const ConvSpec<T>& spec) {
  spec.validate();
  if (x.shape.c != spec.in_channels)
    throw ShapeError("conv2d_naive: channel mismatch");
  const int oh_dim = conv_out_dim(x.shape.h, spec.kernel, spec.stride, spec.padding);
  const int ow_dim = conv_out_dim(x.shape.w, spec.kernel, spec.stride, spec.padding);
  if (oh_dim < 1 || ow_dim < 1) throw ShapeError("conv2d_naive: kernel larger than padded input");

  Tensor<T> y({x.shape.n, spec.out_channels, oh_dim, ow_dim});
  const int icpg = spec.in_channels / spec.groups;
  const int ocpg = spec.out_channels / spec.groups;

  for (int n = 0; n < x.shape.n; ++n)
    for (int oc = 0; oc < spec.out_channels; ++oc)
      for (int oh = 0; oh < oh_dim; ++oh)
        for (int ow = 0; ow < ow_dim; ++ow) {
          T acc = T(0);
          for (int ic = 0; ic < icpg; ++ic)
            for (int kh = 0; kh < spec.kernel; ++kh)
              for (int kw = 0; kw < spec.kernel; ++kw) {
                const int ih = oh * spec.stride - spec.padding + kh;
                const int iw = ow * spec.stride - spec.padding + kw;
                if (ih < 0 || ih >= x.shape.h || iw < 0 || iw >= x.shape.w) continue;  // zero pad
                const int g = oc / ocpg;
                acc += x.at(n, g * icpg + ic, ih, iw) * spec.weight.at(oc, ic, kh, kw);
              }
          if (!spec.bias.empty()) acc += spec.bias[size_t(oc)];
          y.at(n, oc, oh, ow) = acc;
        }
  return y;
}

template <typename T>
Tensor<T> batch_norm_naive(const Tensor<T>& x, const BatchNormParams<T>& bn) {
  bn.validate();
  if (x.shape.c != bn.channels()) throw ShapeError("batch_norm_naive: channel mismatch");
  Tensor<T> y(x.shape);
  for (int n = 0; n < x.shape.n; ++n)
    for (int c = 0; c < x.shape.c; ++c)
      for (int h = 0; h < x.shape.h; ++h)
        for (int w = 0; w < x.shape.w; ++w)
          y.at(n, c, h, w) =
              bn.gamma[size_t(c)] * (x.at(n, c, h, w) - bn.running_mean[size_t(c)]) /
                  std::sqrt(bn.running_var[size_t(c)] + bn.epsilon) +
              bn.beta[size_t(c)];
  return y;
}

template Tensor<float> conv2d_naive<float>(const Tensor<float>&, const ConvSpec<float>&);
template Tensor<double> conv2d_naive<double>(const Tensor<double>&, const ConvSpec<double>&);
template Tensor<float> batch_norm_naive<float>(const Tensor<float>&, const BatchNormParams<float>&);
template Tensor<double> batch_norm_naive<double>(const Tensor<double>&,
                                                 const BatchNormParams<double>&);

}  // namespace repdet::reference
