#pragma once

#include "repdet/tensor.hpp"

namespace repdet::reference {

// Serial reference kernels. Kept deliberately naive and independent of the
// production implementations in tensor.cpp: explicit loop nests, per-element
// bounds checks, no hoisting, no OpenMP. Tests use them as oracles and the
// bench_kernels tool compares them against the parallel kernels.

template <typename T>
Tensor<T> conv2d_naive(const Tensor<T>& x, const ConvSpec<T>& spec);

template <typename T>
Tensor<T> batch_norm_naive(const Tensor<T>& x, const BatchNormParams<T>& bn);

}  // namespace repdet::reference
