#pragma once

#include "repdet/graph.hpp"

namespace repdet {

// Single 3x3 conv + bias that exactly replaces a RepVGG block before the
// activation.
template <typename T>
struct FusedConvParams {
  Tensor<T> weight;  // (out, in/groups, 3, 3)
  std::vector<T> bias;
  int stride = 1;
  int groups = 1;

  ConvSpec<T> to_conv_spec(int in_channels) const;
};

// W' = (gamma/sqrt(var+eps)) * W per out-channel,
// b' = beta - gamma*mean/sqrt(var+eps) + (gamma/sqrt(var+eps)) * b.
template <typename T>
ConvSpec<T> fold_bn(const ConvSpec<T>& conv, const BatchNormParams<T>& bn);

// Out-channels whose var+eps < threshold: folding amplifies weights by more
// than ~1/sqrt(threshold), which is reported (not rejected) because it is
// exactly the regime that breaks activation quantization later.
template <typename T>
std::vector<int> fold_risk_channels(const BatchNormParams<T>& bn, double threshold = 1e-10);

// 1x1 kernel placed at the center of a zeroed 3x3; equivalence holds when
// the 3x3 runs with pad=1 against the 1x1's pad=0.
template <typename T>
Tensor<T> pad_1x1_to_3x3(const Tensor<T>& kernel);

// 3x3 kernel reproducing the input exactly at pad=1 (grouped supported).
template <typename T>
Tensor<T> identity_to_3x3(int channels, int groups);

template <typename T>
FusedConvParams<T> fuse_repvgg_block(const RepVGGBlockParams<T>& p);

// Replaces every repvgg_block node with a single conv node, absorbing the
// block's following activation node into the conv. All other nodes pass
// through untouched. Idempotent.
template <typename T>
ModelGraph<T> fuse_graph(const ModelGraph<T>& g);

// Per-channel constant branch scales (s, t) of the constant-scale two-branch
// counterpart; the gradient multiplier is s^2 + t^2.
struct GrConfig {
  std::vector<double> s, t;

  void validate() const;
  double multiplier(int channel) const {
    return s[size_t(channel)] * s[size_t(channel)] + t[size_t(channel)] * t[size_t(channel)];
  }
};

// One SGD step on a plain operator with per-out-channel gradient multiplier
// (s^2 + t^2). If the weights were initialized at s*W_A + t*W_B, the
// trajectory equals training the two-branch constant-scale model with plain
// SGD and fusing afterwards. Returns the updated copy.
template <typename T>
Tensor<T> gr_step(const Tensor<T>& weights, const Tensor<T>& grads, const GrConfig& gr, double lr);

// Default branch scales taken from a donor block's BN statistics:
// s = gamma3/sqrt(var3+eps), t = gamma1/sqrt(var1+eps) per out-channel.
template <typename T>
GrConfig gr_from_donor(const RepVGGBlockParams<T>& donor);

}  // namespace repdet
