#include "repdet/reparam.hpp"

#include <cmath>

namespace repdet {

template <typename T>
ConvSpec<T> FusedConvParams<T>::to_conv_spec(int in_channels) const {
  ConvSpec<T> c;
  c.in_channels = in_channels;
  c.out_channels = weight.shape.n;
  c.kernel = 3;
  c.stride = stride;
  c.padding = 1;
  c.groups = groups;
  c.weight = weight;
  c.bias = bias;
  return c;
}

template <typename T>
ConvSpec<T> fold_bn(const ConvSpec<T>& conv, const BatchNormParams<T>& bn) {
  bn.validate();
  conv.validate();
  if (bn.channels() != conv.out_channels)
    throw ShapeError("fold_bn: bn channels " + std::to_string(bn.channels()) +
                     " != conv out_channels " + std::to_string(conv.out_channels));
  ConvSpec<T> out = conv;
  out.bias.assign(size_t(conv.out_channels), T(0));
  const int64_t per_oc = int64_t(conv.weight.shape.c) * conv.weight.shape.h * conv.weight.shape.w;
  for (int oc = 0; oc < conv.out_channels; ++oc) {
    const T scale = bn.gamma[size_t(oc)] / std::sqrt(bn.running_var[size_t(oc)] + bn.epsilon);
    T* w = out.weight.data() + int64_t(oc) * per_oc;
    for (int64_t i = 0; i < per_oc; ++i) w[i] *= scale;
    const T b = conv.bias.empty() ? T(0) : conv.bias[size_t(oc)];
    out.bias[size_t(oc)] =
        bn.beta[size_t(oc)] - scale * bn.running_mean[size_t(oc)] + scale * b;
  }
  return out;
}

template <typename T>
std::vector<int> fold_risk_channels(const BatchNormParams<T>& bn, double threshold) {
  std::vector<int> flagged;
  for (int c = 0; c < bn.channels(); ++c)
    if (double(bn.running_var[size_t(c)]) + double(bn.epsilon) < threshold) flagged.push_back(c);
  return flagged;
}

template <typename T>
Tensor<T> pad_1x1_to_3x3(const Tensor<T>& kernel) {
  if (kernel.shape.h != 1 || kernel.shape.w != 1)
    throw ShapeError("pad_1x1_to_3x3: kernel spatial dims must be 1x1, got " + kernel.shape.str());
  Tensor<T> out({kernel.shape.n, kernel.shape.c, 3, 3});
  for (int o = 0; o < kernel.shape.n; ++o)
    for (int i = 0; i < kernel.shape.c; ++i) out.at(o, i, 1, 1) = kernel.at(o, i, 0, 0);
  return out;
}

template <typename T>
Tensor<T> identity_to_3x3(int channels, int groups) {
  if (channels < 1 || groups < 1 || channels % groups != 0)
    throw ShapeError("identity_to_3x3: channels must be divisible by groups");
  const int icpg = channels / groups;
  Tensor<T> k({channels, icpg, 3, 3});
  for (int c = 0; c < channels; ++c) k.at(c, c % icpg, 1, 1) = T(1);
  return k;
}

template <typename T>
FusedConvParams<T> fuse_repvgg_block(const RepVGGBlockParams<T>& p) {
  p.validate();
  ConvSpec<T> f3 = fold_bn(p.conv3, p.bn3);
  ConvSpec<T> f1 = fold_bn(p.conv1, p.bn1);
  Tensor<T> w1 = pad_1x1_to_3x3(f1.weight);

  FusedConvParams<T> fused;
  fused.stride = p.stride();
  fused.groups = p.groups();
  fused.weight = f3.weight;
  for (int64_t i = 0; i < fused.weight.size(); ++i) fused.weight.v[size_t(i)] += w1.v[size_t(i)];
  fused.bias = f3.bias;
  for (int oc = 0; oc < p.out_channels(); ++oc) fused.bias[size_t(oc)] += f1.bias[size_t(oc)];

  if (p.id_bn.has_value()) {
    // identity branch folded as a diagonal 3x3 conv through the same algebra
    ConvSpec<T> id;
    id.in_channels = p.in_channels();
    id.out_channels = p.out_channels();
    id.kernel = 3;
    id.stride = 1;
    id.padding = 1;
    id.groups = p.groups();
    id.weight = identity_to_3x3<T>(p.out_channels(), p.groups());
    ConvSpec<T> fid = fold_bn(id, *p.id_bn);
    for (int64_t i = 0; i < fused.weight.size(); ++i)
      fused.weight.v[size_t(i)] += fid.weight.v[size_t(i)];
    for (int oc = 0; oc < p.out_channels(); ++oc) fused.bias[size_t(oc)] += fid.bias[size_t(oc)];
  }
  return fused;
}

template <typename T>
ModelGraph<T> fuse_graph(const ModelGraph<T>& g) {
  g.validate();
  ModelGraph<T> out;
  out.inputs = g.inputs;
  out.outputs = g.outputs;
  out.heads = g.heads;
  out.num_classes = g.num_classes;
  out.reg_max = g.reg_max;

  // Activation nodes absorbed into their fused conv: the block's activation
  // follows as a dedicated act node and is folded in when it is the block's
  // only consumer.
  std::map<std::string, std::string> absorbed;  // act id -> conv id
  for (const auto& n : g.nodes) {
    if (n.kind != NodeKind::repvgg_block) continue;
    size_t consumers = 0;
    const NodeSpec<T>* act_node = nullptr;
    for (const auto& m : g.nodes)
      for (const auto& in : m.inputs)
        if (in == n.id) {
          ++consumers;
          act_node = m.kind == NodeKind::act ? &m : nullptr;
        }
    if (consumers == 1 && act_node != nullptr) absorbed[act_node->id] = n.id;
  }

  auto rename = [&](const std::string& id) {
    auto it = absorbed.find(id);
    return it == absorbed.end() ? id : it->second;
  };

  for (const auto& n : g.nodes) {
    if (n.kind == NodeKind::repvgg_block) {
      FusedConvParams<T> fused = fuse_repvgg_block(*n.rep);
      NodeSpec<T> conv;
      conv.id = n.id;
      conv.kind = NodeKind::conv;
      conv.inputs = n.inputs;
      for (auto& in : conv.inputs) in = rename(in);
      conv.conv = fused.to_conv_spec(n.rep->in_channels());
      out.nodes.push_back(std::move(conv));
      continue;
    }
    auto it = absorbed.find(n.id);
    if (it != absorbed.end()) {
      out.find(it->second)->fused_act = *n.act;
      continue;
    }
    NodeSpec<T> m = n;
    for (auto& in : m.inputs) in = rename(in);
    out.nodes.push_back(std::move(m));
  }
  for (auto& o : out.outputs) o = rename(o);
  for (auto& [level, tag] : out.heads) {
    tag.cls_id = rename(tag.cls_id);
    tag.reg_id = rename(tag.reg_id);
  }
  out.validate();
  return out;
}

void GrConfig::validate() const {
  if (s.empty() || s.size() != t.size())
    throw Error(Errc::model, "GrConfig branch scales must share one nonzero length");
  for (size_t c = 0; c < s.size(); ++c) {
    if (!std::isfinite(s[c]) || !std::isfinite(t[c]))
      throw Error(Errc::model, "GrConfig scales must be finite");
    if (!(s[c] * s[c] + t[c] * t[c] > 0.0))
      throw Error(Errc::model, "GrConfig needs s^2+t^2 > 0 per channel");
  }
}

template <typename T>
Tensor<T> gr_step(const Tensor<T>& weights, const Tensor<T>& grads, const GrConfig& gr,
                  double lr) {
  gr.validate();
  if (!(weights.shape == grads.shape))
    throw ShapeError("gr_step: weight/grad shape mismatch " + weights.shape.str() + " vs " +
                     grads.shape.str());
  if (int(gr.s.size()) != weights.shape.n)
    throw ShapeError("gr_step: scale count " + std::to_string(gr.s.size()) +
                     " != out-channels " + std::to_string(weights.shape.n));
  Tensor<T> out = weights;
  const int64_t per_oc = int64_t(weights.shape.c) * weights.shape.h * weights.shape.w;
  for (int oc = 0; oc < weights.shape.n; ++oc) {
    const double m = gr.multiplier(oc);
    T* w = out.data() + int64_t(oc) * per_oc;
    const T* d = grads.data() + int64_t(oc) * per_oc;
    for (int64_t i = 0; i < per_oc; ++i) w[i] -= T(lr * m * double(d[i]));
  }
  return out;
}

template <typename T>
GrConfig gr_from_donor(const RepVGGBlockParams<T>& donor) {
  donor.validate();
  GrConfig gr;
  for (int c = 0; c < donor.out_channels(); ++c) {
    gr.s.push_back(double(donor.bn3.gamma[size_t(c)]) /
                   std::sqrt(double(donor.bn3.running_var[size_t(c)]) + double(donor.bn3.epsilon)));
    gr.t.push_back(double(donor.bn1.gamma[size_t(c)]) /
                   std::sqrt(double(donor.bn1.running_var[size_t(c)]) + double(donor.bn1.epsilon)));
  }
  gr.validate();
  return gr;
}

#define REPDET_INSTANTIATE(T)                                                             \
  template struct FusedConvParams<T>;                                                     \
  template ConvSpec<T> fold_bn<T>(const ConvSpec<T>&, const BatchNormParams<T>&);         \
  template std::vector<int> fold_risk_channels<T>(const BatchNormParams<T>&, double);     \
  template Tensor<T> pad_1x1_to_3x3<T>(const Tensor<T>&);                                 \
  template Tensor<T> identity_to_3x3<T>(int, int);                                        \
  template FusedConvParams<T> fuse_repvgg_block<T>(const RepVGGBlockParams<T>&);          \
  template ModelGraph<T> fuse_graph<T>(const ModelGraph<T>&);                             \
  template Tensor<T> gr_step<T>(const Tensor<T>&, const Tensor<T>&, const GrConfig&, double); \
  template GrConfig gr_from_donor<T>(const RepVGGBlockParams<T>&);

REPDET_INSTANTIATE(float)
REPDET_INSTANTIATE(double)
#undef REPDET_INSTANTIATE

}  // namespace repdet
