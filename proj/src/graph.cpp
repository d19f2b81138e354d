#include "repdet/graph.hpp"

#include <algorithm>

namespace repdet {

template <typename T>
void RepVGGBlockParams<T>::validate() const {
  conv3.validate();
  conv1.validate();
  bn3.validate();
  bn1.validate();
  if (conv3.kernel != 3 || conv3.padding != 1)
    throw ShapeError("repvgg conv3 branch must be k=3 pad=1");
  if (conv1.kernel != 1 || conv1.padding != 0)
    throw ShapeError("repvgg conv1 branch must be k=1 pad=0");
  if (conv1.in_channels != conv3.in_channels || conv1.out_channels != conv3.out_channels ||
      conv1.stride != conv3.stride || conv1.groups != conv3.groups)
    throw ShapeError("repvgg branches disagree on channels/stride/groups");
  if (bn3.channels() != conv3.out_channels || bn1.channels() != conv1.out_channels)
    throw ShapeError("repvgg branch BN channel mismatch");
  const bool id_allowed = conv3.in_channels == conv3.out_channels && conv3.stride == 1;
  if (id_bn.has_value() && !id_allowed)
    throw ShapeError("identity branch requires in==out channels and stride 1");
  if (id_bn.has_value()) {
    id_bn->validate();
    if (id_bn->channels() != conv3.out_channels)
      throw ShapeError("identity BN channel mismatch");
  }
}

template <typename T>
Tensor<T> repvgg_block_forward(const Tensor<T>& x, const RepVGGBlockParams<T>& p, ActKind act,
                               double slope) {
  p.validate();
  Tensor<T> y = batch_norm_infer(conv2d(x, p.conv3), p.bn3);
  y = add(y, batch_norm_infer(conv2d(x, p.conv1), p.bn1));
  if (p.id_bn.has_value()) y = add(y, batch_norm_infer(x, *p.id_bn));
  return activation(act, y, slope);
}

const char* node_kind_name(NodeKind k) {
  switch (k) {
    case NodeKind::conv: return "conv";
    case NodeKind::bn: return "bn";
    case NodeKind::act: return "act";
    case NodeKind::repvgg_block: return "repvgg_block";
    case NodeKind::add: return "add";
    case NodeKind::concat: return "concat";
    case NodeKind::upsample: return "upsample";
    case NodeKind::maxpool: return "maxpool";
    case NodeKind::head_branch: return "head_branch";
    case NodeKind::fake_quant: return "fake_quant";
  }
  return "conv";
}

NodeKind node_kind_from_name(const std::string& name) {
  static const std::map<std::string, NodeKind> table = {
      {"conv", NodeKind::conv},
      {"bn", NodeKind::bn},
      {"act", NodeKind::act},
      {"repvgg_block", NodeKind::repvgg_block},
      {"add", NodeKind::add},
      {"concat", NodeKind::concat},
      {"upsample", NodeKind::upsample},
      {"maxpool", NodeKind::maxpool},
      {"head_branch", NodeKind::head_branch},
      {"fake_quant", NodeKind::fake_quant},
  };
  auto it = table.find(name);
  if (it == table.end()) throw Error(Errc::model, "unknown node kind '" + name + "'");
  return it->second;
}

template <typename T>
const NodeSpec<T>* ModelGraph<T>::find(const std::string& id) const {
  for (const auto& n : nodes)
    if (n.id == id) return &n;
  return nullptr;
}

template <typename T>
NodeSpec<T>* ModelGraph<T>::find(const std::string& id) {
  for (auto& n : nodes)
    if (n.id == id) return &n;
  return nullptr;
}

template <typename T>
int ModelGraph<T>::node_index(const std::string& id) const {
  for (size_t i = 0; i < nodes.size(); ++i)
    if (nodes[i].id == id) return int(i);
  return -1;
}

template <typename T>
void ModelGraph<T>::validate() const {
  std::set<std::string> seen(inputs.begin(), inputs.end());
  if (seen.size() != inputs.size()) throw Error(Errc::model, "duplicate graph input name");
  for (const auto& n : nodes) {
    if (n.id.empty()) throw Error(Errc::model, "node with empty id");
    if (seen.count(n.id)) throw Error(Errc::model, "duplicate node id '" + n.id + "'");
    if (n.inputs.empty()) throw Error(Errc::model, "node '" + n.id + "' has no inputs");
    for (const auto& in : n.inputs)
      if (!seen.count(in))
        throw Error(Errc::model,
                    "node '" + n.id + "' consumes '" + in + "' before it is produced");
    auto missing = [&](const char* what) {
      return Error(Errc::model, "node '" + n.id + "' is missing its " + what);
    };
    switch (n.kind) {
      case NodeKind::conv:
      case NodeKind::head_branch:
        if (!n.conv) throw missing("conv parameters");
        break;
      case NodeKind::bn:
        if (!n.bn) throw missing("batch-norm parameters");
        break;
      case NodeKind::act:
        if (!n.act) throw missing("activation spec");
        break;
      case NodeKind::repvgg_block:
        if (!n.rep) throw missing("block parameters");
        break;
      case NodeKind::fake_quant:
        if (!n.quant) throw missing("quantization parameters");
        break;
      case NodeKind::maxpool:
        if (n.pool_kernel < 1) throw missing("pool window");
        break;
      default:
        break;
    }
    seen.insert(n.id);
  }
  for (const auto& out : outputs)
    if (!seen.count(out) ||
        std::find(inputs.begin(), inputs.end(), out) != inputs.end())
      throw Error(Errc::model, "graph output '" + out + "' is not a node");
  for (const auto& [level, tag] : heads) {
    if (!seen.count(tag.cls_id) || !seen.count(tag.reg_id))
      throw Error(Errc::model, "head tag for " + level + " references missing node");
  }
}

template <typename T>
void ModelGraph<T>::rewire(const std::string& old_id, const std::string& new_id) {
  for (auto& n : nodes)
    if (n.id != new_id)
      for (auto& in : n.inputs)
        if (in == old_id) in = new_id;
  for (auto& out : outputs)
    if (out == old_id) out = new_id;
  for (auto& [level, tag] : heads) {
    if (tag.cls_id == old_id) tag.cls_id = new_id;
    if (tag.reg_id == old_id) tag.reg_id = new_id;
  }
}

namespace {

template <typename To, typename From>
ConvSpec<To> convert_conv(const ConvSpec<From>& c) {
  ConvSpec<To> out;
  out.in_channels = c.in_channels;
  out.out_channels = c.out_channels;
  out.kernel = c.kernel;
  out.stride = c.stride;
  out.padding = c.padding;
  out.groups = c.groups;
  out.weight = astype<To>(c.weight);
  out.bias.assign(c.bias.begin(), c.bias.end());
  return out;
}

template <typename To, typename From>
BatchNormParams<To> convert_bn(const BatchNormParams<From>& b) {
  BatchNormParams<To> out;
  out.gamma.assign(b.gamma.begin(), b.gamma.end());
  out.beta.assign(b.beta.begin(), b.beta.end());
  out.running_mean.assign(b.running_mean.begin(), b.running_mean.end());
  out.running_var.assign(b.running_var.begin(), b.running_var.end());
  out.epsilon = To(b.epsilon);
  return out;
}

}  // namespace

template <typename To, typename From>
ModelGraph<To> convert_graph(const ModelGraph<From>& g) {
  ModelGraph<To> out;
  out.inputs = g.inputs;
  out.outputs = g.outputs;
  out.heads = g.heads;
  out.num_classes = g.num_classes;
  out.reg_max = g.reg_max;
  out.nodes.reserve(g.nodes.size());
  for (const auto& n : g.nodes) {
    NodeSpec<To> m;
    m.id = n.id;
    m.kind = n.kind;
    m.inputs = n.inputs;
    if (n.conv) m.conv = convert_conv<To>(*n.conv);
    m.fused_act = n.fused_act;
    m.weight_quant = n.weight_quant;
    if (n.bn) m.bn = convert_bn<To>(*n.bn);
    m.act = n.act;
    if (n.rep) {
      RepVGGBlockParams<To> r;
      r.conv3 = convert_conv<To>(n.rep->conv3);
      r.bn3 = convert_bn<To>(n.rep->bn3);
      r.conv1 = convert_conv<To>(n.rep->conv1);
      r.bn1 = convert_bn<To>(n.rep->bn1);
      if (n.rep->id_bn) r.id_bn = convert_bn<To>(*n.rep->id_bn);
      m.rep = std::move(r);
    }
    m.quant = n.quant;
    m.pool_kernel = n.pool_kernel;
    m.pool_stride = n.pool_stride;
    m.pool_pad = n.pool_pad;
    m.head_role = n.head_role;
    m.head_level = n.head_level;
    m.head_stride = n.head_stride;
    out.nodes.push_back(std::move(m));
  }
  return out;
}

namespace {

// fake-quant op used by the executor; the full quantizer lives in quant.cpp
template <typename T>
Tensor<T> eval_fake_quant(const Tensor<T>& x, const QuantParams& q) {
  Tensor<T> y(x.shape);
  const double inv = 1.0 / q.scale;
  const double lo = q.qmin(), hi = q.qmax();
  const int64_t total = x.size();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < total; ++i) {
    double r = std::nearbyint(double(x.v[size_t(i)]) * inv);  // round-half-to-even
    r = std::min(hi, std::max(lo, r));
    y.v[size_t(i)] = T(r * q.scale);
  }
  return y;
}

template <typename T>
Tensor<T> eval_node(const NodeSpec<T>& n, const std::vector<const Tensor<T>*>& in) {
  switch (n.kind) {
    case NodeKind::conv:
    case NodeKind::head_branch: {
      Tensor<T> y = conv2d(*in[0], *n.conv);
      if (n.fused_act) y = activation(n.fused_act->kind, y, n.fused_act->slope);
      return y;
    }
    case NodeKind::bn:
      return batch_norm_infer(*in[0], *n.bn);
    case NodeKind::act:
      return activation(n.act->kind, *in[0], n.act->slope);
    case NodeKind::repvgg_block: {
      // pre-activation sum; any activation is a separate node
      Tensor<T> y = batch_norm_infer(conv2d(*in[0], n.rep->conv3), n.rep->bn3);
      y = add(y, batch_norm_infer(conv2d(*in[0], n.rep->conv1), n.rep->bn1));
      if (n.rep->id_bn) y = add(y, batch_norm_infer(*in[0], *n.rep->id_bn));
      return y;
    }
    case NodeKind::add: {
      Tensor<T> y = add(*in[0], *in[1]);
      for (size_t i = 2; i < in.size(); ++i) y = add(y, *in[i]);
      return y;
    }
    case NodeKind::concat: {
      Tensor<T> y = *in[0];
      for (size_t i = 1; i < in.size(); ++i) y = concat_channels(y, *in[i]);
      return y;
    }
    case NodeKind::upsample:
      return upsample2x_nearest(*in[0]);
    case NodeKind::maxpool:
      return maxpool2d(*in[0], n.pool_kernel, n.pool_stride, n.pool_pad);
    case NodeKind::fake_quant:
      return eval_fake_quant(*in[0], *n.quant);
  }
  throw Error(Errc::model, "node '" + n.id + "': unhandled kind");
}

}  // namespace

template <typename T>
std::map<std::string, Tensor<T>> forward(const ModelGraph<T>& g,
                                         const std::map<std::string, Tensor<T>>& inputs,
                                         const std::set<std::string>& capture) {
  g.validate();
  for (const auto& name : g.inputs)
    if (!inputs.count(name)) throw Error(Errc::model, "missing graph input '" + name + "'");

  std::set<std::string> keep(capture);
  for (const auto& out : g.outputs) keep.insert(out);

  // last consumer index per produced id, for eager release
  std::map<std::string, size_t> last_use;
  for (size_t i = 0; i < g.nodes.size(); ++i)
    for (const auto& in : g.nodes[i].inputs) last_use[in] = i;

  std::map<std::string, Tensor<T>> live;
  for (const auto& [name, t] : inputs) live[name] = t;
  std::map<std::string, Tensor<T>> result;

  for (size_t i = 0; i < g.nodes.size(); ++i) {
    const auto& n = g.nodes[i];
    std::vector<const Tensor<T>*> in;
    in.reserve(n.inputs.size());
    for (const auto& name : n.inputs) {
      auto it = live.find(name);
      if (it == live.end())
        throw Error(Errc::model, "node '" + n.id + "': input '" + name + "' unavailable");
      in.push_back(&it->second);
    }
    Tensor<T> y;
    try {
      y = eval_node(n, in);
    } catch (const Error& e) {
      throw Error(e.code(), "node '" + n.id + "': " + e.what());
    }
    if (keep.count(n.id)) result[n.id] = y;
    live[n.id] = std::move(y);
    for (const auto& name : n.inputs) {
      auto lu = last_use.find(name);
      if (lu != last_use.end() && lu->second == i && !keep.count(name)) live.erase(name);
    }
  }
  return result;
}

template <typename T>
std::map<std::string, Tensor<T>> forward(const ModelGraph<T>& g, const Tensor<T>& x) {
  if (g.inputs.size() != 1)
    throw Error(Errc::model, "single-tensor forward needs exactly one graph input, graph has " +
                                 std::to_string(g.inputs.size()));
  return forward(g, std::map<std::string, Tensor<T>>{{g.inputs[0], x}});
}

namespace {

template <typename T>
Shape node_out_shape(const NodeSpec<T>& n, const std::vector<Shape>& in) {
  auto conv_shape = [&](const ConvSpec<T>& c, const Shape& s) {
    if (s.c != c.in_channels)
      throw ShapeError("node '" + n.id + "': channel mismatch, input has " + std::to_string(s.c) +
                       ", conv expects " + std::to_string(c.in_channels));
    int oh = conv_out_dim(s.h, c.kernel, c.stride, c.padding);
    int ow = conv_out_dim(s.w, c.kernel, c.stride, c.padding);
    if (oh < 1 || ow < 1) throw ShapeError("node '" + n.id + "': kernel exceeds padded input");
    return Shape{s.n, c.out_channels, oh, ow};
  };
  switch (n.kind) {
    case NodeKind::conv:
    case NodeKind::head_branch:
      return conv_shape(*n.conv, in[0]);
    case NodeKind::bn:
      if (in[0].c != n.bn->channels())
        throw ShapeError("node '" + n.id + "': bn channel mismatch");
      return in[0];
    case NodeKind::act:
    case NodeKind::fake_quant:
      return in[0];
    case NodeKind::repvgg_block:
      return conv_shape(n.rep->conv3, in[0]);
    case NodeKind::add:
      for (size_t i = 1; i < in.size(); ++i)
        if (!(in[i] == in[0])) throw ShapeError("node '" + n.id + "': add operand shape mismatch");
      return in[0];
    case NodeKind::concat: {
      Shape s = in[0];
      for (size_t i = 1; i < in.size(); ++i) {
        if (in[i].n != s.n || in[i].h != s.h || in[i].w != s.w)
          throw ShapeError("node '" + n.id + "': concat spatial mismatch");
        s.c += in[i].c;
      }
      return s;
    }
    case NodeKind::upsample:
      return Shape{in[0].n, in[0].c, in[0].h * 2, in[0].w * 2};
    case NodeKind::maxpool: {
      int oh = conv_out_dim(in[0].h, n.pool_kernel, n.pool_stride, n.pool_pad);
      int ow = conv_out_dim(in[0].w, n.pool_kernel, n.pool_stride, n.pool_pad);
      if (oh < 1 || ow < 1) throw ShapeError("node '" + n.id + "': pool window exceeds input");
      return Shape{in[0].n, in[0].c, oh, ow};
    }
  }
  throw Error(Errc::model, "node '" + n.id + "': unhandled kind");
}

}  // namespace

template <typename T>
std::map<std::string, Shape> infer_shapes(const ModelGraph<T>& g,
                                          const std::map<std::string, Shape>& input_shapes) {
  g.validate();
  std::map<std::string, Shape> known = input_shapes;
  for (const auto& name : g.inputs)
    if (!known.count(name)) throw Error(Errc::model, "missing input shape for '" + name + "'");
  for (const auto& n : g.nodes) {
    std::vector<Shape> in;
    for (const auto& name : n.inputs) in.push_back(known.at(name));
    known[n.id] = node_out_shape(n, in);
  }
  return known;
}

template <typename T>
int64_t node_param_count(const NodeSpec<T>& n) {
  auto conv_params = [](const ConvSpec<T>& c) {
    return c.weight.shape.total() + int64_t(c.bias.size());
  };
  auto bn_params = [](const BatchNormParams<T>& b) { return int64_t(4) * b.channels(); };
  switch (n.kind) {
    case NodeKind::conv:
    case NodeKind::head_branch:
      return conv_params(*n.conv);
    case NodeKind::bn:
      return bn_params(*n.bn);
    case NodeKind::repvgg_block: {
      int64_t total = conv_params(n.rep->conv3) + bn_params(n.rep->bn3) +
                      conv_params(n.rep->conv1) + bn_params(n.rep->bn1);
      if (n.rep->id_bn) total += bn_params(*n.rep->id_bn);
      return total;
    }
    default:
      return 0;
  }
}

template <typename T>
int64_t param_count(const ModelGraph<T>& g) {
  int64_t total = 0;
  for (const auto& n : g.nodes) total += node_param_count(n);
  return total;
}

#define REPDET_INSTANTIATE(T)                                                              \
  template struct RepVGGBlockParams<T>;                                                    \
  template Tensor<T> repvgg_block_forward<T>(const Tensor<T>&, const RepVGGBlockParams<T>&, \
                                             ActKind, double);                             \
  template struct NodeSpec<T>;                                                             \
  template struct ModelGraph<T>;                                                           \
  template std::map<std::string, Tensor<T>> forward<T>(                                    \
      const ModelGraph<T>&, const std::map<std::string, Tensor<T>>&,                       \
      const std::set<std::string>&);                                                       \
  template std::map<std::string, Tensor<T>> forward<T>(const ModelGraph<T>&,               \
                                                       const Tensor<T>&);                  \
  template std::map<std::string, Shape> infer_shapes<T>(const ModelGraph<T>&,              \
                                                        const std::map<std::string, Shape>&); \
  template int64_t param_count<T>(const ModelGraph<T>&);                                   \
  template int64_t node_param_count<T>(const NodeSpec<T>&);

REPDET_INSTANTIATE(float)
REPDET_INSTANTIATE(double)
#undef REPDET_INSTANTIATE

template ModelGraph<double> convert_graph<double, float>(const ModelGraph<float>&);
template ModelGraph<float> convert_graph<float, double>(const ModelGraph<double>&);

}  // namespace repdet
