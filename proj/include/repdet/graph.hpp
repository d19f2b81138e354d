#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "repdet/quant_params.hpp"
#include "repdet/tensor.hpp"

namespace repdet {

// Train-time three-branch block: 3x3 conv+BN, 1x1 conv+BN, and an identity
// BN branch present iff in==out and stride==1.
template <typename T>
struct RepVGGBlockParams {
  ConvSpec<T> conv3;  // k=3, pad=1
  BatchNormParams<T> bn3;
  ConvSpec<T> conv1;  // k=1, pad=0
  BatchNormParams<T> bn1;
  std::optional<BatchNormParams<T>> id_bn;

  int in_channels() const { return conv3.in_channels; }
  int out_channels() const { return conv3.out_channels; }
  int stride() const { return conv3.stride; }
  int groups() const { return conv3.groups; }
  void validate() const;
};

// Pre-activation block forward: bn3(conv3(x)) + bn1(conv1(x)) [+ id_bn(x)],
// then `act`.
template <typename T>
Tensor<T> repvgg_block_forward(const Tensor<T>& x, const RepVGGBlockParams<T>& p, ActKind act,
                               double slope = 0.1);

enum class NodeKind {
  conv,
  bn,
  act,
  repvgg_block,
  add,
  concat,
  upsample,
  maxpool,
  head_branch,
  fake_quant,
};

const char* node_kind_name(NodeKind k);
NodeKind node_kind_from_name(const std::string& name);

template <typename T>
struct NodeSpec {
  std::string id;
  NodeKind kind = NodeKind::conv;
  std::vector<std::string> inputs;  // node ids or graph input names

  // conv / head_branch
  std::optional<ConvSpec<T>> conv;
  std::optional<ActSpec> fused_act;          // activation folded into the conv
  std::optional<QuantParams> weight_quant;   // annotation: weights were fake-quantized

  std::optional<BatchNormParams<T>> bn;      // bn
  std::optional<ActSpec> act;                // act
  std::optional<RepVGGBlockParams<T>> rep;   // repvgg_block (pre-activation)
  std::optional<QuantParams> quant;          // fake_quant

  int pool_kernel = 0, pool_stride = 1, pool_pad = 0;  // maxpool

  // head_branch tags
  std::string head_role;   // "cls" | "reg"
  std::string head_level;  // "P3" | "P4" | "P5"
  int head_stride = 0;
};

struct HeadTag {
  std::string cls_id, reg_id;
  int stride = 0;
};

// Immutable-after-construction DAG in topological order: every node input
// must refer to a graph input or an earlier node.
template <typename T>
struct ModelGraph {
  std::vector<std::string> inputs;
  std::vector<NodeSpec<T>> nodes;
  std::vector<std::string> outputs;

  std::map<std::string, HeadTag> heads;  // level name -> output ids
  int num_classes = 0;
  int reg_max = 0;  // 0 = plain 4-channel regression

  const NodeSpec<T>* find(const std::string& id) const;
  NodeSpec<T>* find(const std::string& id);
  int node_index(const std::string& id) const;  // -1 if absent

  // Structural checks: unique ids, topological order, outputs exist.
  void validate() const;

  // Rewire every consumer (node inputs, outputs list, head tags) of old_id.
  void rewire(const std::string& old_id, const std::string& new_id);
};

using ModelGraphF = ModelGraph<float>;

template <typename To, typename From>
ModelGraph<To> convert_graph(const ModelGraph<From>& g);

// Topological execution. Returns the requested output tensors plus any ids in
// `capture`. Intermediate tensors are freed at their last use.
template <typename T>
std::map<std::string, Tensor<T>> forward(const ModelGraph<T>& g,
                                         const std::map<std::string, Tensor<T>>& inputs,
                                         const std::set<std::string>& capture = {});

// Single-input convenience: binds x to the graph's sole declared input.
template <typename T>
std::map<std::string, Tensor<T>> forward(const ModelGraph<T>& g, const Tensor<T>& x);

// Shape inference mirror of forward(); throws ShapeError on any bookkeeping
// violation and returns the shape of every node output.
template <typename T>
std::map<std::string, Shape> infer_shapes(const ModelGraph<T>& g,
                                          const std::map<std::string, Shape>& input_shapes);

// Learnable scalar count: conv weights+bias, bn 4 vectors, rep-block branches.
template <typename T>
int64_t param_count(const ModelGraph<T>& g);

template <typename T>
int64_t node_param_count(const NodeSpec<T>& n);

}  // namespace repdet
