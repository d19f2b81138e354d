#pragma once

#include "repdet/graph.hpp"
#include "repdet/rng.hpp"

namespace repdet {

enum class BlockStyle { rep_block, csp_stackrep };

const char* block_style_name(BlockStyle s);
BlockStyle block_style_from_name(const std::string& name);

// Stage-block configuration. channel_coeff is the fraction of the block
// width given to the CSP hidden path (csp_stackrep only).
struct BlockConfig {
  BlockStyle block_style = BlockStyle::rep_block;
  double channel_coeff = 0.5;  // in (0,1]
  int depth = 1;               // sub-block count
  int width = 16;              // output channels

  void validate() const;
  int hidden_width() const;  // round(channel_coeff * width), >= 1 enforced
};

struct BackboneConfig {
  std::vector<int> widths = {16, 32, 64, 128, 256};  // stem + 4 stages
  std::vector<int> depths = {2, 4, 6, 2};            // per-stage block depth
  BlockStyle style = BlockStyle::rep_block;
  double channel_coeff = 0.5;
  bool with_sppf = true;  // figure-derived max-pool pyramid on the last stage
  ActKind act = ActKind::relu;
};

struct NeckConfig {
  int c3 = 64, c4 = 128, c5 = 256;  // backbone feature widths
  int depth = 2;
  BlockStyle style = BlockStyle::rep_block;
  double channel_coeff = 0.5;
  ActKind act = ActKind::relu;
};

struct HeadConfig {
  int num_classes = 80;
  int reg_max = 0;  // 0 disables the per-side bin distribution
  std::vector<int> widths = {64, 128, 256};
  std::vector<int> strides = {8, 16, 32};
  bool hybrid = true;  // one middle 3x3 per branch instead of two
  ActKind act = ActKind::relu;
};

// Graph-building helpers construct weights from `rng` (He-style init for
// convs, near-unity batch-norm statistics), so a fixed seed gives a fixed
// model.
template <typename T>
ModelGraph<T> build_efficientrep_backbone(const BackboneConfig& cfg, SplitMix64& rng);

template <typename T>
ModelGraph<T> build_reppan_neck(const NeckConfig& cfg, SplitMix64& rng);

template <typename T>
ModelGraph<T> build_decoupled_head(const HeadConfig& cfg, SplitMix64& rng);

// One free-standing CSPStackRep block (three 1x1 convs + a stack of residual
// double-RepVGG sub-blocks), mainly for block-level tests.
template <typename T>
ModelGraph<T> build_csp_stackrep_block(int in_width, const BlockConfig& cfg, ActKind act,
                                       SplitMix64& rng);

template <typename T>
Tensor<T> csp_stackrep_forward(const Tensor<T>& x, const ModelGraph<T>& block);

// Scale presets. Per-stage widths/depths are editable configuration, not
// published ground truth; they follow the usual width/depth multipliers.
struct DetectorPreset {
  char scale = 'n';  // n t s m l
  BackboneConfig backbone;
  NeckConfig neck;
  HeadConfig head;
};

DetectorPreset preset_for_scale(char scale, int num_classes = 80);

// backbone + neck + head composed into one graph with namespaced node ids;
// outputs and head tags come from the head.
template <typename T>
ModelGraph<T> build_detector(const DetectorPreset& preset, SplitMix64& rng);

// Random single block, for fusion tests. Identity branch present iff
// in==out and stride==1.
template <typename T>
RepVGGBlockParams<T> random_repvgg_block(int in_ch, int out_ch, int stride, int groups,
                                         SplitMix64& rng);

}  // namespace repdet
