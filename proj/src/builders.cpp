#include "repdet/builders.hpp"

#include <cmath>

namespace repdet {

const char* block_style_name(BlockStyle s) {
  return s == BlockStyle::rep_block ? "rep_block" : "csp_stackrep";
}

BlockStyle block_style_from_name(const std::string& name) {
  if (name == "rep_block") return BlockStyle::rep_block;
  if (name == "csp_stackrep") return BlockStyle::csp_stackrep;
  throw Error(Errc::model, "unknown block style '" + name + "'");
}

void BlockConfig::validate() const {
  if (depth < 1) throw Error(Errc::model, "block depth must be >= 1");
  if (width < 1) throw Error(Errc::model, "block width must be >= 1");
  if (!(channel_coeff > 0.0 && channel_coeff <= 1.0))
    throw Error(Errc::model, "channel_coeff must lie in (0,1]");
  if (hidden_width() < 1) throw Error(Errc::model, "hidden width < 1 channel");
}

int BlockConfig::hidden_width() const {
  return int(std::lround(channel_coeff * width));
}

namespace {

template <typename T>
ConvSpec<T> random_conv(int ic, int oc, int k, int stride, int padding, int groups,
                        SplitMix64& rng, bool with_bias) {
  ConvSpec<T> c;
  c.in_channels = ic;
  c.out_channels = oc;
  c.kernel = k;
  c.stride = stride;
  c.padding = padding;
  c.groups = groups;
  // variance-preserving init; growth across a deep random stack would turn
  // FP32 rounding into visible end-to-end error
  const double fan_in = double(ic / groups) * k * k;
  c.weight = random_tensor<T>({oc, ic / groups, k, k}, rng, std::sqrt(1.0 / fan_in));
  if (with_bias) {
    c.bias.resize(size_t(oc));
    for (auto& b : c.bias) b = T(rng.normal(0.0, 0.01));
  }
  return c;
}

template <typename T>
BatchNormParams<T> random_bn(int channels, SplitMix64& rng) {
  BatchNormParams<T> bn;
  bn.gamma.resize(size_t(channels));
  bn.beta.resize(size_t(channels));
  bn.running_mean.resize(size_t(channels));
  bn.running_var.resize(size_t(channels));
  for (int c = 0; c < channels; ++c) {
    bn.gamma[size_t(c)] = T(rng.uniform(0.4, 0.8));
    bn.beta[size_t(c)] = T(rng.normal(0.0, 0.1));
    bn.running_mean[size_t(c)] = T(rng.normal(0.0, 0.1));
    bn.running_var[size_t(c)] = T(rng.uniform(1.0, 2.0));
  }
  bn.epsilon = T(1e-5);
  return bn;
}

// Incremental node emitter; every helper returns the id carrying the
// subgraph's output.
template <typename T>
struct Emit {
  ModelGraph<T>& g;
  SplitMix64& rng;
  ActKind act;

  std::string conv(const std::string& id, const std::string& in, int ic, int oc, int k, int stride,
                   bool with_act) {
    NodeSpec<T> n;
    n.id = id;
    n.kind = NodeKind::conv;
    n.inputs = {in};
    n.conv = random_conv<T>(ic, oc, k, stride, k / 2, 1, rng, true);
    g.nodes.push_back(std::move(n));
    if (!with_act) return id;
    const std::string act_id = id + ".act";
    NodeSpec<T> a;
    a.id = act_id;
    a.kind = NodeKind::act;
    a.inputs = {id};
    a.act = ActSpec{act, 0.1};
    g.nodes.push_back(std::move(a));
    return act_id;
  }

  // RepVGG block node (pre-activation) followed by its activation node.
  std::string rep(const std::string& id, const std::string& in, int ic, int oc, int stride) {
    NodeSpec<T> n;
    n.id = id;
    n.kind = NodeKind::repvgg_block;
    n.inputs = {in};
    n.rep = random_repvgg_block<T>(ic, oc, stride, 1, rng);
    g.nodes.push_back(std::move(n));
    const std::string act_id = id + ".act";
    NodeSpec<T> a;
    a.id = act_id;
    a.kind = NodeKind::act;
    a.inputs = {id};
    a.act = ActSpec{act, 0.1};
    g.nodes.push_back(std::move(a));
    return act_id;
  }

  // depth RepVGG blocks; the first may change channel count.
  std::string rep_stack(const std::string& prefix, const std::string& in, int ic, int oc,
                        int depth) {
    std::string cur = rep(prefix + ".b0", in, ic, oc, 1);
    for (int i = 1; i < depth; ++i) cur = rep(prefix + ".b" + std::to_string(i), cur, oc, oc, 1);
    return cur;
  }

  // Three 1x1 convs plus `depth` residual double-RepVGG sub-blocks.
  std::string csp_stackrep(const std::string& prefix, const std::string& in, int ic,
                           const BlockConfig& cfg) {
    cfg.validate();
    const int hidden = cfg.hidden_width();
    std::string a = conv(prefix + ".cv1", in, ic, hidden, 1, 1, true);
    for (int i = 0; i < cfg.depth; ++i) {
      const std::string sub = prefix + ".sub" + std::to_string(i);
      std::string y = rep(sub + ".r0", a, hidden, hidden, 1);
      y = rep(sub + ".r1", y, hidden, hidden, 1);
      NodeSpec<T> s;
      s.id = sub + ".add";
      s.kind = NodeKind::add;
      s.inputs = {a, y};
      a = s.id;
      g.nodes.push_back(std::move(s));
    }
    std::string b = conv(prefix + ".cv2", in, ic, hidden, 1, 1, true);
    NodeSpec<T> cat;
    cat.id = prefix + ".cat";
    cat.kind = NodeKind::concat;
    cat.inputs = {a, b};
    g.nodes.push_back(std::move(cat));
    return conv(prefix + ".cv3", prefix + ".cat", 2 * hidden, cfg.width, 1, 1, true);
  }

  std::string stage_block(const std::string& prefix, const std::string& in, int ic,
                          BlockStyle style, int width, int depth, double cc) {
    if (style == BlockStyle::rep_block) return rep_stack(prefix, in, ic, width, depth);
    BlockConfig cfg;
    cfg.block_style = style;
    cfg.channel_coeff = cc;
    cfg.depth = depth;
    cfg.width = width;
    return csp_stackrep(prefix, in, ic, cfg);
  }

  // max-pool pyramid: 1x1 reduce, three chained k=5 pools, concat, 1x1 out
  std::string sppf(const std::string& prefix, const std::string& in, int width) {
    const int hidden = std::max(1, width / 2);
    std::string x = conv(prefix + ".cv1", in, width, hidden, 1, 1, true);
    std::vector<std::string> taps = {x};
    for (int i = 0; i < 3; ++i) {
      NodeSpec<T> p;
      p.id = prefix + ".mp" + std::to_string(i);
      p.kind = NodeKind::maxpool;
      p.inputs = {taps.back()};
      p.pool_kernel = 5;
      p.pool_stride = 1;
      p.pool_pad = 2;
      g.nodes.push_back(std::move(p));
      taps.push_back(prefix + ".mp" + std::to_string(i));
    }
    NodeSpec<T> cat;
    cat.id = prefix + ".cat";
    cat.kind = NodeKind::concat;
    cat.inputs = taps;
    g.nodes.push_back(std::move(cat));
    return conv(prefix + ".cv2", prefix + ".cat", 4 * hidden, width, 1, 1, true);
  }

  std::string upsample(const std::string& id, const std::string& in) {
    NodeSpec<T> n;
    n.id = id;
    n.kind = NodeKind::upsample;
    n.inputs = {in};
    g.nodes.push_back(std::move(n));
    return id;
  }

  std::string concat2(const std::string& id, const std::string& a, const std::string& b) {
    NodeSpec<T> n;
    n.id = id;
    n.kind = NodeKind::concat;
    n.inputs = {a, b};
    g.nodes.push_back(std::move(n));
    return id;
  }

  std::string head_out(const std::string& id, const std::string& in, int ic, int oc,
                       const std::string& role, const std::string& level, int stride) {
    NodeSpec<T> n;
    n.id = id;
    n.kind = NodeKind::head_branch;
    n.inputs = {in};
    n.conv = random_conv<T>(ic, oc, 1, 1, 0, 1, rng, true);
    n.head_role = role;
    n.head_level = level;
    n.head_stride = stride;
    g.nodes.push_back(std::move(n));
    return id;
  }
};

}  // namespace

template <typename T>
RepVGGBlockParams<T> random_repvgg_block(int in_ch, int out_ch, int stride, int groups,
                                         SplitMix64& rng) {
  RepVGGBlockParams<T> p;
  p.conv3 = random_conv<T>(in_ch, out_ch, 3, stride, 1, groups, rng, false);
  p.bn3 = random_bn<T>(out_ch, rng);
  p.conv1 = random_conv<T>(in_ch, out_ch, 1, stride, 0, groups, rng, false);
  p.bn1 = random_bn<T>(out_ch, rng);
  if (in_ch == out_ch && stride == 1) p.id_bn = random_bn<T>(out_ch, rng);
  return p;
}

template <typename T>
ModelGraph<T> build_efficientrep_backbone(const BackboneConfig& cfg, SplitMix64& rng) {
  if (cfg.widths.size() != 5)
    throw Error(Errc::model, "backbone needs 5 stage widths (stem + 4), got " +
                                 std::to_string(cfg.widths.size()));
  if (cfg.depths.size() != 4)
    throw Error(Errc::model, "backbone needs 4 stage depths, got " +
                                 std::to_string(cfg.depths.size()));
  ModelGraph<T> g;
  g.inputs = {"input"};
  Emit<T> e{g, rng, cfg.act};

  std::string cur = e.rep("stem", "input", 3, cfg.widths[0], 2);
  std::vector<std::string> stage_out(4);
  for (int s = 0; s < 4; ++s) {
    const std::string prefix = "stage" + std::to_string(s + 1);
    cur = e.rep(prefix + ".down", cur, cfg.widths[size_t(s)], cfg.widths[size_t(s) + 1], 2);
    cur = e.stage_block(prefix, cur, cfg.widths[size_t(s) + 1], cfg.style,
                        cfg.widths[size_t(s) + 1], cfg.depths[size_t(s)], cfg.channel_coeff);
    if (s == 3 && cfg.with_sppf) cur = e.sppf(prefix + ".sppf", cur, cfg.widths[4]);
    stage_out[size_t(s)] = cur;
  }
  // strides 8 / 16 / 32
  g.outputs = {stage_out[1], stage_out[2], stage_out[3]};
  g.validate();
  return g;
}

template <typename T>
ModelGraph<T> build_reppan_neck(const NeckConfig& cfg, SplitMix64& rng) {
  ModelGraph<T> g;
  g.inputs = {"C3", "C4", "C5"};
  Emit<T> e{g, rng, cfg.act};

  auto block = [&](const std::string& prefix, const std::string& in, int ic, int width) {
    return e.stage_block(prefix, in, ic, cfg.style, width, cfg.depth, cfg.channel_coeff);
  };

  // top-down
  std::string reduce0 = e.conv("td.reduce0", "C5", cfg.c5, cfg.c4, 1, 1, true);
  std::string up0 = e.upsample("td.up0", reduce0);
  std::string cat0 = e.concat2("td.cat0", up0, "C4");
  std::string td4 = block("td.p4", cat0, cfg.c4 * 2, cfg.c4);

  std::string reduce1 = e.conv("td.reduce1", td4, cfg.c4, cfg.c3, 1, 1, true);
  std::string up1 = e.upsample("td.up1", reduce1);
  std::string cat1 = e.concat2("td.cat1", up1, "C3");
  std::string p3 = block("td.p3", cat1, cfg.c3 * 2, cfg.c3);

  // bottom-up
  std::string down0 = e.conv("bu.down0", p3, cfg.c3, cfg.c3, 3, 2, true);
  std::string cat2 = e.concat2("bu.cat2", down0, reduce1);
  std::string p4 = block("bu.p4", cat2, cfg.c3 * 2, cfg.c4);

  std::string down1 = e.conv("bu.down1", p4, cfg.c4, cfg.c4, 3, 2, true);
  std::string cat3 = e.concat2("bu.cat3", down1, reduce0);
  std::string p5 = block("bu.p5", cat3, cfg.c4 * 2, cfg.c5);

  g.outputs = {p3, p4, p5};
  g.validate();
  return g;
}

template <typename T>
ModelGraph<T> build_decoupled_head(const HeadConfig& cfg, SplitMix64& rng) {
  if (cfg.num_classes < 1) throw Error(Errc::model, "head needs num_classes >= 1");
  if (cfg.reg_max < 0) throw Error(Errc::model, "head reg_max must be >= 0");
  if (cfg.widths.size() != cfg.strides.size() || cfg.widths.empty())
    throw Error(Errc::model, "head widths/strides length mismatch");
  ModelGraph<T> g;
  Emit<T> e{g, rng, cfg.act};
  const int reg_ch = cfg.reg_max > 0 ? 4 * (cfg.reg_max + 1) : 4;
  const int middle = cfg.hybrid ? 1 : 2;

  for (size_t lvl = 0; lvl < cfg.widths.size(); ++lvl) {
    const std::string level = "P" + std::to_string(lvl + 3);
    const int w = cfg.widths[lvl];
    g.inputs.push_back(level);
    const std::string prefix = level + ".";

    std::string stem = e.conv(prefix + "stem", level, w, w, 1, 1, true);
    std::string cls = stem, reg = stem;
    for (int m = 0; m < middle; ++m) {
      cls = e.conv(prefix + "cls.m" + std::to_string(m), cls, w, w, 3, 1, true);
      reg = e.conv(prefix + "reg.m" + std::to_string(m), reg, w, w, 3, 1, true);
    }
    std::string cls_out = e.head_out(prefix + "cls.out", cls, w, cfg.num_classes, "cls", level,
                                     cfg.strides[lvl]);
    std::string reg_out =
        e.head_out(prefix + "reg.out", reg, w, reg_ch, "reg", level, cfg.strides[lvl]);
    g.outputs.push_back(cls_out);
    g.outputs.push_back(reg_out);
    g.heads[level] = HeadTag{cls_out, reg_out, cfg.strides[lvl]};
  }
  g.num_classes = cfg.num_classes;
  g.reg_max = cfg.reg_max;
  g.validate();
  return g;
}

template <typename T>
ModelGraph<T> build_csp_stackrep_block(int in_width, const BlockConfig& cfg, ActKind act,
                                       SplitMix64& rng) {
  if (cfg.block_style != BlockStyle::csp_stackrep)
    throw Error(Errc::model, "block config style must be csp_stackrep");
  ModelGraph<T> g;
  g.inputs = {"input"};
  Emit<T> e{g, rng, act};
  g.outputs = {e.csp_stackrep("csp", "input", in_width, cfg)};
  g.validate();
  return g;
}

template <typename T>
Tensor<T> csp_stackrep_forward(const Tensor<T>& x, const ModelGraph<T>& block) {
  auto out = forward(block, x);
  return out.at(block.outputs[0]);
}

namespace {

// Appends src into dst with prefixed ids, binding src graph inputs to
// existing dst ids. Returns the renamed output ids.
template <typename T>
std::vector<std::string> append_graph(ModelGraph<T>& dst, const ModelGraph<T>& src,
                                      const std::string& prefix,
                                      const std::map<std::string, std::string>& bind) {
  auto rename = [&](const std::string& id) -> std::string {
    auto it = bind.find(id);
    if (it != bind.end()) return it->second;
    return prefix + id;
  };
  for (const auto& n : src.nodes) {
    NodeSpec<T> m = n;
    m.id = prefix + n.id;
    for (auto& in : m.inputs) in = rename(in);
    dst.nodes.push_back(std::move(m));
  }
  for (const auto& [level, tag] : src.heads)
    dst.heads[level] = HeadTag{prefix + tag.cls_id, prefix + tag.reg_id,
                                                       tag.stride};
  std::vector<std::string> outs;
  for (const auto& o : src.outputs) outs.push_back(rename(o));
  return outs;
}

}  // namespace

DetectorPreset preset_for_scale(char scale, int num_classes) {
  DetectorPreset p;
  p.scale = scale;
  auto scaled = [](const std::vector<int>& base, double mult) {
    std::vector<int> out;
    for (int b : base) out.push_back(std::max(1, int(std::lround(b * mult))));
    return out;
  };
  const std::vector<int> base_widths = {64, 128, 256, 512, 1024};
  switch (scale) {
    case 'n':
      p.backbone.widths = scaled(base_widths, 0.25);
      p.backbone.depths = {2, 4, 6, 2};
      break;
    case 't':
      p.backbone.widths = scaled(base_widths, 0.375);
      p.backbone.depths = {2, 4, 6, 2};
      break;
    case 's':
      p.backbone.widths = scaled(base_widths, 0.5);
      p.backbone.depths = {2, 4, 6, 2};
      break;
    case 'm':
      p.backbone.widths = scaled(base_widths, 0.75);
      p.backbone.depths = {4, 7, 11, 4};
      p.backbone.style = BlockStyle::csp_stackrep;
      p.backbone.channel_coeff = 2.0 / 3.0;
      break;
    case 'l':
      p.backbone.widths = base_widths;
      p.backbone.depths = {6, 12, 18, 6};
      p.backbone.style = BlockStyle::csp_stackrep;
      p.backbone.channel_coeff = 0.5;
      p.backbone.act = ActKind::silu;
      break;
    default:
      throw Error(Errc::usage, std::string("unknown scale '") + scale + "', expected n/t/s/m/l");
  }
  p.neck.c3 = p.backbone.widths[2];
  p.neck.c4 = p.backbone.widths[3];
  p.neck.c5 = p.backbone.widths[4];
  p.neck.style = p.backbone.style;
  p.neck.channel_coeff = p.backbone.channel_coeff;
  p.neck.act = p.backbone.act;
  p.neck.depth = (scale == 'm' || scale == 'l') ? 3 : 2;

  p.head.widths = {p.neck.c3, p.neck.c4, p.neck.c5};
  p.head.num_classes = num_classes;
  p.head.reg_max = (scale == 'm' || scale == 'l') ? 16 : 0;
  p.head.act = p.backbone.act;
  return p;
}

template <typename T>
ModelGraph<T> build_detector(const DetectorPreset& preset, SplitMix64& rng) {
  ModelGraph<T> g;
  g.inputs = {"input"};
  SplitMix64 rb = rng.split(), rn = rng.split(), rh = rng.split();
  ModelGraph<T> bb = build_efficientrep_backbone<T>(preset.backbone, rb);
  ModelGraph<T> neck = build_reppan_neck<T>(preset.neck, rn);
  ModelGraph<T> head = build_decoupled_head<T>(preset.head, rh);

  auto c = append_graph(g, bb, "backbone.", {{"input", "input"}});
  auto p = append_graph(g, neck, "neck.", {{"C3", c[0]}, {"C4", c[1]}, {"C5", c[2]}});
  auto outs = append_graph(g, head, "head.", {{"P3", p[0]}, {"P4", p[1]}, {"P5", p[2]}});
  g.outputs = outs;
  g.num_classes = head.num_classes;
  g.reg_max = head.reg_max;
  g.validate();
  return g;
}

#define REPDET_INSTANTIATE(T)                                                                  \
  template RepVGGBlockParams<T> random_repvgg_block<T>(int, int, int, int, SplitMix64&);       \
  template ModelGraph<T> build_efficientrep_backbone<T>(const BackboneConfig&, SplitMix64&);   \
  template ModelGraph<T> build_reppan_neck<T>(const NeckConfig&, SplitMix64&);                 \
  template ModelGraph<T> build_decoupled_head<T>(const HeadConfig&, SplitMix64&);              \
  template ModelGraph<T> build_csp_stackrep_block<T>(int, const BlockConfig&, ActKind,         \
                                                     SplitMix64&);                             \
  template Tensor<T> csp_stackrep_forward<T>(const Tensor<T>&, const ModelGraph<T>&);          \
  template ModelGraph<T> build_detector<T>(const DetectorPreset&, SplitMix64&);

REPDET_INSTANTIATE(float)
REPDET_INSTANTIATE(double)
#undef REPDET_INSTANTIATE

}  // namespace repdet
