#include "repdet/manifest.hpp"

#include <json.hpp>

#include "repdet/io.hpp"

namespace repdet {

using nlohmann::json;

namespace {

constexpr const char* kFormat = "repdet-model/1";

json vec_to_blob(WeightBlob& blob, const std::vector<float>& v) {
  TensorF t({1, int(v.size()), 1, 1});
  t.v = v;
  return json{{"offset", blob.append(t)}, {"len", v.size()}};
}

std::vector<float> vec_from_blob(const WeightBlob& blob, const json& j) {
  TensorF t = blob.read_at(j.at("offset").get<size_t>());
  if (t.size() != int64_t(j.at("len").get<size_t>()))
    throw Error(Errc::model, "weight-blob vector length mismatch");
  return t.v;
}

json tensor_to_blob(WeightBlob& blob, const TensorF& t) {
  return json{{"offset", blob.append(t)},
              {"shape", {t.shape.n, t.shape.c, t.shape.h, t.shape.w}}};
}

TensorF tensor_from_blob(const WeightBlob& blob, const json& j) {
  TensorF t = blob.read_at(j.at("offset").get<size_t>());
  auto s = j.at("shape");
  Shape expect{s.at(0).get<int>(), s.at(1).get<int>(), s.at(2).get<int>(), s.at(3).get<int>()};
  if (!(t.shape == expect))
    throw Error(Errc::model, "weight-blob tensor shape mismatch: blob " + t.shape.str() +
                                 " manifest " + expect.str());
  return t;
}

json conv_to_json(WeightBlob& blob, const ConvSpec<float>& c) {
  json j{{"in", c.in_channels},   {"out", c.out_channels}, {"k", c.kernel},
         {"stride", c.stride},    {"pad", c.padding},      {"groups", c.groups},
         {"weight", tensor_to_blob(blob, c.weight)}};
  if (!c.bias.empty()) j["bias"] = vec_to_blob(blob, c.bias);
  return j;
}

ConvSpec<float> conv_from_json(const WeightBlob& blob, const json& j) {
  ConvSpec<float> c;
  c.in_channels = j.at("in").get<int>();
  c.out_channels = j.at("out").get<int>();
  c.kernel = j.at("k").get<int>();
  c.stride = j.at("stride").get<int>();
  c.padding = j.at("pad").get<int>();
  c.groups = j.at("groups").get<int>();
  c.weight = tensor_from_blob(blob, j.at("weight"));
  if (j.contains("bias")) c.bias = vec_from_blob(blob, j.at("bias"));
  c.validate();
  return c;
}

json bn_to_json(WeightBlob& blob, const BatchNormParams<float>& b) {
  return json{{"gamma", vec_to_blob(blob, b.gamma)},
              {"beta", vec_to_blob(blob, b.beta)},
              {"mean", vec_to_blob(blob, b.running_mean)},
              {"var", vec_to_blob(blob, b.running_var)},
              {"eps", b.epsilon}};
}

BatchNormParams<float> bn_from_json(const WeightBlob& blob, const json& j) {
  BatchNormParams<float> b;
  b.gamma = vec_from_blob(blob, j.at("gamma"));
  b.beta = vec_from_blob(blob, j.at("beta"));
  b.running_mean = vec_from_blob(blob, j.at("mean"));
  b.running_var = vec_from_blob(blob, j.at("var"));
  b.epsilon = j.at("eps").get<float>();
  b.validate();
  return b;
}

json act_to_json(const ActSpec& a) {
  return json{{"kind", act_name(a.kind)}, {"slope", a.slope}};
}

ActSpec act_from_json(const json& j) {
  return ActSpec{act_from_name(j.at("kind").get<std::string>()), j.at("slope").get<double>()};
}

json quant_to_json(const QuantParams& q) {
  json j{{"scale", q.scale},
         {"zero_point", q.zero_point},
         {"bits", q.bits},
         {"symmetric", q.symmetric}};
  if (q.per_channel()) j["channel_scales"] = q.channel_scales;
  return j;
}

QuantParams quant_from_json(const json& j) {
  QuantParams q;
  q.scale = j.at("scale").get<double>();
  q.zero_point = j.at("zero_point").get<int>();
  q.bits = j.at("bits").get<int>();
  q.symmetric = j.at("symmetric").get<bool>();
  if (j.contains("channel_scales")) q.channel_scales = j.at("channel_scales").get<std::vector<double>>();
  return q;
}

}  // namespace

std::string manifest_to_json(const ModelGraphF& g, WeightBlob& blob) {
  g.validate();
  json root;
  root["format"] = kFormat;
  root["inputs"] = g.inputs;
  root["outputs"] = g.outputs;
  root["num_classes"] = g.num_classes;
  root["reg_max"] = g.reg_max;
  json heads = json::object();
  for (const auto& [level, tag] : g.heads)
    heads[level] = json{{"cls", tag.cls_id}, {"reg", tag.reg_id}, {"stride", tag.stride}};
  root["heads"] = heads;

  json nodes = json::array();
  for (const auto& n : g.nodes) {
    json j{{"id", n.id}, {"kind", node_kind_name(n.kind)}, {"inputs", n.inputs}};
    switch (n.kind) {
      case NodeKind::conv:
      case NodeKind::head_branch:
        j["conv"] = conv_to_json(blob, *n.conv);
        if (n.fused_act) j["fused_act"] = act_to_json(*n.fused_act);
        if (n.weight_quant) j["weight_quant"] = quant_to_json(*n.weight_quant);
        if (n.kind == NodeKind::head_branch) {
          j["role"] = n.head_role;
          j["level"] = n.head_level;
          j["stride"] = n.head_stride;
        }
        break;
      case NodeKind::bn:
        j["bn"] = bn_to_json(blob, *n.bn);
        break;
      case NodeKind::act:
        j["act"] = act_to_json(*n.act);
        break;
      case NodeKind::repvgg_block: {
        json r{{"conv3", conv_to_json(blob, n.rep->conv3)},
               {"bn3", bn_to_json(blob, n.rep->bn3)},
               {"conv1", conv_to_json(blob, n.rep->conv1)},
               {"bn1", bn_to_json(blob, n.rep->bn1)}};
        if (n.rep->id_bn) r["id_bn"] = bn_to_json(blob, *n.rep->id_bn);
        j["rep"] = r;
        break;
      }
      case NodeKind::maxpool:
        j["pool"] = json{{"k", n.pool_kernel}, {"stride", n.pool_stride}, {"pad", n.pool_pad}};
        break;
      case NodeKind::fake_quant:
        j["quant"] = quant_to_json(*n.quant);
        break;
      case NodeKind::add:
      case NodeKind::concat:
      case NodeKind::upsample:
        break;
    }
    nodes.push_back(std::move(j));
  }
  root["nodes"] = std::move(nodes);
  return root.dump(2);
}

ModelGraphF model_from_json(const std::string& json_text, const WeightBlob& blob) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const std::exception& e) {
    throw Error(Errc::model, std::string("manifest is not valid JSON: ") + e.what());
  }
  try {
    if (root.at("format").get<std::string>() != kFormat)
      throw Error(Errc::model, "unsupported manifest format tag");
    ModelGraphF g;
    g.inputs = root.at("inputs").get<std::vector<std::string>>();
    g.outputs = root.at("outputs").get<std::vector<std::string>>();
    g.num_classes = root.at("num_classes").get<int>();
    g.reg_max = root.at("reg_max").get<int>();
    for (auto it = root.at("heads").begin(); it != root.at("heads").end(); ++it)
      g.heads[it.key()] = HeadTag{it.value().at("cls").get<std::string>(),
                                               it.value().at("reg").get<std::string>(),
                                               it.value().at("stride").get<int>()};
    for (const auto& j : root.at("nodes")) {
      NodeSpec<float> n;
      n.id = j.at("id").get<std::string>();
      n.kind = node_kind_from_name(j.at("kind").get<std::string>());
      n.inputs = j.at("inputs").get<std::vector<std::string>>();
      switch (n.kind) {
        case NodeKind::conv:
        case NodeKind::head_branch:
          n.conv = conv_from_json(blob, j.at("conv"));
          if (j.contains("fused_act")) n.fused_act = act_from_json(j.at("fused_act"));
          if (j.contains("weight_quant")) n.weight_quant = quant_from_json(j.at("weight_quant"));
          if (n.kind == NodeKind::head_branch) {
            n.head_role = j.at("role").get<std::string>();
            n.head_level = j.at("level").get<std::string>();
            n.head_stride = j.at("stride").get<int>();
          }
          break;
        case NodeKind::bn:
          n.bn = bn_from_json(blob, j.at("bn"));
          break;
        case NodeKind::act:
          n.act = act_from_json(j.at("act"));
          break;
        case NodeKind::repvgg_block: {
          RepVGGBlockParams<float> r;
          r.conv3 = conv_from_json(blob, j.at("rep").at("conv3"));
          r.bn3 = bn_from_json(blob, j.at("rep").at("bn3"));
          r.conv1 = conv_from_json(blob, j.at("rep").at("conv1"));
          r.bn1 = bn_from_json(blob, j.at("rep").at("bn1"));
          if (j.at("rep").contains("id_bn")) r.id_bn = bn_from_json(blob, j.at("rep").at("id_bn"));
          r.validate();
          n.rep = std::move(r);
          break;
        }
        case NodeKind::maxpool:
          n.pool_kernel = j.at("pool").at("k").get<int>();
          n.pool_stride = j.at("pool").at("stride").get<int>();
          n.pool_pad = j.at("pool").at("pad").get<int>();
          break;
        case NodeKind::fake_quant:
          n.quant = quant_from_json(j.at("quant"));
          break;
        case NodeKind::add:
        case NodeKind::concat:
        case NodeKind::upsample:
          break;
      }
      g.nodes.push_back(std::move(n));
    }
    g.validate();
    return g;
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(Errc::model, std::string("malformed manifest: ") + e.what());
  }
}

void save_model(const ModelGraphF& g, const std::string& manifest_path,
                const std::string& weights_path) {
  WeightBlob blob;
  std::string text = manifest_to_json(g, blob);
  write_file_bytes(weights_path, blob.bytes);
  write_file_atomic(manifest_path, text);
}

ModelGraphF load_model(const std::string& manifest_path, const std::string& weights_path) {
  WeightBlob blob;
  blob.bytes = read_file_bytes(weights_path);
  return model_from_json(read_file_text(manifest_path), blob);
}

}  // namespace repdet
