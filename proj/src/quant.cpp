#include "repdet/quant.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace repdet {

const char* calib_method_name(CalibMethod m) {
  return m == CalibMethod::minmax ? "minmax" : "percentile";
}

CalibMethod calib_method_from_name(const std::string& name) {
  if (name == "minmax") return CalibMethod::minmax;
  if (name == "percentile") return CalibMethod::percentile;
  throw Error(Errc::usage, "unknown calibration method '" + name + "'");
}

namespace {

constexpr double kScaleFloor = 1e-8;

double percentile_linear(std::vector<double>& sorted_abs, double pct) {
  std::sort(sorted_abs.begin(), sorted_abs.end());
  const double rank = pct / 100.0 * double(sorted_abs.size() - 1);
  const size_t lo = size_t(std::floor(rank));
  const size_t hi = std::min(sorted_abs.size() - 1, lo + 1);
  const double frac = rank - double(lo);
  return sorted_abs[lo] * (1.0 - frac) + sorted_abs[hi] * frac;
}

}  // namespace

QuantParams calibrate_tensor(const std::vector<TensorF>& samples, CalibMethod method,
                             double pct) {
  if (samples.empty()) throw Error(Errc::usage, "calibrate_tensor needs at least one sample");
  if (method == CalibMethod::percentile && !(pct > 50.0 && pct <= 100.0))
    throw Error(Errc::usage, "percentile must lie in (50,100]");
  QuantParams q;
  double raw = 0;
  if (method == CalibMethod::minmax) {
    for (const auto& t : samples)
      for (float v : t.v) raw = std::max(raw, std::abs(double(v)));
  } else {
    std::vector<double> mags;
    for (const auto& t : samples)
      for (float v : t.v) mags.push_back(std::abs(double(v)));
    raw = percentile_linear(mags, pct);
  }
  q.scale = raw / q.qmax();
  if (q.scale < kScaleFloor) {
    q.scale = kScaleFloor;
    q.scale_floored = true;
  }
  return q;
}

QuantParams calibrate_weights(const TensorF& weight) {
  QuantParams q;
  const int oc = weight.shape.n;
  const int64_t per_oc = int64_t(weight.shape.c) * weight.shape.h * weight.shape.w;
  q.channel_scales.resize(size_t(oc));
  for (int c = 0; c < oc; ++c) {
    double m = 0;
    const float* w = weight.data() + int64_t(c) * per_oc;
    for (int64_t i = 0; i < per_oc; ++i) m = std::max(m, std::abs(double(w[i])));
    double s = m / q.qmax();
    if (s < kScaleFloor) {
      s = kScaleFloor;
      q.scale_floored = true;
    }
    q.channel_scales[size_t(c)] = s;
  }
  q.scale = *std::max_element(q.channel_scales.begin(), q.channel_scales.end());
  return q;
}

double fake_quantize_scalar(double x, const QuantParams& q) {
  double r = std::nearbyint(x / q.scale);  // default FP env rounds half to even
  r = std::min(double(q.qmax()), std::max(double(q.qmin()), r));
  return r * q.scale;
}

template <typename T>
Tensor<T> fake_quantize(const Tensor<T>& x, const QuantParams& q) {
  if (!(q.scale > 0)) throw Error(Errc::model, "fake_quantize needs scale > 0");
  Tensor<T> y(x.shape);
  const double lo = q.qmin(), hi = q.qmax();
  const double inv = 1.0 / q.scale;
  const int64_t total = x.size();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < total; ++i) {
    double r = std::nearbyint(double(x.v[size_t(i)]) * inv);
    r = std::min(hi, std::max(lo, r));
    y.v[size_t(i)] = T(r * q.scale);
  }
  return y;
}

template <typename T>
Tensor<T> fake_quantize_weights(const Tensor<T>& w, const QuantParams& q) {
  if (!q.per_channel()) return fake_quantize(w, q);
  if (int(q.channel_scales.size()) != w.shape.n)
    throw ShapeError("per-channel scale count mismatch");
  Tensor<T> y(w.shape);
  const double lo = q.qmin(), hi = q.qmax();
  const int64_t per_oc = int64_t(w.shape.c) * w.shape.h * w.shape.w;
  for (int oc = 0; oc < w.shape.n; ++oc) {
    const double s = q.channel_scales[size_t(oc)];
    const T* src = w.data() + int64_t(oc) * per_oc;
    T* dst = y.data() + int64_t(oc) * per_oc;
    for (int64_t i = 0; i < per_oc; ++i) {
      double r = std::nearbyint(double(src[i]) / s);
      r = std::min(hi, std::max(lo, r));
      dst[i] = T(r * s);
    }
  }
  return y;
}

SteResult fake_quantize_ste(const std::vector<double>& x, const QuantParams& q) {
  SteResult out;
  out.value.resize(x.size());
  out.grad_mask.resize(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    const double r = std::nearbyint(x[i] / q.scale);
    const bool inside = r >= q.qmin() && r <= q.qmax();
    out.value[i] = fake_quantize_scalar(x[i], q);
    out.grad_mask[i] = inside ? 1.0 : 0.0;
  }
  return out;
}

std::vector<std::string> quantizable_layers(const ModelGraphF& g) {
  std::vector<std::string> out;
  for (const auto& n : g.nodes)
    if (n.kind == NodeKind::conv || n.kind == NodeKind::head_branch) out.push_back(n.id);
  return out;
}

namespace {

void require_fused(const ModelGraphF& g, const char* who) {
  for (const auto& n : g.nodes)
    if (n.kind == NodeKind::repvgg_block)
      throw Error(Errc::model, std::string(who) +
                                   ": graph still contains repvgg_block nodes; run fuse_graph "
                                   "(CLI: fuse) first");
}

// Post-activation observation point of a layer: the act node immediately
// consuming it when that act is the sole consumer, else the layer itself.
std::string observation_id(const ModelGraphF& g, const std::string& layer_id) {
  const NodeSpec<float>* act_node = nullptr;
  size_t consumers = 0;
  for (const auto& n : g.nodes)
    for (const auto& in : n.inputs)
      if (in == layer_id) {
        ++consumers;
        act_node = n.kind == NodeKind::act ? &n : nullptr;
      }
  if (consumers == 1 && act_node != nullptr) return act_node->id;
  return layer_id;
}

double run_eval_score(const ModelGraphF& g, const EvalSet& eval) {
  std::vector<std::vector<Detection>> dets;
  for (const auto& input : eval.inputs) {
    std::set<std::string> capture;
    for (const auto& [level, tag] : g.heads) {
      capture.insert(tag.cls_id);
      capture.insert(tag.reg_id);
    }
    auto results = forward(g, std::map<std::string, TensorF>{{g.inputs[0], input}}, capture);
    auto head = collect_head_outputs(g, results);
    dets.push_back(nms(decode_predictions(head, eval.conf_thresh), eval.nms_iou, true));
  }
  return score_proxy(dets, eval.gts, 0.5);
}

}  // namespace

GraphQuantParams calibrate_graph(const ModelGraphF& g, const std::vector<TensorF>& calib_inputs,
                                 CalibMethod method, double pct) {
  require_fused(g, "calibrate_graph");
  if (calib_inputs.empty()) throw Error(Errc::usage, "calibration set is empty");
  if (g.inputs.size() != 1)
    throw Error(Errc::model, "calibrate_graph expects a single-input graph");

  GraphQuantParams out;
  const auto layers = quantizable_layers(g);
  std::set<std::string> capture;
  std::map<std::string, std::string> obs;
  for (const auto& id : layers) {
    obs[id] = observation_id(g, id);
    capture.insert(obs[id]);
  }

  std::map<std::string, std::vector<TensorF>> observed;
  for (const auto& input : calib_inputs) {
    auto results = forward(g, std::map<std::string, TensorF>{{g.inputs[0], input}}, capture);
    for (const auto& id : capture) observed[id].push_back(results.at(id));
  }
  for (const auto& id : layers) {
    out.weights[id] = calibrate_weights(g.find(id)->conv->weight);
    out.activations[id] = calibrate_tensor(observed.at(obs.at(id)), method, pct);
  }
  return out;
}

ModelGraphF quantize_graph(const ModelGraphF& g, const GraphQuantParams& params,
                           const std::set<std::string>& skip) {
  require_fused(g, "quantize_graph");
  const auto layers = quantizable_layers(g);
  std::map<std::string, std::string> obs_of_layer;  // observation id -> layer id
  for (const auto& id : layers) {
    if (skip.count(id)) continue;
    if (!params.weights.count(id) || !params.activations.count(id))
      throw Error(Errc::model, "missing quantization params for layer '" + id + "'");
    obs_of_layer[observation_id(g, id)] = id;
  }

  ModelGraphF out;
  out.inputs = g.inputs;
  out.outputs = g.outputs;
  out.heads = g.heads;
  out.num_classes = g.num_classes;
  out.reg_max = g.reg_max;

  std::map<std::string, std::string> rename;  // observation id -> fq id
  auto mapped = [&](const std::string& id) {
    auto it = rename.find(id);
    return it == rename.end() ? id : it->second;
  };

  for (const auto& n : g.nodes) {
    NodeSpec<float> m = n;
    for (auto& in : m.inputs) in = mapped(in);
    if ((m.kind == NodeKind::conv || m.kind == NodeKind::head_branch) && !skip.count(m.id) &&
        obs_of_layer.count(observation_id(g, m.id)) &&
        obs_of_layer.at(observation_id(g, m.id)) == m.id) {
      const QuantParams& wq = params.weights.at(m.id);
      m.conv->weight = fake_quantize_weights(m.conv->weight, wq);
      m.weight_quant = wq;
    }
    out.nodes.push_back(std::move(m));

    auto it = obs_of_layer.find(n.id);
    if (it != obs_of_layer.end()) {
      NodeSpec<float> fq;
      fq.id = n.id + ".fq";
      fq.kind = NodeKind::fake_quant;
      fq.inputs = {n.id};
      fq.quant = params.activations.at(it->second);
      out.nodes.push_back(std::move(fq));
      rename[n.id] = n.id + ".fq";
    }
  }
  for (auto& o : out.outputs) o = mapped(o);
  for (auto& [level, tag] : out.heads) {
    tag.cls_id = mapped(tag.cls_id);
    tag.reg_id = mapped(tag.reg_id);
  }
  out.validate();
  return out;
}

const char* sens_metric_name(SensMetric m) {
  switch (m) {
    case SensMetric::mse: return "mse";
    case SensMetric::snr: return "snr";
    case SensMetric::cosine: return "cosine";
    case SensMetric::score: return "score";
  }
  return "mse";
}

SensMetric sens_metric_from_name(const std::string& name) {
  if (name == "mse") return SensMetric::mse;
  if (name == "snr") return SensMetric::snr;
  if (name == "cosine") return SensMetric::cosine;
  if (name == "score") return SensMetric::score;
  throw Error(Errc::usage, "unknown sensitivity metric '" + name + "'");
}

namespace {

// most-sensitive-first comparison key
double sens_key(const SensitivityEntry& e, SensMetric m) {
  switch (m) {
    case SensMetric::mse: return -e.mse;
    case SensMetric::snr: return e.snr_db;
    case SensMetric::cosine: return e.cosine;
    case SensMetric::score: return -e.score_delta;
  }
  return 0;
}

void assign_ranks(std::vector<SensitivityEntry>& entries) {
  for (SensMetric m : {SensMetric::mse, SensMetric::snr, SensMetric::cosine, SensMetric::score}) {
    std::vector<int> order(entries.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return sens_key(entries[size_t(a)], m) < sens_key(entries[size_t(b)], m);
    });
    for (size_t r = 0; r < order.size(); ++r) {
      const int rank = int(r) + 1;
      switch (m) {
        case SensMetric::mse: entries[size_t(order[r])].rank_mse = rank; break;
        case SensMetric::snr: entries[size_t(order[r])].rank_snr = rank; break;
        case SensMetric::cosine: entries[size_t(order[r])].rank_cos = rank; break;
        case SensMetric::score: entries[size_t(order[r])].rank_score = rank; break;
      }
    }
  }
}

}  // namespace

std::vector<std::string> SensitivityReport::ranking(SensMetric metric) const {
  std::vector<int> order(entries.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return sens_key(entries[size_t(a)], metric) < sens_key(entries[size_t(b)], metric);
  });
  std::vector<std::string> out;
  for (int i : order) out.push_back(entries[size_t(i)].layer);
  return out;
}

std::string SensitivityReport::to_csv() const {
  std::ostringstream os;
  os << "layer_id,mse,snr_db,cosine,score_delta,rank_mse,rank_snr,rank_cos,rank_score\n";
  for (const auto& e : entries) {
    os << e.layer << "," << e.mse << "," << e.snr_db << "," << e.cosine << "," << e.score_delta
       << "," << e.rank_mse << "," << e.rank_snr << "," << e.rank_cos << "," << e.rank_score
       << "\n";
  }
  return os.str();
}

SensitivityReport sensitivity_scan(const ModelGraphF& g, const GraphQuantParams& params,
                                   const std::vector<TensorF>& calib_inputs, SensMetric primary,
                                   const std::optional<EvalSet>& eval) {
  require_fused(g, "sensitivity_scan");
  if (calib_inputs.empty()) throw Error(Errc::usage, "sensitivity_scan calibration set is empty");
  if (primary == SensMetric::score && !eval.has_value())
    throw Error(Errc::usage, "score metric needs a labeled evaluation set");

  const auto layers = quantizable_layers(g);
  std::set<std::string> all_layers(layers.begin(), layers.end());

  // float observations once
  std::set<std::string> capture;
  std::map<std::string, std::string> obs;
  for (const auto& id : layers) {
    obs[id] = observation_id(g, id);
    capture.insert(obs[id]);
  }
  std::vector<std::map<std::string, TensorF>> float_runs;
  for (const auto& input : calib_inputs)
    float_runs.push_back(
        forward(g, std::map<std::string, TensorF>{{g.inputs[0], input}}, capture));

  const double float_score = eval.has_value() ? run_eval_score(g, *eval) : 0.0;

  SensitivityReport report;
  for (const auto& id : layers) {
    std::set<std::string> skip = all_layers;
    skip.erase(id);
    ModelGraphF qg = quantize_graph(g, params, skip);
    const std::string q_out = obs.at(id) + ".fq";

    double se = 0, sig = 0, dot = 0, qq = 0;
    int64_t count = 0;
    for (size_t i = 0; i < calib_inputs.size(); ++i) {
      auto qres = forward(qg, std::map<std::string, TensorF>{{qg.inputs[0], calib_inputs[i]}},
                          {q_out});
      const TensorF& f = float_runs[i].at(obs.at(id));
      const TensorF& q = qres.at(q_out);
      for (int64_t k = 0; k < f.size(); ++k) {
        const double fv = f.v[size_t(k)], qv = q.v[size_t(k)];
        se += (fv - qv) * (fv - qv);
        sig += fv * fv;
        dot += fv * qv;
        qq += qv * qv;
      }
      count += f.size();
    }
    SensitivityEntry e;
    e.layer = id;
    e.mse = count > 0 ? se / double(count) : 0.0;
    e.snr_db = se > 0 ? std::min(kSnrCapDb, 10.0 * std::log10(sig / se)) : kSnrCapDb;
    e.cosine = (sig > 0 && qq > 0) ? dot / (std::sqrt(sig) * std::sqrt(qq)) : 1.0;
    if (eval.has_value()) e.score_delta = float_score - run_eval_score(qg, *eval);
    report.entries.push_back(std::move(e));
  }
  assign_ranks(report.entries);
  std::stable_sort(report.entries.begin(), report.entries.end(),
                   [&](const SensitivityEntry& a, const SensitivityEntry& b) {
                     return sens_key(a, primary) < sens_key(b, primary);
                   });
  return report;
}

PartialQuantResult partial_quantize(const ModelGraphF& g, const GraphQuantParams& params,
                                    const SensitivityReport& report, SensMetric metric,
                                    int float_top_k) {
  if (float_top_k < 0) throw Error(Errc::usage, "float_top_k must be >= 0");
  PartialQuantResult out;
  const auto ranking = report.ranking(metric);
  if (float_top_k >= int(ranking.size())) {
    out.graph = g;
    out.skipped = ranking;
    out.all_float = true;
    return out;
  }
  std::set<std::string> skip;
  for (int i = 0; i < float_top_k; ++i) {
    skip.insert(ranking[size_t(i)]);
    out.skipped.push_back(ranking[size_t(i)]);
  }
  out.graph = quantize_graph(g, params, skip);
  return out;
}

CwdResult cwd_loss(const TensorD& teacher_fm, const TensorD& student_fm, double temperature) {
  if (!(temperature > 0)) throw Error(Errc::model, "cwd_loss temperature must be > 0");
  if (!(teacher_fm.shape == student_fm.shape))
    throw ShapeError("cwd_loss feature-map shape mismatch " + teacher_fm.shape.str() + " vs " +
                     student_fm.shape.str());
  const double T = temperature;
  const int64_t hw = int64_t(teacher_fm.shape.h) * teacher_fm.shape.w;
  CwdResult out;
  out.grad = TensorD(student_fm.shape);

  std::vector<double> pt(static_cast<size_t>(hw)), ps(static_cast<size_t>(hw));
  for (int n = 0; n < teacher_fm.shape.n; ++n) {
    for (int c = 0; c < teacher_fm.shape.c; ++c) {
      const double* tv = teacher_fm.data() + teacher_fm.idx(n, c, 0, 0);
      const double* sv = student_fm.data() + student_fm.idx(n, c, 0, 0);
      double* gv = out.grad.data() + out.grad.idx(n, c, 0, 0);
      auto spatial_softmax = [&](const double* z, std::vector<double>& p) {
        double zmax = z[0];
        for (int64_t i = 0; i < hw; ++i) zmax = std::max(zmax, z[i]);
        double denom = 0;
        for (int64_t i = 0; i < hw; ++i) {
          p[size_t(i)] = std::exp((z[i] - zmax) / T);
          denom += p[size_t(i)];
        }
        for (auto& v : p) v /= denom;
      };
      spatial_softmax(tv, pt);
      spatial_softmax(sv, ps);
      for (int64_t i = 0; i < hw; ++i) {
        out.loss += T * T * pt[size_t(i)] *
                    (std::log(std::max(pt[size_t(i)], 1e-12)) -
                     std::log(std::max(ps[size_t(i)], 1e-12)));
        gv[i] = T * (ps[size_t(i)] - pt[size_t(i)]);
      }
    }
  }
  return out;
}

int64_t Histogram::total() const {
  int64_t t = 0;
  for (int64_t c : counts) t += c;
  return t;
}

Histogram activation_histogram(const ModelGraphF& g, const std::string& layer_id,
                               const std::vector<TensorF>& inputs, int bins) {
  if (bins < 1) throw Error(Errc::usage, "histogram needs bins >= 1");
  if (g.node_index(layer_id) < 0)
    throw Error(Errc::model, "histogram: no node '" + layer_id + "' in graph");
  if (inputs.empty()) throw Error(Errc::usage, "histogram input set is empty");
  const std::string obs = observation_id(g, layer_id);

  std::vector<TensorF> maps;
  for (const auto& input : inputs) {
    auto res = forward(g, std::map<std::string, TensorF>{{g.inputs[0], input}}, {obs});
    maps.push_back(res.at(obs));
  }
  Histogram h;
  h.lo = double(maps[0].v[0]);
  h.hi = h.lo;
  for (const auto& m : maps)
    for (float v : m.v) {
      h.lo = std::min(h.lo, double(v));
      h.hi = std::max(h.hi, double(v));
    }
  if (h.hi <= h.lo) h.hi = h.lo + 1.0;
  h.counts.assign(size_t(bins), 0);
  const double width = (h.hi - h.lo) / bins;
  for (const auto& m : maps)
    for (float v : m.v) {
      int b = int((double(v) - h.lo) / width);
      b = std::max(0, std::min(bins - 1, b));
      ++h.counts[size_t(b)];
    }
  return h;
}

template Tensor<float> fake_quantize<float>(const Tensor<float>&, const QuantParams&);
template Tensor<double> fake_quantize<double>(const Tensor<double>&, const QuantParams&);
template Tensor<float> fake_quantize_weights<float>(const Tensor<float>&, const QuantParams&);
template Tensor<double> fake_quantize_weights<double>(const Tensor<double>&, const QuantParams&);

}  // namespace repdet
