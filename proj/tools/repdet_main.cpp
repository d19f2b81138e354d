// repdet command-line tool: model fusion and equivalence checks, inference,
// calibration and quantization, sensitivity analysis, benchmarking, the
// training sandbox, and gradient checks.
#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>

#include "repdet/builders.hpp"
#include "repdet/io.hpp"
#include "repdet/manifest.hpp"
#include "repdet/pipeline.hpp"
#include "repdet/quant.hpp"
#include "repdet/reparam.hpp"
#include "repdet/sandbox.hpp"

using nlohmann::json;
using namespace repdet;

namespace {

struct ModelRef {
  std::string manifest, weights;
  std::string preset;  // n/t/s/m/l, used when no manifest is given
  uint64_t seed = 1;
  int num_classes = 80;
};

void add_model_options(CLI::App* cmd, ModelRef& ref) {
  cmd->add_option("--model", ref.manifest, "model manifest (JSON)");
  cmd->add_option("--weights", ref.weights, "weight blob for --model");
  cmd->add_option("--preset", ref.preset, "build a seeded random model instead: n|t|s|m|l");
  cmd->add_option("--seed", ref.seed, "seed for --preset weights and random inputs");
  cmd->add_option("--classes", ref.num_classes, "class count for --preset");
}

ModelGraphF resolve_model(const ModelRef& ref) {
  if (!ref.manifest.empty()) {
    if (ref.weights.empty())
      throw Error(Errc::usage, "--model requires --weights");
    return load_model(ref.manifest, ref.weights);
  }
  if (ref.preset.empty())
    throw Error(Errc::usage, "give either --model/--weights or --preset");
  if (ref.preset.size() != 1)
    throw Error(Errc::usage, "--preset expects one of n/t/s/m/l");
  SplitMix64 rng(ref.seed);
  return build_detector<float>(preset_for_scale(ref.preset[0], ref.num_classes), rng);
}

// --json prints the machine-readable record; --out writes it atomically.
struct Reporter {
  bool as_json = false;
  std::string out_path;

  void add_flags(CLI::App* cmd) {
    cmd->add_flag("--json", as_json, "machine-readable stdout");
    cmd->add_option("--out", out_path, "write the report to this path (atomic)");
  }

  void emit(const json& report) const {
    if (!out_path.empty()) write_file_atomic(out_path, report.dump(2) + "\n");
    if (as_json) {
      std::cout << report.dump(2) << "\n";
    } else {
      for (auto it = report.begin(); it != report.end(); ++it)
        std::cout << it.key() << ": " << it.value().dump() << "\n";
    }
  }
};

std::vector<TensorF> load_inputs(const std::string& dir, int target, int border, int limit) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw Error(Errc::io, "'" + dir + "' is not a directory");
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto ext = entry.path().extension().string();
    if (ext == ".ppm" || ext == ".bin" || ext == ".tensor") files.push_back(entry.path().string());
  }
  std::sort(files.begin(), files.end());
  std::vector<TensorF> inputs;
  for (const auto& f : files) {
    if (limit > 0 && int(inputs.size()) >= limit) break;
    if (f.size() > 4 && f.substr(f.size() - 4) == ".ppm") {
      LetterboxSpec spec;
      spec.target_size = target;
      spec.border = border;
      TensorF boxed = letterbox(read_ppm(f), spec).image;
      for (auto& v : boxed.v) v /= 255.f;
      inputs.push_back(std::move(boxed));
    } else {
      inputs.push_back(read_tensor_file(f));
    }
  }
  if (inputs.empty()) throw Error(Errc::io, "no .ppm or .bin inputs found in '" + dir + "'");
  return inputs;
}

json quant_params_json(const QuantParams& q) {
  json j{{"scale", q.scale},
         {"zero_point", q.zero_point},
         {"bits", q.bits},
         {"symmetric", q.symmetric}};
  if (q.per_channel()) j["channel_scales"] = q.channel_scales;
  if (q.scale_floored) j["scale_floored"] = true;
  return j;
}

json prediction_to_json(const Prediction& p) {
  return json{{"num_classes", p.num_classes},
              {"reg_max", p.reg_max},
              {"cls_logits", p.cls_logits},
              {"reg", p.reg}};
}

Prediction prediction_from_json(const json& j) {
  Prediction p;
  p.num_classes = j.at("num_classes").get<int>();
  p.reg_max = j.at("reg_max").get<int>();
  p.cls_logits = j.at("cls_logits").get<std::vector<double>>();
  p.reg = j.at("reg").get<std::vector<double>>();
  return p;
}

// ---- gradcheck harness -----------------------------------------------------
// Central differences, h = 1e-3, relative error floored at unit scale.

double relerr(double analytic, double fd) {
  return std::abs(analytic - fd) / std::max({1.0, std::abs(analytic), std::abs(fd)});
}

template <typename F>
double fd1(F f, double x, double h = 1e-3) {
  return (f(x + h) - f(x - h)) / (2 * h);
}

Box random_gradcheck_boxes(SplitMix64& rng, Box& gt, bool siou_safe) {
  for (;;) {
    const double gw = rng.uniform(1.0, 6.0), gh = rng.uniform(1.0, 6.0);
    const double gx = rng.uniform(-4.0, 4.0), gy = rng.uniform(-4.0, 4.0);
    gt = Box{gx, gy, gx + gw, gy + gh};
    const double pw = rng.uniform(0.5, 6.0), ph = rng.uniform(0.5, 6.0);
    const double px = rng.uniform(-6.0, 6.0), py = rng.uniform(-6.0, 6.0);
    Box pred{px, py, px + pw, py + ph};
    const double m = 0.05;
    bool near = std::abs(pred.x1 - gt.x1) < m || std::abs(pred.x2 - gt.x2) < m ||
                std::abs(pred.y1 - gt.y1) < m || std::abs(pred.y2 - gt.y2) < m ||
                std::abs(pred.x2 - gt.x1) < m || std::abs(pred.x1 - gt.x2) < m ||
                std::abs(pred.y2 - gt.y1) < m || std::abs(pred.y1 - gt.y2) < m ||
                std::abs(pred.w() - gt.w()) < m || std::abs(pred.h() - gt.h()) < m;
    if (near) continue;
    if (siou_safe) {
      const double dx = gt.cx() - pred.cx(), dy = gt.cy() - pred.cy();
      const double sigma = std::sqrt(dx * dx + dy * dy);
      if (sigma < 0.2) continue;
      const double sin_ay = std::abs(dy) / sigma;
      if (std::abs(sin_ay - 0.70710678118654752) < 0.05) continue;
      if (sin_ay > 0.995 || sin_ay < 0.005) continue;
    }
    return pred;
  }
}

double gradcheck_worst(const std::string& kind, int trials, uint64_t seed) {
  SplitMix64 rng(seed);
  auto sigmoid = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
  double worst = 0;

  const bool is_cls =
      kind == "focal" || kind == "qfl" || kind == "vfl" || kind == "poly1";
  const bool is_iou =
      kind == "giou" || kind == "ciou" || kind == "diou" || kind == "siou";

  for (int t = 0; t < trials; ++t) {
    if (is_cls) {
      const ClsLossKind k = cls_loss_from_name(kind);
      const double z = rng.uniform(-4.0, 4.0), q = rng.uniform(0.0, 1.0);
      const double g = cls_loss(k, sigmoid(z), q).grad;
      const double fd = fd1([&](double v) { return cls_loss(k, sigmoid(v), q).loss; }, z);
      worst = std::max(worst, relerr(g, fd));
    } else if (is_iou) {
      const IouLossKind k = iou_loss_from_name(kind);
      Box gt;
      Box pred = random_gradcheck_boxes(rng, gt, k == IouLossKind::siou);
      const BoxLoss l = iou_loss(k, pred, gt);
      const int coord = rng.uniform_int(4);
      const double fd = fd1(
          [&](double v) {
            Box p = pred;
            (&p.x1)[coord] = v;
            return iou_loss(k, p, gt).loss;
          },
          (&pred.x1)[coord]);
      worst = std::max(worst, relerr(l.grad[size_t(coord)], fd));
    } else if (kind == "dfl") {
      const int bins = 2 + rng.uniform_int(16);
      std::vector<double> z(static_cast<size_t>(bins));
      for (auto& v : z) v = rng.uniform(-3.0, 3.0);
      const double y = rng.uniform(0.0, double(bins - 1));
      const VecLoss l = dfl_loss(z, y);
      const int k = rng.uniform_int(bins);
      const double fd = fd1(
          [&](double v) {
            std::vector<double> zz = z;
            zz[size_t(k)] = v;
            return dfl_loss(zz, y).loss;
          },
          z[size_t(k)]);
      worst = std::max(worst, relerr(l.grad[size_t(k)], fd));
    } else if (kind == "object") {
      const double z = rng.uniform(-5.0, 5.0), target = rng.uniform(0.0, 1.0);
      const double fd = fd1([&](double v) { return object_loss(v, target).loss; }, z);
      worst = std::max(worst, relerr(object_loss(z, target).grad, fd));
    } else if (kind == "kd") {
      Prediction s, tch;
      s.num_classes = tch.num_classes = 2;
      s.reg_max = tch.reg_max = 3;
      s.cls_logits.resize(4);
      tch.cls_logits.resize(4);
      s.reg.resize(2 * 4 * 4);
      tch.reg.resize(2 * 4 * 4);
      for (auto* v : {&s.cls_logits, &tch.cls_logits, &s.reg, &tch.reg})
        for (auto& z : *v) z = rng.uniform(-2.5, 2.5);
      const double T = rng.uniform(0.5, 3.0);
      const KdLoss l = kd_loss(s, tch, T);
      const bool probe_cls = rng.uniform() < 0.5;
      if (probe_cls) {
        const int i = rng.uniform_int(int(s.cls_logits.size()));
        const double fd = fd1(
            [&](double v) {
              Prediction s2 = s;
              s2.cls_logits[size_t(i)] = v;
              return kd_loss(s2, tch, T).loss;
            },
            s.cls_logits[size_t(i)]);
        worst = std::max(worst, relerr(l.grad_cls[size_t(i)], fd));
      } else {
        const int i = rng.uniform_int(int(s.reg.size()));
        const double fd = fd1(
            [&](double v) {
              Prediction s2 = s;
              s2.reg[size_t(i)] = v;
              return kd_loss(s2, tch, T).loss;
            },
            s.reg[size_t(i)]);
        worst = std::max(worst, relerr(l.grad_reg[size_t(i)], fd));
      }
    } else if (kind == "cwd") {
      TensorD tm = random_tensor<double>({1, 2, 3, 3}, rng);
      TensorD sm = random_tensor<double>({1, 2, 3, 3}, rng);
      const double T = rng.uniform(0.5, 3.0);
      const CwdResult l = cwd_loss(tm, sm, T);
      const int i = rng.uniform_int(int(sm.size()));
      const double fd = fd1(
          [&](double v) {
            TensorD s2 = sm;
            s2.v[size_t(i)] = v;
            return cwd_loss(tm, s2, T).loss;
          },
          sm.v[size_t(i)]);
      worst = std::max(worst, relerr(l.grad.v[size_t(i)], fd));
    } else {
      throw Error(Errc::usage, "unknown loss kind '" + kind + "'");
    }
  }
  return worst;
}

// ---- subcommand wiring -------------------------------------------------------

int run(int argc, char** argv) {
  CLI::App app{"repdet: re-parameterizable detector components"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "flat key=value config; command-line flags win");
  app.failure_message(CLI::FailureMessage::help);

  // fuse ---------------------------------------------------------------
  auto* fuse_cmd = app.add_subcommand("fuse", "fold every rep block into a single conv");
  static ModelRef fuse_ref;
  static std::string fuse_out_model, fuse_out_weights;
  static Reporter fuse_rep;
  add_model_options(fuse_cmd, fuse_ref);
  fuse_cmd->add_option("--out-model", fuse_out_model, "fused manifest path")->required();
  fuse_cmd->add_option("--out-weights", fuse_out_weights, "fused weight blob path")->required();
  fuse_rep.add_flags(fuse_cmd);
  fuse_cmd->callback([] {
    ModelGraphF g = resolve_model(fuse_ref);
    int risky = 0;
    for (const auto& n : g.nodes) {
      if (!n.rep) continue;
      for (const auto* bn : {&n.rep->bn3, &n.rep->bn1}) risky += int(fold_risk_channels(*bn).size());
      if (n.rep->id_bn) risky += int(fold_risk_channels(*n.rep->id_bn).size());
    }
    if (risky > 0)
      std::cerr << "warning: " << risky
                << " channel(s) fold with var+eps < 1e-10; expect amplified weights\n";
    ModelGraphF fused = fuse_graph(g);
    save_model(fused, fuse_out_model, fuse_out_weights);
    fuse_rep.emit(json{{"nodes_before", g.nodes.size()},
                       {"nodes_after", fused.nodes.size()},
                       {"params_after", param_count(fused)},
                       {"risk_channels", risky},
                       {"out_model", fuse_out_model},
                       {"out_weights", fuse_out_weights}});
  });

  // equiv --------------------------------------------------------------
  auto* equiv_cmd =
      app.add_subcommand("equiv", "multi-branch vs fused forward equivalence check");
  static ModelRef equiv_ref;
  static int equiv_trials = 10, equiv_hw = 64;
  static double equiv_tol = 1e-5;
  static Reporter equiv_rep;
  add_model_options(equiv_cmd, equiv_ref);
  equiv_cmd->add_option("--trials", equiv_trials, "random inputs to try");
  equiv_cmd->add_option("--tol", equiv_tol, "max-abs tolerance");
  equiv_cmd->add_option("--size", equiv_hw, "input height/width");
  equiv_rep.add_flags(equiv_cmd);
  equiv_cmd->callback([] {
    ModelGraphF g = resolve_model(equiv_ref);
    ModelGraphF fused = fuse_graph(g);
    SplitMix64 rng(equiv_ref.seed ^ 0x51e9d1);
    double worst = 0;
    for (int t = 0; t < equiv_trials; ++t) {
      TensorF x = random_tensor<float>({1, 3, equiv_hw, equiv_hw}, rng);
      auto a = forward(g, x);
      auto b = forward(fused, x);
      for (size_t i = 0; i < g.outputs.size(); ++i)
        worst = std::max(worst, max_abs_diff(a.at(g.outputs[i]), b.at(fused.outputs[i])));
    }
    const bool pass = worst <= equiv_tol;
    equiv_rep.emit(json{{"trials", equiv_trials},
                        {"input_hw", equiv_hw},
                        {"max_abs_diff", worst},
                        {"tol", equiv_tol},
                        {"pass", pass}});
    if (!pass) throw Error(Errc::computation, "fusion equivalence above tolerance");
  });

  // infer --------------------------------------------------------------
  auto* infer_cmd = app.add_subcommand("infer", "detect objects in a PPM image");
  static ModelRef infer_ref;
  static std::string infer_image;
  static double infer_conf = 0.25, infer_iou = 0.45;
  static int infer_size = 640, infer_border = 0;
  static Reporter infer_rep;
  add_model_options(infer_cmd, infer_ref);
  infer_cmd->add_option("--image", infer_image, "input image (binary P6 PPM)")->required();
  infer_cmd->add_option("--conf", infer_conf, "score threshold");
  infer_cmd->add_option("--iou", infer_iou, "NMS IoU threshold");
  infer_cmd->add_option("--size", infer_size, "letterbox target size");
  infer_cmd->add_option("--border", infer_border, "gray border width (e.g. 0, 3, 16)");
  infer_rep.add_flags(infer_cmd);
  infer_cmd->callback([] {
    ModelGraphF g = resolve_model(infer_ref);
    LetterboxSpec spec;
    spec.target_size = infer_size;
    spec.border = infer_border;
    LetterboxResult lb = letterbox(read_ppm(infer_image), spec);
    TensorF x = lb.image;
    for (auto& v : x.v) v /= 255.f;

    std::set<std::string> capture;
    for (const auto& [level, tag] : g.heads) {
      capture.insert(tag.cls_id);
      capture.insert(tag.reg_id);
    }
    auto results = forward(g, std::map<std::string, TensorF>{{g.inputs[0], x}}, capture);
    auto dets = nms(decode_predictions(collect_head_outputs(g, results), infer_conf), infer_iou);

    json arr = json::array();
    for (const auto& d : dets) {
      const Box b = lb.transform.to_image(d.box);
      arr.push_back(json{{"box", {b.x1, b.y1, b.x2, b.y2}},
                         {"score", d.score},
                         {"class", d.class_id}});
    }
    if (infer_rep.as_json || !infer_rep.out_path.empty()) {
      infer_rep.emit(json{{"image", infer_image}, {"count", dets.size()}, {"detections", arr}});
    } else {
      for (const auto& d : arr) std::cout << d.dump() << "\n";  // JSON lines
    }
  });

  // calibrate ------------------------------------------------------------
  auto* calib_cmd = app.add_subcommand("calibrate", "collect INT8 scales over a sample set");
  static ModelRef calib_ref;
  static std::string calib_dir, calib_method = "minmax";
  static double calib_pct = 99.99;
  static int calib_size = 640, calib_border = 0, calib_limit = 0;
  static Reporter calib_rep;
  add_model_options(calib_cmd, calib_ref);
  calib_cmd->add_option("--calib", calib_dir, "directory of .ppm images or .bin tensors")
      ->required();
  calib_cmd->add_option("--method", calib_method, "minmax|percentile");
  calib_cmd->add_option("--pct", calib_pct, "percentile (percentile method)");
  calib_cmd->add_option("--size", calib_size, "letterbox size for .ppm inputs");
  calib_cmd->add_option("--border", calib_border, "letterbox border for .ppm inputs");
  calib_cmd->add_option("--limit", calib_limit, "use at most this many samples");
  calib_rep.add_flags(calib_cmd);
  calib_cmd->callback([] {
    ModelGraphF g = resolve_model(calib_ref);
    auto inputs = load_inputs(calib_dir, calib_size, calib_border, calib_limit);
    GraphQuantParams p =
        calibrate_graph(g, inputs, calib_method_from_name(calib_method), calib_pct);
    json weights = json::object(), acts = json::object();
    for (const auto& [id, q] : p.weights) weights[id] = quant_params_json(q);
    for (const auto& [id, q] : p.activations) acts[id] = quant_params_json(q);
    calib_rep.emit(json{{"method", calib_method},
                        {"pct", calib_pct},
                        {"samples", inputs.size()},
                        {"weights", weights},
                        {"activations", acts}});
  });

  // sensitivity ----------------------------------------------------------
  auto* sens_cmd = app.add_subcommand("sensitivity", "per-layer quantization sensitivity scan");
  static ModelRef sens_ref;
  static std::string sens_dir, sens_metric = "mse", sens_method = "minmax", sens_csv;
  static double sens_pct = 99.99;
  static int sens_size = 640, sens_border = 0, sens_limit = 0;
  static Reporter sens_rep;
  add_model_options(sens_cmd, sens_ref);
  sens_cmd->add_option("--calib", sens_dir, "directory of .ppm images or .bin tensors")
      ->required();
  sens_cmd->add_option("--metric", sens_metric, "mse|snr|cosine (score needs a labeled set)");
  sens_cmd->add_option("--method", sens_method, "minmax|percentile");
  sens_cmd->add_option("--pct", sens_pct, "percentile (percentile method)");
  sens_cmd->add_option("--size", sens_size, "letterbox size for .ppm inputs");
  sens_cmd->add_option("--border", sens_border, "letterbox border for .ppm inputs");
  sens_cmd->add_option("--limit", sens_limit, "use at most this many samples");
  sens_cmd->add_option("--csv", sens_csv, "also write the report as CSV");
  sens_rep.add_flags(sens_cmd);
  sens_cmd->callback([] {
    ModelGraphF g = resolve_model(sens_ref);
    auto inputs = load_inputs(sens_dir, sens_size, sens_border, sens_limit);
    GraphQuantParams p = calibrate_graph(g, inputs, calib_method_from_name(sens_method), sens_pct);
    SensitivityReport rep =
        sensitivity_scan(g, p, inputs, sens_metric_from_name(sens_metric));
    if (!sens_csv.empty()) write_file_atomic(sens_csv, rep.to_csv());
    json rows = json::array();
    for (const auto& e : rep.entries)
      rows.push_back(json{{"layer", e.layer},
                          {"mse", e.mse},
                          {"snr_db", e.snr_db},
                          {"cosine", e.cosine},
                          {"score_delta", e.score_delta},
                          {"rank_mse", e.rank_mse},
                          {"rank_snr", e.rank_snr},
                          {"rank_cos", e.rank_cos},
                          {"rank_score", e.rank_score}});
    sens_rep.emit(json{{"metric", sens_metric}, {"layers", rows}});
  });

  // ptq --------------------------------------------------------------------
  auto* ptq_cmd = app.add_subcommand("ptq", "post-training quantization with top-k float fallback");
  static ModelRef ptq_ref;
  static std::string ptq_dir, ptq_metric = "mse", ptq_method = "minmax";
  static std::string ptq_out_model, ptq_out_weights;
  static double ptq_pct = 99.99;
  static int ptq_k = 6, ptq_size = 640, ptq_border = 0, ptq_limit = 0;
  static Reporter ptq_rep;
  add_model_options(ptq_cmd, ptq_ref);
  ptq_cmd->add_option("--calib", ptq_dir, "directory of .ppm images or .bin tensors")->required();
  ptq_cmd->add_option("--skip-top-k", ptq_k, "sensitive layers kept in float");
  ptq_cmd->add_option("--metric", ptq_metric, "ranking metric: mse|snr|cosine");
  ptq_cmd->add_option("--method", ptq_method, "minmax|percentile");
  ptq_cmd->add_option("--pct", ptq_pct, "percentile (percentile method)");
  ptq_cmd->add_option("--size", ptq_size, "letterbox size for .ppm inputs");
  ptq_cmd->add_option("--border", ptq_border, "letterbox border for .ppm inputs");
  ptq_cmd->add_option("--limit", ptq_limit, "use at most this many samples");
  ptq_cmd->add_option("--out-model", ptq_out_model, "quantized manifest path")->required();
  ptq_cmd->add_option("--out-weights", ptq_out_weights, "quantized weight blob path")->required();
  ptq_rep.add_flags(ptq_cmd);
  ptq_cmd->callback([] {
    ModelGraphF g = resolve_model(ptq_ref);
    auto inputs = load_inputs(ptq_dir, ptq_size, ptq_border, ptq_limit);
    GraphQuantParams p = calibrate_graph(g, inputs, calib_method_from_name(ptq_method), ptq_pct);
    SensitivityReport rep = sensitivity_scan(g, p, inputs, sens_metric_from_name(ptq_metric));
    PartialQuantResult out =
        partial_quantize(g, p, rep, sens_metric_from_name(ptq_metric), ptq_k);
    if (out.all_float)
      std::cerr << "warning: skip-top-k >= layer count, emitting the float graph\n";
    save_model(out.graph, ptq_out_model, ptq_out_weights);
    ptq_rep.emit(json{{"skip_top_k", ptq_k},
                      {"metric", ptq_metric},
                      {"skipped", out.skipped},
                      {"all_float", out.all_float},
                      {"out_model", ptq_out_model},
                      {"out_weights", ptq_out_weights}});
  });

  // bench --------------------------------------------------------------------
  auto* bench_cmd = app.add_subcommand("bench", "forward latency/throughput measurement");
  static ModelRef bench_ref;
  static std::string bench_batches = "1,32";
  static int bench_iters = 50, bench_hw = 64;
  static bool bench_fused = false;
  static Reporter bench_rep;
  add_model_options(bench_cmd, bench_ref);
  bench_cmd->add_option("--batch", bench_batches, "comma-separated batch sizes");
  bench_cmd->add_option("--iters", bench_iters, "timed iterations per batch size");
  bench_cmd->add_option("--size", bench_hw, "input height/width");
  bench_cmd->add_flag("--fused", bench_fused, "fuse the graph before timing");
  bench_rep.add_flags(bench_cmd);
  bench_cmd->callback([] {
    ModelGraphF g = resolve_model(bench_ref);
    if (bench_fused) g = fuse_graph(g);
    std::vector<int> batches;
    for (size_t pos = 0; pos < bench_batches.size();) {
      size_t comma = bench_batches.find(',', pos);
      if (comma == std::string::npos) comma = bench_batches.size();
      batches.push_back(std::stoi(bench_batches.substr(pos, comma - pos)));
      pos = comma + 1;
    }
    BenchReport rep = bench(g, batches, bench_iters, bench_hw);
    if (rep.graph_has_rep_blocks)
      std::cerr << "warning: timing an unfused graph; pass --fused for the deployment form\n";
    json rows = json::array();
    for (const auto& r : rep.rows)
      rows.push_back(json{{"batch", r.batch},
                          {"ms_median", r.ms_median},
                          {"items_per_s", r.items_per_s},
                          {"iters", r.iters}});
    bench_rep.emit(json{{"input_hw", bench_hw},
                        {"fused", !rep.graph_has_rep_blocks},
                        {"rows", rows}});
  });

  // sandbox ----------------------------------------------------------------
  auto* sand_cmd = app.add_subcommand("sandbox", "gradient-descent fit of the detection objective");
  static SandboxConfig sand_cfg;
  static std::vector<std::string> sand_gts;
  static std::string sand_curve, sand_teacher_in, sand_pred_out;
  static std::string sand_assigner = "tal", sand_warm = "none";
  static std::string sand_cls = "vfl", sand_reg = "siou";
  static uint64_t sand_seed = 1;
  static double sand_alpha_start = 0.0, sand_alpha_end = 0.0;
  static Reporter sand_rep;
  sand_cmd->add_option("--grid", sand_cfg.grid_h, "square anchor grid side");
  sand_cmd->add_option("--classes", sand_cfg.num_classes, "class count");
  sand_cmd->add_option("--reg-max", sand_cfg.reg_max, "bins-1 per side (0 = plain distances)");
  sand_cmd->add_option("--steps", sand_cfg.steps, "gradient steps");
  sand_cmd->add_option("--lr", sand_cfg.lr, "learning rate");
  sand_cmd->add_option("--assigner", sand_assigner, "tal|atss|simota");
  sand_cmd->add_option("--warmup", sand_warm, "warm-up assigner: none|atss|simota");
  sand_cmd->add_option("--warmup-epochs", sand_cfg.warmup_epochs, "steps under the warm-up assigner");
  sand_cmd->add_option("--cls-loss", sand_cls, "focal|qfl|vfl|poly1");
  sand_cmd->add_option("--reg-loss", sand_reg, "giou|ciou|diou|siou");
  sand_cmd->add_option("--lambda", sand_cfg.loss.weights.lambda_reg, "regression weight");
  sand_cmd->add_option("--mu", sand_cfg.loss.weights.mu_obj, "object-loss weight (0 disables)");
  sand_cmd->add_option("--gt", sand_gts, "ground truth: x1:y1:x2:y2:class (repeatable)");
  sand_cmd->add_option("--seed", sand_seed, "seed (reserved for randomized variants)");
  sand_cmd->add_option("--alpha-start", sand_alpha_start, "distillation weight at step 0");
  sand_cmd->add_option("--alpha-end", sand_alpha_end, "distillation weight at the last step");
  sand_cmd->add_option("--temperature", sand_cfg.distill.temperature, "distillation temperature");
  sand_cmd->add_option("--teacher", sand_teacher_in, "teacher prediction JSON from --save-pred");
  sand_cmd->add_option("--save-pred", sand_pred_out, "write the final prediction JSON here");
  sand_cmd->add_option("--curve", sand_curve, "write the loss curve CSV here");
  sand_cmd->add_flag("--qat", sand_cfg.qat, "straight-through fake quantizers on the parameters");
  sand_cmd->add_option("--qat-scale", sand_cfg.qat_scale, "parameter quantizer scale");
  sand_cmd->add_option("--cwd-weight", sand_cfg.cwd_weight, "channel-distillation weight (QAT)");
  sand_rep.add_flags(sand_cmd);
  sand_cmd->callback([] {
    sand_cfg.grid_w = sand_cfg.grid_h;
    sand_cfg.main = assign_kind_from_name(sand_assigner);
    sand_cfg.warm = assign_kind_from_name(sand_warm);
    sand_cfg.loss.cls_kind = cls_loss_from_name(sand_cls);
    sand_cfg.loss.reg_kind = iou_loss_from_name(sand_reg);
    sand_cfg.loss.use_dfl = sand_cfg.reg_max > 0;
    sand_cfg.loss.use_obj = sand_cfg.loss.weights.mu_obj > 0;
    sand_cfg.distill.alpha_start = sand_alpha_start;
    sand_cfg.distill.alpha_end = sand_alpha_end;
    sand_cfg.distill.total_steps = sand_cfg.steps;

    std::vector<GtBox> gts;
    for (const auto& spec : sand_gts) {
      GtBox gt;
      if (std::sscanf(spec.c_str(), "%lf:%lf:%lf:%lf:%d", &gt.box.x1, &gt.box.y1, &gt.box.x2,
                      &gt.box.y2, &gt.class_id) != 5)
        throw Error(Errc::usage, "--gt expects x1:y1:x2:y2:class, got '" + spec + "'");
      gts.push_back(gt);
    }

    Prediction teacher;
    const bool has_teacher = !sand_teacher_in.empty();
    if (has_teacher) {
      try {
        teacher = prediction_from_json(json::parse(read_file_text(sand_teacher_in)));
      } catch (const json::exception& e) {
        throw Error(Errc::io, std::string("teacher file is not a prediction JSON: ") + e.what());
      }
    }
    if (has_teacher && sand_alpha_start <= 0.0 && sand_cfg.cwd_weight <= 0.0)
      std::cerr << "warning: teacher given but alpha-start and cwd-weight are zero\n";

    SandboxResult r = sandbox_fit(sand_cfg, gts, has_teacher ? &teacher : nullptr);

    if (!sand_curve.empty()) {
      std::string csv = "step,det_loss,total_loss,mean_pos_iou\n";
      for (size_t i = 0; i < r.det_curve.size(); ++i)
        csv += std::to_string(i) + "," + std::to_string(r.det_curve[i]) + "," +
               std::to_string(r.total_curve[i]) + "," + std::to_string(r.iou_curve[i]) + "\n";
      write_file_atomic(sand_curve, csv);
    }
    if (!sand_pred_out.empty())
      write_file_atomic(sand_pred_out, prediction_to_json(r.final_pred).dump());
    sand_rep.emit(json{{"steps", r.steps_run},
                       {"initial_det", r.initial_det},
                       {"final_det", r.final_det},
                       {"final_mean_pos_iou", r.iou_curve.back()},
                       {"ratio", r.initial_det > 0 ? r.final_det / r.initial_det : 0.0}});
  });

  // gradcheck -----------------------------------------------------------------
  auto* grad_cmd = app.add_subcommand("gradcheck", "analytic gradients vs central differences");
  static std::string grad_kind;
  static int grad_trials = 1000;
  static double grad_tol = 1e-4;
  static uint64_t grad_seed = 1;
  static Reporter grad_rep;
  grad_cmd
      ->add_option("--loss", grad_kind,
                   "focal|qfl|vfl|poly1|giou|ciou|diou|siou|dfl|object|kd|cwd")
      ->required();
  grad_cmd->add_option("--trials", grad_trials, "random sample count");
  grad_cmd->add_option("--tol", grad_tol, "worst relative error allowed");
  grad_cmd->add_option("--seed", grad_seed, "sampler seed");
  grad_rep.add_flags(grad_cmd);
  grad_cmd->callback([] {
    const double worst = gradcheck_worst(grad_kind, grad_trials, grad_seed);
    const bool pass = worst <= grad_tol;
    grad_rep.emit(json{{"loss", grad_kind},
                       {"trials", grad_trials},
                       {"worst_rel_err", worst},
                       {"tol", grad_tol},
                       {"pass", pass}});
    if (!pass) throw Error(Errc::computation, "gradient check above tolerance");
  });

  // hist ----------------------------------------------------------------------
  auto* hist_cmd = app.add_subcommand("hist", "post-activation histogram of one layer");
  static ModelRef hist_ref;
  static std::string hist_dir, hist_layer;
  static int hist_bins = 32, hist_size = 640, hist_border = 0, hist_limit = 0;
  static Reporter hist_rep;
  add_model_options(hist_cmd, hist_ref);
  hist_cmd->add_option("--layer", hist_layer, "node id of the layer")->required();
  hist_cmd->add_option("--calib", hist_dir, "directory of .ppm images or .bin tensors")
      ->required();
  hist_cmd->add_option("--bins", hist_bins, "bin count");
  hist_cmd->add_option("--size", hist_size, "letterbox size for .ppm inputs");
  hist_cmd->add_option("--border", hist_border, "letterbox border for .ppm inputs");
  hist_cmd->add_option("--limit", hist_limit, "use at most this many samples");
  hist_rep.add_flags(hist_cmd);
  hist_cmd->callback([] {
    ModelGraphF g = resolve_model(hist_ref);
    auto inputs = load_inputs(hist_dir, hist_size, hist_border, hist_limit);
    Histogram h = activation_histogram(g, hist_layer, inputs, hist_bins);
    hist_rep.emit(json{{"layer", hist_layer},
                       {"lo", h.lo},
                       {"hi", h.hi},
                       {"counts", h.counts},
                       {"total", h.total()}});
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return int(Errc::usage);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return int(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return int(Errc::computation);
  }
}
