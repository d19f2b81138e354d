#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracles/fd.hpp"
#include "oracles/pathological.hpp"
#include "repdet/quant.hpp"

using namespace repdet;

TEST_CASE("calibrate_tensor: minmax, percentile outlier clipping, zero floor") {
  TensorF ramp({1, 1, 1, 9});
  ramp.v = {-1.f, -0.75f, -0.5f, -0.25f, 0.f, 0.25f, 0.5f, 0.75f, 1.f};
  QuantParams mm = calibrate_tensor({ramp}, CalibMethod::minmax);
  CHECK(mm.scale == doctest::Approx(1.0 / 127.0).epsilon(1e-12));
  CHECK(!mm.scale_floored);

  TensorF body({1, 1, 1, 120});
  SplitMix64 rng(90);
  for (auto& v : body.v) v = float(rng.uniform(-1.0, 1.0));
  body.v[0] = 1.f;  // pin the in-range maximum
  TensorF outlier = body;
  outlier.v[60] = 100.f;
  QuantParams pct = calibrate_tensor({outlier}, CalibMethod::percentile, 99.0);
  CHECK(pct.scale < 1.5 / 127.0);  // outlier clipped away
  QuantParams full = calibrate_tensor({outlier}, CalibMethod::minmax);
  CHECK(full.scale == doctest::Approx(100.0 / 127.0));
  CHECK(pct.scale <= full.scale);

  TensorF zeros({1, 1, 2, 2});
  QuantParams floor = calibrate_tensor({zeros}, CalibMethod::minmax);
  CHECK(floor.scale == doctest::Approx(1e-8));
  CHECK(floor.scale_floored);

  CHECK_THROWS_AS(calibrate_tensor({}, CalibMethod::minmax), Error);
  CHECK_THROWS_AS(calibrate_tensor({zeros}, CalibMethod::percentile, 40.0), Error);
}

TEST_CASE("fake_quantize point values, idempotence, rounding and clipping bounds") {
  QuantParams q;
  q.scale = 1.0 / 127.0;

  TensorD x({1, 1, 1, 3});
  x.v = {0.0, 0.5, 10.0};
  TensorD y = fake_quantize(x, q);
  CHECK(y.v[0] == 0.0);
  // 0.5/scale = 63.5 rounds half-to-even to 64
  CHECK(y.v[1] == doctest::Approx(64.0 / 127.0).epsilon(1e-12));
  CHECK(y.v[2] == doctest::Approx(1.0).epsilon(1e-12));  // clipped at qmax*scale

  SplitMix64 rng(91);
  TensorD r = random_tensor<double>({1, 2, 6, 6}, rng, 0.4);
  TensorD once = fake_quantize(r, q);
  TensorD twice = fake_quantize(once, q);
  CHECK(max_abs_diff(once, twice) == 0.0);

  for (int64_t i = 0; i < r.size(); ++i) {
    const double v = r.v[size_t(i)];
    if (std::abs(v) <= q.scale * q.qmax())
      CHECK(std::abs(once.v[size_t(i)] - v) <= q.scale / 2 + 1e-15);
  }
  // half-to-even on the negative side as well
  TensorD neg({1, 1, 1, 2});
  neg.v = {-63.5 / 127.0, -64.5 / 127.0};
  TensorD nq = fake_quantize(neg, q);
  CHECK(nq.v[0] == doctest::Approx(-64.0 / 127.0));
  CHECK(nq.v[1] == doctest::Approx(-64.0 / 127.0));
}

TEST_CASE("per-channel weight quantization uses one scale per out-channel") {
  TensorF w({2, 1, 1, 2});
  w.v = {1.f, -2.f, 100.f, 50.f};
  QuantParams q = calibrate_weights(w);
  REQUIRE(q.channel_scales.size() == 2);
  CHECK(q.channel_scales[0] == doctest::Approx(2.0 / 127.0));
  CHECK(q.channel_scales[1] == doctest::Approx(100.0 / 127.0));
  TensorF fq = fake_quantize_weights(w, q);
  CHECK(std::abs(fq.v[0] - 1.f) <= q.channel_scales[0] / 2);
  CHECK(fq.v[2] == doctest::Approx(100.f));
}

TEST_CASE("straight-through mask is one inside the clip range, zero outside") {
  QuantParams q;
  q.scale = 0.1;
  SteResult r = fake_quantize_ste({0.05, 5.0, -20.0, 12.69}, q);
  CHECK(r.grad_mask[0] == 1.0);
  CHECK(r.grad_mask[1] == 1.0);
  CHECK(r.grad_mask[2] == 0.0);  // -200 steps, below qmin
  CHECK(r.grad_mask[3] == 1.0);  // 126.9 -> 127 lands on the edge
  CHECK(r.value[1] == doctest::Approx(5.0));
}

namespace {

ModelGraphF one_conv_graph(SplitMix64& rng, bool with_act = true, float wscale = 0.3f) {
  ModelGraphF g;
  g.inputs = {"input"};
  NodeSpec<float> n;
  n.id = "conv";
  n.kind = NodeKind::conv;
  n.inputs = {"input"};
  ConvSpec<float> c;
  c.in_channels = 3;
  c.out_channels = 4;
  c.kernel = 3;
  c.stride = 1;
  c.padding = 1;
  c.weight = random_tensor<float>({4, 3, 3, 3}, rng, wscale);
  c.bias.assign(4, 0.f);
  n.conv = c;
  g.nodes.push_back(n);
  if (with_act) {
    NodeSpec<float> a;
    a.id = "conv.relu";
    a.kind = NodeKind::act;
    a.inputs = {"conv"};
    a.act = ActSpec{ActKind::relu, 0.1};
    g.nodes.push_back(a);
    g.outputs = {"conv.relu"};
  } else {
    g.outputs = {"conv"};
  }
  return g;
}

}  // namespace

TEST_CASE("calibrate_graph observes post-activation outputs and is batch-associative") {
  SplitMix64 rng(92);
  ModelGraphF g = one_conv_graph(rng);
  SplitMix64 xr(93);
  std::vector<TensorF> batch1 = {random_tensor<float>({1, 3, 8, 8}, xr, 1.0)};
  std::vector<TensorF> batch2 = {random_tensor<float>({1, 3, 8, 8}, xr, 1.0)};
  std::vector<TensorF> both = {batch1[0], batch2[0]};

  GraphQuantParams p = calibrate_graph(g, both, CalibMethod::minmax);
  auto obs = forward(g, std::map<std::string, TensorF>{{"input", both[0]}}, {"conv.relu"});
  auto obs2 = forward(g, std::map<std::string, TensorF>{{"input", both[1]}}, {"conv.relu"});
  double mx = 0;
  for (float v : obs.at("conv.relu").v) mx = std::max(mx, std::abs(double(v)));
  for (float v : obs2.at("conv.relu").v) mx = std::max(mx, std::abs(double(v)));
  CHECK(p.activations.at("conv").scale == doctest::Approx(mx / 127.0));

  GraphQuantParams pa = calibrate_graph(g, batch1, CalibMethod::minmax);
  GraphQuantParams pb = calibrate_graph(g, batch2, CalibMethod::minmax);
  CHECK(p.activations.at("conv").scale ==
        doctest::Approx(std::max(pa.activations.at("conv").scale,
                                 pb.activations.at("conv").scale)));

  GraphQuantParams pct = calibrate_graph(g, both, CalibMethod::percentile, 99.99);
  CHECK(pct.activations.at("conv").scale <= p.activations.at("conv").scale + 1e-15);
}

TEST_CASE("calibrate_graph refuses unfused graphs with a pointer to fuse") {
  SplitMix64 rng(94);
  BackboneConfig cfg;
  cfg.widths = {4, 8, 8, 12, 12};
  cfg.depths = {1, 1, 1, 1};
  ModelGraphF bb = build_efficientrep_backbone<float>(cfg, rng);
  SplitMix64 xr(95);
  std::vector<TensorF> calib = {random_tensor<float>({1, 3, 32, 32}, xr)};
  CHECK_THROWS_WITH_AS(calibrate_graph(bb, calib, CalibMethod::minmax),
                       doctest::Contains("fuse"), Error);
}

TEST_CASE("quantize_graph: skip-all is the float graph, full quant matches hand composition") {
  SplitMix64 rng(96);
  ModelGraphF g = one_conv_graph(rng);
  SplitMix64 xr(97);
  std::vector<TensorF> calib = {random_tensor<float>({1, 3, 8, 8}, xr)};
  GraphQuantParams params = calibrate_graph(g, calib, CalibMethod::minmax);

  ModelGraphF skipped = quantize_graph(g, params, {"conv"});
  auto f = forward(g, std::map<std::string, TensorF>{{"input", calib[0]}});
  auto s = forward(skipped, std::map<std::string, TensorF>{{"input", calib[0]}});
  CHECK(max_abs_diff(f.at(g.outputs[0]), s.at(skipped.outputs[0])) == 0.f);

  ModelGraphF q = quantize_graph(g, params, {});
  auto qr = forward(q, std::map<std::string, TensorF>{{"input", calib[0]}});
  // hand composition: act-fq( relu( conv(x, weight-fq(W)) ) )
  ConvSpec<float> wq = *g.find("conv")->conv;
  wq.weight = fake_quantize_weights(wq.weight, params.weights.at("conv"));
  TensorF expect = fake_quantize(activation(ActKind::relu, conv2d(calib[0], wq)),
                                 params.activations.at("conv"));
  CHECK(max_abs_diff(qr.at(q.outputs[0]), expect) == 0.f);

  // per-element error of in-range activations bounded by half a step
  const TensorF& fl = f.at(g.outputs[0]);
  const TensorF& qt = qr.at(q.outputs[0]);
  ModelGraphF wq_only = quantize_graph(g, params, {});
  (void)wq_only;
  const double scale = params.activations.at("conv").scale;
  TensorF wq_out = activation(ActKind::relu, conv2d(calib[0], wq));
  for (int64_t i = 0; i < qt.size(); ++i)
    if (std::abs(wq_out.v[size_t(i)]) <= scale * 127)
      CHECK(std::abs(qt.v[size_t(i)] - wq_out.v[size_t(i)]) <= scale / 2 + 1e-12);
  CHECK(max_abs_diff(fl, qt) < 10 * scale);  // sanity: nothing exploded

  GraphQuantParams missing;
  CHECK_THROWS_WITH_AS(quantize_graph(g, missing, {}), doctest::Contains("missing"), Error);
}

TEST_CASE("sensitivity metrics are clean on a noiseless layer and ranks are permutations") {
  // all-zero conv: quantization is exact, so mse 0, snr at the cap, cosine 1
  SplitMix64 rng(98);
  ModelGraphF g = one_conv_graph(rng, true, 0.0f);
  SplitMix64 xr(99);
  std::vector<TensorF> calib = {random_tensor<float>({1, 3, 8, 8}, xr)};
  GraphQuantParams params = calibrate_graph(g, calib, CalibMethod::minmax);
  SensitivityReport rep = sensitivity_scan(g, params, calib);
  REQUIRE(rep.entries.size() == 1);
  CHECK(rep.entries[0].mse == 0.0);
  CHECK(rep.entries[0].snr_db == kSnrCapDb);
  CHECK(rep.entries[0].cosine == 1.0);

  auto model = oracle::make_pathological_model(1234);
  GraphQuantParams p2 = calibrate_graph(model.graph, model.calib, CalibMethod::minmax);
  SensitivityReport rep2 = sensitivity_scan(model.graph, p2, model.calib);
  const int L = int(rep2.entries.size());
  for (auto rank_of : {&SensitivityEntry::rank_mse, &SensitivityEntry::rank_snr,
                       &SensitivityEntry::rank_cos, &SensitivityEntry::rank_score}) {
    std::vector<bool> seen(size_t(L) + 1, false);
    for (const auto& e : rep2.entries) {
      const int r = e.*rank_of;
      CHECK(r >= 1);
      CHECK(r <= L);
      CHECK(!seen[size_t(r)]);
      seen[size_t(r)] = true;
    }
  }
  CHECK(rep2.to_csv().find("layer_id,mse,snr_db") == 0);
}

TEST_CASE("the amplified fold layer ranks first under mse, snr and cosine") {
  auto model = oracle::make_pathological_model(777);
  GraphQuantParams params = calibrate_graph(model.graph, model.calib, CalibMethod::minmax);
  SensitivityReport rep = sensitivity_scan(model.graph, params, model.calib);
  for (const auto& e : rep.entries) {
    if (e.layer != model.hot_layer) continue;
    CHECK(e.rank_mse == 1);
    CHECK(e.rank_snr == 1);
    CHECK(e.rank_cos == 1);
  }
  CHECK(rep.ranking(SensMetric::mse).front() == model.hot_layer);
  CHECK(rep.ranking(SensMetric::snr).front() == model.hot_layer);
  CHECK(rep.ranking(SensMetric::cosine).front() == model.hot_layer);
}

TEST_CASE("partial quantization: top-k float fallback beats full quantization") {
  auto model = oracle::make_pathological_model(555);
  GraphQuantParams params = calibrate_graph(model.graph, model.calib, CalibMethod::minmax);
  SensitivityReport rep = sensitivity_scan(model.graph, params, model.calib);

  PartialQuantResult full = partial_quantize(model.graph, params, rep, SensMetric::mse, 0);
  CHECK(full.skipped.empty());
  PartialQuantResult top6 = partial_quantize(model.graph, params, rep, SensMetric::mse, 6);
  CHECK(top6.skipped.size() == 6);
  CHECK(top6.skipped.front() == model.hot_layer);

  // end-to-end error: mean absolute difference against the float model
  auto mae = [](const TensorF& a, const TensorF& b) {
    double s = 0;
    for (int64_t i = 0; i < a.size(); ++i)
      s += std::abs(double(a.v[size_t(i)]) - double(b.v[size_t(i)]));
    return s / double(a.size());
  };
  double err_full = 0, err_top6 = 0;
  for (const auto& x : model.calib) {
    auto f = forward(model.graph, std::map<std::string, TensorF>{{"input", x}});
    auto a = forward(full.graph, std::map<std::string, TensorF>{{"input", x}});
    auto b = forward(top6.graph, std::map<std::string, TensorF>{{"input", x}});
    err_full += mae(f.at(model.graph.outputs[0]), a.at(full.graph.outputs[0]));
    err_top6 += mae(f.at(model.graph.outputs[0]), b.at(top6.graph.outputs[0]));
  }
  CHECK(err_top6 < err_full);

  PartialQuantResult all = partial_quantize(model.graph, params, rep, SensMetric::mse, 100);
  CHECK(all.all_float);
  for (const auto& x : model.calib) {
    auto f = forward(model.graph, std::map<std::string, TensorF>{{"input", x}});
    auto a = forward(all.graph, std::map<std::string, TensorF>{{"input", x}});
    CHECK(max_abs_diff(f.at(model.graph.outputs[0]), a.at(all.graph.outputs[0])) == 0.f);
  }
}

TEST_CASE("score-delta metric flags the layer whose quantization kills the detection") {
  // cls head reads channel 0; one barely-positive logit cell among strongly
  // negative ones, so per-tensor quantization rounds it down to background
  ModelGraphF g;
  g.inputs = {"input"};
  NodeSpec<float> cls;
  cls.id = "cls";
  cls.kind = NodeKind::head_branch;
  cls.inputs = {"input"};
  ConvSpec<float> cc;
  cc.in_channels = 2;
  cc.out_channels = 1;
  cc.kernel = 1;
  cc.weight = TensorF({1, 2, 1, 1});
  cc.weight.at(0, 0, 0, 0) = 1.f;
  cls.conv = cc;
  cls.head_role = "cls";
  cls.head_level = "P3";
  cls.head_stride = 8;
  g.nodes.push_back(cls);
  NodeSpec<float> reg = cls;
  reg.id = "reg";
  reg.head_role = "reg";
  ConvSpec<float> rc = cc;
  rc.out_channels = 4;
  rc.weight = TensorF({4, 2, 1, 1});
  rc.bias.assign(4, 2.f);
  reg.conv = rc;
  g.nodes.push_back(reg);
  g.outputs = {"cls", "reg"};
  g.heads["P3"] = HeadTag{"cls", "reg", 8};
  g.num_classes = 1;
  g.reg_max = 0;
  g.validate();

  TensorF input({1, 2, 4, 4}, 0.f);
  for (int h = 0; h < 4; ++h)
    for (int w = 0; w < 4; ++w) input.at(0, 0, h, w) = -100.f;
  input.at(0, 0, 1, 1) = 0.1f;  // the only positive cell

  EvalSet eval;
  eval.inputs = {input};
  eval.conf_thresh = 0.52;
  const double cx = (1 + 0.5) * 8, cy = (1 + 0.5) * 8;
  eval.gts = {{GtBox{Box{cx - 16, cy - 16, cx + 16, cy + 16}, 0}}};

  GraphQuantParams params = calibrate_graph(g, eval.inputs, CalibMethod::minmax);
  SensitivityReport rep =
      sensitivity_scan(g, params, eval.inputs, SensMetric::score, eval);
  for (const auto& e : rep.entries) {
    if (e.layer == "cls") {
      CHECK(e.score_delta == doctest::Approx(1.0));
      CHECK(e.rank_score == 1);
    } else {
      CHECK(e.score_delta == doctest::Approx(0.0));
    }
  }
}

TEST_CASE("cwd loss: zero at equality, known value, FD gradient, shift invariance") {
  TensorD t({1, 1, 1, 2});
  t.v = {0.0, 50.0};
  TensorD s({1, 1, 1, 2});
  s.v = {0.7, 0.7};
  CwdResult self = cwd_loss(t, t, 1.0);
  CHECK(self.loss == doctest::Approx(0.0));
  CwdResult r = cwd_loss(t, s, 1.0);
  CHECK(r.loss == doctest::Approx(std::log(2.0)).epsilon(1e-6));

  SplitMix64 rng(100);
  TensorD teacher = random_tensor<double>({2, 3, 3, 4}, rng);
  TensorD student = random_tensor<double>({2, 3, 3, 4}, rng);
  const double T = 2.0;
  CwdResult l = cwd_loss(teacher, student, T);
  CHECK(l.loss >= 0.0);
  double worst = 0;
  for (int64_t i = 0; i < student.size(); ++i) {
    const double fd = oracle::fd_central(
        [&](double v) {
          TensorD s2 = student;
          s2.v[size_t(i)] = v;
          return cwd_loss(teacher, s2, T).loss;
        },
        student.v[size_t(i)]);
    worst = std::max(worst, oracle::grad_rel_err(l.grad.v[size_t(i)], fd));
  }
  CHECK(worst < 1e-4);

  // adding a per-channel constant to both maps changes nothing
  TensorD t2 = teacher, s2 = student;
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c)
      for (int h = 0; h < 3; ++h)
        for (int w = 0; w < 4; ++w) {
          t2.at(n, c, h, w) += 0.37 * (c + 1);
          s2.at(n, c, h, w) += 0.37 * (c + 1);
        }
  CHECK(cwd_loss(t2, s2, T).loss == doctest::Approx(l.loss).epsilon(1e-9));

  CHECK_THROWS_AS(cwd_loss(teacher, TensorD({1, 1, 2, 2}), 1.0), ShapeError);
  CHECK_THROWS_AS(cwd_loss(teacher, student, 0.0), Error);
}

TEST_CASE("activation histogram: occupancy, totals, and the fold pathology widens it") {
  SplitMix64 rng(101);
  ModelGraphF g = one_conv_graph(rng, true, 0.0f);
  // zero weights, zero bias: constant zero activation
  SplitMix64 xr(102);
  std::vector<TensorF> inputs = {random_tensor<float>({1, 3, 8, 8}, xr)};
  Histogram h = activation_histogram(g, "conv", inputs, 16);
  int occupied = 0;
  for (int64_t c : h.counts) occupied += c > 0 ? 1 : 0;
  CHECK(occupied == 1);
  CHECK(h.total() == 4 * 8 * 8);

  // the same fold without the amplification keeps the spread narrow
  auto model = oracle::make_pathological_model(777);
  auto benign_model = oracle::make_pathological_model(777, 8, 3, 1.0);
  Histogram hot = activation_histogram(model.graph, model.hot_layer, model.calib, 32);
  Histogram benign =
      activation_histogram(benign_model.graph, benign_model.hot_layer, benign_model.calib, 32);
  CHECK(hot.hi - hot.lo > 10.0 * (benign.hi - benign.lo));
  CHECK_THROWS_AS(activation_histogram(model.graph, "nope", model.calib, 8), Error);
}
