#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles/conv_grad.hpp"
#include "repdet/builders.hpp"
#include "repdet/manifest.hpp"
#include "repdet/reparam.hpp"

using namespace repdet;

namespace {

template <typename T>
BatchNormParams<T> bn_of(std::vector<T> gamma, std::vector<T> beta, std::vector<T> mean,
                         std::vector<T> var, T eps = T(1e-5)) {
  BatchNormParams<T> bn;
  bn.gamma = std::move(gamma);
  bn.beta = std::move(beta);
  bn.running_mean = std::move(mean);
  bn.running_var = std::move(var);
  bn.epsilon = eps;
  return bn;
}

template <typename T>
BatchNormParams<T> random_bn(int c, SplitMix64& rng, bool allow_zero_var = false) {
  BatchNormParams<T> bn;
  for (int i = 0; i < c; ++i) {
    bn.gamma.push_back(T(rng.uniform(0.3, 1.8)));
    bn.beta.push_back(T(rng.normal(0.0, 0.2)));
    bn.running_mean.push_back(T(rng.normal(0.0, 0.3)));
    const bool zero = allow_zero_var && rng.uniform() < 0.2;
    bn.running_var.push_back(zero ? T(0) : T(rng.uniform(0.05, 2.0)));
  }
  bn.epsilon = T(1e-5);
  return bn;
}

template <typename T>
ConvSpec<T> random_conv(int ic, int oc, int k, int stride, int pad, int groups, SplitMix64& rng,
                        bool bias) {
  ConvSpec<T> c;
  c.in_channels = ic;
  c.out_channels = oc;
  c.kernel = k;
  c.stride = stride;
  c.padding = pad;
  c.groups = groups;
  c.weight = random_tensor<T>({oc, ic / groups, k, k}, rng, 0.5);
  if (bias) {
    c.bias.resize(size_t(oc));
    for (auto& b : c.bias) b = T(rng.normal(0.0, 0.3));
  }
  return c;
}

}  // namespace

TEST_CASE("fold_bn exact scalar cases") {
  SplitMix64 rng(20);
  ConvSpec<double> c = random_conv<double>(2, 1, 3, 1, 1, 1, rng, false);

  auto unit = bn_of<double>({1.0}, {0.0}, {0.0}, {1.0 - 1e-5});
  ConvSpec<double> same = fold_bn(c, unit);
  CHECK(max_abs_diff(same.weight, c.weight) < 1e-15);
  CHECK(same.bias[0] == doctest::Approx(0.0));

  auto scaled = bn_of<double>({2.0}, {1.0}, {0.0}, {1.0 - 1e-5});
  ConvSpec<double> twice = fold_bn(c, scaled);
  for (int64_t i = 0; i < c.weight.size(); ++i)
    CHECK(twice.weight.v[size_t(i)] == doctest::Approx(2.0 * c.weight.v[size_t(i)]));
  CHECK(twice.bias[0] == doctest::Approx(1.0));

  auto wrong = bn_of<double>({1.0, 1.0}, {0.0, 0.0}, {0.0, 0.0}, {1.0, 1.0});
  CHECK_THROWS_AS(fold_bn(c, wrong), ShapeError);
}

TEST_CASE("fold_bn composed-vs-folded forward equivalence, zero variance included") {
  SplitMix64 rng(21);
  for (int trial = 0; trial < 25; ++trial) {
    const int ic = 1 + rng.uniform_int(4);
    const int oc = 1 + rng.uniform_int(5);
    ConvSpec<double> c = random_conv<double>(ic, oc, 3, 1, 1, 1, rng, trial % 2 == 0);
    BatchNormParams<double> bn = random_bn<double>(oc, rng, true);
    TensorD x = random_tensor<double>({1, ic, 6, 6}, rng);
    TensorD composed = batch_norm_infer(conv2d(x, c), bn);
    TensorD folded = conv2d(x, fold_bn(c, bn));
    CHECK(max_abs_diff(composed, folded) < 1e-6);
  }
}

TEST_CASE("fold risk reporting on near-zero variance channels") {
  auto bn = bn_of<double>({1.0, 1.0}, {0.0, 0.0}, {0.0, 0.0}, {0.0, 1.0}, 1e-12);
  auto flagged = fold_risk_channels(bn);
  REQUIRE(flagged.size() == 1);
  CHECK(flagged[0] == 0);
}

TEST_CASE("pad_1x1_to_3x3 centers the kernel and keeps the forward output") {
  TensorD k({1, 1, 1, 1}, 5.0);
  TensorD padded = pad_1x1_to_3x3(k);
  CHECK(padded.shape == Shape{1, 1, 3, 3});
  CHECK(padded.at(0, 0, 1, 1) == 5.0);
  CHECK(padded.at(0, 0, 0, 0) == 0.0);

  TensorD zero({2, 3, 1, 1});
  CHECK(max_abs_diff(pad_1x1_to_3x3(zero), TensorD({2, 3, 3, 3})) == 0.0);
  CHECK_THROWS_AS(pad_1x1_to_3x3(padded), ShapeError);

  SplitMix64 rng(22);
  ConvSpec<double> c1 = random_conv<double>(3, 4, 1, 1, 0, 1, rng, true);
  ConvSpec<double> c3 = c1;
  c3.kernel = 3;
  c3.padding = 1;
  c3.weight = pad_1x1_to_3x3(c1.weight);
  TensorD x = random_tensor<double>({1, 3, 5, 5}, rng);
  CHECK(max_abs_diff(conv2d(x, c1), conv2d(x, c3)) < 1e-7);
}

TEST_CASE("identity_to_3x3 acts as the identity convolution") {
  TensorD one = identity_to_3x3<double>(1, 1);
  CHECK(one.shape == Shape{1, 1, 3, 3});
  CHECK(one.at(0, 0, 1, 1) == 1.0);

  TensorD four = identity_to_3x3<double>(4, 1);
  CHECK(four.shape == Shape{4, 4, 3, 3});
  for (int c = 0; c < 4; ++c) CHECK(four.at(c, c, 1, 1) == 1.0);

  SplitMix64 rng(23);
  for (int groups : {1, 2, 4}) {
    ConvSpec<double> c;
    c.in_channels = c.out_channels = 4;
    c.kernel = 3;
    c.stride = 1;
    c.padding = 1;
    c.groups = groups;
    c.weight = identity_to_3x3<double>(4, groups);
    TensorD x = random_tensor<double>({2, 4, 5, 5}, rng);
    CHECK(max_abs_diff(conv2d(x, c), x) == 0.0);
  }
  CHECK_THROWS_AS(identity_to_3x3<double>(3, 2), ShapeError);
}

TEST_CASE("fuse_repvgg_block with only the 3x3 branch alive equals the folded conv3") {
  SplitMix64 rng(24);
  RepVGGBlockParams<double> p = random_repvgg_block<double>(3, 4, 2, 1, rng);
  // silence the 1x1 branch entirely
  p.conv1.weight = TensorD(p.conv1.weight.shape);
  p.bn1.gamma.assign(4, 0.0);
  p.bn1.beta.assign(4, 0.0);
  FusedConvParams<double> fused = fuse_repvgg_block(p);
  ConvSpec<double> folded = fold_bn(p.conv3, p.bn3);
  CHECK(max_abs_diff(fused.weight, folded.weight) < 1e-12);
  for (int c = 0; c < 4; ++c) CHECK(fused.bias[size_t(c)] == doctest::Approx(folded.bias[size_t(c)]));
}

TEST_CASE("stride-2 blocks carry no identity branch and still fuse") {
  SplitMix64 rng(25);
  RepVGGBlockParams<double> p = random_repvgg_block<double>(4, 4, 2, 1, rng);
  CHECK(!p.id_bn.has_value());
  FusedConvParams<double> fused = fuse_repvgg_block(p);
  TensorD x = random_tensor<double>({1, 4, 8, 8}, rng);
  TensorD multi = batch_norm_infer(conv2d(x, p.conv3), p.bn3);
  multi = add(multi, batch_norm_infer(conv2d(x, p.conv1), p.bn1));
  TensorD single = conv2d(x, fused.to_conv_spec(4));
  CHECK(max_abs_diff(multi, single) < 1e-10);
}

TEST_CASE("block fusion equivalence over random blocks, FP32 and FP64") {
  SplitMix64 rng(26);
  double worst32 = 0, worst64 = 0;
  for (int trial = 0; trial < 40; ++trial) {
    const int in = 2 + rng.uniform_int(6);
    const bool same = rng.uniform() < 0.5;
    const int out = same ? in : 2 + rng.uniform_int(6);
    const int stride = rng.uniform() < 0.5 ? 1 : 2;
    RepVGGBlockParams<double> p = random_repvgg_block<double>(in, out, stride, 1, rng);
    TensorD x = random_tensor<double>({1, in, 8, 8}, rng);

    TensorD multi = batch_norm_infer(conv2d(x, p.conv3), p.bn3);
    multi = add(multi, batch_norm_infer(conv2d(x, p.conv1), p.bn1));
    if (p.id_bn) multi = add(multi, batch_norm_infer(x, *p.id_bn));
    TensorD fused64 = conv2d(x, fuse_repvgg_block(p).to_conv_spec(in));
    worst64 = std::max(worst64, max_abs_diff(multi, fused64));

    // same block evaluated in FP32
    RepVGGBlockParams<float> pf;
    pf.conv3 = ConvSpec<float>{p.conv3.in_channels, p.conv3.out_channels, 3, stride, 1, 1,
                               astype<float>(p.conv3.weight), {}};
    pf.bn3.gamma.assign(p.bn3.gamma.begin(), p.bn3.gamma.end());
    pf.bn3.beta.assign(p.bn3.beta.begin(), p.bn3.beta.end());
    pf.bn3.running_mean.assign(p.bn3.running_mean.begin(), p.bn3.running_mean.end());
    pf.bn3.running_var.assign(p.bn3.running_var.begin(), p.bn3.running_var.end());
    pf.conv1 = ConvSpec<float>{p.conv1.in_channels, p.conv1.out_channels, 1, stride, 0, 1,
                               astype<float>(p.conv1.weight), {}};
    pf.bn1.gamma.assign(p.bn1.gamma.begin(), p.bn1.gamma.end());
    pf.bn1.beta.assign(p.bn1.beta.begin(), p.bn1.beta.end());
    pf.bn1.running_mean.assign(p.bn1.running_mean.begin(), p.bn1.running_mean.end());
    pf.bn1.running_var.assign(p.bn1.running_var.begin(), p.bn1.running_var.end());
    if (p.id_bn) {
      BatchNormParams<float> idf;
      idf.gamma.assign(p.id_bn->gamma.begin(), p.id_bn->gamma.end());
      idf.beta.assign(p.id_bn->beta.begin(), p.id_bn->beta.end());
      idf.running_mean.assign(p.id_bn->running_mean.begin(), p.id_bn->running_mean.end());
      idf.running_var.assign(p.id_bn->running_var.begin(), p.id_bn->running_var.end());
      pf.id_bn = idf;
    }
    TensorF xf = astype<float>(x);
    TensorF multif = batch_norm_infer(conv2d(xf, pf.conv3), pf.bn3);
    multif = add(multif, batch_norm_infer(conv2d(xf, pf.conv1), pf.bn1));
    if (pf.id_bn) multif = add(multif, batch_norm_infer(xf, *pf.id_bn));
    TensorF fused32 = conv2d(xf, fuse_repvgg_block(pf).to_conv_spec(in));
    worst32 = std::max(worst32, max_abs_diff(multif, fused32));
  }
  CHECK(worst32 < 1e-5);
  CHECK(worst64 < 1e-10);
  // exact in exact arithmetic: the gap must collapse with the wider type
  CHECK(worst64 < worst32 * 1e-3);
}

TEST_CASE("repvgg_block_forward equals the fused conv plus activation") {
  SplitMix64 rng(27);
  for (int trial = 0; trial < 10; ++trial) {
    RepVGGBlockParams<double> p = random_repvgg_block<double>(4, 4, 1, 1, rng);
    TensorD x = random_tensor<double>({1, 4, 6, 6}, rng);
    TensorD block = repvgg_block_forward(x, p, ActKind::relu);
    TensorD fused = activation(ActKind::relu, conv2d(x, fuse_repvgg_block(p).to_conv_spec(4)));
    CHECK(max_abs_diff(block, fused) < 1e-10);
  }
}

TEST_CASE("branch ablation: zeroed 1x1 and identity reduce the block to conv3+bn+act") {
  SplitMix64 rng(28);
  RepVGGBlockParams<double> p = random_repvgg_block<double>(4, 4, 1, 1, rng);
  p.bn1.gamma.assign(4, 0.0);
  p.bn1.beta.assign(4, 0.0);
  p.id_bn->gamma.assign(4, 0.0);
  p.id_bn->beta.assign(4, 0.0);
  TensorD x = random_tensor<double>({1, 4, 6, 6}, rng);
  TensorD block = repvgg_block_forward(x, p, ActKind::relu);
  TensorD plain = activation(ActKind::relu, batch_norm_infer(conv2d(x, p.conv3), p.bn3));
  CHECK(max_abs_diff(block, plain) < 1e-12);

  TensorD zero({1, 4, 6, 6});
  RepVGGBlockParams<double> q = random_repvgg_block<double>(4, 4, 1, 1, rng);
  q.bn3.beta.assign(4, 0.0);
  q.bn3.running_mean.assign(4, 0.0);
  q.bn1.beta.assign(4, 0.0);
  q.bn1.running_mean.assign(4, 0.0);
  q.id_bn->beta.assign(4, 0.0);
  q.id_bn->running_mean.assign(4, 0.0);
  TensorD out = repvgg_block_forward(zero, q, ActKind::relu);
  CHECK(max_abs_diff(out, zero) == 0.0);
}

TEST_CASE("fuse_graph leaves rep-free graphs untouched and rewrites blocks") {
  SplitMix64 rng(29);
  HeadConfig head_cfg;
  head_cfg.num_classes = 4;
  head_cfg.widths = {8, 12, 16};
  ModelGraphF plain = build_decoupled_head<float>(head_cfg, rng);
  ModelGraphF fused_plain = fuse_graph(plain);
  CHECK(fused_plain.nodes.size() == plain.nodes.size());
  for (size_t i = 0; i < plain.nodes.size(); ++i) {
    CHECK(fused_plain.nodes[i].id == plain.nodes[i].id);
    CHECK(fused_plain.nodes[i].kind == plain.nodes[i].kind);
  }

  BackboneConfig cfg;
  cfg.widths = {4, 8, 12, 16, 20};
  cfg.depths = {1, 1, 2, 1};
  ModelGraphF bb = build_efficientrep_backbone<float>(cfg, rng);
  ModelGraphF fused = fuse_graph(bb);
  CHECK(fused.nodes.size() < bb.nodes.size());
  for (const auto& n : fused.nodes) {
    CHECK(n.kind != NodeKind::repvgg_block);
    CHECK(n.kind != NodeKind::bn);
  }

  SplitMix64 xr(30);
  TensorF x = random_tensor<float>({1, 3, 32, 32}, xr);
  auto a = forward(bb, x);
  auto b = forward(fused, x);
  REQUIRE(fused.outputs.size() == bb.outputs.size());
  for (size_t i = 0; i < bb.outputs.size(); ++i)
    CHECK(max_abs_diff(a.at(bb.outputs[i]), b.at(fused.outputs[i])) < 1e-4);
}

TEST_CASE("fuse_graph is idempotent, bit for bit") {
  SplitMix64 rng(31);
  BackboneConfig cfg;
  cfg.widths = {4, 8, 8, 12, 16};
  cfg.depths = {1, 2, 1, 1};
  ModelGraphF g = build_efficientrep_backbone<float>(cfg, rng);
  ModelGraphF once = fuse_graph(g);
  ModelGraphF twice = fuse_graph(once);

  WeightBlob blob1, blob2;
  CHECK(manifest_to_json(once, blob1) == manifest_to_json(twice, blob2));
  CHECK(blob1.bytes == blob2.bytes);
}

TEST_CASE("fused parameter count is exactly out*(in/groups)*9 + out per block") {
  SplitMix64 rng(32);
  RepVGGBlockParams<float> p = random_repvgg_block<float>(6, 8, 2, 2, rng);
  ModelGraphF g;
  g.inputs = {"input"};
  NodeSpec<float> n;
  n.id = "block";
  n.kind = NodeKind::repvgg_block;
  n.inputs = {"input"};
  n.rep = p;
  g.nodes.push_back(n);
  NodeSpec<float> a;
  a.id = "block.act";
  a.kind = NodeKind::act;
  a.inputs = {"block"};
  a.act = ActSpec{ActKind::relu, 0.1};
  g.nodes.push_back(a);
  g.outputs = {"block.act"};

  ModelGraphF fused = fuse_graph(g);
  CHECK(fused.nodes.size() == 1);
  CHECK(param_count(fused) == int64_t(8) * (6 / 2) * 9 + 8);
}

TEST_CASE("gr_step with unit/zero scales is ordinary SGD") {
  SplitMix64 rng(33);
  TensorD w = random_tensor<double>({2, 3, 3, 3}, rng);
  TensorD g = random_tensor<double>({2, 3, 3, 3}, rng);
  GrConfig gr;
  gr.s = {1.0, 1.0};
  gr.t = {0.0, 0.0};
  TensorD next = gr_step(w, g, gr, 0.1);
  for (int64_t i = 0; i < w.size(); ++i)
    CHECK(next.v[size_t(i)] == doctest::Approx(w.v[size_t(i)] - 0.1 * g.v[size_t(i)]));

  GrConfig bad;
  bad.s = {0.0, 0.0};
  bad.t = {0.0, 0.0};
  CHECK_THROWS_AS(gr_step(w, g, bad, 0.1), Error);
}

TEST_CASE("single gr_step equals one fused step of the two-branch model") {
  SplitMix64 rng(34);
  const int ic = 2, oc = 2;
  TensorD x = random_tensor<double>({1, ic, 5, 5}, rng);
  TensorD wa = random_tensor<double>({oc, ic, 3, 3}, rng);
  TensorD wb = random_tensor<double>({oc, ic, 3, 3}, rng);
  GrConfig gr;
  gr.s = {1.0, 1.0};
  gr.t = {1.0, 1.0};

  ConvSpec<double> spec;
  spec.in_channels = ic;
  spec.out_channels = oc;
  spec.kernel = 3;
  spec.stride = 1;
  spec.padding = 1;
  spec.weight = TensorD({oc, ic, 3, 3});
  for (int64_t i = 0; i < spec.weight.size(); ++i)
    spec.weight.v[size_t(i)] = wa.v[size_t(i)] + wb.v[size_t(i)];
  TensorD target = random_tensor<double>({1, oc, 5, 5}, rng);

  const double lr = 0.01;
  TensorD grad = oracle::quadratic_weight_grad(x, spec, target);

  // branch update with plain SGD, then fuse
  TensorD fused(spec.weight.shape);
  for (int64_t i = 0; i < fused.size(); ++i) {
    const double ga = grad.v[size_t(i)];  // s=t=1: branch grads equal the fused grad
    const double na = wa.v[size_t(i)] - lr * ga;
    const double nb = wb.v[size_t(i)] - lr * ga;
    fused.v[size_t(i)] = na + nb;
  }
  TensorD stepped = gr_step(spec.weight, grad, gr, lr);  // multiplier 2
  CHECK(max_abs_diff(stepped, fused) < 1e-14);
}

TEST_CASE("gr trajectory equals the constant-scale two-branch trajectory over 100 steps") {
  SplitMix64 rng(35);
  const int ic = 2, oc = 3;
  TensorD x = random_tensor<double>({1, ic, 5, 5}, rng, 0.5);
  TensorD target = random_tensor<double>({1, oc, 5, 5}, rng, 0.5);

  GrConfig gr;
  for (int c = 0; c < oc; ++c) {
    gr.s.push_back(rng.uniform(0.5, 1.5));
    gr.t.push_back(rng.uniform(0.1, 0.9));
  }
  TensorD wa = random_tensor<double>({oc, ic, 3, 3}, rng, 0.3);
  TensorD wb = random_tensor<double>({oc, ic, 3, 3}, rng, 0.3);

  const int64_t per_oc = int64_t(ic) * 9;
  auto fuse_branches = [&](const TensorD& a, const TensorD& b) {
    TensorD w({oc, ic, 3, 3});
    for (int c = 0; c < oc; ++c)
      for (int64_t i = 0; i < per_oc; ++i)
        w.v[size_t(c * per_oc + i)] =
            gr.s[size_t(c)] * a.v[size_t(c * per_oc + i)] + gr.t[size_t(c)] * b.v[size_t(c * per_oc + i)];
    return w;
  };

  ConvSpec<double> spec;
  spec.in_channels = ic;
  spec.out_channels = oc;
  spec.kernel = 3;
  spec.stride = 1;
  spec.padding = 1;
  spec.weight = fuse_branches(wa, wb);  // init contract: W = s*W_A + t*W_B

  const double lr = 0.002;  // inside the stable step-size region of this quadratic
  double worst = 0;
  for (int step = 0; step < 100; ++step) {
    // two-branch side: grads of the constant-scale model under plain SGD
    ConvSpec<double> csla = spec;
    csla.weight = fuse_branches(wa, wb);
    TensorD g = oracle::quadratic_weight_grad(x, csla, target);
    for (int c = 0; c < oc; ++c)
      for (int64_t i = 0; i < per_oc; ++i) {
        wa.v[size_t(c * per_oc + i)] -= lr * gr.s[size_t(c)] * g.v[size_t(c * per_oc + i)];
        wb.v[size_t(c * per_oc + i)] -= lr * gr.t[size_t(c)] * g.v[size_t(c * per_oc + i)];
      }

    // plain operator with the gradient multiplier
    TensorD gp = oracle::quadratic_weight_grad(x, spec, target);
    spec.weight = gr_step(spec.weight, gp, gr, lr);

    worst = std::max(worst, max_abs_diff(spec.weight, fuse_branches(wa, wb)));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("donor-derived branch scales are the BN scale factors") {
  SplitMix64 rng(36);
  RepVGGBlockParams<double> donor = random_repvgg_block<double>(3, 3, 1, 1, rng);
  GrConfig gr = gr_from_donor(donor);
  REQUIRE(gr.s.size() == 3);
  for (int c = 0; c < 3; ++c) {
    CHECK(gr.s[size_t(c)] ==
          doctest::Approx(donor.bn3.gamma[size_t(c)] /
                          std::sqrt(donor.bn3.running_var[size_t(c)] + donor.bn3.epsilon)));
    CHECK(gr.t[size_t(c)] ==
          doctest::Approx(donor.bn1.gamma[size_t(c)] /
                          std::sqrt(donor.bn1.running_var[size_t(c)] + donor.bn1.epsilon)));
  }
}
