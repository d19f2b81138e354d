#include "repdet/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "repdet/losses.hpp"
#include "repdet/rng.hpp"

namespace repdet {

void LetterboxSpec::validate() const {
  if (border < 0) throw Error(Errc::usage, "letterbox border must be >= 0");
  if (content_size() < 1) throw Error(Errc::usage, "letterbox content region must be >= 1 px");
  if (pad_value < 0 || pad_value > 255) throw Error(Errc::usage, "pad_value must be in 0..255");
}

Box LetterboxTransform::to_image(const Box& b) const {
  auto cx = [&](double v) { return std::min(double(orig_w), std::max(0.0, (v - dx) / scale_x)); };
  auto cy = [&](double v) { return std::min(double(orig_h), std::max(0.0, (v - dy) / scale_y)); };
  return Box{cx(b.x1), cy(b.y1), cx(b.x2), cy(b.y2)};
}

Box LetterboxTransform::to_net(const Box& b) const {
  return Box{b.x1 * scale_x + dx, b.y1 * scale_y + dy, b.x2 * scale_x + dx, b.y2 * scale_y + dy};
}

TensorF resize_bilinear(const TensorF& image, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw ShapeError("resize_bilinear target must be >= 1 px");
  TensorF out({image.shape.n, image.shape.c, out_h, out_w});
  const double sy = double(image.shape.h) / out_h;
  const double sx = double(image.shape.w) / out_w;
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < image.shape.n; ++n) {
    for (int c = 0; c < image.shape.c; ++c) {
      for (int y = 0; y < out_h; ++y) {
        const double fy = (y + 0.5) * sy - 0.5;
        const int y0 = std::max(0, std::min(image.shape.h - 1, int(std::floor(fy))));
        const int y1 = std::min(image.shape.h - 1, y0 + 1);
        const double wy = std::min(1.0, std::max(0.0, fy - y0));
        for (int x = 0; x < out_w; ++x) {
          const double fx = (x + 0.5) * sx - 0.5;
          const int x0 = std::max(0, std::min(image.shape.w - 1, int(std::floor(fx))));
          const int x1 = std::min(image.shape.w - 1, x0 + 1);
          const double wx = std::min(1.0, std::max(0.0, fx - x0));
          const double v = (1 - wy) * ((1 - wx) * image.at(n, c, y0, x0) +
                                       wx * image.at(n, c, y0, x1)) +
                           wy * ((1 - wx) * image.at(n, c, y1, x0) +
                                 wx * image.at(n, c, y1, x1));
          out.at(n, c, y, x) = float(v);
        }
      }
    }
  }
  return out;
}

LetterboxResult letterbox(const TensorF& image, const LetterboxSpec& spec) {
  spec.validate();
  if (image.shape.n != 1) throw ShapeError("letterbox expects a single image (N=1)");
  const int content = spec.content_size();
  const double r = double(content) / std::max(image.shape.h, image.shape.w);
  const int new_h = std::max(1, int(std::lround(image.shape.h * r)));
  const int new_w = std::max(1, int(std::lround(image.shape.w * r)));

  TensorF resized = resize_bilinear(image, new_h, new_w);
  TensorF out({1, image.shape.c, spec.target_size, spec.target_size}, float(spec.pad_value));
  const int dy = (spec.target_size - new_h) / 2;
  const int dx = (spec.target_size - new_w) / 2;
  for (int c = 0; c < image.shape.c; ++c)
    for (int y = 0; y < new_h; ++y)
      for (int x = 0; x < new_w; ++x) out.at(0, c, dy + y, dx + x) = resized.at(0, c, y, x);

  LetterboxTransform t;
  // per-axis effective scales so the box round trip is exact
  t.scale_x = double(new_w) / image.shape.w;
  t.scale_y = double(new_h) / image.shape.h;
  t.dx = dx;
  t.dy = dy;
  t.orig_w = image.shape.w;
  t.orig_h = image.shape.h;
  return LetterboxResult{std::move(out), t};
}

HeadOutputs collect_head_outputs(const ModelGraphF& g,
                                 const std::map<std::string, TensorF>& results) {
  if (g.heads.empty()) throw Error(Errc::model, "graph carries no head tags");
  HeadOutputs out;
  out.num_classes = g.num_classes;
  out.reg_max = g.reg_max;
  for (const auto& [level, tag] : g.heads) {
    auto cls = results.find(tag.cls_id);
    auto reg = results.find(tag.reg_id);
    if (cls == results.end() || reg == results.end())
      throw Error(Errc::model, "head outputs for " + level + " missing from forward results");
    out.levels.push_back(HeadOutputs::Level{level, cls->second, reg->second, tag.stride});
  }
  return out;
}

std::vector<Detection> decode_predictions(const HeadOutputs& head, double conf_thresh) {
  std::vector<Detection> dets;
  for (const auto& lvl : head.levels) {
    const int C = head.num_classes;
    const int bins = head.reg_max + 1;
    const int reg_ch = head.reg_max > 0 ? 4 * bins : 4;
    if (lvl.cls.shape.c != C || lvl.reg.shape.c != reg_ch || lvl.cls.shape.h != lvl.reg.shape.h ||
        lvl.cls.shape.w != lvl.reg.shape.w)
      throw ShapeError("head outputs inconsistent at " + lvl.name);
    const double s = lvl.stride;
    std::vector<double> z(static_cast<size_t>(bins));
    for (int y = 0; y < lvl.cls.shape.h; ++y) {
      for (int x = 0; x < lvl.cls.shape.w; ++x) {
        double best = -1;
        int best_c = 0;
        for (int c = 0; c < C; ++c) {
          const double p = 1.0 / (1.0 + std::exp(-double(lvl.cls.at(0, c, y, x))));
          if (p > best) {
            best = p;
            best_c = c;
          }
        }
        if (best < conf_thresh) continue;
        double d[4];
        for (int side = 0; side < 4; ++side) {
          if (head.reg_max > 0) {
            for (int k = 0; k < bins; ++k) z[size_t(k)] = lvl.reg.at(0, side * bins + k, y, x);
            d[side] = dfl_expectation(z);
          } else {
            d[side] = std::max(0.0, double(lvl.reg.at(0, side, y, x)));
          }
        }
        const double cx = (x + 0.5) * s, cy = (y + 0.5) * s;
        Box b{cx - d[0] * s, cy - d[1] * s, cx + d[2] * s, cy + d[3] * s};
        if (!b.valid()) continue;  // zero-area guard
        dets.push_back(Detection{b, best, best_c});
      }
    }
  }
  return dets;
}

std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thresh,
                           bool class_aware) {
  if (!(iou_thresh > 0.0 && iou_thresh < 1.0))
    throw Error(Errc::usage, "nms iou threshold must lie in (0,1)");
  std::vector<int> order(dets.size());
  for (size_t i = 0; i < dets.size(); ++i) order[i] = int(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (dets[size_t(a)].score != dets[size_t(b)].score)
      return dets[size_t(a)].score > dets[size_t(b)].score;
    return a < b;
  });
  std::vector<Detection> kept;
  for (int idx : order) {
    const auto& d = dets[size_t(idx)];
    bool suppressed = false;
    for (const auto& k : kept) {
      if (class_aware && k.class_id != d.class_id) continue;
      if (iou(k.box, d.box) >= iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

double score_proxy(const std::vector<std::vector<Detection>>& dets_per_image,
                   const std::vector<std::vector<GtBox>>& gts_per_image, double iou_match) {
  if (dets_per_image.size() != gts_per_image.size() || gts_per_image.empty())
    throw Error(Errc::usage, "score_proxy needs a nonempty, aligned evaluation set");
  int64_t tp = 0, fp = 0, fn = 0;
  for (size_t img = 0; img < dets_per_image.size(); ++img) {
    const auto& gts = gts_per_image[img];
    std::vector<bool> used(gts.size(), false);
    std::vector<int> order(dets_per_image[img].size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (dets_per_image[img][size_t(a)].score != dets_per_image[img][size_t(b)].score)
        return dets_per_image[img][size_t(a)].score > dets_per_image[img][size_t(b)].score;
      return a < b;
    });
    for (int di : order) {
      const auto& d = dets_per_image[img][size_t(di)];
      int best = -1;
      double best_iou = iou_match;
      for (size_t g = 0; g < gts.size(); ++g) {
        if (used[g] || gts[g].class_id != d.class_id) continue;
        const double u = iou(d.box, gts[g].box);
        if (u >= best_iou && (best < 0 || u > best_iou)) {
          best = int(g);
          best_iou = u;
        }
      }
      if (best >= 0) {
        used[size_t(best)] = true;
        ++tp;
      } else {
        ++fp;
      }
    }
    for (bool u : used)
      if (!u) ++fn;
  }
  if (tp + fp + fn == 0) return 1.0;  // empty predictions matching an empty set
  const double precision = tp + fp > 0 ? double(tp) / double(tp + fp) : 0.0;
  const double recall = tp + fn > 0 ? double(tp) / double(tp + fn) : 0.0;
  return precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

BenchReport bench(const ModelGraphF& g, const std::vector<int>& batch_sizes, int iters,
                  int input_hw) {
  if (iters < 1) throw Error(Errc::usage, "bench needs iters >= 1");
  BenchReport report;
  for (const auto& n : g.nodes)
    if (n.kind == NodeKind::repvgg_block) report.graph_has_rep_blocks = true;

  SplitMix64 rng(0x9a7e11u);
  for (int bs : batch_sizes) {
    TensorF x = random_tensor<float>({bs, 3, input_hw, input_hw}, rng, 1.0);
    for (int i = 0; i < 3; ++i) (void)forward(g, x);  // warm-up
    std::vector<double> ms(static_cast<size_t>(iters));
    for (int i = 0; i < iters; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      (void)forward(g, x);
      const auto t1 = std::chrono::steady_clock::now();
      ms[size_t(i)] = std::chrono::duration<double, std::milli>(t1 - t0).count();
    }
    std::sort(ms.begin(), ms.end());
    const double median = ms.size() % 2 == 1
                              ? ms[ms.size() / 2]
                              : 0.5 * (ms[ms.size() / 2 - 1] + ms[ms.size() / 2]);
    report.rows.push_back(
        BenchReport::Row{bs, median, median > 0 ? bs * 1000.0 / median : 0.0, iters});
  }
  return report;
}

}  // namespace repdet
