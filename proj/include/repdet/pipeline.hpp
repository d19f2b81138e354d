#pragma once

#include <vector>

#include "repdet/assign.hpp"
#include "repdet/boxes.hpp"
#include "repdet/graph.hpp"

namespace repdet {

struct LetterboxSpec {
  int target_size = 640;
  int border = 0;        // gray ring per side; content = target - 2*border
  int pad_value = 114;   // 0..255

  int content_size() const { return target_size - 2 * border; }
  void validate() const;
};

// Exact inverse mapping for boxes produced on the letterboxed image.
struct LetterboxTransform {
  double scale_x = 1, scale_y = 1;  // content px per original px
  int dx = 0, dy = 0;               // content offset inside the target
  int orig_w = 0, orig_h = 0;

  Box to_image(const Box& b) const;  // letterboxed coords -> original image
  Box to_net(const Box& b) const;    // original image -> letterboxed coords
};

struct LetterboxResult {
  TensorF image;  // (1,C,target,target)
  LetterboxTransform transform;
};

// Aspect-preserving resize so the longer side fits the content region, then
// centered padding with the gray value to target x target.
LetterboxResult letterbox(const TensorF& image, const LetterboxSpec& spec);

TensorF resize_bilinear(const TensorF& image, int out_h, int out_w);

struct HeadOutputs {
  struct Level {
    std::string name;  // P3/P4/P5
    TensorF cls;       // (N, num_classes, H, W) logits
    TensorF reg;       // (N, 4*(reg_max+1), H, W) or (N, 4, H, W)
    int stride = 8;
  };
  std::vector<Level> levels;
  int num_classes = 1;
  int reg_max = 0;
};

// Pulls the tagged head outputs out of a forward() result map.
HeadOutputs collect_head_outputs(const ModelGraphF& g,
                                 const std::map<std::string, TensorF>& results);

struct Detection {
  Box box;
  double score = 0;
  int class_id = 0;
};

// Distance decode at each grid cell: box = (cx-l*s, cy-t*s, cx+r*s, cy+b*s)
// with per-side distances from the bin expectation (or raw channels clamped
// at zero). Zero-area boxes are dropped.
std::vector<Detection> decode_predictions(const HeadOutputs& head, double conf_thresh);

// Greedy descending-score suppression at IoU >= iou_thresh; equal scores
// keep the lower original index first.
std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thresh,
                           bool class_aware = true);

// Greedy one-to-one class-aware matching at IoU >= iou_match; F1 over the
// whole set. The desk-scale stand-in for a validation detection metric.
double score_proxy(const std::vector<std::vector<Detection>>& dets_per_image,
                   const std::vector<std::vector<GtBox>>& gts_per_image, double iou_match = 0.5);

struct BenchReport {
  struct Row {
    int batch = 1;
    double ms_median = 0;
    double items_per_s = 0;
    int iters = 0;
  };
  std::vector<Row> rows;
  bool graph_has_rep_blocks = false;  // timing an unfused graph gets flagged
};

// Median wall-clock per forward after warm-up, per batch size.
BenchReport bench(const ModelGraphF& g, const std::vector<int>& batch_sizes, int iters,
                  int input_hw = 64);

}  // namespace repdet
