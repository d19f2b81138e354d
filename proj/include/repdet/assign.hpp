#pragma once

#include <string>
#include <vector>

#include "repdet/boxes.hpp"
#include "repdet/errors.hpp"

namespace repdet {

// Grid-cell reference point: (cx,cy) = ((x+0.5)*stride, (y+0.5)*stride).
struct AnchorPoint {
  double cx = 0, cy = 0;
  int stride = 8;
  int level = 0;
};

struct GtBox {
  Box box;
  int class_id = 0;
};

struct GridLevel {
  int stride = 8;
  int h = 0, w = 0;
};

std::vector<AnchorPoint> make_anchor_grid(const std::vector<GridLevel>& levels);

// Synthesized square box of side 5*stride around the point; used only where
// an assigner needs anchor-box IoU (the ATSS candidate statistics).
Box anchor_box(const AnchorPoint& a, double half_cells = 2.5);

struct IouMatrix {
  int rows = 0, cols = 0;
  std::vector<double> v;  // row-major

  double at(int r, int c) const { return v[size_t(r) * size_t(cols) + size_t(c)]; }
};

IouMatrix pairwise_iou(const std::vector<Box>& a, const std::vector<Box>& b);

// Per-anchor assignment result. matched_gt is set iff fg_weight > 0; an
// anchor is matched to at most one ground-truth box.
struct Assignment {
  struct Slot {
    int matched_gt = -1;
    double fg_weight = 0.0;
    int class_id = -1;
    Box box{};
  };
  std::vector<Slot> slots;
  int num_gts = 0;

  int positives() const;
  void check_invariants() const;
};

// All assigners share deterministic tie-breaking: equal keys fall back to
// the lower anchor index, then the lower ground-truth index. A ground truth
// left without candidates receives one forced anchor (highest IoU, then
// nearest center, then lowest index among still-background anchors) unless
// force_unmatched is off.

struct AtssConfig {
  int topk = 9;
  bool force_unmatched = true;
};

Assignment atss_assign(const std::vector<AnchorPoint>& anchors, const std::vector<GtBox>& gts,
                       const AtssConfig& cfg = {});

struct SimOtaConfig {
  double center_radius = 2.5;
  double cost_cls_weight = 1.0;
  double cost_iou_weight = 3.0;
  int dynk_candidates = 10;  // IoU sum over this many best candidates picks k
  bool force_unmatched = true;
};

// cls_scores: per-anchor per-class probabilities in (0,1), row-major A x C.
Assignment simota_assign(const std::vector<AnchorPoint>& anchors, const std::vector<GtBox>& gts,
                         const std::vector<double>& cls_scores, const std::vector<Box>& pred_boxes,
                         int num_classes, const SimOtaConfig& cfg = {});

struct TalConfig {
  double alpha = 1.0;
  double beta = 6.0;
  int topk = 13;
  bool force_unmatched = true;
};

// t = s^alpha * u^beta
double alignment_metric(double cls_score, double iou_value, const TalConfig& cfg);

Assignment tal_assign(const std::vector<AnchorPoint>& anchors, const std::vector<GtBox>& gts,
                      const std::vector<double>& cls_scores, const std::vector<Box>& pred_boxes,
                      int num_classes, const TalConfig& cfg = {});

enum class AssignKind { none, atss, simota, tal };

const char* assign_kind_name(AssignKind k);
AssignKind assign_kind_from_name(const std::string& name);

// Warm strategy while epoch < warmup_epochs, then the main strategy;
// warm == none means the main strategy throughout.
AssignKind warmup_schedule(int epoch, int warmup_epochs, AssignKind warm,
                           AssignKind main = AssignKind::tal);

}  // namespace repdet
