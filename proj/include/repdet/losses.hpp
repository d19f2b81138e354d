#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "repdet/assign.hpp"
#include "repdet/boxes.hpp"

namespace repdet {

// Probabilities are clamped to [1e-9, 1-1e-9] before any log; the single
// shared guard keeps every finite-difference check meaningful.
constexpr double kProbClamp = 1e-9;

enum class ClsLossKind { focal, qfl, vfl, poly1 };
enum class IouLossKind { giou, ciou, diou, siou };

const char* cls_loss_name(ClsLossKind k);
ClsLossKind cls_loss_from_name(const std::string& name);
const char* iou_loss_name(IouLossKind k);
IouLossKind iou_loss_from_name(const std::string& name);

struct ClsLossConfig {
  double focal_alpha = 0.25, focal_gamma = 2.0;
  double qfl_beta = 2.0;
  double vfl_alpha = 0.75, vfl_gamma = 2.0;
  double poly1_eps = 1.0;
};

// Scalar loss plus its derivative with respect to the pre-sigmoid logit.
struct ScalarLoss {
  double loss = 0;
  double grad = 0;
};

// p is the predicted probability in (0,1); q the soft target in [0,1].
ScalarLoss cls_loss(ClsLossKind kind, double p, double q, const ClsLossConfig& cfg = {});

struct SiouOptions {
  // Pinned angle cost: 1 - 2*sin^2(arcsin(x) - pi/4) == 2x*sqrt(1-x^2).
  // The flag selects the circulating quarter-phase-dropped reading
  // 1 - 2*sin^2(arcsin(x)) == 1 - 2x^2 instead.
  bool alt_angle = false;
};

struct BoxLoss {
  double loss = 0;
  std::array<double, 4> grad{};  // d loss / d (x1,y1,x2,y2) of the prediction
  bool degenerate = false;       // pred width/height hit the epsilon-area guard
};

BoxLoss iou_loss(IouLossKind kind, const Box& pred, const Box& gt, const SiouOptions& siou = {});

struct VecLoss {
  double loss = 0;
  std::vector<double> grad;
};

// Two-bin cross-entropy against the discretized distribution around the
// continuous target y in [0, reg_max]; logits has reg_max+1 entries.
VecLoss dfl_loss(std::span<const double> logits, double y);

// sum_i i * softmax(logits)_i, in [0, reg_max].
double dfl_expectation(std::span<const double> logits);

// Binary cross-entropy with logits.
ScalarLoss object_loss(double logit, double target);

struct LossWeights {
  double lambda_reg = 2.5;
  double mu_obj = 0.0;
};

// Free-parameter container: per-anchor class logits plus either per-side bin
// logits (reg_max >= 1) or raw distances in stride units (reg_max == 0,
// decoded through max(d, 0)).
struct Prediction {
  int num_classes = 1;
  int reg_max = 0;
  std::vector<double> cls_logits;  // A x C
  std::vector<double> reg;         // A x 4 x (reg_max+1), or A x 4
  std::vector<double> obj_logits;  // optional, A

  int num_anchors() const;
  int reg_stride() const { return 4 * (reg_max + 1); }
  double cls_prob(int a, int c) const;               // sigmoid, clamped
  std::vector<double> cls_probs() const;             // A x C
  double distance(int a, int side) const;            // stride units
  std::vector<Box> decode_boxes(const std::vector<AnchorPoint>& anchors) const;
  void validate(size_t num_anchors) const;
};

struct DetLossConfig {
  ClsLossKind cls_kind = ClsLossKind::vfl;
  IouLossKind reg_kind = IouLossKind::siou;
  bool use_dfl = false;
  bool use_obj = false;
  LossWeights weights;
  ClsLossConfig cls_cfg;
  SiouOptions siou;
};

struct DetLossResult {
  double total = 0, cls = 0, reg = 0, obj = 0;
  std::vector<double> grad_cls;  // A x C, wrt logits
  std::vector<double> grad_reg;  // same layout as Prediction::reg
  std::vector<double> grad_obj;  // A (empty when unused)
  double fg_norm = 1;
  double mean_pos_iou = 0;
  int positives = 0;
};

// L_det = L_cls + lambda*L_reg + mu*L_obj. Classification runs over every
// anchor with soft target fg_weight * IoU(decoded, gt) on the assigned
// class; regression (IoU + optional per-side bin loss) runs over positives
// weighted by fg; everything is normalized by max(sum fg, 1). Targets are
// treated as constants.
DetLossResult detection_loss(const Prediction& pred, const std::vector<AnchorPoint>& anchors,
                             const Assignment& assignment, const DetLossConfig& cfg);

struct KdLoss {
  double loss = 0, cls_part = 0, reg_part = 0;
  std::vector<double> grad_cls;  // wrt student cls logits
  std::vector<double> grad_reg;  // wrt student reg logits (DFL mode)
};

// KL(teacher || student) on temperature-softened distributions, scaled by
// temperature^2; classification per class (Bernoulli), regression over the
// four per-side bin distributions, summed. The teacher is a constant.
KdLoss kd_loss(const Prediction& student, const Prediction& teacher, double temperature);

struct DistillConfig {
  double alpha_start = 1.0;
  double alpha_end = 0.0;
  int total_steps = 1;
  double temperature = 1.0;
};

// alpha(step) = end + (start-end) * (1 + cos(pi*step/T)) / 2
double cosine_alpha(int step, const DistillConfig& cfg);

double total_loss(double det, double kd, double alpha);

}  // namespace repdet
