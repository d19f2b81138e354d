#pragma once

#include "repdet/assign.hpp"
#include "repdet/losses.hpp"
#include "repdet/quant_params.hpp"

namespace repdet {

// Desk-scale objective-optimization loop: the free parameters are per-anchor
// class logits and per-side regression logits (or raw distances), trained by
// plain gradient descent with per-step re-assignment.
struct SandboxConfig {
  int grid_h = 8, grid_w = 8, stride = 8;
  int num_classes = 4;
  int reg_max = 8;  // 0 = plain distance regression
  int steps = 2000;
  double lr = 0.5;

  AssignKind warm = AssignKind::none;
  AssignKind main = AssignKind::tal;
  int warmup_epochs = 0;
  TalConfig tal;
  AtssConfig atss;
  SimOtaConfig simota;

  DetLossConfig loss;
  DistillConfig distill;  // weighting schedule used when a teacher is given

  // QAT: parameters pass through a straight-through fake quantizer.
  bool qat = false;
  double qat_scale = 1.0 / 16.0;
  double cwd_weight = 0.0;  // channel-distillation on class maps vs the teacher
};

struct SandboxResult {
  std::vector<double> det_curve;    // detection loss per step
  std::vector<double> total_curve;  // detection + alpha * distillation
  std::vector<double> iou_curve;    // mean positive IoU per step
  double initial_det = 0;
  double final_det = 0;
  Prediction final_pred;
  int steps_run = 0;
};

// Throws Errc::computation with a step diagnostic if the loss diverges.
SandboxResult sandbox_fit(const SandboxConfig& cfg, const std::vector<GtBox>& gts,
                          const Prediction* teacher = nullptr);

}  // namespace repdet
