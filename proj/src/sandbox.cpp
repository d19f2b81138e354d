#include "repdet/sandbox.hpp"

#include <cmath>

#include "repdet/quant.hpp"

namespace repdet {

namespace {

Assignment run_assigner(AssignKind kind, const std::vector<AnchorPoint>& anchors,
                        const std::vector<GtBox>& gts, const Prediction& pred,
                        const SandboxConfig& cfg) {
  switch (kind) {
    case AssignKind::atss:
      return atss_assign(anchors, gts, cfg.atss);
    case AssignKind::simota:
      return simota_assign(anchors, gts, pred.cls_probs(), pred.decode_boxes(anchors),
                           pred.num_classes, cfg.simota);
    case AssignKind::tal:
    case AssignKind::none:
      return tal_assign(anchors, gts, pred.cls_probs(), pred.decode_boxes(anchors),
                        pred.num_classes, cfg.tal);
  }
  throw Error(Errc::usage, "unhandled assigner");
}

}  // namespace

SandboxResult sandbox_fit(const SandboxConfig& cfg, const std::vector<GtBox>& gts,
                          const Prediction* teacher) {
  if (cfg.steps < 1) throw Error(Errc::usage, "sandbox needs steps >= 1");
  if (cfg.loss.use_dfl && cfg.reg_max < 1)
    throw Error(Errc::usage, "sandbox bin loss needs reg_max >= 1");

  const auto anchors = make_anchor_grid({GridLevel{cfg.stride, cfg.grid_h, cfg.grid_w}});
  const size_t A = anchors.size();

  Prediction params;
  params.num_classes = cfg.num_classes;
  params.reg_max = cfg.reg_max;
  params.cls_logits.assign(A * size_t(cfg.num_classes), 0.0);
  params.reg.assign(cfg.reg_max > 0 ? A * size_t(params.reg_stride()) : A * 4, 0.0);
  if (cfg.loss.use_obj) params.obj_logits.assign(A, 0.0);

  QuantParams qat_q;
  qat_q.scale = cfg.qat_scale;

  DistillConfig distill = cfg.distill;
  if (distill.total_steps < cfg.steps) distill.total_steps = cfg.steps;

  auto all_finite = [](const std::vector<double>& v) {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  };

  SandboxResult out;
  for (int step = 0; step < cfg.steps; ++step) {
    if (!all_finite(params.cls_logits) || !all_finite(params.reg))
      throw Error(Errc::computation, "sandbox diverged at step " + std::to_string(step) +
                                         " (parameters are not finite)");
    // effective prediction: QAT passes parameters through the quantizer
    Prediction eff = params;
    SteResult ste_cls, ste_reg;
    if (cfg.qat) {
      ste_cls = fake_quantize_ste(params.cls_logits, qat_q);
      ste_reg = fake_quantize_ste(params.reg, qat_q);
      eff.cls_logits = ste_cls.value;
      eff.reg = ste_reg.value;
    }

    const AssignKind kind = warmup_schedule(step, cfg.warmup_epochs, cfg.warm, cfg.main);
    const Assignment assignment = run_assigner(kind, anchors, gts, eff, cfg);

    DetLossResult det = detection_loss(eff, anchors, assignment, cfg.loss);
    double total = det.total;

    std::vector<double> grad_cls = det.grad_cls;
    std::vector<double> grad_reg = det.grad_reg;

    if (teacher != nullptr) {
      const double alpha = cosine_alpha(step, distill);
      const KdLoss kd = kd_loss(eff, *teacher, distill.temperature);
      total = total_loss(det.total, kd.loss, alpha);
      for (size_t i = 0; i < grad_cls.size(); ++i) grad_cls[i] += alpha * kd.grad_cls[i];
      for (size_t i = 0; i < grad_reg.size(); ++i) grad_reg[i] += alpha * kd.grad_reg[i];
    }

    if (cfg.qat && cfg.cwd_weight > 0 && teacher != nullptr) {
      // class maps as (1, C, H, W) feature maps
      TensorD tmap({1, cfg.num_classes, cfg.grid_h, cfg.grid_w});
      TensorD smap(tmap.shape);
      for (size_t a = 0; a < A; ++a)
        for (int c = 0; c < cfg.num_classes; ++c) {
          const int y = int(a) / cfg.grid_w, x = int(a) % cfg.grid_w;
          tmap.at(0, c, y, x) = teacher->cls_logits[a * size_t(cfg.num_classes) + size_t(c)];
          smap.at(0, c, y, x) = eff.cls_logits[a * size_t(cfg.num_classes) + size_t(c)];
        }
      const CwdResult cwd = cwd_loss(tmap, smap, distill.temperature);
      total += cfg.cwd_weight * cwd.loss;
      for (size_t a = 0; a < A; ++a)
        for (int c = 0; c < cfg.num_classes; ++c) {
          const int y = int(a) / cfg.grid_w, x = int(a) % cfg.grid_w;
          grad_cls[a * size_t(cfg.num_classes) + size_t(c)] +=
              cfg.cwd_weight * cwd.grad.at(0, c, y, x);
        }
    }

    if (!std::isfinite(total))
      throw Error(Errc::computation,
                  "sandbox diverged at step " + std::to_string(step) + " (loss is not finite)");

    out.det_curve.push_back(det.total);
    out.total_curve.push_back(total);
    out.iou_curve.push_back(det.mean_pos_iou);

    if (cfg.qat) {
      for (size_t i = 0; i < grad_cls.size(); ++i) grad_cls[i] *= ste_cls.grad_mask[i];
      for (size_t i = 0; i < grad_reg.size(); ++i) grad_reg[i] *= ste_reg.grad_mask[i];
    }
    for (size_t i = 0; i < params.cls_logits.size(); ++i)
      params.cls_logits[i] -= cfg.lr * grad_cls[i];
    for (size_t i = 0; i < params.reg.size(); ++i) params.reg[i] -= cfg.lr * grad_reg[i];
    if (cfg.loss.use_obj)
      for (size_t i = 0; i < params.obj_logits.size(); ++i)
        params.obj_logits[i] -= cfg.lr * det.grad_obj[i];
  }

  out.initial_det = out.det_curve.front();
  out.final_det = out.det_curve.back();
  out.final_pred = params;
  out.steps_run = cfg.steps;
  return out;
}

}  // namespace repdet
