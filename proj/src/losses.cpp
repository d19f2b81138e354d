#include "repdet/losses.hpp"

#include <algorithm>
#include <cmath>

namespace repdet {

namespace {

double clamp_prob(double p) { return std::min(1.0 - kProbClamp, std::max(kProbClamp, p)); }

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// log(1+e^z) without overflow
double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

}  // namespace

const char* cls_loss_name(ClsLossKind k) {
  switch (k) {
    case ClsLossKind::focal: return "focal";
    case ClsLossKind::qfl: return "qfl";
    case ClsLossKind::vfl: return "vfl";
    case ClsLossKind::poly1: return "poly1";
  }
  return "vfl";
}

ClsLossKind cls_loss_from_name(const std::string& name) {
  if (name == "focal") return ClsLossKind::focal;
  if (name == "qfl") return ClsLossKind::qfl;
  if (name == "vfl") return ClsLossKind::vfl;
  if (name == "poly1") return ClsLossKind::poly1;
  throw Error(Errc::usage, "unknown classification loss '" + name + "'");
}

const char* iou_loss_name(IouLossKind k) {
  switch (k) {
    case IouLossKind::giou: return "giou";
    case IouLossKind::ciou: return "ciou";
    case IouLossKind::diou: return "diou";
    case IouLossKind::siou: return "siou";
  }
  return "giou";
}

IouLossKind iou_loss_from_name(const std::string& name) {
  if (name == "giou") return IouLossKind::giou;
  if (name == "ciou") return IouLossKind::ciou;
  if (name == "diou") return IouLossKind::diou;
  if (name == "siou") return IouLossKind::siou;
  throw Error(Errc::usage, "unknown box regression loss '" + name + "'");
}

ScalarLoss cls_loss(ClsLossKind kind, double p, double q, const ClsLossConfig& cfg) {
  if (!(p > 0.0 && p < 1.0))
    throw Error(Errc::computation, "cls_loss probability must lie in (0,1)");
  if (!(q >= 0.0 && q <= 1.0))
    throw Error(Errc::computation, "cls_loss target must lie in [0,1]");
  p = clamp_prob(p);
  const double lp = std::log(p), lq = std::log(1.0 - p);
  const double dpdz = p * (1.0 - p);
  ScalarLoss out;
  switch (kind) {
    case ClsLossKind::focal: {
      // soft interpolation of the binary form; reduces to it at q in {0,1}
      const double a = cfg.focal_alpha, g = cfg.focal_gamma;
      const double pos = std::pow(1.0 - p, g) * (-lp);
      const double neg = std::pow(p, g) * (-lq);
      out.loss = q * a * pos + (1.0 - q) * (1.0 - a) * neg;
      out.grad = q * a * std::pow(1.0 - p, g) * (g * p * lp - (1.0 - p)) +
                 (1.0 - q) * (1.0 - a) * std::pow(p, g) * (p - g * (1.0 - p) * lq);
      break;
    }
    case ClsLossKind::qfl: {
      const double b = cfg.qfl_beta;
      const double ce = -(q * lp + (1.0 - q) * lq);
      const double gap = std::abs(q - p);
      const double mod = std::pow(gap, b);
      out.loss = mod * ce;
      const double sign = q >= p ? 1.0 : -1.0;
      const double dmod = gap > 0 ? b * std::pow(gap, b - 1.0) * sign * (-dpdz) : 0.0;
      out.grad = dmod * ce + mod * (p - q);
      break;
    }
    case ClsLossKind::vfl: {
      if (q > 0.0) {
        out.loss = -q * (q * lp + (1.0 - q) * lq);
        out.grad = q * (p - q);
      } else {
        const double a = cfg.vfl_alpha, g = cfg.vfl_gamma;
        out.loss = -a * std::pow(p, g) * lq;
        out.grad = a * std::pow(p, g) * (p - g * (1.0 - p) * lq);
      }
      break;
    }
    case ClsLossKind::poly1: {
      const double ce = -(q * lp + (1.0 - q) * lq);
      const double pt = q * p + (1.0 - q) * (1.0 - p);
      out.loss = ce + cfg.poly1_eps * (1.0 - pt);
      out.grad = (p - q) - cfg.poly1_eps * dpdz * (2.0 * q - 1.0);
      break;
    }
  }
  return out;
}

namespace {

// Forward-mode dual number over the four prediction coordinates. The IoU
// losses are evaluated once on duals, which yields the exact derivative of
// the evaluated formula (so finite differences can verify it directly).
struct Dual4 {
  double v = 0;
  std::array<double, 4> d{};

  static Dual4 input(double value, int slot) {
    Dual4 x;
    x.v = value;
    x.d[size_t(slot)] = 1.0;
    return x;
  }
  static Dual4 constant(double value) {
    Dual4 x;
    x.v = value;
    return x;
  }
};

Dual4 operator+(const Dual4& a, const Dual4& b) {
  Dual4 r;
  r.v = a.v + b.v;
  for (int i = 0; i < 4; ++i) r.d[size_t(i)] = a.d[size_t(i)] + b.d[size_t(i)];
  return r;
}
Dual4 operator+(const Dual4& a, double b) { return a + Dual4::constant(b); }
Dual4 operator+(double a, const Dual4& b) { return Dual4::constant(a) + b; }

Dual4 operator-(const Dual4& a) {
  Dual4 r;
  r.v = -a.v;
  for (int i = 0; i < 4; ++i) r.d[size_t(i)] = -a.d[size_t(i)];
  return r;
}
Dual4 operator-(const Dual4& a, const Dual4& b) { return a + (-b); }
Dual4 operator-(const Dual4& a, double b) { return a + (-b); }
Dual4 operator-(double a, const Dual4& b) { return Dual4::constant(a) + (-b); }

Dual4 operator*(const Dual4& a, const Dual4& b) {
  Dual4 r;
  r.v = a.v * b.v;
  for (int i = 0; i < 4; ++i) r.d[size_t(i)] = a.d[size_t(i)] * b.v + a.v * b.d[size_t(i)];
  return r;
}
Dual4 operator*(const Dual4& a, double b) {
  Dual4 r;
  r.v = a.v * b;
  for (int i = 0; i < 4; ++i) r.d[size_t(i)] = a.d[size_t(i)] * b;
  return r;
}
Dual4 operator*(double a, const Dual4& b) { return b * a; }

Dual4 operator/(const Dual4& a, const Dual4& b) {
  Dual4 r;
  r.v = a.v / b.v;
  const double inv2 = 1.0 / (b.v * b.v);
  for (int i = 0; i < 4; ++i)
    r.d[size_t(i)] = (a.d[size_t(i)] * b.v - a.v * b.d[size_t(i)]) * inv2;
  return r;
}
Dual4 operator/(const Dual4& a, double b) { return a * (1.0 / b); }

Dual4 dmax(const Dual4& a, const Dual4& b) { return a.v >= b.v ? a : b; }
Dual4 dmax(const Dual4& a, double b) { return a.v >= b ? a : Dual4::constant(b); }
Dual4 dmin(const Dual4& a, const Dual4& b) { return a.v <= b.v ? a : b; }

Dual4 dabs(const Dual4& a) { return a.v >= 0 ? a : -a; }

Dual4 dsqrt(const Dual4& a) {
  Dual4 r;
  r.v = std::sqrt(a.v);
  const double scale = 0.5 / r.v;
  for (int i = 0; i < 4; ++i) r.d[size_t(i)] = a.d[size_t(i)] * scale;
  return r;
}

Dual4 dexp(const Dual4& a) {
  Dual4 r;
  r.v = std::exp(a.v);
  for (int i = 0; i < 4; ++i) r.d[size_t(i)] = a.d[size_t(i)] * r.v;
  return r;
}

Dual4 datan(const Dual4& a) {
  Dual4 r;
  r.v = std::atan(a.v);
  const double scale = 1.0 / (1.0 + a.v * a.v);
  for (int i = 0; i < 4; ++i) r.d[size_t(i)] = a.d[size_t(i)] * scale;
  return r;
}

Dual4 dsquare(const Dual4& a) { return a * a; }

constexpr double kAreaEps = 1e-9;

}  // namespace

BoxLoss iou_loss(IouLossKind kind, const Box& pred, const Box& gt, const SiouOptions& siou) {
  if (!gt.valid()) throw Error(Errc::model, "iou_loss: degenerate ground-truth box");
  BoxLoss out;

  const Dual4 px1 = Dual4::input(pred.x1, 0), py1 = Dual4::input(pred.y1, 1);
  const Dual4 px2 = Dual4::input(pred.x2, 2), py2 = Dual4::input(pred.y2, 3);
  const Dual4 gx1 = Dual4::constant(gt.x1), gy1 = Dual4::constant(gt.y1);
  const Dual4 gx2 = Dual4::constant(gt.x2), gy2 = Dual4::constant(gt.y2);

  Dual4 pw = px2 - px1, ph = py2 - py1;
  const Dual4 gw = gx2 - gx1, gh = gy2 - gy1;
  if (pw.v <= kAreaEps || ph.v <= kAreaEps) {
    out.degenerate = true;
    pw = dmax(pw, kAreaEps);
    ph = dmax(ph, kAreaEps);
  }

  const Dual4 inter_w = dmax(dmin(px2, gx2) - dmax(px1, gx1), 0.0);
  const Dual4 inter_h = dmax(dmin(py2, gy2) - dmax(py1, gy1), 0.0);
  const Dual4 inter = inter_w * inter_h;
  const Dual4 uni = pw * ph + gw * gh - inter;
  const Dual4 iou_d = inter / uni;

  // smallest enclosing box
  const Dual4 cw = dmax(px2, gx2) - dmin(px1, gx1);
  const Dual4 ch = dmax(py2, gy2) - dmin(py1, gy1);

  Dual4 loss = 1.0 - iou_d;
  switch (kind) {
    case IouLossKind::giou: {
      const Dual4 carea = cw * ch;
      loss = loss + (carea - uni) / carea;
      break;
    }
    case IouLossKind::diou:
    case IouLossKind::ciou: {
      const Dual4 dx = (px1 + px2 - gx1 - gx2) * 0.5;
      const Dual4 dy = (py1 + py2 - gy1 - gy2) * 0.5;
      const Dual4 rho2 = dx * dx + dy * dy;
      const Dual4 c2 = cw * cw + ch * ch;
      loss = loss + rho2 / c2;
      if (kind == IouLossKind::ciou) {
        constexpr double k4pi2 = 4.0 / (3.141592653589793238462643383280 *
                                        3.141592653589793238462643383280);
        const Dual4 v = k4pi2 * dsquare(datan(gw / gh) - datan(pw / ph));
        const Dual4 alpha = v / (1.0 - iou_d + v + 1e-12);
        loss = loss + alpha * v;
      }
      break;
    }
    case IouLossKind::siou: {
      const Dual4 dx = (gx1 + gx2 - px1 - px2) * 0.5;  // gt center - pred center
      const Dual4 dy = (gy1 + gy2 - py1 - py2) * 0.5;
      const Dual4 sigma = dsqrt(dx * dx + dy * dy);
      Dual4 angle = Dual4::constant(0.0);
      if (sigma.v > 1e-12) {
        const Dual4 s = dabs(dy) / sigma;
        if (siou.alt_angle) {
          // quarter-phase-dropped reading: 1 - 2*sin^2(arcsin(s))
          angle = 1.0 - 2.0 * s * s;
        } else {
          // 1 - 2*sin^2(arcsin(s) - pi/4) == sin(2*arcsin(s)) = 2*s*sqrt(1-s^2)
          angle = 2.0 * s * dsqrt(dmax(1.0 - s * s, 1e-12));
        }
      }
      const Dual4 gamma = 2.0 - angle;
      const Dual4 rho_x = dsquare(dx / cw);
      const Dual4 rho_y = dsquare(dy / ch);
      const Dual4 dist_cost = (1.0 - dexp(-gamma * rho_x)) + (1.0 - dexp(-gamma * rho_y));
      const Dual4 om_w = dabs(pw - gw) / dmax(pw, gw);
      const Dual4 om_h = dabs(ph - gh) / dmax(ph, gh);
      const Dual4 shape_cost =
          dsquare(dsquare(1.0 - dexp(-om_w))) + dsquare(dsquare(1.0 - dexp(-om_h)));  // theta = 4
      loss = loss + (dist_cost + shape_cost) * 0.5;
      break;
    }
  }
  out.loss = loss.v;
  out.grad = loss.d;
  return out;
}

VecLoss dfl_loss(std::span<const double> logits, double y) {
  const int bins = int(logits.size());
  if (bins < 2) throw Error(Errc::model, "dfl_loss needs reg_max >= 1 (at least two bins)");
  const int reg_max = bins - 1;
  if (!(y >= 0.0 && y <= double(reg_max)))
    throw Error(Errc::computation, "dfl target out of [0, reg_max]");

  // softmax
  double zmax = logits[0];
  for (double z : logits) zmax = std::max(zmax, z);
  std::vector<double> soft(static_cast<size_t>(bins));
  double denom = 0;
  for (int i = 0; i < bins; ++i) {
    soft[size_t(i)] = std::exp(logits[size_t(i)] - zmax);
    denom += soft[size_t(i)];
  }
  for (auto& s : soft) s /= denom;

  int lo = int(std::floor(y));
  if (lo == reg_max) lo = reg_max - 1;  // y == reg_max collapses to the last bin pair
  const double w_hi = y - lo;
  const double w_lo = 1.0 - w_hi;

  VecLoss out;
  out.loss = -(w_lo * std::log(std::max(soft[size_t(lo)], kProbClamp)) +
               w_hi * std::log(std::max(soft[size_t(lo) + 1], kProbClamp)));
  out.grad = soft;  // grad_k = S_k - t_k, with the two-hot target t
  out.grad[size_t(lo)] -= w_lo;
  out.grad[size_t(lo) + 1] -= w_hi;
  return out;
}

double dfl_expectation(std::span<const double> logits) {
  const int bins = int(logits.size());
  if (bins < 2) throw Error(Errc::model, "dfl_expectation needs at least two bins");
  double zmax = logits[0];
  for (double z : logits) zmax = std::max(zmax, z);
  double denom = 0, acc = 0;
  for (int i = 0; i < bins; ++i) denom += std::exp(logits[size_t(i)] - zmax);
  for (int i = 0; i < bins; ++i) acc += i * std::exp(logits[size_t(i)] - zmax) / denom;
  return acc;
}

ScalarLoss object_loss(double logit, double target) {
  if (!(target >= 0.0 && target <= 1.0))
    throw Error(Errc::computation, "object_loss target must lie in [0,1]");
  ScalarLoss out;
  out.loss = softplus(logit) - logit * target;
  out.grad = sigmoid(logit) - target;
  return out;
}

int Prediction::num_anchors() const {
  return num_classes > 0 ? int(cls_logits.size()) / num_classes : 0;
}

double Prediction::cls_prob(int a, int c) const {
  return clamp_prob(sigmoid(cls_logits[size_t(a) * size_t(num_classes) + size_t(c)]));
}

std::vector<double> Prediction::cls_probs() const {
  std::vector<double> p(cls_logits.size());
  for (size_t i = 0; i < p.size(); ++i) p[i] = clamp_prob(sigmoid(cls_logits[i]));
  return p;
}

double Prediction::distance(int a, int side) const {
  if (reg_max > 0) {
    const int bins = reg_max + 1;
    return dfl_expectation(std::span<const double>(
        reg.data() + (size_t(a) * 4 + size_t(side)) * size_t(bins), size_t(bins)));
  }
  return std::max(0.0, reg[size_t(a) * 4 + size_t(side)]);
}

std::vector<Box> Prediction::decode_boxes(const std::vector<AnchorPoint>& anchors) const {
  std::vector<Box> boxes(anchors.size());
  for (size_t a = 0; a < anchors.size(); ++a) {
    const double s = anchors[a].stride;
    boxes[a] = Box{anchors[a].cx - distance(int(a), 0) * s, anchors[a].cy - distance(int(a), 1) * s,
                   anchors[a].cx + distance(int(a), 2) * s,
                   anchors[a].cy + distance(int(a), 3) * s};
  }
  return boxes;
}

void Prediction::validate(size_t num_anchors) const {
  if (num_classes < 1) throw Error(Errc::model, "prediction needs num_classes >= 1");
  if (reg_max < 0) throw Error(Errc::model, "prediction reg_max must be >= 0");
  if (cls_logits.size() != num_anchors * size_t(num_classes))
    throw ShapeError("prediction cls size mismatch");
  const size_t expect = reg_max > 0 ? num_anchors * size_t(reg_stride()) : num_anchors * 4;
  if (reg.size() != expect) throw ShapeError("prediction reg size mismatch");
  if (!obj_logits.empty() && obj_logits.size() != num_anchors)
    throw ShapeError("prediction obj size mismatch");
}

DetLossResult detection_loss(const Prediction& pred, const std::vector<AnchorPoint>& anchors,
                             const Assignment& assignment, const DetLossConfig& cfg) {
  pred.validate(anchors.size());
  if (assignment.slots.size() != anchors.size())
    throw ShapeError("assignment not aligned with anchors");
  if (cfg.use_dfl && pred.reg_max < 1)
    throw Error(Errc::model, "detection_loss: bin loss requested but prediction has no bins");
  if (cfg.use_obj && pred.obj_logits.empty())
    throw Error(Errc::model, "detection_loss: object loss requested without object logits");

  const int C = pred.num_classes;
  const int A = int(anchors.size());
  DetLossResult out;
  out.grad_cls.assign(pred.cls_logits.size(), 0.0);
  out.grad_reg.assign(pred.reg.size(), 0.0);
  if (cfg.use_obj) out.grad_obj.assign(size_t(A), 0.0);

  double fg_sum = 0;
  for (const auto& s : assignment.slots) fg_sum += s.fg_weight;
  const double norm = std::max(fg_sum, 1.0);
  out.fg_norm = norm;

  const std::vector<Box> boxes = pred.decode_boxes(anchors);

  // per-positive quality, treated as a constant target
  std::vector<double> quality(size_t(A), 0.0);
  double iou_acc = 0;
  for (int a = 0; a < A; ++a) {
    const auto& slot = assignment.slots[size_t(a)];
    if (slot.fg_weight <= 0) continue;
    quality[size_t(a)] = iou(boxes[size_t(a)], slot.box);
    iou_acc += quality[size_t(a)];
    ++out.positives;
  }
  out.mean_pos_iou = out.positives > 0 ? iou_acc / out.positives : 0.0;

  // classification over all anchors and classes
  for (int a = 0; a < A; ++a) {
    const auto& slot = assignment.slots[size_t(a)];
    for (int c = 0; c < C; ++c) {
      const double q =
          (slot.fg_weight > 0 && c == slot.class_id) ? slot.fg_weight * quality[size_t(a)] : 0.0;
      const ScalarLoss l = cls_loss(cfg.cls_kind, pred.cls_prob(a, c), q, cfg.cls_cfg);
      out.cls += l.loss;
      out.grad_cls[size_t(a) * size_t(C) + size_t(c)] += l.grad / norm;
    }
  }
  out.cls /= norm;

  // regression over positives
  const int bins = pred.reg_max + 1;
  for (int a = 0; a < A; ++a) {
    const auto& slot = assignment.slots[size_t(a)];
    if (slot.fg_weight <= 0) continue;
    const double w = slot.fg_weight;
    const double stride = anchors[size_t(a)].stride;

    const BoxLoss bl = iou_loss(cfg.reg_kind, boxes[size_t(a)], slot.box, cfg.siou);
    out.reg += w * bl.loss;

    // chain box-corner gradients into the per-side distances:
    // x1 = cx - l*s, y1 = cy - t*s, x2 = cx + r*s, y2 = cy + b*s
    const std::array<double, 4> dside = {-stride * bl.grad[0], -stride * bl.grad[1],
                                         stride * bl.grad[2], stride * bl.grad[3]};

    // target distances in stride units, clamped into the representable range
    const std::array<double, 4> tdist = {
        (anchors[size_t(a)].cx - slot.box.x1) / stride, (anchors[size_t(a)].cy - slot.box.y1) / stride,
        (slot.box.x2 - anchors[size_t(a)].cx) / stride, (slot.box.y2 - anchors[size_t(a)].cy) / stride};

    for (int side = 0; side < 4; ++side) {
      if (pred.reg_max > 0) {
        const size_t base = (size_t(a) * 4 + size_t(side)) * size_t(bins);
        std::span<const double> z(pred.reg.data() + base, size_t(bins));
        // expectation derivative: dE/dz_k = S_k (k - E)
        double zmax = z[0];
        for (double v : z) zmax = std::max(zmax, v);
        double denom = 0;
        for (int k = 0; k < bins; ++k) denom += std::exp(z[size_t(k)] - zmax);
        const double e = dfl_expectation(z);
        for (int k = 0; k < bins; ++k) {
          const double sk = std::exp(z[size_t(k)] - zmax) / denom;
          out.grad_reg[base + size_t(k)] +=
              cfg.weights.lambda_reg * w * dside[size_t(side)] * sk * (k - e) / norm;
        }
        if (cfg.use_dfl) {
          const double y = std::min(std::max(tdist[size_t(side)], 0.0), double(pred.reg_max));
          const VecLoss dl = dfl_loss(z, y);
          out.reg += w * dl.loss / 4.0;  // averaged over the four sides
          for (int k = 0; k < bins; ++k)
            out.grad_reg[base + size_t(k)] +=
                cfg.weights.lambda_reg * w * dl.grad[size_t(k)] / (4.0 * norm);
        }
      } else {
        const size_t base = size_t(a) * 4 + size_t(side);
        const double subgrad = pred.reg[base] > 0.0 ? 1.0 : 0.0;  // d max(z,0) / dz
        out.grad_reg[base] +=
            cfg.weights.lambda_reg * w * dside[size_t(side)] * subgrad / norm;
      }
    }
  }
  out.reg /= norm;

  if (cfg.use_obj) {
    for (int a = 0; a < A; ++a) {
      const auto& slot = assignment.slots[size_t(a)];
      const double target = slot.fg_weight > 0 ? quality[size_t(a)] : 0.0;
      const ScalarLoss l = object_loss(pred.obj_logits[size_t(a)], target);
      out.obj += l.loss;
      out.grad_obj[size_t(a)] = cfg.weights.mu_obj * l.grad / norm;
    }
    out.obj /= norm;
  }

  out.total = out.cls + cfg.weights.lambda_reg * out.reg + cfg.weights.mu_obj * out.obj;
  return out;
}

KdLoss kd_loss(const Prediction& student, const Prediction& teacher, double temperature) {
  if (!(temperature > 0)) throw Error(Errc::model, "kd_loss temperature must be > 0");
  if (student.num_classes != teacher.num_classes ||
      student.cls_logits.size() != teacher.cls_logits.size())
    throw ShapeError("kd_loss: class prediction shapes differ");
  if (teacher.reg_max > 0 && student.reg_max != teacher.reg_max)
    throw Error(Errc::model,
                "kd_loss: student lacks the bin distribution channels the teacher distills");
  if (student.reg.size() != teacher.reg.size()) throw ShapeError("kd_loss: reg shapes differ");

  const double T = temperature;
  KdLoss out;
  out.grad_cls.assign(student.cls_logits.size(), 0.0);
  out.grad_reg.assign(student.reg.size(), 0.0);

  // per-class Bernoulli KL on temperature-softened probabilities
  for (size_t i = 0; i < student.cls_logits.size(); ++i) {
    const double pt = clamp_prob(sigmoid(teacher.cls_logits[i] / T));
    const double ps = clamp_prob(sigmoid(student.cls_logits[i] / T));
    out.cls_part += T * T *
                    (pt * std::log(pt / ps) + (1.0 - pt) * std::log((1.0 - pt) / (1.0 - ps)));
    out.grad_cls[i] = T * (ps - pt);
  }

  if (student.reg_max > 0) {
    const int bins = student.reg_max + 1;
    const size_t sides = student.reg.size() / size_t(bins);
    std::vector<double> ps(static_cast<size_t>(bins)), pt(static_cast<size_t>(bins));
    for (size_t s = 0; s < sides; ++s) {
      const size_t base = s * size_t(bins);
      auto softmax_t = [&](const std::vector<double>& z, std::vector<double>& p) {
        double zmax = z[base];
        for (int k = 0; k < bins; ++k) zmax = std::max(zmax, z[base + size_t(k)]);
        double denom = 0;
        for (int k = 0; k < bins; ++k) {
          p[size_t(k)] = std::exp((z[base + size_t(k)] - zmax) / T);
          denom += p[size_t(k)];
        }
        for (auto& v : p) v /= denom;
      };
      softmax_t(student.reg, ps);
      softmax_t(teacher.reg, pt);
      for (int k = 0; k < bins; ++k) {
        out.reg_part +=
            T * T * pt[size_t(k)] *
            (std::log(std::max(pt[size_t(k)], kProbClamp)) -
             std::log(std::max(ps[size_t(k)], kProbClamp)));
        out.grad_reg[base + size_t(k)] = T * (ps[size_t(k)] - pt[size_t(k)]);
      }
    }
  }
  out.loss = out.cls_part + out.reg_part;
  return out;
}

double cosine_alpha(int step, const DistillConfig& cfg) {
  if (cfg.total_steps < 1) throw Error(Errc::model, "distill schedule needs total_steps >= 1");
  if (step < 0 || step > cfg.total_steps)
    throw Error(Errc::computation, "cosine_alpha step out of [0, total_steps]");
  const double c = (1.0 + std::cos(3.141592653589793238462643383280 * step / cfg.total_steps)) / 2.0;
  return cfg.alpha_end + (cfg.alpha_start - cfg.alpha_end) * c;
}

double total_loss(double det, double kd, double alpha) {
  if (!(alpha >= 0)) throw Error(Errc::computation, "total_loss alpha must be >= 0");
  return det + alpha * kd;
}

}  // namespace repdet
