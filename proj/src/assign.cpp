#include "repdet/assign.hpp"

#include <algorithm>
#include <cmath>

namespace repdet {

std::vector<AnchorPoint> make_anchor_grid(const std::vector<GridLevel>& levels) {
  std::vector<AnchorPoint> anchors;
  for (size_t lvl = 0; lvl < levels.size(); ++lvl) {
    const auto& g = levels[lvl];
    for (int y = 0; y < g.h; ++y)
      for (int x = 0; x < g.w; ++x)
        anchors.push_back(AnchorPoint{(x + 0.5) * g.stride, (y + 0.5) * g.stride, g.stride,
                                      int(lvl)});
  }
  return anchors;
}

Box anchor_box(const AnchorPoint& a, double half_cells) {
  const double half = half_cells * a.stride;
  return Box{a.cx - half, a.cy - half, a.cx + half, a.cy + half};
}

IouMatrix pairwise_iou(const std::vector<Box>& a, const std::vector<Box>& b) {
  for (const auto& box : a)
    if (!box.valid()) throw Error(Errc::model, "pairwise_iou: degenerate box in first set");
  for (const auto& box : b)
    if (!box.valid()) throw Error(Errc::model, "pairwise_iou: degenerate box in second set");
  IouMatrix m;
  m.rows = int(a.size());
  m.cols = int(b.size());
  m.v.resize(a.size() * b.size());
  for (size_t i = 0; i < a.size(); ++i)
    for (size_t j = 0; j < b.size(); ++j) m.v[i * b.size() + j] = iou(a[i], b[j]);
  return m;
}

int Assignment::positives() const {
  int n = 0;
  for (const auto& s : slots)
    if (s.fg_weight > 0) ++n;
  return n;
}

void Assignment::check_invariants() const {
  for (const auto& s : slots) {
    const bool matched = s.matched_gt >= 0;
    if (matched != (s.fg_weight > 0))
      throw Error(Errc::computation, "assignment invariant broken: matched_gt set iff fg>0");
    if (matched && s.matched_gt >= num_gts)
      throw Error(Errc::computation, "assignment references out-of-range gt");
  }
}

namespace {

constexpr double kEps = 1e-9;

double sq_center_dist(const AnchorPoint& a, const Box& gt) {
  const double dx = a.cx - gt.cx();
  const double dy = a.cy - gt.cy();
  return dx * dx + dy * dy;
}

double bce(double p, double y) {
  p = std::min(1.0 - kEps, std::max(kEps, p));
  return -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
}

void validate_gts(const std::vector<GtBox>& gts, int num_classes) {
  for (const auto& g : gts) {
    if (!g.box.valid()) throw Error(Errc::model, "degenerate ground-truth box");
    if (g.class_id < 0 || (num_classes > 0 && g.class_id >= num_classes))
      throw Error(Errc::model, "ground-truth class out of range");
  }
}

// Fill a slot set from per-gt anchor lists; conflicts already resolved.
struct Claim {
  int gt = -1;
  double fg = 0.0;
};

Assignment finalize(const std::vector<Claim>& claims, const std::vector<GtBox>& gts,
                    size_t num_anchors) {
  Assignment out;
  out.num_gts = int(gts.size());
  out.slots.resize(num_anchors);
  for (size_t a = 0; a < num_anchors; ++a) {
    if (claims[a].gt >= 0 && claims[a].fg > 0) {
      out.slots[a].matched_gt = claims[a].gt;
      out.slots[a].fg_weight = claims[a].fg;
      out.slots[a].class_id = gts[size_t(claims[a].gt)].class_id;
      out.slots[a].box = gts[size_t(claims[a].gt)].box;
    }
  }
  out.check_invariants();
  return out;
}

// Forced single assignment for a ground truth that ended up with zero
// positives: best key = (highest iou, nearest center, lowest index) among
// still-background anchors.
void force_unmatched(std::vector<Claim>& claims, const std::vector<AnchorPoint>& anchors,
                     const std::vector<GtBox>& gts,
                     const std::vector<std::vector<double>>& iou_for_force) {
  for (size_t g = 0; g < gts.size(); ++g) {
    bool has = false;
    for (const auto& c : claims)
      if (c.gt == int(g)) {
        has = true;
        break;
      }
    if (has) continue;
    int best = -1;
    for (size_t a = 0; a < anchors.size(); ++a) {
      if (claims[a].gt >= 0) continue;
      if (best < 0) {
        best = int(a);
        continue;
      }
      const double iu = iou_for_force[g][a], ib = iou_for_force[g][size_t(best)];
      if (iu > ib) {
        best = int(a);
      } else if (iu == ib &&
                 sq_center_dist(anchors[a], gts[g].box) <
                     sq_center_dist(anchors[size_t(best)], gts[g].box)) {
        best = int(a);
      }
    }
    if (best < 0) continue;  // every anchor already claimed
    const double u = iou_for_force[g][size_t(best)];
    claims[size_t(best)] = Claim{int(g), u > 0 ? u : 1.0};
  }
}

}  // namespace

Assignment atss_assign(const std::vector<AnchorPoint>& anchors, const std::vector<GtBox>& gts,
                       const AtssConfig& cfg) {
  if (anchors.empty()) throw Error(Errc::model, "atss_assign needs at least one anchor");
  validate_gts(gts, 0);
  std::vector<Claim> claims(anchors.size());
  if (gts.empty()) return finalize(claims, gts, anchors.size());

  int num_levels = 0;
  for (const auto& a : anchors) num_levels = std::max(num_levels, a.level + 1);

  // candidate anchor-box IoUs per gt (reused by the forced fallback)
  std::vector<std::vector<double>> abox_iou(gts.size(), std::vector<double>(anchors.size()));
  for (size_t g = 0; g < gts.size(); ++g)
    for (size_t a = 0; a < anchors.size(); ++a)
      abox_iou[g][a] = iou(anchor_box(anchors[a]), gts[g].box);

  // per anchor: best claiming gt by (iou desc, gt index asc)
  std::vector<int> best_gt(anchors.size(), -1);
  std::vector<double> best_iou(anchors.size(), -1.0);

  for (size_t g = 0; g < gts.size(); ++g) {
    // top-k nearest per level by center distance
    std::vector<int> cand;
    for (int lvl = 0; lvl < num_levels; ++lvl) {
      std::vector<std::pair<double, int>> order;
      for (size_t a = 0; a < anchors.size(); ++a)
        if (anchors[a].level == lvl) order.emplace_back(sq_center_dist(anchors[a], gts[g].box), int(a));
      std::sort(order.begin(), order.end());
      const int k = std::min<int>(cfg.topk, int(order.size()));
      for (int i = 0; i < k; ++i) cand.push_back(order[size_t(i)].second);
    }
    if (cand.empty()) continue;

    double mean = 0;
    for (int a : cand) mean += abox_iou[g][size_t(a)];
    mean /= double(cand.size());
    double var = 0;
    for (int a : cand) {
      const double d = abox_iou[g][size_t(a)] - mean;
      var += d * d;
    }
    const double thr = mean + std::sqrt(var / double(cand.size()));

    for (int a : cand) {
      const double u = abox_iou[g][size_t(a)];
      if (u < thr) continue;
      if (!gts[g].box.contains(anchors[size_t(a)].cx, anchors[size_t(a)].cy)) continue;
      if (u > best_iou[size_t(a)]) {
        best_iou[size_t(a)] = u;
        best_gt[size_t(a)] = int(g);
      }
    }
  }
  for (size_t a = 0; a < anchors.size(); ++a)
    if (best_gt[a] >= 0) claims[a] = Claim{best_gt[a], 1.0};

  if (cfg.force_unmatched) force_unmatched(claims, anchors, gts, abox_iou);
  // forced slots in ATSS carry a hard weight
  for (auto& c : claims)
    if (c.gt >= 0) c.fg = 1.0;
  return finalize(claims, gts, anchors.size());
}

Assignment simota_assign(const std::vector<AnchorPoint>& anchors, const std::vector<GtBox>& gts,
                         const std::vector<double>& cls_scores, const std::vector<Box>& pred_boxes,
                         int num_classes, const SimOtaConfig& cfg) {
  if (anchors.empty()) throw Error(Errc::model, "simota_assign needs at least one anchor");
  if (pred_boxes.size() != anchors.size() ||
      cls_scores.size() != anchors.size() * size_t(num_classes))
    throw ShapeError("simota_assign: predictions not aligned with anchors");
  validate_gts(gts, num_classes);
  std::vector<Claim> claims(anchors.size());
  if (gts.empty()) return finalize(claims, gts, anchors.size());

  std::vector<std::vector<double>> pred_iou(gts.size(), std::vector<double>(anchors.size()));
  for (size_t g = 0; g < gts.size(); ++g)
    for (size_t a = 0; a < anchors.size(); ++a) pred_iou[g][a] = iou(pred_boxes[a], gts[g].box);

  // per anchor: winning (cost, iou, gt)
  std::vector<int> best_gt(anchors.size(), -1);
  std::vector<double> best_cost(anchors.size(), 0.0), best_iou(anchors.size(), 0.0);

  for (size_t g = 0; g < gts.size(); ++g) {
    const Box& gb = gts[g].box;
    std::vector<int> cand;
    for (size_t a = 0; a < anchors.size(); ++a) {
      const double r = cfg.center_radius * anchors[a].stride;
      const Box center_box{gb.cx() - r, gb.cy() - r, gb.cx() + r, gb.cy() + r};
      if (gb.contains(anchors[a].cx, anchors[a].cy) ||
          center_box.contains(anchors[a].cx, anchors[a].cy))
        cand.push_back(int(a));
    }
    if (cand.empty()) continue;

    std::vector<double> cost(cand.size());
    for (size_t i = 0; i < cand.size(); ++i) {
      const size_t a = size_t(cand[i]);
      double cls_cost = 0;
      for (int c = 0; c < num_classes; ++c)
        cls_cost += bce(cls_scores[a * size_t(num_classes) + size_t(c)],
                        c == gts[g].class_id ? 1.0 : 0.0);
      cost[i] = cfg.cost_cls_weight * cls_cost -
                cfg.cost_iou_weight * std::log(std::max(pred_iou[g][a], kEps));
    }

    // dynamic k: floor of the summed top IoUs, clamped to [1, |cand|]
    std::vector<double> ious_sorted;
    for (int a : cand) ious_sorted.push_back(pred_iou[g][size_t(a)]);
    std::sort(ious_sorted.rbegin(), ious_sorted.rend());
    double top_sum = 0;
    for (size_t i = 0; i < std::min<size_t>(size_t(cfg.dynk_candidates), ious_sorted.size()); ++i)
      top_sum += ious_sorted[i];
    const int dyn_k = std::max(1, std::min<int>(int(cand.size()), int(std::floor(top_sum))));

    std::vector<std::pair<double, int>> order;  // (cost, anchor)
    for (size_t i = 0; i < cand.size(); ++i) order.emplace_back(cost[i], cand[i]);
    std::sort(order.begin(), order.end());
    for (int i = 0; i < dyn_k; ++i) {
      const int a = order[size_t(i)].second;
      const double c = order[size_t(i)].first;
      const double u = pred_iou[g][size_t(a)];
      // lowest-cost claim keeps the anchor; ties by iou desc, then gt asc
      if (best_gt[size_t(a)] < 0 || c < best_cost[size_t(a)] ||
          (c == best_cost[size_t(a)] && u > best_iou[size_t(a)])) {
        best_gt[size_t(a)] = int(g);
        best_cost[size_t(a)] = c;
        best_iou[size_t(a)] = u;
      }
    }
  }
  for (size_t a = 0; a < anchors.size(); ++a)
    if (best_gt[a] >= 0) claims[a] = Claim{best_gt[a], 1.0};

  if (cfg.force_unmatched) force_unmatched(claims, anchors, gts, pred_iou);
  for (auto& c : claims)
    if (c.gt >= 0) c.fg = 1.0;
  return finalize(claims, gts, anchors.size());
}

double alignment_metric(double cls_score, double iou_value, const TalConfig& cfg) {
  if (!(cls_score >= 0.0 && cls_score <= 1.0 && iou_value >= 0.0 && iou_value <= 1.0))
    throw Error(Errc::model, "alignment_metric expects score and iou in [0,1]");
  return std::pow(cls_score, cfg.alpha) * std::pow(iou_value, cfg.beta);
}

Assignment tal_assign(const std::vector<AnchorPoint>& anchors, const std::vector<GtBox>& gts,
                      const std::vector<double>& cls_scores, const std::vector<Box>& pred_boxes,
                      int num_classes, const TalConfig& cfg) {
  if (anchors.empty()) throw Error(Errc::model, "tal_assign needs at least one anchor");
  if (pred_boxes.size() != anchors.size() ||
      cls_scores.size() != anchors.size() * size_t(num_classes))
    throw ShapeError("tal_assign: predictions not aligned with anchors");
  validate_gts(gts, num_classes);
  std::vector<Claim> claims(anchors.size());
  if (gts.empty()) return finalize(claims, gts, anchors.size());

  std::vector<std::vector<double>> pred_iou(gts.size(), std::vector<double>(anchors.size()));
  for (size_t g = 0; g < gts.size(); ++g)
    for (size_t a = 0; a < anchors.size(); ++a) pred_iou[g][a] = iou(pred_boxes[a], gts[g].box);

  std::vector<int> best_gt(anchors.size(), -1);
  std::vector<double> best_iou(anchors.size(), -1.0), best_t(anchors.size(), 0.0);

  std::vector<double> gt_t_max(gts.size(), 0.0), gt_u_max(gts.size(), 0.0);

  for (size_t g = 0; g < gts.size(); ++g) {
    std::vector<int> cand;
    for (size_t a = 0; a < anchors.size(); ++a)
      if (gts[g].box.contains(anchors[a].cx, anchors[a].cy)) cand.push_back(int(a));
    if (cand.empty()) continue;

    std::vector<double> t(cand.size());
    for (size_t i = 0; i < cand.size(); ++i) {
      const size_t a = size_t(cand[i]);
      const double s = cls_scores[a * size_t(num_classes) + size_t(gts[g].class_id)];
      t[i] = alignment_metric(std::min(1.0, std::max(0.0, s)), pred_iou[g][a], cfg);
      gt_t_max[g] = std::max(gt_t_max[g], t[i]);
      gt_u_max[g] = std::max(gt_u_max[g], pred_iou[g][a]);
    }

    std::vector<std::pair<double, int>> order;  // (-t, anchor): t desc, index asc
    for (size_t i = 0; i < cand.size(); ++i) order.emplace_back(-t[i], cand[i]);
    std::sort(order.begin(), order.end());
    const int k = std::min<int>(cfg.topk, int(cand.size()));
    for (int i = 0; i < k; ++i) {
      const int a = order[size_t(i)].second;
      const double u = pred_iou[g][size_t(a)];
      // conflicts resolved by larger predicted IoU, then the lower gt index
      if (u > best_iou[size_t(a)]) {
        best_iou[size_t(a)] = u;
        best_gt[size_t(a)] = int(g);
        best_t[size_t(a)] = -order[size_t(i)].first;
      }
    }
  }

  // soft weight: t scaled per gt so its max equals the gt's max candidate IoU
  for (size_t a = 0; a < anchors.size(); ++a) {
    if (best_gt[a] < 0) continue;
    const size_t g = size_t(best_gt[a]);
    const double w = gt_t_max[g] > 0 ? best_t[a] * gt_u_max[g] / gt_t_max[g] : 0.0;
    if (w > 0) claims[a] = Claim{int(g), w};
  }

  if (cfg.force_unmatched) {
    // forced weight: predicted IoU when positive, else a hard 1.0
    force_unmatched(claims, anchors, gts, pred_iou);
  }
  return finalize(claims, gts, anchors.size());
}

const char* assign_kind_name(AssignKind k) {
  switch (k) {
    case AssignKind::none: return "none";
    case AssignKind::atss: return "atss";
    case AssignKind::simota: return "simota";
    case AssignKind::tal: return "tal";
  }
  return "none";
}

AssignKind assign_kind_from_name(const std::string& name) {
  if (name == "none") return AssignKind::none;
  if (name == "atss") return AssignKind::atss;
  if (name == "simota") return AssignKind::simota;
  if (name == "tal") return AssignKind::tal;
  throw Error(Errc::usage, "unknown assigner '" + name + "'");
}

AssignKind warmup_schedule(int epoch, int warmup_epochs, AssignKind warm, AssignKind main) {
  if (warmup_epochs < 0) throw Error(Errc::usage, "warmup_epochs must be >= 0");
  if (warm == AssignKind::none) return main;
  return epoch < warmup_epochs ? warm : main;
}

}  // namespace repdet
