#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles/assign_oracle.hpp"
#include "repdet/rng.hpp"

using namespace repdet;

namespace {

struct Instance {
  std::vector<AnchorPoint> anchors;
  std::vector<GtBox> gts;
  std::vector<double> scores;
  std::vector<Box> boxes;
  int num_classes = 0;
};

Instance random_instance(SplitMix64& rng, int max_anchors = 400, int max_gts = 5) {
  Instance inst;
  inst.num_classes = 2 + rng.uniform_int(4);
  const bool two_levels = rng.uniform() < 0.5;
  int side = 4 + rng.uniform_int(12);  // up to 15x15 u 240-ish anchors for one level
  std::vector<GridLevel> levels = {GridLevel{8, side, side}};
  if (two_levels) levels.push_back(GridLevel{16, side / 2, side / 2});
  inst.anchors = make_anchor_grid(levels);
  while (int(inst.anchors.size()) > max_anchors) inst.anchors.pop_back();

  const double img = side * 8.0;
  const int num_gts = rng.uniform_int(max_gts + 1);
  for (int g = 0; g < num_gts; ++g) {
    const double w = rng.uniform(6.0, img * 0.6);
    const double h = rng.uniform(6.0, img * 0.6);
    const double x1 = rng.uniform(0.0, img - w);
    const double y1 = rng.uniform(0.0, img - h);
    inst.gts.push_back(GtBox{Box{x1, y1, x1 + w, y1 + h}, rng.uniform_int(inst.num_classes)});
  }
  inst.scores.resize(inst.anchors.size() * size_t(inst.num_classes));
  for (auto& s : inst.scores) s = rng.uniform(0.001, 0.999);
  for (const auto& a : inst.anchors) {
    const double w = rng.uniform(4.0, 48.0), h = rng.uniform(4.0, 48.0);
    const double jx = rng.uniform(-8.0, 8.0), jy = rng.uniform(-8.0, 8.0);
    inst.boxes.push_back(
        Box{a.cx + jx - w / 2, a.cy + jy - h / 2, a.cx + jx + w / 2, a.cy + jy + h / 2});
  }
  return inst;
}

void check_equal(const Assignment& a, const Assignment& b) {
  REQUIRE(a.slots.size() == b.slots.size());
  for (size_t i = 0; i < a.slots.size(); ++i) {
    CHECK(a.slots[i].matched_gt == b.slots[i].matched_gt);
    CHECK(a.slots[i].fg_weight == b.slots[i].fg_weight);  // bit-exact
    CHECK(a.slots[i].class_id == b.slots[i].class_id);
  }
}

}  // namespace

TEST_CASE("pairwise_iou point values and transpose symmetry") {
  std::vector<Box> a = {Box{0, 0, 2, 2}, Box{0, 0, 1, 1}};
  std::vector<Box> b = {Box{1, 1, 3, 3}, Box{0, 0, 2, 2}, Box{5, 5, 6, 6}};
  IouMatrix m = pairwise_iou(a, b);
  CHECK(m.at(0, 0) == doctest::Approx(1.0 / 7.0));
  CHECK(m.at(0, 1) == doctest::Approx(1.0));
  CHECK(m.at(0, 2) == 0.0);
  CHECK(m.at(1, 0) == 0.0);  // corner touch only

  IouMatrix t = pairwise_iou(b, a);
  for (int i = 0; i < m.rows; ++i)
    for (int j = 0; j < m.cols; ++j) CHECK(m.at(i, j) == t.at(j, i));

  for (int i = 0; i < m.rows * m.cols; ++i) {
    CHECK(m.v[size_t(i)] >= 0.0);
    CHECK(m.v[size_t(i)] <= 1.0);
  }
  CHECK_THROWS_AS(pairwise_iou({Box{1, 1, 1, 1}}, b), Error);
}

TEST_CASE("alignment_metric values") {
  TalConfig cfg;  // alpha 1, beta 6
  CHECK(alignment_metric(1.0, 1.0, cfg) == 1.0);
  CHECK(alignment_metric(0.7, 0.0, cfg) == 0.0);
  CHECK(alignment_metric(0.5, 0.8, cfg) == doctest::Approx(0.131072).epsilon(1e-12));
  CHECK_THROWS_AS(alignment_metric(1.5, 0.5, cfg), Error);
}

TEST_CASE("warmup_schedule switches strategies at the boundary") {
  CHECK(warmup_schedule(0, 0, AssignKind::atss) == AssignKind::tal);
  CHECK(warmup_schedule(3, 4, AssignKind::atss) == AssignKind::atss);
  CHECK(warmup_schedule(4, 4, AssignKind::atss) == AssignKind::tal);
  CHECK(warmup_schedule(3, 4, AssignKind::simota) == AssignKind::simota);
  CHECK(warmup_schedule(4, 4, AssignKind::simota) == AssignKind::tal);
  CHECK(warmup_schedule(2, 4, AssignKind::none) == AssignKind::tal);
  CHECK_THROWS_AS(warmup_schedule(0, -1, AssignKind::atss), Error);
}

TEST_CASE("atss: empty ground truth means all background") {
  auto anchors = make_anchor_grid({GridLevel{8, 4, 4}});
  Assignment out = atss_assign(anchors, {});
  CHECK(out.positives() == 0);
  out.check_invariants();
}

TEST_CASE("atss: a single covering box claims the single plausible anchor") {
  auto anchors = make_anchor_grid({GridLevel{8, 6, 6}});
  // box around the anchor at (20,20); everything else is far outside
  std::vector<GtBox> gts = {GtBox{Box{14, 14, 26, 26}, 0}};
  Assignment out = atss_assign(anchors, gts);
  out.check_invariants();
  int pos = 0;
  for (size_t a = 0; a < anchors.size(); ++a) {
    if (out.slots[a].fg_weight > 0) {
      ++pos;
      CHECK(gts[0].box.contains(anchors[a].cx, anchors[a].cy));
    }
  }
  CHECK(pos >= 1);
  for (const auto& s : out.slots)
    if (s.matched_gt >= 0) CHECK(s.class_id == 0);
}

TEST_CASE("atss matches the exhaustive oracle on a 12x12 grid with 3 boxes") {
  SplitMix64 rng(70);
  for (int trial = 0; trial < 20; ++trial) {
    auto anchors = make_anchor_grid({GridLevel{8, 12, 12}});
    std::vector<GtBox> gts;
    for (int g = 0; g < 3; ++g) {
      const double w = rng.uniform(10.0, 60.0), h = rng.uniform(10.0, 60.0);
      const double x1 = rng.uniform(0.0, 96.0 - w), y1 = rng.uniform(0.0, 96.0 - h);
      gts.push_back(GtBox{Box{x1, y1, x1 + w, y1 + h}, g % 2});
    }
    check_equal(atss_assign(anchors, gts), oracle::oracle_atss(anchors, gts, {}));
  }
}

TEST_CASE("simota: single candidate is taken with dynamic k of one") {
  auto anchors = make_anchor_grid({GridLevel{8, 3, 3}});
  std::vector<GtBox> gts = {GtBox{Box{8, 8, 16, 16}, 0}};  // contains only anchor (12,12)
  std::vector<double> scores(anchors.size() * 2, 0.5);
  std::vector<Box> boxes;
  for (const auto& a : anchors) boxes.push_back(Box{a.cx - 4, a.cy - 4, a.cx + 4, a.cy + 4});
  SimOtaConfig cfg;
  cfg.center_radius = 0.4;  // keep the prior region inside the one covering cell
  Assignment out = simota_assign(anchors, gts, scores, boxes, 2, cfg);
  out.check_invariants();
  CHECK(out.positives() == 1);
  CHECK(out.slots[4].matched_gt == 0);  // center anchor of the 3x3 grid
}

TEST_CASE("simota: perfect predictions win their ground truth") {
  auto anchors = make_anchor_grid({GridLevel{8, 4, 4}});
  std::vector<GtBox> gts = {GtBox{Box{6, 6, 18, 18}, 0}, GtBox{Box{14, 14, 30, 30}, 1}};
  const int C = 2;
  std::vector<double> scores(anchors.size() * C, 0.01);
  std::vector<Box> boxes(anchors.size(), Box{100, 100, 101, 101});
  // anchor 0 cell (4,4) inside gt0; anchor 10 cell (20,20) inside gt1
  boxes[0] = gts[0].box;
  scores[0 * C + 0] = 0.99;
  boxes[10] = gts[1].box;
  scores[10 * C + 1] = 0.99;
  Assignment out = simota_assign(anchors, gts, scores, boxes, C);
  out.check_invariants();
  CHECK(out.slots[0].matched_gt == 0);
  CHECK(out.slots[10].matched_gt == 1);
}

TEST_CASE("simota matches the exhaustive oracle on small random instances") {
  SplitMix64 rng(71);
  for (int trial = 0; trial < 40; ++trial) {
    Instance inst = random_instance(rng, 20, 3);
    while (int(inst.anchors.size()) > 20) inst.anchors.pop_back();
    inst.boxes.resize(inst.anchors.size());
    inst.scores.resize(inst.anchors.size() * size_t(inst.num_classes));
    Assignment lib = simota_assign(inst.anchors, inst.gts, inst.scores, inst.boxes,
                                   inst.num_classes);
    Assignment ora = oracle::oracle_simota(inst.anchors, inst.gts, inst.scores, inst.boxes,
                                           inst.num_classes, {});
    lib.check_invariants();
    check_equal(lib, ora);
  }
}

TEST_CASE("tal: a single inside-anchor gets its predicted IoU as weight") {
  auto anchors = make_anchor_grid({GridLevel{8, 3, 3}});
  std::vector<GtBox> gts = {GtBox{Box{9, 9, 15, 15}, 1}};  // strictly around (12,12) only
  const int C = 3;
  std::vector<double> scores(anchors.size() * C, 0.4);
  std::vector<Box> boxes;
  for (const auto& a : anchors) boxes.push_back(Box{a.cx - 4, a.cy - 4, a.cx + 4, a.cy + 4});
  Assignment out = tal_assign(anchors, gts, scores, boxes, C);
  out.check_invariants();
  CHECK(out.positives() == 1);
  CHECK(out.slots[4].matched_gt == 0);
  CHECK(out.slots[4].fg_weight == doctest::Approx(iou(boxes[4], gts[0].box)));
}

TEST_CASE("tal: disjoint ground truths select independently") {
  auto anchors = make_anchor_grid({GridLevel{8, 8, 8}});
  std::vector<GtBox> gts = {GtBox{Box{2, 2, 22, 22}, 0}, GtBox{Box{40, 40, 62, 62}, 1}};
  const int C = 2;
  SplitMix64 rng(72);
  std::vector<double> scores(anchors.size() * C);
  for (auto& s : scores) s = rng.uniform(0.05, 0.95);
  std::vector<Box> boxes;
  for (const auto& a : anchors)
    boxes.push_back(Box{a.cx - 10, a.cy - 10, a.cx + 10, a.cy + 10});
  Assignment both = tal_assign(anchors, gts, scores, boxes, C);
  Assignment only0 = tal_assign(anchors, {gts[0]}, scores, boxes, C);
  Assignment only1 = tal_assign(anchors, {gts[1]}, scores, boxes, C);
  for (size_t a = 0; a < anchors.size(); ++a) {
    if (both.slots[a].matched_gt == 0) {
      CHECK(only0.slots[a].matched_gt == 0);
      CHECK(both.slots[a].fg_weight == only0.slots[a].fg_weight);
    }
    if (both.slots[a].matched_gt == 1) {
      CHECK(only1.slots[a].matched_gt == 0);
      CHECK(both.slots[a].fg_weight == only1.slots[a].fg_weight);
    }
  }
}

TEST_CASE("tal matches the exhaustive oracle including tie-breaks") {
  SplitMix64 rng(73);
  for (int trial = 0; trial < 40; ++trial) {
    Instance inst = random_instance(rng, 225, 4);
    Assignment lib =
        tal_assign(inst.anchors, inst.gts, inst.scores, inst.boxes, inst.num_classes);
    Assignment ora = oracle::oracle_tal(inst.anchors, inst.gts, inst.scores, inst.boxes,
                                        inst.num_classes, {});
    lib.check_invariants();
    check_equal(lib, ora);
  }
}

TEST_CASE("tal: exact prediction ties resolve to the lower anchor index") {
  auto anchors = make_anchor_grid({GridLevel{8, 2, 1}});  // anchors (4,4) and (4,12)
  std::vector<GtBox> gts = {GtBox{Box{0, 0, 8, 16}, 0}};
  const int C = 1;
  std::vector<double> scores = {0.5, 0.5};
  // both anchors predict the same box: identical t, identical IoU
  std::vector<Box> boxes = {Box{0, 0, 8, 16}, Box{0, 0, 8, 16}};
  TalConfig cfg;
  cfg.topk = 1;
  Assignment out = tal_assign(anchors, gts, scores, boxes, C, cfg);
  CHECK(out.slots[0].matched_gt == 0);
  CHECK(out.slots[1].matched_gt == -1);
}

TEST_CASE("tal: anchor contested by identical ground truths goes to the lower gt index") {
  auto anchors = make_anchor_grid({GridLevel{8, 1, 1}});
  std::vector<GtBox> gts = {GtBox{Box{0, 0, 8, 8}, 0}, GtBox{Box{0, 0, 8, 8}, 1}};
  const int C = 2;
  std::vector<double> scores = {0.6, 0.6};
  std::vector<Box> boxes = {Box{0, 0, 8, 8}};
  Assignment out = tal_assign(anchors, gts, scores, boxes, C);
  CHECK(out.slots[0].matched_gt == 0);
}

TEST_CASE("tal top-k selection is invariant to uniform score scaling") {
  SplitMix64 rng(74);
  for (int trial = 0; trial < 10; ++trial) {
    Instance inst = random_instance(rng, 225, 4);
    Assignment base =
        tal_assign(inst.anchors, inst.gts, inst.scores, inst.boxes, inst.num_classes);
    const double c = rng.uniform(0.05, 1.0);
    std::vector<double> scaled = inst.scores;
    for (auto& s : scaled) s *= c;
    Assignment after =
        tal_assign(inst.anchors, inst.gts, scaled, inst.boxes, inst.num_classes);
    for (size_t a = 0; a < inst.anchors.size(); ++a)
      CHECK(base.slots[a].matched_gt == after.slots[a].matched_gt);
  }
}

TEST_CASE("assigners are deterministic across repeated calls") {
  SplitMix64 rng(75);
  Instance inst = random_instance(rng, 225, 5);
  check_equal(tal_assign(inst.anchors, inst.gts, inst.scores, inst.boxes, inst.num_classes),
              tal_assign(inst.anchors, inst.gts, inst.scores, inst.boxes, inst.num_classes));
  check_equal(
      simota_assign(inst.anchors, inst.gts, inst.scores, inst.boxes, inst.num_classes),
      simota_assign(inst.anchors, inst.gts, inst.scores, inst.boxes, inst.num_classes));
  check_equal(atss_assign(inst.anchors, inst.gts), atss_assign(inst.anchors, inst.gts));
}

TEST_CASE("positive anchors sit inside their region: gt box or center prior") {
  SplitMix64 rng(76);
  for (int trial = 0; trial < 10; ++trial) {
    Instance inst = random_instance(rng, 225, 5);
    TalConfig tal_cfg;
    tal_cfg.force_unmatched = false;
    Assignment tal =
        tal_assign(inst.anchors, inst.gts, inst.scores, inst.boxes, inst.num_classes, tal_cfg);
    for (size_t a = 0; a < inst.anchors.size(); ++a)
      if (tal.slots[a].matched_gt >= 0)
        CHECK(tal.slots[a].box.contains(inst.anchors[a].cx, inst.anchors[a].cy));

    AtssConfig atss_cfg;
    atss_cfg.force_unmatched = false;
    Assignment atss = atss_assign(inst.anchors, inst.gts, atss_cfg);
    for (size_t a = 0; a < inst.anchors.size(); ++a)
      if (atss.slots[a].matched_gt >= 0)
        CHECK(atss.slots[a].box.contains(inst.anchors[a].cx, inst.anchors[a].cy));

    SimOtaConfig so_cfg;
    so_cfg.force_unmatched = false;
    Assignment so = simota_assign(inst.anchors, inst.gts, inst.scores, inst.boxes,
                                  inst.num_classes, so_cfg);
    for (size_t a = 0; a < inst.anchors.size(); ++a)
      if (so.slots[a].matched_gt >= 0) {
        const auto& anc = inst.anchors[a];
        const Box& gb = so.slots[a].box;
        const double r = so_cfg.center_radius * anc.stride;
        const Box prior{gb.cx() - r, gb.cy() - r, gb.cx() + r, gb.cy() + r};
        CHECK((gb.contains(anc.cx, anc.cy) || prior.contains(anc.cx, anc.cy)));
      }
  }
}

TEST_CASE("forced assignment leaves no ground truth unmatched") {
  // a sliver of a box between grid points: no anchor center falls inside
  auto anchors = make_anchor_grid({GridLevel{8, 4, 4}});
  std::vector<GtBox> gts = {GtBox{Box{8.5, 8.5, 11, 11}, 0}};
  std::vector<double> scores(anchors.size(), 0.5);
  std::vector<Box> boxes;
  for (const auto& a : anchors) boxes.push_back(Box{a.cx - 4, a.cy - 4, a.cx + 4, a.cy + 4});
  Assignment out = tal_assign(anchors, gts, scores, boxes, 1);
  CHECK(out.positives() == 1);

  TalConfig off;
  off.force_unmatched = false;
  Assignment none = tal_assign(anchors, gts, scores, boxes, 1, off);
  CHECK(none.positives() == 0);
}
