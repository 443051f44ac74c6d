#include <cmath>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "slyolo/train.hpp"

using namespace slyolo;

namespace {

RawPrediction<double> random_raw(Rng& rng, int batch, int nc, int reg_max, const std::vector<std::pair<int, int>>& grids,
                                 const std::vector<int>& strides, double scale = 2.0) {
  RawPrediction<double> r;
  r.nc = nc;
  r.reg_max = reg_max;
  for (std::size_t l = 0; l < grids.size(); ++l) {
    auto [h, w] = grids[l];
    r.levels.push_back({random_tensor<double>(batch, {4 * reg_max, h, w}, rng, -scale, scale),
                        random_tensor<double>(batch, {nc, h, w}, rng, -scale, scale), strides[l]});
  }
  return r;
}

std::vector<double> flatten(const RawPrediction<double>& r) {
  std::vector<double> v;
  for (const auto& l : r.levels) {
    v.insert(v.end(), l.box.values().begin(), l.box.values().end());
    v.insert(v.end(), l.cls.values().begin(), l.cls.values().end());
  }
  return v;
}

void unflatten(RawPrediction<double>& r, const std::vector<double>& v) {
  std::size_t k = 0;
  for (auto& l : r.levels) {
    for (auto& x : l.box.values()) x = v[k++];
    for (auto& x : l.cls.values()) x = v[k++];
  }
}

// Scores every (anchor, GT) pair into dense matrices, ranks whole rows, then resolves columns.
Assignment assign_oracle(const std::vector<Anchor>& anchors, const std::vector<double>& scores,
                         const std::vector<double>& boxes, int nc, const std::vector<DetectionBox>& gts) {
  const std::size_t A = anchors.size(), G = gts.size();
  std::vector<std::vector<double>> metric(G, std::vector<double>(A, 0)), ov(G, std::vector<double>(A, 0));
  std::vector<std::vector<bool>> inside(G, std::vector<bool>(A, false)), pos(G, std::vector<bool>(A, false));
  for (std::size_t g = 0; g < G; ++g)
    for (std::size_t a = 0; a < A; ++a) {
      const double ax = anchors[a].x * anchors[a].stride, ay = anchors[a].y * anchors[a].stride;
      inside[g][a] = ax > gts[g].x1 + 1e-9 && ax < gts[g].x2 - 1e-9 && ay > gts[g].y1 + 1e-9 && ay < gts[g].y2 - 1e-9;
      const double* p = &boxes[a * 4];
      double o = 0;
      if (p[2] > p[0] && p[3] > p[1]) {
        const double iw = std::max(0.0, std::min(p[2], gts[g].x2) - std::max(p[0], gts[g].x1));
        const double ih = std::max(0.0, std::min(p[3], gts[g].y2) - std::max(p[1], gts[g].y1));
        o = iw * ih / ((p[2] - p[0]) * (p[3] - p[1]) + gts[g].area() - iw * ih);
      }
      ov[g][a] = o;
      metric[g][a] = std::sqrt(scores[a * nc + gts[g].class_id]) * std::pow(o, 6);
    }
  for (std::size_t g = 0; g < G; ++g) {
    for (int k = 0; k < 10; ++k) {
      int best = -1;
      for (std::size_t a = 0; a < A; ++a)
        if (inside[g][a] && !pos[g][a] && (best < 0 || metric[g][a] > metric[g][best])) best = static_cast<int>(a);
      if (best < 0) break;
      pos[g][best] = true;
    }
  }
  Assignment r;
  r.gt.assign(A, -1);
  r.score.assign(A, 0);
  for (std::size_t a = 0; a < A; ++a) {
    int best = -1;
    for (std::size_t g = 0; g < G; ++g)
      if (pos[g][a] && (best < 0 || ov[g][a] > ov[best][a])) best = static_cast<int>(g);
    r.gt[a] = best;
  }
  for (std::size_t g = 0; g < G; ++g) {
    double mm = 0, mo = 0;
    for (std::size_t a = 0; a < A; ++a)
      if (r.gt[a] == static_cast<int>(g)) {
        mm = std::max(mm, metric[g][a]);
        mo = std::max(mo, ov[g][a]);
      }
    for (std::size_t a = 0; a < A; ++a)
      if (r.gt[a] == static_cast<int>(g)) r.score[a] = metric[g][a] * mo / (mm + 1e-9);
  }
  for (int g : r.gt) r.foreground += g >= 0;
  return r;
}

std::vector<DetectionBox> random_gts(Rng& rng, int n, int nc, double extent) {
  std::uniform_real_distribution<double> pos(0, extent * 0.8), sz(extent * 0.05, extent * 0.5);
  std::uniform_int_distribution<int> cls(0, nc - 1);
  std::vector<DetectionBox> g;
  for (int i = 0; i < n; ++i) {
    const double x = pos(rng), y = pos(rng);
    g.push_back({cls(rng), 1, x, y, std::min(extent, x + sz(rng)), std::min(extent, y + sz(rng))});
  }
  return g;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("slyolo_train_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(Assigner, EmptyGroundTruthIsBackground) {
  Rng rng(1);
  auto raw = random_raw(rng, 1, 3, 8, {{4, 4}}, {8});
  const auto anchors = make_anchors(raw);
  std::vector<double> s, b;
  anchor_predictions(raw, anchors, 0, s, b);
  const auto a = assign_targets(anchors, s, b, 3, {});
  EXPECT_EQ(a.foreground, 0);
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    EXPECT_EQ(a.gt[i], -1);
    EXPECT_EQ(a.score[i], 0);
  }
}

TEST(Assigner, SingleContainedCenterIsPositive) {
  Rng rng(2);
  auto raw = random_raw(rng, 1, 2, 8, {{4, 4}, {2, 2}}, {8, 16});
  const auto anchors = make_anchors(raw);
  std::vector<double> s, b;
  anchor_predictions(raw, anchors, 0, s, b);
  // Only the stride-8 cell (1, 2) has its center (20, 12) inside.
  const auto a = assign_targets(anchors, s, b, 2, {{1, 1, 17, 9, 23, 15}});
  EXPECT_EQ(a.foreground, 1);
  EXPECT_EQ(a.gt[1 * 4 + 2], 0);
}

TEST(Assigner, MatchesExhaustiveOracle) {
  Rng rng(3);
  std::uniform_int_distribution<int> ng(1, 8), levels(1, 2);
  for (int t = 0; t < 60; ++t) {
    const int L = levels(rng);
    std::vector<std::pair<int, int>> grids = {{8, 8}};
    std::vector<int> strides = {8};
    if (L == 2) {
      grids.push_back({4, 4});
      strides.push_back(16);
    }
    auto raw = random_raw(rng, 1, 3, 8, grids, strides, 3.0);
    const auto anchors = make_anchors(raw);
    std::vector<double> s, b;
    anchor_predictions(raw, anchors, 0, s, b);
    const auto gts = random_gts(rng, ng(rng), 3, 64);
    const auto got = assign_targets(anchors, s, b, 3, gts);
    const auto want = assign_oracle(anchors, s, b, 3, gts);
    ASSERT_EQ(got.gt, want.gt) << "case " << t;
    for (std::size_t a = 0; a < anchors.size(); ++a) ASSERT_NEAR(got.score[a], want.score[a], 1e-12);
    EXPECT_EQ(got.foreground, want.foreground);
    for (std::size_t a = 0; a < anchors.size(); ++a)
      if (got.gt[a] >= 0) {
        const auto& g = gts[got.gt[a]];
        EXPECT_GT(anchors[a].px(), g.x1);
        EXPECT_LT(anchors[a].px(), g.x2);
      }
  }
}

TEST(Ciou, GradientMatchesFiniteDifferences) {
  Rng rng(5);
  std::uniform_real_distribution<double> u(0, 10), s(1, 8);
  for (int t = 0; t < 100; ++t) {
    const double px = u(rng), py = u(rng), tx = u(rng), ty = u(rng);
    const std::vector<double> p = {px, py, px + s(rng), py + s(rng)};
    const double tb[4] = {tx, ty, tx + s(rng), ty + s(rng)};
    double g[4];
    ciou(p.data(), tb, g);
    auto plain = [&](const std::vector<double>& q) {
      constexpr double eps = 1e-7;
      const double w1 = q[2] - q[0], h1 = q[3] - q[1] + eps, w2 = tb[2] - tb[0], h2 = tb[3] - tb[1] + eps;
      const double iw = std::max(0.0, std::min(q[2], tb[2]) - std::max(q[0], tb[0]));
      const double ih = std::max(0.0, std::min(q[3], tb[3]) - std::max(q[1], tb[1]));
      const double io = iw * ih / (w1 * h1 + w2 * h2 - iw * ih + eps);
      const double cw = std::max(q[2], tb[2]) - std::min(q[0], tb[0]);
      const double ch = std::max(q[3], tb[3]) - std::min(q[1], tb[1]);
      const double rho2 = (std::pow(tb[0] + tb[2] - q[0] - q[2], 2) + std::pow(tb[1] + tb[3] - q[1] - q[3], 2)) / 4;
      const double v = 4 / (M_PI * M_PI) * std::pow(std::atan(w2 / h2) - std::atan(w1 / h1), 2);
      const double alpha = v / (v - io + 1 + eps);
      return io - (rho2 / (cw * cw + ch * ch + eps) + v * alpha);
    };
    EXPECT_NEAR(plain(p), ciou(p.data(), tb), 1e-12);
    const auto ng = oracle::numeric_grad(plain, p, 1e-6);
    EXPECT_LT(oracle::rel_err({g[0], g[1], g[2], g[3]}, ng), 1e-5) << "case " << t;
  }
  const double same[4] = {1, 2, 5, 7};
  EXPECT_NEAR(ciou(same, same), 1.0, 1e-7);
}

TEST(Loss, NoPositivesMeansNoBoxTerms) {
  Rng rng(6);
  auto raw = random_raw(rng, 2, 4, 16, {{4, 4}, {2, 2}}, {8, 16});
  RawPrediction<double> grad;
  const auto l = detection_loss(raw, {{}, {}}, 32, {}, &grad);
  EXPECT_EQ(l.box, 0.0);
  EXPECT_EQ(l.dfl, 0.0);
  EXPECT_GT(l.cls, 0.0);
  EXPECT_EQ(l.foreground, 0);
  for (const auto& lv : grad.levels)
    for (double v : lv.box.values()) EXPECT_EQ(v, 0.0);
}

TEST(Loss, AnalyticLowerBoundAtOptimum) {
  // One 1x2 level at stride 8; the target spans exactly one bin on every side of cell 0 and no other center.
  RawPrediction<double> raw;
  raw.nc = 3;
  raw.reg_max = 16;
  raw.levels.push_back({Tensor<double>(1, 64, 1, 2), Tensor<double>(1, 3, 1, 2), 8});
  for (int s = 0; s < 4; ++s)
    for (int k = 0; k < 16; ++k)
      for (int j = 0; j < 2; ++j) raw.levels[0].box.at(0, s * 16 + k, 0, j) = k == 1 ? 40.0 : -40.0;
  for (int c = 0; c < 3; ++c) {
    raw.levels[0].cls.at(0, c, 0, 0) = c == 2 ? 40.0 : -40.0;
    raw.levels[0].cls.at(0, c, 0, 1) = -40.0;
  }
  const std::vector<std::vector<Box>> targets = {{{2, 4.0 / 16, 4.0 / 16, 16.0 / 16, 16.0 / 16}}};
  // Lower bound: every term vanishes once the box, distributions and class probabilities are exact.
  const auto l = detection_loss(raw, targets, 16);
  EXPECT_EQ(l.foreground, 1);
  EXPECT_NEAR(l.total, 0.0, 1e-3);
  EXPECT_GE(l.box, 0.0);
  EXPECT_GE(l.cls, 0.0);
  EXPECT_GE(l.dfl, 0.0);
  // Moving any side by one bin strictly increases the loss.
  for (int k = 0; k < 16; ++k) raw.levels[0].box.at(0, k, 0, 0) = k == 2 ? 40.0 : -40.0;
  EXPECT_GT(detection_loss(raw, targets, 16).total, 0.1);
}

TEST(Loss, GradientMatchesFiniteDifferencesTwoCell) {
  Rng rng(7);
  for (int t = 0; t < 5; ++t) {
    auto raw = random_raw(rng, 1, 3, 16, {{1, 2}}, {8}, 1.5);
    const std::vector<std::vector<DetectionBox>> gts = {{{1, 1, 0.5, 0.7, 10.2, 7.1}}};
    const auto anchors = make_anchors(raw);
    std::vector<double> s, b;
    anchor_predictions(raw, anchors, 0, s, b);
    const std::vector<Assignment> as = {assign_targets(anchors, s, b, 3, gts[0])};
    ASSERT_EQ(as[0].foreground, 1);
    RawPrediction<double> grad;
    compute_loss(raw, anchors, as, gts, {}, &grad);
    auto probe = raw;
    auto f = [&](const std::vector<double>& v) {
      unflatten(probe, v);
      return compute_loss(probe, anchors, as, gts).objective;
    };
    const auto ng = oracle::numeric_grad(f, flatten(raw), 1e-6);
    EXPECT_LT(oracle::rel_err(flatten(grad), ng), 1e-4) << "case " << t;
  }
}

TEST(Loss, GradientMatchesFiniteDifferencesMultiLevel) {
  Rng rng(8);
  auto raw = random_raw(rng, 2, 3, 8, {{4, 4}, {2, 2}}, {8, 16}, 1.0);
  const auto anchors = make_anchors(raw);
  std::vector<std::vector<DetectionBox>> gts = {random_gts(rng, 3, 3, 32), random_gts(rng, 2, 3, 32)};
  std::vector<Assignment> as;
  std::vector<double> s, b;
  for (int i = 0; i < 2; ++i) {
    anchor_predictions(raw, anchors, i, s, b);
    as.push_back(assign_targets(anchors, s, b, 3, gts[i]));
  }
  ASSERT_GT(as[0].foreground + as[1].foreground, 2);
  RawPrediction<double> grad;
  compute_loss(raw, anchors, as, gts, {}, &grad);
  auto probe = raw;
  auto f = [&](const std::vector<double>& v) {
    unflatten(probe, v);
    return compute_loss(probe, anchors, as, gts).objective;
  };
  EXPECT_LT(oracle::rel_err(flatten(grad), oracle::numeric_grad(f, flatten(raw), 1e-6)), 1e-4);
}

TEST(Loss, FiniteAndNonNegativeOnRandomInputs) {
  Rng rng(9);
  for (int t = 0; t < 30; ++t) {
    auto raw = random_raw(rng, 2, 5, 16, {{8, 8}, {4, 4}, {2, 2}}, {8, 16, 32}, 6.0);
    std::vector<std::vector<Box>> targets(2);
    std::uniform_real_distribution<double> u(0.1, 0.9), w(0.02, 0.3);
    std::uniform_int_distribution<int> c(0, 4), n(0, 6);
    for (auto& tg : targets)
      for (int k = n(rng); k > 0; --k) tg.push_back({c(rng), u(rng), u(rng), w(rng), w(rng)});
    RawPrediction<double> grad;
    const auto l = detection_loss(raw, targets, 64, {}, &grad);
    for (double v : {l.box, l.cls, l.dfl, l.total}) {
      EXPECT_TRUE(std::isfinite(v));
      EXPECT_GE(v, 0.0);
    }
    for (const auto& lv : grad.levels) {
      for (double v : lv.box.values()) ASSERT_TRUE(std::isfinite(v));
      for (double v : lv.cls.values()) ASSERT_TRUE(std::isfinite(v));
    }
  }
}

TEST(Loss, NonFiniteTermIsNamed) {
  Rng rng(10);
  auto raw = random_raw(rng, 1, 2, 8, {{2, 2}}, {8});
  raw.levels[0].cls.at(0, 0, 0, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    detection_loss(raw, {{}}, 16);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("cls"), std::string::npos);
  }
}

TEST(Optimizer, NesterovStepAndDecayGroups) {
  ModelConfig mc;
  mc.width = 0.25;
  Model<double> m(mc, 0);
  SGD<double> opt(m, 0.1);
  auto params = m.parameters();
  Param<double>* weight = nullptr;
  Param<double>* bias = nullptr;
  Param<double>* bn = nullptr;
  for (auto& np : params) {
    if (!weight && np.param->decay) weight = np.param;
    if (!bias && np.name.ends_with("bn.bias")) bias = np.param;
    if (!bn && np.name.ends_with("bn.weight")) bn = np.param;
  }
  ASSERT_TRUE(weight && bias && bn);
  EXPECT_GT(opt.group_size(SGD<double>::Group::Weight), 0u);
  EXPECT_GT(opt.group_size(SGD<double>::Group::Bias), 0u);
  m.zero_grad();
  weight->grad[0] = 2.0;
  bias->grad[0] = 3.0;
  bn->grad[0] = 4.0;
  const double w0 = weight->value[0], b0 = bias->value[0], n0 = bn->value[0], w1 = weight->value[1];
  opt.set_lr(0.01, 0.1);
  opt.set_momentum(0.9);
  opt.step();
  const double gw = 2.0 + 0.1 * w0;
  EXPECT_NEAR(weight->value[0], w0 - 0.01 * (gw + 0.9 * gw), 1e-15);
  EXPECT_NEAR(weight->value[1], w1 - 0.01 * (0.1 * w1) * 1.9, 1e-15);
  EXPECT_NEAR(bias->value[0], b0 - 0.1 * 3.0 * 1.9, 1e-15);
  EXPECT_NEAR(bn->value[0], n0 - 0.01 * 4.0 * 1.9, 1e-15);
  const double before = bias->value[0];
  opt.step();
  const double buf = 0.9 * 3.0 + 3.0;
  EXPECT_NEAR(bias->value[0], before - 0.1 * (3.0 + 0.9 * buf), 1e-15);
}

TEST(Optimizer, ClipAndCosine) {
  ModelConfig mc;
  mc.width = 0.25;
  Model<double> m(mc, 0);
  SGD<double> opt(m, 0);
  m.zero_grad();
  for (auto& np : m.parameters()) std::fill(np.param->grad.begin(), np.param->grad.end(), 1.0);
  const double n = opt.clip(10.0);
  EXPECT_NEAR(n, std::sqrt(double(m.parameter_count())), 1e-9);
  EXPECT_NEAR(opt.grad_norm(), 10.0, 1e-4);
  EXPECT_DOUBLE_EQ(cosine_factor(0, 100, 0.01), 1.0);
  EXPECT_NEAR(cosine_factor(100, 100, 0.01), 0.01, 1e-15);
  EXPECT_NEAR(cosine_factor(50, 100, 0.01), 0.505, 1e-12);
}

class LoopTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new fs::path(temp_dir("desk"));
    generate_synthetic_dataset(*root_, SyntheticOptions{});
  }
  static void TearDownTestSuite() {
    fs::remove_all(*root_);
    delete root_;
  }
  static RunConfig small() {
    RunConfig rc;
    rc.train.image_size = 64;
    rc.train.batch_size = 4;
    rc.train.epochs = 50;
    rc.train.eval_interval = 0;
    return rc;
  }
  static fs::path* root_;
};
fs::path* LoopTest::root_ = nullptr;

TEST_F(LoopTest, SchedulerWarmup) {
  Dataset ds(*root_, "train");
  RunConfig rc = small();
  Model<float> m(rc.model, 1);
  Trainer<float> tr(m, rc, ds);
  ASSERT_EQ(tr.batches_per_epoch(), 4u);
  tr.schedule(0, 0);
  EXPECT_DOUBLE_EQ(tr.optimizer().lr(), 0.0);
  EXPECT_DOUBLE_EQ(tr.optimizer().bias_lr(), 0.1);
  EXPECT_DOUBLE_EQ(tr.optimizer().momentum(), 0.8);
  tr.schedule(6, 1);
  const double lr1 = 0.01 * cosine_factor(1, 50, 0.01);
  EXPECT_NEAR(tr.optimizer().lr(), lr1 * 0.5, 1e-15);
  EXPECT_NEAR(tr.optimizer().bias_lr(), 0.1 + (lr1 - 0.1) * 0.5, 1e-15);
  tr.schedule(12, 3);
  EXPECT_NEAR(tr.optimizer().lr(), 0.01 * cosine_factor(3, 50, 0.01), 1e-15);
  EXPECT_DOUBLE_EQ(tr.optimizer().momentum(), 0.937);
}

TEST_F(LoopTest, SameSeedSameFirstLossAndDescent) {
  Dataset ds(*root_, "train");
  RunConfig rc = small();
  std::vector<double> first;
  for (int run = 0; run < 2; ++run) {
    Model<float> m(rc.model, 1);
    Trainer<float> tr(m, rc, ds);
    BatchIterator<float> it(ds, 4, 64, rc.train.seed, true, true, rc.train.flip, rc.train.scale_jitter);
    const auto batches = it.epoch(0);
    first.push_back(tr.step(batches[0], 0).total);
  }
  EXPECT_EQ(first[0], first[1]);

  Model<float> m(rc.model, 1);
  Trainer<float> tr(m, rc, ds);
  BatchIterator<float> plain(ds, 16, 64, 0, false, false);
  const auto all = plain.epoch(0)[0];
  auto probe = [&] {
    const auto raw = m.forward(all.images, Context{true, false});
    return detection_loss(raw, all.boxes, 64).total;
  };
  const double start = probe();
  BatchIterator<float> it(ds, 4, 64, rc.train.seed, true, true, rc.train.flip, rc.train.scale_jitter);
  for (int e = 0; e < 8; ++e)
    for (const auto& b : it.epoch(e)) tr.step(b, e);
  EXPECT_LT(probe(), start);
}

TEST_F(LoopTest, TenStepsBitReproducibleInDouble) {
  Dataset ds(*root_, "train");
  RunConfig rc = small();
  std::vector<std::vector<double>> finals;
  std::vector<std::vector<double>> losses(2);
  for (int run = 0; run < 2; ++run) {
    Model<double> m(rc.model, 3);
    Trainer<double> tr(m, rc, ds);
    BatchIterator<double> it(ds, 4, 64, rc.train.seed, true, true, rc.train.flip, rc.train.scale_jitter);
    int steps = 0;
    for (int e = 0; steps < 10; ++e)
      for (const auto& b : it.epoch(e))
        if (steps++ < 10) losses[run].push_back(tr.step(b, e).objective);
    std::vector<double> v;
    for (auto& np : m.parameters(true)) v.insert(v.end(), np.param->value.begin(), np.param->value.end());
    finals.push_back(std::move(v));
  }
  EXPECT_EQ(losses[0], losses[1]);
  ASSERT_EQ(finals[0].size(), finals[1].size());
  EXPECT_TRUE(finals[0] == finals[1]);
}

TEST_F(LoopTest, LogAndCheckpoints) {
  Dataset ds(*root_, "train");
  RunConfig rc = small();
  rc.train.epochs = 2;
  rc.train.eval_interval = 1;
  Model<float> m(rc.model, 1);
  Trainer<float> tr(m, rc, ds);
  const auto out = temp_dir("run");
  TrainOptions o;
  o.out_dir = out;
  const auto res = tr.run(o);
  ASSERT_EQ(res.epochs.size(), 2u);
  std::ifstream log(out / "log.csv");
  std::string header, row;
  std::getline(log, header);
  EXPECT_EQ(header, "epoch,loss_total,loss_box,loss_cls,loss_dfl,map50,map50_95");
  int rows = 0;
  while (std::getline(log, row)) ++rows;
  EXPECT_EQ(rows, 2);
  EXPECT_TRUE(fs::exists(out / "best.ckpt"));
  EXPECT_TRUE(fs::exists(out / "last.ckpt"));
  auto back = load_checkpoint<float>((out / "last.ckpt").string());
  EXPECT_EQ(back.parameter_count(), m.parameter_count());
  fs::remove_all(out);
}

TEST_F(LoopTest, DivergenceReportsStep) {
  Dataset ds(*root_, "train");
  RunConfig rc = small();
  Model<float> m(rc.model, 1);
  Trainer<float> tr(m, rc, ds);
  BatchIterator<float> it(ds, 4, 64, 1, false);
  const auto batches = it.epoch(0);
  tr.step(batches[0], 0);
  m.head().visit("head", [](const std::string& name, Param<float>& p) {
    if (name.find("cv3") != std::string::npos) std::fill(p.value.begin(), p.value.end(), NAN);
  });
  try {
    tr.step(batches[1], 0);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos) << e.what();
  }
}

TEST_F(LoopTest, FusedModelRejected) {
  Dataset ds(*root_, "train");
  RunConfig rc = small();
  Model<float> m(rc.model, 1);
  m.fuse();
  EXPECT_THROW(Trainer<float>(m, rc, ds), StateError);
}
