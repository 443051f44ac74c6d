#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <vector>

#include "slyolo/evalkit.hpp"
#include "slyolo/model.hpp"

namespace slyolo {

/// Grid cell center in grid units of its level.
struct Anchor {
  double x = 0, y = 0;
  int stride = 0;
  int level = 0;
  std::size_t cell = 0;

  double px() const { return x * stride; }
  double py() const { return y * stride; }
};

template <typename T>
std::vector<Anchor> make_anchors(const RawPrediction<T>& raw) {
  std::vector<Anchor> out;
  for (std::size_t l = 0; l < raw.levels.size(); ++l) {
    const auto& lv = raw.levels[l];
    const int h = lv.cls.height(), w = lv.cls.width();
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        out.push_back({j + 0.5, i + 0.5, lv.stride, static_cast<int>(l), static_cast<std::size_t>(i) * w + j});
  }
  return out;
}

/// Per-anchor class probabilities (A x nc) and decoded pixel boxes (A x 4) of image `b`.
template <typename T>
void anchor_predictions(const RawPrediction<T>& raw, const std::vector<Anchor>& anchors, int b,
                        std::vector<double>& scores, std::vector<double>& boxes) {
  const int nc = raw.nc, R = raw.reg_max;
  scores.assign(anchors.size() * nc, 0.0);
  boxes.assign(anchors.size() * 4, 0.0);
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    const auto& an = anchors[a];
    const auto& lv = raw.levels[an.level];
    const std::size_t p = lv.cls.plane_size();
    const T* cls = lv.cls.plane(b, 0) + an.cell;
    for (int c = 0; c < nc; ++c) scores[a * nc + c] = 1.0 / (1.0 + std::exp(-static_cast<double>(cls[c * p])));
    const T* box = lv.box.plane(b, 0) + an.cell;
    double d[4];
    for (int s = 0; s < 4; ++s) d[s] = dfl_expectation(box + s * R * p, R, p);
    boxes[a * 4 + 0] = (an.x - d[0]) * an.stride;
    boxes[a * 4 + 1] = (an.y - d[1]) * an.stride;
    boxes[a * 4 + 2] = (an.x + d[2]) * an.stride;
    boxes[a * 4 + 3] = (an.y + d[3]) * an.stride;
  }
}

struct AssignerParams {
  int topk = 10;
  double alpha = 0.5;
  double beta = 6.0;
  double eps = 1e-9;
};

/// Per anchor: assigned ground-truth index (-1 for background) and its soft target score.
struct Assignment {
  std::vector<int> gt;
  std::vector<double> score;
  int foreground = 0;
};

/// IoU of a pixel box against a ground truth; zero for degenerate predictions.
inline double box_overlap(const double* p, const DetectionBox& g) {
  if (!(p[2] > p[0] && p[3] > p[1])) return 0.0;
  return iou(DetectionBox{0, 0, p[0], p[1], p[2], p[3]}, g);
}

/// Task-aligned assignment. Candidates have their center strictly inside the GT; each GT keeps its
/// top-k candidates by score^alpha * IoU^beta (ties to the lower anchor index); an anchor claimed by
/// several GTs goes to the one with the highest IoU (ties to the lower GT index).
inline Assignment assign_targets(const std::vector<Anchor>& anchors, const std::vector<double>& scores,
                                 const std::vector<double>& boxes, int nc, const std::vector<DetectionBox>& gts,
                                 const AssignerParams& prm = {}) {
  const std::size_t A = anchors.size();
  Assignment res;
  res.gt.assign(A, -1);
  res.score.assign(A, 0.0);
  if (gts.empty()) return res;
  struct Cand {
    std::size_t a;
    double metric, overlap;
  };
  std::vector<std::vector<Cand>> chosen(gts.size());
  for (std::size_t g = 0; g < gts.size(); ++g) {
    const auto& gt = gts[g];
    if (gt.class_id < 0 || gt.class_id >= nc) throw ConfigError("ground-truth class out of range");
    std::vector<Cand> cands;
    for (std::size_t a = 0; a < A; ++a) {
      const double ax = anchors[a].px(), ay = anchors[a].py();
      const double inside = std::min({ax - gt.x1, ay - gt.y1, gt.x2 - ax, gt.y2 - ay});
      if (!(inside > prm.eps)) continue;
      const double ov = box_overlap(&boxes[a * 4], gt);
      const double m = std::pow(scores[a * nc + gt.class_id], prm.alpha) * std::pow(ov, prm.beta);
      cands.push_back({a, m, ov});
    }
    const std::size_t k = std::min<std::size_t>(prm.topk, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + k, cands.end(), [](const Cand& x, const Cand& y) {
      return x.metric != y.metric ? x.metric > y.metric : x.a < y.a;
    });
    cands.resize(k);
    chosen[g] = std::move(cands);
  }
  std::vector<double> best_overlap(A, -1.0);
  for (std::size_t g = 0; g < gts.size(); ++g)
    for (const auto& c : chosen[g])
      if (c.overlap > best_overlap[c.a]) {
        best_overlap[c.a] = c.overlap;
        res.gt[c.a] = static_cast<int>(g);
      }
  for (std::size_t g = 0; g < gts.size(); ++g) {
    double max_metric = 0, max_overlap = 0;
    for (const auto& c : chosen[g])
      if (res.gt[c.a] == static_cast<int>(g)) {
        max_metric = std::max(max_metric, c.metric);
        max_overlap = std::max(max_overlap, c.overlap);
      }
    for (const auto& c : chosen[g])
      if (res.gt[c.a] == static_cast<int>(g)) res.score[c.a] = c.metric * max_overlap / (max_metric + prm.eps);
  }
  res.foreground = static_cast<int>(std::count_if(res.gt.begin(), res.gt.end(), [](int g) { return g >= 0; }));
  return res;
}

namespace detail {

/// Value with partial derivatives w.r.t. the four predicted box coordinates.
struct D4 {
  double v = 0;
  std::array<double, 4> g{};

  D4() = default;
  D4(double x) : v(x) {}
  static D4 var(double x, int i) {
    D4 d(x);
    d.g[i] = 1;
    return d;
  }
};

inline D4 operator+(D4 a, const D4& b) {
  a.v += b.v;
  for (int i = 0; i < 4; ++i) a.g[i] += b.g[i];
  return a;
}
inline D4 operator-(D4 a, const D4& b) {
  a.v -= b.v;
  for (int i = 0; i < 4; ++i) a.g[i] -= b.g[i];
  return a;
}
inline D4 operator*(const D4& a, const D4& b) {
  D4 r(a.v * b.v);
  for (int i = 0; i < 4; ++i) r.g[i] = a.g[i] * b.v + a.v * b.g[i];
  return r;
}
inline D4 operator/(const D4& a, const D4& b) {
  D4 r(a.v / b.v);
  for (int i = 0; i < 4; ++i) r.g[i] = (a.g[i] * b.v - a.v * b.g[i]) / (b.v * b.v);
  return r;
}
inline D4 dmin(const D4& a, const D4& b) { return a.v <= b.v ? a : b; }
inline D4 dmax(const D4& a, const D4& b) { return a.v >= b.v ? a : b; }
inline D4 relu(const D4& a) { return a.v > 0 ? a : D4(0.0); }
inline D4 datan(const D4& a) {
  D4 r(std::atan(a.v));
  for (int i = 0; i < 4; ++i) r.g[i] = a.g[i] / (1 + a.v * a.v);
  return r;
}

}  // namespace detail

/// Complete IoU of a predicted box (x1, y1, x2, y2) against a target, with gradient w.r.t. the prediction.
inline double ciou(const double* p, const double* t, double* grad = nullptr) {
  using detail::D4;
  constexpr double eps = 1e-7;
  const D4 x1 = D4::var(p[0], 0), y1 = D4::var(p[1], 1), x2 = D4::var(p[2], 2), y2 = D4::var(p[3], 3);
  const D4 w1 = x2 - x1, h1 = y2 - y1 + eps;
  const double w2 = t[2] - t[0], h2 = t[3] - t[1] + eps;
  const D4 inter = detail::relu(detail::dmin(x2, t[2]) - detail::dmax(x1, t[0])) *
                   detail::relu(detail::dmin(y2, t[3]) - detail::dmax(y1, t[1]));
  const D4 uni = w1 * h1 + D4(w2 * h2) - inter + eps;
  const D4 iou_v = inter / uni;
  const D4 cw = detail::dmax(x2, t[2]) - detail::dmin(x1, t[0]);
  const D4 ch = detail::dmax(y2, t[3]) - detail::dmin(y1, t[1]);
  const D4 c2 = cw * cw + ch * ch + eps;
  const D4 dx = D4(t[0] + t[2]) - x1 - x2, dy = D4(t[1] + t[3]) - y1 - y2;
  const D4 rho2 = (dx * dx + dy * dy) / 4.0;
  const D4 da = D4(std::atan(w2 / h2)) - detail::datan(w1 / h1);
  const D4 v = da * da * (4.0 / (std::numbers::pi * std::numbers::pi));
  const D4 alpha = v / (v - iou_v + (1 + eps));
  const D4 r = iou_v - (rho2 / c2 + v * alpha);
  if (grad)
    for (int i = 0; i < 4; ++i) grad[i] = r.g[i];
  return r.v;
}

struct LossParams {
  double box = 7.5;
  double cls = 0.5;
  double dfl = 1.5;
  bool scale_by_batch = true;  // objective = (weighted sum) * batch size
};

struct LossResult {
  double box = 0;  // weighted components
  double cls = 0;
  double dfl = 0;
  double total = 0;      // box + cls + dfl
  double objective = 0;  // value whose gradient is returned
  int foreground = 0;
};

/// Detection loss for fixed assignments; fills `grad` (same layout as `raw`) with d objective / d raw.
template <typename T>
LossResult compute_loss(const RawPrediction<T>& raw, const std::vector<Anchor>& anchors,
                        const std::vector<Assignment>& assign, const std::vector<std::vector<DetectionBox>>& gts,
                        const LossParams& lp = {}, RawPrediction<T>* grad = nullptr) {
  const int B = raw.batch(), nc = raw.nc, R = raw.reg_max;
  if (static_cast<int>(assign.size()) != B || static_cast<int>(gts.size()) != B)
    throw ConfigError("compute_loss: batch size mismatch");
  if (grad) {
    grad->nc = nc;
    grad->reg_max = R;
    grad->levels.clear();
    for (const auto& lv : raw.levels)
      grad->levels.push_back({Tensor<T>(lv.box.batch(), lv.box.channels(), lv.box.height(), lv.box.width()),
                              Tensor<T>(lv.cls.batch(), lv.cls.channels(), lv.cls.height(), lv.cls.width()),
                              lv.stride});
  }
  double tss = 0;
  for (const auto& a : assign) {
    if (a.gt.size() != anchors.size()) throw ConfigError("compute_loss: assignment/anchor mismatch");
    for (double s : a.score) tss += s;
  }
  tss = std::max(tss, 1.0);
  const double scale = lp.scale_by_batch ? B : 1.0;
  const double gc = lp.cls * scale / tss, gb = lp.box * scale / tss, gd = lp.dfl * scale / tss;
  double cls_sum = 0, box_sum = 0, dfl_sum = 0;
  LossResult res;
  std::vector<double> prob(R);
  for (int b = 0; b < B; ++b) {
    const auto& as = assign[b];
    res.foreground += as.foreground;
    for (std::size_t a = 0; a < anchors.size(); ++a) {
      const auto& an = anchors[a];
      const auto& lv = raw.levels[an.level];
      const std::size_t p = lv.cls.plane_size();
      const int g = as.gt[a];
      const int tc = g >= 0 ? gts[b][g].class_id : -1;
      const T* cls = lv.cls.plane(b, 0) + an.cell;
      T* dcls = grad ? grad->levels[an.level].cls.plane(b, 0) + an.cell : nullptr;
      for (int c = 0; c < nc; ++c) {
        const double x = cls[c * p];
        const double t = c == tc ? as.score[a] : 0.0;
        cls_sum += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
        if (dcls) dcls[c * p] = static_cast<T>((1.0 / (1.0 + std::exp(-x)) - t) * gc);
      }
      if (g < 0) continue;
      const double w = as.score[a];
      const T* box = lv.box.plane(b, 0) + an.cell;
      T* dbox = grad ? grad->levels[an.level].box.plane(b, 0) + an.cell : nullptr;
      const auto& gt = gts[b][g];
      const double st = an.stride;
      const double tb[4] = {gt.x1 / st, gt.y1 / st, gt.x2 / st, gt.y2 / st};
      const double target_d[4] = {an.x - tb[0], an.y - tb[1], tb[2] - an.x, tb[3] - an.y};
      double d[4];
      std::array<std::vector<double>, 4> probs;
      for (int s = 0; s < 4; ++s) {
        const T* lg = box + s * R * p;
        double m = -std::numeric_limits<double>::infinity();
        for (int k = 0; k < R; ++k) m = std::max(m, static_cast<double>(lg[k * p]));
        double z = 0;
        for (int k = 0; k < R; ++k) z += (prob[k] = std::exp(lg[k * p] - m));
        d[s] = 0;
        for (int k = 0; k < R; ++k) d[s] += (prob[k] /= z) * k;
        probs[s] = prob;
      }
      const double pb[4] = {an.x - d[0], an.y - d[1], an.x + d[2], an.y + d[3]};
      double gbox[4];
      box_sum += (1.0 - ciou(pb, tb, gbox)) * w;
      const double dd[4] = {gbox[0], gbox[1], -gbox[2], -gbox[3]};  // d(1 - ciou)/d distance
      for (int s = 0; s < 4; ++s) {
        const double tgt = std::clamp(target_d[s], 0.0, R - 1 - 0.01);
        const int tl = static_cast<int>(std::floor(tgt));
        const double wl = tl + 1 - tgt, wr = 1 - wl;
        const auto& ps = probs[s];
        dfl_sum += (-std::log(ps[tl]) * wl - std::log(ps[tl + 1]) * wr) / 4.0 * w;
        if (!dbox) continue;
        for (int k = 0; k < R; ++k) {
          const double onehot = (k == tl ? wl : 0.0) + (k == tl + 1 ? wr : 0.0);
          const double g_box = dd[s] * w * ps[k] * (k - d[s]);
          const double g_dfl = (ps[k] - onehot) / 4.0 * w;
          dbox[(s * R + k) * p] = static_cast<T>(g_box * gb + g_dfl * gd);
        }
      }
    }
  }
  res.cls = cls_sum / tss * lp.cls;
  res.box = box_sum / tss * lp.box;
  res.dfl = dfl_sum / tss * lp.dfl;
  for (auto [name, v] : {std::pair{"box", res.box}, {"cls", res.cls}, {"dfl", res.dfl}})
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite ") + name + " loss");
  res.total = res.box + res.cls + res.dfl;
  res.objective = res.total * scale;
  return res;
}

/// Assignment plus loss for normalized canvas targets.
template <typename T>
LossResult detection_loss(const RawPrediction<T>& raw, const std::vector<std::vector<Box>>& targets, int image_size,
                          const LossParams& lp = {}, RawPrediction<T>* grad = nullptr,
                          const AssignerParams& ap = {}) {
  const auto anchors = make_anchors(raw);
  std::vector<Assignment> assign;
  std::vector<std::vector<DetectionBox>> gts;
  std::vector<double> scores, boxes;
  for (int b = 0; b < raw.batch(); ++b) {
    std::vector<DetectionBox> g;
    for (const auto& t : targets.at(b)) g.push_back(to_detection(t, image_size));
    anchor_predictions(raw, anchors, b, scores, boxes);
    assign.push_back(assign_targets(anchors, scores, boxes, raw.nc, g, ap));
    gts.push_back(std::move(g));
  }
  return compute_loss(raw, anchors, assign, gts, lp, grad);
}

}  // namespace slyolo
