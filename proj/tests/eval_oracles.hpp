#pragma once

#include <algorithm>
#include <functional>
#include <set>

#include "slyolo/evalkit.hpp"

namespace evalcheck {

using namespace slyolo;

inline DetectionBox box(int c, double s, double x1, double y1, double x2, double y2) { return {c, s, x1, y1, x2, y2}; }

inline bool same(const DetectionBox& a, const DetectionBox& b) {
  return a.class_id == b.class_id && a.score == b.score && a.x1 == b.x1 && a.y1 == b.y1 && a.x2 == b.x2 &&
         a.y2 == b.y2;
}

// Repeatedly take the best remaining box and strike every same-class box overlapping it.
inline std::vector<DetectionBox> nms_oracle(std::vector<DetectionBox> rest, double thr) {
  std::vector<DetectionBox> keep;
  while (!rest.empty()) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < rest.size(); ++i) {
      const auto& a = rest[i];
      const auto& b = rest[best];
      if (a.score > b.score || (a.score == b.score && (a.x1 < b.x1 || (a.x1 == b.x1 && a.y1 < b.y1)))) best = i;
    }
    const DetectionBox k = rest[best];
    keep.push_back(k);
    std::vector<DetectionBox> next;
    for (std::size_t i = 0; i < rest.size(); ++i) {
      if (i == best) continue;
      const auto& r = rest[i];
      const double iw = std::min(r.x2, k.x2) - std::max(r.x1, k.x1), ih = std::min(r.y2, k.y2) - std::max(r.y1, k.y1);
      const double inter = iw > 0 && ih > 0 ? iw * ih : 0;
      const double u = (r.x2 - r.x1) * (r.y2 - r.y1) + (k.x2 - k.x1) * (k.y2 - k.y1) - inter;
      if (r.class_id == k.class_id && inter / u > thr) continue;
      next.push_back(r);
    }
    rest = std::move(next);
  }
  return keep;
}

inline double plain_iou(const DetectionBox& a, const DetectionBox& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  return inter / ((a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter);
}

// For every distinct score threshold, match the retained predictions from scratch and record the exact
// (precision, recall) point; interpolated precision at r is the best precision among points reaching r.
inline double ap_oracle(const std::vector<std::vector<DetectionBox>>& preds, const std::vector<std::vector<DetectionBox>>& gts,
                 int cls, double t) {
  std::set<double, std::greater<>> taus;
  std::size_t n_gt = 0;
  for (const auto& g : gts)
    for (const auto& b : g) n_gt += b.class_id == cls;
  for (const auto& p : preds)
    for (const auto& b : p)
      if (b.class_id == cls) taus.insert(b.score);
  std::vector<std::pair<double, double>> pts;  // (recall, precision)
  for (double tau : taus) {
    std::size_t tp = 0, n = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      std::vector<DetectionBox> mine;
      for (const auto& b : preds[i])
        if (b.class_id == cls && b.score >= tau) mine.push_back(b);
      std::sort(mine.begin(), mine.end(), [](auto& a, auto& b) { return a.score > b.score; });
      std::vector<bool> used(gts[i].size(), false);
      for (const auto& p : mine) {
        ++n;
        int best = -1;
        double bi = -1;
        for (std::size_t g = 0; g < gts[i].size(); ++g) {
          if (used[g] || gts[i][g].class_id != cls) continue;
          const double v = plain_iou(p, gts[i][g]);
          if (v >= t && v > bi) {
            bi = v;
            best = static_cast<int>(g);
          }
        }
        if (best >= 0) {
          used[best] = true;
          ++tp;
        }
      }
    }
    pts.push_back({static_cast<double>(tp) / n_gt, static_cast<double>(tp) / n});
  }
  double sum = 0;
  for (int k = 0; k <= 100; ++k) {
    double best = 0;
    for (auto [r, p] : pts)
      if (r >= k / 100.0) best = std::max(best, p);
    sum += best;
  }
  return sum / 101;
}

struct Toy {
  std::vector<std::vector<DetectionBox>> preds, gts;
  int classes = 0;
};

inline Toy random_toy(Rng& rng) {
  std::uniform_int_distribution<int> ni(1, 5), nc(1, 3), nb(0, 20);
  std::uniform_real_distribution<double> u(0, 1), pos(0, 80), sz(4, 30), jit(-4, 4);
  Toy t;
  t.classes = nc(rng);
  std::uniform_int_distribution<int> cls(0, t.classes - 1);
  const int images = ni(rng);
  t.preds.resize(images);
  t.gts.resize(images);
  std::set<double> used_scores;
  auto score = [&] {
    double s;
    do s = u(rng);
    while (!used_scores.insert(s).second || s == 0);
    return s;
  };
  int total_gt = 0;
  for (int i = 0; i < images; ++i) {
    const int g = nb(rng) / 2;
    for (int k = 0; k < g; ++k) {
      const double x = pos(rng), y = pos(rng);
      t.gts[i].push_back(box(cls(rng), 1, x, y, x + sz(rng), y + sz(rng)));
    }
    total_gt += g;
    for (const auto& gt : t.gts[i])
      if (u(rng) < 0.8) {
        auto p = gt;
        p.score = score();
        p.x1 += jit(rng);
        p.y1 += jit(rng);
        p.x2 = std::max(p.x1 + 1, p.x2 + jit(rng));
        p.y2 = std::max(p.y1 + 1, p.y2 + jit(rng));
        if (u(rng) < 0.15) p.class_id = cls(rng);
        t.preds[i].push_back(p);
      }
    const int fp = nb(rng) / 3;
    for (int k = 0; k < fp; ++k) {
      const double x = pos(rng), y = pos(rng);
      t.preds[i].push_back(box(cls(rng), score(), x, y, x + sz(rng), y + sz(rng)));
    }
  }
  if (total_gt == 0) t.gts[0].push_back(box(0, 1, 10, 10, 30, 30));
  return t;
}

}  // namespace evalcheck
