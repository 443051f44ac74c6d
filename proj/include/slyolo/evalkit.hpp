#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "slyolo/data.hpp"
#include "slyolo/model.hpp"

namespace slyolo {

struct DetectionBox {
  int class_id = 0;
  double score = 0;
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double area() const { return (x2 - x1) * (y2 - y1); }
};

inline double iou(const DetectionBox& a, const DetectionBox& b) {
  if (!(a.x2 > a.x1 && a.y2 > a.y1) || !(b.x2 > b.x1 && b.y2 > b.y1)) throw DomainError("iou: degenerate box");
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

/// Score descending, then smaller x1, then smaller y1.
inline bool detection_order(const DetectionBox& a, const DetectionBox& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.x1 != b.x1) return a.x1 < b.x1;
  return a.y1 < b.y1;
}

/// Expected bin index of a softmax distribution over `n` logits spaced `stride` apart in memory.
template <typename T>
double dfl_expectation(const T* logits, int n, std::size_t stride) {
  double m = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < n; ++k) m = std::max(m, static_cast<double>(logits[k * stride]));
  double z = 0, e = 0;
  for (int k = 0; k < n; ++k) {
    const double p = std::exp(logits[k * stride] - m);
    z += p;
    e += p * k;
  }
  return e / z;
}

/// Canvas-space candidates of image `b`: best class per cell, sigmoid score >= conf.
template <typename T>
std::vector<DetectionBox> decode(const RawPrediction<T>& raw, double conf, int b = 0, int expected_reg_max = 0) {
  const int reg_max = expected_reg_max > 0 ? expected_reg_max : raw.reg_max;
  std::vector<DetectionBox> out;
  for (const auto& lv : raw.levels) {
    if (lv.box.channels() != 4 * reg_max)
      throw DecodeError("box channels " + std::to_string(lv.box.channels()) + " do not match reg_max " +
                        std::to_string(reg_max));
    if (b >= lv.cls.batch()) throw DecodeError("batch index out of range");
    const int h = lv.cls.height(), w = lv.cls.width(), nc = lv.cls.channels();
    const std::size_t p = lv.cls.plane_size();
    const T* cls = lv.cls.plane(b, 0);
    const T* box = lv.box.plane(b, 0);
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const std::size_t cell = static_cast<std::size_t>(i) * w + j;
        int best = 0;
        double logit = cls[cell];
        for (int c = 1; c < nc; ++c)
          if (cls[c * p + cell] > logit) {
            logit = cls[c * p + cell];
            best = c;
          }
        const double score = 1.0 / (1.0 + std::exp(-logit));
        if (!(score > 0) || score < conf) continue;
        double d[4];
        for (int s = 0; s < 4; ++s) d[s] = dfl_expectation(box + (s * reg_max) * p + cell, reg_max, p);
        const double ax = j + 0.5, ay = i + 0.5, st = lv.stride;
        DetectionBox db{best, score, (ax - d[0]) * st, (ay - d[1]) * st, (ax + d[2]) * st, (ay + d[3]) * st};
        if (db.x2 > db.x1 && db.y2 > db.y1) out.push_back(db);
      }
  }
  return out;
}

/// Class-wise greedy suppression of boxes with IoU > iou_threshold; survivors in detection order.
inline std::vector<DetectionBox> nms(std::vector<DetectionBox> boxes, double iou_threshold, int max_det = 300) {
  std::stable_sort(boxes.begin(), boxes.end(), detection_order);
  std::vector<DetectionBox> keep;
  std::map<int, std::vector<std::size_t>> kept_by_class;
  for (const auto& b : boxes) {
    auto& kept = kept_by_class[b.class_id];
    bool suppressed = false;
    for (std::size_t k : kept)
      if (iou(keep[k], b) > iou_threshold) {
        suppressed = true;
        break;
      }
    if (suppressed) continue;
    kept.push_back(keep.size());
    keep.push_back(b);
    if (static_cast<int>(keep.size()) >= max_det) break;
  }
  return keep;
}

/// Maps canvas boxes back to the original image through letterbox metadata, clipped to its bounds.
inline std::vector<DetectionBox> to_original(const std::vector<DetectionBox>& boxes, const LetterboxMeta& m) {
  std::vector<DetectionBox> out;
  for (auto b : boxes) {
    auto p = m.to_original(b.x1, b.y1), q = m.to_original(b.x2, b.y2);
    b.x1 = std::clamp(p.x, 0.0, double(m.orig_width));
    b.y1 = std::clamp(p.y, 0.0, double(m.orig_height));
    b.x2 = std::clamp(q.x, 0.0, double(m.orig_width));
    b.y2 = std::clamp(q.y, 0.0, double(m.orig_height));
    if (b.x2 > b.x1 && b.y2 > b.y1) out.push_back(b);
  }
  return out;
}

inline DetectionBox to_detection(const AnnotationRecord& r) {
  return {r.class_id(), 1.0, double(r.bbox_left), double(r.bbox_top), double(r.bbox_left + r.bbox_width),
          double(r.bbox_top + r.bbox_height)};
}

inline DetectionBox to_detection(const Box& b, int canvas) {
  return {b.cls, 1.0, (b.xc - b.w / 2) * canvas, (b.yc - b.h / 2) * canvas, (b.xc + b.w / 2) * canvas,
          (b.yc + b.h / 2) * canvas};
}

struct EvalResult {
  double map50 = 0;
  double map50_95 = 0;
  std::map<int, std::vector<double>> per_class_ap;  // class -> AP at IoU 0.50, 0.55, ..., 0.95
  std::size_t images = 0, ground_truth = 0, predictions = 0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["map50"] = map50;
    j["map50_95"] = map50_95;
    j["per_class_ap"] = nlohmann::json::object();
    for (const auto& [c, v] : per_class_ap) j["per_class_ap"][std::to_string(c)] = v;
    j["counts"] = {{"images", images}, {"ground_truth", ground_truth}, {"predictions", predictions}};
    return j;
  }
};

inline std::vector<double> iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

/// COCO 101-point interpolated AP from a ranked list of TP flags.
inline double average_precision(const std::vector<bool>& tp_ranked, std::size_t n_gt) {
  const std::size_t n = tp_ranked.size();
  std::vector<double> rec(n), prec(n);
  double tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tp += tp_ranked[i];
    rec[i] = tp / n_gt;
    prec[i] = tp / (i + 1);
  }
  for (std::size_t i = n; i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
  double sum = 0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    auto it = std::lower_bound(rec.begin(), rec.end(), r);
    if (it != rec.end()) sum += prec[it - rec.begin()];
  }
  return sum / 101.0;
}

inline EvalResult compute_map(const std::vector<std::vector<DetectionBox>>& preds,
                              const std::vector<std::vector<DetectionBox>>& gts) {
  if (preds.size() != gts.size()) throw ConfigError("compute_map: prediction/ground-truth image count mismatch");
  EvalResult res;
  res.images = gts.size();
  std::map<int, std::size_t> gt_count;
  for (const auto& g : gts)
    for (const auto& b : g) ++gt_count[b.class_id];
  for (const auto& p : preds) res.predictions += p.size();
  for (const auto& [c, n] : gt_count) res.ground_truth += n;
  if (gt_count.empty()) throw DomainError("compute_map: no ground truth in any class, metric undefined");

  struct Ranked {
    const DetectionBox* box;
    std::size_t image;
  };
  const auto thresholds = iou_thresholds();
  double sum50 = 0, sum_all = 0;
  for (const auto& [c, n_gt] : gt_count) {
    std::vector<Ranked> ranked;
    for (std::size_t i = 0; i < preds.size(); ++i)
      for (const auto& p : preds[i])
        if (p.class_id == c) ranked.push_back({&p, i});
    std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
      if (a.box->score != b.box->score) return a.box->score > b.box->score;
      if (a.image != b.image) return a.image < b.image;
      if (a.box->x1 != b.box->x1) return a.box->x1 < b.box->x1;
      if (a.box->y1 != b.box->y1) return a.box->y1 < b.box->y1;
      if (a.box->x2 != b.box->x2) return a.box->x2 < b.box->x2;
      return a.box->y2 < b.box->y2;
    });
    std::vector<std::vector<const DetectionBox*>> class_gt(gts.size());
    for (std::size_t i = 0; i < gts.size(); ++i)
      for (const auto& g : gts[i])
        if (g.class_id == c) class_gt[i].push_back(&g);
    std::vector<double> aps;
    for (double t : thresholds) {
      std::vector<std::vector<bool>> used(gts.size());
      for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(class_gt[i].size(), false);
      std::vector<bool> tp;
      tp.reserve(ranked.size());
      for (const auto& r : ranked) {
        int best = -1;
        double best_iou = t;
        for (std::size_t g = 0; g < class_gt[r.image].size(); ++g) {
          if (used[r.image][g]) continue;
          const double v = iou(*r.box, *class_gt[r.image][g]);
          if (v >= best_iou && (best < 0 || v > best_iou)) {
            best = static_cast<int>(g);
            best_iou = v;
          }
        }
        if (best >= 0) used[r.image][best] = true;
        tp.push_back(best >= 0);
      }
      aps.push_back(average_precision(tp, n_gt));
    }
    sum50 += aps[0];
    sum_all += std::accumulate(aps.begin(), aps.end(), 0.0) / aps.size();
    res.per_class_ap[c] = std::move(aps);
  }
  res.map50 = sum50 / gt_count.size();
  res.map50_95 = sum_all / gt_count.size();
  return res;
}

struct BenchResult {
  double mean_ms = 0;
  double std_ms = 0;
  double median_ms = 0;
  double fps = 0;
  std::vector<double> timings_ms;
};

/// Times `fn` n_runs times after n_warmup discarded calls.
template <typename F>
BenchResult benchmark_fps(F&& fn, int n_warmup, int n_runs) {
  if (n_runs < 1) throw DomainError("benchmark_fps: n_runs must be >= 1");
  if (n_warmup < 0) throw DomainError("benchmark_fps: n_warmup must be >= 0");
  for (int i = 0; i < n_warmup; ++i) fn();
  BenchResult r;
  for (int i = 0; i < n_runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    r.timings_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  r.mean_ms = std::accumulate(r.timings_ms.begin(), r.timings_ms.end(), 0.0) / n_runs;
  double var = 0;
  for (double t : r.timings_ms) var += (t - r.mean_ms) * (t - r.mean_ms);
  r.std_ms = n_runs > 1 ? std::sqrt(var / (n_runs - 1)) : 0.0;
  auto sorted = r.timings_ms;
  std::sort(sorted.begin(), sorted.end());
  r.median_ms = n_runs % 2 ? sorted[n_runs / 2] : 0.5 * (sorted[n_runs / 2 - 1] + sorted[n_runs / 2]);
  r.fps = 1000.0 / r.mean_ms;
  return r;
}

/// Bench of a model forward at batch 1 (no preprocessing, no NMS).
template <typename T>
BenchResult benchmark_model(Model<T>& model, int image_size, int n_warmup, int n_runs, std::uint64_t seed = 0) {
  Rng rng(seed);
  const auto x = random_tensor<T>(1, {3, image_size, image_size}, rng, 0.0, 1.0);
  return benchmark_fps([&] { model.forward(x); }, n_warmup, n_runs);
}

inline void write_predictions(const fs::path& path, const std::vector<DetectionBox>& boxes) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << std::setprecision(9);
  for (const auto& b : boxes)
    os << b.class_id << ' ' << b.score << ' ' << b.x1 << ' ' << b.y1 << ' ' << b.x2 << ' ' << b.y2 << '\n';
}

inline std::vector<DetectionBox> read_predictions(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path.string());
  std::vector<DetectionBox> out;
  std::string line;
  long n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    std::istringstream ls(line);
    DetectionBox b;
    if (!(ls >> b.class_id >> b.score >> b.x1 >> b.y1 >> b.x2 >> b.y2))
      throw ParseError(path.string() + ": expected 'class_id score x1 y1 x2 y2'", n);
    out.push_back(b);
  }
  return out;
}

/// Full-image inference: letterbox, forward, decode, NMS, map back to original pixels.
template <typename T>
std::vector<DetectionBox> detect(Model<T>& model, const cv::Mat& bgr, int image_size, double conf, double iou_thr,
                                 int max_det, LetterboxMeta* meta_out = nullptr) {
  LetterboxMeta meta;
  const cv::Mat canvas = letterbox_image(bgr, image_size, meta);
  Tensor<T> x(1, 3, image_size, image_size);
  image_to_tensor(canvas, x, 0);
  const auto raw = model.forward(x);
  auto boxes = nms(decode(raw, conf), iou_thr, max_det);
  if (meta_out) *meta_out = meta;
  return to_original(boxes, meta);
}

/// mAP of a model over a dataset split at evaluation resolution (no augmentation).
template <typename T>
EvalResult evaluate_dataset(Model<T>& model, Dataset& ds, int image_size, double conf, double iou_thr, int max_det,
                            std::vector<std::vector<DetectionBox>>* preds_out = nullptr) {
  std::vector<std::vector<DetectionBox>> preds, gts;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    preds.push_back(detect(model, ds.image(i), image_size, conf, iou_thr, max_det));
    std::vector<DetectionBox> g;
    for (const auto& r : ds.annotations(i)) g.push_back(to_detection(r));
    gts.push_back(std::move(g));
  }
  if (preds_out) *preds_out = preds;
  return compute_map(preds, gts);
}

}  // namespace slyolo
