#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "slyolo/tensor.hpp"

namespace slyolo {

namespace fs = std::filesystem;

inline constexpr int kVisDroneClasses = 10;
inline constexpr int kPadValue = 114;

struct AnnotationRecord {
  int bbox_left = 0;
  int bbox_top = 0;
  int bbox_width = 0;
  int bbox_height = 0;
  int score = 0;
  int category = 0;
  int truncation = 0;
  int occlusion = 0;

  int class_id() const { return category - 1; }
  friend bool operator==(const AnnotationRecord&, const AnnotationRecord&) = default;
};

/// Parses one devkit line. Returns nullopt for records the dataset drops (ignored regions, "others",
/// degenerate boxes); throws ParseError for malformed lines.
inline std::optional<AnnotationRecord> parse_visdrone_line(const std::string& line, long line_no = 1) {
  std::vector<int> f;
  std::size_t pos = 0;
  std::string s = line;
  while (!s.empty() && (s.back() == '\r' || s.back() == '\n' || s.back() == ' ')) s.pop_back();
  while (pos <= s.size()) {
    std::size_t end = s.find(',', pos);
    if (end == std::string::npos) end = s.size();
    std::string tok = s.substr(pos, end - pos);
    tok.erase(0, tok.find_first_not_of(" \t"));
    tok.erase(tok.find_last_not_of(" \t") + 1);
    if (!tok.empty()) {
      int v = 0;
      auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
      if (ec != std::errc() || p != tok.data() + tok.size()) throw ParseError("non-integer field '" + tok + "'", line_no);
      f.push_back(v);
    } else if (end != s.size()) {
      throw ParseError("empty field", line_no);
    }
    pos = end + 1;
  }
  if (f.size() < 8) throw ParseError("expected 8 fields, got " + std::to_string(f.size()), line_no);
  AnnotationRecord r{f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7]};
  if (r.category < 0 || r.category > 11) throw ParseError("category out of range", line_no);
  if (r.category == 0 || r.category == 11) return std::nullopt;
  if (r.bbox_width <= 0 || r.bbox_height <= 0) return std::nullopt;
  return r;
}

inline std::string format_visdrone_line(const AnnotationRecord& r) {
  std::ostringstream os;
  os << r.bbox_left << ',' << r.bbox_top << ',' << r.bbox_width << ',' << r.bbox_height << ',' << r.score << ','
     << r.category << ',' << r.truncation << ',' << r.occlusion;
  return os.str();
}

inline std::vector<AnnotationRecord> read_annotations(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<AnnotationRecord> out;
  std::string line;
  long n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    try {
      if (auto r = parse_visdrone_line(line, n)) out.push_back(*r);
    } catch (const ParseError& e) {
      throw ParseError(path.string() + ": " + e.what(), e.line());
    }
  }
  return out;
}

/// Normalized (class, x_center, y_center, width, height) box.
struct Box {
  int cls = 0;
  double xc = 0, yc = 0, w = 0, h = 0;
};

/// Pixel-space mapping from the original image into the model canvas.
struct LetterboxMeta {
  std::string source;
  int orig_width = 0;
  int orig_height = 0;
  int target = 0;
  double scale_x = 1, scale_y = 1;
  double pad_x = 0, pad_y = 0;

  cv::Point2d to_canvas(double x, double y) const { return {x * scale_x + pad_x, y * scale_y + pad_y}; }
  cv::Point2d to_original(double x, double y) const { return {(x - pad_x) / scale_x, (y - pad_y) / scale_y}; }
};

/// Resizes by `scale` (relative to fit-longest-side) and centers on a target x target gray canvas,
/// cropping when the resized image is larger than the canvas.
inline cv::Mat letterbox_image(const cv::Mat& img, int target, LetterboxMeta& meta, double scale = 1.0) {
  if (img.empty() || img.cols < 1 || img.rows < 1) throw InputError("letterbox: empty image");
  if (target < 32 || target % 32 != 0) throw ConfigError("letterbox target must be a multiple of 32");
  const double s = static_cast<double>(target) / std::max(img.cols, img.rows) * scale;
  const int nw = std::max(1, static_cast<int>(std::lround(img.cols * s)));
  const int nh = std::max(1, static_cast<int>(std::lround(img.rows * s)));
  cv::Mat resized;
  if (nw == img.cols && nh == img.rows)
    resized = img;
  else
    cv::resize(img, resized, {nw, nh}, 0, 0, nw < img.cols ? cv::INTER_AREA : cv::INTER_LINEAR);
  const int ox = (target - nw) / 2, oy = (target - nh) / 2;  // floor for positive, toward zero when cropping
  cv::Mat canvas(target, target, img.type(), cv::Scalar::all(kPadValue));
  const cv::Rect dst = cv::Rect(ox, oy, nw, nh) & cv::Rect(0, 0, target, target);
  resized(cv::Rect(dst.x - ox, dst.y - oy, dst.width, dst.height)).copyTo(canvas(dst));
  meta.orig_width = img.cols;
  meta.orig_height = img.rows;
  meta.target = target;
  meta.scale_x = static_cast<double>(nw) / img.cols;
  meta.scale_y = static_cast<double>(nh) / img.rows;
  meta.pad_x = ox;
  meta.pad_y = oy;
  return canvas;
}

/// Maps pixel annotations into normalized canvas boxes, clipping to the canvas and dropping slivers.
inline std::vector<Box> boxes_to_canvas(const std::vector<AnnotationRecord>& recs, const LetterboxMeta& m,
                                        bool flip = false) {
  std::vector<Box> out;
  const double t = m.target;
  for (const auto& r : recs) {
    auto a = m.to_canvas(r.bbox_left, r.bbox_top);
    auto b = m.to_canvas(r.bbox_left + r.bbox_width, r.bbox_top + r.bbox_height);
    const double full = (b.x - a.x) * (b.y - a.y);
    const double x1 = std::clamp(a.x, 0.0, t), y1 = std::clamp(a.y, 0.0, t);
    const double x2 = std::clamp(b.x, 0.0, t), y2 = std::clamp(b.y, 0.0, t);
    if (x2 - x1 < 1.0 || y2 - y1 < 1.0 || (x2 - x1) * (y2 - y1) < 0.4 * full) continue;
    Box bx{r.class_id(), (x1 + x2) / 2 / t, (y1 + y2) / 2 / t, (x2 - x1) / t, (y2 - y1) / t};
    if (flip) bx.xc = 1.0 - bx.xc;
    out.push_back(bx);
  }
  return out;
}

/// BGR 8-bit image -> 3 x H x W RGB tensor in [0, 1], written into batch slot `b`.
template <typename T>
void image_to_tensor(const cv::Mat& bgr, Tensor<T>& dst, int b) {
  if (bgr.type() != CV_8UC3) throw InputError("expected an 8-bit 3-channel image");
  if (bgr.rows != dst.height() || bgr.cols != dst.width()) throw ShapeError("image/tensor size mismatch");
  for (int y = 0; y < bgr.rows; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < bgr.cols; ++x)
      for (int c = 0; c < 3; ++c) dst.at(b, c, y, x) = static_cast<T>(row[x][2 - c] / 255.0);
  }
}

struct SyntheticOptions {
  std::uint64_t seed = 7;
  int n_images = 16;
  int image_size = 128;
  int classes = kVisDroneClasses;
  int min_targets = 5;
  int max_targets = 30;
  int min_size = 4;
  int max_size = 24;
};

namespace detail {

inline cv::Scalar class_color(int c) {
  static const cv::Scalar colors[] = {{40, 40, 230},  {40, 200, 40},   {230, 60, 30},  {30, 220, 230},
                                      {220, 40, 220}, {230, 220, 40},  {250, 250, 250}, {20, 20, 20},
                                      {0, 140, 255},  {160, 80, 120}};
  return colors[c % 10];
}

// Shapes: 0 filled rect, 1 filled ellipse, 2 triangle, 3 cross, 4 ring, 5 diamond, 6 hollow rect,
// 7 filled rect with inner dot, 8 horizontal bar pair, 9 X.
inline void draw_target(cv::Mat& img, int cls, const cv::Rect& r) {
  const cv::Scalar col = class_color(cls);
  const cv::Point c(r.x + r.width / 2, r.y + r.height / 2);
  const int t = std::max(1, std::min(r.width, r.height) / 4);
  const cv::Point tl(r.x, r.y), br(r.x + r.width - 1, r.y + r.height - 1);
  switch (cls % 10) {
    case 0: cv::rectangle(img, tl, br, col, cv::FILLED); break;
    case 1: cv::ellipse(img, c, {std::max(1, r.width / 2), std::max(1, r.height / 2)}, 0, 0, 360, col, cv::FILLED); break;
    case 2: {
      std::vector<cv::Point> pts = {{c.x, r.y}, {r.x, br.y}, {br.x, br.y}};
      cv::fillConvexPoly(img, pts, col);
      break;
    }
    case 3:
      cv::rectangle(img, {c.x - t / 2, r.y}, {c.x - t / 2 + t, br.y}, col, cv::FILLED);
      cv::rectangle(img, {r.x, c.y - t / 2}, {br.x, c.y - t / 2 + t}, col, cv::FILLED);
      break;
    case 4: cv::ellipse(img, c, {std::max(1, r.width / 2 - t / 2), std::max(1, r.height / 2 - t / 2)}, 0, 0, 360, col, t); break;
    case 5: {
      std::vector<cv::Point> pts = {{c.x, r.y}, {br.x, c.y}, {c.x, br.y}, {r.x, c.y}};
      cv::fillConvexPoly(img, pts, col);
      break;
    }
    case 6: cv::rectangle(img, tl + cv::Point(t / 2, t / 2), br - cv::Point(t / 2, t / 2), col, t); break;
    case 7:
      cv::rectangle(img, tl, br, col, cv::FILLED);
      cv::circle(img, c, std::max(1, t), cv::Scalar(128, 128, 128), cv::FILLED);
      break;
    case 8:
      cv::rectangle(img, tl, {br.x, r.y + std::max(1, r.height / 3)}, col, cv::FILLED);
      cv::rectangle(img, {r.x, br.y - std::max(1, r.height / 3)}, br, col, cv::FILLED);
      break;
    default:
      cv::line(img, tl, br, col, t);
      cv::line(img, {br.x, r.y}, {r.x, br.y}, col, t);
      break;
  }
}

inline cv::Mat textured_background(int size, Rng& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  const cv::Scalar base(90 + 60 * u(rng), 90 + 60 * u(rng), 90 + 60 * u(rng));
  cv::Mat coarse(size / 8 + 1, size / 8 + 1, CV_8UC3);
  for (int y = 0; y < coarse.rows; ++y)
    for (int x = 0; x < coarse.cols; ++x)
      for (int c = 0; c < 3; ++c)
        coarse.at<cv::Vec3b>(y, x)[c] = cv::saturate_cast<uchar>(base[c] + 40 * (u(rng) - 0.5));
  cv::Mat bg;
  cv::resize(coarse, bg, {size, size}, 0, 0, cv::INTER_LINEAR);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < 3; ++c)
        bg.at<cv::Vec3b>(y, x)[c] = cv::saturate_cast<uchar>(bg.at<cv::Vec3b>(y, x)[c] + 16 * (u(rng) - 0.5));
  return bg;
}

}  // namespace detail

inline std::string synthetic_stem(int i) {
  std::ostringstream os;
  os << "synth_" << std::setw(5) << std::setfill('0') << i;
  return os.str();
}

/// Writes `images/*.jpg` and `annotations/*.txt` under `root`. Same options -> byte-identical files.
inline void generate_synthetic_dataset(const fs::path& root, const SyntheticOptions& o) {
  if (o.n_images < 1) throw ConfigError("synthetic dataset needs at least one image");
  if (o.classes < 1 || o.classes > kVisDroneClasses) throw ConfigError("synthetic classes must be in 1..10");
  if (o.image_size < 32) throw ConfigError("synthetic image_size must be >= 32");
  std::error_code ec;
  fs::create_directories(root / "images", ec);
  fs::create_directories(root / "annotations", ec);
  if (ec || !fs::is_directory(root / "images") || !fs::is_directory(root / "annotations"))
    throw IoError("cannot create dataset directories under " + root.string());
  Rng rng(o.seed);
  std::uniform_int_distribution<int> count(o.min_targets, o.max_targets), size(o.min_size, o.max_size),
      cls(0, o.classes - 1);
  std::uniform_real_distribution<double> aspect(0.75, 1.33);
  for (int i = 0; i < o.n_images; ++i) {
    cv::Mat img = detail::textured_background(o.image_size, rng);
    const int n = count(rng);
    std::vector<cv::Rect> placed;
    std::vector<AnnotationRecord> recs;
    for (int k = 0; k < n; ++k) {
      const int c = cls(rng);
      for (int attempt = 0; attempt < 50; ++attempt) {
        const int s = size(rng);
        const double a = aspect(rng);
        const int w = std::clamp(static_cast<int>(std::lround(s * std::sqrt(a))), o.min_size, o.max_size);
        const int h = std::clamp(static_cast<int>(std::lround(s / std::sqrt(a))), o.min_size, o.max_size);
        std::uniform_int_distribution<int> px(0, o.image_size - w), py(0, o.image_size - h);
        const cv::Rect r(px(rng), py(rng), w, h);
        const cv::Rect grown(r.x - 2, r.y - 2, r.width + 4, r.height + 4);
        if (std::any_of(placed.begin(), placed.end(), [&](const cv::Rect& p) { return (p & grown).area() > 0; }))
          continue;
        detail::draw_target(img, c, r);
        placed.push_back(r);
        recs.push_back({r.x, r.y, r.width, r.height, 1, c + 1, 0, 0});
        break;
      }
    }
    const std::string stem = synthetic_stem(i);
    if (!cv::imwrite((root / "images" / (stem + ".jpg")).string(), img, {cv::IMWRITE_JPEG_QUALITY, 95}))
      throw IoError("cannot write image under " + root.string());
    std::ofstream ann(root / "annotations" / (stem + ".txt"));
    if (!ann) throw IoError("cannot write annotation under " + root.string());
    for (const auto& r : recs) ann << format_visdrone_line(r) << "\n";
  }
}

/// Locates `<root>/<split>`, `<root>/VisDrone2019-DET-<split>`, or `root` itself.
inline fs::path resolve_split(const fs::path& root, const std::string& split) {
  if (split != "train" && split != "val" && split != "test")
    throw ConfigError("split must be train, val or test (got '" + split + "')");
  for (const fs::path& p : {root / split, root / ("VisDrone2019-DET-" + split), root})
    if (fs::is_directory(p / "images")) return p;
  throw IoError("no images/ directory for split '" + split + "' under " + root.string());
}

struct DatasetItem {
  fs::path image;
  fs::path annotation;
};

template <typename T>
struct Batch {
  Tensor<T> images;
  std::vector<std::vector<Box>> boxes;
  std::vector<LetterboxMeta> meta;
  std::vector<std::size_t> indices;
};

/// Indexed split with in-memory caching of decoded images and annotations.
class Dataset {
 public:
  Dataset(const fs::path& root, const std::string& split, bool cache = true) : cache_(cache) {
    dir_ = resolve_split(root, split);
    std::vector<fs::path> images;
    for (const auto& e : fs::directory_iterator(dir_ / "images")) {
      const auto ext = e.path().extension().string();
      if (ext == ".jpg" || ext == ".jpeg" || ext == ".png" || ext == ".JPG") images.push_back(e.path());
    }
    std::sort(images.begin(), images.end());
    for (const auto& img : images) {
      const fs::path ann = dir_ / "annotations" / (img.stem().string() + ".txt");
      if (!fs::exists(ann)) {
        warnings_.push_back("missing annotation for " + img.filename().string() + ", skipped");
        continue;
      }
      items_.push_back({img, ann});
    }
    images_.resize(items_.size());
    records_.resize(items_.size());
  }

  std::size_t size() const { return items_.size(); }
  const fs::path& directory() const { return dir_; }
  const std::vector<std::string>& warnings() const { return warnings_; }
  const DatasetItem& item(std::size_t i) const { return items_.at(i); }

  cv::Mat image(std::size_t i) {
    if (cache_ && !images_[i].empty()) return images_[i];
    cv::Mat img = cv::imread(items_.at(i).image.string(), cv::IMREAD_COLOR);
    if (img.empty()) throw IoError("cannot decode " + items_[i].image.string());
    if (cache_) images_[i] = img;
    return img;
  }

  const std::vector<AnnotationRecord>& annotations(std::size_t i) {
    if (!records_[i]) records_[i] = read_annotations(items_.at(i).annotation);
    return *records_[i];
  }

  /// Letterboxed sample; with augment, random horizontal flip and scale jitter drawn from `rng`.
  template <typename T>
  void load(std::size_t i, int target, bool augment, double flip_p, double jitter, Rng& rng, Tensor<T>& images,
            int slot, std::vector<Box>& boxes, LetterboxMeta& meta) {
    double scale = 1.0;
    bool flip = false;
    if (augment) {
      std::uniform_real_distribution<double> u(0, 1);
      scale = 1.0 + jitter * (2 * u(rng) - 1);
      flip = u(rng) < flip_p;
    }
    cv::Mat canvas = letterbox_image(image(i), target, meta, scale);
    meta.source = items_[i].image.string();
    if (flip) cv::flip(canvas, canvas, 1);
    image_to_tensor(canvas, images, slot);
    boxes = boxes_to_canvas(annotations(i), meta, flip);
  }

 private:
  fs::path dir_;
  bool cache_;
  std::vector<DatasetItem> items_;
  std::vector<std::string> warnings_;
  std::vector<cv::Mat> images_;
  std::vector<std::optional<std::vector<AnnotationRecord>>> records_;
};

/// Deterministic epoch-wise batch stream: order and augmentation depend only on (seed, epoch).
template <typename T>
class BatchIterator {
 public:
  BatchIterator(Dataset& ds, int batch, int image_size, std::uint64_t seed, bool augment, bool shuffle = true,
                double flip_p = 0.5, double jitter = 0.1)
      : ds_(ds), batch_(batch), size_(image_size), seed_(seed), augment_(augment), shuffle_(shuffle),
        flip_p_(flip_p), jitter_(jitter) {
    if (batch < 1) throw ConfigError("batch size must be positive");
    if (ds.size() == 0) throw IoError("dataset " + ds.directory().string() + " has no samples");
  }

  std::size_t batches_per_epoch() const { return (ds_.size() + batch_ - 1) / batch_; }

  std::vector<Batch<T>> epoch(int e) {
    std::vector<std::size_t> order(ds_.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed_ * 1000003ull + static_cast<std::uint64_t>(e));
    if (shuffle_) std::shuffle(order.begin(), order.end(), rng);
    std::vector<Batch<T>> out;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += batch_) {
      const int n = static_cast<int>(std::min<std::size_t>(batch_, order.size() - b0));
      Batch<T> b;
      b.images = Tensor<T>(n, 3, size_, size_);
      b.boxes.resize(n);
      b.meta.resize(n);
      for (int k = 0; k < n; ++k) {
        b.indices.push_back(order[b0 + k]);
        ds_.load(order[b0 + k], size_, augment_, flip_p_, jitter_, rng, b.images, k, b.boxes[k], b.meta[k]);
      }
      out.push_back(std::move(b));
    }
    return out;
  }

 private:
  Dataset& ds_;
  int batch_, size_;
  std::uint64_t seed_;
  bool augment_, shuffle_;
  double flip_p_, jitter_;
};

}  // namespace slyolo
