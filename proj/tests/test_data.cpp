#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include <gtest/gtest.h>

#include "slyolo/data.hpp"

using namespace slyolo;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("slyolo_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ull;
  return h;
}

std::map<std::string, std::uint64_t> checksums(const fs::path& root) {
  std::map<std::string, std::uint64_t> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = fnv1a(read_bytes(e.path()));
  return out;
}

}  // namespace

TEST(VisDroneParse, ExampleLine) {
  auto r = parse_visdrone_line("100,200,50,40,1,4,0,1");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->bbox_left, 100);
  EXPECT_EQ(r->bbox_top, 200);
  EXPECT_EQ(r->bbox_left + r->bbox_width, 150);
  EXPECT_EQ(r->bbox_top + r->bbox_height, 240);
  EXPECT_EQ(r->class_id(), 3);
  EXPECT_EQ(r->occlusion, 1);
}

TEST(VisDroneParse, Rejections) {
  EXPECT_FALSE(parse_visdrone_line("0,0,0,10,1,1,0,0"));
  EXPECT_FALSE(parse_visdrone_line("10,10,5,5,0,0,0,0"));
  EXPECT_FALSE(parse_visdrone_line("10,10,5,5,1,11,0,0"));
  EXPECT_TRUE(parse_visdrone_line("10,10,5,5,1,10,0,0"));
  EXPECT_TRUE(parse_visdrone_line("10,10,5,5,1,1,0,0,\r"));
}

TEST(VisDroneParse, MalformedCarriesLineNumber) {
  try {
    parse_visdrone_line("1,2,3", 17);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 17);
  }
  EXPECT_THROW(parse_visdrone_line("1,2,x,4,1,1,0,0"), ParseError);
  EXPECT_THROW(parse_visdrone_line("1,2,3,4,1,12,0,0"), ParseError);
  const auto dir = temp_dir("malformed");
  {
    std::ofstream f(dir / "a.txt");
    f << "1,2,3,4,1,1,0,0\n\n1,2,3,4,1,1\n";
  }
  try {
    read_annotations(dir / "a.txt");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3);
  }
  fs::remove_all(dir);
}

TEST(VisDroneParse, RoundTrip) {
  Rng rng(3);
  std::uniform_int_distribution<int> px(0, 2000), sz(1, 300), cat(1, 10), tri(0, 2), bit(0, 1);
  for (int i = 0; i < 500; ++i) {
    AnnotationRecord r{px(rng), px(rng), sz(rng), sz(rng), bit(rng), cat(rng), tri(rng), tri(rng)};
    const auto line = format_visdrone_line(r);
    auto back = parse_visdrone_line(line);
    ASSERT_TRUE(back);
    EXPECT_EQ(*back, r);
    EXPECT_EQ(format_visdrone_line(*back), line);
  }
}

TEST(Letterbox, WideImage) {
  cv::Mat img(765, 1360, CV_8UC3, cv::Scalar(10, 20, 30));
  LetterboxMeta m;
  cv::Mat out = letterbox_image(img, 640, m);
  EXPECT_EQ(out.cols, 640);
  EXPECT_EQ(out.rows, 640);
  EXPECT_DOUBLE_EQ(m.pad_x, 0);
  EXPECT_DOUBLE_EQ(m.pad_y, 140);
  EXPECT_EQ(std::lround(765 * m.scale_y), 360);
  EXPECT_EQ(out.at<cv::Vec3b>(139, 320), cv::Vec3b(114, 114, 114));
  EXPECT_EQ(out.at<cv::Vec3b>(140, 320), cv::Vec3b(10, 20, 30));
  EXPECT_EQ(out.at<cv::Vec3b>(499, 320), cv::Vec3b(10, 20, 30));
  EXPECT_EQ(out.at<cv::Vec3b>(500, 320), cv::Vec3b(114, 114, 114));
  for (auto [x, y] : {std::pair{0.0, 0.0}, {1360.0, 765.0}, {1360.0, 0.0}, {0.0, 765.0}}) {
    auto c = m.to_canvas(x, y);
    EXPECT_GE(c.x, 0);
    EXPECT_GE(c.y, 0);
    auto o = m.to_original(c.x, c.y);
    EXPECT_NEAR(o.x, x, 0.5);
    EXPECT_NEAR(o.y, y, 0.5);
  }
}

TEST(Letterbox, SquareIsIdentity) {
  Rng rng(1);
  cv::Mat img(640, 640, CV_8UC3);
  cv::randu(img, 0, 255);
  LetterboxMeta m;
  cv::Mat out = letterbox_image(img, 640, m);
  EXPECT_EQ(cv::norm(out, img, cv::NORM_INF), 0);
  EXPECT_EQ(m.pad_x, 0);
  EXPECT_EQ(m.pad_y, 0);
  EXPECT_EQ(m.scale_x, 1);
}

TEST(Letterbox, Errors) {
  LetterboxMeta m;
  EXPECT_THROW(letterbox_image(cv::Mat(), 640, m), InputError);
  EXPECT_THROW(letterbox_image(cv::Mat(10, 10, CV_8UC3), 100, m), ConfigError);
}

TEST(Letterbox, InverseWithinHalfPixel) {
  Rng rng(5);
  std::uniform_int_distribution<int> dim(40, 1500);
  std::uniform_real_distribution<double> u(0, 1);
  for (int t = 0; t < 50; ++t) {
    const int w = dim(rng), h = dim(rng);
    cv::Mat img(h, w, CV_8UC3, cv::Scalar::all(0));
    LetterboxMeta m;
    letterbox_image(img, 640, m);
    for (int k = 0; k < 10; ++k) {
      const double x = u(rng) * w, y = u(rng) * h;
      auto c = m.to_canvas(x, y);
      EXPECT_GE(c.x, 0);
      EXPECT_LE(c.x, 640);
      auto o = m.to_original(c.x, c.y);
      EXPECT_NEAR(o.x, x, 0.5);
      EXPECT_NEAR(o.y, y, 0.5);
    }
  }
}

TEST(Synthetic, ByteIdenticalAndReparseable) {
  const auto a = temp_dir("synth_a"), b = temp_dir("synth_b");
  SyntheticOptions o;
  generate_synthetic_dataset(a, o);
  generate_synthetic_dataset(b, o);
  const auto ca = checksums(a), cb = checksums(b);
  EXPECT_EQ(ca.size(), 32u);
  EXPECT_EQ(ca, cb);
  Dataset ds(a, "train");
  EXPECT_EQ(ds.size(), 16u);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& recs = ds.annotations(i);
    EXPECT_GE(recs.size(), 1u);
    EXPECT_LE(recs.size(), 30u);
    for (const auto& r : recs) {
      EXPECT_GE(std::min(r.bbox_width, r.bbox_height), 4);
      EXPECT_LE(std::max(r.bbox_width, r.bbox_height), 24);
      EXPECT_GE(r.class_id(), 0);
      EXPECT_LT(r.class_id(), 10);
    }
  }
  SyntheticOptions other = o;
  other.seed = 8;
  const auto c = temp_dir("synth_c");
  generate_synthetic_dataset(c, other);
  EXPECT_NE(checksums(c), ca);
  for (const auto& p : {a, b, c}) fs::remove_all(p);
}

TEST(Synthetic, ClassHistogramUniform) {
  const auto dir = temp_dir("synth_hist");
  SyntheticOptions o;
  o.n_images = 1000;
  o.image_size = 64;
  o.seed = 11;
  generate_synthetic_dataset(dir, o);
  std::map<int, long> hist;
  long total = 0;
  for (const auto& e : fs::directory_iterator(dir / "annotations"))
    for (const auto& r : read_annotations(e.path())) {
      ++hist[r.class_id()];
      ++total;
    }
  ASSERT_EQ(hist.size(), 10u);
  for (const auto& [c, n] : hist) EXPECT_NEAR(static_cast<double>(n) / total, 0.10, 0.02) << "class " << c;
  fs::remove_all(dir);
}

TEST(Synthetic, UnwritableDestination) {
  const auto dir = temp_dir("synth_ro");
  { std::ofstream(dir / "file") << "x"; }
  EXPECT_THROW(generate_synthetic_dataset(dir / "file" / "sub", SyntheticOptions{}), IoError);
  SyntheticOptions bad;
  bad.n_images = 0;
  EXPECT_THROW(generate_synthetic_dataset(dir, bad), ConfigError);
  fs::remove_all(dir);
}

class IteratorTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new fs::path(temp_dir("iter"));
    generate_synthetic_dataset(*root_, SyntheticOptions{});
  }
  static void TearDownTestSuite() {
    fs::remove_all(*root_);
    delete root_;
  }
  static fs::path* root_;
};
fs::path* IteratorTest::root_ = nullptr;

TEST_F(IteratorTest, SameSeedSameBatches) {
  Dataset d1(*root_, "train"), d2(*root_, "train");
  BatchIterator<float> a(d1, 4, 96, 42, true), b(d2, 4, 96, 42, true);
  for (int e = 0; e < 3; ++e) {
    auto ea = a.epoch(e), eb = b.epoch(e);
    ASSERT_EQ(ea.size(), 4u);
    for (std::size_t k = 0; k < ea.size(); ++k) {
      EXPECT_EQ(ea[k].indices, eb[k].indices);
      EXPECT_EQ(max_abs_diff(ea[k].images, eb[k].images), 0.0);
      ASSERT_EQ(ea[k].boxes.size(), eb[k].boxes.size());
      for (std::size_t i = 0; i < ea[k].boxes.size(); ++i) {
        ASSERT_EQ(ea[k].boxes[i].size(), eb[k].boxes[i].size());
        for (std::size_t j = 0; j < ea[k].boxes[i].size(); ++j) EXPECT_EQ(ea[k].boxes[i][j].xc, eb[k].boxes[i][j].xc);
      }
    }
  }
  BatchIterator<float> c(d1, 4, 96, 43, true);
  EXPECT_NE(a.epoch(0)[0].indices, c.epoch(0)[0].indices);
}

TEST_F(IteratorTest, FlipReflectsCenters) {
  Dataset ds(*root_, "train");
  Rng r1(1), r2(1);
  Tensor<float> im(1, 3, 128, 128), imf(1, 3, 128, 128);
  std::vector<Box> plain, flipped;
  LetterboxMeta m1, m2;
  ds.load(0, 128, false, 0.0, 0.0, r1, im, 0, plain, m1);
  ds.load(0, 128, true, 1.0, 0.0, r2, imf, 0, flipped, m2);
  ASSERT_EQ(plain.size(), flipped.size());
  for (std::size_t i = 0; i < plain.size(); ++i) {
    EXPECT_NEAR(flipped[i].xc, 1.0 - plain[i].xc, 1e-12);
    EXPECT_EQ(flipped[i].yc, plain[i].yc);
    EXPECT_EQ(flipped[i].w, plain[i].w);
  }
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 128; ++y)
      for (int x = 0; x < 128; ++x) ASSERT_EQ(imf.at(0, c, y, x), im.at(0, c, y, 127 - x));
}

TEST_F(IteratorTest, CoordinatesStayNormalized) {
  Dataset ds(*root_, "train");
  BatchIterator<float> it(ds, 8, 64, 9, true, true, 0.5, 0.3);
  for (int e = 0; e < 20; ++e)
    for (const auto& b : it.epoch(e))
      for (const auto& boxes : b.boxes)
        for (const auto& bx : boxes) {
          EXPECT_GE(bx.xc - bx.w / 2, -1e-12);
          EXPECT_LE(bx.xc + bx.w / 2, 1 + 1e-12);
          EXPECT_GE(bx.yc - bx.h / 2, -1e-12);
          EXPECT_LE(bx.yc + bx.h / 2, 1 + 1e-12);
          EXPECT_GT(bx.w, 0);
          EXPECT_GT(bx.h, 0);
        }
}

TEST_F(IteratorTest, MissingAnnotationWarnsAndSkips) {
  const auto dir = temp_dir("missing");
  fs::create_directories(dir / "val" / "images");
  fs::create_directories(dir / "val" / "annotations");
  for (const auto& e : fs::directory_iterator(*root_ / "images")) fs::copy(e.path(), dir / "val" / "images");
  for (const auto& e : fs::directory_iterator(*root_ / "annotations"))
    if (e.path().stem() != synthetic_stem(3)) fs::copy(e.path(), dir / "val" / "annotations");
  Dataset ds(dir, "val");
  EXPECT_EQ(ds.size(), 15u);
  ASSERT_EQ(ds.warnings().size(), 1u);
  EXPECT_NE(ds.warnings()[0].find(synthetic_stem(3)), std::string::npos);
  EXPECT_THROW(Dataset(dir, "holdout"), ConfigError);
  EXPECT_THROW(Dataset(dir / "nowhere", "val"), IoError);
  fs::remove_all(dir);
}

TEST(VisDroneSplit, ValidationHas548Images) {
  const char* root = std::getenv("SLYOLO_VISDRONE_ROOT");
  if (!root) GTEST_SKIP() << "set SLYOLO_VISDRONE_ROOT to check the VisDrone2019-DET val split";
  Dataset ds(root, "val", false);
  EXPECT_EQ(ds.size(), 548u);
}
