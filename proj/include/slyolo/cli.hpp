#pragma once

#include <CLI11.hpp>

#include <cstdio>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "slyolo/slyolo.hpp"

namespace slyolo::cli {

enum ExitCode { kOk = 0, kUsage = 2, kState = 3, kRuntime = 4 };

inline std::uint64_t fnv1a(std::uint64_t h, const std::string& s) {
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ull;
  return h;
}

/// Order-independent digest of every regular file under `root` (relative path and bytes).
inline std::uint64_t tree_checksum(const fs::path& root) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& f : files) {
    std::ifstream is(f, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    h = fnv1a(h, fs::relative(f, root).generic_string());
    h = fnv1a(h, ss.str());
  }
  return h;
}

inline std::string percent(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << 100.0 * v;
  return os.str();
}

inline std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

struct Globals {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  bool json = false;

  RunConfig load() const {
    auto ov = overrides;
    if (seed) ov.push_back("train.seed=" + std::to_string(*seed));
    return config.empty() ? parse_config("", ov) : load_config(config, ov);
  }
};

inline std::vector<fs::path> collect_images(const std::vector<std::string>& inputs) {
  std::vector<fs::path> out;
  for (const auto& s : inputs) {
    const fs::path p(s);
    if (fs::is_directory(p)) {
      std::vector<fs::path> dir;
      for (const auto& e : fs::directory_iterator(p))
        if (e.is_regular_file()) dir.push_back(e.path());
      std::sort(dir.begin(), dir.end());
      out.insert(out.end(), dir.begin(), dir.end());
    } else {
      out.push_back(p);
    }
  }
  return out;
}

inline void draw_detections(cv::Mat& img, const std::vector<DetectionBox>& boxes) {
  for (const auto& b : boxes) {
    const cv::Scalar color = detail::class_color(b.class_id);
    const cv::Point p1(static_cast<int>(std::lround(b.x1)), static_cast<int>(std::lround(b.y1)));
    const cv::Point p2(static_cast<int>(std::lround(b.x2)), static_cast<int>(std::lround(b.y2)));
    cv::rectangle(img, p1, p2, color, 1);
    std::ostringstream label;
    label << b.class_id << ' ' << std::fixed << std::setprecision(2) << b.score;
    cv::putText(img, label.str(), {p1.x, std::max(8, p1.y - 2)}, cv::FONT_HERSHEY_PLAIN, 0.7, color, 1);
  }
}

inline int analyze(const Globals& g, int size, bool matrix, bool summary, std::ostream& out) {
  const RunConfig rc = g.load();
  const TensorSpec in{3, size, size};
  if (!matrix) {
    const auto rep = audit_model(Model<float>(rc.model, rc.train.seed), in);
    if (g.json)
      out << rep.to_json(!summary).dump(2) << "\n";
    else
      out << rep.to_text(!summary);
    return kOk;
  }
  nlohmann::json rows = nlohmann::json::array();
  if (!g.json)
    out << std::left << std::setw(28) << "variant" << std::right << std::setw(10) << "params(M)" << std::setw(10)
        << "GFLOPs" << std::setw(12) << "fused(M)" << std::setw(8) << "exact" << "\n";
  for (const auto& c : config_matrix(rc.model)) {
    const auto rep = audit_model(Model<float>(c, rc.train.seed), in);
    if (g.json) {
      auto j = rep.to_json(false);
      j["exact"] = rep.exact();
      rows.push_back(j);
    } else {
      out << std::left << std::setw(28) << c.name() << std::right << std::fixed << std::setprecision(2)
          << std::setw(10) << rep.params_millions() << std::setprecision(1) << std::setw(10) << rep.gflops()
          << std::setprecision(2) << std::setw(12) << rep.fused_params / 1e6 << std::setw(8)
          << (rep.exact() ? "yes" : "NO") << "\n";
    }
  }
  if (g.json) out << rows.dump(2) << "\n";
  return kOk;
}

inline int train(const Globals& g, const std::string& data, const std::string& out_dir, bool quiet,
                 std::ostream& out) {
  RunConfig rc = g.load();
  if (!data.empty()) rc.data.root = data;
  if (rc.data.root.empty()) throw ConfigError("train needs a dataset root (--data or data.root)");
  Dataset tr(rc.data.root, rc.data.train_split);
  std::optional<Dataset> val;
  try {
    val.emplace(rc.data.root, rc.data.val_split);
  } catch (const IoError&) {
  }
  for (const auto& w : tr.warnings()) std::cerr << "warning: " << w << "\n";
  if (tr.size() == 0) throw IoError("no annotated images under " + rc.data.root);
  Model<float> model(rc.model, rc.train.seed);
  Trainer<float> trainer(model, rc, tr, val ? &*val : nullptr);
  TrainOptions opt;
  opt.out_dir = out_dir;
  if (!quiet && !g.json)
    opt.on_epoch = [&](const EpochLog& e) {
      out << "epoch " << e.epoch + 1 << "/" << rc.train.epochs << std::fixed << std::setprecision(4)
          << "  loss " << e.loss_total << " (box " << e.loss_box << " cls " << e.loss_cls << " dfl " << e.loss_dfl
          << ")";
      if (!std::isnan(e.map50)) out << "  mAP50 " << percent(e.map50) << " mAP50-95 " << percent(e.map50_95);
      out << "  " << std::setprecision(1) << e.seconds << "s\n" << std::flush;
    };
  const auto res = trainer.run(opt);
  if (g.json) {
    nlohmann::json j;
    j["epochs"] = nlohmann::json::array();
    for (const auto& e : res.epochs)
      j["epochs"].push_back({{"epoch", e.epoch},
                             {"loss_total", e.loss_total},
                             {"loss_box", e.loss_box},
                             {"loss_cls", e.loss_cls},
                             {"loss_dfl", e.loss_dfl},
                             {"map50", std::isnan(e.map50) ? nlohmann::json() : nlohmann::json(e.map50)},
                             {"map50_95", std::isnan(e.map50_95) ? nlohmann::json() : nlohmann::json(e.map50_95)}});
    j["best_epoch"] = res.best_epoch;
    j["best_map50_95"] = res.best_map50_95;
    j["best_checkpoint"] = res.best_checkpoint;
    j["last_checkpoint"] = res.last_checkpoint;
    out << j.dump(2) << "\n";
  } else {
    out << "best mAP50-95 " << percent(res.best_map50_95) << " at epoch " << res.best_epoch + 1 << "\n";
    out << "checkpoints: " << res.best_checkpoint << ", " << res.last_checkpoint << "\n";
  }
  return kOk;
}

struct EvalArgs {
  std::string checkpoint, predictions, data, split, save;
  int size = 0;
};

inline int eval(const Globals& g, const EvalArgs& a, std::ostream& out) {
  RunConfig rc = g.load();
  if (!a.data.empty()) rc.data.root = a.data;
  if (rc.data.root.empty()) throw ConfigError("eval needs a dataset root (--data or data.root)");
  if (a.checkpoint.empty() == a.predictions.empty())
    throw ConfigError("eval needs exactly one of --checkpoint or --predictions");
  Dataset ds(rc.data.root, a.split.empty() ? rc.data.val_split : a.split);
  std::vector<std::vector<DetectionBox>> preds, gts;
  EvalResult res;
  if (!a.checkpoint.empty()) {
    auto model = load_checkpoint<float>(a.checkpoint);
    const int size = a.size > 0 ? a.size : rc.eval.image_size;
    res = evaluate_dataset(model, ds, size, rc.eval.conf, rc.eval.iou, rc.eval.max_det, &preds);
  } else {
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const fs::path f = fs::path(a.predictions) / (ds.item(i).image.stem().string() + ".txt");
      preds.push_back(fs::exists(f) ? read_predictions(f) : std::vector<DetectionBox>{});
      std::vector<DetectionBox> gt;
      for (const auto& r : ds.annotations(i)) gt.push_back(to_detection(r));
      gts.push_back(std::move(gt));
    }
    res = compute_map(preds, gts);
  }
  if (!a.save.empty()) {
    fs::create_directories(a.save);
    for (std::size_t i = 0; i < ds.size(); ++i)
      write_predictions(fs::path(a.save) / (ds.item(i).image.stem().string() + ".txt"), preds[i]);
  }
  if (g.json) {
    out << res.to_json().dump(2) << "\n";
    return kOk;
  }
  out << "images: " << res.images << "  ground truth: " << res.ground_truth << "  predictions: " << res.predictions
      << "\n";
  out << "mAP50: " << percent(res.map50) << "\n";
  out << "mAP50-95: " << percent(res.map50_95) << "\n";
  return kOk;
}

inline int fuse(const Globals& g, const std::string& in, const std::string& dst, int size, std::ostream& out) {
  const RunConfig rc = g.load();
  auto model = load_checkpoint<float>(in);
  if (model.fused()) throw StateError(in + " is already fused");
  const auto before = model.parameter_count();
  Rng rng(rc.train.seed);
  const auto x = random_tensor<float>(1, {3, size, size}, rng, 0.0, 1.0);
  const auto ref = model.forward(x);
  model.fuse();
  const auto got = model.forward(x);
  double dev = 0;
  for (std::size_t l = 0; l < ref.levels.size(); ++l) {
    dev = std::max(dev, max_abs_diff(ref.levels[l].box, got.levels[l].box));
    dev = std::max(dev, max_abs_diff(ref.levels[l].cls, got.levels[l].cls));
  }
  const auto after = model.parameter_count();
  if (!(dev < 1e-4)) throw NumericError("fused model deviates by " + std::to_string(dev) + " (limit 1e-4)");
  save_checkpoint(model, dst);
  if (g.json) {
    out << nlohmann::json{{"max_abs_deviation", dev}, {"params", before}, {"fused_params", after}, {"output", dst}}
               .dump(2)
        << "\n";
  } else {
    out << "max abs deviation: " << std::scientific << std::setprecision(3) << dev << std::defaultfloat << "\n";
    out << "params: " << before << " -> " << after << "\n";
    out << "wrote " << dst << "\n";
  }
  return kOk;
}

struct PredictArgs {
  std::string checkpoint, out_dir;
  std::vector<std::string> inputs;
  double conf = 0.25;
  int size = 0;
};

inline int predict(const Globals& g, const PredictArgs& a, std::ostream& out, std::ostream& err) {
  const RunConfig rc = g.load();
  auto model = load_checkpoint<float>(a.checkpoint);
  const int size = a.size > 0 ? a.size : rc.eval.image_size;
  fs::create_directories(a.out_dir);
  nlohmann::json summary = nlohmann::json::array();
  int done = 0;
  for (const auto& p : collect_images(a.inputs)) {
    cv::Mat img = cv::imread(p.string(), cv::IMREAD_COLOR);
    if (img.empty()) {
      err << "warning: cannot read image " << p.string() << ", skipped\n";
      continue;
    }
    const auto boxes = detect(model, img, size, a.conf, rc.eval.iou, rc.eval.max_det);
    const std::string stem = p.stem().string();
    write_predictions(fs::path(a.out_dir) / (stem + ".txt"), boxes);
    draw_detections(img, boxes);
    if (!cv::imwrite((fs::path(a.out_dir) / (stem + ".jpg")).string(), img))
      throw IoError("cannot write " + (fs::path(a.out_dir) / (stem + ".jpg")).string());
    ++done;
    if (g.json)
      summary.push_back({{"image", p.string()}, {"detections", boxes.size()}});
    else
      out << p.filename().string() << ": " << boxes.size() << " detections\n";
  }
  if (g.json) out << summary.dump(2) << "\n";
  else out << done << " images written to " << a.out_dir << "\n";
  return kOk;
}

struct BenchArgs {
  std::string checkpoint;
  int size = 0, runs = 50, warmup = 10;
  bool fuse = false;
};

inline int bench(const Globals& g, const BenchArgs& a, std::ostream& out) {
  const RunConfig rc = g.load();
  Model<float> model = a.checkpoint.empty() ? Model<float>(rc.model, rc.train.seed) : load_checkpoint<float>(a.checkpoint);
  if (a.fuse && !model.fused()) model.fuse();
  const int size = a.size > 0 ? a.size : rc.eval.image_size;
  const auto r = benchmark_model(model, size, a.warmup, a.runs, rc.train.seed);
  if (g.json) {
    out << nlohmann::json{{"fps", r.fps},      {"mean_ms", r.mean_ms}, {"std_ms", r.std_ms},
                          {"median_ms", r.median_ms}, {"runs", a.runs}, {"warmup", a.warmup},
                          {"image_size", size}, {"fused", model.fused()}}
               .dump(2)
        << "\n";
  } else {
    out << std::fixed << "FPS: " << std::setprecision(2) << r.fps << "  (" << std::setprecision(1) << r.mean_ms
        << " ms ± " << r.std_ms << " ms, median " << r.median_ms << " ms, " << a.runs << " runs, " << size << "x"
        << size << (model.fused() ? ", fused" : "") << ")\n";
  }
  return kOk;
}

inline int synth(const Globals& g, const std::string& dst, int n, int size, std::ostream& out) {
  SyntheticOptions o;
  if (g.seed) o.seed = *g.seed;
  o.n_images = n;
  o.image_size = size;
  generate_synthetic_dataset(dst, o);
  const auto sum = tree_checksum(dst);
  if (g.json)
    out << nlohmann::json{{"root", dst}, {"images", n}, {"seed", o.seed}, {"checksum", hex(sum)}}.dump(2) << "\n";
  else
    out << "wrote " << n << " images to " << dst << "\nchecksum: " << hex(sum) << "\n";
  return kOk;
}

/// Entry point; returns the process exit code.
inline int run(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Small-object detector toolkit: analyze, train, eval, fuse, predict, bench, synth"};
  app.name("slyolo");
  app.fallthrough();
  app.require_subcommand(1);
  Globals g;
  std::uint64_t seed = 0;
  app.add_option("--config,-c", g.config, "run config YAML")->check(CLI::ExistingFile);
  app.add_option("--set,-s", g.overrides, "override key=value (dotted keys for sections)")->take_all();
  auto* seed_opt = app.add_option("--seed", seed, "random seed");
  app.add_flag("--json", g.json, "machine-readable output");

  int size = 640;
  bool matrix = false, summary = false;
  auto* an = app.add_subcommand("analyze", "per-layer parameter and FLOP report");
  an->add_option("--size", size, "square input size")->check(CLI::PositiveNumber);
  an->add_flag("--matrix", matrix, "sweep all 36 variants");
  an->add_flag("--summary", summary, "totals only");

  std::string data, out_dir = "runs/train";
  bool quiet = false;
  auto* tr = app.add_subcommand("train", "train a model");
  tr->add_option("--data,-d", data, "dataset root");
  tr->add_option("--out,-o", out_dir, "output directory");
  tr->add_flag("--quiet,-q", quiet, "no per-epoch lines");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "mAP of a checkpoint or prediction files");
  ev->add_option("--checkpoint", ea.checkpoint)->check(CLI::ExistingFile);
  ev->add_option("--predictions", ea.predictions, "directory of <stem>.txt files")->check(CLI::ExistingDirectory);
  ev->add_option("--data,-d", ea.data, "dataset root");
  ev->add_option("--split", ea.split);
  ev->add_option("--size", ea.size);
  ev->add_option("--save", ea.save, "write predictions here");

  std::string fin, fout;
  int probe = 128;
  auto* fu = app.add_subcommand("fuse", "fold batch norms and RepVGGDW branches");
  fu->add_option("--checkpoint", fin)->required()->check(CLI::ExistingFile);
  fu->add_option("--out,-o", fout)->required();
  fu->add_option("--probe-size", probe)->check(CLI::PositiveNumber);

  PredictArgs pa;
  auto* pr = app.add_subcommand("predict", "draw detections and write prediction files");
  pr->add_option("--checkpoint", pa.checkpoint)->required()->check(CLI::ExistingFile);
  pr->add_option("--out,-o", pa.out_dir)->required();
  pr->add_option("--conf", pa.conf);
  pr->add_option("--size", pa.size);
  pr->add_option("images", pa.inputs, "image files or directories")->required();

  BenchArgs ba;
  auto* be = app.add_subcommand("bench", "batch-1 forward timing");
  be->add_option("--checkpoint", ba.checkpoint)->check(CLI::ExistingFile);
  be->add_option("--size", ba.size);
  be->add_option("--runs", ba.runs)->check(CLI::PositiveNumber);
  be->add_option("--warmup", ba.warmup)->check(CLI::NonNegativeNumber);
  be->add_flag("--fuse", ba.fuse);

  std::string sdst;
  int sn = 16, ssize = 128;
  auto* sy = app.add_subcommand("synth", "generate the synthetic dataset");
  sy->add_option("--out,-o", sdst)->required();
  sy->add_option("--n", sn)->check(CLI::PositiveNumber);
  sy->add_option("--size", ssize);

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }
  if (seed_opt->count()) g.seed = seed;

  try {
    if (an->parsed()) return analyze(g, size, matrix, summary, out);
    if (tr->parsed()) return train(g, data, out_dir, quiet, out);
    if (ev->parsed()) return eval(g, ea, out);
    if (fu->parsed()) return fuse(g, fin, fout, probe, out);
    if (pr->parsed()) return predict(g, pa, out, err);
    if (be->parsed()) return bench(g, ba, out);
    if (sy->parsed()) return synth(g, sdst, sn, ssize, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const InputError& e) {
    err << "input error: " << e.what() << "\n";
    return kUsage;
  } catch (const StateError& e) {
    err << "state error: " << e.what() << "\n";
    return kState;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}

}  // namespace slyolo::cli
