#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <string>
#include <vector>

#include "slyolo/checkpoint.hpp"
#include "slyolo/config.hpp"
#include "slyolo/data.hpp"
#include "slyolo/evalkit.hpp"
#include "slyolo/loss.hpp"

namespace slyolo {

/// SGD with Nesterov momentum. Decay applies to parameters flagged `decay` (conv weights); biases get
/// their own warmup learning rate.
template <typename T>
class SGD {
 public:
  enum class Group { Weight, BatchNorm, Bias };

  SGD(Model<T>& model, double weight_decay) : weight_decay_(weight_decay) {
    for (auto& np : model.parameters()) {
      Group g = Group::BatchNorm;
      if (np.param->decay)
        g = Group::Weight;
      else if (np.name.size() >= 4 && np.name.compare(np.name.size() - 4, 4, "bias") == 0)
        g = Group::Bias;
      entries_.push_back({np.param, g, std::vector<T>(np.param->numel(), T(0))});
    }
  }

  void set_lr(double weight_lr, double bias_lr) {
    lr_ = weight_lr;
    bias_lr_ = bias_lr;
  }
  void set_momentum(double m) { momentum_ = m; }
  double lr() const { return lr_; }
  double bias_lr() const { return bias_lr_; }
  double momentum() const { return momentum_; }

  double grad_norm() const {
    double s = 0;
    for (const auto& e : entries_)
      for (T g : e.param->grad) s += static_cast<double>(g) * g;
    return std::sqrt(s);
  }

  /// Rescales gradients so the global norm is at most max_norm; returns the norm before clipping.
  double clip(double max_norm) {
    const double n = grad_norm();
    if (max_norm > 0 && n > max_norm) {
      const T f = static_cast<T>(max_norm / (n + 1e-6));
      for (auto& e : entries_)
        for (T& g : e.param->grad) g *= f;
    }
    return n;
  }

  void step() {
    for (auto& e : entries_) {
      const double lr = e.group == Group::Bias ? bias_lr_ : lr_;
      const double wd = e.group == Group::Weight ? weight_decay_ : 0.0;
      auto& v = e.param->value;
      const auto& g = e.param->grad;
      for (std::size_t i = 0; i < v.size(); ++i) {
        const double gi = g[i] + wd * v[i];
        const double buf = momentum_ * e.buf[i] + gi;
        e.buf[i] = static_cast<T>(buf);
        v[i] -= static_cast<T>(lr * (gi + momentum_ * buf));
      }
    }
  }

  std::size_t group_size(Group g) const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.group == g) n += e.param->numel();
    return n;
  }

 private:
  struct Entry {
    Param<T>* param;
    Group group;
    std::vector<T> buf;
  };
  std::vector<Entry> entries_;
  double weight_decay_;
  double lr_ = 0, bias_lr_ = 0, momentum_ = 0.9;
};

/// Cosine decay from 1 to lrf over `epochs`.
inline double cosine_factor(double epoch, int epochs, double lrf) {
  return ((1 - std::cos(epoch * std::numbers::pi / epochs)) / 2) * (lrf - 1) + 1;
}

struct EpochLog {
  int epoch = 0;
  double loss_total = 0, loss_box = 0, loss_cls = 0, loss_dfl = 0;
  double map50 = std::numeric_limits<double>::quiet_NaN();
  double map50_95 = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0;
};

struct TrainResult {
  std::vector<EpochLog> epochs;
  double best_map50_95 = -1;
  int best_epoch = -1;
  std::string best_checkpoint, last_checkpoint;
};

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: no files written
  bool verbose = false;
  std::function<void(const EpochLog&)> on_epoch;
};

inline void write_log_header(std::ostream& os) { os << "epoch,loss_total,loss_box,loss_cls,loss_dfl,map50,map50_95\n"; }

inline void write_log_row(std::ostream& os, const EpochLog& e) {
  auto num = [&](double v) {
    if (std::isnan(v))
      os << "nan";
    else
      os << v;
  };
  os << e.epoch << ',' << std::setprecision(8);
  num(e.loss_total);
  os << ',';
  num(e.loss_box);
  os << ',';
  num(e.loss_cls);
  os << ',';
  num(e.loss_dfl);
  os << ',';
  num(e.map50);
  os << ',';
  num(e.map50_95);
  os << '\n';
}

/// Epoch loop over `train` with periodic evaluation on `val` (the training split when absent).
template <typename T>
class Trainer {
 public:
  Trainer(Model<T>& model, const RunConfig& rc, Dataset& train, Dataset* val = nullptr)
      : model_(model), rc_(rc), train_(train), val_(val ? val : &train),
        it_(train, rc.train.batch_size, rc.train.image_size, rc.train.seed, rc.train.augment, true, rc.train.flip,
            rc.train.scale_jitter),
        opt_(model, rc.train.weight_decay) {
    if (model.fused()) throw StateError("cannot train a fused model");
    rc.train.validate();
    model_.head().reset_bias(rc.train.image_size);
    lp_.box = rc.train.box;
    lp_.cls = rc.train.cls;
    lp_.dfl = rc.train.dfl;
  }

  SGD<T>& optimizer() { return opt_; }
  std::size_t batches_per_epoch() const { return it_.batches_per_epoch(); }
  long step_count() const { return step_; }

  /// Sets learning rate and momentum for global iteration `it` within `epoch`.
  void schedule(long it, int epoch) {
    const auto& c = rc_.train;
    const double nb = static_cast<double>(batches_per_epoch());
    const double warm = std::max(1.0, std::round(c.warmup_epochs * nb));
    const double f = cosine_factor(epoch, c.epochs, c.lrf);
    const double lr = c.lr0 * f;
    if (c.warmup_epochs > 0 && it < warm) {
      const double r = it / warm;
      opt_.set_lr(lr * r, c.warmup_bias_lr + (lr - c.warmup_bias_lr) * r);
      opt_.set_momentum(c.warmup_momentum + (c.momentum - c.warmup_momentum) * r);
    } else {
      opt_.set_lr(lr, lr);
      opt_.set_momentum(c.momentum);
    }
  }

  /// One optimizer step on a batch; throws NumericError on a non-finite loss.
  LossResult step(const Batch<T>& batch, int epoch) {
    schedule(step_, epoch);
    model_.zero_grad();
    RawPrediction<T> grad;
    LossResult loss;
    try {
      const auto raw = model_.forward(batch.images, Context{true, true});
      loss = detection_loss(raw, batch.boxes, rc_.train.image_size, lp_, &grad);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " at step " + std::to_string(step_) + " (epoch " +
                         std::to_string(epoch) + ")");
    }
    model_.backward(grad);
    const double gn = opt_.clip(rc_.train.grad_clip);
    if (!std::isfinite(gn))
      throw NumericError("non-finite gradient at step " + std::to_string(step_) + " (epoch " + std::to_string(epoch) + ")");
    opt_.step();
    ++step_;
    return loss;
  }

  EvalResult evaluate() {
    return evaluate_dataset(model_, *val_, rc_.train.image_size, rc_.eval.conf, rc_.eval.iou, rc_.eval.max_det);
  }

  TrainResult run(const TrainOptions& opt = {}) {
    namespace fs = std::filesystem;
    TrainResult res;
    std::ofstream log;
    if (!opt.out_dir.empty()) {
      fs::create_directories(opt.out_dir);
      log.open(opt.out_dir / "log.csv");
      if (!log) throw IoError("cannot write " + (opt.out_dir / "log.csv").string());
      write_log_header(log);
      res.best_checkpoint = (opt.out_dir / "best.ckpt").string();
      res.last_checkpoint = (opt.out_dir / "last.ckpt").string();
    }
    const auto& c = rc_.train;
    for (int e = 0; e < c.epochs; ++e) {
      const auto t0 = std::chrono::steady_clock::now();
      EpochLog el;
      el.epoch = e;
      const auto batches = it_.epoch(e);
      for (const auto& b : batches) {
        const auto l = step(b, e);
        el.loss_total += l.total;
        el.loss_box += l.box;
        el.loss_cls += l.cls;
        el.loss_dfl += l.dfl;
      }
      const double n = static_cast<double>(batches.size());
      el.loss_total /= n;
      el.loss_box /= n;
      el.loss_cls /= n;
      el.loss_dfl /= n;
      const bool last = e + 1 == c.epochs;
      if (last || (c.eval_interval > 0 && (e + 1) % c.eval_interval == 0)) {
        const auto m = evaluate();
        el.map50 = m.map50;
        el.map50_95 = m.map50_95;
        if (m.map50_95 > res.best_map50_95) {
          res.best_map50_95 = m.map50_95;
          res.best_epoch = e;
          if (!res.best_checkpoint.empty()) save_checkpoint(model_, res.best_checkpoint);
        }
      }
      el.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (log) {
        write_log_row(log, el);
        log.flush();
      }
      if (opt.on_epoch) opt.on_epoch(el);
      res.epochs.push_back(el);
    }
    if (!res.last_checkpoint.empty()) save_checkpoint(model_, res.last_checkpoint);
    return res;
  }

 private:
  Model<T>& model_;
  RunConfig rc_;
  Dataset& train_;
  Dataset* val_;
  BatchIterator<T> it_;
  SGD<T> opt_;
  LossParams lp_;
  long step_ = 0;
};

}  // namespace slyolo
