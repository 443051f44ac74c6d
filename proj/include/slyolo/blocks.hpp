#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "slyolo/module.hpp"

namespace slyolo {

enum class BlockMode { train, deploy };

template <typename T>
struct DepthwiseBranch {
  int kernel = 3;
  Param<T> weight;  // [C, 1, k, k]
  BatchNormParams<T> bn;
};

template <typename T>
struct FusedDepthwise {
  Param<T> weight;  // [C, 1, 3, 3]
  Param<T> bias;    // [C]
};

/// Parameters of a RepVGGDW block in either training (three branches) or deploy (one kernel) form.
template <typename T>
struct RepVGGDWState {
  int channels = 0;
  DepthwiseBranch<T> branch_3x3;
  DepthwiseBranch<T> branch_1x1;
  std::optional<BatchNormParams<T>> identity_bn;
  std::optional<FusedDepthwise<T>> fused;
  BlockMode mode = BlockMode::train;
};

/// Merges the three branches of a training-mode state into one depthwise 3x3 kernel with bias.
template <typename T>
RepVGGDWState<T> fuse_repvggdw(const RepVGGDWState<T>& s) {
  if (s.mode != BlockMode::train) throw StateError("RepVGGDW state is already fused");
  const int c = s.channels;
  auto [w3, b3] = fuse_conv_bn<T>(s.branch_3x3.weight.value, s.branch_3x3.bn);
  auto [w1, b1] = fuse_conv_bn<T>(s.branch_1x1.weight.value, s.branch_1x1.bn);
  FusedDepthwise<T> f{Param<T>({c, 1, 3, 3}, false, true), Param<T>({c}, false)};
  for (int ch = 0; ch < c; ++ch) {
    double center = w1[ch];
    double bias = static_cast<double>(b3[ch]) + b1[ch];
    if (s.identity_bn) {
      const auto& bn = *s.identity_bn;
      const double denom = static_cast<double>(bn.running_var.value[ch]) + bn.eps;
      if (!(denom > 0)) throw NumericError("fuse_repvggdw: variance + eps must be positive");
      const double scale = bn.weight.value[ch] / std::sqrt(denom);
      center += scale;
      bias += bn.bias.value[ch] - bn.running_mean.value[ch] * scale;
    }
    for (int i = 0; i < 9; ++i) f.weight.value[ch * 9 + i] = w3[ch * 9 + i];
    f.weight.value[ch * 9 + 4] = static_cast<T>(f.weight.value[ch * 9 + 4] + center);
    f.bias.value[ch] = static_cast<T>(bias);
  }
  RepVGGDWState<T> out;
  out.channels = c;
  out.branch_3x3.kernel = 3;
  out.branch_1x1.kernel = 1;
  out.fused = std::move(f);
  out.mode = BlockMode::deploy;
  return out;
}

/// Depthwise 3x3 + depthwise 1x1 + identity branches (each batch-normalized), summed, then SiLU.
template <typename T>
class RepVGGDW : public Layer<T> {
 public:
  RepVGGDW(int channels, BuildContext& bc, bool identity = true) {
    s_.channels = channels;
    s_.branch_3x3 = {3, Param<T>({channels, 1, 3, 3}, false, true), BatchNormParams<T>(channels, bc.options)};
    s_.branch_1x1 = {1, Param<T>({channels, 1, 1, 1}, false, true), BatchNormParams<T>(channels, bc.options)};
    detail::init_uniform(s_.branch_3x3.weight.value, 1.0 / 3.0, bc.rng);
    detail::init_uniform(s_.branch_1x1.weight.value, 1.0, bc.rng);
    if (identity) s_.identity_bn = BatchNormParams<T>(channels, bc.options);
  }

  LayerKind kind() const override { return LayerKind::RepVGGDW; }
  LayerSpec layer_spec() const override {
    return {LayerKind::RepVGGDW, s_.channels, s_.channels, 3, 1, s_.channels, 1, false};
  }
  bool fused() const override { return s_.mode == BlockMode::deploy; }
  RepVGGDWState<T>& state() { return s_; }
  const RepVGGDWState<T>& state() const { return s_; }

  TensorSpec output_spec(const TensorSpec& in) const override {
    validate(in);
    if (in.channels != s_.channels) throw ConfigError("RepVGGDW channel mismatch");
    return in;
  }

  Tensor<T> forward(const Tensor<T>& x, const Context& ctx) override {
    output_spec(x.spec());
    const int c = s_.channels;
    Tensor<T> sum;
    if (s_.mode == BlockMode::deploy) {
      sum = ops::conv2d_forward(x, s_.fused->weight.value.data(), s_.fused->bias.value.data(), geom(3));
    } else {
      sum = s_.branch_3x3.bn.forward(ops::conv2d_forward<T>(x, s_.branch_3x3.weight.value.data(), nullptr, geom(3)),
                                     ctx, ctx.record ? &cache3_ : nullptr);
      sum += s_.branch_1x1.bn.forward(ops::conv2d_forward<T>(x, s_.branch_1x1.weight.value.data(), nullptr, geom(1)),
                                      ctx, ctx.record ? &cache1_ : nullptr);
      if (s_.identity_bn) sum += s_.identity_bn->forward(x, ctx, ctx.record ? &cache_id_ : nullptr);
    }
    (void)c;
    if (ctx.record) {
      input_ = x;
      pre_ = sum;
    }
    ops::silu_inplace(sum);
    return sum;
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    if (input_.empty()) throw StateError("RepVGGDW::backward without recorded forward");
    Tensor<T> g = ops::silu_backward(pre_, dy);
    Tensor<T> dx;
    if (s_.mode == BlockMode::deploy) {
      dx = ops::conv2d_backward(input_, s_.fused->weight.value.data(), g, geom(3), s_.fused->weight.grad.data(),
                                s_.fused->bias.grad.data());
    } else {
      Tensor<T> g3 = s_.branch_3x3.bn.backward(g, cache3_);
      dx = ops::conv2d_backward<T>(input_, s_.branch_3x3.weight.value.data(), g3, geom(3),
                                   s_.branch_3x3.weight.grad.data(), nullptr);
      Tensor<T> g1 = s_.branch_1x1.bn.backward(g, cache1_);
      dx += ops::conv2d_backward<T>(input_, s_.branch_1x1.weight.value.data(), g1, geom(1),
                                    s_.branch_1x1.weight.grad.data(), nullptr);
      if (s_.identity_bn) dx += s_.identity_bn->backward(g, cache_id_);
    }
    input_ = Tensor<T>();
    pre_ = Tensor<T>();
    return dx;
  }

  void visit(const std::string& prefix, const ParamFn<T>& fn) override {
    if (s_.mode == BlockMode::deploy) {
      fn(detail::join(prefix, "conv.weight"), s_.fused->weight);
      fn(detail::join(prefix, "conv.bias"), s_.fused->bias);
      return;
    }
    fn(detail::join(prefix, "dw3.weight"), s_.branch_3x3.weight);
    s_.branch_3x3.bn.visit(detail::join(prefix, "dw3.bn"), fn);
    fn(detail::join(prefix, "dw1.weight"), s_.branch_1x1.weight);
    s_.branch_1x1.bn.visit(detail::join(prefix, "dw1.bn"), fn);
    if (s_.identity_bn) s_.identity_bn->visit(detail::join(prefix, "id.bn"), fn);
  }

  void fuse() override { s_ = fuse_repvggdw(s_); }

  void audit(std::vector<AuditRow>& rows, const std::string& path, const TensorSpec& in) const override {
    const TensorSpec out = output_spec(in);
    const std::int64_t c = s_.channels, hw = std::int64_t(out.height) * out.width;
    AuditRow r;
    r.path = path;
    r.kind = "RepVGGDW";
    if (s_.mode == BlockMode::deploy) {
      r.weight_params = 9 * c;
      r.bias_params = c;
      r.introspected = static_cast<std::int64_t>(s_.fused->weight.numel() + s_.fused->bias.numel());
    } else {
      r.weight_params = 9 * c + c;
      r.bn_params = 2 * c * (s_.identity_bn ? 3 : 2);
      r.introspected = static_cast<std::int64_t>(
          s_.branch_3x3.weight.numel() + s_.branch_1x1.weight.numel() + s_.branch_3x3.bn.weight.numel() +
          s_.branch_3x3.bn.bias.numel() + s_.branch_1x1.bn.weight.numel() + s_.branch_1x1.bn.bias.numel() +
          (s_.identity_bn ? s_.identity_bn->weight.numel() + s_.identity_bn->bias.numel() : 0));
    }
    r.macs = r.weight_params * hw;
    r.fused_params = 9 * c + c;
    r.fused_macs = 9 * c * hw;
    rows.push_back(std::move(r));
  }

 private:
  ops::ConvGeometry geom(int k) const { return {s_.channels, s_.channels, k, 1, s_.channels}; }

  RepVGGDWState<T> s_;
  Tensor<T> input_, pre_;
  ops::BatchNormCache<T> cache3_, cache1_, cache_id_;
};

/// Two stacked ConvBNAct with optional residual (YOLOv8 bottleneck).
template <typename T>
class Bottleneck : public Layer<T> {
 public:
  Bottleneck(int c1, int c2, bool shortcut, int k1, int k2, double e, BuildContext& bc)
      : c1_(c1), c2_(c2), add_(shortcut && c1 == c2) {
    const int hidden = static_cast<int>(c2 * e);
    cv1_ = std::make_unique<ConvBNAct<T>>(c1, hidden, k1, 1, 1, true, bc);
    cv2_ = std::make_unique<ConvBNAct<T>>(hidden, c2, k2, 1, 1, true, bc);
  }

  LayerKind kind() const override { return LayerKind::Bottleneck; }
  LayerSpec layer_spec() const override { return {LayerKind::Bottleneck, c1_, c2_, 3, 1, 1, 1, add_}; }
  TensorSpec output_spec(const TensorSpec& in) const override { return cv2_->output_spec(cv1_->output_spec(in)); }

  Tensor<T> forward(const Tensor<T>& x, const Context& ctx) override {
    Tensor<T> y = cv2_->forward(cv1_->forward(x, ctx), ctx);
    if (add_) y += x;
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy) override {
    Tensor<T> dx = cv1_->backward(cv2_->backward(dy));
    if (add_) dx += dy;
    return dx;
  }
  void visit(const std::string& prefix, const ParamFn<T>& fn) override {
    cv1_->visit(detail::join(prefix, "cv1"), fn);
    cv2_->visit(detail::join(prefix, "cv2"), fn);
  }
  void fuse() override {
    cv1_->fuse();
    cv2_->fuse();
  }
  bool fused() const override { return cv1_->fused(); }
  void audit(std::vector<AuditRow>& rows, const std::string& path, const TensorSpec& in) const override {
    cv1_->audit(rows, detail::join(path, "cv1"), in);
    cv2_->audit(rows, detail::join(path, "cv2"), cv1_->output_spec(in));
  }

 private:
  int c1_, c2_;
  bool add_;
  std::unique_ptr<ConvBNAct<T>> cv1_, cv2_;
};

/// 3x3 conv -> depthwise 3x3 (bn, no act) -> pointwise 1x1 -> RepVGGDW, with optional residual.
template <typename T>
class DCB : public Layer<T> {
 public:
  DCB(int channels, bool shortcut, BuildContext& bc) : c_(channels), shortcut_(shortcut) {
    conv_ = std::make_unique<ConvBNAct<T>>(channels, channels, 3, 1, 1, true, bc);
    dw_ = std::make_unique<ConvBNAct<T>>(channels, channels, 3, 1, channels, false, bc);
    pw_ = std::make_unique<ConvBNAct<T>>(channels, channels, 1, 1, 1, true, bc);
    rep_ = std::make_unique<RepVGGDW<T>>(channels, bc);
  }

  LayerKind kind() const override { return LayerKind::DCB; }
  LayerSpec layer_spec() const override { return {LayerKind::DCB, c_, c_, 3, 1, 1, 1, shortcut_}; }
  bool shortcut() const { return shortcut_; }
  ConvBNAct<T>& conv() { return *conv_; }
  ConvBNAct<T>& depthwise() { return *dw_; }
  ConvBNAct<T>& pointwise() { return *pw_; }
  RepVGGDW<T>& rep() { return *rep_; }

  TensorSpec output_spec(const TensorSpec& in) const override {
    validate(in);
    if (in.channels != c_)
      throw ConfigError("DCB expects " + std::to_string(c_) + " channels, got " + std::to_string(in.channels));
    return in;
  }

  Tensor<T> forward(const Tensor<T>& x, const Context& ctx) override {
    output_spec(x.spec());
    Tensor<T> y = rep_->forward(pw_->forward(dw_->forward(conv_->forward(x, ctx), ctx), ctx), ctx);
    if (shortcut_) y += x;
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy) override {
    Tensor<T> dx = conv_->backward(dw_->backward(pw_->backward(rep_->backward(dy))));
    if (shortcut_) dx += dy;
    return dx;
  }
  void visit(const std::string& prefix, const ParamFn<T>& fn) override {
    conv_->visit(detail::join(prefix, "cv1"), fn);
    dw_->visit(detail::join(prefix, "dw"), fn);
    pw_->visit(detail::join(prefix, "pw"), fn);
    rep_->visit(detail::join(prefix, "rep"), fn);
  }
  void fuse() override {
    conv_->fuse();
    dw_->fuse();
    pw_->fuse();
    rep_->fuse();
  }
  bool fused() const override { return conv_->fused(); }
  void audit(std::vector<AuditRow>& rows, const std::string& path, const TensorSpec& in) const override {
    output_spec(in);
    conv_->audit(rows, detail::join(path, "cv1"), in);
    dw_->audit(rows, detail::join(path, "dw"), in);
    pw_->audit(rows, detail::join(path, "pw"), in);
    rep_->audit(rows, detail::join(path, "rep"), in);
  }

 private:
  int c_;
  bool shortcut_;
  std::unique_ptr<ConvBNAct<T>> conv_, dw_, pw_;
  std::unique_ptr<RepVGGDW<T>> rep_;
};

/// C2f and C2fDCB: 1x1 split conv, n chained inner blocks, concat of all partials, 1x1 merge conv.
template <typename T>
class C2fBlock : public Layer<T> {
 public:
  C2fBlock(LayerKind kind, int c1, int c2, int n, bool shortcut, BuildContext& bc)
      : kind_(kind), c1_(c1), c2_(c2), n_(n), shortcut_(shortcut), hidden_(static_cast<int>(c2 * 0.5)) {
    if (kind != LayerKind::C2f && kind != LayerKind::C2fDCB) throw ConfigError("C2fBlock kind must be C2f or C2fDCB");
    if (n < 1) throw ConfigError("C2f repeat must be positive");
    cv1_ = std::make_unique<ConvBNAct<T>>(c1, 2 * hidden_, 1, 1, 1, true, bc);
    for (int i = 0; i < n; ++i) {
      if (kind == LayerKind::C2f)
        inner_.push_back(std::make_unique<Bottleneck<T>>(hidden_, hidden_, shortcut, 3, 3, 1.0, bc));
      else
        inner_.push_back(std::make_unique<DCB<T>>(hidden_, shortcut, bc));
    }
    cv2_ = std::make_unique<ConvBNAct<T>>((2 + n) * hidden_, c2, 1, 1, 1, true, bc);
  }

  LayerKind kind() const override { return kind_; }
  LayerSpec layer_spec() const override { return {kind_, c1_, c2_, 1, 1, 1, n_, shortcut_}; }
  int hidden_channels() const { return hidden_; }
  int concat_width() const { return (2 + n_) * hidden_; }
  Layer<T>& inner(int i) { return *inner_.at(i); }

  TensorSpec output_spec(const TensorSpec& in) const override { return cv2_->output_spec(
      {concat_width(), cv1_->output_spec(in).height, cv1_->output_spec(in).width}); }

  Tensor<T> forward(const Tensor<T>& x, const Context& ctx) override {
    Tensor<T> y = cv1_->forward(x, ctx);
    std::vector<Tensor<T>> parts;
    parts.reserve(2 + n_);
    parts.push_back(slice_channels(y, 0, hidden_));
    parts.push_back(slice_channels(y, hidden_, hidden_));
    for (auto& m : inner_) parts.push_back(m->forward(parts.back(), ctx));
    std::vector<const Tensor<T>*> ptrs;
    for (const auto& p : parts) ptrs.push_back(&p);
    return cv2_->forward(concat_channels<T>(ptrs), ctx);
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    Tensor<T> dcat = cv2_->backward(dy);
    std::vector<int> widths(2 + n_, hidden_);
    std::vector<Tensor<T>> d = split_channels(dcat, widths);
    Tensor<T> run = std::move(d[n_ + 1]);
    for (int i = n_ - 1; i >= 0; --i) {
      Tensor<T> g = inner_[i]->backward(run);
      g += d[i + 1];
      run = std::move(g);
    }
    const Tensor<T>* halves[2] = {&d[0], &run};
    return cv1_->backward(concat_channels<T>(halves));
  }

  void visit(const std::string& prefix, const ParamFn<T>& fn) override {
    cv1_->visit(detail::join(prefix, "cv1"), fn);
    for (int i = 0; i < n_; ++i) inner_[i]->visit(detail::join(prefix, "m." + std::to_string(i)), fn);
    cv2_->visit(detail::join(prefix, "cv2"), fn);
  }
  void fuse() override {
    cv1_->fuse();
    for (auto& m : inner_) m->fuse();
    cv2_->fuse();
  }
  bool fused() const override { return cv1_->fused(); }
  void audit(std::vector<AuditRow>& rows, const std::string& path, const TensorSpec& in) const override {
    const TensorSpec y = cv1_->output_spec(in);
    cv1_->audit(rows, detail::join(path, "cv1"), in);
    const TensorSpec half{hidden_, y.height, y.width};
    for (int i = 0; i < n_; ++i) inner_[i]->audit(rows, detail::join(path, "m." + std::to_string(i)), half);
    cv2_->audit(rows, detail::join(path, "cv2"), {concat_width(), y.height, y.width});
  }

 private:
  LayerKind kind_;
  int c1_, c2_, n_;
  bool shortcut_;
  int hidden_;
  std::unique_ptr<ConvBNAct<T>> cv1_, cv2_;
  std::vector<std::unique_ptr<Layer<T>>> inner_;
};

template <typename T>
class C3 : public Layer<T> {
 public:
  C3(int c1, int c2, int n, bool shortcut, BuildContext& bc)
      : c1_(c1), c2_(c2), n_(n), shortcut_(shortcut), hidden_(static_cast<int>(c2 * 0.5)) {
    if (n < 1) throw ConfigError("C3 repeat must be positive");
    cv1_ = std::make_unique<ConvBNAct<T>>(c1, hidden_, 1, 1, 1, true, bc);
    cv2_ = std::make_unique<ConvBNAct<T>>(c1, hidden_, 1, 1, 1, true, bc);
    cv3_ = std::make_unique<ConvBNAct<T>>(2 * hidden_, c2, 1, 1, 1, true, bc);
    for (int i = 0; i < n; ++i)
      inner_.push_back(std::make_unique<Bottleneck<T>>(hidden_, hidden_, shortcut, 1, 3, 1.0, bc));
  }

  LayerKind kind() const override { return LayerKind::C3; }
  LayerSpec layer_spec() const override { return {LayerKind::C3, c1_, c2_, 1, 1, 1, n_, shortcut_}; }
  TensorSpec output_spec(const TensorSpec& in) const override {
    const TensorSpec y = cv1_->output_spec(in);
    return cv3_->output_spec({2 * hidden_, y.height, y.width});
  }

  Tensor<T> forward(const Tensor<T>& x, const Context& ctx) override {
    Tensor<T> a = cv1_->forward(x, ctx);
    for (auto& m : inner_) a = m->forward(a, ctx);
    Tensor<T> b = cv2_->forward(x, ctx);
    const Tensor<T>* parts[2] = {&a, &b};
    return cv3_->forward(concat_channels<T>(parts), ctx);
  }
  Tensor<T> backward(const Tensor<T>& dy) override {
    Tensor<T> dcat = cv3_->backward(dy);
    const int widths[2] = {hidden_, hidden_};
    auto d = split_channels<T>(dcat, widths);
    Tensor<T> da = std::move(d[0]);
    for (int i = n_ - 1; i >= 0; --i) da = inner_[i]->backward(da);
    Tensor<T> dx = cv1_->backward(da);
    dx += cv2_->backward(d[1]);
    return dx;
  }
  void visit(const std::string& prefix, const ParamFn<T>& fn) override {
    cv1_->visit(detail::join(prefix, "cv1"), fn);
    cv2_->visit(detail::join(prefix, "cv2"), fn);
    cv3_->visit(detail::join(prefix, "cv3"), fn);
    for (int i = 0; i < n_; ++i) inner_[i]->visit(detail::join(prefix, "m." + std::to_string(i)), fn);
  }
  void fuse() override {
    cv1_->fuse();
    cv2_->fuse();
    cv3_->fuse();
    for (auto& m : inner_) m->fuse();
  }
  bool fused() const override { return cv1_->fused(); }
  void audit(std::vector<AuditRow>& rows, const std::string& path, const TensorSpec& in) const override {
    const TensorSpec y = cv1_->output_spec(in);
    cv1_->audit(rows, detail::join(path, "cv1"), in);
    cv2_->audit(rows, detail::join(path, "cv2"), in);
    cv3_->audit(rows, detail::join(path, "cv3"), {2 * hidden_, y.height, y.width});
    for (int i = 0; i < n_; ++i) inner_[i]->audit(rows, detail::join(path, "m." + std::to_string(i)), y);
  }

 private:
  int c1_, c2_, n_;
  bool shortcut_;
  int hidden_;
  std::unique_ptr<ConvBNAct<T>> cv1_, cv2_, cv3_;
  std::vector<std::unique_ptr<Bottleneck<T>>> inner_;
};

/// Pointwise c1->c2 (bn + act), then depthwise k x k stride s (bn, no act).
template <typename T>
class SCDown : public Layer<T> {
 public:
  SCDown(int c1, int c2, int k, int s, BuildContext& bc) : c1_(c1), c2_(c2), k_(k), s_(s) {
    LayerSpec{LayerKind::SCDown, c1, c2, k, s, 1, 1, false}.validate();
    pw_ = std::make_unique<ConvBNAct<T>>(c1, c2, 1, 1, 1, true, bc);
    dw_ = std::make_unique<ConvBNAct<T>>(c2, c2, k, s, c2, false, bc);
  }

  LayerKind kind() const override { return LayerKind::SCDown; }
  LayerSpec layer_spec() const override { return {LayerKind::SCDown, c1_, c2_, k_, s_, 1, 1, false}; }
  ConvBNAct<T>& pointwise() { return *pw_; }
  ConvBNAct<T>& depthwise() { return *dw_; }

  TensorSpec output_spec(const TensorSpec& in) const override { return dw_->output_spec(pw_->output_spec(in)); }
  Tensor<T> forward(const Tensor<T>& x, const Context& ctx) override {
    output_spec(x.spec());
    return dw_->forward(pw_->forward(x, ctx), ctx);
  }
  Tensor<T> backward(const Tensor<T>& dy) override { return pw_->backward(dw_->backward(dy)); }
  void visit(const std::string& prefix, const ParamFn<T>& fn) override {
    pw_->visit(detail::join(prefix, "cv1"), fn);
    dw_->visit(detail::join(prefix, "cv2"), fn);
  }
  void fuse() override {
    pw_->fuse();
    dw_->fuse();
  }
  bool fused() const override { return pw_->fused(); }
  void audit(std::vector<AuditRow>& rows, const std::string& path, const TensorSpec& in) const override {
    pw_->audit(rows, detail::join(path, "cv1"), in);
    dw_->audit(rows, detail::join(path, "cv2"), pw_->output_spec(in));
  }

 private:
  int c1_, c2_, k_, s_;
  std::unique_ptr<ConvBNAct<T>> pw_, dw_;
};

/// Spatial pyramid pooling (fast): 1x1 reduce, three chained k x k max pools, concat, 1x1 merge.
template <typename T>
class SPPF : public Layer<T> {
 public:
  SPPF(int c1, int c2, int k, BuildContext& bc) : c1_(c1), c2_(c2), k_(k), hidden_(c1 / 2) {
    cv1_ = std::make_unique<ConvBNAct<T>>(c1, hidden_, 1, 1, 1, true, bc);
    cv2_ = std::make_unique<ConvBNAct<T>>(4 * hidden_, c2, 1, 1, 1, true, bc);
  }

  LayerKind kind() const override { return LayerKind::SPPF; }
  LayerSpec layer_spec() const override { return {LayerKind::SPPF, c1_, c2_, k_, 1, 1, 1, false}; }
  TensorSpec output_spec(const TensorSpec& in) const override {
    const TensorSpec y = cv1_->output_spec(in);
    return cv2_->output_spec({4 * hidden_, y.height, y.width});
  }

  Tensor<T> forward(const Tensor<T>& x, const Context& ctx) override {
    Tensor<T> a = cv1_->forward(x, ctx);
    Tensor<T> p1 = ops::maxpool_same(a, k_, ctx.record ? &idx_[0] : nullptr);
    Tensor<T> p2 = ops::maxpool_same(p1, k_, ctx.record ? &idx_[1] : nullptr);
    Tensor<T> p3 = ops::maxpool_same(p2, k_, ctx.record ? &idx_[2] : nullptr);
    const Tensor<T>* parts[4] = {&a, &p1, &p2, &p3};
    return cv2_->forward(concat_channels<T>(parts), ctx);
  }
  Tensor<T> backward(const Tensor<T>& dy) override {
    Tensor<T> dcat = cv2_->backward(dy);
    const int widths[4] = {hidden_, hidden_, hidden_, hidden_};
    auto d = split_channels<T>(dcat, widths);
    Tensor<T> g3 = d[3];
    Tensor<T> g2 = ops::maxpool_backward(g3, idx_[2]);
    g2 += d[2];
    Tensor<T> g1 = ops::maxpool_backward(g2, idx_[1]);
    g1 += d[1];
    Tensor<T> g0 = ops::maxpool_backward(g1, idx_[0]);
    g0 += d[0];
    return cv1_->backward(g0);
  }
  void visit(const std::string& prefix, const ParamFn<T>& fn) override {
    cv1_->visit(detail::join(prefix, "cv1"), fn);
    cv2_->visit(detail::join(prefix, "cv2"), fn);
  }
  void fuse() override {
    cv1_->fuse();
    cv2_->fuse();
  }
  bool fused() const override { return cv1_->fused(); }
  void audit(std::vector<AuditRow>& rows, const std::string& path, const TensorSpec& in) const override {
    const TensorSpec y = cv1_->output_spec(in);
    cv1_->audit(rows, detail::join(path, "cv1"), in);
    cv2_->audit(rows, detail::join(path, "cv2"), {4 * hidden_, y.height, y.width});
  }

 private:
  int c1_, c2_, k_, hidden_;
  std::unique_ptr<ConvBNAct<T>> cv1_, cv2_;
  std::vector<std::int32_t> idx_[3];
};

template <typename T>
class Upsample : public Layer<T> {
 public:
  explicit Upsample(int channels) : c_(channels) {}
  LayerKind kind() const override { return LayerKind::Upsample; }
  LayerSpec layer_spec() const override { return {LayerKind::Upsample, c_, c_, 1, 1, 1, 1, false}; }
  TensorSpec output_spec(const TensorSpec& in) const override {
    validate(in);
    return {in.channels, in.height * 2, in.width * 2};
  }
  Tensor<T> forward(const Tensor<T>& x, const Context&) override { return ops::upsample_nearest2x(x); }
  Tensor<T> backward(const Tensor<T>& dy) override { return ops::upsample_nearest2x_backward(dy); }
  void audit(std::vector<AuditRow>&, const std::string&, const TensorSpec& in) const override { output_spec(in); }

 private:
  int c_;
};

namespace detail {
inline TensorSpec concat_spec(std::span<const TensorSpec> in) {
  if (in.empty()) throw ShapeError("concat of zero inputs");
  TensorSpec out{0, in[0].height, in[0].width};
  for (const auto& s : in) {
    validate(s);
    if (s.height != out.height || s.width != out.width)
      throw ShapeError("concat: unequal spatial dims " + to_string(in[0]) + " vs " + to_string(s));
    out.channels += s.channels;
  }
  return out;
}
}  // namespace detail

template <typename T>
class Concat : public Module<T> {
 public:
  LayerKind kind() const override { return LayerKind::Concat; }
  LayerSpec layer_spec() const override { return {LayerKind::Concat, 1, 1, 1, 1, 1, 1, false}; }
  TensorSpec output_spec_n(std::span<const TensorSpec> in) const override { return detail::concat_spec(in); }
  Tensor<T> forward_n(std::span<const Tensor<T>* const> xs, const Context& ctx) override {
    if (ctx.record) {
      widths_.clear();
      for (const auto* x : xs) widths_.push_back(x->channels());
    }
    return concat_channels<T>(xs);
  }
  std::vector<Tensor<T>> backward_n(const Tensor<T>& dy) override { return split_channels<T>(dy, widths_); }
  void audit_n(std::vector<AuditRow>&, const std::string&, std::span<const TensorSpec> in) const override {
    detail::concat_spec(in);
  }

 private:
  std::vector<int> widths_;
};

/// Element-wise sum of equally shaped inputs (residual edge).
template <typename T>
class Add : public Module<T> {
 public:
  LayerKind kind() const override { return LayerKind::Add; }
  LayerSpec layer_spec() const override { return {LayerKind::Add, 1, 1, 1, 1, 1, 1, false}; }
  TensorSpec output_spec_n(std::span<const TensorSpec> in) const override {
    if (in.empty()) throw ShapeError("add of zero inputs");
    for (const auto& s : in)
      if (!(s == in[0])) throw ShapeError("add: shape mismatch " + to_string(in[0]) + " vs " + to_string(s));
    return in[0];
  }
  Tensor<T> forward_n(std::span<const Tensor<T>* const> xs, const Context& ctx) override {
    std::vector<TensorSpec> specs;
    for (const auto* x : xs) specs.push_back(x->spec());
    output_spec_n(specs);
    if (ctx.record) count_ = xs.size();
    Tensor<T> y = *xs[0];
    for (std::size_t i = 1; i < xs.size(); ++i) y += *xs[i];
    return y;
  }
  std::vector<Tensor<T>> backward_n(const Tensor<T>& dy) override { return std::vector<Tensor<T>>(count_, dy); }
  void audit_n(std::vector<AuditRow>&, const std::string&, std::span<const TensorSpec> in) const override {
    output_spec_n(in);
  }

 private:
  std::size_t count_ = 0;
};

/// Concatenation with learnable non-negative per-edge weights w_i = softplus(r_i),
/// each input scaled by w_i / (sum_j w_j + eps).
template <typename T>
class WeightedConcat : public Module<T> {
 public:
  explicit WeightedConcat(int inputs, double eps = 1e-4) : raw_({inputs}, false), eps_(eps) {
    // softplus(log(e - 1)) == 1
    std::fill(raw_.value.begin(), raw_.value.end(), static_cast<T>(std::log(std::exp(1.0) - 1.0)));
  }

  LayerKind kind() const override { return LayerKind::WeightedConcat; }
  LayerSpec layer_spec() const override { return {LayerKind::WeightedConcat, 1, 1, 1, 1, 1, 1, false}; }
  Param<T>& raw_weights() { return raw_; }
  double eps() const { return eps_; }

  std::vector<double> edge_weights() const {
    std::vector<double> w;
    for (T r : raw_.value) w.push_back(softplus(r));
    return w;
  }
  std::vector<double> normalized_weights() const {
    auto w = edge_weights();
    double s = eps_;
    for (double v : w) s += v;
    for (double& v : w) v /= s;
    return w;
  }

  TensorSpec output_spec_n(std::span<const TensorSpec> in) const override {
    if (in.size() != raw_.numel()) throw ConfigError("WeightedConcat input count mismatch");
    return detail::concat_spec(in);
  }

  Tensor<T> forward_n(std::span<const Tensor<T>* const> xs, const Context& ctx) override {
    if (xs.size() != raw_.numel()) throw ConfigError("WeightedConcat input count mismatch");
    const auto nw = normalized_weights();
    std::vector<Tensor<T>> scaled;
    scaled.reserve(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
      Tensor<T> t = *xs[i];
      for (auto& v : t.values()) v = static_cast<T>(v * nw[i]);
      scaled.push_back(std::move(t));
    }
    if (ctx.record) {
      inputs_.assign(xs.size(), Tensor<T>());
      for (std::size_t i = 0; i < xs.size(); ++i) inputs_[i] = *xs[i];
    }
    std::vector<const Tensor<T>*> ptrs;
    for (const auto& t : scaled) ptrs.push_back(&t);
    return concat_channels<T>(ptrs);
  }

  std::vector<Tensor<T>> backward_n(const Tensor<T>& dy) override {
    if (inputs_.empty()) throw StateError("WeightedConcat::backward without recorded forward");
    std::vector<int> widths;
    for (const auto& x : inputs_) widths.push_back(x.channels());
    auto parts = split_channels<T>(dy, widths);
    const auto w = edge_weights();
    double s = eps_;
    for (double v : w) s += v;
    std::vector<double> gnorm(parts.size(), 0.0);
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const T* g = parts[i].data();
      const T* x = inputs_[i].data();
      double acc = 0;
      for (std::size_t j = 0; j < parts[i].size(); ++j) acc += static_cast<double>(g[j]) * x[j];
      gnorm[i] = acc;
      const T scale = static_cast<T>(w[i] / s);
      for (auto& v : parts[i].values()) v *= scale;
    }
    double weighted = 0;
    for (std::size_t i = 0; i < w.size(); ++i) weighted += gnorm[i] * w[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double dw = gnorm[j] / s - weighted / (s * s);
      raw_.grad[j] += static_cast<T>(dw * ops::sigmoid(static_cast<double>(raw_.value[j])));
    }
    inputs_.clear();
    return parts;
  }

  void visit(const std::string& prefix, const ParamFn<T>& fn) override { fn(detail::join(prefix, "w"), raw_); }

  void audit_n(std::vector<AuditRow>& rows, const std::string& path, std::span<const TensorSpec> in) const override {
    output_spec_n(in);
    AuditRow r;
    r.path = path;
    r.kind = "WeightedConcat";
    r.weight_params = static_cast<std::int64_t>(raw_.numel());
    r.introspected = static_cast<std::int64_t>(raw_.numel());
    r.fused_params = r.weight_params;
    rows.push_back(std::move(r));
  }

 private:
  static double softplus(double r) { return r > 20 ? r : std::log1p(std::exp(r)); }

  Param<T> raw_;
  double eps_;
  std::vector<Tensor<T>> inputs_;
};

/// Builds a single-input block from its declarative description.
template <typename T>
std::unique_ptr<Layer<T>> make_layer(const LayerSpec& s, BuildContext& bc) {
  s.validate();
  switch (s.kind) {
    case LayerKind::ConvBNAct:
      return std::make_unique<ConvBNAct<T>>(s.in_channels, s.out_channels, s.kernel, s.stride, s.groups, true, bc);
    case LayerKind::C3:
      return std::make_unique<C3<T>>(s.in_channels, s.out_channels, s.repeat, s.shortcut, bc);
    case LayerKind::C2f:
    case LayerKind::C2fDCB:
      return std::make_unique<C2fBlock<T>>(s.kind, s.in_channels, s.out_channels, s.repeat, s.shortcut, bc);
    case LayerKind::DCB:
      if (s.in_channels != s.out_channels) throw ConfigError("DCB is channel-preserving");
      return std::make_unique<DCB<T>>(s.in_channels, s.shortcut, bc);
    case LayerKind::RepVGGDW:
      return std::make_unique<RepVGGDW<T>>(s.in_channels, bc);
    case LayerKind::SCDown:
      return std::make_unique<SCDown<T>>(s.in_channels, s.out_channels, s.kernel, s.stride, bc);
    case LayerKind::SPPF:
      return std::make_unique<SPPF<T>>(s.in_channels, s.out_channels, s.kernel, bc);
    case LayerKind::Upsample:
      return std::make_unique<Upsample<T>>(s.in_channels);
    case LayerKind::Conv2d:
      return std::make_unique<Conv2d<T>>(s.in_channels, s.out_channels, s.kernel, bc);
    case LayerKind::Bottleneck:
      return std::make_unique<Bottleneck<T>>(s.in_channels, s.out_channels, s.shortcut, 3, 3, 1.0, bc);
    default:
      throw ConfigError(std::string("make_layer: ") + kind_name(s.kind) + " is not a single-input block");
  }
}

}  // namespace slyolo
