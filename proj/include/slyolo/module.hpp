#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "slyolo/ops.hpp"
#include "slyolo/tensor.hpp"

namespace slyolo {

/// Learnable tensor (or non-learnable buffer when grad is empty).
template <typename T>
struct Param {
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool decay = false;

  Param() = default;
  Param(std::vector<int> s, bool buffer, bool weight_decay = false) : shape(std::move(s)), decay(weight_decay) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    value.assign(n, T(0));
    if (!buffer) grad.assign(n, T(0));
  }

  std::size_t numel() const { return value.size(); }
  bool is_buffer() const { return grad.empty() && !value.empty(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

template <typename T>
using ParamFn = std::function<void(const std::string& name, Param<T>& p)>;

struct Context {
  bool train = false;   // batch statistics in batch norm, running-stat updates
  bool record = false;  // keep activations for backward
};

enum class LayerKind {
  ConvBNAct,
  C3,
  C2f,
  C2fDCB,
  DCB,
  RepVGGDW,
  SCDown,
  SPPF,
  Upsample,
  Concat,
  DetectHead,
  Conv2d,
  Bottleneck,
  WeightedConcat,
  Add,
};

inline const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::ConvBNAct: return "ConvBNAct";
    case LayerKind::C3: return "C3";
    case LayerKind::C2f: return "C2f";
    case LayerKind::C2fDCB: return "C2fDCB";
    case LayerKind::DCB: return "DCB";
    case LayerKind::RepVGGDW: return "RepVGGDW";
    case LayerKind::SCDown: return "SCDown";
    case LayerKind::SPPF: return "SPPF";
    case LayerKind::Upsample: return "Upsample";
    case LayerKind::Concat: return "Concat";
    case LayerKind::DetectHead: return "DetectHead";
    case LayerKind::Conv2d: return "Conv2d";
    case LayerKind::Bottleneck: return "Bottleneck";
    case LayerKind::WeightedConcat: return "WeightedConcat";
    case LayerKind::Add: return "Add";
  }
  return "?";
}

/// Declarative description of one block.
struct LayerSpec {
  LayerKind kind = LayerKind::ConvBNAct;
  int in_channels = 1;
  int out_channels = 1;
  int kernel = 1;
  int stride = 1;
  int groups = 1;
  int repeat = 1;
  bool shortcut = false;

  void validate() const {
    if (in_channels < 1 || out_channels < 1) throw ConfigError("layer channels must be positive");
    if (kernel != 1 && kernel != 3 && kernel != 5 && kernel != 7)
      throw ConfigError("kernel must be one of 1, 3, 5, 7 (got " + std::to_string(kernel) + ")");
    if (stride < 1) throw ConfigError("stride must be positive");
    if (repeat < 1) throw ConfigError("repeat must be positive");
    if (groups < 1 || in_channels % groups != 0 || out_channels % groups != 0)
      throw ConfigError("groups must divide in and out channels");
    if (kind == LayerKind::RepVGGDW && (groups != in_channels || in_channels != out_channels))
      throw ConfigError("RepVGGDW is depthwise: groups == in_channels == out_channels");
  }
};

/// One parameterized leaf (conv, with its bias/bn) in a complexity audit.
struct AuditRow {
  std::string path;
  std::string kind;
  std::int64_t weight_params = 0;  // bias excluded
  std::int64_t bias_params = 0;
  std::int64_t bn_params = 0;      // learnable scale + shift
  std::int64_t introspected = 0;   // element count of materialized learnable tensors
  std::int64_t macs = 0;
  std::int64_t fused_params = 0;   // after batch-norm folding / branch merging
  std::int64_t fused_macs = 0;

  std::int64_t params() const { return weight_params + bias_params + bn_params; }
};

/// Graph-level module: any number of inputs, one output.
template <typename T>
class Module {
 public:
  virtual ~Module() = default;
  virtual LayerKind kind() const = 0;
  virtual LayerSpec layer_spec() const = 0;
  virtual TensorSpec output_spec_n(std::span<const TensorSpec> in) const = 0;
  virtual Tensor<T> forward_n(std::span<const Tensor<T>* const> xs, const Context& ctx) = 0;
  virtual std::vector<Tensor<T>> backward_n(const Tensor<T>& dy) = 0;
  virtual void audit_n(std::vector<AuditRow>& rows, const std::string& path, std::span<const TensorSpec> in) const {
    (void)rows;
    (void)in;
    throw AuditError(std::string("no complexity rule for layer kind ") + kind_name(kind()) + " at " + path);
  }
  virtual void visit(const std::string& prefix, const ParamFn<T>& fn) {
    (void)prefix;
    (void)fn;
  }
  virtual void fuse() {}
  virtual bool fused() const { return false; }
};

/// Single-input module.
template <typename T>
class Layer : public Module<T> {
 public:
  virtual TensorSpec output_spec(const TensorSpec& in) const = 0;
  virtual Tensor<T> forward(const Tensor<T>& x, const Context& ctx) = 0;
  virtual Tensor<T> backward(const Tensor<T>& dy) = 0;
  virtual void audit(std::vector<AuditRow>& rows, const std::string& path, const TensorSpec& in) const = 0;

  TensorSpec output_spec_n(std::span<const TensorSpec> in) const final {
    if (in.size() != 1) throw ConfigError(std::string(kind_name(this->kind())) + " takes one input");
    return output_spec(in[0]);
  }
  Tensor<T> forward_n(std::span<const Tensor<T>* const> xs, const Context& ctx) final {
    if (xs.size() != 1) throw ConfigError(std::string(kind_name(this->kind())) + " takes one input");
    return forward(*xs[0], ctx);
  }
  std::vector<Tensor<T>> backward_n(const Tensor<T>& dy) final {
    std::vector<Tensor<T>> out;
    out.push_back(backward(dy));
    return out;
  }
  void audit_n(std::vector<AuditRow>& rows, const std::string& path, std::span<const TensorSpec> in) const final {
    audit(rows, path, in[0]);
  }
};

struct BuildOptions {
  double bn_eps = 1e-3;
  double bn_momentum = 0.03;
};

/// Construction state threaded through every block constructor.
struct BuildContext {
  Rng rng;
  BuildOptions options;

  explicit BuildContext(std::uint64_t seed = 0, BuildOptions opts = {}) : rng(seed), options(opts) {}
};

namespace detail {

template <typename T>
void init_uniform(std::vector<T>& v, double bound, Rng& rng) {
  std::uniform_real_distribution<double> d(-bound, bound);
  for (auto& x : v) x = static_cast<T>(d(rng));
}

inline std::string join(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

}  // namespace detail

template <typename T>
struct BatchNormParams {
  Param<T> weight;        // gamma
  Param<T> bias;          // beta
  Param<T> running_mean;  // buffer
  Param<T> running_var;   // buffer
  double eps = 1e-3;
  double momentum = 0.03;

  BatchNormParams() = default;
  BatchNormParams(int channels, const BuildOptions& opt)
      : weight({channels}, false), bias({channels}, false), running_mean({channels}, true),
        running_var({channels}, true), eps(opt.bn_eps), momentum(opt.bn_momentum) {
    std::fill(weight.value.begin(), weight.value.end(), T(1));
    std::fill(running_var.value.begin(), running_var.value.end(), T(1));
  }

  int channels() const { return static_cast<int>(weight.numel()); }

  void visit(const std::string& prefix, const ParamFn<T>& fn) {
    fn(detail::join(prefix, "weight"), weight);
    fn(detail::join(prefix, "bias"), bias);
    fn(detail::join(prefix, "running_mean"), running_mean);
    fn(detail::join(prefix, "running_var"), running_var);
  }

  Tensor<T> forward(const Tensor<T>& x, const Context& ctx, ops::BatchNormCache<T>* cache) {
    return ops::batchnorm_forward(x, weight.value.data(), bias.value.data(), running_mean.value.data(),
                                  running_var.value.data(), eps, momentum, ctx.train, cache);
  }

  Tensor<T> backward(const Tensor<T>& dy, const ops::BatchNormCache<T>& cache) {
    return ops::batchnorm_backward(dy, weight.value.data(), cache, weight.grad.data(), bias.grad.data());
  }
};

/// Folds inference-mode batch norm into the preceding convolution.
/// Weight layout [out][...]; returns (fused weights, fused bias).
template <typename T>
std::pair<std::vector<T>, std::vector<T>> fuse_conv_bn(std::span<const T> weights, const BatchNormParams<T>& bn,
                                                       std::span<const T> conv_bias = {}) {
  const int co = bn.channels();
  if (co == 0 || weights.size() % co != 0)
    throw ConfigError("fuse_conv_bn: bn channels do not match conv output channels");
  if (!conv_bias.empty() && static_cast<int>(conv_bias.size()) != co)
    throw ConfigError("fuse_conv_bn: bias size mismatch");
  const std::size_t per = weights.size() / co;
  std::vector<T> fw(weights.size()), fb(co);
  for (int c = 0; c < co; ++c) {
    const double denom = static_cast<double>(bn.running_var.value[c]) + bn.eps;
    if (!(denom > 0)) throw NumericError("fuse_conv_bn: variance + eps must be positive");
    const double scale = static_cast<double>(bn.weight.value[c]) / std::sqrt(denom);
    for (std::size_t i = 0; i < per; ++i) fw[c * per + i] = static_cast<T>(weights[c * per + i] * scale);
    const double b0 = conv_bias.empty() ? 0.0 : static_cast<double>(conv_bias[c]);
    fb[c] = static_cast<T>(bn.bias.value[c] + (b0 - bn.running_mean.value[c]) * scale);
  }
  return {std::move(fw), std::move(fb)};
}

/// Convolution -> batch norm -> optional SiLU. After fuse(), convolution with bias -> optional SiLU.
template <typename T>
class ConvBNAct : public Layer<T> {
 public:
  ConvBNAct(int cin, int cout, int kernel, int stride, int groups, bool act, BuildContext& bc)
      : geom_{cin, cout, kernel, stride, groups}, act_(act),
        weight_({cout, cin / groups, kernel, kernel}, false, true), bn_(cout, bc.options) {
    LayerSpec{LayerKind::ConvBNAct, cin, cout, kernel, stride, groups, 1, false}.validate();
    detail::init_uniform(weight_.value, 1.0 / std::sqrt(double(cin / groups) * kernel * kernel), bc.rng);
  }

  LayerKind kind() const override { return LayerKind::ConvBNAct; }
  LayerSpec layer_spec() const override {
    return {LayerKind::ConvBNAct, geom_.in_channels, geom_.out_channels, geom_.kernel, geom_.stride, geom_.groups, 1,
            false};
  }
  const ops::ConvGeometry& geometry() const { return geom_; }
  bool has_activation() const { return act_; }
  bool fused() const override { return fused_; }

  Param<T>& weight() { return weight_; }
  const Param<T>& weight() const { return weight_; }
  BatchNormParams<T>& bn() { return bn_; }
  const BatchNormParams<T>& bn() const { return bn_; }
  Param<T>& bias() { return bias_; }

  TensorSpec output_spec(const TensorSpec& in) const override { return ops::conv_output_spec(geom_, in); }

  Tensor<T> forward(const Tensor<T>& x, const Context& ctx) override {
    if (ctx.record) input_ = x;
    Tensor<T> z = ops::conv2d_forward(x, weight_.value.data(), fused_ ? bias_.value.data() : nullptr, geom_);
    if (!fused_) z = bn_.forward(z, ctx, ctx.record ? &bn_cache_ : nullptr);
    if (act_) {
      if (ctx.record) pre_ = z;
      ops::silu_inplace(z);
    }
    return z;
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    if (input_.empty()) throw StateError("ConvBNAct::backward without recorded forward");
    Tensor<T> g = act_ ? ops::silu_backward(pre_, dy) : dy;
    if (!fused_) g = bn_.backward(g, bn_cache_);
    Tensor<T> dx = ops::conv2d_backward(input_, weight_.value.data(), g, geom_, weight_.grad.data(),
                                        fused_ ? bias_.grad.data() : nullptr);
    input_ = Tensor<T>();
    pre_ = Tensor<T>();
    return dx;
  }

  void visit(const std::string& prefix, const ParamFn<T>& fn) override {
    fn(detail::join(prefix, "conv.weight"), weight_);
    if (fused_)
      fn(detail::join(prefix, "conv.bias"), bias_);
    else
      bn_.visit(detail::join(prefix, "bn"), fn);
  }

  void fuse() override {
    if (fused_) throw StateError("ConvBNAct already fused");
    auto [fw, fb] = fuse_conv_bn<T>(weight_.value, bn_);
    weight_.value = std::move(fw);
    bias_ = Param<T>({geom_.out_channels}, false);
    bias_.value = std::move(fb);
    bn_ = BatchNormParams<T>();
    fused_ = true;
  }

  void audit(std::vector<AuditRow>& rows, const std::string& path, const TensorSpec& in) const override {
    const TensorSpec out = output_spec(in);
    AuditRow r;
    r.path = path;
    r.kind = geom_.depthwise() && geom_.groups > 1 ? "DWConvBN" : "ConvBNAct";
    const std::int64_t k2 = std::int64_t(geom_.kernel) * geom_.kernel;
    r.weight_params = k2 * (geom_.in_channels / geom_.groups) * geom_.out_channels;
    r.bias_params = fused_ ? geom_.out_channels : 0;
    r.bn_params = fused_ ? 0 : 2 * geom_.out_channels;
    r.introspected = static_cast<std::int64_t>(weight_.numel() + bias_.numel() + bn_.weight.numel() +
                                               bn_.bias.numel());
    r.macs = r.weight_params * out.height * out.width;
    r.fused_params = r.weight_params + geom_.out_channels;
    r.fused_macs = r.macs;
    rows.push_back(std::move(r));
  }

 private:
  ops::ConvGeometry geom_;
  bool act_;
  bool fused_ = false;
  Param<T> weight_;
  Param<T> bias_;
  BatchNormParams<T> bn_;
  Tensor<T> input_, pre_;
  ops::BatchNormCache<T> bn_cache_;
};

/// Plain convolution with bias (detection-head output projections).
template <typename T>
class Conv2d : public Layer<T> {
 public:
  Conv2d(int cin, int cout, int kernel, BuildContext& bc)
      : geom_{cin, cout, kernel, 1, 1}, weight_({cout, cin, kernel, kernel}, false, true), bias_({cout}, false) {
    LayerSpec{LayerKind::Conv2d, cin, cout, kernel, 1, 1, 1, false}.validate();
    const double bound = 1.0 / std::sqrt(double(cin) * kernel * kernel);
    detail::init_uniform(weight_.value, bound, bc.rng);
    detail::init_uniform(bias_.value, bound, bc.rng);
  }

  LayerKind kind() const override { return LayerKind::Conv2d; }
  LayerSpec layer_spec() const override {
    return {LayerKind::Conv2d, geom_.in_channels, geom_.out_channels, geom_.kernel, 1, 1, 1, false};
  }
  Param<T>& weight() { return weight_; }
  Param<T>& bias() { return bias_; }

  TensorSpec output_spec(const TensorSpec& in) const override { return ops::conv_output_spec(geom_, in); }

  Tensor<T> forward(const Tensor<T>& x, const Context& ctx) override {
    if (ctx.record) input_ = x;
    return ops::conv2d_forward(x, weight_.value.data(), bias_.value.data(), geom_);
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    if (input_.empty()) throw StateError("Conv2d::backward without recorded forward");
    Tensor<T> dx = ops::conv2d_backward(input_, weight_.value.data(), dy, geom_, weight_.grad.data(),
                                        bias_.grad.data());
    input_ = Tensor<T>();
    return dx;
  }

  void visit(const std::string& prefix, const ParamFn<T>& fn) override {
    fn(detail::join(prefix, "weight"), weight_);
    fn(detail::join(prefix, "bias"), bias_);
  }

  void fuse() override { fused_ = true; }
  bool fused() const override { return fused_; }

  void audit(std::vector<AuditRow>& rows, const std::string& path, const TensorSpec& in) const override {
    const TensorSpec out = output_spec(in);
    AuditRow r;
    r.path = path;
    r.kind = "Conv2d";
    r.weight_params = std::int64_t(geom_.kernel) * geom_.kernel * geom_.in_channels * geom_.out_channels;
    r.bias_params = geom_.out_channels;
    r.introspected = static_cast<std::int64_t>(weight_.numel() + bias_.numel());
    r.macs = r.weight_params * out.height * out.width;
    r.fused_params = r.params();
    r.fused_macs = r.macs;
    rows.push_back(std::move(r));
  }

 private:
  ops::ConvGeometry geom_;
  Param<T> weight_, bias_;
  Tensor<T> input_;
  bool fused_ = false;
};

}  // namespace slyolo
