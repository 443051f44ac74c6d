#pragma once

#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "slyolo/blocks.hpp"

namespace slyolo {

enum class NeckKind { PAN, BiFPN, HEPAN };
enum class BlockFamily { C3, C2f, C2fDCB };
enum class Downsampler { ConvStride2, SCDown };

inline const char* to_string(NeckKind k) {
  switch (k) {
    case NeckKind::PAN: return "pan";
    case NeckKind::BiFPN: return "bifpn";
    case NeckKind::HEPAN: return "hepan";
  }
  return "?";
}
inline const char* to_string(BlockFamily k) {
  switch (k) {
    case BlockFamily::C3: return "c3";
    case BlockFamily::C2f: return "c2f";
    case BlockFamily::C2fDCB: return "c2fdcb";
  }
  return "?";
}
inline const char* to_string(Downsampler k) { return k == Downsampler::SCDown ? "scdown" : "conv"; }

inline NeckKind parse_neck(const std::string& s) {
  if (s == "pan") return NeckKind::PAN;
  if (s == "bifpn") return NeckKind::BiFPN;
  if (s == "hepan") return NeckKind::HEPAN;
  throw ConfigError("unknown neck '" + s + "' (expected pan|bifpn|hepan)");
}
inline BlockFamily parse_block(const std::string& s) {
  if (s == "c3") return BlockFamily::C3;
  if (s == "c2f") return BlockFamily::C2f;
  if (s == "c2fdcb") return BlockFamily::C2fDCB;
  throw ConfigError("unknown block '" + s + "' (expected c3|c2f|c2fdcb)");
}
inline Downsampler parse_down(const std::string& s) {
  if (s == "conv") return Downsampler::ConvStride2;
  if (s == "scdown") return Downsampler::SCDown;
  throw ConfigError("unknown down '" + s + "' (expected conv|scdown)");
}

struct ModelConfig {
  NeckKind neck = NeckKind::HEPAN;
  BlockFamily block = BlockFamily::C2fDCB;
  Downsampler down = Downsampler::SCDown;
  bool p2 = true;
  double width = 0.5;
  double depth = 0.33;
  int max_channels = 1024;
  int nc = 10;
  int reg_max = 16;
  double bn_eps = 1e-3;
  double bn_momentum = 0.03;

  void validate() const {
    if (!(width > 0 && width <= 1)) throw ConfigError("width must be in (0, 1]");
    if (!(depth > 0 && depth <= 1)) throw ConfigError("depth must be in (0, 1]");
    if (max_channels < 1) throw ConfigError("max_channels must be positive");
    if (nc < 1) throw ConfigError("nc must be positive");
    if (reg_max < 1) throw ConfigError("reg_max must be positive");
    if (!(bn_eps > 0)) throw ConfigError("bn_eps must be positive");
    if (!(bn_momentum > 0 && bn_momentum <= 1)) throw ConfigError("bn_momentum must be in (0, 1]");
  }

  /// Baseline width -> actual channels: nearest multiple of 8, at least 8.
  int channels(int base) const {
    const double c = std::min(base, max_channels) * width;
    return std::max(8, static_cast<int>(std::lround(c / 8.0)) * 8);
  }
  int repeats(int base) const { return std::max(1, static_cast<int>(std::ceil(base * depth - 1e-9))); }

  BuildOptions build_options() const { return {bn_eps, bn_momentum}; }
  std::string name() const {
    return std::string(to_string(neck)) + (p2 ? "+p2" : "") + "/" + to_string(block) + "/" + to_string(down);
  }
};

/// All 3 x 3 x 2 x 2 architecture combinations at the given multipliers.
inline std::vector<ModelConfig> config_matrix(const ModelConfig& base = {}) {
  std::vector<ModelConfig> out;
  for (NeckKind n : {NeckKind::PAN, NeckKind::BiFPN, NeckKind::HEPAN})
    for (BlockFamily b : {BlockFamily::C3, BlockFamily::C2f, BlockFamily::C2fDCB})
      for (Downsampler d : {Downsampler::ConvStride2, Downsampler::SCDown})
        for (bool p2 : {false, true}) {
          ModelConfig c = base;
          c.neck = n;
          c.block = b;
          c.down = d;
          c.p2 = p2;
          out.push_back(c);
        }
  return out;
}

struct FeatureLevel {
  std::string name;
  int stride;
};

inline std::vector<FeatureLevel> feature_levels(bool p2) {
  std::vector<FeatureLevel> v;
  if (p2) v.push_back({"P2", 4});
  v.push_back({"P3", 8});
  v.push_back({"P4", 16});
  v.push_back({"P5", 32});
  return v;
}

/// Per-level head output: box distribution logits (4*reg_max) and class logits (nc).
template <typename T>
struct LevelOutput {
  Tensor<T> box;
  Tensor<T> cls;
  int stride = 0;
};

template <typename T>
struct RawPrediction {
  std::vector<LevelOutput<T>> levels;
  int nc = 0;
  int reg_max = 0;

  int batch() const { return levels.empty() ? 0 : levels[0].cls.batch(); }
  std::size_t cells() const {
    std::size_t n = 0;
    for (const auto& l : levels) n += l.cls.plane_size();
    return n;
  }
};

template <typename T>
class DetectHead {
 public:
  DetectHead(const std::vector<int>& channels, const std::vector<int>& strides, int nc, int reg_max,
             BuildContext& bc)
      : strides_(strides), nc_(nc), reg_max_(reg_max) {
    const int c2 = std::max({16, channels[0] / 4, 4 * reg_max});
    const int c3 = std::max(channels[0], std::min(nc, 100));
    for (std::size_t i = 0; i < channels.size(); ++i) {
      box_.push_back(make_branch(channels[i], c2, 4 * reg_max, bc));
      cls_.push_back(make_branch(channels[i], c3, nc, bc));
    }
    reset_bias(640);
  }

  int levels() const { return static_cast<int>(box_.size()); }
  int nc() const { return nc_; }
  int reg_max() const { return reg_max_; }
  const std::vector<int>& strides() const { return strides_; }

  /// Box logits 1.0, class logits log(5 / nc / cells) so initial class probabilities are small.
  void reset_bias(int image_size) {
    for (std::size_t i = 0; i < box_.size(); ++i) {
      auto& bb = box_[i].out->bias().value;
      std::fill(bb.begin(), bb.end(), T(1));
      const double cells = std::pow(static_cast<double>(image_size) / strides_[i], 2);
      auto& cb = cls_[i].out->bias().value;
      std::fill(cb.begin(), cb.end(), static_cast<T>(std::log(5.0 / nc_ / cells)));
    }
  }

  RawPrediction<T> forward(const std::vector<const Tensor<T>*>& feats, const Context& ctx) {
    if (static_cast<int>(feats.size()) != levels()) throw ConfigError("detect head level count mismatch");
    RawPrediction<T> out;
    out.nc = nc_;
    out.reg_max = reg_max_;
    for (int i = 0; i < levels(); ++i)
      out.levels.push_back({run(box_[i], *feats[i], ctx), run(cls_[i], *feats[i], ctx), strides_[i]});
    return out;
  }

  std::vector<Tensor<T>> backward(const RawPrediction<T>& grad) {
    std::vector<Tensor<T>> d;
    for (int i = 0; i < levels(); ++i) {
      Tensor<T> g = back(box_[i], grad.levels[i].box);
      g += back(cls_[i], grad.levels[i].cls);
      d.push_back(std::move(g));
    }
    return d;
  }

  void visit(const std::string& prefix, const ParamFn<T>& fn) {
    for (int i = 0; i < levels(); ++i) {
      visit_branch(box_[i], detail::join(prefix, "cv2." + std::to_string(i)), fn);
      visit_branch(cls_[i], detail::join(prefix, "cv3." + std::to_string(i)), fn);
    }
  }

  void fuse() {
    for (auto* v : {&box_, &cls_})
      for (auto& b : *v) {
        b.a->fuse();
        b.b->fuse();
        b.out->fuse();
      }
  }

  void audit(std::vector<AuditRow>& rows, const std::string& prefix, const std::vector<TensorSpec>& in) const {
    for (int i = 0; i < levels(); ++i) {
      audit_branch(box_[i], rows, detail::join(prefix, "cv2." + std::to_string(i)), in[i]);
      audit_branch(cls_[i], rows, detail::join(prefix, "cv3." + std::to_string(i)), in[i]);
    }
  }

  std::vector<TensorSpec> output_specs(const std::vector<TensorSpec>& in, bool cls) const {
    std::vector<TensorSpec> out;
    for (int i = 0; i < levels(); ++i) {
      const auto& b = cls ? cls_[i] : box_[i];
      out.push_back(b.out->output_spec(b.b->output_spec(b.a->output_spec(in[i]))));
    }
    return out;
  }

 private:
  struct Branch {
    std::unique_ptr<ConvBNAct<T>> a, b;
    std::unique_ptr<Conv2d<T>> out;
  };

  static Branch make_branch(int cin, int hidden, int cout, BuildContext& bc) {
    Branch br;
    br.a = std::make_unique<ConvBNAct<T>>(cin, hidden, 3, 1, 1, true, bc);
    br.b = std::make_unique<ConvBNAct<T>>(hidden, hidden, 3, 1, 1, true, bc);
    br.out = std::make_unique<Conv2d<T>>(hidden, cout, 1, bc);
    return br;
  }
  static Tensor<T> run(Branch& b, const Tensor<T>& x, const Context& ctx) {
    return b.out->forward(b.b->forward(b.a->forward(x, ctx), ctx), ctx);
  }
  static Tensor<T> back(Branch& b, const Tensor<T>& g) { return b.a->backward(b.b->backward(b.out->backward(g))); }
  static void visit_branch(Branch& b, const std::string& p, const ParamFn<T>& fn) {
    b.a->visit(p + ".0", fn);
    b.b->visit(p + ".1", fn);
    b.out->visit(p + ".2", fn);
  }
  static void audit_branch(const Branch& b, std::vector<AuditRow>& rows, const std::string& p, const TensorSpec& in) {
    b.a->audit(rows, p + ".0", in);
    const TensorSpec s1 = b.a->output_spec(in);
    b.b->audit(rows, p + ".1", s1);
    b.out->audit(rows, p + ".2", b.b->output_spec(s1));
  }

  std::vector<int> strides_;
  int nc_, reg_max_;
  std::vector<Branch> box_, cls_;
};

template <typename T>
struct GraphNode {
  std::string section;
  int index = 0;
  std::unique_ptr<Module<T>> module;
  std::vector<int> inputs;  // node ids; -1 is the input image

  std::string path() const { return section + "." + std::to_string(index); }
};

template <typename T>
struct NamedParam {
  std::string name;
  Param<T>* param;
};

/// Complete detector: backbone and neck as a node graph, followed by the detection head.
template <typename T>
class Model {
 public:
  static constexpr int kInput = -1;

  explicit Model(const ModelConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    cfg_.validate();
    BuildContext bc(seed, cfg_.build_options());
    const auto taps = build_backbone(bc);
    const auto outs = build_neck(taps, bc);
    build_head(outs, bc);
  }

  const ModelConfig& config() const { return cfg_; }
  bool fused() const { return fused_; }
  const std::vector<GraphNode<T>>& nodes() const { return nodes_; }
  GraphNode<T>& node(const std::string& path) {
    for (auto& n : nodes_)
      if (n.path() == path) return n;
    throw ConfigError("no node " + path);
  }
  DetectHead<T>& head() { return *head_; }
  const std::vector<int>& taps() const { return taps_; }
  const std::vector<int>& neck_outputs() const { return outputs_; }

  /// Shape of every node output for one input image spec.
  std::vector<TensorSpec> node_specs(const TensorSpec& in) const {
    check_input(in);
    std::vector<TensorSpec> specs;
    for (const auto& n : nodes_) {
      std::vector<TensorSpec> ins;
      for (int i : n.inputs) ins.push_back(i == kInput ? in : specs[i]);
      specs.push_back(n.module->output_spec_n(ins));
    }
    return specs;
  }

  std::vector<TensorSpec> feature_specs(const TensorSpec& in) const {
    const auto specs = node_specs(in);
    std::vector<TensorSpec> out;
    for (int i : outputs_) out.push_back(specs[i]);
    return out;
  }

  RawPrediction<T> forward(const Tensor<T>& x, const Context& ctx = {}) {
    check_input(x.spec());
    std::vector<Tensor<T>> outs(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      auto& n = nodes_[i];
      std::vector<const Tensor<T>*> ins;
      for (int j : n.inputs) ins.push_back(j == kInput ? &x : &outs[j]);
      outs[i] = n.module->forward_n(ins, ctx);
      for (int j : n.inputs)
        if (j != kInput && last_use_[j] == static_cast<int>(i)) outs[j] = Tensor<T>();
    }
    std::vector<const Tensor<T>*> feats;
    for (int i : outputs_) feats.push_back(&outs[i]);
    return head_->forward(feats, ctx);
  }

  /// Accumulates parameter gradients for the last recorded forward.
  void backward(const RawPrediction<T>& grad) {
    auto dfeat = head_->backward(grad);
    std::vector<Tensor<T>> grads(nodes_.size());
    for (std::size_t k = 0; k < outputs_.size(); ++k) accumulate(grads[outputs_[k]], std::move(dfeat[k]));
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      if (grads[i].empty()) throw StateError("node " + nodes_[i].path() + " received no gradient");
      auto dxs = nodes_[i].module->backward_n(grads[i]);
      grads[i] = Tensor<T>();
      for (std::size_t j = 0; j < dxs.size(); ++j)
        if (nodes_[i].inputs[j] != kInput) accumulate(grads[nodes_[i].inputs[j]], std::move(dxs[j]));
    }
  }

  void visit(const ParamFn<T>& fn) {
    for (auto& n : nodes_) n.module->visit(n.path(), fn);
    head_->visit("head", fn);
  }

  std::vector<NamedParam<T>> parameters(bool include_buffers = false) {
    std::vector<NamedParam<T>> out;
    visit([&](const std::string& name, Param<T>& p) {
      if (include_buffers || !p.is_buffer()) out.push_back({name, &p});
    });
    return out;
  }

  void zero_grad() {
    visit([](const std::string&, Param<T>& p) { p.zero_grad(); });
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    visit([&](const std::string&, Param<T>& p) {
      if (!p.is_buffer()) n += p.numel();
    });
    return n;
  }

  /// Folds every batch norm and merges every RepVGGDW; the model becomes inference-only.
  void fuse() {
    if (fused_) throw StateError("model is already fused");
    for (auto& n : nodes_) n.module->fuse();
    head_->fuse();
    fused_ = true;
  }
  void mark_fused() { fused_ = true; }

  std::vector<AuditRow> audit(const TensorSpec& in) const {
    const auto specs = node_specs(in);
    std::vector<AuditRow> rows;
    for (const auto& n : nodes_) {
      std::vector<TensorSpec> ins;
      for (int i : n.inputs) ins.push_back(i == kInput ? in : specs[i]);
      n.module->audit_n(rows, n.path(), ins);
    }
    std::vector<TensorSpec> feats;
    for (int i : outputs_) feats.push_back(specs[i]);
    head_->audit(rows, "head", feats);
    return rows;
  }

 private:
  struct Taps {
    int b2, b3, b4, b5;
  };

  int add(const std::string& section, std::unique_ptr<Module<T>> m, std::vector<int> inputs) {
    int idx = 0;
    for (const auto& n : nodes_)
      if (n.section == section) ++idx;
    const int id = static_cast<int>(nodes_.size());
    for (int i : inputs)
      if (i != kInput) last_use_[i] = id;
    nodes_.push_back({section, idx, std::move(m), std::move(inputs)});
    last_use_.push_back(std::numeric_limits<int>::max());
    return id;
  }

  std::unique_ptr<Layer<T>> family_block(int c1, int c2, int n, bool shortcut, BuildContext& bc) const {
    switch (cfg_.block) {
      case BlockFamily::C3: return std::make_unique<C3<T>>(c1, c2, n, shortcut, bc);
      case BlockFamily::C2f: return std::make_unique<C2fBlock<T>>(LayerKind::C2f, c1, c2, n, shortcut, bc);
      case BlockFamily::C2fDCB: return std::make_unique<C2fBlock<T>>(LayerKind::C2fDCB, c1, c2, n, shortcut, bc);
    }
    throw ConfigError("unknown block family");
  }

  std::unique_ptr<Layer<T>> downsampler(int c1, int c2, BuildContext& bc) const {
    if (cfg_.down == Downsampler::SCDown) return std::make_unique<SCDown<T>>(c1, c2, 3, 2, bc);
    return std::make_unique<ConvBNAct<T>>(c1, c2, 3, 2, 1, true, bc);
  }

  std::unique_ptr<Layer<T>> conv(int c1, int c2, int k, int s, BuildContext& bc) const {
    return std::make_unique<ConvBNAct<T>>(c1, c2, k, s, 1, true, bc);
  }

  std::unique_ptr<Layer<T>> c2f(int c1, int c2, int n, bool shortcut, BuildContext& bc) const {
    return std::make_unique<C2fBlock<T>>(LayerKind::C2f, c1, c2, n, shortcut, bc);
  }

  Taps build_backbone(BuildContext& bc) {
    const auto& c = cfg_;
    const int c0 = c.channels(64), c1 = c.channels(128), c2 = c.channels(256), c3 = c.channels(512),
              c4 = c.channels(1024);
    const std::string s = "backbone";
    int x = add(s, conv(3, c0, 3, 2, bc), {kInput});
    x = add(s, conv(c0, c1, 3, 2, bc), {x});
    const int b2 = add(s, c2f(c1, c1, c.repeats(3), true, bc), {x});
    x = add(s, conv(c1, c2, 3, 2, bc), {b2});
    const int b3 = add(s, c2f(c2, c2, c.repeats(6), true, bc), {x});
    x = add(s, conv(c2, c3, 3, 2, bc), {b3});
    const int b4 = add(s, c2f(c3, c3, c.repeats(6), true, bc), {x});
    x = add(s, downsampler(c3, c4, bc), {b4});
    x = add(s, family_block(c4, c4, c.repeats(3), true, bc), {x});
    const int b5 = add(s, std::make_unique<SPPF<T>>(c4, c4, 5, bc), {x});
    taps_ = {b2, b3, b4, b5};
    return {b2, b3, b4, b5};
  }

  int fuse_node(std::vector<int> inputs, const std::string& s) {
    if (cfg_.neck == NeckKind::PAN || cfg_.neck == NeckKind::HEPAN)
      return add(s, std::make_unique<Concat<T>>(), std::move(inputs));
    const int n = static_cast<int>(inputs.size());
    return add(s, std::make_unique<WeightedConcat<T>>(n), std::move(inputs));
  }

  std::vector<int> build_neck(const Taps& t, BuildContext& bc) {
    const auto& c = cfg_;
    const int w2 = c.channels(128), w3 = c.channels(256), w4 = c.channels(512), w5 = c.channels(1024);
    const int n = c.repeats(3);
    const bool bifpn = c.neck == NeckKind::BiFPN, hepan = c.neck == NeckKind::HEPAN;
    const std::string s = "neck";

    int lat4 = t.b4, lat3 = t.b3;
    if (hepan) {
      lat4 = add(s, conv(w4, w4, 1, 1, bc), {t.b4});
      lat3 = add(s, conv(w3, w3, 1, 1, bc), {t.b3});
    }

    // top-down
    int x = add(s, std::make_unique<Upsample<T>>(w5), {t.b5});
    x = fuse_node({x, lat4}, s);
    const int t4 = add(s, c2f(w5 + w4, w4, n, false, bc), {x});
    x = add(s, std::make_unique<Upsample<T>>(w4), {t4});
    x = fuse_node({x, lat3}, s);
    const int t3 = add(s, c2f(w4 + w3, w3, n, false, bc), {x});

    std::vector<int> outs;
    int n3 = t3;
    if (c.p2) {
      x = add(s, std::make_unique<Upsample<T>>(w3), {t3});
      x = fuse_node({x, t.b2}, s);
      const int t2 = add(s, c2f(w3 + w2, w2, n, false, bc), {x});
      outs.push_back(t2);
      // bottom-up P3
      x = add(s, conv(w2, w2, 3, 2, bc), {t2});
      std::vector<int> in{x, t3};
      if (bifpn) in.push_back(t.b3);
      x = fuse_node(in, s);
      n3 = add(s, c2f(w2 + w3 + (bifpn ? w3 : 0), w3, n, false, bc), {x});
      if (hepan) n3 = add(s, std::make_unique<Add<T>>(), {n3, t.b3});
    }
    outs.push_back(n3);

    // bottom-up P4
    x = add(s, conv(w3, w3, 3, 2, bc), {n3});
    std::vector<int> in4{x, t4};
    if (bifpn) in4.push_back(t.b4);
    x = fuse_node(in4, s);
    int n4 = add(s, c2f(w3 + w4 + (bifpn ? w4 : 0), w4, n, false, bc), {x});
    if (hepan) {
      n4 = add(s, family_block(w4, w4, n, false, bc), {n4});
      n4 = add(s, std::make_unique<Add<T>>(), {n4, t.b4});
    }
    outs.push_back(n4);

    // bottom-up P5
    x = add(s, conv(w4, w4, 3, 2, bc), {n4});
    x = fuse_node({x, t.b5}, s);
    outs.push_back(add(s, c2f(w4 + w5, w5, n, false, bc), {x}));
    for (int o : outs) last_use_[o] = std::numeric_limits<int>::max();
    outputs_ = outs;
    return outs;
  }

  void build_head(const std::vector<int>& outs, BuildContext& bc) {
    std::vector<int> ch, strides;
    const auto levels = feature_levels(cfg_.p2);
    const int widths[] = {cfg_.channels(128), cfg_.channels(256), cfg_.channels(512), cfg_.channels(1024)};
    for (std::size_t i = 0; i < outs.size(); ++i) {
      strides.push_back(levels[i].stride);
      ch.push_back(widths[(cfg_.p2 ? 0 : 1) + i]);
    }
    head_ = std::make_unique<DetectHead<T>>(ch, strides, cfg_.nc, cfg_.reg_max, bc);
  }

  void check_input(const TensorSpec& in) const {
    validate(in);
    if (in.channels != 3) throw ShapeError("model input must have 3 channels, got " + std::to_string(in.channels));
    if (in.height % 32 != 0 || in.width % 32 != 0)
      throw ShapeError("model input " + to_string(in) + " must be divisible by 32");
  }

  static void accumulate(Tensor<T>& dst, Tensor<T>&& g) {
    if (dst.empty())
      dst = std::move(g);
    else
      dst += g;
  }

  ModelConfig cfg_;
  std::vector<GraphNode<T>> nodes_;
  std::vector<int> last_use_;
  std::vector<int> taps_, outputs_;
  std::unique_ptr<DetectHead<T>> head_;
  bool fused_ = false;
};

}  // namespace slyolo
