#pragma once

#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "slyolo/model.hpp"

namespace slyolo {

namespace detail {
inline void require_positive(std::initializer_list<std::int64_t> xs, const char* fn) {
  for (auto x : xs)
    if (x < 1) throw DomainError(std::string(fn) + ": arguments must be >= 1");
}
}  // namespace detail

/// k^2 * c_in * c_out, bias excluded.
inline std::int64_t params_standard_conv(std::int64_t k, std::int64_t c_in, std::int64_t c_out) {
  detail::require_positive({k, c_in, c_out}, "params_standard_conv");
  return k * k * c_in * c_out;
}

/// Multiply-accumulates at output resolution h x w.
inline std::int64_t flops_standard_conv(std::int64_t k, std::int64_t c_in, std::int64_t c_out, std::int64_t h,
                                        std::int64_t w) {
  detail::require_positive({k, c_in, c_out, h, w}, "flops_standard_conv");
  return k * k * c_in * c_out * h * w;
}

/// Depthwise k_dw x k_dw over c_in, then pointwise k_pw x k_pw c_in -> c_out.
inline std::int64_t params_dsconv(std::int64_t k_dw, std::int64_t k_pw, std::int64_t c_in, std::int64_t c_out) {
  detail::require_positive({k_dw, k_pw, c_in, c_out}, "params_dsconv");
  return k_dw * k_dw * c_in + k_pw * k_pw * c_in * c_out;
}

inline std::int64_t flops_dsconv(std::int64_t k_dw, std::int64_t k_pw, std::int64_t c_in, std::int64_t c_out,
                                 std::int64_t h, std::int64_t w) {
  detail::require_positive({k_dw, k_pw, c_in, c_out, h, w}, "flops_dsconv");
  return params_dsconv(k_dw, k_pw, c_in, c_out) * h * w;
}

struct ComplexityRow {
  std::string path;
  std::string kind;
  std::int64_t weight_params = 0;
  std::int64_t bias_params = 0;
  std::int64_t bn_params = 0;
  std::int64_t params = 0;
  std::int64_t introspected = 0;
  std::int64_t macs = 0;
  std::int64_t flops = 0;
  std::int64_t fused_params = 0;
  std::int64_t fused_macs = 0;
};

struct ComplexityReport {
  std::string model;
  TensorSpec input;
  std::vector<ComplexityRow> rows;
  std::int64_t params = 0;
  std::int64_t introspected = 0;
  std::int64_t macs = 0;
  std::int64_t flops = 0;
  std::int64_t fused_params = 0;
  std::int64_t fused_flops = 0;

  double params_millions() const { return params / 1e6; }
  double gflops() const { return flops / 1e9; }
  double fused_gflops() const { return fused_flops / 1e9; }
  bool exact() const {
    for (const auto& r : rows)
      if (r.params != r.introspected) return false;
    return params == introspected;
  }

  std::string to_text(bool with_rows = true) const {
    std::ostringstream os;
    if (with_rows) {
      os << std::left << std::setw(34) << "layer" << std::setw(16) << "kind" << std::right << std::setw(11)
         << "params" << std::setw(15) << "MACs" << "\n";
      for (const auto& r : rows)
        os << std::left << std::setw(34) << r.path << std::setw(16) << r.kind << std::right << std::setw(11)
           << r.params << std::setw(15) << r.macs << "\n";
    }
    os << std::fixed << std::setprecision(2);
    os << model << " @ " << input.height << "x" << input.width << ": " << params_millions() << "M params, "
       << std::setprecision(1) << gflops() << " GFLOPs (fused: " << std::setprecision(2) << fused_params / 1e6
       << "M, " << std::setprecision(1) << fused_gflops() << " GFLOPs)\n";
    return os.str();
  }

  nlohmann::json to_json(bool with_rows = true) const {
    nlohmann::json j;
    j["model"] = model;
    j["input"] = {input.channels, input.height, input.width};
    if (with_rows) {
      j["rows"] = nlohmann::json::array();
      for (const auto& r : rows)
        j["rows"].push_back({{"path", r.path},
                             {"kind", r.kind},
                             {"P", r.params},
                             {"P_weight", r.weight_params},
                             {"P_bias", r.bias_params},
                             {"P_bn", r.bn_params},
                             {"P_introspected", r.introspected},
                             {"F_mac", r.macs},
                             {"F_flop", r.flops}});
    }
    j["totals"] = {{"params", params},
                   {"params_millions", params_millions()},
                   {"gflops", gflops()},
                   {"macs", macs},
                   {"fused_params", fused_params},
                   {"fused_gflops", fused_gflops()}};
    return j;
  }
};

inline bool known_audit_kind(const std::string& k) {
  return k == "ConvBNAct" || k == "DWConvBN" || k == "Conv2d" || k == "RepVGGDW" || k == "WeightedConcat";
}

template <typename T>
ComplexityReport audit_model(const Model<T>& model, const TensorSpec& input = {3, 640, 640}) {
  ComplexityReport rep;
  rep.model = model.config().name();
  rep.input = input;
  for (const auto& a : model.audit(input)) {
    if (!known_audit_kind(a.kind)) throw AuditError("unknown layer kind '" + a.kind + "' at " + a.path);
    ComplexityRow r;
    r.path = a.path;
    r.kind = a.kind;
    r.weight_params = a.weight_params;
    r.bias_params = a.bias_params;
    r.bn_params = a.bn_params;
    r.params = a.params();
    r.introspected = a.introspected;
    r.macs = a.macs;
    r.flops = 2 * a.macs;
    r.fused_params = a.fused_params;
    r.fused_macs = a.fused_macs;
    rep.params += r.params;
    rep.introspected += r.introspected;
    rep.macs += r.macs;
    rep.flops += r.flops;
    rep.fused_params += r.fused_params;
    rep.fused_flops += 2 * r.fused_macs;
    rep.rows.push_back(std::move(r));
  }
  return rep;
}

}  // namespace slyolo
