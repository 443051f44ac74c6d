#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "slyolo/model.hpp"

namespace slyolo {

struct TrainConfig {
  int epochs = 200;
  int batch_size = 8;
  int image_size = 128;
  double lr0 = 0.01;
  double lrf = 0.01;  // final lr = lr0 * lrf (cosine floor)
  double momentum = 0.937;
  double warmup_momentum = 0.8;
  double warmup_bias_lr = 0.1;
  double weight_decay = 5e-4;
  double warmup_epochs = 3;
  double box = 7.5;
  double cls = 0.5;
  double dfl = 1.5;
  double grad_clip = 10.0;  // max global gradient norm, 0 disables
  std::uint64_t seed = 7;
  bool augment = true;
  double flip = 0.5;
  double scale_jitter = 0.1;
  int eval_interval = 10;

  void validate() const {
    if (epochs < 1) throw ConfigError("train.epochs must be positive");
    if (batch_size < 1) throw ConfigError("train.batch_size must be positive");
    if (image_size < 32 || image_size % 32 != 0) throw ConfigError("train.image_size must be a multiple of 32");
    if (!(lr0 > 0)) throw ConfigError("train.lr0 must be positive");
    if (lrf < 0 || lrf > 1) throw ConfigError("train.lrf must be in [0, 1]");
    if (weight_decay < 0 || box < 0 || cls < 0 || dfl < 0 || warmup_epochs < 0 || grad_clip < 0)
      throw ConfigError("train weights and decay must be non-negative");
    if (momentum < 0 || momentum >= 1 || warmup_momentum < 0 || warmup_momentum >= 1)
      throw ConfigError("train momentum must be in [0, 1)");
    if (flip < 0 || flip > 1 || scale_jitter < 0 || scale_jitter >= 1)
      throw ConfigError("train augmentation parameters out of range");
    if (eval_interval < 0) throw ConfigError("train.eval_interval must be non-negative");
  }
};

struct EvalConfig {
  double conf = 0.001;
  double iou = 0.7;
  int max_det = 300;
  int image_size = 640;

  void validate() const {
    if (conf < 0 || conf > 1) throw ConfigError("eval.conf must be in [0, 1]");
    if (iou <= 0 || iou > 1) throw ConfigError("eval.iou must be in (0, 1]");
    if (max_det < 1) throw ConfigError("eval.max_det must be positive");
    if (image_size < 32 || image_size % 32 != 0) throw ConfigError("eval.image_size must be a multiple of 32");
  }
};

struct DataConfig {
  std::string root;
  std::string train_split = "train";
  std::string val_split = "val";
};

/// One YAML document: model keys at top level, `train`, `eval` and `data` sections.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  DataConfig data;

  void validate() const {
    model.validate();
    train.validate();
    eval.validate();
  }
};

namespace detail {

inline const std::map<std::string, std::vector<std::string>>& config_schema() {
  static const std::map<std::string, std::vector<std::string>> s = {
      {"", {"neck", "block", "down", "p2", "width", "depth", "max_channels", "nc", "reg_max", "bn_eps",
            "bn_momentum"}},
      {"train", {"epochs", "batch_size", "image_size", "lr0", "lrf", "momentum", "warmup_momentum",
                 "warmup_bias_lr", "weight_decay", "warmup_epochs", "box", "cls", "dfl", "grad_clip", "seed",
                 "augment", "flip", "scale_jitter", "eval_interval"}},
      {"eval", {"conf", "iou", "max_det", "image_size"}},
      {"data", {"root", "train_split", "val_split"}},
  };
  return s;
}

inline bool known_key(const std::string& section, const std::string& key) {
  const auto& s = config_schema();
  auto it = s.find(section);
  return it != s.end() && std::find(it->second.begin(), it->second.end(), key) != it->second.end();
}

template <typename V>
void read(const YAML::Node& n, const std::string& key, V& out, const std::string& where) {
  if (!n[key]) return;
  try {
    out = n[key].as<V>();
  } catch (const YAML::Exception&) {
    throw ConfigError("invalid value for '" + where + key + "': " + YAML::Dump(n[key]));
  }
}

inline void check_keys(const YAML::Node& doc) {
  if (!doc.IsMap()) throw ConfigError("config document must be a mapping");
  for (const auto& kv : doc) {
    const auto key = kv.first.as<std::string>();
    if (config_schema().count(key) && key != "") {
      if (!kv.second.IsMap()) throw ConfigError("config section '" + key + "' must be a mapping");
      for (const auto& sub : kv.second) {
        const auto k = sub.first.as<std::string>();
        if (!known_key(key, k)) throw ConfigError("unknown config key '" + key + "." + k + "'");
      }
    } else if (!known_key("", key)) {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
}

inline RunConfig from_yaml(const YAML::Node& doc) {
  check_keys(doc);
  RunConfig rc;
  auto& m = rc.model;
  std::string s;
  if (doc["neck"]) m.neck = parse_neck(doc["neck"].as<std::string>());
  if (doc["block"]) m.block = parse_block(doc["block"].as<std::string>());
  if (doc["down"]) m.down = parse_down(doc["down"].as<std::string>());
  read(doc, "p2", m.p2, "");
  read(doc, "width", m.width, "");
  read(doc, "depth", m.depth, "");
  read(doc, "max_channels", m.max_channels, "");
  read(doc, "nc", m.nc, "");
  read(doc, "reg_max", m.reg_max, "");
  read(doc, "bn_eps", m.bn_eps, "");
  read(doc, "bn_momentum", m.bn_momentum, "");
  if (const auto t = doc["train"]) {
    auto& c = rc.train;
    read(t, "epochs", c.epochs, "train.");
    read(t, "batch_size", c.batch_size, "train.");
    read(t, "image_size", c.image_size, "train.");
    read(t, "lr0", c.lr0, "train.");
    read(t, "lrf", c.lrf, "train.");
    read(t, "momentum", c.momentum, "train.");
    read(t, "warmup_momentum", c.warmup_momentum, "train.");
    read(t, "warmup_bias_lr", c.warmup_bias_lr, "train.");
    read(t, "weight_decay", c.weight_decay, "train.");
    read(t, "warmup_epochs", c.warmup_epochs, "train.");
    read(t, "box", c.box, "train.");
    read(t, "cls", c.cls, "train.");
    read(t, "dfl", c.dfl, "train.");
    read(t, "grad_clip", c.grad_clip, "train.");
    read(t, "seed", c.seed, "train.");
    read(t, "augment", c.augment, "train.");
    read(t, "flip", c.flip, "train.");
    read(t, "scale_jitter", c.scale_jitter, "train.");
    read(t, "eval_interval", c.eval_interval, "train.");
  }
  if (const auto e = doc["eval"]) {
    read(e, "conf", rc.eval.conf, "eval.");
    read(e, "iou", rc.eval.iou, "eval.");
    read(e, "max_det", rc.eval.max_det, "eval.");
    read(e, "image_size", rc.eval.image_size, "eval.");
  }
  if (const auto d = doc["data"]) {
    read(d, "root", rc.data.root, "data.");
    read(d, "train_split", rc.data.train_split, "data.");
    read(d, "val_split", rc.data.val_split, "data.");
  }
  rc.validate();
  return rc;
}

}  // namespace detail

inline YAML::Node load_yaml_text(const std::string& text) {
  try {
    YAML::Node n = YAML::Load(text);
    if (n.IsNull()) return YAML::Node(YAML::NodeType::Map);
    return n;
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("YAML parse error: ") + e.what());
  }
}

/// Applies `key=value` overrides (dotted keys for sections) to a config document.
inline void apply_overrides(YAML::Node& doc, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "' is not key=value");
    const std::string key = o.substr(0, eq), value = o.substr(eq + 1);
    const auto dot = key.find('.');
    const std::string section = dot == std::string::npos ? "" : key.substr(0, dot);
    const std::string leaf = dot == std::string::npos ? key : key.substr(dot + 1);
    if (!detail::known_key(section, leaf)) throw ConfigError("unknown override key '" + key + "'");
    YAML::Node v = load_yaml_text(value);
    if (section.empty())
      doc[leaf] = v;
    else
      doc[section][leaf] = v;
  }
}

inline RunConfig parse_config(const std::string& text, const std::vector<std::string>& overrides = {}) {
  YAML::Node doc = load_yaml_text(text);
  apply_overrides(doc, overrides);
  return detail::from_yaml(doc);
}

inline RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), overrides);
}

inline std::string model_yaml(const ModelConfig& m) {
  YAML::Emitter e;
  e << YAML::BeginMap;
  e << YAML::Key << "neck" << YAML::Value << to_string(m.neck);
  e << YAML::Key << "block" << YAML::Value << to_string(m.block);
  e << YAML::Key << "down" << YAML::Value << to_string(m.down);
  e << YAML::Key << "p2" << YAML::Value << m.p2;
  e << YAML::Key << "width" << YAML::Value << m.width;
  e << YAML::Key << "depth" << YAML::Value << m.depth;
  e << YAML::Key << "max_channels" << YAML::Value << m.max_channels;
  e << YAML::Key << "nc" << YAML::Value << m.nc;
  e << YAML::Key << "reg_max" << YAML::Value << m.reg_max;
  e << YAML::Key << "bn_eps" << YAML::Value << m.bn_eps;
  e << YAML::Key << "bn_momentum" << YAML::Value << m.bn_momentum;
  e << YAML::EndMap;
  return e.c_str();
}

inline ModelConfig parse_model_config(const std::string& text) { return parse_config(text).model; }

}  // namespace slyolo
