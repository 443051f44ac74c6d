#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "slyolo/config.hpp"

namespace slyolo {

// Layout: magic, version, dtype width, fused flag, config YAML, then (name, shape, values) records.
inline constexpr char kCheckpointMagic[8] = {'S', 'L', 'Y', 'O', 'L', 'O', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
  std::vector<int> shape;
  std::vector<double> values;
};

struct CheckpointData {
  std::string config_yaml;
  bool fused = false;
  std::uint32_t dtype_bytes = 4;
  std::map<std::string, CheckpointTensor> tensors;
};

namespace detail {

template <typename V>
void put(std::ostream& os, const V& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::istream& is, const std::string& path) {
  V v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(V))) throw IoError("truncated checkpoint " + path);
  return v;
}

inline std::string get_string(std::istream& is, const std::string& path) {
  const auto n = get<std::uint64_t>(is, path);
  if (n > (1ull << 30)) throw IoError("corrupt checkpoint " + path);
  std::string s(n, '\0');
  if (!is.read(s.data(), static_cast<std::streamsize>(n))) throw IoError("truncated checkpoint " + path);
  return s;
}

}  // namespace detail

template <typename T>
void save_checkpoint(Model<T>& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint " + path);
  os.write(kCheckpointMagic, 8);
  detail::put(os, kCheckpointVersion);
  detail::put(os, static_cast<std::uint32_t>(sizeof(T)));
  detail::put(os, static_cast<std::uint8_t>(model.fused()));
  const std::string yaml = model_yaml(model.config());
  detail::put(os, static_cast<std::uint64_t>(yaml.size()));
  os.write(yaml.data(), static_cast<std::streamsize>(yaml.size()));
  const auto params = model.parameters(true);
  detail::put(os, static_cast<std::uint64_t>(params.size()));
  for (const auto& [name, p] : params) {
    detail::put(os, static_cast<std::uint64_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put(os, static_cast<std::uint32_t>(p->shape.size()));
    for (int d : p->shape) detail::put(os, static_cast<std::int32_t>(d));
    detail::put(os, static_cast<std::uint64_t>(p->numel()));
    os.write(reinterpret_cast<const char*>(p->value.data()), static_cast<std::streamsize>(p->numel() * sizeof(T)));
  }
  if (!os) throw IoError("failed writing checkpoint " + path);
}

inline CheckpointData read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read checkpoint " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw IoError(path + " is not a checkpoint file");
  if (detail::get<std::uint32_t>(is, path) != kCheckpointVersion) throw IoError("unsupported checkpoint version");
  CheckpointData d;
  d.dtype_bytes = detail::get<std::uint32_t>(is, path);
  if (d.dtype_bytes != 4 && d.dtype_bytes != 8) throw IoError("unsupported checkpoint dtype");
  d.fused = detail::get<std::uint8_t>(is, path) != 0;
  d.config_yaml = detail::get_string(is, path);
  const auto count = detail::get<std::uint64_t>(is, path);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = detail::get_string(is, path);
    CheckpointTensor t;
    const auto nd = detail::get<std::uint32_t>(is, path);
    if (nd > 8) throw IoError("corrupt checkpoint " + path);
    for (std::uint32_t k = 0; k < nd; ++k) t.shape.push_back(detail::get<std::int32_t>(is, path));
    const auto n = detail::get<std::uint64_t>(is, path);
    t.values.resize(n);
    for (std::uint64_t k = 0; k < n; ++k)
      t.values[k] = d.dtype_bytes == 4 ? detail::get<float>(is, path) : detail::get<double>(is, path);
    d.tensors.emplace(name, std::move(t));
  }
  return d;
}

/// Rebuilds the model described by a checkpoint (fusing first when the file is deploy-mode) and loads its tensors.
template <typename T>
Model<T> load_checkpoint(const std::string& path) {
  const CheckpointData d = read_checkpoint(path);
  Model<T> model(parse_model_config(d.config_yaml), 0);
  if (d.fused) model.fuse();
  std::size_t seen = 0;
  model.visit([&](const std::string& name, Param<T>& p) {
    auto it = d.tensors.find(name);
    if (it == d.tensors.end()) throw IoError("checkpoint " + path + " lacks tensor " + name);
    if (it->second.shape != p.shape) throw IoError("checkpoint tensor " + name + " has the wrong shape");
    for (std::size_t i = 0; i < p.numel(); ++i) p.value[i] = static_cast<T>(it->second.values[i]);
    ++seen;
  });
  if (seen != d.tensors.size()) throw IoError("checkpoint " + path + " has tensors the model does not know");
  return model;
}

}  // namespace slyolo
